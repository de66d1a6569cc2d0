//! Independent oracles and generators shared by integration tests.
//!
//! Nothing here calls into the crate's normalization, diff or locality
//! code; the oracles work on raw strings.
#![allow(dead_code)]

pub mod schedules;
pub mod stub;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};

pub const OP_OPEN: &str = "# <SPARK:OPERATOR>";
pub const OP_CLOSE: &str = "# </SPARK:OPERATOR>";
pub const ACT_OPEN: &str = "# <SPARK:ACTION>";
pub const ACT_CLOSE: &str = "# </SPARK:ACTION>";

/// CRLF/CR to LF, trailing blanks stripped per line.
pub fn normalize_oracle(text: &str) -> String {
    text.replace("\r\n", "\n")
        .replace('\r', "\n")
        .split('\n')
        .map(|l| l.trim_end_matches([' ', '\t', '\u{b}', '\u{c}']))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A program cut at its four tag lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub lines: Vec<String>,
    pub final_newline: bool,
    /// (open, close) line indices.
    pub op: (usize, usize),
    pub act: (usize, usize),
}

impl Split {
    pub fn body(&self, operator: bool) -> &[String] {
        let (o, c) = if operator { self.op } else { self.act };
        &self.lines[o + 1..c]
    }

    /// Every line except those inside the given bodies.
    pub fn outside(&self, drop_op: bool, drop_act: bool) -> Vec<&str> {
        self.lines
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                !(drop_op && *i > self.op.0 && *i < self.op.1
                    || drop_act && *i > self.act.0 && *i < self.act.1)
            })
            .map(|(_, l)| l.as_str())
            .collect()
    }
}

pub fn split_oracle(raw: &str) -> Option<Split> {
    let norm = normalize_oracle(raw);
    let (lines, final_newline): (Vec<String>, bool) = if norm.is_empty() {
        (Vec::new(), false)
    } else if let Some(body) = norm.strip_suffix('\n') {
        (body.split('\n').map(String::from).collect(), true)
    } else {
        (norm.split('\n').map(String::from).collect(), false)
    };
    let find = |marker: &str| {
        let hits: Vec<usize> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.trim() == marker)
            .map(|(i, _)| i)
            .collect();
        (hits.len() == 1).then(|| hits[0])
    };
    let op = (find(OP_OPEN)?, find(OP_CLOSE)?);
    let act = (find(ACT_OPEN)?, find(ACT_CLOSE)?);
    if op.0 > op.1 || act.0 > act.1 {
        return None;
    }
    if !(op.1 < act.0 || act.1 < op.0) {
        return None;
    }
    Some(Split {
        lines,
        final_newline,
        op,
        act,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleVerdict {
    pub local: bool,
    pub entangled: bool,
    pub parse_failure: bool,
}

/// Byte-comparison verdict. `factor`: Some(true) operator, Some(false)
/// action, None for "either".
pub fn locality_oracle(parent: &str, child: &str, factor: Option<bool>) -> OracleVerdict {
    let p = split_oracle(parent).expect("parent must parse");
    let Some(c) = split_oracle(child) else {
        return OracleVerdict {
            local: false,
            entangled: true,
            parse_failure: true,
        };
    };
    let same_nl = p.final_newline == c.final_newline;
    let local_for = |op: bool| same_nl && p.outside(op, !op) == c.outside(op, !op);
    let local = match factor {
        Some(op) => local_for(op),
        None => local_for(true) || local_for(false),
    };
    let frozen = !same_nl || p.outside(true, true) != c.outside(true, true);
    let op_changed = p.body(true) != c.body(true);
    let act_changed = p.body(false) != c.body(false);
    OracleVerdict {
        local,
        entangled: frozen || (op_changed && act_changed),
        parse_failure: false,
    }
}

const ALPHABET: [&str; 3] = ["a", "b", "c"];

fn filler(rng: &mut impl Rng, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| ALPHABET.choose(rng).unwrap().to_string())
        .collect()
}

/// Random tagged program over a three-line alphabet, at most `max_lines`
/// lines (`max_lines` >= 4).
pub fn gen_program(rng: &mut impl Rng, max_lines: usize) -> String {
    let spare = max_lines - 4;
    let mut cuts: Vec<usize> = (0..4).map(|_| rng.random_range(0..=spare)).collect();
    cuts.push(0);
    cuts.push(spare);
    cuts.sort_unstable();
    let sizes: Vec<usize> = cuts.windows(2).map(|w| w[1] - w[0]).collect();
    let (first, second) = if rng.random_bool(0.5) {
        ((OP_OPEN, OP_CLOSE), (ACT_OPEN, ACT_CLOSE))
    } else {
        ((ACT_OPEN, ACT_CLOSE), (OP_OPEN, OP_CLOSE))
    };
    let mut lines = filler(rng, sizes[0]);
    lines.push(first.0.into());
    lines.extend(filler(rng, sizes[1]));
    lines.push(first.1.into());
    lines.extend(filler(rng, sizes[2]));
    lines.push(second.0.into());
    lines.extend(filler(rng, sizes[3]));
    lines.push(second.1.into());
    lines.extend(filler(rng, sizes[4]));
    let mut text = lines.join("\n");
    if rng.random_bool(0.8) {
        text.push('\n');
    }
    text
}

/// A child derived from `parent`: in-body edits, edits anywhere, tag
/// damage, whitespace-only re-rendering, or no change.
pub fn mutate(rng: &mut impl Rng, parent: &str) -> String {
    let p = split_oracle(parent).expect("parent parses");
    let mut lines = p.lines.clone();
    let mut final_nl = p.final_newline;
    let edit_range = |rng: &mut dyn RngCore, lines: &mut Vec<String>, lo: usize, hi: usize| {
        // Replace, insert or delete one line in [lo, hi].
        let at = lo + (rng.next_u32() as usize) % (hi - lo + 1);
        let sym = ALPHABET[(rng.next_u32() % 3) as usize].to_string();
        match rng.next_u32() % 3 {
            0 if at < hi => lines[at] = sym,
            1 if at < hi => {
                lines.remove(at);
            }
            _ => lines.insert(at, sym),
        }
    };
    match rng.random_range(0..8) {
        0 => {}
        1 | 2 => {
            let (o, c) = if rng.random_bool(0.5) { p.op } else { p.act };
            edit_range(rng, &mut lines, o + 1, c);
        }
        3 => {
            for (o, c) in [p.op, p.act] {
                edit_range(rng, &mut lines, o + 1, c);
            }
        }
        4 => {
            let n = lines.len();
            edit_range(rng, &mut lines, 0, n);
        }
        5 => {
            let tag_lines = [p.op.0, p.op.1, p.act.0, p.act.1];
            let t = *tag_lines.choose(rng).unwrap();
            match rng.random_range(0..3) {
                0 => {
                    lines.remove(t);
                }
                1 => {
                    let dup = lines[t].clone();
                    lines.insert(rng.random_range(0..=lines.len()), dup);
                }
                _ => lines[t] = format!("  {}", lines[t]),
            }
        }
        6 => final_nl = !final_nl,
        _ => {
            let mut out = String::new();
            for l in &lines {
                out.push_str(l);
                out.push_str(["", " ", "\t "][rng.random_range(0..3)]);
                out.push_str(["\n", "\r\n"][rng.random_range(0..2)]);
            }
            if !final_nl {
                out = out.trim_end_matches(['\n', '\r', ' ', '\t']).to_string();
            }
            return out;
        }
    }
    let mut text = lines.join("\n");
    if final_nl && !lines.is_empty() {
        text.push('\n');
    }
    text
}

/// Independent statement of the synthetic scoring rule with default
/// parameters: returns (fitness, macs).
pub fn synthetic_oracle(op_body: &[&str], act_body: &[&str]) -> (f64, u64) {
    let n = op_body.len() + act_body.len();
    let macs = 250_000 + 4_000 * n as u64;
    if act_body.iter().all(|l| l.trim().is_empty()) {
        return (0.0, macs);
    }
    let count = |ls: &[&str]| ls.iter().map(|l| l.matches("gain").count()).sum::<usize>() as f64;
    let over = n.saturating_sub(40) as f64;
    let raw = 0.05 * count(act_body) + 0.03 * count(op_body) - 0.02 * over;
    (raw.clamp(0.0, 1.0), macs)
}
