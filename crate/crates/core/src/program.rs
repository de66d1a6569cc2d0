//! Region-tagged candidate programs.
//!
//! A candidate is plain text carrying two editable factor regions, each
//! wrapped by a pair of full-line boundary tags. Everything outside the two
//! region bodies (tag lines included) is frozen scaffolding.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The discrete intervention target of one evolution step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Factor {
    Operator,
    Action,
}

impl Factor {
    pub const ALL: [Factor; 2] = [Factor::Operator, Factor::Action];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Operator => "OPERATOR",
            Factor::Action => "ACTION",
        }
    }

    /// The factor that is not `self`.
    pub fn other(self) -> Factor {
        match self {
            Factor::Operator => Factor::Action,
            Factor::Action => Factor::Operator,
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid factor token {0:?}")]
pub struct InvalidFactorToken(pub String);

/// Parses a router answer into a factor.
///
/// The answer is trimmed and case-folded, then compared against the two
/// admissible tokens. There is no substring matching.
pub fn parse_factor_token(text: &str) -> Result<Factor, InvalidFactorToken> {
    let token = text.trim();
    if token.eq_ignore_ascii_case("OPERATOR") {
        Ok(Factor::Operator)
    } else if token.eq_ignore_ascii_case("ACTION") {
        Ok(Factor::Action)
    } else {
        Err(InvalidFactorToken(text.to_string()))
    }
}

impl FromStr for Factor {
    type Err = InvalidFactorToken;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_factor_token(s)
    }
}

/// Normalized program text: LF line endings, no trailing whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedText {
    lines: Vec<String>,
    final_newline: bool,
}

impl NormalizedText {
    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn has_final_newline(&self) -> bool {
        self.final_newline
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Renders the normalized text back to a string, byte-exact.
    pub fn serialize(&self) -> String {
        let mut out = self.lines.join("\n");
        if self.final_newline {
            out.push('\n');
        }
        out
    }

    /// Builds normalized text from lines that may themselves carry
    /// trailing whitespace or carriage returns.
    pub fn from_lines<S: AsRef<str>>(lines: &[S], final_newline: bool) -> Self {
        let mut joined = lines.iter().map(|l| l.as_ref()).collect::<Vec<_>>().join("\n");
        if final_newline && !lines.is_empty() {
            joined.push('\n');
        }
        normalize_str(&joined)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error("program text is not valid UTF-8 (first bad byte at offset {offset})")]
    Encoding { offset: usize },
    #[error(transparent)]
    Region(#[from] RegionError),
}

/// Normalizes raw bytes. Fails only on invalid UTF-8.
pub fn normalize(bytes: &[u8]) -> Result<NormalizedText, ProgramError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ProgramError::Encoding {
        offset: e.valid_up_to(),
    })?;
    Ok(normalize_str(text))
}

/// Normalizes text: CRLF and lone CR become LF, trailing whitespace is
/// stripped from every line. Nothing else is touched.
pub fn normalize_str(text: &str) -> NormalizedText {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    let canonical = unified
        .split('\n')
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n");
    if canonical.is_empty() {
        return NormalizedText {
            lines: Vec::new(),
            final_newline: false,
        };
    }
    let final_newline = canonical.ends_with('\n');
    let body = if final_newline {
        &canonical[..canonical.len() - 1]
    } else {
        &canonical[..]
    };
    NormalizedText {
        lines: body.split('\n').map(str::to_string).collect(),
        final_newline,
    }
}

/// Boundary tag markers. A line is a tag line when its trimmed content
/// equals the marker exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TagConfig {
    pub operator_open: String,
    pub operator_close: String,
    pub action_open: String,
    pub action_close: String,
}

impl Default for TagConfig {
    fn default() -> Self {
        Self {
            operator_open: "# <SPARK:OPERATOR>".into(),
            operator_close: "# </SPARK:OPERATOR>".into(),
            action_open: "# <SPARK:ACTION>".into(),
            action_close: "# </SPARK:ACTION>".into(),
        }
    }
}

impl TagConfig {
    pub fn open(&self, factor: Factor) -> &str {
        match factor {
            Factor::Operator => &self.operator_open,
            Factor::Action => &self.action_open,
        }
    }

    pub fn close(&self, factor: Factor) -> &str {
        match factor {
            Factor::Operator => &self.operator_close,
            Factor::Action => &self.action_close,
        }
    }

    pub fn markers(&self) -> [&str; 4] {
        [
            &self.operator_open,
            &self.operator_close,
            &self.action_open,
            &self.action_close,
        ]
    }

    /// Checks that the four markers are non-empty, already trimmed and
    /// pairwise distinct.
    pub fn validate(&self) -> Result<(), String> {
        let markers = self.markers();
        for (i, m) in markers.iter().enumerate() {
            if m.trim().is_empty() {
                return Err("tag markers must be non-empty".into());
            }
            if m.trim() != *m {
                return Err(format!("tag marker {m:?} has surrounding whitespace"));
            }
            if markers[..i].contains(m) {
                return Err(format!("tag marker {m:?} is used twice"));
            }
        }
        Ok(())
    }

    /// True when every marker occurs as a full line at least once.
    pub fn all_present<S: AsRef<str>>(&self, lines: &[S]) -> bool {
        self.markers()
            .iter()
            .all(|m| lines.iter().any(|l| l.as_ref().trim() == *m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagSide {
    Open,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionErrorKind {
    /// Neither the open nor the close tag occurs.
    Missing,
    /// A tag occurs more than once.
    Duplicated,
    /// An open tag has no close tag after it.
    Unclosed,
    /// A close tag occurs with no open tag before it.
    UnexpectedClose,
    /// The two regions overlap or nest.
    Interleaved,
}

impl fmt::Display for RegionErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RegionErrorKind::Missing => "missing",
            RegionErrorKind::Duplicated => "duplicated",
            RegionErrorKind::Unclosed => "unclosed",
            RegionErrorKind::UnexpectedClose => "unexpected close",
            RegionErrorKind::Interleaved => "interleaved",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{factor} region tag error: {kind}{}", line.map(|l| format!(" at line {}", l + 1)).unwrap_or_default())]
pub struct RegionError {
    pub factor: Factor,
    pub kind: RegionErrorKind,
    /// Zero-based line index of the offending tag, when one exists.
    pub line: Option<usize>,
}

/// Which part of a program a line belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Region {
    Operator,
    Action,
    Frozen,
}

impl From<Factor> for Region {
    fn from(f: Factor) -> Self {
        match f {
            Factor::Operator => Region::Operator,
            Factor::Action => Region::Action,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Operator => "OPERATOR",
            Region::Action => "ACTION",
            Region::Frozen => "FROZEN",
        })
    }
}

/// Half-open line spans of the two region bodies. All other lines,
/// including the four tag lines, are frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMap {
    pub operator_span: Range<usize>,
    pub action_span: Range<usize>,
    pub line_count: usize,
}

impl RegionMap {
    pub fn span(&self, factor: Factor) -> Range<usize> {
        match factor {
            Factor::Operator => self.operator_span.clone(),
            Factor::Action => self.action_span.clone(),
        }
    }

    pub fn region_of(&self, line: usize) -> Region {
        if self.operator_span.contains(&line) {
            Region::Operator
        } else if self.action_span.contains(&line) {
            Region::Action
        } else {
            Region::Frozen
        }
    }

    /// Factors in the order their regions appear in the file.
    pub fn factor_order(&self) -> [Factor; 2] {
        if self.operator_span.start < self.action_span.start {
            [Factor::Operator, Factor::Action]
        } else {
            [Factor::Action, Factor::Operator]
        }
    }

    /// The complement of the two bodies, as up to three ranges in file order.
    pub fn frozen_spans(&self) -> Vec<Range<usize>> {
        let [first, second] = self.factor_order();
        let a = self.span(first);
        let b = self.span(second);
        [0..a.start, a.end..b.start, b.end..self.line_count]
            .into_iter()
            .filter(|r| !r.is_empty())
            .collect()
    }
}

/// Locates the two region bodies in normalized lines.
pub fn parse_regions<S: AsRef<str>>(lines: &[S], tags: &TagConfig) -> Result<RegionMap, RegionError> {
    let find = |marker: &str| -> Vec<usize> {
        lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.as_ref().trim() == marker)
            .map(|(i, _)| i)
            .collect()
    };

    let mut spans = Vec::with_capacity(2);
    for factor in Factor::ALL {
        let opens = find(tags.open(factor));
        let closes = find(tags.close(factor));
        let err = |kind, line| RegionError { factor, kind, line };
        if opens.len() > 1 {
            return Err(err(RegionErrorKind::Duplicated, Some(opens[1])));
        }
        if closes.len() > 1 {
            return Err(err(RegionErrorKind::Duplicated, Some(closes[1])));
        }
        let span = match (opens.first(), closes.first()) {
            (None, None) => return Err(err(RegionErrorKind::Missing, None)),
            (Some(&o), None) => return Err(err(RegionErrorKind::Unclosed, Some(o))),
            (None, Some(&c)) => return Err(err(RegionErrorKind::UnexpectedClose, Some(c))),
            (Some(&o), Some(&c)) if c < o => {
                return Err(err(RegionErrorKind::UnexpectedClose, Some(c)))
            }
            (Some(&o), Some(&c)) => (o, c),
        };
        spans.push(span);
    }

    let (op_open, op_close) = spans[0];
    let (ac_open, ac_close) = spans[1];
    // Tag-to-tag intervals must be disjoint.
    if !(op_close < ac_open || ac_close < op_open) {
        let line = if ac_open > op_open { ac_open } else { op_open };
        let factor = if ac_open > op_open {
            Factor::Action
        } else {
            Factor::Operator
        };
        return Err(RegionError {
            factor,
            kind: RegionErrorKind::Interleaved,
            line: Some(line),
        });
    }

    Ok(RegionMap {
        operator_span: op_open + 1..op_close,
        action_span: ac_open + 1..ac_close,
        line_count: lines.len(),
    })
}

/// A normalized, region-tagged candidate program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedProgram {
    text: NormalizedText,
    regions: RegionMap,
    digest: String,
}

impl TaggedProgram {
    pub fn parse(raw: &str, tags: &TagConfig) -> Result<Self, ProgramError> {
        Self::from_normalized(normalize_str(raw), tags)
    }

    pub fn parse_bytes(raw: &[u8], tags: &TagConfig) -> Result<Self, ProgramError> {
        Self::from_normalized(normalize(raw)?, tags)
    }

    pub fn from_normalized(text: NormalizedText, tags: &TagConfig) -> Result<Self, ProgramError> {
        let regions = parse_regions(text.lines(), tags)?;
        let digest = content_digest(&text);
        Ok(Self {
            text,
            regions,
            digest,
        })
    }

    pub fn text(&self) -> &NormalizedText {
        &self.text
    }

    pub fn lines(&self) -> &[String] {
        self.text.lines()
    }

    pub fn regions(&self) -> &RegionMap {
        &self.regions
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn body(&self, factor: Factor) -> &[String] {
        &self.text.lines()[self.regions.span(factor)]
    }

    /// Frozen lines grouped into the segments between region bodies.
    pub fn frozen_segments(&self) -> [&[String]; 3] {
        let lines = self.text.lines();
        let [first, second] = self.regions.factor_order();
        let a = self.regions.span(first);
        let b = self.regions.span(second);
        [
            &lines[..a.start],
            &lines[a.end..b.start],
            &lines[b.end..],
        ]
    }

    pub fn serialize(&self) -> String {
        self.text.serialize()
    }

    pub fn line_count(&self) -> usize {
        self.text.len()
    }
}

/// SHA-256 over the serialized normalized text, hex encoded.
pub fn content_digest(text: &NormalizedText) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.serialize().as_bytes());
    hex::encode(hasher.finalize())
}
