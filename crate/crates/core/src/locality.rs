//! Line-level edit sets between a parent and its offspring, and the
//! factor-locality verdict derived from them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::program::{Factor, Region, RegionMap, TagConfig, TaggedProgram};

/// One aligned difference block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    pub parent: Range<usize>,
    pub child: Range<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSet {
    pub changed_parent_lines: BTreeSet<usize>,
    pub changed_child_lines: BTreeSet<usize>,
    pub hunks: Vec<Hunk>,
    /// The presence of a trailing newline differs. Counts as a frozen edit.
    pub final_newline_changed: bool,
}

impl EditSet {
    pub fn is_empty(&self) -> bool {
        self.hunks.is_empty() && !self.final_newline_changed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Keep,
    Delete,
    Insert,
}

/// LCS alignment of two line sequences as a list of keep/delete/insert ops.
///
/// Ties prefer the earliest alignment: a shared line is matched as soon as
/// possible, and deletions are emitted before insertions.
fn align<'a, S: AsRef<str>>(a: &'a [S], b: &'a [S]) -> Vec<Op> {
    // Intern lines so the DP compares integers.
    let mut ids: HashMap<&'a str, u32> = HashMap::new();
    let mut intern = |s: &'a S| {
        let next = ids.len() as u32;
        *ids.entry(s.as_ref()).or_insert(next)
    };
    let a: Vec<u32> = a.iter().map(&mut intern).collect();
    let b: Vec<u32> = b.iter().map(&mut intern).collect();

    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let (ra, rb) = (&a[prefix..], &b[prefix..]);
    let (n, m) = (ra.len(), rb.len());

    // suffix[i][j] = LCS length of ra[i..] and rb[j..]
    let width = m + 1;
    let mut suffix = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i * width + j] = if ra[i] == rb[j] {
                suffix[(i + 1) * width + j + 1] + 1
            } else {
                suffix[(i + 1) * width + j].max(suffix[i * width + j + 1])
            };
        }
    }

    let mut ops = vec![Op::Keep; prefix];
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && ra[i] == rb[j] {
            ops.push(Op::Keep);
            i += 1;
            j += 1;
        } else if j == m || (i < n && suffix[(i + 1) * width + j] >= suffix[i * width + j + 1]) {
            ops.push(Op::Delete);
            i += 1;
        } else {
            ops.push(Op::Insert);
            j += 1;
        }
    }
    ops
}

/// Line diff over normalized line sequences.
pub fn diff_lines<S: AsRef<str>>(parent: &[S], child: &[S]) -> EditSet {
    let mut edit = EditSet::default();
    let (mut i, mut j) = (0usize, 0usize);
    let mut open: Option<(usize, usize)> = None;
    for op in align(parent, child) {
        match op {
            Op::Keep => {
                if let Some((pi, cj)) = open.take() {
                    edit.hunks.push(Hunk {
                        parent: pi..i,
                        child: cj..j,
                    });
                }
                i += 1;
                j += 1;
            }
            Op::Delete => {
                open.get_or_insert((i, j));
                edit.changed_parent_lines.insert(i);
                i += 1;
            }
            Op::Insert => {
                open.get_or_insert((i, j));
                edit.changed_child_lines.insert(j);
                j += 1;
            }
        }
    }
    if let Some((pi, cj)) = open {
        edit.hunks.push(Hunk {
            parent: pi..i,
            child: cj..j,
        });
    }
    edit
}

/// Diff of two tagged programs, including the trailing-newline flag.
pub fn diff(parent: &TaggedProgram, child: &TaggedProgram) -> EditSet {
    let mut edit = diff_lines(parent.lines(), child.lines());
    edit.final_newline_changed =
        parent.text().has_final_newline() != child.text().has_final_newline();
    edit
}

/// A small set over {OPERATOR, ACTION, FROZEN}.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RegionSet(u8);

impl RegionSet {
    fn bit(r: Region) -> u8 {
        match r {
            Region::Operator => 1,
            Region::Action => 2,
            Region::Frozen => 4,
        }
    }

    pub fn insert(&mut self, r: Region) {
        self.0 |= Self::bit(r);
    }

    pub fn contains(&self, r: Region) -> bool {
        self.0 & Self::bit(r) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn only(r: Region) -> Self {
        Self(Self::bit(r))
    }

    pub fn is_subset(&self, other: RegionSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Region> + '_ {
        [Region::Operator, Region::Action, Region::Frozen]
            .into_iter()
            .filter(|r| self.contains(*r))
    }

    /// Both factor regions touched, or any frozen line touched.
    pub fn is_entangled(&self) -> bool {
        self.contains(Region::Frozen)
            || (self.contains(Region::Operator) && self.contains(Region::Action))
    }
}

impl FromIterator<Region> for RegionSet {
    fn from_iter<T: IntoIterator<Item = Region>>(iter: T) -> Self {
        let mut s = RegionSet::default();
        for r in iter {
            s.insert(r);
        }
        s
    }
}

impl fmt::Display for RegionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|r| r.to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

impl Serialize for RegionSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for RegionSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Vec::<Region>::deserialize(d)?.into_iter().collect())
    }
}

/// Maps changed lines to regions, on both sides of the edit.
///
/// Deleted or replaced parent lines are looked up in the parent's map,
/// inserted child lines in the child's map. Tag lines are frozen.
pub fn attribute(edit: &EditSet, parent_map: &RegionMap, child_map: &RegionMap) -> RegionSet {
    let mut touched: RegionSet = edit
        .changed_parent_lines
        .iter()
        .map(|&i| parent_map.region_of(i))
        .chain(edit.changed_child_lines.iter().map(|&j| child_map.region_of(j)))
        .collect();
    if edit.final_newline_changed {
        touched.insert(Region::Frozen);
    }
    touched
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityVerdict {
    pub selected: Option<Factor>,
    pub is_factor_local: bool,
    pub touched_regions: RegionSet,
    pub entangled: bool,
    /// The child's region tags could not be parsed.
    pub parse_failure: bool,
}

impl LocalityVerdict {
    /// Verdict for a child whose tags are broken.
    pub fn tag_failure(selected: Option<Factor>) -> Self {
        Self {
            selected,
            is_factor_local: false,
            touched_regions: RegionSet::only(Region::Frozen),
            entangled: true,
            parse_failure: true,
        }
    }
}

/// True when every line outside the selected body is byte-identical.
fn preserved_outside(parent: &TaggedProgram, child: &TaggedProgram, selected: Factor) -> bool {
    parent.regions().factor_order() == child.regions().factor_order()
        && parent.text().has_final_newline() == child.text().has_final_newline()
        && parent.body(selected.other()) == child.body(selected.other())
        && parent.frozen_segments() == child.frozen_segments()
}

/// Decides whether `child` is a factor-local edit of `parent` under `selected`.
pub fn check_factor_local(
    parent: &TaggedProgram,
    child: &TaggedProgram,
    selected: Factor,
) -> LocalityVerdict {
    let edit = diff(parent, child);
    let touched = attribute(&edit, parent.regions(), child.regions());
    let within = touched.is_subset(RegionSet::only(selected.into()));
    LocalityVerdict {
        selected: Some(selected),
        is_factor_local: within && preserved_outside(parent, child, selected),
        touched_regions: touched,
        entangled: touched.is_entangled(),
        parse_failure: false,
    }
}

/// Locality against whichever factor the edit stays inside, if any.
/// Used where no factor was routed (free-form editing).
pub fn check_any_factor_local(parent: &TaggedProgram, child: &TaggedProgram) -> LocalityVerdict {
    let edit = diff(parent, child);
    let touched = attribute(&edit, parent.regions(), child.regions());
    let local = Factor::ALL.into_iter().find(|&f| {
        touched.is_subset(RegionSet::only(f.into())) && preserved_outside(parent, child, f)
    });
    LocalityVerdict {
        selected: None,
        is_factor_local: local.is_some(),
        touched_regions: touched,
        entangled: touched.is_entangled(),
        parse_failure: false,
    }
}

/// Parses raw child text and checks locality; a child with broken tags is
/// entangled by definition.
pub fn check_factor_local_text(
    parent: &TaggedProgram,
    child_text: &str,
    tags: &TagConfig,
    selected: Option<Factor>,
) -> LocalityVerdict {
    match TaggedProgram::parse(child_text, tags) {
        Ok(child) => match selected {
            Some(f) => check_factor_local(parent, &child, f),
            None => check_any_factor_local(parent, &child),
        },
        Err(_) => LocalityVerdict::tag_failure(selected),
    }
}

/// Fraction of entangled verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub count: usize,
    pub total: usize,
    /// No observations; `value` is 0 by convention.
    pub empty: bool,
}

impl Rate {
    pub fn from_counts(count: usize, total: usize) -> Self {
        Self {
            value: if total == 0 { 0.0 } else { count as f64 / total as f64 },
            count,
            total,
            empty: total == 0,
        }
    }
}

pub fn entanglement_rate<'a, I>(verdicts: I) -> Rate
where
    I: IntoIterator<Item = &'a LocalityVerdict>,
{
    let (mut hit, mut total) = (0, 0);
    for v in verdicts {
        total += 1;
        hit += usize::from(v.entangled);
    }
    Rate::from_counts(hit, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::TagConfig;

    fn program(op: &[&str], act: &[&str]) -> TaggedProgram {
        let t = TagConfig::default();
        let mut lines = vec!["import torch", "class Net:"];
        lines.push(&t.operator_open);
        lines.extend_from_slice(op);
        lines.push(&t.operator_close);
        lines.push("    pass");
        lines.push(&t.action_open);
        lines.extend_from_slice(act);
        lines.push(&t.action_close);
        lines.push("def main(): pass");
        TaggedProgram::parse(&(lines.join("\n") + "\n"), &t).unwrap()
    }

    #[test]
    fn identical_programs_have_empty_edit() {
        let p = program(&["a"], &["b"]);
        let e = diff(&p, &p);
        assert!(e.is_empty());
        assert!(e.changed_parent_lines.is_empty());
    }

    #[test]
    fn single_replacement() {
        let a: Vec<String> = (0..10).map(|i| format!("l{i}")).collect();
        let mut b = a.clone();
        b[7] = "changed".into();
        let e = diff_lines(&a, &b);
        assert_eq!(e.changed_parent_lines, BTreeSet::from([7]));
        assert_eq!(e.changed_child_lines, BTreeSet::from([7]));
        assert_eq!(
            e.hunks,
            vec![Hunk {
                parent: 7..8,
                child: 7..8
            }]
        );
    }

    #[test]
    fn earliest_alignment_on_duplicates() {
        let e = diff_lines(&["x", "x"], &["x"]);
        assert_eq!(e.changed_parent_lines, BTreeSet::from([1]));
    }

    #[test]
    fn action_only_edit() {
        let p = program(&["op"], &["a1", "a2"]);
        let c = program(&["op"], &["a1", "a2 changed"]);
        let e = diff(&p, &c);
        assert_eq!(
            attribute(&e, p.regions(), c.regions()),
            RegionSet::only(Region::Action)
        );
        let v = check_factor_local(&p, &c, Factor::Action);
        assert!(v.is_factor_local);
        assert!(!v.entangled);
        let v = check_factor_local(&p, &c, Factor::Operator);
        assert!(!v.is_factor_local);
        assert!(!v.entangled);
    }

    #[test]
    fn growing_the_action_region_is_attributed_to_action() {
        let p = program(&["op"], &["a1"]);
        let c = program(&["op"], &["a1", "a2", "a3"]);
        let e = diff(&p, &c);
        assert!(e.changed_parent_lines.is_empty());
        assert_eq!(
            attribute(&e, p.regions(), c.regions()),
            RegionSet::only(Region::Action)
        );
    }

    #[test]
    fn edit_over_close_tag_touches_frozen() {
        let t = TagConfig::default();
        let p = program(&["op"], &["a"]);
        let text = p.serialize().replace(&t.operator_close, "# closed");
        let text = text.replace("    pass", &t.operator_close);
        let c = TaggedProgram::parse(&text, &t).unwrap();
        let touched = attribute(&diff(&p, &c), p.regions(), c.regions());
        assert!(touched.contains(Region::Frozen));
    }

    #[test]
    fn both_bodies_is_entangled_regardless_of_selection() {
        let p = program(&["op"], &["a"]);
        let c = program(&["op2"], &["a2"]);
        for f in Factor::ALL {
            let v = check_factor_local(&p, &c, f);
            assert!(v.entangled);
            assert!(!v.is_factor_local);
        }
    }

    #[test]
    fn final_newline_change_is_frozen() {
        let p = program(&["op"], &["a"]);
        let t = TagConfig::default();
        let c = TaggedProgram::parse(p.serialize().trim_end_matches('\n'), &t).unwrap();
        let v = check_factor_local(&p, &c, Factor::Operator);
        assert!(!v.is_factor_local);
        assert!(v.entangled);
    }

    #[test]
    fn broken_child_tags_count_as_entangled() {
        let p = program(&["op"], &["a"]);
        let v = check_factor_local_text(&p, "no tags at all", &TagConfig::default(), Some(Factor::Action));
        assert!(v.parse_failure);
        assert!(v.entangled);
        assert_eq!(v.touched_regions, RegionSet::only(Region::Frozen));
    }

    #[test]
    fn rate_arithmetic() {
        let p = program(&["op"], &["a"]);
        let clean = check_factor_local(&p, &p, Factor::Action);
        let dirty = LocalityVerdict::tag_failure(None);
        let r = entanglement_rate([&dirty, &clean, &clean, &dirty]);
        assert_eq!(r.value, 0.5);
        assert_eq!(entanglement_rate([&clean, &clean]).value, 0.0);
        let none: [&LocalityVerdict; 0] = [];
        let r = entanglement_rate(none);
        assert!(r.empty);
        assert_eq!(r.value, 0.0);
    }
}
