//! Islanded MAP-Elites archive.
//!
//! Each island keeps at most one elite per descriptor cell. Cells are keyed
//! by a fitness bin and a log-spaced MACs bin. Islands exchange their best
//! elites around a ring every `migration_period` iterations.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::TaggedProgram;

/// Evaluation result of a candidate: primary fitness plus resource counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub fitness: f64,
    pub macs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<u64>,
}

impl Descriptor {
    pub fn new(fitness: f64, macs: u64) -> Self {
        Self {
            fitness,
            macs,
            params: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningSpec {
    pub fitness_bins: usize,
    pub fitness_min: f64,
    pub fitness_max: f64,
    pub macs_bins: usize,
    pub macs_min: f64,
    pub macs_max: f64,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self {
            fitness_bins: 10,
            fitness_min: 0.0,
            fitness_max: 1.0,
            macs_bins: 8,
            macs_min: 1e5,
            macs_max: 1e7,
        }
    }
}

impl BinningSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.fitness_bins == 0 {
            errs.push("binning.fitness_bins must be at least 1".into());
        }
        if self.macs_bins == 0 {
            errs.push("binning.macs_bins must be at least 1".into());
        }
        // Negated so NaN bounds are rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.fitness_max > self.fitness_min) {
            errs.push("binning.fitness_max must exceed fitness_min".into());
        }
        if !(self.macs_min > 0.0 && self.macs_max > self.macs_min) {
            errs.push("binning.macs range must satisfy 0 < macs_min < macs_max".into());
        }
        errs
    }
}

/// Discretized descriptor: (fitness bin, macs bin).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey(pub usize, pub usize);

impl CellKey {
    fn l1(&self, other: &CellKey) -> usize {
        self.0.abs_diff(other.0) + self.1.abs_diff(other.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArchiveError {
    #[error("fitness is NaN")]
    NanFitness,
    #[error("archive is empty")]
    Empty,
    #[error("island {0} does not exist")]
    NoSuchIsland(usize),
}

fn clamp_bin(position: f64, bins: usize) -> usize {
    if position.is_nan() || position <= 0.0 {
        0
    } else {
        (position.floor() as usize).min(bins - 1)
    }
}

/// Maps a descriptor to its cell. Out-of-range values clamp to edge bins.
pub fn bin(d: &Descriptor, spec: &BinningSpec) -> Result<CellKey, ArchiveError> {
    if d.fitness.is_nan() {
        return Err(ArchiveError::NanFitness);
    }
    let f = (d.fitness - spec.fitness_min) / (spec.fitness_max - spec.fitness_min)
        * spec.fitness_bins as f64;
    let m = if d.macs == 0 {
        0.0
    } else {
        let lo = spec.macs_min.ln();
        ((d.macs as f64).ln() - lo) / (spec.macs_max.ln() - lo) * spec.macs_bins as f64
    };
    Ok(CellKey(
        clamp_bin(f, spec.fitness_bins),
        clamp_bin(m, spec.macs_bins),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elite {
    pub program: TaggedProgram,
    pub descriptor: Descriptor,
    pub key: CellKey,
    /// Attempt index at which the candidate was produced (0 for the seed).
    pub iteration: usize,
}

impl Elite {
    pub fn digest(&self) -> &str {
        self.program.digest()
    }
}

/// Total order on elite quality: higher fitness, then lower MACs, then
/// lexicographically smaller digest.
pub fn compare_quality(a: &Elite, b: &Elite) -> Ordering {
    a.descriptor
        .fitness
        .total_cmp(&b.descriptor.fitness)
        .then_with(|| b.descriptor.macs.cmp(&a.descriptor.macs))
        .then_with(|| b.digest().cmp(a.digest()))
}

/// The replacement rule for an occupied cell.
pub fn improves(new: &Descriptor, incumbent: &Descriptor) -> bool {
    new.fitness > incumbent.fitness
        || (new.fitness == incumbent.fitness && new.macs < incumbent.macs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InsertOutcome {
    Inserted,
    Replaced,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub elite: Elite,
    pub replacements: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Island {
    cells: BTreeMap<CellKey, Cell>,
}

impl Island {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.values()
    }

    pub fn get(&self, key: &CellKey) -> Option<&Cell> {
        self.cells.get(key)
    }

    pub fn best(&self) -> Option<&Elite> {
        self.cells
            .values()
            .map(|c| &c.elite)
            .max_by(|a, b| compare_quality(a, b))
    }
}

// JSON maps need string keys, so islands serialize as cell lists.
impl Serialize for Island {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.cells.values())
    }
}

impl<'de> Deserialize<'de> for Island {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let cells = Vec::<Cell>::deserialize(d)?;
        Ok(Island {
            cells: cells.into_iter().map(|c| (c.elite.key, c)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchiveConfig {
    pub islands: usize,
    /// Per-island cell cap.
    pub population_cap: usize,
    /// Global elite cap across all islands.
    pub archive_cap: usize,
    pub migration_period: usize,
    pub top_k: usize,
    pub diverse_k: usize,
    pub binning: BinningSpec,
}

impl Default for ArchiveConfig {
    fn default() -> Self {
        Self {
            islands: 5,
            population_cap: 100,
            archive_cap: 100,
            migration_period: 10,
            top_k: 5,
            diverse_k: 5,
            binning: BinningSpec::default(),
        }
    }
}

impl ArchiveConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.islands == 0 {
            errs.push("archive.islands must be at least 1".into());
        }
        if self.population_cap == 0 {
            errs.push("archive.population_cap must be at least 1".into());
        }
        if self.archive_cap == 0 {
            errs.push("archive.archive_cap must be at least 1".into());
        }
        if self.migration_period == 0 {
            errs.push("archive.migration_period must be at least 1".into());
        }
        errs.extend(self.binning.validate());
        errs
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub migrated: bool,
    pub offered: usize,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    config: ArchiveConfig,
    islands: Vec<Island>,
}

impl Archive {
    pub fn new(config: ArchiveConfig) -> Self {
        let islands = (0..config.islands.max(1)).map(|_| Island::default()).collect();
        Self { config, islands }
    }

    pub fn config(&self) -> &ArchiveConfig {
        &self.config
    }

    pub fn islands(&self) -> &[Island] {
        &self.islands
    }

    pub fn island_count(&self) -> usize {
        self.islands.len()
    }

    /// Number of occupied cells over all islands.
    pub fn len(&self) -> usize {
        self.islands.iter().map(Island::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elites(&self) -> impl Iterator<Item = &Elite> {
        self.islands.iter().flat_map(|i| i.cells.values().map(|c| &c.elite))
    }

    pub fn bin(&self, d: &Descriptor) -> Result<CellKey, ArchiveError> {
        bin(d, &self.config.binning)
    }

    /// Offers an evaluated candidate to one island's cell.
    pub fn try_insert(
        &mut self,
        island: usize,
        program: TaggedProgram,
        descriptor: Descriptor,
        iteration: usize,
    ) -> Result<InsertOutcome, ArchiveError> {
        let key = self.bin(&descriptor)?;
        let elite = Elite {
            program,
            descriptor,
            key,
            iteration,
        };
        self.insert_elite(island, elite, &[])
    }

    fn insert_elite(
        &mut self,
        island: usize,
        elite: Elite,
        protected: &[(usize, CellKey)],
    ) -> Result<InsertOutcome, ArchiveError> {
        if island >= self.islands.len() {
            return Err(ArchiveError::NoSuchIsland(island));
        }
        let key = elite.key;
        let target = &mut self.islands[island];
        if let Some(cell) = target.cells.get_mut(&key) {
            if improves(&elite.descriptor, &cell.elite.descriptor) {
                cell.elite = elite;
                cell.replacements += 1;
                return Ok(InsertOutcome::Replaced);
            }
            return Ok(InsertOutcome::Rejected);
        }

        if target.cells.len() >= self.config.population_cap {
            let worst = target
                .cells
                .values()
                .filter(|c| !protected.contains(&(island, c.elite.key)))
                .map(|c| &c.elite)
                .min_by(|a, b| compare_quality(a, b));
            match worst {
                Some(w) if compare_quality(&elite, w) == Ordering::Greater => {
                    let wk = w.key;
                    target.cells.remove(&wk);
                }
                _ => return Ok(InsertOutcome::Rejected),
            }
        }
        target.cells.insert(
            key,
            Cell {
                elite,
                replacements: 0,
            },
        );

        if self.len() > self.config.archive_cap {
            let worst = self
                .islands
                .iter()
                .enumerate()
                .flat_map(|(i, isl)| isl.cells.values().map(move |c| (i, &c.elite)))
                .filter(|(i, e)| !protected.contains(&(*i, e.key)))
                .min_by(|a, b| compare_quality(a.1, b.1))
                .map(|(i, e)| (i, e.key));
            if let Some((wi, wk)) = worst {
                self.islands[wi].cells.remove(&wk);
                if (wi, wk) == (island, key) {
                    return Ok(InsertOutcome::Rejected);
                }
            }
        }
        Ok(InsertOutcome::Inserted)
    }

    /// Whether `iteration` is a migration point.
    pub fn is_migration_iteration(&self, iteration: usize) -> bool {
        self.islands.len() > 1 && iteration > 0 && iteration.is_multiple_of(self.config.migration_period)
    }

    /// Ring migration: each island offers its best elite to the next one.
    pub fn migrate(&mut self, iteration: usize) -> MigrationReport {
        if !self.is_migration_iteration(iteration) {
            return MigrationReport::default();
        }
        let n = self.islands.len();
        let bests: Vec<(usize, Elite)> = self
            .islands
            .iter()
            .enumerate()
            .filter_map(|(i, isl)| isl.best().map(|e| (i, e.clone())))
            .collect();
        let protected: Vec<(usize, CellKey)> = bests.iter().map(|(i, e)| (*i, e.key)).collect();
        let mut report = MigrationReport {
            migrated: true,
            ..Default::default()
        };
        for (i, elite) in bests {
            report.offered += 1;
            let outcome = self
                .insert_elite((i + 1) % n, elite, &protected)
                .expect("ring target exists");
            if outcome != InsertOutcome::Rejected {
                report.accepted += 1;
            }
        }
        report
    }

    /// Global best: highest fitness, then lower MACs, then digest order.
    pub fn best(&self) -> Result<&Elite, ArchiveError> {
        self.elites()
            .max_by(|a, b| compare_quality(a, b))
            .ok_or(ArchiveError::Empty)
    }

    /// One elite per distinct program, the best-quality copy of each,
    /// in digest order.
    fn distinct_elites(&self) -> Vec<&Elite> {
        let mut by_digest: BTreeMap<&str, &Elite> = BTreeMap::new();
        for e in self.elites() {
            by_digest
                .entry(e.digest())
                .and_modify(|cur| {
                    if compare_quality(e, cur) == Ordering::Greater {
                        *cur = e;
                    }
                })
                .or_insert(e);
        }
        by_digest.into_values().collect()
    }

    /// Draws a parent from `island` (or from the whole archive when the
    /// island is empty) and collects exploit + explore inspirations.
    ///
    /// Parent choice: a fair coin picks between a uniform draw and a
    /// softmax-over-fitness draw. Inspirations: the global top-k by quality,
    /// then diverse-k by greedy max-min L1 distance in cell space.
    pub fn sample_parent_and_inspirations<R: Rng + ?Sized>(
        &self,
        island: usize,
        rng: &mut R,
    ) -> Result<(Elite, Vec<Elite>), ArchiveError> {
        if self.is_empty() {
            return Err(ArchiveError::Empty);
        }
        let pool: Vec<&Elite> = match self.islands.get(island) {
            Some(isl) if !isl.is_empty() => isl.cells.values().map(|c| &c.elite).collect(),
            Some(_) => self.elites().collect(),
            None => return Err(ArchiveError::NoSuchIsland(island)),
        };
        let parent = if rng.random_bool(0.5) {
            pool[rng.random_range(0..pool.len())]
        } else {
            softmax_pick(&pool, rng)
        };
        Ok((parent.clone(), self.inspirations()))
    }

    pub fn inspirations(&self) -> Vec<Elite> {
        let mut distinct = self.distinct_elites();
        distinct.sort_by(|a, b| compare_quality(b, a));
        let top: Vec<&Elite> = distinct.iter().take(self.config.top_k).copied().collect();
        let mut chosen_digests: BTreeSet<&str> = top.iter().map(|e| e.digest()).collect();
        let mut chosen_keys: Vec<CellKey> = top.iter().map(|e| e.key).collect();
        let mut picked = top;

        for _ in 0..self.config.diverse_k {
            // Candidates are in quality order, so ties go to the better elite.
            let next = distinct
                .iter()
                .filter(|e| !chosen_digests.contains(e.digest()))
                .max_by(|a, b| {
                    let da = min_distance(&a.key, &chosen_keys);
                    let db = min_distance(&b.key, &chosen_keys);
                    da.cmp(&db).then_with(|| compare_quality(a, b))
                })
                .copied();
            let Some(e) = next else { break };
            chosen_digests.insert(e.digest());
            chosen_keys.push(e.key);
            picked.push(e);
        }
        picked.into_iter().cloned().collect()
    }
}

fn min_distance(key: &CellKey, chosen: &[CellKey]) -> usize {
    chosen.iter().map(|k| key.l1(k)).min().unwrap_or(usize::MAX)
}

fn softmax_pick<'a, R: Rng + ?Sized>(pool: &[&'a Elite], rng: &mut R) -> &'a Elite {
    let max = pool
        .iter()
        .map(|e| e.descriptor.fitness)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = pool
        .iter()
        .map(|e| (e.descriptor.fitness - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (e, w) in pool.iter().zip(&weights) {
        if x < *w {
            return e;
        }
        x -= w;
    }
    pool[pool.len() - 1]
}
