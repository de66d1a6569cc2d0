//! Metrics derived from traces: best-so-far, valid and entanglement rates,
//! failure counts, efficiency, and multi-trace aggregation.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::feasibility::FailureType;
use crate::search::{Outcome, RunMode, TraceRecord};

/// Trailing window for the rolling entanglement rate.
pub const ROLLING_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub outcome: Outcome,
    pub feasible: bool,
    pub fitness: Option<f64>,
    /// Best fitness over evaluated attempts so far; `None` until one exists.
    pub best_so_far: Option<f64>,
    pub best_macs: Option<u64>,
    pub n_eval: usize,
    pub cum_valid_rate: f64,
    pub cum_entanglement_rate: Option<f64>,
    pub rolling_entanglement_rate: Option<f64>,
    /// Cumulative failure counts by type.
    pub failures: BTreeMap<FailureType, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub rows: Vec<MetricsRow>,
}

fn better(fitness: f64, macs: u64, best: Option<(f64, u64)>) -> bool {
    match best {
        None => true,
        Some((bf, bm)) => fitness > bf || (fitness == bf && macs < bm),
    }
}

impl MetricsSeries {
    pub fn from_records(records: &[TraceRecord]) -> Self {
        let mut rows = Vec::with_capacity(records.len());
        let mut best: Option<(f64, u64)> = None;
        let mut valid = 0usize;
        let mut ent = (0usize, 0usize);
        let mut failures: BTreeMap<FailureType, usize> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.feasible {
                valid += 1;
            }
            if let Some(e) = r.entangled {
                ent.1 += 1;
                ent.0 += e as usize;
            }
            if let Some(t) = r.failure_type {
                *failures.entry(t).or_insert(0) += 1;
            }
            if let (Outcome::Pass, Some(f), Some(m)) = (r.outcome, r.fitness, r.macs) {
                if better(f, m, best) {
                    best = Some((f, m));
                }
            }
            let lo = (i + 1).saturating_sub(ROLLING_WINDOW);
            let window: Vec<bool> = records[lo..=i].iter().filter_map(|r| r.entangled).collect();
            rows.push(MetricsRow {
                iteration: r.iteration,
                outcome: r.outcome,
                feasible: r.feasible,
                fitness: r.fitness,
                best_so_far: best.map(|b| b.0),
                best_macs: best.map(|b| b.1),
                n_eval: r.n_eval,
                cum_valid_rate: valid as f64 / (i + 1) as f64,
                cum_entanglement_rate: (ent.1 > 0).then(|| ent.0 as f64 / ent.1 as f64),
                rolling_entanglement_rate: (!window.is_empty()).then(|| {
                    window.iter().filter(|&&e| e).count() as f64 / window.len() as f64
                }),
                failures: failures.clone(),
            });
        }
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes the series as CSV (`set datafile separator ","` in gnuplot).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(
            w,
            "iteration,outcome,feasible,fitness,best_so_far,best_macs,n_eval,\
             cum_valid_rate,cum_entanglement_rate,rolling_entanglement_rate"
        )?;
        for t in FailureType::ALL {
            write!(w, ",fail_{}", t.as_str())?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                outcome_str(r.outcome),
                r.feasible as u8,
                opt(r.fitness),
                opt(r.best_so_far),
                opt(r.best_macs),
                r.n_eval,
                r.cum_valid_rate,
                opt(r.cum_entanglement_rate),
                opt(r.rolling_entanglement_rate),
            )?;
            for t in FailureType::ALL {
                write!(w, ",{}", r.failures.get(&t).copied().unwrap_or(0))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn outcome_str(o: Outcome) -> &'static str {
    match o {
        Outcome::Pass => "PASS",
        Outcome::Fail => "FAIL",
        Outcome::Culled => "CULLED",
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Rounds to one decimal place, halves away from zero.
///
/// Works on the shortest decimal representation, so 28.05 rounds to 28.1
/// even though its binary value is slightly below 28.05.
pub fn round1(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let text = format!("{}", x.abs());
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let digit = |i: usize| frac.as_bytes().get(i).map_or(0, |b| (b - b'0') as u64);
    let int: f64 = int.parse().expect("integer part of a formatted float");
    let tenths = int * 10.0 + (digit(0) + (digit(1) >= 5) as u64) as f64;
    (tenths / 10.0).copysign(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub reference_evaluations: u64,
    pub evaluations_to_best: usize,
    pub ratio: f64,
    pub ratio_rounded: f64,
    pub display: String,
}

impl Efficiency {
    pub fn new(reference_evaluations: u64, evaluations_to_best: usize) -> Option<Self> {
        if evaluations_to_best == 0 {
            return None;
        }
        let ratio = reference_evaluations as f64 / evaluations_to_best as f64;
        let ratio_rounded = round1(ratio);
        Some(Self {
            reference_evaluations,
            evaluations_to_best,
            ratio,
            ratio_rounded,
            display: format!("{ratio_rounded:.1}×"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub modes: Vec<RunMode>,
    pub attempts: usize,
    /// Evaluations used, seed included.
    pub evaluations: usize,
    pub valid: usize,
    pub valid_rate: f64,
    pub culled: usize,
    pub best_fitness: Option<f64>,
    pub best_macs: Option<u64>,
    pub best_iteration: Option<usize>,
    /// `n_eval` when the best candidate was evaluated.
    pub evaluations_to_best: Option<usize>,
    /// Set when no attempt produced an evaluated candidate.
    pub no_valid_candidates: bool,
    pub entanglement_rate: Option<f64>,
    pub failure_counts: BTreeMap<FailureType, usize>,
    pub efficiency: Option<Efficiency>,
}

impl Summary {
    pub fn from_records(records: &[TraceRecord], reference_evaluations: Option<u64>) -> Self {
        let mut modes: Vec<RunMode> = Vec::new();
        let mut best: Option<(f64, u64)> = None;
        let mut best_at: Option<&TraceRecord> = None;
        let mut failure_counts = BTreeMap::new();
        let (mut valid, mut culled, mut ent, mut ent_n) = (0, 0, 0, 0);
        for r in records {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
            valid += r.feasible as usize;
            culled += (r.outcome == Outcome::Culled) as usize;
            if let Some(e) = r.entangled {
                ent_n += 1;
                ent += e as usize;
            }
            if let Some(t) = r.failure_type {
                *failure_counts.entry(t).or_insert(0) += 1;
            }
            if let (Outcome::Pass, Some(f), Some(m)) = (r.outcome, r.fitness, r.macs) {
                if better(f, m, best) {
                    best = Some((f, m));
                    best_at = Some(r);
                }
            }
        }
        let attempts = records.len();
        let evaluations_to_best = best_at.map(|r| r.n_eval);
        Self {
            modes,
            attempts,
            evaluations: records.iter().map(|r| r.n_eval).max().unwrap_or(1),
            valid,
            valid_rate: if attempts == 0 {
                0.0
            } else {
                valid as f64 / attempts as f64
            },
            culled,
            best_fitness: best.map(|b| b.0),
            best_macs: best.map(|b| b.1),
            best_iteration: best_at.map(|r| r.iteration),
            evaluations_to_best,
            no_valid_candidates: best.is_none(),
            entanglement_rate: (ent_n > 0).then(|| ent as f64 / ent_n as f64),
            failure_counts,
            efficiency: reference_evaluations
                .zip(evaluations_to_best)
                .and_then(|(r, e)| Efficiency::new(r, e)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Band {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        Some(Self {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// 1-based attempt index.
    pub attempt: usize,
    /// Traces that reach this attempt.
    pub runs: usize,
    pub best_so_far: Option<Band>,
    pub cum_valid_rate: Option<Band>,
    pub cum_entanglement_rate: Option<Band>,
}

/// Mean and min-max band per attempt index across several runs.
pub fn aggregate(series: &[MetricsSeries]) -> Vec<AggregateRow> {
    let longest = series.iter().map(MetricsSeries::len).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let rows: Vec<&MetricsRow> = series.iter().filter_map(|s| s.rows.get(i)).collect();
            let collect = |f: &dyn Fn(&MetricsRow) -> Option<f64>| -> Vec<f64> {
                rows.iter().filter_map(|r| f(r)).collect()
            };
            AggregateRow {
                attempt: i + 1,
                runs: rows.len(),
                best_so_far: Band::of(&collect(&|r| r.best_so_far)),
                cum_valid_rate: Band::of(&collect(&|r| Some(r.cum_valid_rate))),
                cum_entanglement_rate: Band::of(&collect(&|r| r.cum_entanglement_rate)),
            }
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "attempt,runs,best_mean,best_min,best_max,valid_mean,valid_min,valid_max,\
         entangled_mean,entangled_min,entangled_max"
    )?;
    let band = |b: &Option<Band>| match b {
        Some(b) => format!("{},{},{}", b.mean, b.min, b.max),
        None => ",,".to_string(),
    };
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.attempt,
            r.runs,
            band(&r.best_so_far),
            band(&r.cum_valid_rate),
            band(&r.cum_entanglement_rate)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::ArchiveAction;

    pub(crate) fn rec(iteration: usize, fitness: Option<f64>, n_eval: usize) -> TraceRecord {
        let pass = fitness.is_some();
        let json = serde_json::json!({
            "iteration": iteration, "mode": "SPARK", "island": 0, "factor": "ACTION",
            "directive_digest": null, "parent_digest": "p", "child_digest": null,
            "outcome": if pass { "PASS" } else { "FAIL" },
            "failure_type": if pass { None } else { Some("SYNTAX") },
            "feasible": pass, "prelim_fitness": null, "fitness": fitness,
            "macs": fitness.map(|_| 500_000), "archive_action": null, "migrated": null,
            "entangled": !pass, "is_factor_local": pass, "touched_regions": null,
            "n_eval": n_eval, "llm_calls": 3, "prompt_tokens": 0, "completion_tokens": 0,
            "llm_latency_ms": 0, "wall_ms": 0
        });
        serde_json::from_value(json).unwrap()
    }

    #[test]
    fn efficiency_display() {
        let e = Efficiency::new(1600, 57).unwrap();
        assert!((e.ratio - 28.0701754).abs() < 1e-6);
        assert_eq!(e.display, "28.1×");
        assert_eq!(round1(28.05), 28.1);
        assert_eq!(round1(0.25), 0.3);
    }

    #[test]
    fn best_so_far_is_flat_after_best() {
        let mut records = Vec::new();
        let mut n = 1;
        for i in 1..=100 {
            let f = if i == 57 {
                Some(0.8374)
            } else if i % 3 == 0 && i < 57 {
                Some(0.5 + i as f64 / 1000.0)
            } else if i % 3 == 0 {
                Some(0.6)
            } else {
                None
            };
            n += f.is_some() as usize;
            records.push(rec(i, f, n));
        }
        let s = MetricsSeries::from_records(&records);
        for r in &s.rows[56..] {
            assert_eq!(r.best_so_far, Some(0.8374));
        }
        let sum = Summary::from_records(&records, Some(1600));
        assert_eq!(sum.best_iteration, Some(57));
        assert!(sum.efficiency.is_some());
    }

    #[test]
    fn all_fail_trace() {
        let records: Vec<_> = (1..=5).map(|i| rec(i, None, 1)).collect();
        let s = Summary::from_records(&records, Some(1600));
        assert_eq!(s.valid_rate, 0.0);
        assert!(s.no_valid_candidates && s.best_fitness.is_none());
        assert!(s.efficiency.is_none());
        let m = MetricsSeries::from_records(&records);
        assert!(m.rows.iter().all(|r| r.best_so_far.is_none()));
    }

    #[test]
    fn csv_has_one_row_per_attempt() {
        let mut records: Vec<_> = (1..=4).map(|i| rec(i, Some(0.1 * i as f64), i + 1)).collect();
        records[1].archive_action = Some(ArchiveAction::Inserted);
        let mut out = Vec::new();
        MetricsSeries::from_records(&records).write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 5);
    }

    #[test]
    fn aggregate_bands() {
        let a = MetricsSeries::from_records(&[rec(1, Some(0.2), 2), rec(2, Some(0.4), 3)]);
        let b = MetricsSeries::from_records(&[rec(1, Some(0.6), 2)]);
        let rows = aggregate(&[a, b]);
        assert_eq!(rows.len(), 2);
        let band = rows[0].best_so_far.as_ref().unwrap();
        assert!((band.mean - 0.4).abs() < 1e-12 && band.min == 0.2 && band.max == 0.6);
        assert_eq!(rows[1].runs, 1);
    }
}
