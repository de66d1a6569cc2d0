//! Desk-scale simulation of the per-scope feasibility model.
//!
//! Two experiments run against the stochastic mock editor:
//! a feasibility table (edits touching exactly k scopes, measured pass rate
//! next to `p_valid^k`), and full search runs per mode whose cumulative
//! valid rates can be compared.

use serde::{Deserialize, Serialize};

use crate::editor::{StochasticBackend, StochasticConfig, INVALID_MARKER};
use crate::evaluator::SyntheticTask;
use crate::feasibility::{check_feasible, HookKind, Scope, ValidatorHook};
use crate::metrics::Summary;
use crate::operators::OperatorSettings;
use crate::program::{Region, TagConfig, TaggedProgram};
use crate::search::{RunError, RunMode, RunResult, Search, SearchSettings};

/// Built-in seed program used when no other is supplied.
pub const SAMPLE_SEED: &str = include_str!("../assets/seed_program.py");

const SCOPES: [Region; 3] = [Region::Operator, Region::Action, Region::Frozen];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub p_valid: f64,
    /// Largest scope count in the feasibility table (at most 3).
    pub k_max: usize,
    pub trials: usize,
    pub entangle_p: f64,
    /// Attempts per mode run; 0 skips the mode comparison.
    pub attempts: usize,
    pub seeds: Vec<u64>,
    pub modes: Vec<RunMode>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p_valid: 0.8,
            k_max: 3,
            trials: 2000,
            entangle_p: 0.5,
            attempts: 100,
            seeds: vec![0],
            modes: vec![RunMode::Spark, RunMode::Freeform],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.p_valid > 0.0 && self.p_valid <= 1.0) {
            errs.push("p_valid must be in (0, 1]".into());
        }
        if !(1..=SCOPES.len()).contains(&self.k_max) {
            errs.push(format!("k_max must be between 1 and {}", SCOPES.len()));
        }
        if self.trials == 0 {
            errs.push("trials must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.entangle_p) {
            errs.push("entangle_p must be in [0, 1]".into());
        }
        if self.attempts > 0 && self.seeds.is_empty() {
            errs.push("seeds must be non-empty when attempts > 0".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRow {
    pub k: usize,
    pub analytic: f64,
    pub measured: f64,
    pub passed: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub mode: RunMode,
    pub seed: u64,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub p_valid: f64,
    pub table: Vec<FeasibilityRow>,
    pub runs: Vec<ModeRun>,
}

/// Hook rejecting the marker the mock writes into broken scopes.
pub fn mock_validity_hook() -> ValidatorHook {
    ValidatorHook::forbid(HookKind::Semantic, vec![INVALID_MARKER.into()])
}

pub fn sample_seed() -> TaggedProgram {
    TaggedProgram::parse(SAMPLE_SEED, &TagConfig::default()).expect("built-in seed parses")
}

/// Measured pass rate of edits touching exactly k scopes, k = 1..=k_max.
pub fn feasibility_table(cfg: &SimConfig, seed: u64) -> Result<Vec<FeasibilityRow>, RunError> {
    let parent = sample_seed();
    let tags = TagConfig::default();
    let hooks = [mock_validity_hook()];
    let mut rows = Vec::new();
    for k in 1..=cfg.k_max.min(SCOPES.len()) {
        let mut mock = StochasticBackend::new(
            StochasticConfig {
                p_valid: cfg.p_valid,
                entangle_p: cfg.entangle_p,
                seed: seed.wrapping_add(k as u64),
            },
            tags.clone(),
        );
        let mut passed = 0;
        for _ in 0..cfg.trials {
            let text = mock.edit_scopes(&parent, &SCOPES[..k]);
            passed += check_feasible(&parent, &text, Scope::Unscoped, &hooks, &tags)?.passed() as usize;
        }
        rows.push(FeasibilityRow {
            k,
            analytic: cfg.p_valid.powi(k as i32),
            measured: passed as f64 / cfg.trials as f64,
            passed,
            trials: cfg.trials,
        });
    }
    Ok(rows)
}

/// One search run against the stochastic mock and the synthetic task.
pub fn mode_run(
    mode: RunMode,
    cfg: &SimConfig,
    seed: u64,
    trace: Option<&mut dyn std::io::Write>,
) -> Result<RunResult, RunError> {
    let tags = TagConfig::default();
    let mut backend = StochasticBackend::new(
        StochasticConfig {
            p_valid: cfg.p_valid,
            entangle_p: cfg.entangle_p,
            seed,
        },
        tags,
    );
    let evaluator = SyntheticTask::default();
    let settings = SearchSettings {
        mode,
        budget: cfg.attempts + 1,
        attempt_cap: Some(cfg.attempts),
        rng_seed: seed,
        checkpoint_every: 0,
        record_timing: false,
        ..Default::default()
    };
    let search = Search::start(
        settings,
        OperatorSettings::default(),
        vec![mock_validity_hook()],
        &mut backend,
        &evaluator,
        &sample_seed(),
    )?;
    match trace {
        Some(w) => search.with_trace(w).run(),
        None => search.run(),
    }
}

pub fn simulate(cfg: &SimConfig, seed: u64) -> Result<SimReport, RunError> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(RunError::Config(errs));
    }
    let table = feasibility_table(cfg, seed)?;
    let mut runs = Vec::new();
    if cfg.attempts > 0 {
        for &s in &cfg.seeds {
            for &mode in &cfg.modes {
                let r = mode_run(mode, cfg, s, None)?;
                runs.push(ModeRun {
                    mode,
                    seed: s,
                    summary: Summary::from_records(&r.records, None),
                });
            }
        }
    }
    Ok(SimReport {
        p_valid: cfg.p_valid,
        table,
        runs,
    })
}
