//! The evolution loop: budget accounting, proposal history, stepping,
//! archive updates, trace emission and checkpoints.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::archive::{Archive, ArchiveConfig, ArchiveError, Elite, InsertOutcome};
use crate::editor::{BackendError, ChatBackend};
use crate::evaluator::{Evaluator, EvaluatorError, Stage};
use crate::feasibility::{check_feasible, Failure, FailureType, FeasibilityError, Scope, ValidatorHook};
use crate::locality::RegionSet;
use crate::operators::{build_context, Directive, OperatorSettings, Session};
use crate::program::{Factor, TaggedProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunMode {
    Spark,
    SparkNoAsr,
    SparkNoRc,
    Freeform,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::Spark,
        RunMode::SparkNoAsr,
        RunMode::SparkNoRc,
        RunMode::Freeform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Spark => "SPARK",
            RunMode::SparkNoAsr => "SPARK_NO_ASR",
            RunMode::SparkNoRc => "SPARK_NO_RC",
            RunMode::Freeform => "FREEFORM",
        }
    }

    pub fn is_scoped(self) -> bool {
        self != RunMode::Freeform
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProposalOutcome {
    Pass,
    Culled,
    Fail(FailureType),
}

/// FIFO of the most recent proposal outcomes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalBuffer {
    capacity: usize,
    items: VecDeque<ProposalOutcome>,
}

impl ProposalBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, outcome: ProposalOutcome) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(outcome);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ProposalOutcome> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub attempts: usize,
    pub n_eval: usize,
    pub budget: usize,
    pub attempt_cap: Option<usize>,
}

impl BudgetLedger {
    pub fn new(budget: usize, attempt_cap: Option<usize>) -> Self {
        Self {
            attempts: 0,
            n_eval: 0,
            budget,
            attempt_cap,
        }
    }

    pub fn budget_spent(&self) -> bool {
        self.n_eval >= self.budget
    }

    pub fn cap_reached(&self) -> bool {
        self.attempt_cap.is_some_and(|c| self.attempts >= c)
    }

    pub fn exhausted(&self) -> bool {
        self.budget_spent() || self.cap_reached()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Proceed,
    Cull,
}

/// `threshold == None` disables the gate.
pub fn cascade_gate(prelim_score: f64, threshold: Option<f64>) -> GateDecision {
    match threshold {
        Some(t) if prelim_score <= t || prelim_score.is_nan() => GateDecision::Cull,
        _ => GateDecision::Proceed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Pass,
    Fail,
    Culled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArchiveAction {
    Inserted,
    Replaced,
    Rejected,
    /// Evaluated, but the fitness was not a finite number.
    RejectedNan,
}

impl From<InsertOutcome> for ArchiveAction {
    fn from(o: InsertOutcome) -> Self {
        match o {
            InsertOutcome::Inserted => ArchiveAction::Inserted,
            InsertOutcome::Replaced => ArchiveAction::Replaced,
            InsertOutcome::Rejected => ArchiveAction::Rejected,
        }
    }
}

/// One line of the JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub mode: RunMode,
    pub island: usize,
    pub factor: Option<Factor>,
    #[serde(default)]
    pub route_fallback: bool,
    pub directive_digest: Option<String>,
    #[serde(default)]
    pub directive_defaulted: bool,
    pub parent_digest: String,
    pub child_digest: Option<String>,
    pub outcome: Outcome,
    pub failure_type: Option<FailureType>,
    #[serde(default)]
    pub failure_detail: Option<String>,
    /// Passed feasibility and entered scoring.
    pub feasible: bool,
    pub prelim_fitness: Option<f64>,
    pub fitness: Option<f64>,
    pub macs: Option<u64>,
    pub archive_action: Option<ArchiveAction>,
    /// Elites accepted by migration at the end of this attempt.
    pub migrated: Option<usize>,
    pub entangled: Option<bool>,
    pub is_factor_local: Option<bool>,
    pub touched_regions: Option<RegionSet>,
    /// Evaluations used after this attempt, seed included.
    pub n_eval: usize,
    pub llm_calls: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub llm_latency_ms: u64,
    pub wall_ms: u64,
}

impl TraceRecord {
    fn new(iteration: usize, mode: RunMode, island: usize, parent: &Elite) -> Self {
        Self {
            iteration,
            mode,
            island,
            factor: None,
            route_fallback: false,
            directive_digest: None,
            directive_defaulted: false,
            parent_digest: parent.digest().to_string(),
            child_digest: None,
            outcome: Outcome::Fail,
            failure_type: None,
            failure_detail: None,
            feasible: false,
            prelim_fitness: None,
            fitness: None,
            macs: None,
            archive_action: None,
            migrated: None,
            entangled: None,
            is_factor_local: None,
            touched_regions: None,
            n_eval: 0,
            llm_calls: 0,
            prompt_tokens: 0,
            completion_tokens: 0,
            llm_latency_ms: 0,
            wall_ms: 0,
        }
    }

    fn fail(&mut self, failure: Failure) {
        self.outcome = Outcome::Fail;
        self.failure_type = Some(failure.kind);
        self.failure_detail = Some(failure.detail);
    }

    fn proposal_outcome(&self) -> ProposalOutcome {
        match (self.outcome, self.failure_type) {
            (Outcome::Pass, _) => ProposalOutcome::Pass,
            (Outcome::Culled, _) => ProposalOutcome::Culled,
            (Outcome::Fail, t) => ProposalOutcome::Fail(t.unwrap_or(FailureType::EditorFail)),
        }
    }
}

#[derive(Debug, Error)]
#[error("{path}:{line}: {message}")]
pub struct TraceParseError {
    pub path: String,
    pub line: usize,
    pub message: String,
}

/// Reads a JSONL trace; blank lines are skipped.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceParseError> {
    let err = |line: usize, message: String| TraceParseError {
        path: path.display().to_string(),
        line,
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| err(0, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Keeps the first `records` lines of a trace file.
pub fn truncate_trace(path: &Path, records: usize) -> io::Result<()> {
    let text = std::fs::read_to_string(path)?;
    let kept: String = text
        .split_inclusive('\n')
        .take(records)
        .collect();
    if kept.lines().count() < records {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!(
                "trace {} has fewer than {records} records",
                path.display()
            ),
        ));
    }
    std::fs::write(path, kept)
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("seed program is not feasible: {0}")]
    SeedInfeasible(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Evaluator(#[from] EvaluatorError),
    #[error(transparent)]
    Feasibility(#[from] FeasibilityError),
    #[error("trace write failed: {0}")]
    Trace(io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::SeedInfeasible(_) => 3,
            RunError::Backend(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub mode: RunMode,
    pub budget: usize,
    pub attempt_cap: Option<usize>,
    /// Evaluated candidates considered by the stagnation signal.
    pub stagnation_window: usize,
    /// Proposals kept for the failure summary.
    pub proposal_window: usize,
    pub route_retries: u32,
    /// `None` disables cascade gating.
    pub cascade_threshold: Option<f64>,
    pub rng_seed: u64,
    pub archive: ArchiveConfig,
    /// Attempts between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// When false, timing fields are written as 0 so traces are reproducible.
    pub record_timing: bool,
    /// Stop after this many attempts in total, as if interrupted.
    pub halt_after: Option<usize>,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            mode: RunMode::Spark,
            budget: 100,
            attempt_cap: Some(100),
            stagnation_window: 3,
            proposal_window: 10,
            route_retries: 3,
            cascade_threshold: Some(-100.0),
            rng_seed: 0,
            archive: ArchiveConfig::default(),
            checkpoint_every: 10,
            record_timing: true,
            halt_after: None,
        }
    }
}

impl SearchSettings {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.budget == 0 {
            errs.push("search.budget must be at least 1".into());
        }
        if self.attempt_cap == Some(0) {
            errs.push("search.attempt_cap must be at least 1 when set".into());
        }
        if self.stagnation_window == 0 {
            errs.push("search.stagnation_window must be at least 1".into());
        }
        if self.proposal_window == 0 {
            errs.push("search.proposal_window must be at least 1".into());
        }
        if self.route_retries == 0 {
            errs.push("search.route_retries must be at least 1".into());
        }
        if self.cascade_threshold.is_some_and(|t| !t.is_finite()) {
            errs.push("search.cascade_threshold must be finite".into());
        }
        errs.extend(self.archive.validate());
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    word_pos: String,
}

/// Everything needed to continue a run after the last checkpointed attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Caller-supplied fingerprint of the run configuration.
    pub fingerprint: String,
    pub archive: Archive,
    pub ledger: BudgetLedger,
    pub q_prop: ProposalBuffer,
    pub history: Vec<f64>,
    rng: RngState,
    pub backend: serde_json::Value,
    pub trace_records: usize,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Checkpoint(format!("{}: {e}", path.display())))?;
        let cp: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| RunError::Checkpoint(format!("{}: {e}", path.display())))?;
        if cp.version != Self::VERSION {
            return Err(RunError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                cp.version
            )));
        }
        Ok(cp)
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer(&mut tmp, self)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    Budget,
    AttemptCap,
    Halted,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best: Elite,
    pub ledger: BudgetLedger,
    pub stop: StopReason,
    /// Records produced by this process (after any resume point).
    pub records: Vec<TraceRecord>,
}

/// Sha-256 hex digest of a directive's text.
pub fn directive_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// A search in progress.
pub struct Search<'a> {
    settings: SearchSettings,
    operators: OperatorSettings,
    hooks: Vec<ValidatorHook>,
    backend: &'a mut dyn ChatBackend,
    evaluator: &'a dyn Evaluator,
    archive: Archive,
    ledger: BudgetLedger,
    q_prop: ProposalBuffer,
    history: Vec<f64>,
    rng: ChaCha8Rng,
    trace: Option<Box<dyn Write + 'a>>,
    trace_records: usize,
    checkpoint_path: Option<PathBuf>,
    fingerprint: String,
    records: Vec<TraceRecord>,
}

impl<'a> Search<'a> {
    /// Checks and evaluates the seed, then archives it on every island.
    pub fn start(
        settings: SearchSettings,
        operators: OperatorSettings,
        hooks: Vec<ValidatorHook>,
        backend: &'a mut dyn ChatBackend,
        evaluator: &'a dyn Evaluator,
        seed: &TaggedProgram,
    ) -> Result<Self, RunError> {
        let errs = settings.validate();
        if !errs.is_empty() {
            return Err(RunError::Config(errs));
        }
        let report = check_feasible(seed, &seed.serialize(), Scope::Unscoped, &hooks, &operators.tags)?;
        if let Err(f) = report.result {
            return Err(RunError::SeedInfeasible(format!("{}: {}", f.kind, f.detail)));
        }
        let eval = evaluator
            .evaluate(seed, Stage::Full)?
            .map_err(|f| RunError::SeedInfeasible(format!("{}: {}", f.kind, f.detail)))?;
        let descriptor = eval
            .descriptor()
            .filter(|d| d.fitness.is_finite())
            .ok_or_else(|| RunError::SeedInfeasible("seed evaluation has no finite fitness".into()))?;
        let mut archive = Archive::new(settings.archive.clone());
        for island in 0..archive.island_count() {
            archive.try_insert(island, seed.clone(), descriptor, 0)?;
        }
        let mut ledger = BudgetLedger::new(settings.budget, settings.attempt_cap);
        ledger.n_eval = 1;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(settings.rng_seed),
            q_prop: ProposalBuffer::new(settings.proposal_window),
            history: vec![descriptor.fitness],
            settings,
            operators,
            hooks,
            backend,
            evaluator,
            archive,
            ledger,
            trace: None,
            trace_records: 0,
            checkpoint_path: None,
            fingerprint: String::new(),
            records: Vec::new(),
        })
    }

    /// Restores state from a checkpoint. The trace sink attached afterwards
    /// must already be truncated to `checkpoint.trace_records` lines.
    pub fn resume(
        settings: SearchSettings,
        operators: OperatorSettings,
        hooks: Vec<ValidatorHook>,
        backend: &'a mut dyn ChatBackend,
        evaluator: &'a dyn Evaluator,
        checkpoint: Checkpoint,
    ) -> Result<Self, RunError> {
        let errs = settings.validate();
        if !errs.is_empty() {
            return Err(RunError::Config(errs));
        }
        backend.restore(&checkpoint.backend)?;
        let mut rng = ChaCha8Rng::seed_from_u64(checkpoint.rng.seed);
        let pos = checkpoint
            .rng
            .word_pos
            .parse::<u128>()
            .map_err(|e| RunError::Checkpoint(format!("bad rng position: {e}")))?;
        rng.set_word_pos(pos);
        let mut ledger = checkpoint.ledger;
        ledger.budget = settings.budget;
        ledger.attempt_cap = settings.attempt_cap;
        Ok(Self {
            settings,
            operators,
            hooks,
            backend,
            evaluator,
            archive: checkpoint.archive,
            ledger,
            q_prop: checkpoint.q_prop,
            history: checkpoint.history,
            rng,
            trace: None,
            trace_records: checkpoint.trace_records,
            checkpoint_path: None,
            fingerprint: checkpoint.fingerprint,
            records: Vec::new(),
        })
    }

    pub fn with_trace(mut self, sink: impl Write + 'a) -> Self {
        self.trace = Some(Box::new(sink));
        self
    }

    pub fn with_checkpoints(mut self, path: impl Into<PathBuf>, fingerprint: impl Into<String>) -> Self {
        self.checkpoint_path = Some(path.into());
        self.fingerprint = fingerprint.into();
        self
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn proposals(&self) -> &ProposalBuffer {
        &self.q_prop
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: Checkpoint::VERSION,
            fingerprint: self.fingerprint.clone(),
            archive: self.archive.clone(),
            ledger: self.ledger,
            q_prop: self.q_prop.clone(),
            history: self.history.clone(),
            rng: RngState {
                seed: self.settings.rng_seed,
                word_pos: self.rng.get_word_pos().to_string(),
            },
            backend: self.backend.snapshot(),
            trace_records: self.trace_records,
        }
    }

    /// Runs until the budget or attempt cap is reached (or `halt_after`).
    pub fn run(mut self) -> Result<RunResult, RunError> {
        let stop = loop {
            if self.ledger.budget_spent() {
                break StopReason::Budget;
            }
            if self.ledger.cap_reached() {
                break StopReason::AttemptCap;
            }
            if self.settings.halt_after.is_some_and(|h| self.ledger.attempts >= h) {
                break StopReason::Halted;
            }
            self.step()?;
        };
        if let Some(t) = self.trace.as_mut() {
            t.flush().map_err(RunError::Trace)?;
        }
        // A halt stands in for an interruption, so it keeps the last
        // periodic checkpoint rather than writing a final one.
        if stop != StopReason::Halted {
            self.write_checkpoint()?;
        }
        Ok(RunResult {
            best: self.archive.best()?.clone(),
            ledger: self.ledger,
            stop,
            records: self.records,
        })
    }

    /// One attempt: sample, edit, check, score, archive, migrate, record.
    pub fn step(&mut self) -> Result<&TraceRecord, RunError> {
        let started = Instant::now();
        let t = self.ledger.attempts + 1;
        let island = (t - 1) % self.archive.island_count();
        let mode = self.settings.mode;
        let ctx = build_context(
            &self.archive,
            island,
            &mut self.rng,
            &self.history,
            self.settings.stagnation_window,
            &self.q_prop,
        )?;
        let mut rec = TraceRecord::new(t, mode, island, &ctx.parent);

        let mut session = Session::new(&mut *self.backend, &self.operators);
        let edit = if mode.is_scoped() {
            let factor = if mode == RunMode::SparkNoAsr {
                Factor::ALL[self.rng.random_range(0..Factor::ALL.len())]
            } else {
                let route = session.asr_route(&ctx, self.settings.route_retries)?;
                rec.route_fallback = route.fallback;
                route.factor
            };
            let directive = if mode == RunMode::SparkNoRc {
                Directive::default_for(factor)
            } else {
                session.rc_directive(&ctx, factor)?
            };
            rec.factor = Some(factor);
            rec.directive_digest = Some(directive_digest(&directive.text));
            rec.directive_defaulted = directive.defaulted;
            session.sar_edit(&ctx, &directive)?
        } else {
            session.freeform_edit(&ctx)?
        };
        let usage = session.usage;

        match edit {
            Err(failure) => rec.fail(failure),
            Ok(text) => {
                let scope = rec.factor.map(Scope::Factor).unwrap_or(Scope::Unscoped);
                let report = check_feasible(
                    &ctx.parent.program,
                    &text,
                    scope,
                    &self.hooks,
                    &self.operators.tags,
                )?;
                rec.entangled = Some(report.verdict.entangled);
                rec.is_factor_local = Some(report.verdict.is_factor_local);
                rec.touched_regions = Some(report.verdict.touched_regions);
                match report.result {
                    Err(failure) => rec.fail(failure),
                    Ok(child) => {
                        rec.feasible = true;
                        rec.child_digest = Some(child.digest().to_string());
                        self.score(&mut rec, child, island, t)?;
                    }
                }
            }
        }

        if self.archive.is_migration_iteration(t) {
            rec.migrated = Some(self.archive.migrate(t).accepted);
        }
        rec.n_eval = self.ledger.n_eval;
        rec.llm_calls = usage.calls;
        rec.prompt_tokens = usage.prompt_tokens;
        rec.completion_tokens = usage.completion_tokens;
        if self.settings.record_timing {
            rec.llm_latency_ms = usage.latency_ms;
            rec.wall_ms = started.elapsed().as_millis() as u64;
        }
        self.record_attempt(rec)?;
        if self.settings.checkpoint_every > 0 && t.is_multiple_of(self.settings.checkpoint_every) {
            self.write_checkpoint()?;
        }
        Ok(self.records.last().expect("record just pushed"))
    }

    /// Cascade gate, full evaluation and archive update for a feasible child.
    fn score(
        &mut self,
        rec: &mut TraceRecord,
        child: TaggedProgram,
        island: usize,
        iteration: usize,
    ) -> Result<(), RunError> {
        if self.settings.cascade_threshold.is_some() && self.evaluator.supports_prelim() {
            match self.evaluator.evaluate(&child, Stage::Prelim)? {
                Err(failure) => {
                    rec.fail(failure);
                    return Ok(());
                }
                Ok(e) => {
                    rec.prelim_fitness = Some(e.fitness);
                    if cascade_gate(e.fitness, self.settings.cascade_threshold) == GateDecision::Cull {
                        rec.outcome = Outcome::Culled;
                        return Ok(());
                    }
                }
            }
        }
        let eval = match self.evaluator.evaluate(&child, Stage::Full)? {
            Err(failure) => {
                rec.fail(failure);
                return Ok(());
            }
            Ok(e) => e,
        };
        let Some(descriptor) = eval.descriptor() else {
            rec.fail(Failure::new(
                FailureType::EvaluatorError,
                "full evaluation returned no MACs",
            ));
            return Ok(());
        };
        self.ledger.n_eval += 1;
        rec.outcome = Outcome::Pass;
        rec.macs = Some(descriptor.macs);
        if !descriptor.fitness.is_finite() {
            rec.archive_action = Some(ArchiveAction::RejectedNan);
            rec.failure_detail = Some(format!("non-finite fitness {}", descriptor.fitness));
            return Ok(());
        }
        rec.fitness = Some(descriptor.fitness);
        self.history.push(descriptor.fitness);
        let outcome = self.archive.try_insert(island, child, descriptor, iteration)?;
        rec.archive_action = Some(outcome.into());
        Ok(())
    }

    /// Pushes the outcome into the proposal window, counts the attempt and
    /// appends the trace line.
    fn record_attempt(&mut self, rec: TraceRecord) -> Result<(), RunError> {
        self.q_prop.push(rec.proposal_outcome());
        self.ledger.attempts += 1;
        if let Some(sink) = self.trace.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| RunError::Trace(e.into()))?;
            sink.write_all(line.as_bytes())
                .and_then(|_| sink.write_all(b"\n"))
                .and_then(|_| sink.flush())
                .map_err(RunError::Trace)?;
        }
        self.trace_records += 1;
        self.records.push(rec);
        Ok(())
    }

    fn write_checkpoint(&self) -> Result<(), RunError> {
        if let Some(path) = &self.checkpoint_path {
            self.checkpoint()
                .save(path)
                .map_err(|e| RunError::Checkpoint(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}
