//! Candidate evaluation.
//!
//! Real evaluations run out of process: the engine writes the candidate to
//! a file, runs the configured command, and reads one JSON object from the
//! last non-empty line of stdout:
//!
//! ```text
//! {"status":"ok","fitness":0.4678,"descriptors":{"macs":661190,"params":12000}}
//! {"status":"error","type":"nan_loss"}
//! ```
//!
//! A built-in synthetic task scores region bodies directly; it exists so
//! search dynamics can be exercised without any training.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::archive::Descriptor;
use crate::feasibility::{run_process, Failure, FailureType, ProcessOutcome};
use crate::program::{Factor, TaggedProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prelim,
    Full,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prelim => "prelim",
            Stage::Full => "full",
        }
    }
}

/// What an evaluator stage reports. Only the full stage must carry MACs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fitness: f64,
    pub macs: Option<u64>,
    pub params: Option<u64>,
}

impl Evaluation {
    pub fn descriptor(&self) -> Option<Descriptor> {
        self.macs.map(|macs| Descriptor {
            fitness: self.fitness,
            macs,
            params: self.params,
        })
    }
}

/// Evaluator problems that are not the candidate's fault.
#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("evaluator command {command:?} could not be started: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("could not stage candidate for evaluation: {0}")]
    Io(#[from] std::io::Error),
}

pub trait Evaluator {
    /// `Ok(Err(_))` is a per-candidate failure (timeout, bad output);
    /// `Err(_)` is a setup error that should abort the run.
    fn evaluate(
        &self,
        program: &TaggedProgram,
        stage: Stage,
    ) -> Result<Result<Evaluation, Failure>, EvaluatorError>;

    fn supports_prelim(&self) -> bool {
        false
    }
}

fn default_timeout() -> u64 {
    3_600_000
}

/// External evaluator invocation: `command... --stage <stage> <file>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandEvaluator {
    pub command: Vec<String>,
    #[serde(default = "default_timeout")]
    pub full_timeout_ms: u64,
    #[serde(default)]
    pub prelim_timeout_ms: Option<u64>,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    /// When set, the child sees only these variables (plus PATH).
    #[serde(default)]
    pub env_passthrough: Option<Vec<String>>,
    #[serde(default)]
    pub prelim: bool,
    #[serde(default = "default_file_name")]
    pub file_name: String,
}

fn default_file_name() -> String {
    "candidate.py".into()
}

impl CommandEvaluator {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            full_timeout_ms: default_timeout(),
            prelim_timeout_ms: None,
            workdir: None,
            env_passthrough: None,
            prelim: false,
            file_name: default_file_name(),
        }
    }

    fn timeout(&self, stage: Stage) -> Duration {
        let ms = match stage {
            Stage::Full => self.full_timeout_ms,
            Stage::Prelim => self.prelim_timeout_ms.unwrap_or(self.full_timeout_ms),
        };
        Duration::from_millis(ms)
    }
}

#[derive(Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
enum Reply {
    Ok {
        fitness: f64,
        #[serde(default)]
        descriptors: ReplyDescriptors,
    },
    Error {
        #[serde(rename = "type")]
        kind: String,
    },
}

#[derive(Deserialize, Default)]
struct ReplyDescriptors {
    macs: Option<u64>,
    params: Option<u64>,
}

/// Parses evaluator stdout into an evaluation or a typed failure.
pub fn parse_reply(stdout: &str, stage: Stage) -> Result<Evaluation, Failure> {
    let bad = |msg: String| Failure::new(FailureType::EvaluatorError, msg);
    let line = stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| bad("evaluator printed nothing".into()))?;
    let reply: Reply =
        serde_json::from_str(line.trim()).map_err(|e| bad(format!("malformed evaluator output: {e}")))?;
    match reply {
        Reply::Error { kind } => Err(bad(format!("evaluator reported error: {kind}"))),
        Reply::Ok {
            fitness,
            descriptors,
        } => {
            if stage == Stage::Full && descriptors.macs.is_none() {
                return Err(bad("full-stage reply lacks descriptors.macs".into()));
            }
            Ok(Evaluation {
                fitness,
                macs: descriptors.macs,
                params: descriptors.params,
            })
        }
    }
}

impl Evaluator for CommandEvaluator {
    fn evaluate(
        &self,
        program: &TaggedProgram,
        stage: Stage,
    ) -> Result<Result<Evaluation, Failure>, EvaluatorError> {
        let dir = tempfile::Builder::new().prefix("spark-eval").tempdir()?;
        let path = dir.path().join(&self.file_name);
        std::fs::write(&path, program.serialize())?;
        let args = [
            std::ffi::OsStr::new("--stage"),
            std::ffi::OsStr::new(stage.as_str()),
            path.as_os_str(),
        ];
        let outcome = run_process(
            &self.command,
            &args,
            self.timeout(stage),
            self.workdir.as_deref(),
            self.env_passthrough.as_deref(),
        )
        .map_err(|source| EvaluatorError::Spawn {
            command: self.command.join(" "),
            source,
        })?;
        Ok(match outcome {
            ProcessOutcome::TimedOut => Err(Failure::new(
                FailureType::Timeout,
                format!("{} evaluation timed out", stage.as_str()),
            )),
            ProcessOutcome::Exited {
                success: false,
                code,
                stderr,
                ..
            } => Err(Failure::new(
                FailureType::EvaluatorError,
                format!("evaluator exited with {code:?}: {}", stderr.trim()),
            )),
            ProcessOutcome::Exited { stdout, .. } => parse_reply(&stdout, stage),
        })
    }

    fn supports_prelim(&self) -> bool {
        self.prelim
    }
}

/// Deterministic stand-in task that scores region bodies.
///
/// Fitness counts occurrences of `target_token` in each body, weighted per
/// factor, minus a penalty for body lines beyond `line_cap`, plus optional
/// seeded noise, clamped to [0, 1]. A program whose ACTION body has no
/// non-blank line scores 0. MACs grow linearly with body length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub target_token: String,
    pub action_gain: f64,
    pub operator_gain: f64,
    pub line_cap: usize,
    pub line_penalty: f64,
    pub base_macs: u64,
    pub macs_per_line: u64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            target_token: "gain".into(),
            action_gain: 0.05,
            operator_gain: 0.03,
            line_cap: 40,
            line_penalty: 0.02,
            base_macs: 250_000,
            macs_per_line: 4_000,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.target_token.is_empty() {
            errs.push("evaluator.synthetic.target_token must be non-empty".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errs.push("evaluator.synthetic.noise must be finite and non-negative".into());
        }
        errs
    }

    fn count(&self, lines: &[String]) -> usize {
        lines
            .iter()
            .map(|l| l.matches(self.target_token.as_str()).count())
            .sum()
    }

    fn noise_term(&self, digest: &str) -> f64 {
        if self.noise == 0.0 {
            return 0.0;
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(digest.as_bytes());
        let bytes = h.finalize();
        let x = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let unit = (x >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * unit - 1.0) * self.noise
    }

    pub fn score(&self, program: &TaggedProgram) -> Descriptor {
        let op = program.body(Factor::Operator);
        let act = program.body(Factor::Action);
        let body_lines = op.len() + act.len();
        let macs = self.base_macs + self.macs_per_line * body_lines as u64;
        if act.iter().all(|l| l.trim().is_empty()) {
            return Descriptor::new(0.0, macs);
        }
        let raw = self.action_gain * self.count(act) as f64
            + self.operator_gain * self.count(op) as f64
            - self.line_penalty * body_lines.saturating_sub(self.line_cap) as f64
            + self.noise_term(program.digest());
        Descriptor::new(raw.clamp(0.0, 1.0), macs)
    }
}

impl Evaluator for SyntheticTask {
    fn evaluate(
        &self,
        program: &TaggedProgram,
        stage: Stage,
    ) -> Result<Result<Evaluation, Failure>, EvaluatorError> {
        let d = self.score(program);
        Ok(Ok(Evaluation {
            fitness: d.fitness,
            macs: (stage == Stage::Full).then_some(d.macs),
            params: None,
        }))
    }

    fn supports_prelim(&self) -> bool {
        true
    }
}
