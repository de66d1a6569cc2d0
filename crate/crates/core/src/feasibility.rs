//! Staged feasibility pipeline for proposed offspring.
//!
//! Stages run in a fixed order and stop at the first failure:
//! tag parse, factor locality, syntax hooks, interface hooks, semantic hooks.
//! The first two are pure; hooks may spawn external commands.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::locality::{check_any_factor_local, check_factor_local, LocalityVerdict};
use crate::program::{Factor, TagConfig, TaggedProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureType {
    TagViolation,
    NotFactorLocal,
    Syntax,
    Interface,
    Semantic,
    EditorFail,
    Timeout,
    EvaluatorError,
}

impl FailureType {
    pub const ALL: [FailureType; 8] = [
        FailureType::TagViolation,
        FailureType::NotFactorLocal,
        FailureType::Syntax,
        FailureType::Interface,
        FailureType::Semantic,
        FailureType::EditorFail,
        FailureType::Timeout,
        FailureType::EvaluatorError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureType::TagViolation => "TAG_VIOLATION",
            FailureType::NotFactorLocal => "NOT_FACTOR_LOCAL",
            FailureType::Syntax => "SYNTAX",
            FailureType::Interface => "INTERFACE",
            FailureType::Semantic => "SEMANTIC",
            FailureType::EditorFail => "EDITOR_FAIL",
            FailureType::Timeout => "TIMEOUT",
            FailureType::EvaluatorError => "EVALUATOR_ERROR",
        }
    }
}

impl fmt::Display for FailureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed proposal failure with whatever diagnostic text was captured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureType,
    pub detail: String,
}

impl Failure {
    pub fn new(kind: FailureType, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HookKind {
    Syntax,
    Interface,
    Semantic,
}

impl HookKind {
    fn failure(self) -> FailureType {
        match self {
            HookKind::Syntax => FailureType::Syntax,
            HookKind::Interface => FailureType::Interface,
            HookKind::Semantic => FailureType::Semantic,
        }
    }

    fn stage(self) -> u8 {
        match self {
            HookKind::Syntax => 0,
            HookKind::Interface => 1,
            HookKind::Semantic => 2,
        }
    }
}

fn default_hook_timeout() -> u64 {
    60_000
}

/// A validation step. Any combination of an external command, required
/// symbols (must appear verbatim in frozen lines) and forbidden patterns
/// (must not appear on any line) may be configured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidatorHook {
    pub kind: HookKind,
    /// Program and arguments; the candidate file path is appended.
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default = "default_hook_timeout")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub required_symbols: Vec<String>,
    #[serde(default)]
    pub forbidden_patterns: Vec<String>,
    /// Working directory for the command; defaults to the current one.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
}

impl ValidatorHook {
    pub fn command(kind: HookKind, command: Vec<String>) -> Self {
        Self {
            kind,
            command,
            timeout_ms: default_hook_timeout(),
            required_symbols: Vec::new(),
            forbidden_patterns: Vec::new(),
            workdir: None,
        }
    }

    pub fn forbid(kind: HookKind, patterns: Vec<String>) -> Self {
        Self {
            kind,
            command: Vec::new(),
            timeout_ms: default_hook_timeout(),
            required_symbols: Vec::new(),
            forbidden_patterns: patterns,
            workdir: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.command.is_empty()
            && self.required_symbols.is_empty()
            && self.forbidden_patterns.is_empty()
        {
            return Err(format!("{:?} hook configures no check", self.kind));
        }
        if !self.required_symbols.is_empty() && self.kind != HookKind::Interface {
            return Err("required_symbols is only valid on INTERFACE hooks".into());
        }
        if self.timeout_ms == 0 {
            return Err("hook timeout_ms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FeasibilityError {
    #[error("hook command {command:?} could not be started: {source}")]
    HookSpawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("could not stage candidate file: {0}")]
    Io(#[from] std::io::Error),
}

/// Result of running one subprocess to completion or timeout.
pub(crate) enum ProcessOutcome {
    Exited {
        success: bool,
        code: Option<i32>,
        stdout: String,
        stderr: String,
    },
    TimedOut,
}

pub(crate) fn run_process(
    command: &[String],
    extra_args: &[&std::ffi::OsStr],
    timeout: Duration,
    cwd: Option<&Path>,
    env_passthrough: Option<&[String]>,
) -> std::io::Result<ProcessOutcome> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .args(extra_args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = cwd {
        cmd.current_dir(dir);
    }
    if let Some(keep) = env_passthrough {
        cmd.env_clear();
        for key in keep.iter().map(String::as_str).chain(["PATH"]) {
            if let Ok(v) = std::env::var(key) {
                cmd.env(key, v);
            }
        }
    }
    let mut child = cmd.spawn()?;

    // Drain pipes on threads so a chatty child cannot block on a full pipe.
    let mut out_pipe = child.stdout.take().expect("piped stdout");
    let mut err_pipe = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut s = Vec::new();
        let _ = out_pipe.read_to_end(&mut s);
        s
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = Vec::new();
        let _ = err_pipe.read_to_end(&mut s);
        s
    });

    match child.wait_timeout(timeout)? {
        Some(status) => {
            let stdout = out_reader.join().unwrap_or_default();
            let stderr = err_reader.join().unwrap_or_default();
            Ok(ProcessOutcome::Exited {
                success: status.success(),
                code: status.code(),
                stdout: String::from_utf8_lossy(&stdout).into_owned(),
                stderr: String::from_utf8_lossy(&stderr).into_owned(),
            })
        }
        None => {
            let _ = child.kill();
            let _ = child.wait();
            Ok(ProcessOutcome::TimedOut)
        }
    }
}

fn run_hook(
    hook: &ValidatorHook,
    child: &TaggedProgram,
    path: Option<&Path>,
) -> Result<Option<Failure>, FeasibilityError> {
    let fail = |detail: String| Ok(Some(Failure::new(hook.kind.failure(), detail)));

    for pattern in &hook.forbidden_patterns {
        if let Some(i) = child.lines().iter().position(|l| l.contains(pattern.as_str())) {
            return fail(format!("forbidden pattern {pattern:?} at line {}", i + 1));
        }
    }
    if !hook.required_symbols.is_empty() {
        let frozen = child.frozen_segments();
        for sym in &hook.required_symbols {
            let present = frozen
                .iter()
                .any(|seg| seg.iter().any(|l| l.contains(sym.as_str())));
            if !present {
                return fail(format!("required symbol {sym:?} missing from frozen scaffolding"));
            }
        }
    }
    if hook.command.is_empty() {
        return Ok(None);
    }
    let path = path.expect("candidate file staged when a hook command exists");
    let outcome = run_process(
        &hook.command,
        &[path.as_os_str()],
        Duration::from_millis(hook.timeout_ms),
        hook.workdir.as_deref(),
        None,
    )
    .map_err(|source| FeasibilityError::HookSpawn {
        command: hook.command.join(" "),
        source,
    })?;
    match outcome {
        ProcessOutcome::TimedOut => Ok(Some(Failure::new(
            FailureType::Timeout,
            format!("{:?} hook exceeded {} ms", hook.kind, hook.timeout_ms),
        ))),
        ProcessOutcome::Exited { success: true, .. } => Ok(None),
        ProcessOutcome::Exited { code, stderr, .. } => fail(format!(
            "exit status {}: {}",
            code.map_or_else(|| "signal".to_string(), |c| c.to_string()),
            stderr.trim()
        )),
    }
}

/// Outcome of one feasibility check.
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub result: Result<TaggedProgram, Failure>,
    /// The tag-failure verdict when the child does not parse.
    pub verdict: LocalityVerdict,
}

impl FeasibilityReport {
    pub fn passed(&self) -> bool {
        self.result.is_ok()
    }

    pub fn failure_type(&self) -> Option<FailureType> {
        self.result.as_ref().err().map(|f| f.kind)
    }
}

/// How locality is enforced for a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Routed factor; non-local edits are rejected.
    Factor(Factor),
    /// Free-form editing; locality is measured but never enforced.
    Unscoped,
}

/// Runs the feasibility pipeline on a proposed child.
///
/// Returns `Err` only for configuration problems (a hook that cannot be
/// started), which abort the run rather than failing the proposal.
pub fn check_feasible(
    parent: &TaggedProgram,
    child_text: &str,
    scope: Scope,
    hooks: &[ValidatorHook],
    tags: &TagConfig,
) -> Result<FeasibilityReport, FeasibilityError> {
    let selected = match scope {
        Scope::Factor(f) => Some(f),
        Scope::Unscoped => None,
    };
    let child = match TaggedProgram::parse(child_text, tags) {
        Ok(c) => c,
        Err(e) => {
            return Ok(FeasibilityReport {
                result: Err(Failure::new(FailureType::TagViolation, e.to_string())),
                verdict: LocalityVerdict::tag_failure(selected),
            })
        }
    };

    let verdict = match selected {
        Some(f) => check_factor_local(parent, &child, f),
        None => check_any_factor_local(parent, &child),
    };
    if selected.is_some() && !verdict.is_factor_local {
        let touched = verdict.touched_regions;
        return Ok(FeasibilityReport {
            result: Err(Failure::new(
                FailureType::NotFactorLocal,
                format!("edit touches {touched}"),
            )),
            verdict,
        });
    }

    let mut ordered: Vec<&ValidatorHook> = hooks.iter().collect();
    ordered.sort_by_key(|h| h.kind.stage());

    let staged = if ordered.iter().any(|h| !h.command.is_empty()) {
        Some(stage_candidate(&child)?)
    } else {
        None
    };
    let path = staged.as_ref().map(|(_, p)| p.as_path());

    for hook in ordered {
        if let Some(failure) = run_hook(hook, &child, path)? {
            return Ok(FeasibilityReport {
                result: Err(failure),
                verdict,
            });
        }
    }
    Ok(FeasibilityReport {
        result: Ok(child),
        verdict,
    })
}

fn stage_candidate(child: &TaggedProgram) -> std::io::Result<(tempfile::TempDir, PathBuf)> {
    let dir = tempfile::Builder::new().prefix("spark-candidate").tempdir()?;
    let path = dir.path().join("candidate.py");
    std::fs::write(&path, child.serialize())?;
    Ok((dir, path))
}

/// Extracts the program from an editor response.
///
/// The last complete fenced code block wins; with no complete block the
/// whole response is taken. The result must carry all four region tags.
pub fn classify_editor_output(response: &str, tags: &TagConfig) -> Result<String, Failure> {
    if response.trim().is_empty() {
        return Err(Failure::new(FailureType::EditorFail, "empty editor response"));
    }
    let candidate = last_fenced_block(response).unwrap_or_else(|| response.to_string());
    let lines: Vec<&str> = candidate.lines().collect();
    if !tags.all_present(&lines) {
        return Err(Failure::new(
            FailureType::EditorFail,
            "editor output lacks region tags",
        ));
    }
    Ok(candidate)
}

fn last_fenced_block(text: &str) -> Option<String> {
    let mut last = None;
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        match current.as_mut() {
            None if trimmed.starts_with("```") => current = Some(Vec::new()),
            None => {}
            Some(_) if trimmed == "```" => {
                let body = current.take().unwrap();
                let mut s = body.join("\n");
                s.push('\n');
                last = Some(s);
            }
            Some(body) => body.push(line),
        }
    }
    last
}
