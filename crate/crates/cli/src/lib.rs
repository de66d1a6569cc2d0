//! Command implementations behind the `spark` binary.
//!
//! Each `cmd_*` function writes its human-readable output to the supplied
//! writer and returns an error carrying the process exit status.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use spark_core::config::{BackendConfig, RunConfig};
use spark_core::locality::{check_factor_local_text, entanglement_rate, LocalityVerdict};
use spark_core::metrics::{aggregate, write_aggregate_csv, MetricsSeries, Summary};
use spark_core::program::{parse_factor_token, Factor, TagConfig, TaggedProgram};
use spark_core::search::{read_trace, truncate_trace, Checkpoint, RunError, Search};
use spark_core::simulate::{mode_run, simulate, SimConfig};

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const SEED_INFEASIBLE: i32 = 3;
    pub const BACKEND_UNAVAILABLE: i32 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        Self {
            code: e.exit_code(),
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: exit::FAILURE,
            error,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError {
        code: exit::CONFIG,
        error: anyhow!(msg.into()),
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "spark", version, about = "Factor-conditioned program evolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a search from a TOML config.
    Run(RunArgs),
    /// Compute metrics from one or more traces.
    Report(ReportArgs),
    /// Check parent/child pairs for edit locality.
    Audit(AuditArgs),
    /// Simulate the per-scope feasibility model with the mock editor.
    Simulate(SimulateArgs),
    /// Validate a run config and list every problem.
    ValidateConfig(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from the configured checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Trace path; overrides `output.trace`.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Run once per seed; outputs get a `.seed<N>` suffix.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
    /// Stop after this many attempts without a final checkpoint.
    #[arg(long)]
    pub halt_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Trace files (JSONL).
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    /// Evaluations a reference method needed, for the efficiency ratio.
    #[arg(long)]
    pub reference_evals: Option<u64>,
    /// Directory for CSV and JSON outputs; defaults to each trace's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// JSONL manifest of `{"parent": ..., "child": ..., "factor": ...}`.
    pub manifest: PathBuf,
    /// Per-pair verdicts (JSONL); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run config supplying custom tag strings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML file with simulation settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub p_valid: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub attempts: Option<usize>,
    #[arg(long)]
    pub entangle_p: Option<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
    /// Directory receiving one trace per mode run.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// Parses arguments, dispatches, prints errors and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Run(a) => cmd_run(&a, out),
        Command::Report(a) => cmd_report(&a, out),
        Command::Audit(a) => cmd_audit(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::ValidateConfig(a) => cmd_validate_config(&a.config, out),
    }
}

pub fn cmd_validate_config(path: &Path, out: &mut dyn Write) -> CliResult {
    let cfg = RunConfig::load(path)?;
    cfg.ensure_valid()?;
    writeln!(out, "{}: ok", path.display())?;
    Ok(())
}

/// `trace.jsonl` + seed 3 -> `trace.seed3.jsonl`.
fn with_seed_suffix(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}.seed{seed}"),
    };
    path.with_file_name(name)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> CliResult {
    let cfg = RunConfig::load(&args.config)?;
    cfg.ensure_valid()?;
    let trace = args
        .trace_out
        .clone()
        .unwrap_or_else(|| cfg.resolve(&cfg.output.trace));
    let checkpoint = cfg.output.checkpoint.as_ref().map(|p| cfg.resolve(p));
    match &args.seeds {
        None => run_one(&cfg, &trace, checkpoint.as_deref(), args, out),
        Some(seeds) => {
            for &seed in seeds {
                let mut c = cfg.clone();
                c.rng_seed = seed;
                if let BackendConfig::Stochastic(s) = &mut c.backend {
                    s.seed = seed;
                }
                let cp = checkpoint.as_deref().map(|p| with_seed_suffix(p, seed));
                writeln!(out, "== seed {seed}")?;
                run_one(&c, &with_seed_suffix(&trace, seed), cp.as_deref(), args, out)?;
            }
            Ok(())
        }
    }
}

fn run_one(
    cfg: &RunConfig,
    trace_path: &Path,
    checkpoint: Option<&Path>,
    args: &RunArgs,
    out: &mut dyn Write,
) -> CliResult {
    let mut backend = cfg.build_backend()?;
    let evaluator = cfg.build_evaluator();
    let operators = cfg.operator_settings()?;
    let mut settings = cfg.search_settings();
    settings.halt_after = args.halt_after;
    let fingerprint = cfg.fingerprint();
    for path in std::iter::once(trace_path).chain(checkpoint) {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }

    let search = if args.resume {
        let cp_path = checkpoint.ok_or_else(|| config_error("--resume needs output.checkpoint"))?;
        let cp = Checkpoint::load(cp_path)?;
        if cp.fingerprint != fingerprint {
            return Err(config_error(format!(
                "{} was written under a different configuration",
                cp_path.display()
            )));
        }
        truncate_trace(trace_path, cp.trace_records)
            .with_context(|| format!("rewinding {}", trace_path.display()))?;
        writeln!(
            out,
            "resuming after attempt {} ({} evaluations)",
            cp.ledger.attempts, cp.ledger.n_eval
        )?;
        Search::resume(settings, operators, cfg.hooks(), backend.as_mut(), evaluator.as_ref(), cp)?
    } else {
        let seed = cfg.load_seed()?;
        Search::start(settings, operators, cfg.hooks(), backend.as_mut(), evaluator.as_ref(), &seed)?
    };

    let file = OpenOptions::new()
        .create(true)
        .append(args.resume)
        .write(true)
        .truncate(!args.resume)
        .open(trace_path)
        .with_context(|| format!("opening trace {}", trace_path.display()))?;
    let mut search = search.with_trace(BufWriter::new(file));
    if let Some(cp) = checkpoint {
        search = search.with_checkpoints(cp, fingerprint.clone());
    }
    let result = search.run()?;

    let best = &result.best;
    let best_path = sibling(trace_path, ".best.py");
    fs::write(&best_path, best.program.serialize())?;
    writeln!(out, "stopped: {:?}", result.stop)?;
    writeln!(
        out,
        "attempts: {}  evaluations: {}",
        result.ledger.attempts, result.ledger.n_eval
    )?;
    writeln!(
        out,
        "best: fitness {} macs {} ({}) from attempt {}",
        best.descriptor.fitness,
        best.descriptor.macs,
        &best.digest()[..12],
        best.iteration
    )?;
    writeln!(out, "trace: {}", trace_path.display())?;
    writeln!(out, "best program: {}", best_path.display())?;
    Ok(())
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> CliResult {
    let mut all = Vec::new();
    for trace in &args.traces {
        let records = read_trace(trace).map_err(anyhow::Error::from)?;
        let series = MetricsSeries::from_records(&records);
        let summary = Summary::from_records(&records, args.reference_evals);
        let dir = match &args.out_dir {
            Some(d) => d.clone(),
            None => trace.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        fs::create_dir_all(&dir).ok();
        let stem = trace.file_stem().unwrap_or_default().to_string_lossy();
        let csv = dir.join(format!("{stem}.metrics.csv"));
        series.write_csv(BufWriter::new(File::create(&csv)?))?;
        let json = dir.join(format!("{stem}.summary.json"));
        fs::write(&json, serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n")?;
        print_summary(out, trace, &summary)?;
        writeln!(out, "  metrics: {}", csv.display())?;
        writeln!(out, "  summary: {}", json.display())?;
        all.push(series);
    }
    if all.len() > 1 {
        let dir = match &args.out_dir {
            Some(d) => d.clone(),
            None => args.traces[0].parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let path = dir.join("aggregate.csv");
        write_aggregate_csv(&aggregate(&all), BufWriter::new(File::create(&path)?))?;
        writeln!(out, "aggregate over {} traces: {}", all.len(), path.display())?;
    }
    Ok(())
}

fn print_summary(out: &mut dyn Write, trace: &Path, s: &Summary) -> std::io::Result<()> {
    writeln!(out, "{}", trace.display())?;
    writeln!(
        out,
        "  attempts {}  evaluations {}  valid rate {:.4}",
        s.attempts, s.evaluations, s.valid_rate
    )?;
    match (s.best_fitness, s.best_iteration, s.evaluations_to_best) {
        (Some(f), Some(it), Some(ev)) => writeln!(
            out,
            "  best fitness {f} (macs {}, {:.1}K) at attempt {it}, evaluation {ev}",
            s.best_macs.unwrap_or(0),
            s.best_macs.unwrap_or(0) as f64 / 1000.0
        )?,
        _ => writeln!(out, "  best fitness: none (no evaluated candidates)")?,
    }
    if let Some(r) = s.entanglement_rate {
        writeln!(out, "  entanglement rate {r:.4}")?;
    }
    if let Some(e) = &s.efficiency {
        writeln!(
            out,
            "  efficiency {} ({} / {})",
            e.display, e.reference_evaluations, e.evaluations_to_best
        )?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    parent: PathBuf,
    child: PathBuf,
    #[serde(default)]
    factor: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct AuditVerdict {
    pub parent: PathBuf,
    pub child: PathBuf,
    #[serde(flatten)]
    pub verdict: LocalityVerdict,
}

pub fn audit_manifest(manifest: &Path, tags: &TagConfig) -> anyhow::Result<Vec<AuditVerdict>> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let mut verdicts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", manifest.display(), i + 1))?;
        let factor: Option<Factor> = entry
            .factor
            .as_deref()
            .map(parse_factor_token)
            .transpose()
            .with_context(|| format!("{}:{}", manifest.display(), i + 1))?;
        let read = |p: &Path| {
            fs::read(base.join(p)).with_context(|| format!("{}:{}: {}", manifest.display(), i + 1, p.display()))
        };
        let parent_bytes = read(&entry.parent)?;
        let child_bytes = read(&entry.child)?;
        let verdict = match (
            TaggedProgram::parse_bytes(&parent_bytes, tags),
            String::from_utf8(child_bytes),
        ) {
            (Ok(parent), Ok(child)) => check_factor_local_text(&parent, &child, tags, factor),
            _ => LocalityVerdict::tag_failure(factor),
        };
        verdicts.push(AuditVerdict {
            parent: entry.parent,
            child: entry.child,
            verdict,
        });
    }
    Ok(verdicts)
}

pub fn cmd_audit(args: &AuditArgs, out: &mut dyn Write) -> CliResult {
    let tags = match &args.config {
        Some(p) => RunConfig::load(p)?.tags,
        None => TagConfig::default(),
    };
    tags.validate().map_err(config_error)?;
    let verdicts = audit_manifest(&args.manifest, &tags)?;
    let lines: Vec<String> = verdicts
        .iter()
        .map(|v| serde_json::to_string(v).map_err(anyhow::Error::from))
        .collect::<Result<_, _>>()?;
    match &args.out {
        Some(p) => fs::write(p, lines.iter().map(|l| format!("{l}\n")).collect::<String>())?,
        None => {
            for l in &lines {
                writeln!(out, "{l}")?;
            }
        }
    }
    let rate = entanglement_rate(verdicts.iter().map(|v| &v.verdict));
    writeln!(
        out,
        "entanglement rate: {:.4} ({}/{})",
        rate.value, rate.count, rate.total
    )?;
    Ok(())
}

pub fn sim_config(args: &SimulateArgs) -> CliResult<SimConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => SimConfig::default(),
    };
    if let Some(v) = args.p_valid {
        cfg.p_valid = v;
    }
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(v) = args.attempts {
        cfg.attempts = v;
    }
    if let Some(v) = args.entangle_p {
        cfg.entangle_p = v;
    }
    if let Some(v) = &args.seeds {
        cfg.seeds = v.clone();
    }
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(RunError::Config(errs).into());
    }
    Ok(cfg)
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> CliResult {
    let cfg = sim_config(args)?;
    let table_seed = cfg.seeds.first().copied().unwrap_or(0);
    let report = simulate(&cfg, table_seed)?;
    writeln!(out, "p_valid = {}", cfg.p_valid)?;
    writeln!(out, "{:>2}  {:>9}  {:>9}  {:>7}", "k", "p_valid^k", "measured", "trials")?;
    for row in &report.table {
        writeln!(
            out,
            "{:>2}  {:>9.4}  {:>9.4}  {:>7}",
            row.k, row.analytic, row.measured, row.trials
        )?;
    }
    for run in &report.runs {
        let s = &run.summary;
        writeln!(
            out,
            "{:<12} seed {:<4} valid rate {:.2}  entanglement {:.2}  best {}",
            run.mode.as_str(),
            run.seed,
            s.valid_rate,
            s.entanglement_rate.unwrap_or(0.0),
            s.best_fitness.map_or("none".into(), |f| format!("{f:.4}")),
        )?;
    }
    if let Some(dir) = &args.trace_out {
        fs::create_dir_all(dir)?;
        for &seed in &cfg.seeds {
            for &mode in &cfg.modes {
                let path = dir.join(format!("{}.seed{seed}.jsonl", mode.as_str().to_lowercase()));
                let mut w = BufWriter::new(File::create(&path)?);
                mode_run(mode, &cfg, seed, Some(&mut w))?;
                w.flush()?;
            }
        }
        writeln!(out, "traces: {}", dir.display())?;
    }
    if let Some(p) = &args.out {
        fs::write(p, serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n")?;
    }
    Ok(())
}
