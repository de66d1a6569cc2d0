//! TOML run configuration.
//!
//! Relative paths (seed program, templates, scripts, evaluator and hook
//! working directories) resolve against the directory of the config file.
//!
//! ```toml
//! mode = "SPARK"
//! seed_program = "seed.py"
//! rng_seed = 7
//!
//! [search]
//! budget = 100
//! attempt_cap = 100
//!
//! [backend]
//! kind = "http"
//! endpoint = "http://localhost:8000/v1"
//! model = "my-model"
//!
//! [evaluator]
//! kind = "command"
//! command = ["python3", "eval.py"]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::ArchiveConfig;
use crate::editor::{
    ChatBackend, Decoding, HttpBackend, HttpConfig, Script, ScriptedBackend, StochasticBackend,
    StochasticConfig,
};
use crate::evaluator::{CommandEvaluator, Evaluator, SyntheticTask};
use crate::feasibility::ValidatorHook;
use crate::operators::{OperatorSettings, TemplatePaths, Templates};
use crate::program::{TagConfig, TaggedProgram};
use crate::search::{RunError, RunMode, SearchSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub budget: usize,
    pub attempt_cap: Option<usize>,
    pub stagnation_window: usize,
    pub proposal_window: usize,
    pub route_retries: u32,
    pub cascade: bool,
    pub cascade_threshold: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchSettings::default();
        Self {
            budget: s.budget,
            attempt_cap: s.attempt_cap,
            stagnation_window: s.stagnation_window,
            proposal_window: s.proposal_window,
            route_retries: s.route_retries,
            cascade: true,
            cascade_threshold: -100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub system: Option<PathBuf>,
    pub route: Option<PathBuf>,
    pub directive: Option<PathBuf>,
    pub edit: Option<PathBuf>,
    pub freeform: Option<PathBuf>,
    pub directive_char_limit: usize,
    pub context_char_budget: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        let o = OperatorSettings::default();
        Self {
            system: None,
            route: None,
            directive: None,
            edit: None,
            freeform: None,
            directive_char_limit: o.directive_char_limit,
            context_char_budget: o.context_char_budget,
        }
    }
}

impl PromptSection {
    fn paths(&self) -> TemplatePaths {
        TemplatePaths {
            system: self.system.clone(),
            route: self.route.clone(),
            directive: self.directive.clone(),
            edit: self.edit.clone(),
            freeform: self.freeform.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedConfig {
    /// JSON or TOML file with `route`, `directive` and `edit` arrays.
    pub file: Option<PathBuf>,
    pub route: Vec<String>,
    pub directive: Vec<String>,
    pub edit: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Http(HttpConfig),
    Scripted(ScriptedConfig),
    Stochastic(StochasticConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvaluatorConfig {
    Command(CommandEvaluator),
    Synthetic(SyntheticTask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub trace: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub record_timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            trace: "trace.jsonl".into(),
            checkpoint: Some("checkpoint.json".into()),
            checkpoint_every: 10,
            record_timing: true,
        }
    }
}

fn default_mode() -> RunMode {
    RunMode::Spark
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    pub seed_program: PathBuf,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub archive: ArchiveConfig,
    #[serde(default)]
    pub tags: TagConfig,
    #[serde(default)]
    pub prompts: PromptSection,
    #[serde(default)]
    pub decoding: Decoding,
    pub backend: BackendConfig,
    pub evaluator: EvaluatorConfig,
    #[serde(default)]
    pub hooks: Vec<ValidatorHook>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, RunError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| RunError::Config(vec![e.to_string()]))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(vec![format!("{}: {e}", path.display())]))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn search_settings(&self) -> SearchSettings {
        SearchSettings {
            mode: self.mode,
            budget: self.search.budget,
            attempt_cap: self.search.attempt_cap,
            stagnation_window: self.search.stagnation_window,
            proposal_window: self.search.proposal_window,
            route_retries: self.search.route_retries,
            cascade_threshold: self.search.cascade.then_some(self.search.cascade_threshold),
            rng_seed: self.rng_seed,
            archive: self.archive.clone(),
            checkpoint_every: self.output.checkpoint_every,
            record_timing: self.output.record_timing,
            halt_after: None,
        }
    }

    /// Every problem found, one message per invalid field.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.search_settings().validate();
        if let Err(e) = self.tags.validate() {
            errs.push(format!("tags: {e}"));
        }
        if !(0.0..=2.0).contains(&self.decoding.temperature) {
            errs.push("decoding.temperature must be in [0, 2]".into());
        }
        if self.decoding.max_tokens == 0 {
            errs.push("decoding.max_tokens must be positive".into());
        }
        if self.prompts.directive_char_limit == 0 {
            errs.push("prompts.directive_char_limit must be positive".into());
        }
        let seed = self.resolve(&self.seed_program);
        if !seed.is_file() {
            errs.push(format!("seed_program: {} is not a readable file", seed.display()));
        }
        let paths = self.prompts.paths();
        for (name, p) in [
            ("system", &paths.system),
            ("route", &paths.route),
            ("directive", &paths.directive),
            ("edit", &paths.edit),
            ("freeform", &paths.freeform),
        ] {
            if let Some(p) = p {
                if !self.resolve(p).is_file() {
                    errs.push(format!("prompts.{name}: {} is not a readable file", p.display()));
                }
            }
        }
        match &self.backend {
            BackendConfig::Http(h) => errs.extend(h.validate()),
            BackendConfig::Stochastic(s) => errs.extend(s.validate()),
            BackendConfig::Scripted(s) => {
                if let Some(f) = &s.file {
                    if let Err(e) = self.load_script(s, f) {
                        errs.push(format!("backend.file: {e}"));
                    }
                }
            }
        }
        match &self.evaluator {
            EvaluatorConfig::Command(c) => {
                if c.command.is_empty() {
                    errs.push("evaluator.command must be non-empty".into());
                }
                if c.full_timeout_ms == 0 || c.prelim_timeout_ms == Some(0) {
                    errs.push("evaluator timeouts must be positive".into());
                }
            }
            EvaluatorConfig::Synthetic(s) => errs.extend(s.validate()),
        }
        for (i, h) in self.hooks.iter().enumerate() {
            if let Err(e) = h.validate() {
                errs.push(format!("hooks[{i}]: {e}"));
            }
        }
        if self.output.trace.as_os_str().is_empty() {
            errs.push("output.trace must be a path".into());
        }
        errs
    }

    pub fn ensure_valid(&self) -> Result<(), RunError> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(errs))
        }
    }

    pub fn load_seed(&self) -> Result<TaggedProgram, RunError> {
        let path = self.resolve(&self.seed_program);
        let bytes = std::fs::read(&path)
            .map_err(|e| RunError::Config(vec![format!("seed_program: {}: {e}", path.display())]))?;
        TaggedProgram::parse_bytes(&bytes, &self.tags)
            .map_err(|e| RunError::SeedInfeasible(format!("{}: {e}", path.display())))
    }

    pub fn operator_settings(&self) -> Result<OperatorSettings, RunError> {
        let templates = Templates::load(&self.prompts.paths(), &self.base_dir)
            .map_err(|e| RunError::Config(vec![format!("prompts: {e}")]))?;
        Ok(OperatorSettings {
            templates,
            decoding: self.decoding,
            tags: self.tags.clone(),
            directive_char_limit: self.prompts.directive_char_limit,
            context_char_budget: self.prompts.context_char_budget,
        })
    }

    fn load_script(&self, inline: &ScriptedConfig, file: &Path) -> Result<Script, String> {
        let path = self.resolve(file);
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut script: Script = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        } else {
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        };
        script.route.extend(inline.route.iter().cloned());
        script.directive.extend(inline.directive.iter().cloned());
        script.edit.extend(inline.edit.iter().cloned());
        Ok(script)
    }

    pub fn build_backend(&self) -> Result<Box<dyn ChatBackend>, RunError> {
        Ok(match &self.backend {
            BackendConfig::Http(h) => Box::new(HttpBackend::new(h.clone())),
            BackendConfig::Stochastic(s) => {
                Box::new(StochasticBackend::new(s.clone(), self.tags.clone()))
            }
            BackendConfig::Scripted(s) => {
                let script = match &s.file {
                    Some(f) => self
                        .load_script(s, f)
                        .map_err(|e| RunError::Config(vec![format!("backend.file: {e}")]))?,
                    None => Script {
                        route: s.route.clone(),
                        directive: s.directive.clone(),
                        edit: s.edit.clone(),
                    },
                };
                Box::new(ScriptedBackend::new(script))
            }
        })
    }

    pub fn build_evaluator(&self) -> Box<dyn Evaluator> {
        match &self.evaluator {
            EvaluatorConfig::Command(c) => {
                let mut c = c.clone();
                c.workdir = Some(self.resolve(c.workdir.as_deref().unwrap_or(Path::new("."))));
                Box::new(c)
            }
            EvaluatorConfig::Synthetic(s) => Box::new(s.clone()),
        }
    }

    pub fn hooks(&self) -> Vec<ValidatorHook> {
        self.hooks
            .iter()
            .cloned()
            .map(|mut h| {
                h.workdir = Some(self.resolve(h.workdir.as_deref().unwrap_or(Path::new("."))));
                h
            })
            .collect()
    }

    /// Digest of every setting that shapes the search (output paths excluded),
    /// used to refuse resuming a checkpoint under a different config.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
