//! Route, directive and edit steps, plus the context they share.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Elite};
use crate::editor::{BackendError, ChatBackend, ChatRequest, Decoding, EditPayload, Message, Role};
use crate::feasibility::{classify_editor_output, Failure, FailureType};
use crate::program::{parse_factor_token, Factor, TagConfig};
use crate::search::{ProposalBuffer, ProposalOutcome};

pub const DEFAULT_DIRECTIVE: &str = "make one conservative in-scope improvement";

pub const DEFAULT_SYSTEM: &str = "You are an expert neural architecture engineer editing a Python program. \
The program has two editable regions delimited by tag comments: OPERATOR (module parameterization and structure) \
and ACTION (how operators are invoked and wired). Everything outside those regions is fixed scaffolding.";

pub const DEFAULT_ROUTE: &str = "Decide which region the next edit should modify.

Search signals:
{SIGNALS}

Reference programs from the archive:
{INSPIRATIONS}

Current program:
```python
{PARENT_PROGRAM}```

Answer with exactly one token: OPERATOR or ACTION.
";

pub const DEFAULT_DIRECTIVE_PROMPT: &str = "The next edit will modify only the {FACTOR} region of the program below.

Search signals:
{SIGNALS}

Current program:
```python
{PARENT_PROGRAM}```

Write one short, concrete refinement instruction for the {FACTOR} region. Do not mention region tags. Reply with the instruction only.
";

pub const DEFAULT_EDIT: &str = "Apply this instruction to the {FACTOR} region: {DIRECTIVE}

Reference programs from the archive:
{INSPIRATIONS}

Current program:
```python
{PARENT_PROGRAM}```

Output the complete program in a single ```python code block. Modify only the {FACTOR} region; keep all tags and everything else byte-identical.
";

pub const DEFAULT_FREEFORM: &str = "Improve the program below.

Search signals:
{SIGNALS}

Reference programs from the archive:
{INSPIRATIONS}

Current program:
```python
{PARENT_PROGRAM}```

Output the complete updated program in a single ```python code block. Keep every region tag line.
";

/// Optional template file overrides. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatePaths {
    pub system: Option<std::path::PathBuf>,
    pub route: Option<std::path::PathBuf>,
    pub directive: Option<std::path::PathBuf>,
    pub edit: Option<std::path::PathBuf>,
    pub freeform: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub system: String,
    pub route: String,
    pub directive: String,
    pub edit: String,
    pub freeform: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM.into(),
            route: DEFAULT_ROUTE.into(),
            directive: DEFAULT_DIRECTIVE_PROMPT.into(),
            edit: DEFAULT_EDIT.into(),
            freeform: DEFAULT_FREEFORM.into(),
        }
    }
}

impl Templates {
    pub fn load(paths: &TemplatePaths, base: &Path) -> std::io::Result<Self> {
        let mut t = Templates::default();
        let slots = [
            (&paths.system, &mut t.system),
            (&paths.route, &mut t.route),
            (&paths.directive, &mut t.directive),
            (&paths.edit, &mut t.edit),
            (&paths.freeform, &mut t.freeform),
        ];
        for (path, slot) in slots {
            if let Some(p) = path {
                let full = base.join(p);
                *slot = std::fs::read_to_string(&full).map_err(|e| {
                    std::io::Error::new(e.kind(), format!("{}: {e}", full.display()))
                })?;
            }
        }
        Ok(t)
    }
}

/// Substitutes `{NAME}` placeholders. Unknown names are left untouched.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSummary {
    pub window: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub histogram: BTreeMap<FailureType, usize>,
}

impl ProposalSummary {
    pub fn from_buffer(q: &ProposalBuffer) -> Self {
        let mut histogram = BTreeMap::new();
        let mut failures = 0;
        for o in q.iter() {
            if let ProposalOutcome::Fail(t) = o {
                failures += 1;
                *histogram.entry(*t).or_insert(0) += 1;
            }
        }
        let window = q.len();
        Self {
            window,
            failures,
            failure_rate: if window == 0 {
                0.0
            } else {
                failures as f64 / window as f64
            },
            histogram,
        }
    }

    /// Failure types sharing the highest count, in declaration order.
    pub fn dominant(&self) -> Vec<FailureType> {
        let top = self.histogram.values().copied().max().unwrap_or(0);
        if top == 0 {
            return Vec::new();
        }
        self.histogram
            .iter()
            .filter(|(_, &n)| n == top)
            .map(|(t, _)| *t)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stagnation {
    pub improvement: f64,
    pub stagnant: bool,
}

/// Best-so-far improvement achieved by the last evaluations.
///
/// `recent` holds the window; `best_before` is the best fitness seen before
/// it. Without an earlier best the first window entry is the baseline.
pub fn stagnation(recent: &[f64], best_before: Option<f64>) -> Stagnation {
    let Some(&first) = recent.first() else {
        return Stagnation {
            improvement: 0.0,
            stagnant: false,
        };
    };
    let peak = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let improvement = peak - best_before.unwrap_or(first);
    Stagnation {
        improvement,
        stagnant: improvement <= 0.0,
    }
}

#[derive(Debug, Clone)]
pub struct EvolutionContext {
    pub parent: Elite,
    /// Fitness of the last evaluated candidates, oldest first.
    pub recent_outcomes: Vec<f64>,
    pub best_before_window: Option<f64>,
    pub inspirations: Vec<Elite>,
    pub proposal_summary: ProposalSummary,
}

impl EvolutionContext {
    pub fn stagnation(&self) -> Stagnation {
        stagnation(&self.recent_outcomes, self.best_before_window)
    }
}

/// Samples parent and inspirations and summarizes recent history.
///
/// `history` lists the fitness of every evaluated candidate in order,
/// starting with the seed.
pub fn build_context<R: Rng + ?Sized>(
    archive: &Archive,
    island: usize,
    rng: &mut R,
    history: &[f64],
    window: usize,
    q_prop: &ProposalBuffer,
) -> Result<EvolutionContext, crate::archive::ArchiveError> {
    let (parent, inspirations) = archive.sample_parent_and_inspirations(island, rng)?;
    let split = history.len().saturating_sub(window);
    let best_before_window = history[..split].iter().copied().reduce(f64::max);
    Ok(EvolutionContext {
        parent,
        recent_outcomes: history[split..].to_vec(),
        best_before_window,
        inspirations,
        proposal_summary: ProposalSummary::from_buffer(q_prop),
    })
}

/// Removes fencing and tag strings, collapses whitespace, truncates.
pub fn sanitize(text: &str, tags: &TagConfig, limit: usize) -> String {
    let mut s: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n");
    loop {
        let next = collapse(&strip_tags_once(&s, tags));
        if next == s {
            break;
        }
        s = next;
    }
    let mut out: String = s.chars().take(limit).collect();
    out.truncate(out.trim_end().len());
    out
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_tags_once(s: &str, tags: &TagConfig) -> String {
    let mut out = s.to_string();
    for marker in tags.markers() {
        out = out.replace(marker, " ");
        let core = marker.trim_start_matches(|c: char| c == '#' || c.is_whitespace());
        if !core.is_empty() {
            out = out.replace(core, " ");
        }
    }
    for opener in ["</SPARK:", "<SPARK:"] {
        while let Some(at) = out.find(opener) {
            let end = out[at..].find('>').map(|e| at + e + 1).unwrap_or(out.len());
            out.replace_range(at..end, " ");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    pub text: String,
    pub factor: Factor,
    /// True when the default directive replaced an empty response.
    pub defaulted: bool,
}

impl Directive {
    pub fn default_for(factor: Factor) -> Self {
        Self {
            text: DEFAULT_DIRECTIVE.into(),
            factor,
            defaulted: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteOutcome {
    pub factor: Factor,
    pub calls: u32,
    /// True when every response was unparseable and ACTION was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub calls: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

/// Operator settings that do not change during a run.
#[derive(Debug, Clone)]
pub struct OperatorSettings {
    pub templates: Templates,
    pub decoding: Decoding,
    pub tags: TagConfig,
    pub directive_char_limit: usize,
    pub context_char_budget: usize,
}

impl Default for OperatorSettings {
    fn default() -> Self {
        Self {
            templates: Templates::default(),
            decoding: Decoding::default(),
            tags: TagConfig::default(),
            directive_char_limit: 500,
            context_char_budget: 24_000,
        }
    }
}

/// One step's worth of backend access, with usage accounting.
pub struct Session<'a> {
    backend: &'a mut dyn ChatBackend,
    settings: &'a OperatorSettings,
    pub usage: Usage,
}

impl<'a> Session<'a> {
    pub fn new(backend: &'a mut dyn ChatBackend, settings: &'a OperatorSettings) -> Self {
        Self {
            backend,
            settings,
            usage: Usage::default(),
        }
    }

    fn call(
        &mut self,
        role: Role,
        user: String,
        payload: Option<EditPayload>,
    ) -> Result<String, BackendError> {
        let request = ChatRequest {
            role,
            messages: vec![
                Message::system(self.settings.templates.system.clone()),
                Message::user(user),
            ],
            decoding: self.settings.decoding,
            payload,
        };
        let resp = self.backend.complete(&request)?;
        self.usage.calls += 1;
        self.usage.prompt_tokens += resp.prompt_tokens.unwrap_or(0);
        self.usage.completion_tokens += resp.completion_tokens.unwrap_or(0);
        self.usage.latency_ms += resp.latency_ms;
        Ok(resp.text)
    }

    /// Asks for a factor up to `retries` times with the same prompt.
    pub fn asr_route(
        &mut self,
        ctx: &EvolutionContext,
        retries: u32,
    ) -> Result<RouteOutcome, BackendError> {
        let prompt = render(
            &self.settings.templates.route,
            &[
                ("PARENT_PROGRAM", &ctx.parent.program.serialize()),
                ("SIGNALS", &signals_text(ctx, None)),
                ("INSPIRATIONS", &self.inspirations_text(ctx)),
            ],
        );
        for r in 1..=retries {
            let reply = self.call(Role::Route, prompt.clone(), None)?;
            let token = reply.trim().trim_matches(|c: char| !c.is_ascii_alphanumeric());
            if let Ok(factor) = parse_factor_token(token) {
                return Ok(RouteOutcome {
                    factor,
                    calls: r,
                    fallback: false,
                });
            }
        }
        Ok(RouteOutcome {
            factor: Factor::Action,
            calls: retries,
            fallback: true,
        })
    }

    pub fn rc_directive(
        &mut self,
        ctx: &EvolutionContext,
        factor: Factor,
    ) -> Result<Directive, BackendError> {
        let prompt = render(
            &self.settings.templates.directive,
            &[
                ("PARENT_PROGRAM", &ctx.parent.program.serialize()),
                ("FACTOR", factor.as_str()),
                ("SIGNALS", &signals_text(ctx, Some(factor))),
                ("INSPIRATIONS", &self.inspirations_text(ctx)),
            ],
        );
        let reply = self.call(Role::Directive, prompt, None)?;
        let text = sanitize(&reply, &self.settings.tags, self.settings.directive_char_limit);
        Ok(if text.is_empty() {
            Directive::default_for(factor)
        } else {
            Directive {
                text,
                factor,
                defaulted: false,
            }
        })
    }

    /// Single-shot scoped edit. Only the tag presence is checked here.
    pub fn sar_edit(
        &mut self,
        ctx: &EvolutionContext,
        directive: &Directive,
    ) -> Result<Result<String, Failure>, BackendError> {
        let factor = directive.factor;
        let prompt = render(
            &self.settings.templates.edit,
            &[
                ("PARENT_PROGRAM", &ctx.parent.program.serialize()),
                ("FACTOR", factor.as_str()),
                ("DIRECTIVE", &directive.text),
                ("SIGNALS", &signals_text(ctx, Some(factor))),
                ("INSPIRATIONS", &self.inspirations_text(ctx)),
            ],
        );
        let payload = EditPayload {
            parent: ctx.parent.program.clone(),
            factor: Some(factor),
        };
        let reply = self.call(Role::Edit, prompt, Some(payload))?;
        Ok(classify_editor_output(&reply, &self.settings.tags))
    }

    /// Unscoped holistic edit used by the free-form baseline.
    pub fn freeform_edit(
        &mut self,
        ctx: &EvolutionContext,
    ) -> Result<Result<String, Failure>, BackendError> {
        let prompt = render(
            &self.settings.templates.freeform,
            &[
                ("PARENT_PROGRAM", &ctx.parent.program.serialize()),
                ("SIGNALS", &signals_text(ctx, None)),
                ("INSPIRATIONS", &self.inspirations_text(ctx)),
            ],
        );
        let payload = EditPayload {
            parent: ctx.parent.program.clone(),
            factor: None,
        };
        let reply = self.call(Role::Edit, prompt, Some(payload))?;
        Ok(classify_editor_output(&reply, &self.settings.tags))
    }

    fn inspirations_text(&self, ctx: &EvolutionContext) -> String {
        inspirations_text(&ctx.inspirations, self.settings.context_char_budget)
    }
}

/// Renders inspirations as full programs, falling back to region-body
/// excerpts and then to fewer entries when over `budget` characters.
pub fn inspirations_text(elites: &[Elite], budget: usize) -> String {
    let header = |i: usize, e: &Elite| {
        format!(
            "### Program {} (fitness {:.4}, macs {})\n",
            i + 1,
            e.descriptor.fitness,
            e.descriptor.macs
        )
    };
    let full: String = elites
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}```python\n{}```\n", header(i, e), e.program.serialize()))
        .collect();
    if full.chars().count() <= budget {
        return full;
    }
    let mut out = String::new();
    for (i, e) in elites.iter().enumerate() {
        let mut entry = header(i, e);
        for f in Factor::ALL {
            entry.push_str(&format!("{f}:\n"));
            for line in e.program.body(f) {
                entry.push_str(line);
                entry.push('\n');
            }
        }
        if out.chars().count() + entry.chars().count() > budget {
            break;
        }
        out.push_str(&entry);
    }
    out
}

fn signals_text(ctx: &EvolutionContext, factor: Option<Factor>) -> String {
    let mut s = String::new();
    let d = &ctx.parent.descriptor;
    s.push_str(&format!("parent fitness {:.4}, macs {}\n", d.fitness, d.macs));
    let st = ctx.stagnation();
    let recent: Vec<String> = ctx.recent_outcomes.iter().map(|f| format!("{f:.4}")).collect();
    s.push_str(&format!(
        "last {} evaluated fitness values: [{}]; best-so-far improvement {:.4} ({})\n",
        recent.len(),
        recent.join(", "),
        st.improvement,
        if st.stagnant { "stagnant" } else { "improving" }
    ));
    let ps = &ctx.proposal_summary;
    let dominant: Vec<String> = ps
        .dominant()
        .iter()
        .map(|t| format!("{t} ({})", ps.histogram[t]))
        .collect();
    s.push_str(&format!(
        "recent proposal failure rate {:.2} over {} proposals; dominant failure types: {}\n",
        ps.failure_rate,
        ps.window,
        if dominant.is_empty() {
            "none".to_string()
        } else {
            dominant.join(", ")
        }
    ));
    if let Some(f) = factor {
        s.push_str(&format!("target region: {f}\n"));
    }
    s
}
