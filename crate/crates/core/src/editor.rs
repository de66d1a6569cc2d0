//! Chat-completion backends shared by the route, directive and edit roles.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{Factor, Region, TagConfig, TaggedProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Route,
    Directive,
    Edit,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Route, Role::Directive, Role::Edit];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Route => "ROUTE",
            Role::Directive => "DIRECTIVE",
            Role::Edit => "EDIT",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Decoding settings; one value per run, shared by every role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 4096,
        }
    }
}

/// Side information for offline backends. Never sent over the wire.
#[derive(Debug, Clone)]
pub struct EditPayload {
    pub parent: TaggedProgram,
    /// `None` for free-form edits.
    pub factor: Option<Factor>,
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub role: Role,
    pub messages: Vec<Message>,
    pub decoding: Decoding,
    pub payload: Option<EditPayload>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: u64,
}

impl ChatResponse {
    fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("scripted responses exhausted for role {0}")]
    ScriptExhausted(Role),
    #[error("backend state cannot be restored: {0}")]
    Restore(String),
}

pub trait ChatBackend: Send {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Opaque state for checkpoints. Stateless backends return `Null`.
    fn snapshot(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn restore(&mut self, _state: &serde_json::Value) -> Result<(), BackendError> {
        Ok(())
    }
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

/// OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL (`.../v1`) or the full `/chat/completions` URL.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "HttpConfig::default_retries")]
    pub retries: u32,
    #[serde(default = "HttpConfig::default_backoff")]
    pub initial_backoff_ms: u64,
    #[serde(default = "HttpConfig::default_factor")]
    pub backoff_factor: f64,
    #[serde(default = "HttpConfig::default_timeout")]
    pub request_timeout_ms: u64,
}

impl HttpConfig {
    fn default_retries() -> u32 {
        3
    }
    fn default_backoff() -> u64 {
        1000
    }
    fn default_factor() -> f64 {
        2.0
    }
    fn default_timeout() -> u64 {
        300_000
    }

    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: default_api_key_env(),
            retries: Self::default_retries(),
            initial_backoff_ms: Self::default_backoff(),
            backoff_factor: Self::default_factor(),
            request_timeout_ms: Self::default_timeout(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.endpoint.trim().is_empty() {
            errs.push("backend.endpoint must be non-empty".into());
        }
        if self.model.trim().is_empty() {
            errs.push("backend.model must be non-empty".into());
        }
        if !(self.backoff_factor >= 1.0 && self.backoff_factor.is_finite()) {
            errs.push("backend.backoff_factor must be a finite number >= 1".into());
        }
        if self.request_timeout_ms == 0 {
            errs.push("backend.request_timeout_ms must be positive".into());
        }
        errs
    }

    pub fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.request_timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        Self {
            config,
            agent,
            api_key,
        }
    }

    /// One request; `Err((retryable, message))` on failure.
    fn attempt(&self, body: &WireRequest<'_>) -> Result<ChatResponse, (bool, String)> {
        let started = Instant::now();
        let mut req = self.agent.post(self.config.url());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            let retryable = status == 408 || status == 429 || status >= 500;
            return Err((retryable, format!("HTTP {status}: {}", text.trim())));
        }
        let wire: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| (true, format!("malformed response body: {e}")))?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or((true, "response has no message content".to_string()))?;
        Ok(ChatResponse {
            text,
            prompt_tokens: wire.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: wire.usage.as_ref().and_then(|u| u.completion_tokens),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = WireRequest {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.decoding.temperature,
            max_tokens: request.decoding.max_tokens,
        };
        let mut backoff = self.config.initial_backoff_ms as f64;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err((retryable, msg)) => {
                    if !retryable || attempts > self.config.retries {
                        return Err(BackendError::Unavailable {
                            attempts,
                            last_error: msg,
                        });
                    }
                    std::thread::sleep(Duration::from_millis(backoff as u64));
                    backoff *= self.config.backoff_factor;
                }
            }
        }
    }
}

/// Fixed response queues per role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Script {
    pub route: Vec<String>,
    pub directive: Vec<String>,
    pub edit: Vec<String>,
}

impl Script {
    fn queue(&self, role: Role) -> &[String] {
        match role {
            Role::Route => &self.route,
            Role::Directive => &self.directive,
            Role::Edit => &self.edit,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: Script,
    cursor: [usize; 3],
    log: Vec<Role>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self {
            script,
            cursor: [0; 3],
            log: Vec::new(),
        }
    }

    /// Roles of every request served, in order.
    pub fn calls(&self) -> &[Role] {
        &self.log
    }

    pub fn remaining(&self, role: Role) -> usize {
        self.script.queue(role).len() - self.cursor[role as usize]
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let i = request.role as usize;
        let queue = self.script.queue(request.role);
        let text = queue
            .get(self.cursor[i])
            .ok_or(BackendError::ScriptExhausted(request.role))?
            .clone();
        self.cursor[i] += 1;
        self.log.push(request.role);
        Ok(ChatResponse::text(text))
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({ "cursor": self.cursor })
    }

    fn restore(&mut self, state: &serde_json::Value) -> Result<(), BackendError> {
        let cursor: [usize; 3] = serde_json::from_value(state["cursor"].clone())
            .map_err(|e| BackendError::Restore(e.to_string()))?;
        for role in Role::ALL {
            if cursor[role as usize] > self.script.queue(role).len() {
                return Err(BackendError::Restore(format!(
                    "cursor for {role} is past the end of its queue"
                )));
            }
        }
        self.cursor = cursor;
        Ok(())
    }
}

/// Parameters of the stochastic mock editor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StochasticConfig {
    /// Probability that the edit to one touched scope stays valid.
    pub p_valid: f64,
    /// Probability that a free-form edit touches both factors and the frozen scaffold.
    pub entangle_p: f64,
    pub seed: u64,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        Self {
            p_valid: 0.8,
            entangle_p: 0.5,
            seed: 0,
        }
    }
}

impl StochasticConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.p_valid > 0.0 && self.p_valid <= 1.0) {
            errs.push("backend.p_valid must be in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.entangle_p) {
            errs.push("backend.entangle_p must be in [0, 1]".into());
        }
        errs
    }
}

/// Line the mock inserts into a scope whose edit broke the program. Pair it
/// with a hook forbidding this string.
pub const INVALID_MARKER: &str = "__INVALID_EDIT__";
/// Line the mock inserts into a factor body for a clean edit.
pub const MOCK_BODY_LINE: &str = "h = gain(h)";
/// Line the mock appends to the scaffold for a clean frozen edit.
pub const MOCK_FROZEN_LINE: &str = "# scaffold tweak";
pub const MOCK_DIRECTIVE: &str = "add one more gain stage";

/// Applies one edit per listed scope; scopes marked invalid receive
/// [`INVALID_MARKER`] instead of a clean line.
pub fn mock_edit(parent: &TaggedProgram, edits: &[(Region, bool)]) -> String {
    let mut lines: Vec<String> = parent.lines().to_vec();
    let map = parent.regions().clone();
    // Apply from the bottom up so earlier indices stay valid.
    let mut sites: Vec<(usize, String)> = edits
        .iter()
        .map(|&(region, valid)| match region {
            Region::Operator | Region::Action => {
                let f = if region == Region::Operator {
                    Factor::Operator
                } else {
                    Factor::Action
                };
                let at = map.span(f).end;
                // Match the indentation of the closing tag line.
                let close = &lines[at];
                let indent = &close[..close.len() - close.trim_start().len()];
                let line = if valid {
                    format!("{indent}{MOCK_BODY_LINE}")
                } else {
                    format!("{indent}{INVALID_MARKER} = 1")
                };
                (at, line)
            }
            Region::Frozen => {
                let line = if valid {
                    MOCK_FROZEN_LINE.to_string()
                } else {
                    format!("# {INVALID_MARKER}")
                };
                (lines.len(), line)
            }
        })
        .collect();
    sites.sort_by_key(|s| std::cmp::Reverse(s.0));
    for (at, line) in sites {
        lines.insert(at, line);
    }
    let mut out = lines.join("\n");
    if parent.text().has_final_newline() {
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StreamPos {
    route: String,
    edit: String,
}

/// Seeded mock editor following the per-scope validity model: an edit that
/// touches k scopes survives with probability `p_valid^k`.
///
/// Factor-scoped edits touch only the selected factor. Free-form edits touch
/// OPERATOR, ACTION and the scaffold with probability `entangle_p`, and one
/// uniformly chosen factor otherwise. Every edit call consumes the same
/// number of draws from a dedicated stream, so runs in different modes see
/// the same validity draws call by call.
#[derive(Debug, Clone)]
pub struct StochasticBackend {
    config: StochasticConfig,
    tags: TagConfig,
    route_rng: ChaCha8Rng,
    edit_rng: ChaCha8Rng,
}

impl StochasticBackend {
    pub fn new(config: StochasticConfig, tags: TagConfig) -> Self {
        let mut route_rng = ChaCha8Rng::seed_from_u64(config.seed);
        route_rng.set_stream(1);
        let mut edit_rng = ChaCha8Rng::seed_from_u64(config.seed);
        edit_rng.set_stream(2);
        Self {
            config,
            tags,
            route_rng,
            edit_rng,
        }
    }

    pub fn config(&self) -> &StochasticConfig {
        &self.config
    }

    fn draws(&mut self) -> (f64, f64, [f64; 3]) {
        let u_entangle: f64 = self.edit_rng.random();
        let u_pick: f64 = self.edit_rng.random();
        let u_valid = [
            self.edit_rng.random(),
            self.edit_rng.random(),
            self.edit_rng.random(),
        ];
        (u_entangle, u_pick, u_valid)
    }

    fn apply(&self, parent: &TaggedProgram, scopes: &[Region], u_valid: [f64; 3]) -> String {
        let edits: Vec<(Region, bool)> = scopes
            .iter()
            .map(|&r| {
                let slot = match r {
                    Region::Operator => 0,
                    Region::Action => 1,
                    Region::Frozen => 2,
                };
                (r, u_valid[slot] < self.config.p_valid)
            })
            .collect();
        mock_edit(parent, &edits)
    }

    /// Draws validity for each scope and applies the edit.
    pub fn edit(&mut self, parent: &TaggedProgram, factor: Option<Factor>) -> String {
        let (u_entangle, u_pick, u_valid) = self.draws();
        let scopes: Vec<Region> = match factor {
            Some(f) => vec![Region::from(f)],
            None if u_entangle < self.config.entangle_p => {
                vec![Region::Operator, Region::Action, Region::Frozen]
            }
            None if u_pick < 0.5 => vec![Region::Operator],
            None => vec![Region::Action],
        };
        self.apply(parent, &scopes, u_valid)
    }

    /// Edits exactly the given scopes (each at most once).
    pub fn edit_scopes(&mut self, parent: &TaggedProgram, scopes: &[Region]) -> String {
        let (_, _, u_valid) = self.draws();
        self.apply(parent, scopes, u_valid)
    }

    pub fn tags(&self) -> &TagConfig {
        &self.tags
    }
}

impl ChatBackend for StochasticBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let text = match request.role {
            Role::Route => {
                let f = if self.route_rng.random_bool(0.5) {
                    Factor::Operator
                } else {
                    Factor::Action
                };
                f.as_str().to_string()
            }
            Role::Directive => MOCK_DIRECTIVE.to_string(),
            Role::Edit => match &request.payload {
                Some(p) => format!("```python\n{}```\n", self.edit(&p.parent, p.factor)),
                None => String::new(),
            },
        };
        Ok(ChatResponse::text(text))
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(StreamPos {
            route: self.route_rng.get_word_pos().to_string(),
            edit: self.edit_rng.get_word_pos().to_string(),
        })
        .expect("stream positions serialize")
    }

    fn restore(&mut self, state: &serde_json::Value) -> Result<(), BackendError> {
        let pos: StreamPos = serde_json::from_value(state.clone())
            .map_err(|e| BackendError::Restore(e.to_string()))?;
        let parse = |s: &str| {
            s.parse::<u128>()
                .map_err(|e| BackendError::Restore(e.to_string()))
        };
        self.route_rng.set_word_pos(parse(&pos.route)?);
        self.edit_rng.set_word_pos(parse(&pos.edit)?);
        Ok(())
    }
}

/// Wraps a backend and keeps every request it served.
#[derive(Debug, Default)]
pub struct Recorder<B> {
    pub inner: B,
    pub requests: Vec<(Role, Vec<Message>)>,
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.requests
            .push((request.role, request.messages.clone()));
        self.inner.complete(request)
    }

    fn snapshot(&self) -> serde_json::Value {
        self.inner.snapshot()
    }

    fn restore(&mut self, state: &serde_json::Value) -> Result<(), BackendError> {
        self.inner.restore(state)
    }
}
