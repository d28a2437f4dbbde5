//! Single-agent to multi-agent trajectory conversion through a
//! chat-completion endpoint.
//!
//! # Endpoint contract
//!
//! `POST <url>` with body `{"model": ..., "messages": [{"role", "content"}]}`
//! and, when `token_env` is configured, `Authorization: Bearer <token>`
//! read from that environment variable. The completion text is taken from
//! the first of: a top-level `"content"` string, OpenAI-style
//! `choices[0].message.content`, or the raw body when it is not JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::trajectory::{
    parse_trajectory, validate_trajectory, Budgets, Source, StepRole, Trajectory, TrajectoryError,
    EXIT_MARKER,
};

/// The transformation prompt. Placeholders are substituted by
/// [`build_conversion_prompt`].
pub const CONVERSION_TEMPLATE: &str = include_str!("../prompts/conversion.txt");

pub const PLACEHOLDER_EXEMPLAR: &str = "[Example Multi-Agent Trajectory Placeholder]";
pub const PLACEHOLDER_TASK: &str = "<task_description>";
pub const PLACEHOLDER_FIRST_NAME: &str = "<first_name>";
pub const PLACEHOLDER_LAST_NAME: &str = "<last_name>";
pub const PLACEHOLDER_EMAIL: &str = "<email>";
pub const PLACEHOLDER_PHONE: &str = "<phone_number>";
pub const PLACEHOLDER_TRAJECTORY: &str = "<single_agent_trajectory>";

const PLACEHOLDERS: [&str; 7] = [
    PLACEHOLDER_EXEMPLAR,
    PLACEHOLDER_TASK,
    PLACEHOLDER_FIRST_NAME,
    PLACEHOLDER_LAST_NAME,
    PLACEHOLDER_EMAIL,
    PLACEHOLDER_PHONE,
    PLACEHOLDER_TRAJECTORY,
];

#[derive(Debug, thiserror::Error)]
pub enum EndpointError {
    #[error("environment variable {0} holding the API token is not set")]
    MissingToken(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unusable response: {0}")]
    InvalidResponse(String),
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid single-agent trajectory {task_id}: {message}")]
    InvalidSource { task_id: String, message: String },
    #[error("task {task_id}: endpoint failure: {source}")]
    Endpoint {
        task_id: String,
        #[source]
        source: EndpointError,
    },
    #[error("task {task_id}: no valid conversion after {attempts} attempts; last error: {last_error}")]
    ConversionFailed {
        task_id: String,
        attempts: u32,
        last_error: String,
        last_response: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supervisor {
    #[serde(default)]
    pub first_name: String,
    #[serde(default)]
    pub last_name: String,
    #[serde(default)]
    pub email: String,
    #[serde(default)]
    pub phone_number: String,
}

impl Supervisor {
    pub fn is_empty(&self) -> bool {
        self.first_name.is_empty() && self.last_name.is_empty() && self.email.is_empty() && self.phone_number.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleAgentTurn {
    #[serde(default)]
    pub thought: String,
    pub action: String,
    #[serde(default)]
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleAgentTrajectory {
    pub task_id: String,
    pub instruction: String,
    #[serde(default)]
    pub supervisor: Supervisor,
    pub turns: Vec<SingleAgentTurn>,
}

impl SingleAgentTrajectory {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let bad = |message: &str| SynthesisError::InvalidSource {
            task_id: self.task_id.clone(),
            message: message.to_string(),
        };
        if self.turns.is_empty() {
            return Err(bad("no turns"));
        }
        if self.turns.iter().any(|t| t.action.trim().is_empty()) {
            return Err(bad("every turn needs a code action"));
        }
        Ok(())
    }

    /// Task description plus supervisor identity, as the Orchestrator sees it.
    pub fn full_instruction(&self) -> String {
        if self.supervisor.is_empty() {
            return self.instruction.clone();
        }
        let s = &self.supervisor;
        format!(
            "{}\nSupervisor: {} {}, email {}, phone {}.",
            self.instruction, s.first_name, s.last_name, s.email, s.phone_number
        )
    }

    /// Numbered turns, thought first and code in `<code>` tags.
    pub fn render_turns(&self) -> String {
        let mut out = String::new();
        for (i, turn) in self.turns.iter().enumerate() {
            let _ = write!(out, "\n\nStep {}:\n", i + 1);
            if !turn.thought.is_empty() {
                let _ = writeln!(out, "{}", turn.thought);
            }
            let _ = write!(out, "<code>\n{}\n</code>", turn.action);
            if !turn.observation.is_empty() {
                let _ = write!(out, "\nObservation:\n{}", turn.observation);
            }
        }
        out
    }
}

pub fn load_single_agent_corpus(path: &Path) -> Result<Vec<SingleAgentTrajectory>, SynthesisError> {
    let io = |p: &Path, source| SynthesisError::Io {
        path: p.display().to_string(),
        source,
    };
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| io(f, e))?;
            let s: SingleAgentTrajectory = serde_json::from_str(&text).map_err(|source| SynthesisError::Json {
                path: f.display().to_string(),
                source,
            })?;
            s.validate()?;
            Ok(s)
        })
        .collect()
}

pub fn build_conversion_prompt(s: &SingleAgentTrajectory, exemplar: &str) -> Result<String, SynthesisError> {
    build_prompt_from_template(CONVERSION_TEMPLATE, s, exemplar)
}

/// Substitutes every placeholder in a single left-to-right pass, so text
/// inserted for one placeholder is never rescanned.
pub fn build_prompt_from_template(
    template: &str,
    s: &SingleAgentTrajectory,
    exemplar: &str,
) -> Result<String, SynthesisError> {
    if exemplar.trim().is_empty() {
        return Err(SynthesisError::Template("the exemplar trajectory is empty".into()));
    }
    let missing: Vec<&str> = PLACEHOLDERS.iter().copied().filter(|p| !template.contains(p)).collect();
    if !missing.is_empty() {
        return Err(SynthesisError::Template(format!("template lacks placeholders {missing:?}")));
    }
    let value_for = |p: &str| -> String {
        match p {
            PLACEHOLDER_EXEMPLAR => exemplar.trim_end().to_string(),
            PLACEHOLDER_TASK => s.instruction.clone(),
            PLACEHOLDER_FIRST_NAME => s.supervisor.first_name.clone(),
            PLACEHOLDER_LAST_NAME => s.supervisor.last_name.clone(),
            PLACEHOLDER_EMAIL => s.supervisor.email.clone(),
            PLACEHOLDER_PHONE => s.supervisor.phone_number.clone(),
            PLACEHOLDER_TRAJECTORY => s.render_turns(),
            _ => unreachable!(),
        }
    };
    let mut out = String::with_capacity(template.len() + exemplar.len() + 1024);
    let mut rest = template;
    loop {
        let next = PLACEHOLDERS
            .iter()
            .filter_map(|p| rest.find(p).map(|i| (i, *p)))
            .min_by_key(|(i, _)| *i);
        match next {
            Some((i, p)) => {
                out.push_str(&rest[..i]);
                out.push_str(&value_for(p));
                rest = &rest[i + p.len()..];
            }
            None => {
                out.push_str(rest);
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// Anything that turns a message list into completion text.
pub trait ChatEndpoint: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError>;
}

fn default_max_retries() -> u32 {
    2
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_max_concurrent() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    pub model: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    /// Initial delay before re-sending after a transient HTTP failure;
    /// doubles on every retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrent == 0 {
            return Err("max_concurrent must be at least 1".into());
        }
        if self.url.is_empty() {
            return Err("url is empty".into());
        }
        Ok(())
    }
}

pub struct HttpEndpoint {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpEndpoint {
    pub fn new(config: EndpointConfig) -> Result<Self, EndpointError> {
        config.validate().map_err(EndpointError::Transport)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        Ok(HttpEndpoint { config, client })
    }

    fn token(&self) -> Result<Option<String>, EndpointError> {
        match &self.config.token_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| EndpointError::MissingToken(var.clone())),
        }
    }
}

impl ChatEndpoint for HttpEndpoint {
    /// Transport errors, 429 and 5xx responses are retried with exponential
    /// backoff up to `max_retries` times.
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        let token = self.token()?;
        let body = json!({"model": self.config.model, "messages": messages});
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(&self.config.url).json(&body);
            if let Some(t) = &token {
                req = req.bearer_auth(t);
            }
            let err = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| EndpointError::Transport(e.to_string()))?;
                    if status.is_success() {
                        return extract_completion(&text);
                    }
                    let err = EndpointError::Http {
                        status: status.as_u16(),
                        body: text,
                    };
                    if !(status.as_u16() == 429 || status.is_server_error()) {
                        return Err(err);
                    }
                    err
                }
                Err(e) => EndpointError::Transport(e.to_string()),
            };
            if attempt >= self.config.max_retries {
                return Err(err);
            }
            log::warn!("endpoint attempt {} failed ({err}); retrying in {delay:?}", attempt + 1);
            std::thread::sleep(delay);
            delay *= 2;
            attempt += 1;
        }
    }
}

/// Pulls the completion text out of a response body.
pub fn extract_completion(body: &str) -> Result<String, EndpointError> {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return Ok(body.to_string());
    };
    if let Some(s) = v.get("content").and_then(Value::as_str) {
        return Ok(s.to_string());
    }
    if let Some(s) = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
    {
        return Ok(s.to_string());
    }
    Err(EndpointError::InvalidResponse(
        "expected a \"content\" string or choices[0].message.content".into(),
    ))
}

/// Extracts the JSON object from a completion, tolerating markdown fences
/// or chatter around it.
fn json_payload(text: &str) -> &str {
    let trimmed = text.trim();
    if trimmed.starts_with('{') {
        return trimmed;
    }
    match (trimmed.find('{'), trimmed.rfind('}')) {
        (Some(a), Some(b)) if a < b => &trimmed[a..=b],
        _ => trimmed,
    }
}

/// Parses and structurally validates one completion.
pub fn interpret_response(text: &str, source: &SingleAgentTrajectory) -> Result<Trajectory, String> {
    let mut t = parse_trajectory(json_payload(text)).map_err(|e| match e {
        TrajectoryError::Json(err) => format!("response is not valid JSON: {err}"),
        other => other.to_string(),
    })?;
    t.task_id = source.task_id.clone();
    t.instruction = source.full_instruction();
    t.source = Source::ConvertedFromSingleAgent;
    let report = validate_trajectory(&t, Budgets::UNBOUNDED);
    if !report.ok {
        let msgs: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.code, v.message))
            .collect();
        return Err(format!("structural check failed: {}", msgs.join("; ")));
    }
    Ok(t)
}

fn repair_instruction(error: &str) -> String {
    format!(
        "Your previous response could not be used: {error}\n\
         Respond again with ONLY the corrected JSON object following the schema above."
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub task_id: String,
    pub attempt: u32,
    pub messages: Vec<ChatMessage>,
    pub response: Option<String>,
    pub error: Option<String>,
}

pub struct Converter<'a> {
    endpoint: &'a dyn ChatEndpoint,
    exemplar: String,
    max_retries: u32,
    max_concurrent: usize,
    audit_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConversionOutcome {
    pub task_id: String,
    pub result: Result<Trajectory, SynthesisError>,
    pub attempts: u32,
    pub preservation: Option<PreservationReport>,
}

impl<'a> Converter<'a> {
    pub fn new(endpoint: &'a dyn ChatEndpoint, exemplar: impl Into<String>) -> Self {
        Converter {
            endpoint,
            exemplar: exemplar.into(),
            max_retries: default_max_retries(),
            max_concurrent: 1,
            audit_dir: None,
        }
    }

    pub fn with_config(mut self, config: &EndpointConfig) -> Self {
        self.max_retries = config.max_retries;
        self.max_concurrent = config.max_concurrent.max(1);
        self
    }

    pub fn max_retries(mut self, retries: u32) -> Self {
        self.max_retries = retries;
        self
    }

    pub fn max_concurrent(mut self, n: usize) -> Self {
        self.max_concurrent = n.max(1);
        self
    }

    pub fn audit_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.audit_dir = Some(dir.into());
        self
    }

    /// Converts one trajectory, retrying with a repair instruction whenever
    /// the response fails to parse or validate.
    pub fn convert(&self, s: &SingleAgentTrajectory) -> Result<Trajectory, SynthesisError> {
        self.convert_counted(s).0
    }

    fn convert_counted(&self, s: &SingleAgentTrajectory) -> (Result<Trajectory, SynthesisError>, u32) {
        if let Err(e) = s.validate() {
            return (Err(e), 0);
        }
        let prompt = match build_conversion_prompt(s, &self.exemplar) {
            Ok(p) => p,
            Err(e) => return (Err(e), 0),
        };
        let mut messages = vec![ChatMessage::user(prompt)];
        let mut last_error = String::new();
        let mut last_response = String::new();
        for attempt in 1..=self.max_retries + 1 {
            let response = match self.endpoint.complete(&messages) {
                Ok(r) => r,
                Err(source) => {
                    self.audit(s, attempt, &messages, None, Some(source.to_string()));
                    return (
                        Err(SynthesisError::Endpoint {
                            task_id: s.task_id.clone(),
                            source,
                        }),
                        attempt,
                    );
                }
            };
            match interpret_response(&response, s) {
                Ok(t) => {
                    self.audit(s, attempt, &messages, Some(&response), None);
                    return (Ok(t), attempt);
                }
                Err(reason) => {
                    self.audit(s, attempt, &messages, Some(&response), Some(reason.clone()));
                    messages.push(ChatMessage::assistant(response.clone()));
                    messages.push(ChatMessage::user(repair_instruction(&reason)));
                    last_error = reason;
                    last_response = response;
                }
            }
        }
        (
            Err(SynthesisError::ConversionFailed {
                task_id: s.task_id.clone(),
                attempts: self.max_retries + 1,
                last_error,
                last_response,
            }),
            self.max_retries + 1,
        )
    }

    fn audit(&self, s: &SingleAgentTrajectory, attempt: u32, messages: &[ChatMessage], response: Option<&str>, error: Option<String>) {
        let Some(dir) = &self.audit_dir else { return };
        let record = AuditRecord {
            task_id: s.task_id.clone(),
            attempt,
            messages: messages.to_vec(),
            response: response.map(str::to_string),
            error,
        };
        let value = serde_json::to_value(&record).expect("audit record serializes");
        let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
        text.push('\n');
        let path = dir.join(format!("{}.attempt{attempt}.json", s.task_id));
        if let Err(e) = fs::create_dir_all(dir).and_then(|_| fs::write(&path, text)) {
            log::warn!("could not write audit record {}: {e}", path.display());
        }
    }

    /// Converts many trajectories with at most `max_concurrent` requests in
    /// flight. Outcomes come back in input order; converted trajectories are
    /// also checked for step preservation.
    pub fn convert_all(&self, sources: &[SingleAgentTrajectory]) -> Vec<ConversionOutcome> {
        let run = |s: &SingleAgentTrajectory| {
            let (result, attempts) = self.convert_counted(s);
            let preservation = result.as_ref().ok().map(|t| verify_step_preservation(s, t));
            match &result {
                Err(e) => log::warn!("skipping {}: {e}", s.task_id),
                Ok(_) if !preservation.as_ref().is_some_and(|p| p.ok) => {
                    log::warn!("{}: converted steps differ from the source", s.task_id)
                }
                Ok(_) => {}
            }
            ConversionOutcome {
                task_id: s.task_id.clone(),
                result,
                attempts,
                preservation,
            }
        };
        match rayon::ThreadPoolBuilder::new().num_threads(self.max_concurrent).build() {
            Ok(pool) => pool.install(|| sources.par_iter().map(run).collect()),
            Err(e) => {
                log::warn!("thread pool unavailable ({e}); converting sequentially");
                sources.iter().map(run).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepMismatch {
    /// 1-based position in the flattened step sequence.
    pub index: usize,
    pub expected: Option<String>,
    pub found: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub ok: bool,
    pub source_steps: usize,
    pub converted_steps: usize,
    pub first_mismatch: Option<StepMismatch>,
}

/// CRLF to LF, trailing whitespace trimmed per line, blank edge lines dropped.
pub fn normalize_code(code: &str) -> String {
    let unified = code.replace("\r\n", "\n");
    let lines: Vec<&str> = unified.lines().map(str::trim_end).collect();
    let start = lines.iter().position(|l| !l.is_empty()).unwrap_or(lines.len());
    let end = lines.iter().rposition(|l| !l.is_empty()).map_or(start, |i| i + 1);
    lines[start..end].join("\n")
}

/// Executor actions of a converted trajectory with the exit marker that
/// closes each subtask removed. A closing step that held only the marker
/// (plus summary thought) disappears entirely.
pub fn flatten_converted_actions(m: &Trajectory) -> Vec<String> {
    let mut out = Vec::new();
    for sub in &m.subtasks {
        let exec: Vec<_> = sub.steps.iter().filter(|s| s.role == StepRole::Executor).collect();
        for (i, step) in exec.iter().enumerate() {
            let mut code = normalize_code(&step.action);
            if i + 1 == exec.len() && step.is_exit() {
                let mut lines: Vec<&str> = code.lines().collect();
                while lines.last().is_some_and(|l| l.trim().is_empty()) {
                    lines.pop();
                }
                if lines.last().is_some_and(|l| l.trim() == EXIT_MARKER) {
                    lines.pop();
                }
                code = normalize_code(&lines.join("\n"));
                if code.is_empty() {
                    continue;
                }
            }
            out.push(code);
        }
    }
    out
}

/// Checks that the converted trajectory replays the source's code steps in
/// the same order, one to one.
pub fn verify_step_preservation(s: &SingleAgentTrajectory, m: &Trajectory) -> PreservationReport {
    let expected: Vec<String> = s.turns.iter().map(|t| normalize_code(&t.action)).collect();
    let found = flatten_converted_actions(m);
    let first_mismatch = (0..expected.len().max(found.len()))
        .find(|&i| expected.get(i) != found.get(i))
        .map(|i| StepMismatch {
            index: i + 1,
            expected: expected.get(i).cloned(),
            found: found.get(i).cloned(),
        });
    PreservationReport {
        ok: first_mismatch.is_none(),
        source_steps: expected.len(),
        converted_steps: found.len(),
        first_mismatch,
    }
}
