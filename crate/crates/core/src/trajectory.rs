//! Multi-agent trajectories: the Orchestrator's subtasks, the Executor's
//! thought/action/observation steps and interleaved Critic feedback.
//!
//! Input documents follow the conversion schema
//! (`subtasks[].subtask_number`, `subtasks[].subtask_description`,
//! `subtasks[].executor_steps[].plan_and_code`). Output is a canonical JSON
//! form (sorted keys, LF newlines) that [`parse_trajectory`] accepts back
//! unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::RegexSet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// Marker the converter appends as the last action of every subtask.
pub const EXIT_MARKER: &str = "exit";
/// API call that signals task completion.
pub const COMPLETION_CALL: &str = "apis.supervisor.complete_task";

/// Default case-sensitive substrings that mark an environment error.
pub const DEFAULT_ERROR_PATTERNS: [&str; 3] = ["Traceback", "Exception", "Error:"];

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid error pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TrajectoryError {
    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        TrajectoryError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    NativeMultiAgent,
    ConvertedFromSingleAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskKind {
    Login,
    TaskSpecific,
    Completion,
    OtherNonTaskSpecific,
}

impl SubtaskKind {
    pub fn is_task_specific(self) -> bool {
        self == SubtaskKind::TaskSpecific
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubtaskKind::Login => "login",
            SubtaskKind::TaskSpecific => "task_specific",
            SubtaskKind::Completion => "completion",
            SubtaskKind::OtherNonTaskSpecific => "other_non_task_specific",
        }
    }
}

impl fmt::Display for SubtaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubtaskKind {
    type Err = String;

    /// Accepts the canonical names plus the short forms `ts` and `other`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "login" => Ok(SubtaskKind::Login),
            "ts" | "task_specific" => Ok(SubtaskKind::TaskSpecific),
            "completion" => Ok(SubtaskKind::Completion),
            "other" | "other_non_task_specific" => Ok(SubtaskKind::OtherNonTaskSpecific),
            other => Err(format!("unknown subtask kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRole {
    Executor,
    Critic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Correct,
    SelfRefined,
    Erroneous,
    Unclassified,
}

impl StepStatus {
    /// Steps that carry loss: correct and self-refined ones.
    pub fn is_trainable(self) -> bool {
        matches!(self, StepStatus::Correct | StepStatus::SelfRefined)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub index: usize,
    pub role: StepRole,
    pub thought: String,
    /// Code for executor steps, feedback text for critic steps.
    pub action: String,
    pub observation: String,
    pub status: StepStatus,
}

impl Step {
    pub fn executor(index: usize, thought: &str, action: &str, observation: &str) -> Self {
        Step {
            index,
            role: StepRole::Executor,
            thought: thought.to_string(),
            action: action.to_string(),
            observation: observation.to_string(),
            status: StepStatus::Unclassified,
        }
    }

    pub fn critic(index: usize, feedback: &str) -> Self {
        Step {
            index,
            role: StepRole::Critic,
            thought: String::new(),
            action: feedback.to_string(),
            observation: String::new(),
            status: StepStatus::Unclassified,
        }
    }

    /// True when the last non-blank line of the action is the exit marker.
    pub fn is_exit(&self) -> bool {
        ends_with_exit(&self.action)
    }
}

pub(crate) fn ends_with_exit(action: &str) -> bool {
    action
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim() == EXIT_MARKER)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subtask {
    pub number: usize,
    pub description: String,
    pub kind: Option<SubtaskKind>,
    pub steps: Vec<Step>,
    pub final_report: String,
}

impl Subtask {
    pub fn executor_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| s.role == StepRole::Executor)
    }

    pub fn has_error(&self) -> bool {
        self.steps.iter().any(|s| s.status == StepStatus::Erroneous)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub task_id: String,
    pub instruction: String,
    pub subtasks: Vec<Subtask>,
    pub source: Source,
}

impl Trajectory {
    /// One orchestrator step per subtask.
    pub fn orchestrator_step_count(&self) -> usize {
        self.subtasks.len()
    }

    /// Executor-role steps across all subtasks. Critic turns are not counted.
    pub fn total_turn_count(&self) -> usize {
        self.subtasks.iter().map(|s| s.executor_steps().count()).sum()
    }

    pub fn subtask(&self, number: usize) -> Option<&Subtask> {
        number.checked_sub(1).and_then(|i| self.subtasks.get(i))
    }

    /// Subtask kinds in order, or `None` while any subtask is unclassified.
    pub fn kinds(&self) -> Option<Vec<SubtaskKind>> {
        self.subtasks.iter().map(|s| s.kind).collect()
    }

    pub fn is_step_classified(&self) -> bool {
        self.subtasks
            .iter()
            .flat_map(|s| &s.steps)
            .all(|s| s.status != StepStatus::Unclassified)
    }

    pub fn has_critic_steps(&self) -> bool {
        self.subtasks
            .iter()
            .flat_map(|s| &s.steps)
            .any(|s| s.role == StepRole::Critic)
    }

    /// Canonical JSON: sorted keys, two-space indent, LF newlines, trailing LF.
    pub fn to_canonical_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.to_value())
            .expect("serializing a JSON value cannot fail");
        out.push('\n');
        out
    }

    pub fn to_value(&self) -> Value {
        let subtasks: Vec<Value> = self
            .subtasks
            .iter()
            .map(|sub| {
                let steps: Vec<Value> = sub
                    .steps
                    .iter()
                    .map(|st| {
                        json!({
                            "subtask_number": sub.number,
                            "step_number": st.index,
                            "role": st.role,
                            "thought": st.thought,
                            "action": st.action,
                            "observation": st.observation,
                            "status": st.status,
                        })
                    })
                    .collect();
                let mut obj = Map::new();
                obj.insert("subtask_number".into(), json!(sub.number));
                obj.insert("subtask_description".into(), json!(sub.description));
                if let Some(kind) = sub.kind {
                    obj.insert("kind".into(), json!(kind));
                }
                obj.insert("executor_steps".into(), Value::Array(steps));
                obj.insert("final_report".into(), json!(sub.final_report));
                Value::Object(obj)
            })
            .collect();
        json!({
            "task_id": self.task_id,
            "instruction": self.instruction,
            "source": self.source,
            "orchestrator_step_count": self.orchestrator_step_count(),
            "total_turn_count": self.total_turn_count(),
            "subtasks": subtasks,
        })
    }
}

/// A non-fatal observation made while parsing, such as several code blocks
/// in one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subtask: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub message: String,
}

impl Violation {
    fn new(code: &str, subtask: Option<usize>, step: Option<usize>, message: String) -> Self {
        Violation {
            code: code.to_string(),
            subtask,
            step,
            message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        ValidationReport {
            ok: violations.is_empty(),
            violations,
            warnings: Vec::new(),
        }
    }

    pub fn with_warnings(mut self, warnings: Vec<Violation>) -> Self {
        self.warnings = warnings;
        self
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

/// Violation codes reported by [`validate_trajectory`].
pub mod codes {
    pub const NO_SUBTASKS: &str = "NO_SUBTASKS";
    pub const NON_CONTIGUOUS: &str = "NON_CONTIGUOUS";
    pub const SUBTASK_BUDGET: &str = "SUBTASK_BUDGET";
    pub const STEP_BUDGET: &str = "STEP_BUDGET";
    pub const EMPTY_SUBTASK: &str = "EMPTY_SUBTASK";
    pub const EMPTY_ACTION: &str = "EMPTY_ACTION";
    pub const MISSING_EXIT: &str = "MISSING_EXIT";
    pub const MISSING_COMPLETION_CALL: &str = "MISSING_COMPLETION_CALL";
    pub const ORPHAN_SELF_REFINED: &str = "ORPHAN_SELF_REFINED";
    pub const COMPLETION_PLACEMENT: &str = "COMPLETION_PLACEMENT";
    /// Parse-time warning: more than one `<code>` block in a step.
    pub const MULTIPLE_CODE_BLOCKS: &str = "WARN_MULTIPLE_CODE_BLOCKS";

    pub const BUDGET_CODES: [&str; 2] = [SUBTASK_BUDGET, STEP_BUDGET];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub max_subtasks: usize,
    pub max_steps_per_subtask: usize,
}

impl Budgets {
    pub const UNBOUNDED: Budgets = Budgets {
        max_subtasks: usize::MAX,
        max_steps_per_subtask: usize::MAX,
    };
}

impl Default for Budgets {
    /// Orchestrator plans at most 12 subtasks; the Executor gets 15 turns each.
    fn default() -> Self {
        Budgets {
            max_subtasks: 12,
            max_steps_per_subtask: 15,
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

pub fn parse_trajectory(text: &str) -> Result<Trajectory, TrajectoryError> {
    parse_trajectory_with_warnings(text).map(|(t, _)| t)
}

/// Like [`parse_trajectory`] but also returns parse-time warnings.
pub fn parse_trajectory_with_warnings(
    text: &str,
) -> Result<(Trajectory, Vec<Violation>), TrajectoryError> {
    let doc: Value = serde_json::from_str(text)?;
    from_document(&doc)
}

fn from_document(doc: &Value) -> Result<(Trajectory, Vec<Violation>), TrajectoryError> {
    let root = doc
        .as_object()
        .ok_or_else(|| TrajectoryError::schema("$", "expected a JSON object"))?;
    let task_id = opt_str(root, "task_id", "$")?.unwrap_or_default();
    let instruction = opt_str(root, "instruction", "$")?.unwrap_or_default();
    let source = match root.get("source") {
        None | Some(Value::Null) => Source::NativeMultiAgent,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| TrajectoryError::schema("$.source", e.to_string()))?,
    };

    let raw_subtasks = root
        .get("subtasks")
        .ok_or_else(|| TrajectoryError::schema("$.subtasks", "missing required key"))?
        .as_array()
        .ok_or_else(|| TrajectoryError::schema("$.subtasks", "expected an array"))?;
    if raw_subtasks.is_empty() {
        return Err(TrajectoryError::schema("$.subtasks", "at least one subtask is required"));
    }

    let mut warnings = Vec::new();
    let mut subtasks = Vec::with_capacity(raw_subtasks.len());
    for (i, raw) in raw_subtasks.iter().enumerate() {
        let path = format!("$.subtasks[{i}]");
        let obj = raw
            .as_object()
            .ok_or_else(|| TrajectoryError::schema(&path, "expected an object"))?;
        let number = req_uint(obj, "subtask_number", &path)?;
        if number != i + 1 {
            return Err(TrajectoryError::schema(
                format!("{path}.subtask_number"),
                format!("non-contiguous subtask_number: expected {}, found {number}", i + 1),
            ));
        }
        let description = req_str(obj, "subtask_description", &path)?;
        let kind = match obj.get("kind") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| TrajectoryError::schema(format!("{path}.kind"), e.to_string()))?,
            ),
        };
        let final_report = opt_str(obj, "final_report", &path)?.unwrap_or_default();
        let raw_steps = obj
            .get("executor_steps")
            .ok_or_else(|| {
                TrajectoryError::schema(format!("{path}.executor_steps"), "missing required key")
            })?
            .as_array()
            .ok_or_else(|| {
                TrajectoryError::schema(format!("{path}.executor_steps"), "expected an array")
            })?;
        let mut steps = Vec::with_capacity(raw_steps.len());
        for (j, raw_step) in raw_steps.iter().enumerate() {
            let step_path = format!("{path}.executor_steps[{j}]");
            let (step, multi) = parse_step(raw_step, &step_path, number, j + 1)?;
            if multi {
                warnings.push(Violation::new(
                    codes::MULTIPLE_CODE_BLOCKS,
                    Some(number),
                    Some(step.index),
                    format!("{step_path}: several <code> blocks were concatenated"),
                ));
            }
            steps.push(step);
        }
        subtasks.push(Subtask {
            number,
            description,
            kind,
            steps,
            final_report,
        });
    }

    let trajectory = Trajectory {
        task_id,
        instruction,
        subtasks,
        source,
    };
    for (key, actual) in [
        ("orchestrator_step_count", trajectory.orchestrator_step_count()),
        ("total_turn_count", trajectory.total_turn_count()),
    ] {
        if root.contains_key(key) {
            let declared = req_uint(root, key, "$")?;
            if declared != actual {
                return Err(TrajectoryError::schema(
                    format!("$.{key}"),
                    format!("declared {declared} but the document contains {actual}"),
                ));
            }
        }
    }
    Ok((trajectory, warnings))
}

fn parse_step(
    raw: &Value,
    path: &str,
    subtask_number: usize,
    position: usize,
) -> Result<(Step, bool), TrajectoryError> {
    let obj = raw
        .as_object()
        .ok_or_else(|| TrajectoryError::schema(path, "expected an object"))?;
    if obj.contains_key("subtask_number") {
        let declared = req_uint(obj, "subtask_number", path)?;
        if declared != subtask_number {
            return Err(TrajectoryError::schema(
                format!("{path}.subtask_number"),
                format!("step belongs to subtask {subtask_number} but declares {declared}"),
            ));
        }
    }
    let index = if obj.contains_key("step_number") {
        req_uint(obj, "step_number", path)?
    } else {
        position
    };
    let role = match obj.get("role") {
        None | Some(Value::Null) => StepRole::Executor,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| TrajectoryError::schema(format!("{path}.role"), e.to_string()))?,
    };
    let status = match obj.get("status") {
        None | Some(Value::Null) => StepStatus::Unclassified,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| TrajectoryError::schema(format!("{path}.status"), e.to_string()))?,
    };
    let observation = opt_str(obj, "observation", path)?.unwrap_or_default();

    let mut multiple_blocks = false;
    let (thought, action) = if let Some(action) = opt_str(obj, "action", path)? {
        (opt_str(obj, "thought", path)?.unwrap_or_default(), action)
    } else if let Some(feedback) = opt_str(obj, "feedback", path)? {
        (opt_str(obj, "thought", path)?.unwrap_or_default(), feedback)
    } else {
        let text = req_str(obj, "plan_and_code", path)?;
        let field = format!("{path}.plan_and_code");
        match split_plan_and_code(&text).map_err(|m| TrajectoryError::schema(&field, m))? {
            Some(split) => {
                multiple_blocks = split.blocks > 1;
                (split.thought, split.action)
            }
            None if role == StepRole::Critic => (String::new(), text.trim().to_string()),
            None => {
                return Err(TrajectoryError::schema(field, "step has no <code>...</code> block"))
            }
        }
    };

    Ok((
        Step {
            index,
            role,
            thought,
            action,
            observation,
            status,
        },
        multiple_blocks,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanAndCode {
    pub thought: String,
    pub action: String,
    pub blocks: usize,
}

const OPEN_TAG: &str = "<code>";
const CLOSE_TAG: &str = "</code>";

/// Splits a `plan_and_code` body. Text before the first `<code>` tag is the
/// thought; the contents of every `<code>` block, joined with newlines, is the
/// action. Returns `Ok(None)` when there is no code block at all.
pub fn split_plan_and_code(text: &str) -> Result<Option<PlanAndCode>, String> {
    let Some(first) = text.find(OPEN_TAG) else {
        return Ok(None);
    };
    let thought = text[..first].trim().to_string();
    let mut blocks = Vec::new();
    let mut rest = &text[first..];
    while let Some(open) = rest.find(OPEN_TAG) {
        let body_start = open + OPEN_TAG.len();
        let close = rest[body_start..]
            .find(CLOSE_TAG)
            .ok_or_else(|| "unterminated <code> block".to_string())?;
        blocks.push(trim_code(&rest[body_start..body_start + close]));
        rest = &rest[body_start + close + CLOSE_TAG.len()..];
    }
    Ok(Some(PlanAndCode {
        thought,
        action: blocks.join("\n"),
        blocks: blocks.len(),
    }))
}

/// Drops blank leading/trailing lines and trailing whitespace; leading
/// indentation of the first code line is kept.
fn trim_code(code: &str) -> String {
    let code = code.trim_end();
    let start = code
        .char_indices()
        .take_while(|(_, c)| c.is_whitespace())
        .filter(|(_, c)| *c == '\n')
        .last()
        .map_or(0, |(i, _)| i + 1);
    code[start..].to_string()
}

fn opt_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Option<String>, TrajectoryError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(TrajectoryError::schema(format!("{path}.{key}"), "expected a string")),
    }
}

fn req_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, TrajectoryError> {
    opt_str(obj, key, path)?
        .ok_or_else(|| TrajectoryError::schema(format!("{path}.{key}"), "missing required key"))
}

fn req_uint(obj: &Map<String, Value>, key: &str, path: &str) -> Result<usize, TrajectoryError> {
    let v = obj
        .get(key)
        .ok_or_else(|| TrajectoryError::schema(format!("{path}.{key}"), "missing required key"))?;
    v.as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| {
            TrajectoryError::schema(format!("{path}.{key}"), "expected a non-negative integer")
        })
}

// ---------------------------------------------------------------------------
// Validation

pub fn validate_trajectory(t: &Trajectory, budgets: Budgets) -> ValidationReport {
    use codes::*;
    let mut out = Vec::new();

    if t.subtasks.is_empty() {
        out.push(Violation::new(NO_SUBTASKS, None, None, "trajectory has no subtasks".into()));
        return ValidationReport::from_violations(out);
    }
    if t.subtasks.len() > budgets.max_subtasks {
        out.push(Violation::new(
            SUBTASK_BUDGET,
            None,
            None,
            format!("{} subtasks exceed the budget of {}", t.subtasks.len(), budgets.max_subtasks),
        ));
    }

    for (i, sub) in t.subtasks.iter().enumerate() {
        let n = Some(sub.number);
        if sub.number != i + 1 {
            out.push(Violation::new(
                NON_CONTIGUOUS,
                n,
                None,
                format!("subtask at position {} is numbered {}", i + 1, sub.number),
            ));
        }
        if sub.steps.is_empty() {
            out.push(Violation::new(EMPTY_SUBTASK, n, None, "subtask has no steps".into()));
            continue;
        }
        let exec_steps = sub.executor_steps().count();
        if exec_steps > budgets.max_steps_per_subtask {
            out.push(Violation::new(
                STEP_BUDGET,
                n,
                None,
                format!(
                    "{exec_steps} executor steps exceed the budget of {}",
                    budgets.max_steps_per_subtask
                ),
            ));
        }
        for (j, step) in sub.steps.iter().enumerate() {
            if step.action.trim().is_empty() {
                out.push(Violation::new(
                    EMPTY_ACTION,
                    n,
                    Some(step.index),
                    format!("{:?} step has an empty action", step.role),
                ));
            }
            if step.status == StepStatus::SelfRefined
                && (j == 0 || sub.steps[j - 1].status != StepStatus::Erroneous)
            {
                out.push(Violation::new(
                    ORPHAN_SELF_REFINED,
                    n,
                    Some(step.index),
                    "self-refined step does not follow an erroneous step".into(),
                ));
            }
        }
        let last = sub.steps.last().expect("nonempty");
        if !last.is_exit() {
            out.push(Violation::new(
                MISSING_EXIT,
                n,
                Some(last.index),
                "last step of the subtask does not end with the exit marker".into(),
            ));
        }
    }

    let final_sub = t.subtasks.last().expect("nonempty");
    if !final_sub.steps.iter().any(|s| s.action.contains(COMPLETION_CALL)) {
        out.push(Violation::new(
            MISSING_COMPLETION_CALL,
            Some(final_sub.number),
            None,
            format!("final subtask never calls {COMPLETION_CALL}"),
        ));
    }

    if let Some(kinds) = t.kinds() {
        let completions: Vec<usize> = kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == SubtaskKind::Completion)
            .map(|(i, _)| i + 1)
            .collect();
        if completions != [kinds.len()] {
            out.push(Violation::new(
                COMPLETION_PLACEMENT,
                None,
                None,
                format!("expected exactly one completion subtask in last place, found {completions:?}"),
            ));
        }
    }

    ValidationReport::from_violations(out)
}

// ---------------------------------------------------------------------------
// Classification

/// Compiled set of error patterns matched against step observations.
#[derive(Debug, Clone)]
pub struct ErrorPatterns {
    patterns: Vec<String>,
    set: RegexSet,
}

impl ErrorPatterns {
    /// Compiles regular expressions. An empty list matches nothing.
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, TrajectoryError> {
        let patterns: Vec<String> = patterns.iter().map(|p| p.as_ref().to_string()).collect();
        for p in &patterns {
            regex::Regex::new(p).map_err(|source| TrajectoryError::Pattern {
                pattern: p.clone(),
                source,
            })?;
        }
        let set = RegexSet::new(&patterns).expect("patterns compiled individually");
        Ok(ErrorPatterns { patterns, set })
    }

    pub fn defaults() -> Self {
        let escaped: Vec<String> = DEFAULT_ERROR_PATTERNS.iter().map(|p| regex::escape(p)).collect();
        Self::new(&escaped).expect("default patterns are valid")
    }

    /// Defaults plus the patterns of a pattern file (one regex per line,
    /// blank lines and `#` comments ignored).
    pub fn defaults_with_file_contents(contents: &str) -> Result<Self, TrajectoryError> {
        let mut all: Vec<String> = DEFAULT_ERROR_PATTERNS.iter().map(|p| regex::escape(p)).collect();
        all.extend(parse_pattern_lines(contents));
        Self::new(&all)
    }

    pub fn from_file(path: &Path) -> Result<Self, TrajectoryError> {
        let contents = std::fs::read_to_string(path).map_err(|source| TrajectoryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::defaults_with_file_contents(&contents)
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn is_match(&self, text: &str) -> bool {
        self.set.is_match(text)
    }
}

impl Default for ErrorPatterns {
    fn default() -> Self {
        Self::defaults()
    }
}

pub fn parse_pattern_lines(contents: &str) -> Vec<String> {
    contents
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Marks every step erroneous, self-refined or correct from its observation.
/// Existing statuses are recomputed, so the operation is idempotent.
pub fn classify_steps(t: &Trajectory, patterns: &ErrorPatterns) -> Trajectory {
    let mut out = t.clone();
    for sub in &mut out.subtasks {
        let mut prev_erroneous = false;
        for step in &mut sub.steps {
            step.status = if patterns.is_match(&step.observation) {
                StepStatus::Erroneous
            } else if prev_erroneous {
                StepStatus::SelfRefined
            } else {
                StepStatus::Correct
            };
            prev_erroneous = step.status == StepStatus::Erroneous;
        }
    }
    out
}

/// Default rule: subtask 1 is login, the last is completion, everything in
/// between is task-specific. A single subtask is completion. Explicit
/// overrides win; overrides naming a missing subtask are ignored.
pub fn classify_subtasks(
    t: &Trajectory,
    overrides: Option<&BTreeMap<usize, SubtaskKind>>,
) -> Trajectory {
    let mut out = t.clone();
    let m = out.subtasks.len();
    for (i, sub) in out.subtasks.iter_mut().enumerate() {
        let number = i + 1;
        let default = if number == m {
            SubtaskKind::Completion
        } else if number == 1 {
            SubtaskKind::Login
        } else {
            SubtaskKind::TaskSpecific
        };
        sub.kind = Some(
            overrides
                .and_then(|o| o.get(&number).copied())
                .unwrap_or(default),
        );
    }
    out
}

/// Keeps kinds already present in the document, filling the rest by the
/// default rule.
pub fn classify_subtasks_keep_existing(t: &Trajectory) -> Trajectory {
    let existing: BTreeMap<usize, SubtaskKind> = t
        .subtasks
        .iter()
        .filter_map(|s| s.kind.map(|k| (s.number, k)))
        .collect();
    classify_subtasks(t, Some(&existing))
}

// ---------------------------------------------------------------------------
// Corpus loading

/// Loads every `*.json` file in `dir` in file-name order, or a single file.
/// Missing task ids are filled from the file stem.
pub fn load_corpus(path: &Path) -> Result<Vec<(Trajectory, Vec<Violation>)>, TrajectoryError> {
    let io_err = |p: &Path, source| TrajectoryError::Io {
        path: p.display().to_string(),
        source,
    };
    let files = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
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
        .map(|file| {
            let text = std::fs::read_to_string(file).map_err(|e| io_err(file, e))?;
            let (mut t, warnings) =
                parse_trajectory_with_warnings(&text).map_err(|e| match e {
                    TrajectoryError::Schema { path, message } => TrajectoryError::Schema {
                        path: format!("{}:{path}", file.display()),
                        message,
                    },
                    TrajectoryError::Json(err) => TrajectoryError::Schema {
                        path: file.display().to_string(),
                        message: err.to_string(),
                    },
                    other => other,
                })?;
            if t.task_id.is_empty() {
                t.task_id = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
            }
            Ok((t, warnings))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(subtasks: Value) -> String {
        json!({"task_id": "t1", "instruction": "Do it.", "subtasks": subtasks}).to_string()
    }

    fn two_by_two() -> String {
        doc(json!([
            {"subtask_number": 1, "subtask_description": "Log in", "executor_steps": [
                {"subtask_number": 1, "step_number": 1, "plan_and_code": "Find login api\n<code>\nprint(apis.api_docs.show_api_descriptions(app_name='spotify'))\n</code>"},
                {"subtask_number": 1, "step_number": 2, "plan_and_code": "Logged in.\n<code>exit</code>"}
            ]},
            {"subtask_number": 2, "subtask_description": "Complete", "executor_steps": [
                {"subtask_number": 2, "step_number": 1, "plan_and_code": "<code>apis.supervisor.complete_task(answer=3)</code>"},
                {"subtask_number": 2, "step_number": 2, "plan_and_code": "Done.<code>exit</code>"}
            ]}
        ]))
    }

    #[test]
    fn parses_two_by_two_fixture() {
        let t = parse_trajectory(&two_by_two()).unwrap();
        assert_eq!(t.orchestrator_step_count(), 2);
        assert_eq!(t.total_turn_count(), 4);
        assert_eq!(t.subtasks[0].steps[0].thought, "Find login api");
        assert_eq!(
            t.subtasks[0].steps[0].action,
            "print(apis.api_docs.show_api_descriptions(app_name='spotify'))"
        );
        assert_eq!(t.subtasks[1].steps[1].action, "exit");
        assert_eq!(t.source, Source::NativeMultiAgent);
    }

    #[test]
    fn non_contiguous_numbering_is_rejected() {
        let text = doc(json!([
            {"subtask_number": 1, "subtask_description": "a", "executor_steps": [{"plan_and_code": "<code>exit</code>"}]},
            {"subtask_number": 3, "subtask_description": "b", "executor_steps": [{"plan_and_code": "<code>exit</code>"}]}
        ]));
        match parse_trajectory(&text) {
            Err(TrajectoryError::Schema { path, message }) => {
                assert_eq!(path, "$.subtasks[1].subtask_number");
                assert!(message.contains("non-contiguous"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_key_and_missing_fence_report_paths() {
        let text = doc(json!([{"subtask_number": 1, "executor_steps": []}]));
        let err = parse_trajectory(&text).unwrap_err();
        assert!(err.to_string().contains("$.subtasks[0].subtask_description"));

        let text = doc(json!([{"subtask_number": 1, "subtask_description": "a",
            "executor_steps": [{"plan_and_code": "no code here"}]}]));
        let err = parse_trajectory(&text).unwrap_err();
        assert!(err.to_string().contains("$.subtasks[0].executor_steps[0].plan_and_code"));

        let text = doc(json!([{"subtask_number": 1, "subtask_description": "a",
            "executor_steps": [{"plan_and_code": "x <code>print(1)"}]}]));
        assert!(parse_trajectory(&text).unwrap_err().to_string().contains("unterminated"));
    }

    #[test]
    fn multiple_code_blocks_are_joined_with_warning() {
        let text = doc(json!([{"subtask_number": 1, "subtask_description": "a",
            "executor_steps": [{"plan_and_code": "t <code>a = 1</code> and <code>b = 2</code>"}]}]));
        let (t, warnings) = parse_trajectory_with_warnings(&text).unwrap();
        assert_eq!(t.subtasks[0].steps[0].action, "a = 1\nb = 2");
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].code, codes::MULTIPLE_CODE_BLOCKS);
    }

    #[test]
    fn code_indentation_is_kept() {
        let split = split_plan_and_code("t\n<code>\n\n    x = 1\n  </code>").unwrap().unwrap();
        assert_eq!(split.action, "    x = 1");
    }

    #[test]
    fn declared_counts_must_match() {
        let mut v: Value = serde_json::from_str(&two_by_two()).unwrap();
        v["total_turn_count"] = json!(5);
        assert!(parse_trajectory(&v.to_string()).is_err());
        v["total_turn_count"] = json!(4);
        assert!(parse_trajectory(&v.to_string()).is_ok());
    }

    #[test]
    fn canonical_round_trip() {
        let t = parse_trajectory(&two_by_two()).unwrap();
        let t = classify_steps(&classify_subtasks(&t, None), &ErrorPatterns::defaults());
        let canon = t.to_canonical_json();
        let back = parse_trajectory(&canon).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_canonical_json(), canon);
        assert!(canon.ends_with("}\n"));
        assert!(!canon.contains('\r'));
    }

    #[test]
    fn critic_steps_accept_feedback_text() {
        let text = doc(json!([{"subtask_number": 1, "subtask_description": "a", "executor_steps": [
            {"plan_and_code": "<code>x()</code>"},
            {"role": "critic", "plan_and_code": "Use page_index to paginate."},
            {"plan_and_code": "<code>exit</code>"}
        ]}]));
        let t = parse_trajectory(&text).unwrap();
        assert_eq!(t.subtasks[0].steps[1].role, StepRole::Critic);
        assert_eq!(t.subtasks[0].steps[1].action, "Use page_index to paginate.");
        assert_eq!(t.total_turn_count(), 2);
    }

    fn budget_fixture(subtasks: usize, steps: usize) -> Trajectory {
        let subs = (1..=subtasks)
            .map(|n| {
                let mut steps: Vec<Step> =
                    (1..steps).map(|i| Step::executor(i, "", "print(1)", "1")).collect();
                let last = if n == subtasks {
                    "apis.supervisor.complete_task()\nexit"
                } else {
                    "exit"
                };
                steps.push(Step::executor(steps.len() + 1, "", last, ""));
                Subtask {
                    number: n,
                    description: format!("subtask {n}"),
                    kind: None,
                    steps,
                    final_report: String::new(),
                }
            })
            .collect();
        Trajectory {
            task_id: "b".into(),
            instruction: "i".into(),
            subtasks: subs,
            source: Source::NativeMultiAgent,
        }
    }

    #[test]
    fn subtask_budget_violation() {
        let t = budget_fixture(13, 2);
        let r = validate_trajectory(&t, Budgets::default());
        assert!(!r.ok);
        assert!(r.has_code(codes::SUBTASK_BUDGET));
    }

    #[test]
    fn step_budget_violation_names_subtask() {
        let mut t = budget_fixture(3, 2);
        t.subtasks[1] = budget_fixture(1, 16).subtasks.remove(0);
        t.subtasks[1].number = 2;
        t.subtasks[1].steps.last_mut().unwrap().action = "exit".into();
        let r = validate_trajectory(&t, Budgets::default());
        let v: Vec<_> = r.violations.iter().filter(|v| v.code == codes::STEP_BUDGET).collect();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].subtask, Some(2));
    }

    #[test]
    fn clean_trajectory_validates() {
        let r = validate_trajectory(&budget_fixture(4, 3), Budgets::default());
        assert!(r.ok, "{:?}", r.violations);
        let r = validate_trajectory(&budget_fixture(13, 16), Budgets::UNBOUNDED);
        assert!(r.ok);
    }

    #[test]
    fn structural_violations() {
        let mut t = budget_fixture(2, 2);
        t.subtasks[0].steps[1].action = "print(2)".into();
        t.subtasks[1].steps[1].action = "exit".into();
        let r = validate_trajectory(&t, Budgets::UNBOUNDED);
        assert!(r.has_code(codes::MISSING_EXIT));
        assert!(r.has_code(codes::MISSING_COMPLETION_CALL));
    }

    #[test]
    fn classify_steps_marks_errors_and_refinements() {
        let mut t = budget_fixture(1, 4);
        t.subtasks[0].steps[0].observation = "Exception: NameError name 'x' is not defined".into();
        t.subtasks[0].steps[1].observation = "ok".into();
        let c = classify_steps(&t, &ErrorPatterns::defaults());
        let statuses: Vec<_> = c.subtasks[0].steps.iter().map(|s| s.status).collect();
        assert_eq!(
            statuses,
            [StepStatus::Erroneous, StepStatus::SelfRefined, StepStatus::Correct, StepStatus::Correct]
        );
        assert_eq!(classify_steps(&c, &ErrorPatterns::defaults()), c);
    }

    #[test]
    fn clean_observations_are_correct() {
        let c = classify_steps(&budget_fixture(3, 3), &ErrorPatterns::defaults());
        assert!(c
            .subtasks
            .iter()
            .flat_map(|s| &s.steps)
            .all(|s| s.status == StepStatus::Correct));
    }

    #[test]
    fn patterns_are_case_sensitive_and_validated() {
        let p = ErrorPatterns::defaults();
        assert!(p.is_match("Traceback (most recent call last)"));
        assert!(!p.is_match("traceback"));
        assert!(!p.is_match("Error without colon"));
        assert!(matches!(ErrorPatterns::new(&["(unclosed"]), Err(TrajectoryError::Pattern { .. })));
        let p = ErrorPatterns::defaults_with_file_contents("# comment\n\nHTTP 4\\d\\d\n").unwrap();
        assert_eq!(p.patterns().len(), 4);
        assert!(p.is_match("got HTTP 404"));
    }

    #[test]
    fn default_subtask_kinds() {
        use SubtaskKind::*;
        let kinds = |m| classify_subtasks(&budget_fixture(m, 1), None).kinds().unwrap();
        assert_eq!(kinds(6), [Login, TaskSpecific, TaskSpecific, TaskSpecific, TaskSpecific, Completion]);
        assert_eq!(kinds(1), [Completion]);
        let overrides = BTreeMap::from([(2, Login)]);
        let t = classify_subtasks(&budget_fixture(4, 1), Some(&overrides));
        assert_eq!(t.kinds().unwrap(), [Login, Login, TaskSpecific, Completion]);
    }

    #[test]
    fn kind_short_names() {
        assert_eq!("ts".parse::<SubtaskKind>().unwrap(), SubtaskKind::TaskSpecific);
        assert!("bogus".parse::<SubtaskKind>().is_err());
    }
}
