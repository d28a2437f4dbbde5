//! Role-specific training sequences with per-message loss flags.
//!
//! Each [`TrainingSequence`] is a chat transcript whose assistant messages
//! are flagged trainable or context-only. A message is trainable when its
//! subtask belongs to the epoch's schedule set and, for Executor and Critic
//! messages, when the step is correct or self-refined. Token-level masks are
//! left to the consuming trainer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{self, CurriculumError, DecrementMode, Schedule, Strategy};
use crate::trajectory::{Step, StepRole, StepStatus, Subtask, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum MaskingError {
    #[error("epoch {epoch} is out of range for a {epochs}-epoch schedule")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("task {task_id} has unclassified steps")]
    UnclassifiedSteps { task_id: String },
    #[error("task {task_id} has unclassified subtasks")]
    UnclassifiedSubtasks { task_id: String },
    #[error("schedule covers {schedule} subtasks but task {task_id} has {actual}")]
    ScheduleMismatch {
        task_id: String,
        schedule: usize,
        actual: usize,
    },
    #[error(transparent)]
    Schedule(#[from] CurriculumError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("task {task_id}: {source}")]
    Task {
        task_id: String,
        #[source]
        source: Box<MaskingError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Orchestrator,
    Executor,
    Critic,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Orchestrator, Role::Executor, Role::Critic];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Orchestrator => "orchestrator",
            Role::Executor => "executor",
            Role::Critic => "critic",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

/// Where an assistant message came from: a subtask plan (`step == None`) or
/// the step at 0-based position `step` within the subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentOrigin {
    pub subtask: usize,
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub speaker: Speaker,
    pub content: String,
    pub trainable: bool,
    #[serde(skip)]
    pub origin: Option<SegmentOrigin>,
}

impl Segment {
    fn context(speaker: Speaker, content: impl Into<String>) -> Self {
        Segment {
            speaker,
            content: content.into(),
            trainable: false,
            origin: None,
        }
    }

    fn assistant(content: String, trainable: bool, origin: SegmentOrigin) -> Self {
        Segment {
            speaker: Speaker::Assistant,
            content,
            trainable,
            origin: Some(origin),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub task_id: String,
    pub role: Role,
    pub epoch: usize,
    pub strategy: String,
    pub segments: Vec<Segment>,
}

impl TrainingSequence {
    /// One JSONL record: sorted keys, compact, LF-terminated.
    pub fn to_jsonl_line(&self) -> String {
        let value = serde_json::to_value(self).expect("sequence serializes");
        let mut line = serde_json::to_string(&value).expect("value serializes");
        line.push('\n');
        line
    }

    pub fn trainable_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.trainable)
    }
}

/// Trainable messages across sequences, keyed by role and origin.
pub fn trainable_origins(seqs: &[TrainingSequence]) -> BTreeSet<(Role, SegmentOrigin)> {
    seqs.iter()
        .flat_map(|seq| {
            seq.trainable_segments()
                .filter_map(move |s| s.origin.map(|o| (seq.role, o)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// One sequence per included subtask, starting at the subtask boundary.
    PerSubtask,
    /// One sequence per task conditioning on all earlier steps.
    #[default]
    FullTask,
}

impl FromStr for HistoryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_subtask" => Ok(HistoryMode::PerSubtask),
            "full_task" => Ok(HistoryMode::FullTask),
            other => Err(format!("unknown history mode {other:?} (expected per_subtask or full_task)")),
        }
    }
}

/// Renders an Executor turn the way the converter wrote it.
pub fn render_step(step: &Step) -> String {
    match step.role {
        StepRole::Executor if step.thought.is_empty() => format!("<code>\n{}\n</code>", step.action),
        StepRole::Executor => format!("{}\n<code>\n{}\n</code>", step.thought, step.action),
        StepRole::Critic if step.thought.is_empty() => step.action.clone(),
        StepRole::Critic => format!("{}\n{}", step.thought, step.action),
    }
}

fn epoch_set<'a>(s: &'a Schedule, epoch: usize, t: &Trajectory) -> Result<&'a BTreeSet<usize>, MaskingError> {
    if s.subtask_count != t.subtasks.len() {
        return Err(MaskingError::ScheduleMismatch {
            task_id: t.task_id.clone(),
            schedule: s.subtask_count,
            actual: t.subtasks.len(),
        });
    }
    s.epoch(epoch).ok_or(MaskingError::EpochOutOfRange {
        epoch,
        epochs: s.epoch_count(),
    })
}

fn require_classified_steps(t: &Trajectory) -> Result<(), MaskingError> {
    if t.is_step_classified() {
        Ok(())
    } else {
        Err(MaskingError::UnclassifiedSteps {
            task_id: t.task_id.clone(),
        })
    }
}

fn sequence(t: &Trajectory, role: Role, s: &Schedule, epoch: usize, segments: Vec<Segment>) -> TrainingSequence {
    TrainingSequence {
        task_id: t.task_id.clone(),
        role,
        epoch,
        strategy: s.strategy.to_string(),
        segments,
    }
}

/// Orchestrator: the instruction, then each subtask plan followed by its
/// final report, up to the last included subtask.
pub fn build_orchestrator_examples(
    t: &Trajectory,
    s: &Schedule,
    epoch: usize,
) -> Result<Vec<TrainingSequence>, MaskingError> {
    let included = epoch_set(s, epoch, t)?;
    let last = included.last().copied().unwrap_or(0);
    let mut segments = vec![Segment::context(Speaker::System, &t.instruction)];
    for sub in t.subtasks.iter().take(last) {
        segments.push(Segment::assistant(
            sub.description.clone(),
            included.contains(&sub.number),
            SegmentOrigin {
                subtask: sub.number,
                step: None,
            },
        ));
        if !sub.final_report.is_empty() {
            segments.push(Segment::context(Speaker::User, &sub.final_report));
        }
    }
    Ok(vec![sequence(t, Role::Orchestrator, s, epoch, segments)])
}

fn push_executor_turns(segments: &mut Vec<Segment>, sub: &Subtask, in_schedule: bool) {
    for (pos, step) in sub.steps.iter().enumerate() {
        match step.role {
            StepRole::Executor => {
                segments.push(Segment::assistant(
                    render_step(step),
                    in_schedule && step.status.is_trainable(),
                    SegmentOrigin {
                        subtask: sub.number,
                        step: Some(pos),
                    },
                ));
                if !step.observation.is_empty() {
                    segments.push(Segment::context(Speaker::User, &step.observation));
                }
            }
            StepRole::Critic => segments.push(Segment::context(Speaker::User, render_step(step))),
        }
    }
}

/// Executor: thought/action turns as assistant messages, observations and
/// Critic feedback as user context.
pub fn build_executor_examples(
    t: &Trajectory,
    s: &Schedule,
    epoch: usize,
    history_mode: HistoryMode,
) -> Result<Vec<TrainingSequence>, MaskingError> {
    let included = epoch_set(s, epoch, t)?;
    require_classified_steps(t)?;
    match history_mode {
        HistoryMode::FullTask => {
            let last = included.last().copied().unwrap_or(0);
            let mut segments = vec![Segment::context(Speaker::System, &t.instruction)];
            for sub in t.subtasks.iter().take(last) {
                segments.push(Segment::context(Speaker::User, &sub.description));
                push_executor_turns(&mut segments, sub, included.contains(&sub.number));
            }
            Ok(vec![sequence(t, Role::Executor, s, epoch, segments)])
        }
        HistoryMode::PerSubtask => Ok(included
            .iter()
            .filter_map(|&n| t.subtask(n))
            .map(|sub| {
                let mut segments = vec![Segment::context(Speaker::System, &sub.description)];
                push_executor_turns(&mut segments, sub, true);
                sequence(t, Role::Executor, s, epoch, segments)
            })
            .collect()),
    }
}

/// Critic: one sequence per Critic invocation. Context is the task, the
/// Executor's history so far and the refinement under review; the feedback
/// is the single assistant message.
pub fn build_critic_examples(
    t: &Trajectory,
    s: &Schedule,
    epoch: usize,
) -> Result<Vec<TrainingSequence>, MaskingError> {
    let included = epoch_set(s, epoch, t)?;
    if !t.has_critic_steps() {
        return Ok(Vec::new());
    }
    require_classified_steps(t)?;

    let mut out = Vec::new();
    for (sub_idx, sub) in t.subtasks.iter().enumerate() {
        for (pos, step) in sub.steps.iter().enumerate() {
            if step.role != StepRole::Critic {
                continue;
            }
            let mut segments = vec![Segment::context(Speaker::System, &t.instruction)];
            for earlier in &t.subtasks[..sub_idx] {
                segments.push(Segment::context(Speaker::User, &earlier.description));
                push_history(&mut segments, &earlier.steps);
            }
            segments.push(Segment::context(Speaker::User, &sub.description));
            let before = &sub.steps[..pos];
            let proposal = before
                .last()
                .filter(|p| p.role == StepRole::Executor);
            let history = if proposal.is_some() { &before[..pos - 1] } else { before };
            push_history(&mut segments, history);
            if let Some(p) = proposal {
                let mut text = format!("Proposed refinement:\n{}", render_step(p));
                if !p.observation.is_empty() {
                    text.push_str(&format!("\nObservation:\n{}", p.observation));
                }
                segments.push(Segment::context(Speaker::User, text));
            }
            segments.push(Segment::assistant(
                render_step(step),
                included.contains(&sub.number) && step.status.is_trainable(),
                SegmentOrigin {
                    subtask: sub.number,
                    step: Some(pos),
                },
            ));
            out.push(sequence(t, Role::Critic, s, epoch, segments));
        }
    }
    Ok(out)
}

fn push_history(segments: &mut Vec<Segment>, steps: &[Step]) {
    for step in steps {
        match step.role {
            StepRole::Executor => {
                segments.push(Segment::context(Speaker::User, render_step(step)));
                if !step.observation.is_empty() {
                    segments.push(Segment::context(Speaker::User, &step.observation));
                }
            }
            StepRole::Critic => segments.push(Segment::context(Speaker::Assistant, render_step(step))),
        }
    }
}

pub fn build_role_examples(
    role: Role,
    t: &Trajectory,
    s: &Schedule,
    epoch: usize,
    history_mode: HistoryMode,
) -> Result<Vec<TrainingSequence>, MaskingError> {
    match role {
        Role::Orchestrator => build_orchestrator_examples(t, s, epoch),
        Role::Executor => build_executor_examples(t, s, epoch, history_mode),
        Role::Critic => build_critic_examples(t, s, epoch),
    }
}

/// Builds the schedule a task gets under `strategy`. Random schedules use a
/// per-task seed derived from `seed` and the task id.
pub fn schedule_for_task(
    t: &Trajectory,
    strategy: Strategy,
    epochs: usize,
    seed: Option<u64>,
    decrement: DecrementMode,
) -> Result<Schedule, MaskingError> {
    let kinds = t.kinds().ok_or_else(|| MaskingError::UnclassifiedSubtasks {
        task_id: t.task_id.clone(),
    })?;
    let task_seed = seed.map(|s| curriculum::task_seed(s, &t.task_id));
    Ok(curriculum::build_schedule_with(strategy, &kinds, epochs, task_seed, decrement)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitOptions {
    pub strategy: Strategy,
    pub epochs: usize,
    pub seed: Option<u64>,
    pub history_mode: HistoryMode,
    pub decrement_mode: DecrementMode,
}

impl EmitOptions {
    pub fn new(strategy: Strategy, epochs: usize) -> Self {
        EmitOptions {
            strategy,
            epochs,
            seed: None,
            history_mode: HistoryMode::default(),
            decrement_mode: DecrementMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmittedFile {
    pub file: String,
    pub role: Role,
    pub epoch: usize,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmissionManifest {
    pub strategy: Strategy,
    pub epochs: usize,
    pub seed: Option<u64>,
    pub history_mode: HistoryMode,
    pub roles: Vec<Role>,
    pub tasks: usize,
    /// Record counts per role, indexed by epoch.
    pub record_counts: BTreeMap<Role, Vec<usize>>,
    pub files: Vec<EmittedFile>,
    /// SHA-256 over the canonical JSON of every input trajectory, in order.
    pub corpus_digest: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn dataset_file_name(role: Role, epoch: usize) -> String {
    format!("{}.epoch{epoch}.jsonl", role.as_str())
}

pub fn corpus_digest(corpus: &[Trajectory]) -> String {
    let mut hasher = Sha256::new();
    for t in corpus {
        hasher.update(t.to_canonical_json().as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Per task, per epoch, per role: the sequences that task contributes.
type TaskRecords = Vec<Vec<[Vec<TrainingSequence>; 3]>>;

/// Writes `<role>.epoch<k>.jsonl` for every role and epoch plus
/// `manifest.json`. Tasks are processed in parallel; records are written in
/// corpus order.
pub fn emit_epoch_datasets(
    corpus: &[Trajectory],
    options: &EmitOptions,
    out_dir: &Path,
) -> Result<EmissionManifest, MaskingError> {
    let per_task: TaskRecords = corpus
        .par_iter()
        .map(|t| {
            task_records(t, options).map_err(|e| MaskingError::Task {
                task_id: t.task_id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;

    let io = |path: &Path, source| MaskingError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;

    let mut record_counts: BTreeMap<Role, Vec<usize>> = BTreeMap::new();
    let mut files = Vec::new();
    for (r, role) in Role::ALL.iter().enumerate() {
        for epoch in 0..options.epochs {
            let mut body = String::new();
            let mut records = 0;
            for task in &per_task {
                for seq in &task[epoch][r] {
                    body.push_str(&seq.to_jsonl_line());
                    records += 1;
                }
            }
            let name = dataset_file_name(*role, epoch);
            let path: PathBuf = out_dir.join(&name);
            fs::write(&path, body.as_bytes()).map_err(|e| io(&path, e))?;
            record_counts.entry(*role).or_default().push(records);
            files.push(EmittedFile {
                file: name,
                role: *role,
                epoch,
                records,
                sha256: hex::encode(Sha256::digest(body.as_bytes())),
            });
        }
    }

    let manifest = EmissionManifest {
        strategy: options.strategy,
        epochs: options.epochs,
        seed: options.seed,
        history_mode: options.history_mode,
        roles: Role::ALL.to_vec(),
        tasks: corpus.len(),
        record_counts,
        files,
        corpus_digest: corpus_digest(corpus),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| io(&path, e))?;
    Ok(manifest)
}

fn task_records(t: &Trajectory, options: &EmitOptions) -> Result<Vec<[Vec<TrainingSequence>; 3]>, MaskingError> {
    let schedule = schedule_for_task(t, options.strategy, options.epochs, options.seed, options.decrement_mode)?;
    (0..options.epochs)
        .map(|epoch| {
            Ok([
                build_orchestrator_examples(t, &schedule, epoch)?,
                build_executor_examples(t, &schedule, epoch, options.history_mode)?,
                build_critic_examples(t, &schedule, epoch)?,
            ])
        })
        .collect()
}

/// Status check used by the emitter's callers: no erroneous step may be
/// trainable. Returns the offending origins.
pub fn erroneous_trainable(t: &Trajectory, seqs: &[TrainingSequence]) -> Vec<SegmentOrigin> {
    trainable_origins(seqs)
        .into_iter()
        .filter_map(|(_, o)| {
            let pos = o.step?;
            let step = t.subtask(o.subtask)?.steps.get(pos)?;
            (step.status == StepStatus::Erroneous).then_some(o)
        })
        .collect()
}
