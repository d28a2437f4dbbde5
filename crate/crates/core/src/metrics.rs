//! Effectiveness metrics over run logs and training corpora.
//!
//! Percentages are rounded to one decimal place, half away from zero, using
//! exact integer arithmetic on the numerator and denominator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::trajectory::{StepStatus, Trajectory};

/// Rows need strictly more successful tasks than this to be reported.
pub const DEFAULT_MIN_SUCCESSFUL: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no run records")]
    EmptyRunSet,
    #[error("record {task_id}: {message}")]
    InvalidRecord { task_id: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTokens {
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentUsage {
    pub name: String,
    #[serde(default)]
    pub params_billions: f64,
    #[serde(default)]
    pub calls: Vec<CallTokens>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub position: usize,
    pub error_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub scenario_id: String,
    pub passed: bool,
    #[serde(default)]
    pub agents: Vec<AgentUsage>,
    #[serde(default)]
    pub subtask_trace: Vec<TraceEntry>,
    #[serde(default)]
    pub max_position_reached: usize,
}

impl RunRecord {
    /// Positions must run 1, 2, ..., `max_position_reached`.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |message: String| MetricsError::InvalidRecord {
            task_id: self.task_id.clone(),
            message,
        };
        for (i, entry) in self.subtask_trace.iter().enumerate() {
            if entry.position != i + 1 {
                return Err(bad(format!(
                    "subtask_trace position {} at index {i}; expected {}",
                    entry.position,
                    i + 1
                )));
            }
        }
        if self.subtask_trace.len() != self.max_position_reached {
            return Err(bad(format!(
                "max_position_reached is {} but the trace has {} entries",
                self.max_position_reached,
                self.subtask_trace.len()
            )));
        }
        if self.agents.iter().any(|a| a.params_billions < 0.0) {
            return Err(bad("negative parameter count".into()));
        }
        Ok(())
    }

    /// Sum of input and output tokens over every agent call.
    pub fn total_tokens(&self) -> u128 {
        self.agents
            .iter()
            .flat_map(|a| &a.calls)
            .map(|c| u128::from(c.tokens_in) + u128::from(c.tokens_out))
            .sum()
    }

    /// Builds a record whose error trace mirrors a classified trajectory.
    pub fn from_trajectory(t: &Trajectory, scenario_id: &str, passed: bool) -> Self {
        let subtask_trace: Vec<TraceEntry> = t
            .subtasks
            .iter()
            .enumerate()
            .map(|(i, s)| TraceEntry {
                position: i + 1,
                error_count: s.steps.iter().filter(|st| st.status == StepStatus::Erroneous).count(),
            })
            .collect();
        RunRecord {
            task_id: t.task_id.clone(),
            scenario_id: scenario_id.to_string(),
            passed,
            agents: Vec::new(),
            max_position_reached: subtask_trace.len(),
            subtask_trace,
        }
    }

    fn errors_at(&self, position: usize) -> usize {
        position
            .checked_sub(1)
            .and_then(|i| self.subtask_trace.get(i))
            .map_or(0, |e| e.error_count)
    }
}

pub fn parse_runs(text: &str, origin: &str) -> Result<Vec<RunRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(line).map_err(|e| MetricsError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

/// Reads a run-log JSONL file, one [`RunRecord`] per line.
pub fn load_runs(path: &Path) -> Result<Vec<RunRecord>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_runs(&text, &path.display().to_string())
}

/// `100 * num / den` rounded to one decimal, half away from zero.
pub fn percent(num: u128, den: u128) -> f64 {
    assert!(den > 0, "percentage with zero denominator");
    let tenths = (num * 1000 + den / 2) / den;
    tenths as f64 / 10.0
}

/// Task goal completion: share of records that passed.
pub fn tgc(records: &[RunRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRunSet);
    }
    let passed = records.iter().filter(|r| r.passed).count();
    Ok(percent(passed as u128, records.len() as u128))
}

/// Scenario goal completion: share of scenarios whose every record passed.
pub fn sgc(records: &[RunRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRunSet);
    }
    let mut scenarios: BTreeMap<&str, bool> = BTreeMap::new();
    for r in records {
        *scenarios.entry(&r.scenario_id).or_insert(true) &= r.passed;
    }
    let complete = scenarios.values().filter(|ok| **ok).count();
    Ok(percent(complete as u128, scenarios.len() as u128))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateRow {
    pub position: usize,
    pub numerator: usize,
    pub denominator: usize,
    pub rate_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorRateTable {
    pub rows: Vec<ErrorRateRow>,
}

impl ErrorRateTable {
    fn from_counts(counts: &BTreeMap<usize, (usize, usize)>, keep: impl Fn(usize, usize) -> bool) -> Self {
        let rows = counts
            .iter()
            .filter(|(pos, (_, den))| *den > 0 && keep(**pos, *den))
            .map(|(&position, &(numerator, denominator))| ErrorRateRow {
                position,
                numerator,
                denominator,
                rate_percent: percent(numerator as u128, denominator as u128),
            })
            .collect();
        ErrorRateTable { rows }
    }

    pub fn rate_at(&self, position: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.position == position).map(|r| r.rate_percent)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>8}  {:>9}  {:>11}  {:>7}\n", "position", "numerator", "denominator", "rate%");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8}  {:>9}  {:>11}  {:>7.1}",
                r.position, r.numerator, r.denominator, r.rate_percent
            );
        }
        out
    }
}

/// Per position: (tasks with an error there, tasks that reached it), passed
/// records only.
fn inference_counts(records: &[RunRecord]) -> BTreeMap<usize, (usize, usize)> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.passed) {
        for pos in 1..=r.max_position_reached {
            let entry = counts.entry(pos).or_default();
            entry.1 += 1;
            if r.errors_at(pos) > 0 {
                entry.0 += 1;
            }
        }
    }
    counts
}

/// Error rate per subtask position over successful runs. Positions reached
/// by `min_successful` or fewer successful runs are omitted.
pub fn inference_error_rates(records: &[RunRecord], min_successful: usize) -> ErrorRateTable {
    ErrorRateTable::from_counts(&inference_counts(records), |_, den| den > min_successful)
}

/// Like [`inference_error_rates`] for several systems at once, keeping only
/// positions that clear the threshold in every system.
pub fn inference_error_rates_joint(systems: &[&[RunRecord]], min_successful: usize) -> Vec<ErrorRateTable> {
    let counts: Vec<_> = systems.iter().map(|r| inference_counts(r)).collect();
    let keep = |pos: usize| {
        counts
            .iter()
            .all(|c| c.get(&pos).is_some_and(|(_, den)| *den > min_successful))
    };
    counts
        .iter()
        .map(|c| ErrorRateTable::from_counts(c, |pos, _| keep(pos)))
        .collect()
}

/// Error rate per subtask position over a classified training corpus.
pub fn training_error_rates(corpus: &[Trajectory]) -> ErrorRateTable {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for t in corpus {
        for (i, sub) in t.subtasks.iter().enumerate() {
            let entry = counts.entry(i + 1).or_default();
            entry.1 += 1;
            if sub.has_error() {
                entry.0 += 1;
            }
        }
    }
    ErrorRateTable::from_counts(&counts, |_, _| true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub records: usize,
    pub passed: usize,
    pub failed: usize,
    pub success_tokens: u128,
    pub failure_tokens: u128,
    pub success_mean: Option<f64>,
    /// Population variance.
    pub success_variance: Option<f64>,
    pub failure_mean: Option<f64>,
    pub failure_variance: Option<f64>,
    /// `None` when no tokens were processed at all.
    pub success_token_ratio_percent: Option<f64>,
}

fn mean_variance(values: &[u128]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var))
}

pub fn token_stats(records: &[RunRecord]) -> Result<TokenStats, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRunSet);
    }
    let (ok, bad): (Vec<&RunRecord>, Vec<&RunRecord>) = records.iter().partition(|r| r.passed);
    let ok_tokens: Vec<u128> = ok.iter().map(|r| r.total_tokens()).collect();
    let bad_tokens: Vec<u128> = bad.iter().map(|r| r.total_tokens()).collect();
    let success_tokens: u128 = ok_tokens.iter().sum();
    let failure_tokens: u128 = bad_tokens.iter().sum();
    let total = success_tokens + failure_tokens;
    let (success_mean, success_variance) = mean_variance(&ok_tokens);
    let (failure_mean, failure_variance) = mean_variance(&bad_tokens);
    Ok(TokenStats {
        records: records.len(),
        passed: ok.len(),
        failed: bad.len(),
        success_tokens,
        failure_tokens,
        success_mean,
        success_variance,
        failure_mean,
        failure_variance,
        success_token_ratio_percent: (total > 0).then(|| percent(success_tokens, total)),
    })
}
