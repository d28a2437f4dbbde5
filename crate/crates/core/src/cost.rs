//! Compute cost and cost/effectiveness Pareto fronts.
//!
//! Cost per model call is `2 * params * (tokens_in + tokens_out)` FLOPs,
//! evaluated in exact 128-bit integer arithmetic. Token counts always come
//! from run logs; nothing is re-tokenized.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::{self, MetricsError, RunRecord};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("no run records")]
    EmptyRunSet,
    #[error("no points to compare")]
    EmptyPointSet,
    #[error("record {task_id} uses agent {agent:?}, which system {system_id} does not define")]
    UnknownAgent {
        system_id: String,
        task_id: String,
        agent: String,
    },
    #[error("invalid system config {system_id}: {message}")]
    InvalidConfig { system_id: String, message: String },
    #[error("invalid cost point {system_id}: {message}")]
    InvalidPoint { system_id: String, message: String },
    #[error("FLOPs overflow 128 bits")]
    Overflow,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn flops_per_call(params: u64, tokens_in: u64, tokens_out: u64) -> Result<u128, CostError> {
    let tokens = u128::from(tokens_in) + u128::from(tokens_out);
    u128::from(params)
        .checked_mul(2)
        .and_then(|p| p.checked_mul(tokens))
        .ok_or(CostError::Overflow)
}

/// Formats a FLOP count with an SI prefix, e.g. `2.24 TFLOPs`.
pub fn format_flops(flops: f64) -> String {
    const PREFIXES: [&str; 7] = ["", "K", "M", "G", "T", "P", "E"];
    let mut value = flops;
    let mut idx = 0;
    while value.abs() >= 1000.0 && idx < PREFIXES.len() - 1 {
        value /= 1000.0;
        idx += 1;
    }
    format!("{value:.2} {}FLOPs", PREFIXES[idx])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    /// Parameter count (not billions).
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Free-form label, e.g. `"14-7-7 curriculum"` for Orchestrator, Executor
    /// and Critic sizes plus the training regime.
    pub system_id: String,
    pub agents: Vec<AgentSpec>,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |message: String| CostError::InvalidConfig {
            system_id: self.system_id.clone(),
            message,
        };
        let mut seen = BTreeSet::new();
        for a in &self.agents {
            if a.params == 0 {
                return Err(bad(format!("agent {} has zero parameters", a.name)));
            }
            if !seen.insert(a.name.as_str()) {
                return Err(bad(format!("agent {} is listed twice", a.name)));
            }
        }
        Ok(())
    }

    fn params_by_name(&self) -> BTreeMap<&str, u64> {
        self.agents.iter().map(|a| (a.name.as_str(), a.params)).collect()
    }
}

/// Parses one system config object or an array of them.
pub fn parse_system_configs(text: &str) -> Result<Vec<SystemConfig>, CostError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<SystemConfig>),
        One(SystemConfig),
    }
    let configs = match serde_json::from_str::<OneOrMany>(text)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(c) => vec![c],
    };
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

/// FLOPs of one task run: every call of every agent.
pub fn task_flops(record: &RunRecord, config: &SystemConfig) -> Result<u128, CostError> {
    let params = config.params_by_name();
    let mut total: u128 = 0;
    for agent in &record.agents {
        let p = *params.get(agent.name.as_str()).ok_or_else(|| CostError::UnknownAgent {
            system_id: config.system_id.clone(),
            task_id: record.task_id.clone(),
            agent: agent.name.clone(),
        })?;
        for call in &agent.calls {
            total = total
                .checked_add(flops_per_call(p, call.tokens_in, call.tokens_out)?)
                .ok_or(CostError::Overflow)?;
        }
    }
    Ok(total)
}

/// Mean FLOPs per task over a run set.
pub fn aggregate_flops(records: &[RunRecord], config: &SystemConfig) -> Result<f64, CostError> {
    if records.is_empty() {
        return Err(CostError::EmptyRunSet);
    }
    let mut total: u128 = 0;
    for r in records {
        total = total.checked_add(task_flops(r, config)?).ok_or(CostError::Overflow)?;
    }
    Ok(total as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub system_id: String,
    pub mean_flops_per_task: f64,
    pub tgc_percent: f64,
    pub sgc_percent: f64,
}

impl CostPoint {
    pub fn from_runs(config: &SystemConfig, records: &[RunRecord]) -> Result<Self, CostError> {
        Ok(CostPoint {
            system_id: config.system_id.clone(),
            mean_flops_per_task: aggregate_flops(records, config)?,
            tgc_percent: metrics::tgc(records)?,
            sgc_percent: metrics::sgc(records)?,
        })
    }

    pub fn effectiveness(&self, e: Effectiveness) -> f64 {
        match e {
            Effectiveness::Tgc => self.tgc_percent,
            Effectiveness::Sgc => self.sgc_percent,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |message: &str| CostError::InvalidPoint {
            system_id: self.system_id.clone(),
            message: message.to_string(),
        };
        if !(self.mean_flops_per_task.is_finite() && self.mean_flops_per_task >= 0.0) {
            return Err(bad("mean_flops_per_task must be finite and non-negative"));
        }
        for p in [self.tgc_percent, self.sgc_percent] {
            if !(0.0..=100.0).contains(&p) {
                return Err(bad("percentages must lie in [0, 100]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effectiveness {
    #[default]
    Tgc,
    Sgc,
}

impl fmt::Display for Effectiveness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Effectiveness::Tgc => "tgc",
            Effectiveness::Sgc => "sgc",
        })
    }
}

impl FromStr for Effectiveness {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tgc" => Ok(Effectiveness::Tgc),
            "sgc" => Ok(Effectiveness::Sgc),
            other => Err(format!("unknown effectiveness metric {other:?} (expected tgc or sgc)")),
        }
    }
}

/// `q` dominates `p` when it is no more expensive and no less effective,
/// and strictly better in at least one of the two.
pub fn dominates(q: &CostPoint, p: &CostPoint, e: Effectiveness) -> bool {
    let (qf, pf) = (q.mean_flops_per_task, p.mean_flops_per_task);
    let (qe, pe) = (q.effectiveness(e), p.effectiveness(e));
    qf <= pf && qe >= pe && (qf < pf || qe > pe)
}

fn front_order(a: &CostPoint, b: &CostPoint) -> Ordering {
    a.mean_flops_per_task
        .total_cmp(&b.mean_flops_per_task)
        .then_with(|| a.system_id.cmp(&b.system_id))
}

/// Non-dominated points sorted by cost, then system id. Identical points do
/// not dominate each other, so all copies are kept.
pub fn pareto_front(points: &[CostPoint], e: Effectiveness) -> Result<Vec<CostPoint>, CostError> {
    if points.is_empty() {
        return Err(CostError::EmptyPointSet);
    }
    for p in points {
        p.validate()?;
    }
    // Sweep by ascending cost. Within a group of equal cost a point survives
    // if nothing cheaper is at least as effective and nothing in the group is
    // strictly more effective.
    let mut sorted: Vec<&CostPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.mean_flops_per_task.total_cmp(&b.mean_flops_per_task));
    let mut front = Vec::new();
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let cost = sorted[i].mean_flops_per_task;
        let group_end = sorted[i..]
            .iter()
            .position(|p| p.mean_flops_per_task != cost)
            .map_or(sorted.len(), |n| i + n);
        let group = &sorted[i..group_end];
        let group_best = group.iter().map(|p| p.effectiveness(e)).fold(f64::NEG_INFINITY, f64::max);
        for p in group {
            let eff = p.effectiveness(e);
            if best_cheaper < eff && eff >= group_best {
                front.push((*p).clone());
            }
        }
        best_cheaper = best_cheaper.max(group_best);
        i = group_end;
    }
    front.sort_by(front_order);
    Ok(front)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PointRow {
    system_id: String,
    mean_flops_per_task: f64,
    tgc_percent: f64,
    sgc_percent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    on_front: Option<bool>,
}

/// CSV with one row per point, sorted by cost, and an `on_front` column.
pub fn points_to_csv(points: &[CostPoint], e: Effectiveness) -> Result<String, CostError> {
    let front = pareto_front(points, e)?;
    let mut sorted: Vec<&CostPoint> = points.iter().collect();
    sorted.sort_by(|a, b| front_order(a, b));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for p in sorted {
        w.serialize(PointRow {
            system_id: p.system_id.clone(),
            mean_flops_per_task: p.mean_flops_per_task,
            tgc_percent: p.tgc_percent,
            sgc_percent: p.sgc_percent,
            on_front: Some(front.contains(p)),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| CostError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Reads points from CSV (`on_front` optional and ignored).
pub fn points_from_csv(text: &str) -> Result<Vec<CostPoint>, CostError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize::<PointRow>()
        .map(|row| {
            let row = row?;
            let p = CostPoint {
                system_id: row.system_id,
                mean_flops_per_task: row.mean_flops_per_task,
                tgc_percent: row.tgc_percent,
                sgc_percent: row.sgc_percent,
            };
            p.validate()?;
            Ok(p)
        })
        .collect()
}
