//! Fixtures, generators and brute-force reference implementations shared by
//! the integration test targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Mutex;

use rand::rngs::StdRng;
use rand::Rng;
use serde_json::{json, Value};

use subcurr_core::cost::CostPoint;
use subcurr_core::curriculum::Schedule;
use subcurr_core::masking::{Role, SegmentOrigin};
use subcurr_core::metrics::{RunRecord, TraceEntry};
use subcurr_core::synthesis::{ChatEndpoint, ChatMessage, EndpointError, SingleAgentTrajectory, SingleAgentTurn, Supervisor};
use subcurr_core::trajectory::{
    classify_steps, classify_subtasks, ErrorPatterns, Source, Step, StepRole, StepStatus, Subtask, SubtaskKind,
    Trajectory,
};

pub const ERROR_OBSERVATION: &str = "Traceback (most recent call last):\nKeyError: 'song_id'";

/// A random, structurally valid, classified trajectory with at most
/// `max_subtasks` subtasks and `max_steps` steps per subtask. Roughly
/// `error_rate` of executor observations carry an error pattern.
pub fn random_trajectory(rng: &mut StdRng, task_id: &str, max_subtasks: usize, max_steps: usize, error_rate: f64) -> Trajectory {
    let m = rng.random_range(1..=max_subtasks);
    let mut subtasks = Vec::with_capacity(m);
    for number in 1..=m {
        let n = rng.random_range(1..=max_steps);
        let mut steps = Vec::with_capacity(n);
        for pos in 0..n {
            let last = pos + 1 == n;
            let prev_is_executor = steps.last().is_some_and(|s: &Step| s.role == StepRole::Executor);
            if !last && prev_is_executor && rng.random_bool(0.2) {
                steps.push(Step::critic(pos + 1, &format!("Check the loop bound in step {pos}.")));
                continue;
            }
            let mut code = if number == m && pos == 0 {
                "apis.supervisor.complete_task(answer=None)".to_string()
            } else {
                format!("x_{number}_{pos} = apis.spotify.show_song(song_id={})", rng.random_range(0..100))
            };
            if last {
                code = if code.starts_with("apis.supervisor") { format!("{code}\nexit") } else { "exit".into() };
            }
            let observation = if rng.random_bool(error_rate) {
                ERROR_OBSERVATION.to_string()
            } else if rng.random_bool(0.5) {
                format!("{{\"song_id\": {pos}}}")
            } else {
                String::new()
            };
            let thought = if rng.random_bool(0.8) { format!("Step {pos} of subtask {number}.") } else { String::new() };
            steps.push(Step::executor(pos + 1, &thought, &code, &observation));
        }
        subtasks.push(Subtask {
            number,
            description: format!("Subtask {number}: handle part {number} of the request"),
            kind: None,
            steps,
            final_report: if rng.random_bool(0.7) { format!("Finished part {number}.") } else { String::new() },
        });
    }
    let t = Trajectory {
        task_id: task_id.to_string(),
        instruction: format!("Task {task_id}: like every song in my queue."),
        subtasks,
        source: if rng.random_bool(0.5) { Source::NativeMultiAgent } else { Source::ConvertedFromSingleAgent },
    };
    // Middle subtasks occasionally become `other` or a second login.
    let mut overrides = BTreeMap::new();
    for i in 2..m {
        match rng.random_range(0..6) {
            0 => {
                overrides.insert(i, SubtaskKind::OtherNonTaskSpecific);
            }
            1 => {
                overrides.insert(i, SubtaskKind::Login);
            }
            _ => {}
        }
    }
    classify_steps(&classify_subtasks(&t, Some(&overrides)), &ErrorPatterns::defaults())
}

/// Trainable origins as the indicator definitions prescribe, enumerated
/// directly from the schedule and the step statuses.
pub fn oracle_trainable(t: &Trajectory, s: &Schedule, epoch: usize) -> BTreeSet<(Role, SegmentOrigin)> {
    let mut out = BTreeSet::new();
    let included = &s.epochs[epoch];
    for i in 1..=t.subtasks.len() {
        if !included.contains(&i) {
            continue;
        }
        out.insert((Role::Orchestrator, SegmentOrigin { subtask: i, step: None }));
        for (p, step) in t.subtasks[i - 1].steps.iter().enumerate() {
            let ok = step.status == StepStatus::Correct || step.status == StepStatus::SelfRefined;
            if !ok {
                continue;
            }
            let role = match step.role {
                StepRole::Executor => Role::Executor,
                StepRole::Critic => Role::Critic,
            };
            out.insert((role, SegmentOrigin { subtask: i, step: Some(p) }));
        }
    }
    out
}

/// Every assistant origin a full-task executor sequence should contain:
/// all executor steps of subtasks up to the last included one.
pub fn oracle_executor_presence(t: &Trajectory, s: &Schedule, epoch: usize) -> BTreeSet<SegmentOrigin> {
    let last = s.epochs[epoch].iter().max().copied().unwrap_or(0);
    let mut out = BTreeSet::new();
    for i in 1..=last {
        for (p, step) in t.subtasks[i - 1].steps.iter().enumerate() {
            if step.role == StepRole::Executor {
                out.insert(SegmentOrigin { subtask: i, step: Some(p) });
            }
        }
    }
    out
}

/// Points no other point dominates, by exhaustive pairwise comparison.
pub fn brute_force_front(points: &[CostPoint], tgc: bool) -> Vec<CostPoint> {
    let eff = |p: &CostPoint| if tgc { p.tgc_percent } else { p.sgc_percent };
    let mut front: Vec<CostPoint> = points
        .iter()
        .filter(|p| {
            !points.iter().any(|q| {
                let cheaper_or_equal = q.mean_flops_per_task <= p.mean_flops_per_task;
                let better_or_equal = eff(q) >= eff(p);
                let strictly = q.mean_flops_per_task < p.mean_flops_per_task || eff(q) > eff(p);
                cheaper_or_equal && better_or_equal && strictly
            })
        })
        .cloned()
        .collect();
    front.sort_by(|a, b| {
        a.mean_flops_per_task
            .partial_cmp(&b.mean_flops_per_task)
            .unwrap()
            .then_with(|| a.system_id.cmp(&b.system_id))
    });
    front
}

pub fn random_points(rng: &mut StdRng, n: usize) -> Vec<CostPoint> {
    (0..n)
        .map(|_| CostPoint {
            system_id: format!("s{:02}", rng.random_range(0..n.max(1) * 2)),
            // A coarse grid so equal costs and equal scores are common.
            mean_flops_per_task: f64::from(rng.random_range(0..20u32)) * 1.0e12,
            tgc_percent: f64::from(rng.random_range(0..=40u32)) * 2.5,
            sgc_percent: f64::from(rng.random_range(0..=20u32)) * 5.0,
        })
        .enumerate()
        .map(|(i, mut p)| {
            if i % 7 == 3 {
                p.system_id = "dup".into();
            }
            p
        })
        .collect()
}

pub fn record(task_id: &str, scenario_id: &str, passed: bool, errors: &[usize]) -> RunRecord {
    RunRecord {
        task_id: task_id.into(),
        scenario_id: scenario_id.into(),
        passed,
        agents: Vec::new(),
        subtask_trace: errors
            .iter()
            .enumerate()
            .map(|(i, &error_count)| TraceEntry {
                position: i + 1,
                error_count,
            })
            .collect(),
        max_position_reached: errors.len(),
    }
}

/// Eight tasks in four scenarios: A passes both, B, C and D pass one each.
pub fn eight_task_fixture() -> Vec<RunRecord> {
    vec![
        record("a1", "A", true, &[]),
        record("a2", "A", true, &[]),
        record("b1", "B", true, &[]),
        record("b2", "B", false, &[]),
        record("c1", "C", false, &[]),
        record("c2", "C", true, &[]),
        record("d1", "D", true, &[]),
        record("d2", "D", false, &[]),
    ]
}

/// Per-subtask error counts of seven successful runs. Positions 1 and 2 are
/// reached by seven runs, position 3 by six, position 4 by five.
pub const ERROR_RATE_TRACES: [&[usize]; 7] = [
    &[1, 0, 0, 0],
    &[2, 0, 0, 0],
    &[0, 0, 1, 0],
    &[0, 0, 3, 0],
    &[0, 0, 0, 1],
    &[0, 0, 1],
    &[0, 0],
];

pub fn error_rate_fixture() -> Vec<RunRecord> {
    let mut records: Vec<RunRecord> = ERROR_RATE_TRACES
        .iter()
        .enumerate()
        .map(|(i, trace)| record(&format!("ok{i}"), &format!("s{i}"), true, trace))
        .collect();
    // Failed runs full of errors must not move any rate.
    records.push(record("bad0", "x", false, &[4, 4, 4, 4]));
    records.push(record("bad1", "y", false, &[1, 1, 1, 1, 1, 1]));
    records
}

/// Trajectories whose erroneous steps mirror [`ERROR_RATE_TRACES`].
pub fn error_rate_corpus() -> Vec<Trajectory> {
    ERROR_RATE_TRACES
        .iter()
        .enumerate()
        .map(|(i, trace)| {
            let m = trace.len();
            let subtasks = trace
                .iter()
                .enumerate()
                .map(|(j, &errors)| {
                    let number = j + 1;
                    let mut steps: Vec<Step> = (0..errors)
                        .map(|k| Step::executor(k + 1, "try", "x = 1", ERROR_OBSERVATION))
                        .collect();
                    let closing = if number == m { "apis.supervisor.complete_task()\nexit" } else { "exit" };
                    steps.push(Step::executor(errors + 1, "done", closing, ""));
                    Subtask {
                        number,
                        description: format!("part {number}"),
                        kind: None,
                        steps,
                        final_report: String::new(),
                    }
                })
                .collect();
            let t = Trajectory {
                task_id: format!("ok{i}"),
                instruction: "fixture".into(),
                subtasks,
                source: Source::NativeMultiAgent,
            };
            classify_steps(&classify_subtasks(&t, None), &ErrorPatterns::defaults())
        })
        .collect()
}

pub fn single_agent_source() -> SingleAgentTrajectory {
    SingleAgentTrajectory {
        task_id: "sa1".into(),
        instruction: "Like all songs in my Spotify queue.".into(),
        supervisor: Supervisor {
            first_name: "Grace".into(),
            last_name: "Hopper".into(),
            email: "grace@example.com".into(),
            phone_number: "5550199".into(),
        },
        turns: [
            ("Find the spotify APIs.", "print(apis.api_docs.show_api_descriptions(app_name='spotify'))"),
            ("Get the password.", "pw = apis.supervisor.show_account_passwords()"),
            ("Log in.", "token = apis.spotify.login(username='grace@example.com', password=pw)"),
            ("Read the queue.", "queue = apis.spotify.show_song_queue(access_token=token)"),
            ("Like each song.", "for s in queue:\n    apis.spotify.like_song(song_id=s['song_id'], access_token=token)"),
            ("Finish.", "apis.supervisor.complete_task()"),
        ]
        .iter()
        .map(|(thought, action)| SingleAgentTurn {
            thought: thought.to_string(),
            action: action.to_string(),
            observation: "ok".into(),
        })
        .collect(),
    }
}

/// A schema-conforming conversion of `s`, with turns grouped into subtasks
/// of sizes `groups` and `drop` (0-based turn) omitted when given.
pub fn conversion_response(s: &SingleAgentTrajectory, groups: &[usize], drop: Option<usize>) -> String {
    assert_eq!(groups.iter().sum::<usize>(), s.turns.len());
    let mut turn = 0;
    let mut subtasks = Vec::new();
    for (g, &size) in groups.iter().enumerate() {
        let number = g + 1;
        let mut steps = Vec::new();
        for _ in 0..size {
            if Some(turn) != drop {
                let t = &s.turns[turn];
                steps.push(json!({
                    "subtask_number": number,
                    "step_number": steps.len() + 1,
                    "plan_and_code": format!("{}\n<code>\n{}\n</code>", t.thought, t.action),
                }));
            }
            turn += 1;
        }
        steps.push(json!({
            "subtask_number": number,
            "step_number": steps.len() + 1,
            "plan_and_code": "Subtask finished.\n<code>\nexit\n</code>",
        }));
        subtasks.push(json!({
            "subtask_number": number,
            "subtask_description": format!("Part {number}"),
            "executor_steps": steps,
        }));
    }
    let v: Value = json!({ "subtasks": subtasks });
    format!("```json\n{}\n```", serde_json::to_string_pretty(&v).unwrap())
}

/// Replays a fixed list of completions and records every request.
pub struct ScriptedEndpoint {
    responses: Mutex<VecDeque<Result<String, EndpointError>>>,
    pub requests: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedEndpoint {
    pub fn new(responses: Vec<Result<String, EndpointError>>) -> Self {
        ScriptedEndpoint {
            responses: Mutex::new(responses.into()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn always(text: &str, times: usize) -> Self {
        Self::new((0..times).map(|_| Ok(text.to_string())).collect())
    }

    pub fn calls(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl ChatEndpoint for ScriptedEndpoint {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        self.requests.lock().unwrap().push(messages.to_vec());
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(EndpointError::Transport("script exhausted".into())))
    }
}
