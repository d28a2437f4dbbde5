//! Curriculum-scheduled, loss-masked training data for Orchestrator /
//! Executor / Critic agent systems, plus effectiveness and compute-cost
//! analysis of their runs.
//!
//! The pipeline: [`trajectory`] parses and classifies multi-agent
//! trajectories, [`curriculum`] decides which subtasks carry loss at each
//! epoch, and [`masking`] emits the per-role, per-epoch JSONL datasets.
//! [`metrics`] and [`cost`] analyse evaluation run logs, and [`synthesis`]
//! builds multi-agent trajectories from single-agent ones through a chat
//! endpoint.

pub mod config;
pub mod cost;
pub mod curriculum;
pub mod masking;
pub mod metrics;
pub mod synthesis;
pub mod trajectory;

pub use config::Config;
pub use cost::{CostPoint, Effectiveness, SystemConfig};
pub use curriculum::{Schedule, Strategy};
pub use masking::{EmissionManifest, HistoryMode, Role, TrainingSequence};
pub use metrics::{ErrorRateTable, RunRecord};
pub use synthesis::{ChatEndpoint, EndpointConfig, SingleAgentTrajectory};
pub use trajectory::{Step, StepRole, StepStatus, Subtask, SubtaskKind, Trajectory, ValidationReport};
