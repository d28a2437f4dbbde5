//! Per-epoch subtask curricula.
//!
//! A [`Schedule`] holds, for each training epoch, the set of subtask numbers
//! whose outputs receive loss. Four strategies are supported:
//!
//! * `ours`: progressive subtask training. Starts from the first two
//!   task-specific subtasks, adds the remaining task-specific subtasks in
//!   natural order with the additions back-loaded onto later epochs, then
//!   brings in the non-task-specific subtasks (login, completion) at the end.
//!   The final epoch always covers the full trajectory.
//! * `all`: every subtask at every epoch.
//! * `decrement`: the `ours` schedule played backwards.
//! * `random`: each subtask covers a random contiguous epoch range.
//!
//! # Random generator
//!
//! The random strategy uses a 64-bit linear congruential generator so that
//! schedules can be reproduced in any language:
//!
//! ```text
//! state_0   = seed
//! state_k+1 = state_k * 6364136223846793005 + 1442695040888963407   (mod 2^64)
//! u32_k+1   = state_k+1 >> 32
//! below(n)  = (u32 * n) >> 32                                        (in [0, n))
//! ```
//!
//! For every subtask in order two values `a = below(E)`, `b = below(E)` are
//! drawn and the subtask is included in epochs `min(a,b)..=max(a,b)`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::trajectory::SubtaskKind;

pub const LCG_MULTIPLIER: u64 = 6_364_136_223_846_793_005;
pub const LCG_INCREMENT: u64 = 1_442_695_040_888_963_407;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CurriculumError {
    #[error("the random strategy requires a seed")]
    MissingSeed,
    #[error("a schedule needs at least one subtask")]
    NoSubtasks,
    #[error("a schedule needs at least one epoch")]
    NoEpochs,
    #[error("unknown strategy {0:?} (expected ours, all, random or decrement)")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ours,
    All,
    Random,
    Decrement,
}

impl Strategy {
    pub const ALL_STRATEGIES: [Strategy; 4] =
        [Strategy::Ours, Strategy::All, Strategy::Random, Strategy::Decrement];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ours => "ours",
            Strategy::All => "all",
            Strategy::Random => "random",
            Strategy::Decrement => "decrement",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = CurriculumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ours" | "prost" => Ok(Strategy::Ours),
            "all" => Ok(Strategy::All),
            "random" => Ok(Strategy::Random),
            "decrement" => Ok(Strategy::Decrement),
            other => Err(CurriculumError::UnknownStrategy(other.to_string())),
        }
    }
}

/// How `decrement` shrinks the full set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecrementMode {
    /// Epoch `e` equals the `ours` set of epoch `E-1-e`.
    #[default]
    Mirror,
    /// Same set sizes as `Mirror`, but subtasks are dropped from the end of
    /// the trajectory (epoch sets are prefixes `{1..k}`).
    DropTail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub strategy: Strategy,
    pub epochs: Vec<BTreeSet<usize>>,
    pub seed: Option<u64>,
    pub subtask_count: usize,
}

impl Schedule {
    pub fn epoch_count(&self) -> usize {
        self.epochs.len()
    }

    pub fn epoch(&self, e: usize) -> Option<&BTreeSet<usize>> {
        self.epochs.get(e)
    }

    pub fn includes(&self, epoch: usize, subtask: usize) -> bool {
        self.epochs.get(epoch).is_some_and(|s| s.contains(&subtask))
    }

    /// One line per epoch: `e<k>: {i,j,...}`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (e, set) in self.epochs.iter().enumerate() {
            let items: Vec<String> = set.iter().map(usize::to_string).collect();
            out.push_str(&format!("e{e}: {{{}}}\n", items.join(",")));
        }
        out
    }
}

/// Seeded 64-bit LCG; see the module docs for the exact recurrence.
#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        Lcg64 { state: seed }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.state = self
            .state
            .wrapping_mul(LCG_MULTIPLIER)
            .wrapping_add(LCG_INCREMENT);
        (self.state >> 32) as u32
    }

    /// Uniform-ish integer in `[0, n)` via multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        ((u64::from(self.next_u32()) * n as u64) >> 32) as usize
    }
}

/// Per-task seed: the base seed xor the FNV-1a hash of the task id.
pub fn task_seed(base: u64, task_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    base ^ h
}

fn full_set(m: usize) -> BTreeSet<usize> {
    (1..=m).collect()
}

pub fn build_prost_schedule(kinds: &[SubtaskKind], epochs: usize) -> Result<Schedule, CurriculumError> {
    if kinds.is_empty() {
        return Err(CurriculumError::NoSubtasks);
    }
    if epochs == 0 {
        return Err(CurriculumError::NoEpochs);
    }
    Ok(Schedule {
        strategy: Strategy::Ours,
        epochs: prost_sets(kinds, epochs),
        seed: None,
        subtask_count: kinds.len(),
    })
}

fn prost_sets(kinds: &[SubtaskKind], epochs: usize) -> Vec<BTreeSet<usize>> {
    let m = kinds.len();
    let full = full_set(m);
    let task_specific: Vec<usize> = (1..=m).filter(|&i| kinds[i - 1].is_task_specific()).collect();
    if m == 1 || task_specific.is_empty() || epochs == 1 {
        return vec![full; epochs];
    }

    let seed_len = task_specific.len().min(2);
    let mut current: BTreeSet<usize> = task_specific[..seed_len].iter().copied().collect();
    // Pad a short seed with completion, then login, then other subtasks.
    let padding_order = [
        SubtaskKind::Completion,
        SubtaskKind::Login,
        SubtaskKind::OtherNonTaskSpecific,
    ];
    let want = m.min(2);
    for kind in padding_order {
        for i in (1..=m).filter(|&i| kinds[i - 1] == kind) {
            if current.len() < want {
                current.insert(i);
            }
        }
    }
    let mut pending = task_specific[seed_len..].iter().copied();
    let additions = task_specific.len() - seed_len;

    // Non-task-specific phase: for short trajectories completion joins one
    // epoch before login; longer ones bring every remaining subtask in at
    // the final epoch. Growth slots give way first when epochs are scarce.
    let nominal_phases = if m >= 6 { 1 } else { 2 };
    let phases = nominal_phases.min(epochs - 1);
    let growth = epochs - 1 - phases;

    let mut sets = Vec::with_capacity(epochs);
    sets.push(current.clone());
    for slot in 1..=growth {
        // Back-loaded: the last `additions % growth` slots take one extra.
        let extra = usize::from(slot > growth - additions % growth);
        for _ in 0..additions / growth + extra {
            current.extend(pending.next());
        }
        sets.push(current.clone());
    }
    if phases == 2 {
        current.extend(pending.by_ref());
        current.extend((1..=m).filter(|&i| kinds[i - 1] == SubtaskKind::Completion));
        sets.push(current.clone());
    }
    sets.push(full);
    debug_assert_eq!(sets.len(), epochs);
    sets
}

pub fn build_schedule(
    strategy: Strategy,
    kinds: &[SubtaskKind],
    epochs: usize,
    seed: Option<u64>,
) -> Result<Schedule, CurriculumError> {
    build_schedule_with(strategy, kinds, epochs, seed, DecrementMode::Mirror)
}

pub fn build_schedule_with(
    strategy: Strategy,
    kinds: &[SubtaskKind],
    epochs: usize,
    seed: Option<u64>,
    decrement: DecrementMode,
) -> Result<Schedule, CurriculumError> {
    if strategy == Strategy::Random && seed.is_none() {
        return Err(CurriculumError::MissingSeed);
    }
    let ours = build_prost_schedule(kinds, epochs)?;
    let m = kinds.len();
    let sets = match strategy {
        Strategy::Ours => return Ok(ours),
        Strategy::All => vec![full_set(m); epochs],
        Strategy::Decrement => {
            let reversed = ours.epochs.into_iter().rev();
            match decrement {
                DecrementMode::Mirror => reversed.collect(),
                DecrementMode::DropTail => reversed.map(|s| (1..=s.len()).collect()).collect(),
            }
        }
        Strategy::Random => {
            let mut rng = Lcg64::new(seed.expect("checked above"));
            let mut sets = vec![BTreeSet::new(); epochs];
            for subtask in 1..=m {
                let a = rng.below(epochs);
                let b = rng.below(epochs);
                for set in &mut sets[a.min(b)..=a.max(b)] {
                    set.insert(subtask);
                }
            }
            sets
        }
    };
    Ok(Schedule {
        strategy,
        epochs: sets,
        seed: if strategy == Strategy::Random { seed } else { None },
        subtask_count: m,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleViolation {
    pub code: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub message: String,
}

pub mod codes {
    pub const NO_EPOCHS: &str = "NO_EPOCHS";
    pub const OUT_OF_RANGE: &str = "OUT_OF_RANGE";
    pub const COVERAGE: &str = "COVERAGE";
    pub const NOT_MONOTONE: &str = "NOT_MONOTONE";
    pub const FINAL_NOT_FULL: &str = "FINAL_NOT_FULL";
    pub const FIRST_NOT_FULL: &str = "FIRST_NOT_FULL";
    pub const NOT_FULL: &str = "NOT_FULL";
    pub const SEED_TOO_SMALL: &str = "SEED_TOO_SMALL";
    pub const NOT_CONTIGUOUS: &str = "NOT_CONTIGUOUS";
    pub const MISSING_SEED: &str = "MISSING_SEED";
}

/// Checks every invariant that applies to the schedule's strategy. An empty
/// result means the schedule is well formed.
pub fn verify_schedule(s: &Schedule) -> Vec<ScheduleViolation> {
    use codes::*;
    let mut out = Vec::new();
    let mut push = |code: &str, epoch: Option<usize>, message: String| {
        out.push(ScheduleViolation {
            code: code.to_string(),
            epoch,
            message,
        })
    };
    let m = s.subtask_count;
    let full = full_set(m);

    if s.epochs.is_empty() {
        push(NO_EPOCHS, None, "schedule has no epochs".into());
        return out;
    }
    for (e, set) in s.epochs.iter().enumerate() {
        if let Some(bad) = set.iter().find(|&&i| i == 0 || i > m) {
            push(OUT_OF_RANGE, Some(e), format!("subtask {bad} outside 1..={m}"));
        }
    }
    let union: BTreeSet<usize> = s.epochs.iter().flatten().copied().collect();
    let missing: Vec<usize> = full.difference(&union).copied().collect();
    if !missing.is_empty() {
        push(COVERAGE, None, format!("subtasks {missing:?} never appear"));
    }

    let first = &s.epochs[0];
    let last = s.epochs.last().expect("nonempty");
    match s.strategy {
        Strategy::Ours => {
            for (e, pair) in s.epochs.windows(2).enumerate() {
                if !pair[0].is_subset(&pair[1]) {
                    push(NOT_MONOTONE, Some(e + 1), format!("epoch {} drops subtasks", e + 1));
                }
            }
            if *last != full {
                push(FINAL_NOT_FULL, Some(s.epochs.len() - 1), "final epoch is not the full set".into());
            }
            if first.len() < m.min(2) {
                push(SEED_TOO_SMALL, Some(0), format!("first epoch has {} subtasks", first.len()));
            }
        }
        Strategy::Decrement => {
            for (e, pair) in s.epochs.windows(2).enumerate() {
                if !pair[1].is_subset(&pair[0]) {
                    push(NOT_MONOTONE, Some(e + 1), format!("epoch {} adds subtasks", e + 1));
                }
            }
            if *first != full {
                push(FIRST_NOT_FULL, Some(0), "first epoch is not the full set".into());
            }
        }
        Strategy::All => {
            for (e, set) in s.epochs.iter().enumerate() {
                if *set != full {
                    push(NOT_FULL, Some(e), format!("epoch {e} is not the full set"));
                }
            }
        }
        Strategy::Random => {
            if s.seed.is_none() {
                push(MISSING_SEED, None, "random schedule without a seed".into());
            }
            for i in 1..=m {
                let present: Vec<usize> = (0..s.epochs.len()).filter(|&e| s.epochs[e].contains(&i)).collect();
                if let (Some(lo), Some(hi)) = (present.first(), present.last()) {
                    if hi - lo + 1 != present.len() {
                        push(NOT_CONTIGUOUS, None, format!("subtask {i} epochs {present:?} are not contiguous"));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use SubtaskKind::{Completion as C, Login as L, TaskSpecific as T};

    fn sets(raw: &[&[usize]]) -> Vec<BTreeSet<usize>> {
        raw.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn six_subtask_five_epoch_schedule() {
        let s = build_prost_schedule(&[L, T, T, T, T, C], 5).unwrap();
        assert_eq!(s.epochs, sets(&[&[2, 3], &[2, 3], &[2, 3, 4], &[2, 3, 4, 5], &[1, 2, 3, 4, 5, 6]]));
        assert!(verify_schedule(&s).is_empty());
    }

    #[test]
    fn five_subtask_schedule_brings_completion_before_login() {
        let s = build_prost_schedule(&[L, T, T, T, C], 5).unwrap();
        assert_eq!(s.epochs, sets(&[&[2, 3], &[2, 3], &[2, 3, 4], &[2, 3, 4, 5], &[1, 2, 3, 4, 5]]));
    }

    #[test]
    fn no_task_specific_collapses_to_full() {
        let s = build_prost_schedule(&[L, C], 5).unwrap();
        assert!(s.epochs.iter().all(|e| *e == full_set(2)));
        let s = build_prost_schedule(&[C], 3).unwrap();
        assert_eq!(s.epochs, sets(&[&[1], &[1], &[1]]));
    }

    #[test]
    fn single_task_specific_is_padded_with_completion() {
        let s = build_prost_schedule(&[L, T, C], 5).unwrap();
        assert_eq!(s.epochs[0], BTreeSet::from([2, 3]));
        assert_eq!(*s.epochs.last().unwrap(), full_set(3));
    }

    #[test]
    fn small_epoch_counts_compress() {
        let kinds = [L, T, T, T, T, T, T, C];
        assert_eq!(build_prost_schedule(&kinds, 1).unwrap().epochs, vec![full_set(8)]);
        assert_eq!(
            build_prost_schedule(&kinds, 2).unwrap().epochs,
            sets(&[&[2, 3], &[1, 2, 3, 4, 5, 6, 7, 8]])
        );
        let short = [L, T, T, T, C];
        assert_eq!(
            build_prost_schedule(&short, 3).unwrap().epochs,
            sets(&[&[2, 3], &[2, 3, 4, 5], &[1, 2, 3, 4, 5]])
        );
    }

    #[test]
    fn decrement_mirrors_ours() {
        let s = build_schedule(Strategy::Decrement, &[L, T, T, T, T, C], 5, None).unwrap();
        assert_eq!(s.epochs, sets(&[&[1, 2, 3, 4, 5, 6], &[2, 3, 4, 5], &[2, 3, 4], &[2, 3], &[2, 3]]));
        assert!(verify_schedule(&s).is_empty());
        let tail = build_schedule_with(Strategy::Decrement, &[L, T, T, T, T, C], 5, None, DecrementMode::DropTail)
            .unwrap();
        assert_eq!(tail.epochs, sets(&[&[1, 2, 3, 4, 5, 6], &[1, 2, 3, 4], &[1, 2, 3], &[1, 2], &[1, 2]]));
        assert!(verify_schedule(&tail).is_empty());
    }

    #[test]
    fn all_strategy() {
        let s = build_schedule(Strategy::All, &[L, T, C], 2, None).unwrap();
        assert_eq!(s.epochs, sets(&[&[1, 2, 3], &[1, 2, 3]]));
    }

    #[test]
    fn random_requires_seed_and_is_reproducible() {
        let kinds = [L, T, T, C];
        assert_eq!(build_schedule(Strategy::Random, &kinds, 5, None), Err(CurriculumError::MissingSeed));
        let a = build_schedule(Strategy::Random, &kinds, 5, Some(42)).unwrap();
        let b = build_schedule(Strategy::Random, &kinds, 5, Some(42)).unwrap();
        assert_eq!(a, b);
        assert!(verify_schedule(&a).is_empty());
    }

    #[test]
    fn lcg_reference_values() {
        // state_1 = 0 * a + c, so the first output is c >> 32.
        let mut rng = Lcg64::new(0);
        assert_eq!(rng.next_u32(), (LCG_INCREMENT >> 32) as u32);
        let s1 = LCG_INCREMENT;
        let s2 = s1.wrapping_mul(LCG_MULTIPLIER).wrapping_add(LCG_INCREMENT);
        assert_eq!(rng.next_u32(), (s2 >> 32) as u32);
    }

    #[test]
    fn verify_flags_known_defects() {
        let bad_final = Schedule {
            strategy: Strategy::Ours,
            epochs: sets(&[&[2, 3], &[2, 3]]),
            seed: None,
            subtask_count: 6,
        };
        let codes: Vec<_> = verify_schedule(&bad_final).into_iter().map(|v| v.code).collect();
        assert!(codes.contains(&codes::FINAL_NOT_FULL.to_string()));

        let missing_four = Schedule {
            strategy: Strategy::All,
            epochs: sets(&[&[1, 2, 3], &[1, 2, 3]]),
            seed: None,
            subtask_count: 4,
        };
        let codes: Vec<_> = verify_schedule(&missing_four).into_iter().map(|v| v.code).collect();
        assert!(codes.contains(&codes::COVERAGE.to_string()));
    }

    #[test]
    fn text_dump() {
        let s = build_prost_schedule(&[L, T, T, T, T, C], 5).unwrap();
        assert_eq!(
            s.to_text(),
            "e0: {2,3}\ne1: {2,3}\ne2: {2,3,4}\ne3: {2,3,4,5}\ne4: {1,2,3,4,5,6}\n"
        );
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(build_prost_schedule(&[], 5), Err(CurriculumError::NoSubtasks));
        assert_eq!(build_prost_schedule(&[L, T, C], 0), Err(CurriculumError::NoEpochs));
    }
}
