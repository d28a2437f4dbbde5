mod common;

use std::fs;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;
use sha2::{Digest, Sha256};

use subcurr_core::curriculum::{DecrementMode, Strategy};
use subcurr_core::masking::{
    build_executor_examples, build_orchestrator_examples, emit_epoch_datasets, schedule_for_task, EmitOptions,
    HistoryMode, Role, Speaker, MANIFEST_FILE,
};
use subcurr_core::trajectory::Trajectory;

use common::*;

fn corpus(n: usize, seed: u64) -> Vec<Trajectory> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n).map(|i| random_trajectory(&mut rng, &format!("task{i}"), 6, 5, 0.3)).collect()
}

#[test]
fn two_tasks_two_epochs_all_gives_six_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = emit_epoch_datasets(&corpus(2, 1), &EmitOptions::new(Strategy::All, 2), dir.path()).unwrap();
    assert_eq!(manifest.files.len(), 6);
    assert_eq!(manifest.record_counts[&Role::Orchestrator], vec![2, 2]);
    assert_eq!(manifest.record_counts[&Role::Executor], vec![2, 2]);
    let names: Vec<&str> = manifest.files.iter().map(|f| f.file.as_str()).collect();
    assert!(names.contains(&"orchestrator.epoch0.jsonl"));
    assert!(names.contains(&"critic.epoch1.jsonl"));
    assert!(dir.path().join(MANIFEST_FILE).is_file());
}

#[test]
fn empty_corpus_writes_empty_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = emit_epoch_datasets(&[], &EmitOptions::new(Strategy::Ours, 3), dir.path()).unwrap();
    assert_eq!(manifest.files.len(), 9);
    for f in &manifest.files {
        assert_eq!(f.records, 0);
        assert_eq!(fs::read(dir.path().join(&f.file)).unwrap(), b"");
    }
    assert!(dir.path().join(MANIFEST_FILE).is_file());
}

#[test]
fn emission_is_byte_deterministic_and_hashed() {
    let c = corpus(25, 7);
    let mut options = EmitOptions::new(Strategy::Random, 5);
    options.seed = Some(99);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = emit_epoch_datasets(&c, &options, a.path()).unwrap();
    let mb = emit_epoch_datasets(&c, &options, b.path()).unwrap();
    assert_eq!(ma, mb);
    for f in &ma.files {
        let bytes = fs::read(a.path().join(&f.file)).unwrap();
        assert_eq!(bytes, fs::read(b.path().join(&f.file)).unwrap());
        assert_eq!(f.sha256, hex_digest(&bytes));
        assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), f.records);
    }
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn jsonl_records_follow_corpus_order_and_expose_masks() {
    let c = corpus(6, 3);
    let dir = tempfile::tempdir().unwrap();
    emit_epoch_datasets(&c, &EmitOptions::new(Strategy::All, 1), dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("executor.epoch0.jsonl")).unwrap();
    let ids: Vec<String> = text
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            assert!(v["segments"][0].get("origin").is_none());
            assert!(v["segments"][0]["trainable"].is_boolean());
            v["task_id"].as_str().unwrap().to_string()
        })
        .collect();
    let want: Vec<String> = c.iter().map(|t| t.task_id.clone()).collect();
    assert_eq!(ids, want);
}

#[test]
fn sequences_stop_at_the_last_included_subtask() {
    let mut rng = StdRng::seed_from_u64(11);
    for i in 0..100 {
        let t = random_trajectory(&mut rng, &format!("p{i}"), 8, 6, 0.3);
        let epochs = rng.random_range(1..=6);
        for strategy in [Strategy::Ours, Strategy::Random, Strategy::Decrement] {
            let s = schedule_for_task(&t, strategy, epochs, Some(5), DecrementMode::Mirror).unwrap();
            for e in 0..epochs {
                let seqs = build_executor_examples(&t, &s, e, HistoryMode::FullTask).unwrap();
                assert_eq!(seqs.len(), 1);
                let present: std::collections::BTreeSet<_> = seqs[0]
                    .segments
                    .iter()
                    .filter(|seg| seg.speaker == Speaker::Assistant)
                    .filter_map(|seg| seg.origin)
                    .collect();
                assert_eq!(present, oracle_executor_presence(&t, &s, e));

                let per = build_executor_examples(&t, &s, e, HistoryMode::PerSubtask).unwrap();
                assert_eq!(per.len(), s.epochs[e].len());

                let orch = build_orchestrator_examples(&t, &s, e).unwrap();
                let last = s.epochs[e].iter().max().copied().unwrap_or(0);
                let plans = orch[0].segments.iter().filter(|seg| seg.speaker == Speaker::Assistant).count();
                assert_eq!(plans, last);
            }
        }
    }
}

#[test]
fn unclassified_trajectories_are_rejected() {
    let mut t = corpus(1, 2).remove(0);
    t.subtasks[0].steps[0].status = subcurr_core::StepStatus::Unclassified;
    let s = schedule_for_task(&t, Strategy::All, 2, None, DecrementMode::Mirror).unwrap();
    assert!(build_executor_examples(&t, &s, 0, HistoryMode::FullTask).is_err());
}
