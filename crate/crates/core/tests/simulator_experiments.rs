use target_batcher::batcher::BatchingConfig;
use target_batcher::model::{BatchSizeReason, Outcome};
use target_batcher::simulator::{
    generate_workload, run_experiment, ClusterConfig, ExperimentConfig, Policy, WorkloadParams,
};

fn workload() -> target_batcher::simulator::Workload {
    generate_workload(21, 6000, &WorkloadParams::default()).unwrap()
}

#[test]
fn policies_conserve_targets_and_agree_on_size() {
    let w = workload();
    let cluster = ClusterConfig::default();
    for policy in [Policy::Naive(900), Policy::Naive(50), Policy::Btbs, Policy::Oracle] {
        let m = run_experiment(policy, &w, &cluster, &BatchingConfig::default(), None, &ExperimentConfig::default())
            .unwrap();
        assert!(m.invariant_violations.is_empty(), "{policy}: {:?}", m.invariant_violations);
        let covered: usize = m.first_attempts().map(|b| b.target_count).sum();
        assert_eq!(covered, w.len(), "{policy}");
        assert_eq!(m.n_targets, w.len());
    }
}

#[test]
fn oracle_beats_naive_on_multi_target_ooms() {
    let w = workload();
    let cluster = ClusterConfig::default();
    let exp = ExperimentConfig::default();
    let naive = run_experiment(Policy::Naive(900), &w, &cluster, &BatchingConfig::default(), None, &exp).unwrap();
    let oracle = run_experiment(Policy::Oracle, &w, &cluster, &BatchingConfig::default(), None, &exp).unwrap();
    assert!(naive.multi_target_oom_count > 0);
    assert_eq!(oracle.multi_target_oom_count, 0);
    assert!(oracle.first_attempts().all(|b| b.estimated_memory_gb.is_some()));
}

#[test]
fn tighter_cutoffs_give_smaller_builds() {
    let w = workload();
    let cluster = ClusterConfig::default();
    let exp = ExperimentConfig::default();
    let loose = run_experiment(Policy::Oracle, &w, &cluster, &BatchingConfig::default(), None, &exp).unwrap();
    let mut tight_cfg = BatchingConfig::default();
    tight_cfg.memory_cutoff_gb.high /= 2.0;
    tight_cfg.memory_cutoff_gb.medium /= 2.0;
    tight_cfg.memory_cutoff_gb.low /= 2.0;
    let tight = run_experiment(Policy::Oracle, &w, &cluster, &tight_cfg, None, &exp).unwrap();
    assert!(tight.build_count > loose.build_count);
    assert!(tight.mean_batch_size < loose.mean_batch_size);
}

#[test]
fn retries_only_follow_failures() {
    let w = workload();
    let m = run_experiment(Policy::Naive(900), &w, &ClusterConfig::default(), &BatchingConfig::default(), None, &ExperimentConfig::default())
        .unwrap();
    let failed: std::collections::HashSet<&str> = m
        .builds
        .iter()
        .filter(|b| matches!(b.outcome, Outcome::Oom | Outcome::DeadlineExceeded))
        .map(|b| b.build_id.as_str())
        .collect();
    assert!(m.retries > 0);
    for b in m.builds.iter().filter(|b| b.attempt > 0) {
        assert!(failed.contains(b.parent_id.as_deref().unwrap()));
    }
    assert!(m.by_reason.contains_key(BatchSizeReason::MaxTargets.as_str()));
}
