//! A synthetic build cluster with a hidden ground-truth cost oracle.
//!
//! Workloads are repositories of projects, packages and targets. Each
//! package depends on a set of dependencies drawn from its project's pool
//! and a repository-wide common pool; each target adds one private
//! dependency. A build's memory is a base cost plus the cost of the union of
//! its dependencies, so targets that share packages share memory.
//!
//! Execution uses a fluid queueing model: a build's executor demand is its
//! total service time over a nominal parallel wall time. Demand above the
//! concurrent-executor limit queues and stretches execution time, which is
//! how Type I deadline-exceeded builds arise; long critical paths give
//! Type II.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::batcher::{
    retry_policy, BatchingConfig, EstimateError, Estimator, EstimatorKind, RetryAction,
    MAX_RETRY_DEPTH,
};
use crate::error::{Error, Result};
use crate::estimator::ModelSet;
use crate::features::{fnv1a64, FeatureSpec};
use crate::grouping::ExecutorRules;
use crate::model::{
    BatchSizeReason, Build, BuildFlags, ContextKind, DeType, ExecutionContext, ExecutionStats, Outcome,
    Priority, RequestInfo, Target,
};
use crate::pipeline::{
    memory_label, occupancy_label, train_all, LogRecord, LogRequest, PipelineConfig, TrainReport, QUERY_COMMAND,
    SECONDS_PER_DAY,
};
use crate::service::{
    handle_stream, BatchPlanner, BuildCreator, EnqueueRequest, EstimatorPlanner, FixedSizePlanner,
    RecordingBackend, ServiceDeps,
};

/// Shape and cost distributions of a generated repository.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadParams {
    pub targets_per_package: f64,
    pub packages_per_project: f64,
    pub project_pool_deps: usize,
    pub common_pool_deps: usize,
    pub project_deps_per_package: usize,
    pub common_deps_per_package: usize,
    pub dep_cost_median_gb: f64,
    pub common_dep_cost_median_gb: f64,
    pub dep_cost_sigma: f64,
    pub target_cost_median_gb: f64,
    pub target_cost_sigma: f64,
    pub heavy_target_fraction: f64,
    pub heavy_target_gb: (f64, f64),
    pub base_memory_gb: f64,
    pub gpu_fraction: f64,
    pub mac_fraction: f64,
    pub test_fraction: f64,
    pub actions_median: f64,
    pub actions_sigma: f64,
    pub test_action_s_median: f64,
    pub build_action_s_median: f64,
    pub action_s_sigma: f64,
    pub action_memory_gb: (f64, f64),
    pub max_target_demand_esu: f64,
    pub critical_path_median_s: f64,
    pub critical_path_sigma: f64,
    pub long_chain_fraction: f64,
    pub long_chain_s: (f64, f64),
    /// Log-scale spread of per-project and per-package multipliers on
    /// private memory.
    pub project_scale_sigma: f64,
    pub package_scale_sigma: f64,
    /// Log-scale spread of a per-package multiplier on service time.
    pub service_scale_sigma: f64,
    /// Wall time of an unqueued build; demand = service time / this.
    pub nominal_exec_s: f64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams {
            targets_per_package: 6.0,
            packages_per_project: 40.0,
            project_pool_deps: 80,
            common_pool_deps: 400,
            project_deps_per_package: 6,
            common_deps_per_package: 2,
            dep_cost_median_gb: 0.012,
            common_dep_cost_median_gb: 0.006,
            dep_cost_sigma: 0.8,
            target_cost_median_gb: 0.004,
            target_cost_sigma: 0.6,
            heavy_target_fraction: 0.0005,
            heavy_target_gb: (6.0, 16.0),
            base_memory_gb: 0.5,
            gpu_fraction: 0.03,
            mac_fraction: 0.03,
            test_fraction: 0.6,
            actions_median: 8.0,
            actions_sigma: 0.5,
            test_action_s_median: 300.0,
            build_action_s_median: 50.0,
            action_s_sigma: 0.6,
            action_memory_gb: (0.5, 3.0),
            max_target_demand_esu: 300.0,
            critical_path_median_s: 240.0,
            critical_path_sigma: 0.6,
            long_chain_fraction: 0.0002,
            long_chain_s: (5500.0, 8000.0),
            project_scale_sigma: 0.5,
            package_scale_sigma: 0.7,
            service_scale_sigma: 0.25,
            nominal_exec_s: 3000.0,
        }
    }
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("gpu_fraction", self.gpu_fraction),
            ("mac_fraction", self.mac_fraction),
            ("test_fraction", self.test_fraction),
            ("heavy_target_fraction", self.heavy_target_fraction),
            ("long_chain_fraction", self.long_chain_fraction),
        ];
        for (name, f) in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.gpu_fraction + self.mac_fraction > 1.0 {
            return Err(Error::Config("gpu_fraction + mac_fraction exceeds 1".into()));
        }
        if self.targets_per_package < 1.0 || self.packages_per_project < 1.0 {
            return Err(Error::Config("package and project sizes must be at least 1".into()));
        }
        if self.project_pool_deps == 0 || self.common_pool_deps == 0 {
            return Err(Error::Config("dependency pools must be non-empty".into()));
        }
        if !(self.nominal_exec_s > 0.0) || !(self.max_target_demand_esu > 0.0) {
            return Err(Error::Config("nominal_exec_s and max_target_demand_esu must be positive".into()));
        }
        for (lo, hi) in [self.heavy_target_gb, self.action_memory_gb, self.long_chain_s] {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::Config("ranges must satisfy 0 <= lo <= hi".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct TargetCost {
    project: u32,
    package: u32,
    own_dep: u32,
    service_esu_s: f64,
    critical_path_s: f64,
}

/// Ground truth for one workload. Immutable once generated.
#[derive(Debug, Clone)]
pub struct CostOracle {
    base_memory_gb: f64,
    nominal_exec_s: f64,
    dep_cost_gb: Vec<f64>,
    package_deps: Vec<Vec<u32>>,
    targets: Vec<TargetCost>,
    index: HashMap<String, usize>,
}

impl CostOracle {
    fn indices(&self, targets: &[Target]) -> Result<Vec<usize>> {
        let mut idx = targets
            .iter()
            .map(|t| self.index.get(&t.label).copied().ok_or_else(|| Error::UnknownTarget(t.label.clone())))
            .collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        idx.dedup();
        Ok(idx)
    }

    fn memory_of(&self, idx: &[usize]) -> f64 {
        let mut seen = vec![0u64; self.dep_cost_gb.len().div_ceil(64)];
        let mut total = self.base_memory_gb;
        let mut add = |d: u32| {
            let (w, b) = (d as usize / 64, d % 64);
            if seen[w] & (1 << b) == 0 {
                seen[w] |= 1 << b;
                total += self.dep_cost_gb[d as usize];
            }
        };
        for &i in idx {
            let t = &self.targets[i];
            for &d in &self.package_deps[t.package as usize] {
                add(d);
            }
            add(t.own_dep);
        }
        total
    }

    fn service_of(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.targets[i].service_esu_s).sum()
    }

    fn critical_path_of(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.targets[i].critical_path_s).fold(0.0, f64::max)
    }

    pub fn base_memory_gb(&self) -> f64 {
        self.base_memory_gb
    }

    pub fn nominal_exec_s(&self) -> f64 {
        self.nominal_exec_s
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    /// Base cost plus the cost of every distinct dependency.
    pub fn true_memory(&self, targets: &[Target]) -> Result<f64> {
        Ok(self.memory_of(&self.indices(targets)?))
    }

    /// Executor demand in ESU when nothing queues.
    pub fn true_occupancy(&self, targets: &[Target]) -> Result<f64> {
        Ok(self.service_of(&self.indices(targets)?) / self.nominal_exec_s)
    }

    pub fn service_time(&self, targets: &[Target]) -> Result<f64> {
        Ok(self.service_of(&self.indices(targets)?))
    }

    pub fn critical_path(&self, targets: &[Target]) -> Result<f64> {
        Ok(self.critical_path_of(&self.indices(targets)?))
    }

    fn project_of(&self, label: &str) -> Option<u32> {
        self.index.get(label).map(|&i| self.targets[i].project)
    }
}

/// A generated repository: targets in generation order plus their oracle.
#[derive(Debug, Clone)]
pub struct Workload {
    pub seed: u64,
    pub targets: Vec<Target>,
    pub oracle: Arc<CostOracle>,
}

impl Workload {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// One JSON target per line.
    pub fn targets_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.targets {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn lognormal(median: f64, sigma: f64) -> LogNormal<f64> {
    LogNormal::new(median.max(f64::MIN_POSITIVE).ln(), sigma).expect("sigma is finite and non-negative")
}

/// Draws a count with the given mean, at least 1.
fn count_with_mean<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let u: f64 = rng.random::<f64>().max(1e-12);
    1 + ((mean - 1.0).max(0.0) * -u.ln()).round() as usize
}

const AREAS: [&str; 6] = ["core", "api", "lib", "tools", "ui", "server"];

pub fn generate_workload(seed: u64, n_targets: usize, params: &WorkloadParams) -> Result<Workload> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dep_cost = lognormal(params.dep_cost_median_gb, params.dep_cost_sigma);
    let common_cost = lognormal(params.common_dep_cost_median_gb, params.dep_cost_sigma);
    let target_cost = lognormal(params.target_cost_median_gb, params.target_cost_sigma);
    let actions = lognormal(params.actions_median, params.actions_sigma);
    let test_action = lognormal(params.test_action_s_median, params.action_s_sigma);
    let build_action = lognormal(params.build_action_s_median, params.action_s_sigma);
    let chain = lognormal(params.critical_path_median_s, params.critical_path_sigma);

    let mut dep_cost_gb: Vec<f64> = (0..params.common_pool_deps).map(|_| common_cost.sample(&mut rng)).collect();
    let mut package_deps = Vec::new();
    let mut targets = Vec::with_capacity(n_targets);
    let mut costs = Vec::with_capacity(n_targets);

    let mut project = 0u32;
    while targets.len() < n_targets {
        let pool_start = dep_cost_gb.len() as u32;
        dep_cost_gb.extend((0..params.project_pool_deps).map(|_| dep_cost.sample(&mut rng)));
        let pool: Vec<u32> = (pool_start..pool_start + params.project_pool_deps as u32).collect();
        let common: Vec<u32> = (0..params.common_pool_deps as u32).collect();
        let project_scale = lognormal(1.0, params.project_scale_sigma).sample(&mut rng);
        let packages = count_with_mean(&mut rng, params.packages_per_project);
        for k in 0..packages {
            if targets.len() >= n_targets {
                break;
            }
            let mut path = format!("p{project:03}/{}/m{:02}", AREAS[k % AREAS.len()], k / AREAS.len());
            if k % 3 == 0 {
                path.push_str("/impl");
            }
            let mut deps: Vec<u32> = pool
                .choose_multiple(&mut rng, params.project_deps_per_package.min(pool.len()))
                .copied()
                .collect();
            deps.extend(common.choose_multiple(&mut rng, params.common_deps_per_package.min(common.len())));
            deps.sort_unstable();
            let package = package_deps.len() as u32;
            package_deps.push(deps);

            let scale = project_scale * lognormal(1.0, params.package_scale_sigma).sample(&mut rng);
            let service_scale = lognormal(1.0, params.service_scale_sigma).sample(&mut rng);
            let n = count_with_mean(&mut rng, params.targets_per_package);
            for j in 0..n {
                if targets.len() >= n_targets {
                    break;
                }
                let roll: f64 = rng.random();
                let (rule_kind, tags): (&str, BTreeSet<String>) = if roll < params.gpu_fraction {
                    ("cc_test", BTreeSet::from(["requires-gpu".to_string()]))
                } else if roll < params.gpu_fraction + params.mac_fraction {
                    ("ios_application", BTreeSet::new())
                } else if rng.random_bool(params.test_fraction) {
                    (*["java_test", "cc_test", "py_test"].choose(&mut rng).expect("non-empty"), BTreeSet::new())
                } else {
                    (*["java_library", "cc_library", "go_binary"].choose(&mut rng).expect("non-empty"), BTreeSet::new())
                };
                let is_test = rule_kind.ends_with("_test");
                let name = format!("{}_{j}", if is_test { "test" } else { "lib" });
                let target = Target::parse(&format!("//{path}:{name}"), tags, rule_kind)?;

                let own_dep = dep_cost_gb.len() as u32;
                let own = if rng.random_bool(params.heavy_target_fraction) {
                    rng.random_range(params.heavy_target_gb.0..=params.heavy_target_gb.1)
                } else {
                    target_cost.sample(&mut rng) * scale
                };
                dep_cost_gb.push(own);

                let n_actions = actions.sample(&mut rng).round().max(1.0);
                let per_action_s = if is_test { test_action.sample(&mut rng) } else { build_action.sample(&mut rng) };
                let esu = 1.0 + rng.random_range(params.action_memory_gb.0..=params.action_memory_gb.1) / 2.5;
                let service = (n_actions * per_action_s * esu * service_scale)
                    .min(params.max_target_demand_esu * params.nominal_exec_s);
                let critical_path_s = if rng.random_bool(params.long_chain_fraction) {
                    rng.random_range(params.long_chain_s.0..=params.long_chain_s.1)
                } else {
                    chain.sample(&mut rng).min(params.long_chain_s.0 * 0.9)
                };
                costs.push(TargetCost { project, package, own_dep, service_esu_s: service, critical_path_s });
                targets.push(target);
            }
        }
        project += 1;
    }

    let index = targets.iter().enumerate().map(|(i, t)| (t.label.clone(), i)).collect();
    let oracle = CostOracle {
        base_memory_gb: params.base_memory_gb,
        nominal_exec_s: params.nominal_exec_s,
        dep_cost_gb,
        package_deps,
        targets: costs,
        index,
    };
    Ok(Workload { seed, targets, oracle: Arc::new(oracle) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub worker_memory_gb: f64,
    pub concurrent_executor_limit: f64,
    pub deadline_s: f64,
    pub cache_hit_rate: f64,
    pub gc_probability: f64,
    /// Upper bound of the pre-GC peak as a multiple of the live heap.
    pub max_pre_gc_inflation: f64,
    pub min_exec_s: f64,
    /// Fraction of work still uncached on each retry attempt.
    pub retry_cache_factor: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            worker_memory_gb: 13.0,
            concurrent_executor_limit: 600.0,
            deadline_s: 5400.0,
            cache_hit_rate: 0.05,
            gc_probability: 0.8,
            max_pre_gc_inflation: 1.5,
            min_exec_s: 30.0,
            retry_cache_factor: 0.5,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.worker_memory_gb > 0.0 && self.concurrent_executor_limit > 0.0 && self.deadline_s > 0.0) {
            return Err(Error::Config("cluster limits must be positive".into()));
        }
        for (name, f) in [
            ("cache_hit_rate", self.cache_hit_rate),
            ("gc_probability", self.gc_probability),
            ("retry_cache_factor", self.retry_cache_factor),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.max_pre_gc_inflation >= 1.0) || !(self.min_exec_s > 0.0) {
            return Err(Error::Config("max_pre_gc_inflation must be >= 1 and min_exec_s > 0".into()));
        }
        Ok(())
    }
}

fn build_seed(cfg: &ClusterConfig, targets: &[Target], attempt: u32) -> u64 {
    let mut labels: Vec<&str> = targets.iter().map(|t| t.label.as_str()).collect();
    labels.sort_unstable();
    let key = fnv1a64(labels.join("\n").as_bytes());
    key ^ cfg.seed.rotate_left(17) ^ u64::from(attempt).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs a build on the simulated cluster. Randomness (cache hit, GC, heap
/// inflation) is keyed on the target set, attempt and cluster seed, so the
/// same build always behaves the same way.
pub fn execute(oracle: &CostOracle, cfg: &ClusterConfig, build: &Build, attempt: u32) -> Result<ExecutionStats> {
    let idx = oracle.indices(&build.targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(build_seed(cfg, &build.targets, attempt));
    let memory = oracle.memory_of(&idx);
    let cached = rng.random_bool(cfg.cache_hit_rate);
    let remaining = cfg.retry_cache_factor.powi(attempt as i32);
    let (service, chain) = if cached {
        (0.0, 0.0)
    } else {
        (oracle.service_of(&idx) * remaining, oracle.critical_path_of(&idx) * remaining)
    };
    let demand = service / oracle.nominal_exec_s;
    let stretched = if service > 0.0 { service / demand.min(cfg.concurrent_executor_limit) } else { 0.0 };
    let mut exec_time_s = chain.max(stretched).max(cfg.min_exec_s);
    let mut service_time = service;

    let gc_occurred = rng.random_bool(cfg.gc_probability);
    let peak_heap_gb = memory * rng.random_range(1.0..=cfg.max_pre_gc_inflation);

    let (outcome, de_type) = if memory > cfg.worker_memory_gb {
        (Outcome::Oom, None)
    } else if exec_time_s > cfg.deadline_s {
        // Killed at the deadline; the work done so far scales with it.
        service_time *= cfg.deadline_s / exec_time_s;
        exec_time_s = cfg.deadline_s;
        let kind = if demand > cfg.concurrent_executor_limit { DeType::TypeI } else { DeType::TypeII };
        (Outcome::DeadlineExceeded, Some(kind))
    } else {
        (Outcome::Ok, None)
    };
    Ok(ExecutionStats {
        build_id: build.id.clone(),
        peak_heap_gb,
        peak_post_gc_heap_gb: gc_occurred.then_some(memory),
        gc_occurred,
        exec_time_s,
        total_executor_service_time_esu_s: service_time,
        outcome,
        de_type,
    })
}

/// Estimator backed by the oracle itself.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    pub oracle: Arc<CostOracle>,
    pub kind: EstimatorKind,
}

impl Estimator for OracleEstimator {
    fn kind(&self) -> EstimatorKind {
        self.kind
    }

    fn estimate(&self, _: &RequestInfo, targets: &[Target]) -> Result<f64, EstimateError> {
        match self.kind {
            EstimatorKind::Memory => self.oracle.true_memory(targets),
            EstimatorKind::Occupancy => self.oracle.true_occupancy(targets),
        }
        .map_err(|e| EstimateError(e.to_string()))
    }
}

/// One executed build, first attempt or retry.
#[derive(Debug, Clone)]
pub struct ExecutedBuild {
    pub build: Build,
    pub stats: ExecutionStats,
    pub attempt: u32,
    pub parent: Option<String>,
}

/// Executes builds and applies the retry policy until nothing is left to
/// retry or the depth cap is reached. `rebatch` turns the targets of a
/// retry into new builds.
pub fn run_with_retries<E, R>(initial: Vec<Build>, mut execute: E, mut rebatch: R) -> Result<Vec<ExecutedBuild>>
where
    E: FnMut(&Build, u32) -> Result<ExecutionStats>,
    R: FnMut(&Build, Vec<Target>) -> Result<Vec<Build>>,
{
    let mut queue: VecDeque<(Build, u32, Option<String>)> = initial.into_iter().map(|b| (b, 0, None)).collect();
    let mut done = Vec::new();
    while let Some((build, attempt, parent)) = queue.pop_front() {
        let stats = execute(&build, attempt)?;
        if attempt < MAX_RETRY_DEPTH {
            let parts = match retry_policy(&build, &stats) {
                RetryAction::SplitAndRebatch(a, b) => vec![a, b],
                RetryAction::RebatchSame(all) => vec![all],
                RetryAction::GiveUp => vec![],
            };
            for part in parts {
                for child in rebatch(&build, part)? {
                    queue.push_back((child, attempt + 1, Some(build.id.clone())));
                }
            }
        }
        done.push(ExecutedBuild { build, stats, attempt, parent });
    }
    Ok(done)
}

/// Checks that every retried build's targets reappear exactly once across
/// its children, and that nothing else was retried.
pub fn check_retry_conservation(executed: &[ExecutedBuild]) -> Vec<String> {
    let mut children: HashMap<&str, Vec<&ExecutedBuild>> = HashMap::new();
    for e in executed {
        if let Some(p) = &e.parent {
            children.entry(p.as_str()).or_default().push(e);
        }
    }
    let mut violations = Vec::new();
    for e in executed {
        let kids = children.get(e.build.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let expect_retry = e.attempt < MAX_RETRY_DEPTH
            && !matches!(retry_policy(&e.build, &e.stats), RetryAction::GiveUp);
        if !expect_retry {
            if !kids.is_empty() {
                violations.push(format!("build {} was retried but should not have been", e.build.id));
            }
            continue;
        }
        let mut want: Vec<&str> = e.build.targets.iter().map(|t| t.label.as_str()).collect();
        let mut got: Vec<&str> = kids.iter().flat_map(|k| k.build.targets.iter().map(|t| t.label.as_str())).collect();
        want.sort_unstable();
        got.sort_unstable();
        if want != got {
            violations.push(format!(
                "retries of build {} cover {} targets, expected {}",
                e.build.id,
                got.len(),
                want.len()
            ));
        }
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    Naive(usize),
    Btbs,
    Oracle,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "btbs" => Ok(Policy::Btbs),
            "oracle" => Ok(Policy::Oracle),
            _ => s
                .strip_prefix("naive")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|n| *n > 0)
                .map(Policy::Naive)
                .ok_or_else(|| Error::InvalidValue(format!("unknown policy {s:?}; expected naiveN, btbs or oracle"))),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Naive(n) => write!(f, "naive{n}"),
            Policy::Btbs => f.write_str("btbs"),
            Policy::Oracle => f.write_str("oracle"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Number of client requests the workload is split into, by project.
    pub requests: usize,
    /// Targets per streamed message.
    pub message_size: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { requests: 8, message_size: 1000, seed: 0 }
    }
}

const USERS: usize = 60;
const TOOLS: [(&str, Priority); 4] = [
    ("presubmit", Priority::High),
    ("postsubmit", Priority::Medium),
    ("adhoc", Priority::High),
    ("coverage", Priority::Low),
];

fn random_info<R: Rng>(rng: &mut R, query_fraction: f64) -> RequestInfo {
    let (tool, priority) = *TOOLS.choose(rng).expect("non-empty");
    let user = rng.random_range(0..USERS);
    let mut flags = vec![format!("--jobs={}", [100, 200, 500].choose(rng).expect("non-empty"))];
    if rng.random_bool(0.5) {
        flags.push("--keep_going".into());
    }
    if rng.random_bool(0.3) {
        flags.push(format!("--runs_per_test={}", [1, 3].choose(rng).expect("non-empty")));
    }
    if rng.random_bool(0.3) {
        flags.push(format!("--cache_test_results={}", ["yes", "no"].choose(rng).expect("non-empty")));
    }
    let command = if rng.random_bool(query_fraction) {
        QUERY_COMMAND
    } else if rng.random_bool(0.65) {
        "test"
    } else {
        "build"
    };
    let context = ExecutionContext {
        kind: if rng.random_bool(0.5) { ContextKind::Workspace } else { ContextKind::Revision },
        id: format!("{:016x}", rng.next_u64()),
    };
    let mut info = RequestInfo::new(context, BuildFlags::parse_args(&flags).expect("generated flags are valid"), priority);
    info.command = command.into();
    info.user = format!("user{user:02}");
    info.product_area = format!("area{}", user % 8);
    info.tool_tag = tool.into();
    info
}

/// Splits the workload into client requests, whole projects at a time.
pub fn split_requests(workload: &Workload, cfg: &ExperimentConfig) -> Vec<(RequestInfo, Vec<Target>)> {
    if workload.is_empty() || cfg.requests == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_EED0_F4E9);
    let mut by_project: BTreeMap<u32, Vec<Target>> = BTreeMap::new();
    for t in &workload.targets {
        let p = workload.oracle.project_of(&t.label).expect("workload targets are in the oracle");
        by_project.entry(p).or_default().push(t.clone());
    }
    let mut projects: Vec<Vec<Target>> = by_project.into_values().collect();
    projects.shuffle(&mut rng);
    let mut requests: Vec<Vec<Target>> = vec![Vec::new(); cfg.requests.min(projects.len())];
    let n = requests.len();
    for (i, p) in projects.into_iter().enumerate() {
        requests[i % n].extend(p);
    }
    requests
        .into_iter()
        .map(|mut targets| {
            targets.shuffle(&mut rng);
            let mut info = random_info(&mut rng, 0.0);
            info.command = "test".into();
            (info, targets)
        })
        .collect()
}

/// One row per executed build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildRecord {
    pub build_id: String,
    pub parent_id: Option<String>,
    pub attempt: u32,
    pub priority: Priority,
    pub reason: BatchSizeReason,
    pub target_count: usize,
    pub outcome: Outcome,
    pub de_type: Option<DeType>,
    pub memory_gb: f64,
    pub occupancy_esu: f64,
    pub estimated_memory_gb: Option<f64>,
    pub estimated_occupancy_esu: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasonStats {
    pub build_count: usize,
    pub mean_batch_size: f64,
    pub oom_count: usize,
    pub type_i_de_count: usize,
    pub type_ii_de_count: usize,
    pub mean_memory_gb: f64,
    pub mean_occupancy_esu: f64,
}

/// Rates are over first-attempt builds; retries are counted separately.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub policy: String,
    pub n_targets: usize,
    pub requests: usize,
    pub build_count: usize,
    pub executed_builds: usize,
    pub retries: usize,
    pub oom_count: usize,
    pub multi_target_oom_count: usize,
    pub oom_rate: f64,
    pub type_i_de_count: usize,
    pub type_ii_de_count: usize,
    pub de_rate_type_i: f64,
    pub de_rate_type_ii: f64,
    pub mean_batch_size: f64,
    pub by_reason: BTreeMap<String, ReasonStats>,
    pub invariant_violations: Vec<String>,
    pub builds: Vec<BuildRecord>,
}

impl Metrics {
    pub fn first_attempts(&self) -> impl Iterator<Item = &BuildRecord> {
        self.builds.iter().filter(|b| b.attempt == 0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn aggregate(&mut self) {
        let first: Vec<&BuildRecord> = self.builds.iter().filter(|b| b.attempt == 0).collect();
        self.build_count = first.len();
        self.executed_builds = self.builds.len();
        self.retries = self.builds.len() - first.len();
        let ooms: Vec<&&BuildRecord> = first.iter().filter(|b| b.outcome == Outcome::Oom).collect();
        self.oom_count = ooms.len();
        self.multi_target_oom_count = ooms.iter().filter(|b| b.target_count > 1).count();
        self.type_i_de_count = first.iter().filter(|b| b.de_type == Some(DeType::TypeI)).count();
        self.type_ii_de_count = first.iter().filter(|b| b.de_type == Some(DeType::TypeII)).count();
        let n = first.len().max(1) as f64;
        self.oom_rate = self.oom_count as f64 / n;
        self.de_rate_type_i = self.type_i_de_count as f64 / n;
        self.de_rate_type_ii = self.type_ii_de_count as f64 / n;
        self.mean_batch_size = first.iter().map(|b| b.target_count as f64).sum::<f64>() / n;

        let mut by_reason: BTreeMap<String, ReasonStats> = BTreeMap::new();
        for b in &first {
            let r = by_reason.entry(b.reason.as_str().to_string()).or_default();
            r.build_count += 1;
            r.mean_batch_size += b.target_count as f64;
            r.oom_count += usize::from(b.outcome == Outcome::Oom);
            r.type_i_de_count += usize::from(b.de_type == Some(DeType::TypeI));
            r.type_ii_de_count += usize::from(b.de_type == Some(DeType::TypeII));
            r.mean_memory_gb += b.memory_gb;
            r.mean_occupancy_esu += b.occupancy_esu;
        }
        for r in by_reason.values_mut() {
            let n = r.build_count as f64;
            r.mean_batch_size /= n;
            r.mean_memory_gb /= n;
            r.mean_occupancy_esu /= n;
        }
        self.by_reason = by_reason;
    }
}

type EstimatorPair = (Arc<dyn Estimator>, Arc<dyn Estimator>);

fn estimators_for(policy: Policy, workload: &Workload, models: Option<&ModelSet>) -> Option<EstimatorPair> {
    match (policy, models) {
        (Policy::Oracle, _) => Some((
            Arc::new(OracleEstimator { oracle: workload.oracle.clone(), kind: EstimatorKind::Memory }),
            Arc::new(OracleEstimator { oracle: workload.oracle.clone(), kind: EstimatorKind::Occupancy }),
        )),
        (_, Some(m)) => Some((Arc::new(m.memory_estimator()), Arc::new(m.occupancy_estimator()))),
        (_, None) => None,
    }
}

/// Streams the workload through the enqueue service under `policy`,
/// executes every build including retries, and aggregates the results.
/// `btbs` without models degrades to estimator-error fallback batches.
pub fn run_experiment(
    policy: Policy,
    workload: &Workload,
    cluster: &ClusterConfig,
    batching: &BatchingConfig,
    models: Option<&ModelSet>,
    exp: &ExperimentConfig,
) -> Result<Metrics> {
    cluster.validate()?;
    batching.validate()?;
    let estimators = estimators_for(policy, workload, models);
    let planner: Arc<dyn BatchPlanner> = match (policy, &estimators) {
        (Policy::Naive(n), _) => Arc::new(FixedSizePlanner(n)),
        (_, Some((m, o))) => Arc::new(EstimatorPlanner { config: batching.clone(), memory: m.clone(), occupancy: o.clone() }),
        (_, None) => Arc::new(EstimatorPlanner::from_models(batching.clone(), None)),
    };
    let backend = Arc::new(RecordingBackend::new(exp.seed));
    let deps = ServiceDeps { rules: ExecutorRules::default(), planner: planner.clone(), creator: backend.clone() };
    let requests = split_requests(workload, exp);
    let mut metrics = Metrics {
        policy: policy.to_string(),
        n_targets: workload.len(),
        requests: requests.len(),
        ..Default::default()
    };

    for (info, targets) in &requests {
        let chunk = exp.message_size.max(1);
        let messages = targets.chunks(chunk).enumerate().map(|(i, c)| {
            let mut m = EnqueueRequest { targets: c.to_vec(), ..Default::default() };
            if i == 0 {
                m.context = Some(info.context.clone());
                m.flags = Some(info.flags.clone());
                m.priority = Some(info.priority);
                m.command = Some(info.command.clone());
                m.user = Some(info.user.clone());
                m.product_area = Some(info.product_area.clone());
                m.tool_tag = Some(info.tool_tag.clone());
            }
            m
        });
        handle_stream(messages, &deps)?;
        let builds = backend.take_builds();

        let mut want: Vec<&str> = targets.iter().map(|t| t.label.as_str()).collect();
        want.sort_unstable();
        want.dedup();
        let mut got: Vec<&str> = builds.iter().flat_map(|b| b.targets.iter().map(|t| t.label.as_str())).collect();
        got.sort_unstable();
        if want != got {
            metrics.invariant_violations.push(format!(
                "request {}: builds cover {} targets, request had {}",
                info.context.id,
                got.len(),
                want.len()
            ));
        }

        let executed = run_with_retries(
            builds,
            |b, attempt| execute(&workload.oracle, cluster, b, attempt),
            |_, part| {
                for batch in planner.plan(&part, info) {
                    backend.create_build(batch.targets, info, batch.reason)?;
                }
                Ok(backend.take_builds())
            },
        )?;
        metrics.invariant_violations.extend(check_retry_conservation(&executed));

        for e in executed {
            let (est_mem, est_occ) = match &estimators {
                Some((m, o)) => (m.estimate(info, &e.build.targets).ok(), o.estimate(info, &e.build.targets).ok()),
                None => (None, None),
            };
            metrics.builds.push(BuildRecord {
                build_id: e.build.id.clone(),
                parent_id: e.parent,
                attempt: e.attempt,
                priority: e.build.priority,
                reason: e.build.reason,
                target_count: e.build.targets.len(),
                outcome: e.stats.outcome,
                de_type: e.stats.de_type,
                memory_gb: memory_label(&e.stats),
                occupancy_esu: occupancy_label(&e.stats)?.value(),
                estimated_memory_gb: est_mem,
                estimated_occupancy_esu: est_occ,
            });
        }
    }
    metrics.aggregate();
    Ok(metrics)
}

/// A memory regression applied to every build finishing at or after
/// `since_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryRegression {
    pub since_s: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogParams {
    pub builds: usize,
    pub days: f64,
    /// Timestamp of the end of the log; builds finish in `[now - days, now)`.
    pub now_s: f64,
    pub query_fraction: f64,
    pub seed: u64,
    pub regression: Option<MemoryRegression>,
}

impl Default for LogParams {
    fn default() -> Self {
        LogParams {
            builds: 10_000,
            days: 17.0,
            now_s: 17.0 * SECONDS_PER_DAY,
            query_fraction: 0.05,
            seed: 0,
            regression: None,
        }
    }
}

fn log_uniform_len<R: Rng>(rng: &mut R, max: usize) -> usize {
    let max = max.max(1) as f64;
    (rng.random_range(0.0..=max.ln()).exp().round() as usize).clamp(1, max as usize)
}

/// Prior build history: a mix of contiguous slices of the sorted
/// repository, single-project builds and sparse samples, each cut to one
/// executor group. Sizes are drawn half log-uniform, half uniform, up to 900.
pub fn generate_logs(workload: &Workload, cluster: &ClusterConfig, params: &LogParams) -> Result<Vec<LogRecord>> {
    cluster.validate()?;
    if workload.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x1065_0000);
    let rules = ExecutorRules::default();
    let mut sorted = workload.targets.clone();
    sorted.sort();
    let mut by_project: BTreeMap<u32, Vec<Target>> = BTreeMap::new();
    for t in &sorted {
        by_project.entry(workload.oracle.project_of(&t.label).expect("known target")).or_default().push(t.clone());
    }
    let projects: Vec<Vec<Target>> = by_project.into_values().collect();
    let backend = RecordingBackend::new(params.seed);

    let mut records = Vec::with_capacity(params.builds);
    for _ in 0..params.builds {
        let finished_at_s = params.now_s - rng.random_range(0.0..params.days * SECONDS_PER_DAY).max(1e-3);
        let info = random_info(&mut rng, params.query_fraction);
        let want = if rng.random_bool(0.5) { log_uniform_len(&mut rng, 900) } else { rng.random_range(1..=900) };
        let roll: f64 = rng.random();
        let candidates: Vec<Target> = if roll < 0.4 {
            let len = (want + want / 4).min(sorted.len());
            let start = rng.random_range(0..=sorted.len() - len);
            sorted[start..start + len].to_vec()
        } else if roll < 0.75 {
            projects.choose(&mut rng).expect("non-empty").clone()
        } else {
            let rate = rng.random_range(0.002f64.ln()..0.05f64.ln()).exp();
            let picked: Vec<Target> = sorted.iter().filter(|_| rng.random_bool(rate)).cloned().collect();
            if picked.is_empty() {
                vec![sorted.choose(&mut rng).expect("non-empty").clone()]
            } else {
                picked
            }
        };
        let groups: Vec<Vec<Target>> = rules.group_and_sort(&candidates).into_values().collect();
        let total: usize = groups.iter().map(Vec::len).sum();
        let mut pick = rng.random_range(0..total);
        let group = groups
            .iter()
            .find(|g| {
                if pick < g.len() {
                    true
                } else {
                    pick -= g.len();
                    false
                }
            })
            .expect("pick is within total");
        let len = want.min(group.len());
        let start = rng.random_range(0..=group.len() - len);
        let targets = group[start..start + len].to_vec();

        let build = Build {
            id: backend.next_id(),
            context: info.context.clone(),
            flags: info.flags.clone(),
            targets: targets.clone(),
            reason: BatchSizeReason::AllRemainingTargets,
            priority: info.priority,
        };
        let mut stats = execute(&workload.oracle, cluster, &build, 0)?;
        if info.command == QUERY_COMMAND {
            stats.peak_heap_gb = workload.oracle.base_memory_gb;
            stats.peak_post_gc_heap_gb = stats.gc_occurred.then_some(workload.oracle.base_memory_gb);
            stats.total_executor_service_time_esu_s = 0.0;
            stats.exec_time_s = cluster.min_exec_s;
            stats.outcome = Outcome::Ok;
            stats.de_type = None;
        }
        if let Some(reg) = params.regression {
            if finished_at_s >= reg.since_s {
                stats.peak_heap_gb *= reg.factor;
                stats.peak_post_gc_heap_gb = stats.peak_post_gc_heap_gb.map(|m| m * reg.factor);
                if memory_label(&stats) > cluster.worker_memory_gb && stats.outcome != Outcome::Oom {
                    stats.outcome = Outcome::Oom;
                    stats.de_type = None;
                }
            }
        }
        records.push(LogRecord { request: LogRequest { info, targets }, stats, finished_at_s });
    }
    records.sort_by(|a, b| a.finished_at_s.total_cmp(&b.finished_at_s));
    Ok(records)
}

/// One JSON record per line.
pub fn logs_jsonl(records: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Generates prior-build logs for `workload` and trains a model set on them,
/// the same way the `train` command does on real logs.
pub fn train_on_simulated_logs(
    workload: &Workload,
    cluster: &ClusterConfig,
    logs: &LogParams,
    pipeline: &PipelineConfig,
) -> Result<(ModelSet, TrainReport)> {
    let records = generate_logs(workload, cluster, logs)?;
    let trained = train_all(&records, logs.now_s, &FeatureSpec::default(), pipeline)?;
    Ok((ModelSet::from_trained(&trained), trained.report))
}
