//! Slicing a sorted target group into builds.
//!
//! Each iteration takes the next `max_targets_per_batch` targets and shrinks
//! that prefix twice by binary search: first against the memory estimator,
//! then against the occupancy estimator. Both searches require the
//! estimators to be monotone in prefix length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchSizeReason, Build, ExecutionStats, Outcome, Priority, RequestInfo, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryCutoffs {
    pub high: f64,
    pub medium: f64,
    pub low: f64,
}

impl Default for MemoryCutoffs {
    fn default() -> Self {
        MemoryCutoffs { high: 7.0, medium: 9.0, low: 10.0 }
    }
}

impl MemoryCutoffs {
    pub fn for_priority(&self, p: Priority) -> f64 {
        match p {
            Priority::High => self.high,
            Priority::Medium => self.medium,
            Priority::Low => self.low,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchingConfig {
    pub max_targets_per_batch: usize,
    pub memory_cutoff_gb: MemoryCutoffs,
    pub occupancy_cutoff_esu: f64,
    pub fallback_batch_size: usize,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        BatchingConfig {
            max_targets_per_batch: 900,
            memory_cutoff_gb: MemoryCutoffs::default(),
            occupancy_cutoff_esu: 500.0,
            fallback_batch_size: 300,
        }
    }
}

impl BatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_targets_per_batch == 0 || self.fallback_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.fallback_batch_size > self.max_targets_per_batch {
            return Err(Error::Config(
                "fallback_batch_size must not exceed max_targets_per_batch".into(),
            ));
        }
        let c = &self.memory_cutoff_gb;
        if !(c.high > 0.0 && c.medium > 0.0 && c.low > 0.0 && self.occupancy_cutoff_esu > 0.0) {
            return Err(Error::Config("cutoffs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Memory,
    Occupancy,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct EstimateError(pub String);

/// Predicts the resource usage of a hypothetical build of `targets`.
///
/// Implementations must be monotone: for a fixed `info`, extending the
/// target list never lowers the estimate.
pub trait Estimator: Send + Sync {
    fn kind(&self) -> EstimatorKind;
    fn estimate(&self, info: &RequestInfo, targets: &[Target]) -> Result<f64, EstimateError>;
}

impl<E: Estimator + ?Sized> Estimator for &E {
    fn kind(&self) -> EstimatorKind {
        (**self).kind()
    }
    fn estimate(&self, info: &RequestInfo, targets: &[Target]) -> Result<f64, EstimateError> {
        (**self).estimate(info, targets)
    }
}

impl<E: Estimator + ?Sized> Estimator for std::sync::Arc<E> {
    fn kind(&self) -> EstimatorKind {
        (**self).kind()
    }
    fn estimate(&self, info: &RequestInfo, targets: &[Target]) -> Result<f64, EstimateError> {
        (**self).estimate(info, targets)
    }
}

/// An estimator that always fails; stands in for an unreachable model.
#[derive(Debug, Clone, Copy)]
pub struct Unavailable(pub EstimatorKind);

impl Estimator for Unavailable {
    fn kind(&self) -> EstimatorKind {
        self.0
    }
    fn estimate(&self, _: &RequestInfo, _: &[Target]) -> Result<f64, EstimateError> {
        Err(EstimateError(format!("{:?} model unavailable", self.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub targets: Vec<Target>,
    pub reason: BatchSizeReason,
}

/// Length of the longest prefix of `targets` whose estimate is strictly
/// below `cutoff`, floored at one.
///
/// The probe order is exactly the textbook binary search over the last
/// index `mid`, querying the prefix `targets[..=mid]`.
pub fn limit_batch_size_by_cutoff<E: Estimator + ?Sized>(
    targets: &[Target],
    cutoff: f64,
    est: &E,
    info: &RequestInfo,
) -> Result<usize, EstimateError> {
    debug_assert!(!targets.is_empty());
    search_prefix(targets.len(), cutoff, |len| est.estimate(info, &targets[..len]))
}

/// The search itself, over prefix lengths `1..=len`.
pub fn search_prefix<F>(len: usize, cutoff: f64, mut estimate: F) -> Result<usize, EstimateError>
where
    F: FnMut(usize) -> Result<f64, EstimateError>,
{
    if len == 0 {
        return Ok(0);
    }
    let mut low: isize = 0;
    let mut high: isize = len as isize - 1;
    let mut cutoff_index: isize = 0;
    while low <= high {
        let mid = (low + high) / 2;
        let value = estimate(mid as usize + 1)?;
        if value < cutoff {
            cutoff_index = mid;
            low = mid + 1;
        } else {
            high = mid - 1;
        }
    }
    Ok(cutoff_index as usize + 1)
}

/// Precedence: single target, then estimator errors, then the most recent
/// shrinking search (occupancy before memory), then the initial size.
pub fn assign_reason(
    initial_len: usize,
    after_mem_len: usize,
    after_occ_len: usize,
    remaining_len: usize,
    cfg: &BatchingConfig,
    mem_err: bool,
    occ_err: bool,
) -> BatchSizeReason {
    debug_assert!(after_occ_len <= after_mem_len && after_mem_len <= initial_len);
    if remaining_len == 1 {
        BatchSizeReason::OnlyOneTarget
    } else if mem_err {
        BatchSizeReason::MemoryEstimateError
    } else if occ_err {
        BatchSizeReason::OccupancyEstimateError
    } else if after_occ_len < after_mem_len {
        BatchSizeReason::MaxOccupancy
    } else if after_mem_len < initial_len {
        BatchSizeReason::MaxMemory
    } else if initial_len == cfg.max_targets_per_batch {
        BatchSizeReason::MaxTargets
    } else {
        BatchSizeReason::AllRemainingTargets
    }
}

/// Cuts one batch off the front of `remaining`; returns its length and reason.
pub fn next_batch<M, O>(
    remaining: &[Target],
    cfg: &BatchingConfig,
    mem: &M,
    occ: &O,
    info: &RequestInfo,
) -> (usize, BatchSizeReason)
where
    M: Estimator + ?Sized,
    O: Estimator + ?Sized,
{
    let remaining_len = remaining.len();
    if remaining_len == 1 {
        return (1, BatchSizeReason::OnlyOneTarget);
    }
    let initial = &remaining[..remaining_len.min(cfg.max_targets_per_batch)];
    let cutoff = cfg.memory_cutoff_gb.for_priority(info.priority);
    let after_mem = match limit_batch_size_by_cutoff(initial, cutoff, mem, info) {
        Ok(n) => n,
        Err(e) => {
            log::debug!("memory estimate failed, using fallback size: {e}");
            let n = cfg.fallback_batch_size.min(remaining_len);
            return (n, assign_reason(n, n, n, remaining_len, cfg, true, false));
        }
    };
    let after_occ = match limit_batch_size_by_cutoff(
        &initial[..after_mem],
        cfg.occupancy_cutoff_esu,
        occ,
        info,
    ) {
        Ok(n) => n,
        Err(e) => {
            log::debug!("occupancy estimate failed, using fallback size: {e}");
            let n = cfg.fallback_batch_size.min(after_mem);
            return (n, assign_reason(n, n, n, remaining_len, cfg, false, true));
        }
    };
    let reason = assign_reason(initial.len(), after_mem, after_occ, remaining_len, cfg, false, false);
    (after_occ, reason)
}

/// Splits one sorted executor-type group into batches.
pub fn batch_targets<M, O>(
    all: &[Target],
    cfg: &BatchingConfig,
    mem: &M,
    occ: &O,
    info: &RequestInfo,
) -> Vec<Batch>
where
    M: Estimator + ?Sized,
    O: Estimator + ?Sized,
{
    let mut batches = Vec::new();
    let mut rest = all;
    while !rest.is_empty() {
        let (n, reason) = next_batch(rest, cfg, mem, occ, info);
        debug_assert!(n >= 1 && n <= cfg.max_targets_per_batch.max(1));
        batches.push(Batch { targets: rest[..n].to_vec(), reason });
        rest = &rest[n..];
    }
    batches
}

/// Fixed-size slicing without estimators.
pub fn batch_fixed_size(all: &[Target], size: usize) -> Vec<Batch> {
    let size = size.max(1);
    let mut batches = Vec::new();
    let mut rest = all;
    while !rest.is_empty() {
        let n = rest.len().min(size);
        let reason = if rest.len() == 1 {
            BatchSizeReason::OnlyOneTarget
        } else if n == size {
            BatchSizeReason::MaxTargets
        } else {
            BatchSizeReason::AllRemainingTargets
        };
        batches.push(Batch { targets: rest[..n].to_vec(), reason });
        rest = &rest[n..];
    }
    batches
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetryAction {
    /// Split at `ceil(n / 2)`; each half goes back through batching.
    SplitAndRebatch(Vec<Target>, Vec<Target>),
    RebatchSame(Vec<Target>),
    GiveUp,
}

/// Maximum number of retry generations for one original build.
pub const MAX_RETRY_DEPTH: u32 = 6;

pub fn retry_policy(failed: &Build, stats: &ExecutionStats) -> RetryAction {
    match stats.outcome {
        Outcome::Oom if failed.targets.len() > 1 => {
            let mid = failed.targets.len().div_ceil(2);
            let (a, b) = failed.targets.split_at(mid);
            RetryAction::SplitAndRebatch(a.to_vec(), b.to_vec())
        }
        Outcome::DeadlineExceeded => RetryAction::RebatchSame(failed.targets.clone()),
        _ => RetryAction::GiveUp,
    }
}
