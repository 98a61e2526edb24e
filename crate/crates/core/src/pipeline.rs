//! From execution logs to trained estimators.
//!
//! Log records are labeled (memory: post-full-GC peak heap when a full GC
//! ran, plain peak heap otherwise; occupancy: executor service time divided
//! by execution time), filtered to a time window, featurized, and fed to the
//! regression trainer. Feature crosses are chosen by greedy forward search
//! on a time-ordered validation split.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::batcher::EstimatorKind;
use crate::error::{Error, Result};
use crate::features::{
    apply_crosses, featurize, quantile_edges, Cross, FeatureBundle, FeatureSpec, SparseVector,
};
use crate::model::{EsuAmount, ExecutionStats, RequestInfo, Target};
use crate::regression::{mse, train, LabeledExample, LinearModel, MonotoneSet, TrainConfig};

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const QUERY_COMMAND: &str = "query";

/// One build request as it appears in the logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRequest {
    #[serde(flatten)]
    pub info: RequestInfo,
    pub targets: Vec<Target>,
}

/// One line of the execution log (JSONL).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub request: LogRequest,
    pub stats: ExecutionStats,
    /// Seconds since an arbitrary epoch at which the build finished.
    pub finished_at_s: f64,
}

impl LogRecord {
    pub fn validate(&self) -> Result<()> {
        self.stats.validate()?;
        self.request.info.flags.validate()?;
        if self.request.targets.is_empty() {
            return Err(Error::InvalidValue(format!("{}: no targets", self.stats.build_id)));
        }
        for t in &self.request.targets {
            t.validate()?;
        }
        if !self.finished_at_s.is_finite() {
            return Err(Error::InvalidValue("finished_at_s is not finite".into()));
        }
        Ok(())
    }
}

/// Reads JSONL logs. Unparseable lines are counted and skipped.
pub fn read_logs<R: BufRead>(reader: R) -> Result<(Vec<LogRecord>, usize)> {
    let mut records = Vec::new();
    let mut malformed = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::debug!("skipping malformed log line: {e}");
                malformed += 1;
            }
        }
    }
    Ok((records, malformed))
}

pub fn memory_label(s: &ExecutionStats) -> f64 {
    match (s.gc_occurred, s.peak_post_gc_heap_gb) {
        (true, Some(post_gc)) => post_gc,
        _ => s.peak_heap_gb,
    }
}

pub fn occupancy_label(s: &ExecutionStats) -> Result<EsuAmount> {
    if !(s.exec_time_s > 0.0) {
        return Err(Error::ZeroDuration);
    }
    EsuAmount::new(s.total_executor_service_time_esu_s / s.exec_time_s)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub used: usize,
    pub malformed: usize,
    pub queries: usize,
    pub outside_window: usize,
}

/// A featurized, labeled training set, ordered by finish time.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub memory: Vec<LabeledExample>,
    pub occupancy: Vec<LabeledExample>,
    pub finished_at_s: Vec<f64>,
    pub counts: DatasetCounts,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }

    /// The rows that fall within the last `window_days` before `now_s`.
    pub fn window(&self, window_days: u32, now_s: f64) -> Dataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| in_window(self.finished_at_s[i], window_days, now_s))
            .collect();
        let pick = |v: &[LabeledExample]| keep.iter().map(|&i| v[i].clone()).collect();
        Dataset {
            memory: pick(&self.memory),
            occupancy: pick(&self.occupancy),
            finished_at_s: keep.iter().map(|&i| self.finished_at_s[i]).collect(),
            counts: DatasetCounts { used: keep.len(), ..Default::default() },
        }
    }
}

/// Whether `finished_at_s` falls within the last `window_days` before `now`.
pub fn in_window(finished_at_s: f64, window_days: u32, now_s: f64) -> bool {
    let age = now_s - finished_at_s;
    age >= 0.0 && age < window_days as f64 * SECONDS_PER_DAY
}

/// Filters, labels and featurizes log records. Query builds are dropped;
/// malformed records are counted and dropped. The result does not depend on
/// record order.
pub fn build_dataset(records: &[LogRecord], window_days: u32, now_s: f64, spec: &FeatureSpec) -> Dataset {
    let mut counts = DatasetCounts::default();
    let mut rows: Vec<(f64, &str, SparseVector, f64, f64)> = Vec::new();
    for r in records {
        if !in_window(r.finished_at_s, window_days, now_s) {
            counts.outside_window += 1;
            continue;
        }
        if r.request.info.command == QUERY_COMMAND {
            counts.queries += 1;
            continue;
        }
        let labeled = r.validate().and_then(|_| {
            let x = spec.vectorize(&r.request.info, &r.request.targets)?;
            let occ = occupancy_label(&r.stats)?;
            Ok((x, memory_label(&r.stats), occ.value()))
        });
        match labeled {
            Ok((x, mem, occ)) => rows.push((r.finished_at_s, &r.stats.build_id, x, mem, occ)),
            Err(e) => {
                log::debug!("skipping record {}: {e}", r.stats.build_id);
                counts.malformed += 1;
            }
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    counts.used = rows.len();
    let mut ds = Dataset { counts, ..Default::default() };
    for (t, _, x, mem, occ) in rows {
        ds.memory.push(LabeledExample::new(x.clone(), mem));
        ds.occupancy.push(LabeledExample::new(x, occ));
        ds.finished_at_s.push(t);
    }
    ds
}

/// Feature bundles and labels of the usable records in a window, in the
/// same order as [`build_dataset`]; the input to feature ranking and cross
/// search.
pub fn window_bundles(
    records: &[LogRecord],
    window_days: u32,
    now_s: f64,
    spec: &FeatureSpec,
) -> (Vec<FeatureBundle>, Vec<f64>, Vec<f64>) {
    let mut rows: Vec<(f64, &str, FeatureBundle, f64, f64)> = records
        .iter()
        .filter(|r| in_window(r.finished_at_s, window_days, now_s) && r.request.info.command != QUERY_COMMAND)
        .filter_map(|r| {
            r.validate().ok()?;
            let bundle = spec.bundle(&r.request.info, &r.request.targets).ok()?;
            let occ = occupancy_label(&r.stats).ok()?.value();
            Some((r.finished_at_s, r.stats.build_id.as_str(), bundle, memory_label(&r.stats), occ))
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for (_, _, b, m, o) in rows {
        out.0.push(b);
        out.1.push(m);
        out.2.push(o);
    }
    out
}

/// Sets the count-bucket boundaries from the target and package counts seen
/// in the window.
pub fn fit_buckets(records: &[LogRecord], window_days: u32, now_s: f64, buckets: usize, spec: &mut FeatureSpec) {
    let mut targets = Vec::new();
    let mut packages = Vec::new();
    for r in records {
        if in_window(r.finished_at_s, window_days, now_s) && r.request.info.command != QUERY_COMMAND {
            let labels: BTreeSet<&str> = r.request.targets.iter().map(|t| t.label.as_str()).collect();
            let pkgs: BTreeSet<&str> = r.request.targets.iter().map(|t| t.package()).collect();
            targets.push(labels.len() as f64);
            packages.push(pkgs.len() as f64);
        }
    }
    spec.buckets.target_count = quantile_edges(&targets, buckets);
    spec.buckets.package_count = quantile_edges(&packages, buckets);
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in entropy (nats) of a discrete column.
pub fn entropy<T: Ord>(column: &[T]) -> f64 {
    let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
    for v in column {
        *counts.entry(v).or_default() += 1;
    }
    entropy_of_counts(counts.values(), column.len() as f64)
}

/// Plug-in mutual information (nats) between two discrete columns.
pub fn discrete_mutual_information<A: Ord, B: Ord>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len() as f64;
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut joint: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    let mut pa: BTreeMap<&A, usize> = BTreeMap::new();
    let mut pb: BTreeMap<&B, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *pa.entry(x).or_default() += 1;
        *pb.entry(y).or_default() += 1;
    }
    let mut mi = 0.0;
    for ((x, y), c) in &joint {
        let pxy = *c as f64 / n;
        let px = pa[x] as f64 / n;
        let py = pb[y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    // rounding can push a zero result slightly negative
    Ok(mi.max(0.0))
}

/// Equal-frequency bins for a real column; equal values share a bin.
pub fn equal_frequency_bins(label: &[f64], bins: usize) -> Vec<usize> {
    let edges = quantile_edges(label, bins);
    label.iter().map(|v| crate::features::bucketize(*v, &edges)).collect()
}

pub const DEFAULT_LABEL_BINS: usize = 16;

/// MI between a categorical feature and a real label discretized into
/// `label_bins` equal-frequency bins.
pub fn mutual_information<S: Ord>(feature: &[S], label: &[f64], label_bins: usize) -> Result<f64> {
    if feature.len() != label.len() {
        return Err(Error::LengthMismatch(feature.len(), label.len()));
    }
    if feature.len() < 2 {
        return Err(Error::InvalidValue("mutual information needs at least 2 rows".into()));
    }
    discrete_mutual_information(feature, &equal_frequency_bins(label, label_bins))
}

/// A bundle's categorical feature as one column value (sorted values joined).
pub fn column_value(bundle: &FeatureBundle, name: &str) -> String {
    bundle
        .categorical
        .get(name)
        .map(|vs| vs.iter().cloned().collect::<Vec<_>>().join(","))
        .unwrap_or_default()
}

/// Ranks categorical features by MI with the label, highest first.
pub fn rank_features(bundles: &[FeatureBundle], labels: &[f64], label_bins: usize) -> Result<Vec<(String, f64)>> {
    let names: BTreeSet<&String> = bundles.iter().flat_map(|b| b.categorical.keys()).collect();
    let mut ranked = Vec::new();
    for name in names {
        let column: Vec<String> = bundles.iter().map(|b| column_value(b, name)).collect();
        ranked.push((name.clone(), mutual_information(&column, labels, label_bins)?));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSearchConfig {
    pub max_crosses: usize,
    /// Training settings for each probe; typically few epochs.
    pub probe: TrainConfig,
    /// Stop when the best candidate improves validation MSE by less than this
    /// fraction of the current validation MSE.
    pub min_relative_improvement: f64,
    pub validation_fraction: f64,
    pub allow_triples: bool,
}

impl Default for CrossSearchConfig {
    fn default() -> Self {
        CrossSearchConfig {
            max_crosses: crate::features::MAX_CROSSES,
            probe: TrainConfig { epochs: 3, ..TrainConfig::default() },
            min_relative_improvement: 0.01,
            validation_fraction: 0.1,
            allow_triples: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSearchResult {
    pub crosses: Vec<Cross>,
    /// Validation MSE before any cross, then after each accepted cross.
    pub validation_mse: Vec<f64>,
}

fn probe_mse(
    bundles: &[FeatureBundle],
    labels: &[f64],
    split: usize,
    spec: &FeatureSpec,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut examples = Vec::with_capacity(bundles.len());
    for (b, y) in bundles.iter().zip(labels) {
        let crossed = apply_crosses(b.clone(), spec)?;
        examples.push(LabeledExample::new(featurize(&crossed, spec), *y));
    }
    let (train_set, valid) = examples.split_at(split);
    let model = train(train_set, cfg, &MonotoneSet::from_range(spec.monotone_range()), EstimatorKind::Memory)?;
    mse(&model, valid)
}

/// Greedy forward selection of feature crosses over categorical candidates.
///
/// `bundles` must be in time order; the last `validation_fraction` of them
/// is held out.
pub fn search_crosses(
    candidates: &[String],
    bundles: &[FeatureBundle],
    labels: &[f64],
    base: &FeatureSpec,
    cfg: &CrossSearchConfig,
) -> Result<CrossSearchResult> {
    if bundles.len() != labels.len() {
        return Err(Error::LengthMismatch(bundles.len(), labels.len()));
    }
    let mut spec = base.clone();
    spec.crosses.clear();
    if candidates.len() < 2 || bundles.len() < 2 || cfg.max_crosses == 0 {
        return Ok(CrossSearchResult { crosses: Vec::new(), validation_mse: Vec::new() });
    }
    let n_valid = ((bundles.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, bundles.len() - 1);
    let split = bundles.len() - n_valid;
    let mut current = probe_mse(bundles, labels, split, &spec, &cfg.probe)?;
    let mut history = vec![current];

    let mut pool: Vec<Cross> = Vec::new();
    for (i, a) in candidates.iter().enumerate() {
        for b in &candidates[i + 1..] {
            pool.push(Cross::new(&[a, b]));
        }
    }
    while spec.crosses.len() < cfg.max_crosses.min(crate::features::MAX_CROSSES) {
        let mut best: Option<(f64, Cross)> = None;
        for cand in &pool {
            if spec.crosses.contains(cand) {
                continue;
            }
            let mut trial = spec.clone();
            trial.crosses.push(cand.clone());
            let score = probe_mse(bundles, labels, split, &trial, &cfg.probe)?;
            if best.as_ref().is_none_or(|(s, _)| score < *s) {
                best = Some((score, cand.clone()));
            }
        }
        let Some((score, cross)) = best else { break };
        if current - score < cfg.min_relative_improvement * current || current - score <= 0.0 {
            break;
        }
        log::info!("accepted cross {} (validation mse {current:.5} -> {score:.5})", cross.name());
        if cfg.allow_triples && cross.features.len() == 2 {
            for c in candidates {
                if !cross.features.contains(c) {
                    let mut members = cross.features.clone();
                    members.push(c.clone());
                    pool.push(Cross { features: members });
                }
            }
        }
        spec.crosses.push(cross);
        current = score;
        history.push(current);
    }
    Ok(CrossSearchResult { crosses: spec.crosses, validation_mse: history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub primary_window_days: u32,
    pub recent_window_days: u32,
    pub count_buckets: usize,
    pub memory: TrainConfig,
    /// Config for the short-window memory model. When unset, `memory` is used
    /// with its penalties scaled by the window ratio.
    pub recent_memory: Option<TrainConfig>,
    pub occupancy: TrainConfig,
}

impl PipelineConfig {
    pub fn recent_memory_config(&self) -> TrainConfig {
        if let Some(c) = &self.recent_memory {
            return c.clone();
        }
        let scale = self.recent_window_days as f64 / self.primary_window_days.max(1) as f64;
        let mut c = self.memory.clone();
        c.lambda_plus *= scale;
        c.lambda_minus = c.lambda_minus.map(|l| l * scale);
        c
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            primary_window_days: 17,
            recent_window_days: 1,
            count_buckets: 4,
            memory: TrainConfig::default(),
            recent_memory: None,
            occupancy: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelPair {
    pub primary: LinearModel,
    pub recent: LinearModel,
}

/// Featurizes the long window once and slices the short one out of it.
fn window_datasets(records: &[LogRecord], now_s: f64, spec: &FeatureSpec, cfg: &PipelineConfig) -> Result<(Dataset, Dataset)> {
    let long = cfg.primary_window_days.max(cfg.recent_window_days);
    let all = build_dataset(records, long, now_s, spec);
    let recent = all.window(cfg.recent_window_days, now_s);
    let counts = all.counts.clone();
    let primary = if long == cfg.primary_window_days { all } else { all.window(cfg.primary_window_days, now_s) };
    for (ds, days) in [(&primary, cfg.primary_window_days), (&recent, cfg.recent_window_days)] {
        if ds.is_empty() {
            return Err(Error::InsufficientData(format!("no usable builds in the last {days} day(s)")));
        }
    }
    let primary = Dataset { counts, ..primary };
    Ok((primary, recent))
}

fn fit(examples: &[LabeledExample], window_days: u32, spec: &FeatureSpec, cfg: &TrainConfig, kind: EstimatorKind) -> Result<LinearModel> {
    let mut model = train(examples, cfg, &MonotoneSet::from_range(spec.monotone_range()), kind)?;
    model.trained_window_days = window_days;
    Ok(model)
}

/// Long-window and short-window memory models over one feature spec.
pub fn train_model_pair(records: &[LogRecord], now_s: f64, spec: &FeatureSpec, cfg: &PipelineConfig) -> Result<ModelPair> {
    let (ds, recent_ds) = window_datasets(records, now_s, spec, cfg)?;
    Ok(ModelPair {
        primary: fit(&ds.memory, cfg.primary_window_days, spec, &cfg.memory, EstimatorKind::Memory)?,
        recent: fit(&recent_ds.memory, cfg.recent_window_days, spec, &cfg.recent_memory_config(), EstimatorKind::Memory)?,
    })
}

/// Everything a serving estimator needs.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub spec: FeatureSpec,
    pub memory: ModelPair,
    pub occupancy: LinearModel,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub counts: DatasetCounts,
    pub log_span_days: f64,
    pub memory_train_mse: f64,
    pub memory_recent_train_mse: f64,
    pub occupancy_train_mse: f64,
    pub memory_validation_mse: f64,
    pub occupancy_validation_mse: f64,
}

/// Fits bucket edges, then trains the memory pair and the occupancy model.
/// Validation MSE is measured on the newest tenth of the primary window
/// using a separate model trained on the rest.
pub fn train_all(records: &[LogRecord], now_s: f64, base: &FeatureSpec, cfg: &PipelineConfig) -> Result<TrainedModels> {
    let mut spec = base.clone();
    fit_buckets(records, cfg.primary_window_days, now_s, cfg.count_buckets, &mut spec);
    spec.validate()?;
    let (ds, recent_ds) = window_datasets(records, now_s, &spec, cfg)?;
    let primary = fit(&ds.memory, cfg.primary_window_days, &spec, &cfg.memory, EstimatorKind::Memory)?;
    let recent = fit(&recent_ds.memory, cfg.recent_window_days, &spec, &cfg.recent_memory_config(), EstimatorKind::Memory)?;
    let occupancy = fit(&ds.occupancy, cfg.primary_window_days, &spec, &cfg.occupancy, EstimatorKind::Occupancy)?;

    let mut report = TrainReport {
        counts: ds.counts.clone(),
        log_span_days: log_span_days(records),
        memory_train_mse: mse(&primary, &ds.memory)?,
        memory_recent_train_mse: mse(&recent, &recent_ds.memory)?,
        occupancy_train_mse: mse(&occupancy, &ds.occupancy)?,
        ..Default::default()
    };
    if ds.len() >= 10 {
        let split = ds.len() - ds.len() / 10;
        let mono = MonotoneSet::from_range(spec.monotone_range());
        let m = train(&ds.memory[..split], &cfg.memory, &mono, EstimatorKind::Memory)?;
        report.memory_validation_mse = mse(&m, &ds.memory[split..])?;
        let o = train(&ds.occupancy[..split], &cfg.occupancy, &mono, EstimatorKind::Occupancy)?;
        report.occupancy_validation_mse = mse(&o, &ds.occupancy[split..])?;
    }
    Ok(TrainedModels { spec, memory: ModelPair { primary, recent }, occupancy, report })
}

pub fn log_span_days(records: &[LogRecord]) -> f64 {
    let (lo, hi) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.finished_at_s), hi.max(r.finished_at_s))
    });
    if lo.is_finite() {
        (hi - lo) / SECONDS_PER_DAY
    } else {
        0.0
    }
}
