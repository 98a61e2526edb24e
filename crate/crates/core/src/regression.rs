//! Sparse linear regression with sign-dependent L1 penalties.
//!
//! The objective over examples `(x_i, y_i)` with example weights `w_i` is
//!
//! ```text
//! sum_i w_i (y_i - beta . x_i)^2 / W  +  R(beta) / W,      W = sum_i w_i
//! R(beta) = sum_j lambda_j^{sign(beta_j)} |beta_j|
//! ```
//!
//! i.e. the penalty is measured against the *summed* squared error, so the
//! regularization strength does not have to be rescaled with dataset size.
//! Weights in the monotone set have an infinite penalty on the negative side:
//! after every proximal step they are projected onto `[0, inf)`. The bias
//! (index 0) is not penalized.
//!
//! Training is minibatch proximal SGD. The step size is
//! `learning_rate / max(1, mean ||x||^2)` over the minibatch, which keeps the
//! update stable for builds with thousands of active one-hot features. The
//! L1 shrinkage of coordinates absent from a minibatch is applied lazily
//! when the coordinate is next touched; consecutive soft-thresholds compose,
//! so this is exact.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batcher::EstimatorKind;
use crate::error::{Error, Result};
use crate::features::SparseVector;

const FORMAT_HEADER: &str = "linear-model v1";

/// Index ranges whose weights must stay non-negative.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MonotoneSet {
    ranges: Vec<Range<u32>>,
}

impl MonotoneSet {
    pub fn new(mut ranges: Vec<Range<u32>>) -> Self {
        ranges.retain(|r| r.start < r.end);
        ranges.sort_by_key(|r| (r.start, r.end));
        let mut merged: Vec<Range<u32>> = Vec::new();
        for r in ranges {
            match merged.last_mut() {
                Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
                _ => merged.push(r),
            }
        }
        MonotoneSet { ranges: merged }
    }

    pub fn from_range(r: Range<u32>) -> Self {
        Self::new(vec![r])
    }

    pub fn from_indices(indices: impl IntoIterator<Item = u32>) -> Self {
        Self::new(indices.into_iter().map(|i| i..i + 1).collect())
    }

    pub fn contains(&self, i: u32) -> bool {
        let pos = self.ranges.partition_point(|r| r.end <= i);
        self.ranges.get(pos).is_some_and(|r| r.start <= i)
    }

    pub fn ranges(&self) -> &[Range<u32>] {
        &self.ranges
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: EstimatorKind,
    pub hash_dim: usize,
    pub trained_window_days: u32,
    pub seed: u64,
    pub version: String,
    /// Non-zero weights only.
    pub weights: BTreeMap<u32, f64>,
    pub monotone: MonotoneSet,
}

impl LinearModel {
    pub fn zero(kind: EstimatorKind, hash_dim: usize, monotone: MonotoneSet) -> Self {
        LinearModel {
            kind,
            hash_dim,
            trained_window_days: 0,
            seed: 0,
            version: "untrained".into(),
            weights: BTreeMap::new(),
            monotone,
        }
    }

    pub fn weight(&self, i: u32) -> f64 {
        self.weights.get(&i).copied().unwrap_or(0.0)
    }

    /// Raw inner product, without the clamp at zero.
    pub fn dot(&self, x: &SparseVector) -> Result<f64> {
        self.check_dim(x)?;
        Ok(x.entries.iter().map(|(i, v)| self.weight(*i) * v).sum())
    }

    fn check_dim(&self, x: &SparseVector) -> Result<()> {
        if x.dim != self.hash_dim {
            return Err(Error::DimMismatch { expected: self.hash_dim, actual: x.dim });
        }
        Ok(())
    }

    pub fn satisfies_monotone(&self) -> bool {
        self.weights.iter().all(|(i, w)| *w >= 0.0 || !self.monotone.contains(*i))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{FORMAT_HEADER}")?;
        let kind = match self.kind {
            EstimatorKind::Memory => "memory",
            EstimatorKind::Occupancy => "occupancy",
        };
        writeln!(w, "kind {kind}")?;
        writeln!(w, "hash_dim {}", self.hash_dim)?;
        writeln!(w, "window_days {}", self.trained_window_days)?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "version {}", self.version)?;
        writeln!(w, "weights {}", self.weights.len())?;
        for (i, v) in &self.weights {
            writeln!(w, "{i} {v}")?;
        }
        writeln!(w, "monotone {}", self.monotone.ranges.len())?;
        for r in &self.monotone.ranges {
            writeln!(w, "{} {}", r.start, r.end)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("model text is ASCII")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut rd = LineReader { lines: r.lines(), line: 0 };
        let header = rd.next("header")?;
        if header.trim() != FORMAT_HEADER {
            return Err(rd.error(format!("unsupported header {header:?}")));
        }
        let kind = match rd.field("kind")?.as_str() {
            "memory" => EstimatorKind::Memory,
            "occupancy" => EstimatorKind::Occupancy,
            other => return Err(rd.error(format!("unknown kind {other:?}"))),
        };
        let hash_dim: usize = rd.parsed_field("hash_dim")?;
        let trained_window_days: u32 = rd.parsed_field("window_days")?;
        let seed: u64 = rd.parsed_field("seed")?;
        let version = rd.field("version")?;
        let count: usize = rd.parsed_field("weights")?;
        let mut weights = BTreeMap::new();
        for _ in 0..count {
            let (i, v): (u32, f64) = rd.pair("weight line")?;
            if i as usize >= hash_dim {
                return Err(rd.error(format!("index {i} out of range")));
            }
            weights.insert(i, v);
        }
        let count: usize = rd.parsed_field("monotone")?;
        let mut ranges = Vec::new();
        for _ in 0..count {
            let (a, b): (u32, u32) = rd.pair("monotone range")?;
            ranges.push(a..b);
        }
        let model = LinearModel {
            kind,
            hash_dim,
            trained_window_days,
            seed,
            version: version.trim().to_string(),
            weights,
            monotone: MonotoneSet::new(ranges),
        };
        if !model.satisfies_monotone() {
            return Err(rd.error("negative weight on a monotone index".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

struct LineReader<L> {
    lines: L,
    line: usize,
}

impl<L: Iterator<Item = std::io::Result<String>>> LineReader<L> {
    fn error(&self, message: String) -> Error {
        Error::ModelFormat { line: self.line, message }
    }

    fn next(&mut self, what: &str) -> Result<String> {
        self.line += 1;
        match self.lines.next() {
            Some(line) => Ok(line?),
            None => Err(self.error(format!("missing {what}"))),
        }
    }

    fn field(&mut self, key: &str) -> Result<String> {
        let line = self.next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(self.error(format!("expected `{key} <value>`"))),
        }
    }

    fn parsed_field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.field(key)?;
        v.parse().map_err(|e: T::Err| self.error(e.to_string()))
    }

    fn pair<A, B>(&mut self, what: &str) -> Result<(A, B)>
    where
        A: std::str::FromStr,
        B: std::str::FromStr,
        A::Err: std::fmt::Display,
        B::Err: std::fmt::Display,
    {
        let line = self.next(what)?;
        let (a, b) = line
            .split_once(' ')
            .ok_or_else(|| self.error(format!("expected two values in {what}")))?;
        let a = a.parse().map_err(|e: A::Err| self.error(e.to_string()))?;
        let b = b.trim().parse().map_err(|e: B::Err| self.error(e.to_string()))?;
        Ok((a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_plus: f64,
    /// Penalty for negative weights outside the monotone set; defaults to `lambda_plus`.
    pub lambda_minus: Option<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_plus: 7000.0,
            lambda_minus: None,
            learning_rate: 0.5,
            epochs: 20,
            minibatch: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lm = self.lambda_minus();
        if !(self.lambda_plus >= 0.0 && lm >= 0.0) {
            return Err(Error::Config("regularization must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::Config("learning rate, epochs and minibatch must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda_minus(&self) -> f64 {
        self.lambda_minus.unwrap_or(self.lambda_plus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: SparseVector,
    pub y: f64,
    pub weight: f64,
}

impl LabeledExample {
    pub fn new(x: SparseVector, y: f64) -> Self {
        LabeledExample { x, y, weight: 1.0 }
    }
}

/// `max(0, beta . x)`.
pub fn predict(model: &LinearModel, x: &SparseVector) -> Result<f64> {
    Ok(model.dot(x)?.max(0.0))
}

fn total_weight(dataset: &[LabeledExample]) -> f64 {
    dataset.iter().map(|e| e.weight).sum()
}

/// Weighted mean squared error of the unclamped linear predictor.
pub fn mse(model: &LinearModel, dataset: &[LabeledExample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = 0.0;
    for e in dataset {
        let r = e.y - model.dot(&e.x)?;
        acc += e.weight * r * r;
    }
    Ok(acc / total_weight(dataset))
}

/// Regularized objective; `+inf` if a monotone weight is negative.
pub fn loss(model: &LinearModel, dataset: &[LabeledExample], cfg: &TrainConfig) -> Result<f64> {
    let fit = mse(model, dataset)?;
    let (lp, lm) = (cfg.lambda_plus, cfg.lambda_minus());
    let mut penalty = 0.0;
    for (i, w) in &model.weights {
        if *i == 0 {
            continue;
        }
        if *w >= 0.0 {
            penalty += lp * w;
        } else if model.monotone.contains(*i) {
            return Ok(f64::INFINITY);
        } else {
            penalty += lm * -w;
        }
    }
    Ok(fit + penalty / total_weight(dataset))
}

/// Gradient of the weighted MSE with respect to dense weights.
pub fn mse_gradient(weights: &[f64], dataset: &[LabeledExample]) -> Vec<f64> {
    let mut g = vec![0.0; weights.len()];
    let total = total_weight(dataset);
    for e in dataset {
        let pred: f64 = e.x.entries.iter().map(|(i, v)| weights[*i as usize] * v).sum();
        let r = e.y - pred;
        for (i, v) in &e.x.entries {
            g[*i as usize] += -2.0 * e.weight * r * v / total;
        }
    }
    g
}

/// Soft-threshold with separate thresholds for the two signs; `neg = inf`
/// projects onto the non-negative half-line.
fn prox(v: f64, pos: f64, neg: f64) -> f64 {
    if v > pos {
        v - pos
    } else if v < -neg {
        v + neg
    } else {
        0.0
    }
}

/// Optional hook invoked after every epoch with the dense weights.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &[f64]);

pub fn train(
    dataset: &[LabeledExample],
    cfg: &TrainConfig,
    monotone: &MonotoneSet,
    kind: EstimatorKind,
) -> Result<LinearModel> {
    train_with_hook(dataset, cfg, monotone, kind, None)
}

pub fn train_with_hook(
    dataset: &[LabeledExample],
    cfg: &TrainConfig,
    monotone: &MonotoneSet,
    kind: EstimatorKind,
    mut hook: Option<EpochHook<'_>>,
) -> Result<LinearModel> {
    cfg.validate()?;
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let dim = first.x.dim;
    if let Some(e) = dataset.iter().find(|e| e.x.dim != dim) {
        return Err(Error::DimMismatch { expected: dim, actual: e.x.dim });
    }
    if dataset.iter().any(|e| !(e.weight > 0.0) || !e.y.is_finite()) {
        return Err(Error::InvalidValue("example weights must be positive and labels finite".into()));
    }
    let total = total_weight(dataset);
    let lp = cfg.lambda_plus / total;
    let lm = cfg.lambda_minus() / total;

    // Train over the coordinates that actually occur, renumbered densely;
    // coordinate 0 stays the bias.
    let mut compact = vec![u32::MAX; dim];
    let mut original: Vec<u32> = vec![0];
    compact[0] = 0;
    let rows: Vec<Vec<(u32, f64)>> = dataset
        .iter()
        .map(|e| {
            e.x.entries
                .iter()
                .map(|&(i, v)| {
                    let c = &mut compact[i as usize];
                    if *c == u32::MAX {
                        *c = original.len() as u32;
                        original.push(i);
                    }
                    (*c, v)
                })
                .collect()
        })
        .collect();
    let norms: Vec<f64> = dataset.iter().map(|e| e.x.squared_norm()).collect();
    let n = original.len();
    let mono: Vec<bool> = original.iter().map(|&i| i != 0 && monotone.contains(i)).collect();
    let expand = |w: &[f64]| {
        let mut dense = vec![0.0; dim];
        for (c, &i) in original.iter().enumerate() {
            dense[i as usize] = w[c];
        }
        dense
    };

    let mut w = vec![0.0f64; n];
    // cumulative step sizes; coordinate j has been regularized through step last[j]
    let mut cum_step: Vec<f64> = vec![0.0];
    let mut last = vec![0u32; n];
    // dense gradient scratch plus the coordinates touched this minibatch
    let mut grad = vec![0.0f64; n];
    let mut touched: Vec<u32> = Vec::new();

    let catch_up = |w: &mut [f64], last: &mut [u32], cum: &[f64], j: usize, upto: usize| {
        let lj = last[j] as usize;
        if lj < upto {
            if j != 0 && w[j] != 0.0 {
                let eta = cum[upto] - cum[lj];
                let neg = if mono[j] { f64::INFINITY } else { eta * lm };
                w[j] = prox(w[j], eta * lp, neg);
            }
            last[j] = upto as u32;
        }
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let mut wsum = 0.0;
            let mut norm = 0.0;
            for &k in chunk {
                let (row, e) = (&rows[k], &dataset[k]);
                for &(i, _) in row {
                    catch_up(&mut w, &mut last, &cum_step, i as usize, step);
                }
                let pred: f64 = row.iter().map(|&(i, v)| w[i as usize] * v).sum();
                let r = e.y - pred;
                for &(i, v) in row {
                    let g = &mut grad[i as usize];
                    if *g == 0.0 {
                        touched.push(i);
                    }
                    *g += -2.0 * e.weight * r * v;
                }
                wsum += e.weight;
                norm += e.weight * norms[k];
            }
            let eta = cfg.learning_rate / (norm / wsum).max(1.0);
            step += 1;
            cum_step.push(cum_step[step - 1] + eta);
            touched.sort_unstable();
            touched.dedup();
            for i in touched.drain(..) {
                let j = i as usize;
                let g = std::mem::take(&mut grad[j]);
                let v = w[j] - eta * g / wsum;
                w[j] = if j == 0 {
                    v
                } else {
                    let neg = if mono[j] { f64::INFINITY } else { eta * lm };
                    prox(v, eta * lp, neg)
                };
                last[j] = step as u32;
            }
        }
        if let Some(h) = hook.as_mut() {
            for j in 0..n {
                catch_up(&mut w, &mut last, &cum_step, j, step);
            }
            h(epoch, &expand(&w));
        }
    }
    for j in 0..n {
        catch_up(&mut w, &mut last, &cum_step, j, step);
    }
    let weights = w
        .iter()
        .zip(&original)
        .filter(|(v, _)| **v != 0.0)
        .map(|(v, &i)| (i, *v))
        .collect();
    let model = LinearModel {
        kind,
        hash_dim: dim,
        trained_window_days: 0,
        seed: cfg.seed,
        version: format!("sgd-{}x{}", cfg.epochs, cfg.minibatch),
        weights,
        monotone: monotone.clone(),
    };
    debug_assert!(model.satisfies_monotone());
    Ok(model)
}

/// The larger of two memory predictions; lets a model trained on a short,
/// recent window override a long-window model that lags a regression.
pub fn ensemble_max(primary: &LinearModel, recent: &LinearModel, x: &SparseVector) -> Result<f64> {
    if primary.kind != EstimatorKind::Memory || recent.kind != EstimatorKind::Memory {
        return Err(Error::KindMismatch("ensemble_max needs two memory models".into()));
    }
    if primary.hash_dim != recent.hash_dim {
        return Err(Error::DimMismatch { expected: primary.hash_dim, actual: recent.hash_dim });
    }
    Ok(predict(primary, x)?.max(predict(recent, x)?))
}
