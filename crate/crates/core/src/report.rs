//! CSV tables from experiment metrics: the per-reason build breakdown and
//! model accuracy histograms.
//!
//! Accuracy tables use first-attempt builds that carry an estimate. Error is
//! `estimate - actual`, so positive values are overestimates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::model::{BatchSizeReason, Priority};
use crate::simulator::{BuildRecord, Metrics};

pub const REASONS_FILE: &str = "reasons.csv";
pub const MEMORY_RMSE_FILE: &str = "memory_rmse_by_actual.csv";
pub const MEMORY_ERROR_FILE: &str = "memory_count_by_error.csv";
pub const MEMORY_ACTUAL_FILE: &str = "memory_count_by_actual.csv";
pub const OCCUPANCY_RMSE_FILE: &str = "occupancy_rmse_by_actual.csv";
pub const OCCUPANCY_ERROR_FILE: &str = "occupancy_count_by_error.csv";
pub const OCCUPANCY_ACTUAL_FILE: &str = "occupancy_count_by_actual.csv";

pub const MEMORY_STEP_GB: f64 = 0.1;
pub const OCCUPANCY_STEP_ESU: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReasonRow {
    pub reason: String,
    pub build_count: usize,
    pub build_share: f64,
    pub mean_batch_size: f64,
    pub oom_count: usize,
    pub type_i_de_count: usize,
    pub type_ii_de_count: usize,
    pub mean_memory_gb: f64,
    pub mean_occupancy_esu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Series {
    Overall,
    Over,
    Under,
    Accurate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmseRow {
    pub actual_lo: f64,
    pub actual_hi: f64,
    pub series: Series,
    pub count: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountRow {
    pub lo: f64,
    pub hi: f64,
    pub priority: &'static str,
    pub count: usize,
}

/// One estimate next to what the build actually used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub priority: Priority,
    pub actual: f64,
    pub estimate: f64,
}

fn bucket(x: f64, step: f64) -> i64 {
    // Nudge so values sitting on an edge (0.3 / 0.1) land in the upper bucket.
    (x / step + 1e-9).floor() as i64
}

fn edges(b: i64, step: f64) -> (f64, f64) {
    (b as f64 * step, (b + 1) as f64 * step)
}

/// Table rows in the fixed reason order, skipping reasons with no builds.
pub fn reason_table(m: &Metrics) -> Vec<ReasonRow> {
    let total: usize = m.by_reason.values().map(|r| r.build_count).sum();
    BatchSizeReason::ALL
        .iter()
        .filter_map(|reason| {
            let r = m.by_reason.get(reason.as_str())?;
            Some(ReasonRow {
                reason: reason.as_str().to_string(),
                build_count: r.build_count,
                build_share: if total == 0 { 0.0 } else { r.build_count as f64 / total as f64 },
                mean_batch_size: r.mean_batch_size,
                oom_count: r.oom_count,
                type_i_de_count: r.type_i_de_count,
                type_ii_de_count: r.type_ii_de_count,
                mean_memory_gb: r.mean_memory_gb,
                mean_occupancy_esu: r.mean_occupancy_esu,
            })
        })
        .collect()
}

/// RMSE per actual-value bucket, overall and split by error sign. An error
/// with magnitude at most `tolerance` counts as accurate.
pub fn rmse_by_actual(obs: &[Observation], step: f64, tolerance: f64) -> Vec<RmseRow> {
    let mut acc: BTreeMap<(i64, Series), (usize, f64)> = BTreeMap::new();
    for o in obs {
        let b = bucket(o.actual, step);
        let err = o.estimate - o.actual;
        let side = if err.abs() <= tolerance {
            Series::Accurate
        } else if err > 0.0 {
            Series::Over
        } else {
            Series::Under
        };
        for s in [Series::Overall, side] {
            let e = acc.entry((b, s)).or_default();
            e.0 += 1;
            e.1 += err * err;
        }
    }
    acc.into_iter()
        .map(|((b, series), (count, sq))| {
            let (actual_lo, actual_hi) = edges(b, step);
            RmseRow { actual_lo, actual_hi, series, count, rmse: (sq / count as f64).sqrt() }
        })
        .collect()
}

fn count_by(obs: &[Observation], step: f64, value: impl Fn(&Observation) -> f64) -> Vec<CountRow> {
    let mut acc: BTreeMap<(i64, Priority), usize> = BTreeMap::new();
    for o in obs {
        *acc.entry((bucket(value(o), step), o.priority)).or_default() += 1;
    }
    acc.into_iter()
        .map(|((b, p), count)| {
            let (lo, hi) = edges(b, step);
            CountRow { lo, hi, priority: p.as_str(), count }
        })
        .collect()
}

/// Build counts per signed-error bucket and priority.
pub fn count_by_error(obs: &[Observation], step: f64) -> Vec<CountRow> {
    count_by(obs, step, |o| o.estimate - o.actual)
}

/// Build counts per actual-value bucket and priority.
pub fn count_by_actual(obs: &[Observation], step: f64) -> Vec<CountRow> {
    count_by(obs, step, |o| o.actual)
}

pub fn memory_observations(builds: &[BuildRecord]) -> Vec<Observation> {
    builds
        .iter()
        .filter(|b| b.attempt == 0)
        .filter_map(|b| Some(Observation { priority: b.priority, actual: b.memory_gb, estimate: b.estimated_memory_gb? }))
        .collect()
}

pub fn occupancy_observations(builds: &[BuildRecord]) -> Vec<Observation> {
    builds
        .iter()
        .filter(|b| b.attempt == 0)
        .filter_map(|b| {
            Some(Observation { priority: b.priority, actual: b.occupancy_esu, estimate: b.estimated_occupancy_esu? })
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const REASON_HEADER: &[&str] = &[
    "reason",
    "build_count",
    "build_share",
    "mean_batch_size",
    "oom_count",
    "type_i_de_count",
    "type_ii_de_count",
    "mean_memory_gb",
    "mean_occupancy_esu",
];
const RMSE_HEADER: &[&str] = &["actual_lo", "actual_hi", "series", "count", "rmse"];
const COUNT_HEADER: &[&str] = &["lo", "hi", "priority", "count"];

/// Writes every table under `dir` and returns the paths in a fixed order.
/// Empty metrics produce header-only files.
pub fn write_report(m: &Metrics, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mem = memory_observations(&m.builds);
    let occ = occupancy_observations(&m.builds);
    let firsts: Vec<&BuildRecord> = m.first_attempts().collect();
    let capped = |reason: BatchSizeReason, memory: bool| -> Vec<Observation> {
        firsts
            .iter()
            .filter(|b| b.reason == reason)
            .map(|b| Observation {
                priority: b.priority,
                actual: if memory { b.memory_gb } else { b.occupancy_esu },
                estimate: 0.0,
            })
            .collect()
    };

    let mut out = Vec::new();
    let mut put = |name: &str| {
        let p = dir.join(name);
        out.push(p.clone());
        p
    };
    write_rows(&put(REASONS_FILE), REASON_HEADER, &reason_table(m))?;
    write_rows(&put(MEMORY_RMSE_FILE), RMSE_HEADER, &rmse_by_actual(&mem, MEMORY_STEP_GB, MEMORY_STEP_GB / 2.0))?;
    write_rows(&put(MEMORY_ERROR_FILE), COUNT_HEADER, &count_by_error(&mem, MEMORY_STEP_GB))?;
    write_rows(
        &put(MEMORY_ACTUAL_FILE),
        COUNT_HEADER,
        &count_by_actual(&capped(BatchSizeReason::MaxMemory, true), MEMORY_STEP_GB),
    )?;
    write_rows(
        &put(OCCUPANCY_RMSE_FILE),
        RMSE_HEADER,
        &rmse_by_actual(&occ, OCCUPANCY_STEP_ESU, OCCUPANCY_STEP_ESU / 2.0),
    )?;
    write_rows(&put(OCCUPANCY_ERROR_FILE), COUNT_HEADER, &count_by_error(&occ, OCCUPANCY_STEP_ESU))?;
    write_rows(
        &put(OCCUPANCY_ACTUAL_FILE),
        COUNT_HEADER,
        &count_by_actual(&capped(BatchSizeReason::MaxOccupancy, false), OCCUPANCY_STEP_ESU),
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(actual: f64, estimate: f64) -> Observation {
        Observation { priority: Priority::High, actual, estimate }
    }

    fn row(rows: &[RmseRow], lo: f64, s: Series) -> &RmseRow {
        rows.iter().find(|r| (r.actual_lo - lo).abs() < 1e-9 && r.series == s).unwrap()
    }

    #[test]
    fn rmse_matches_hand_computation() {
        // Bucket [1.0, 1.1): errors +0.4, -0.2, +0.02 (accurate).
        // Bucket [2.0, 2.1): errors +1.0, +0.6.
        let o = [obs(1.0, 1.4), obs(1.05, 0.85), obs(1.08, 1.10), obs(2.0, 3.0), obs(2.05, 2.65)];
        let rows = rmse_by_actual(&o, 0.1, 0.05);
        let overall = ((0.16 + 0.04 + 0.0004) / 3.0f64).sqrt();
        assert!((row(&rows, 1.0, Series::Overall).rmse - overall).abs() < 1e-9);
        assert!((row(&rows, 1.0, Series::Over).rmse - 0.4).abs() < 1e-9);
        assert!((row(&rows, 1.0, Series::Under).rmse - 0.2).abs() < 1e-9);
        assert!((row(&rows, 1.0, Series::Accurate).rmse - 0.02).abs() < 1e-9);
        assert_eq!(row(&rows, 1.0, Series::Overall).count, 3);
        let r2 = row(&rows, 2.0, Series::Over);
        assert!((r2.rmse - ((1.0 + 0.36) / 2.0f64).sqrt()).abs() < 1e-9);
        assert!(!rows.iter().any(|r| r.actual_lo == 2.0 && r.series == Series::Under));
    }

    #[test]
    fn over_and_under_split_within_one_bucket() {
        let rows = rmse_by_actual(&[obs(5.0, 6.0), obs(5.0, 4.5)], 0.1, 0.05);
        assert_eq!(row(&rows, 5.0, Series::Over).count, 1);
        assert_eq!(row(&rows, 5.0, Series::Under).count, 1);
        assert_eq!(row(&rows, 5.0, Series::Overall).count, 2);
    }

    #[test]
    fn edge_values_bucket_upward() {
        assert_eq!(bucket(0.3, 0.1), 3);
        assert_eq!(bucket(0.0, 0.1), 0);
        assert_eq!(bucket(-0.05, 0.1), -1);
    }

    #[test]
    fn counts_by_error_and_priority() {
        let o = [
            Observation { priority: Priority::Low, actual: 1.0, estimate: 1.02 },
            Observation { priority: Priority::Low, actual: 2.0, estimate: 2.01 },
            Observation { priority: Priority::High, actual: 2.0, estimate: 1.5 },
        ];
        let rows = count_by_error(&o, 0.1);
        assert_eq!(rows.len(), 2);
        let low = rows.iter().find(|r| r.priority == "low").unwrap();
        assert_eq!((low.count, low.lo), (2, 0.0));
        let high = rows.iter().find(|r| r.priority == "high").unwrap();
        assert!((high.lo + 0.5).abs() < 1e-9);
    }

    #[test]
    fn empty_metrics_give_header_only_tables() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_report(&Metrics::default(), dir.path()).unwrap();
        assert_eq!(paths.len(), 7);
        for p in paths {
            let text = std::fs::read_to_string(&p).unwrap();
            assert_eq!(text.lines().count(), 1, "{}", p.display());
        }
    }
}
