//! Sparse hashed feature vectors for the resource estimators.
//!
//! A request plus a target list becomes a [`FeatureBundle`] of named
//! categorical and numeric features, optionally augmented with feature
//! crosses, and is then hashed into a [`SparseVector`].
//!
//! Hash layout for `hash_dim = D`:
//!
//! * index 0 is the bias and is always `1.0`;
//! * features derived from the target list hash into `[D/2, D)`;
//! * every other feature hashes into `[1, D/2)`.
//!
//! Keeping target-derived features in their own half means the set of
//! weights that must stay non-negative is a fixed index range, known before
//! any target has been seen.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{canonical_label, RequestInfo, Target};

pub const PRIORITY: &str = "priority";
pub const COMMAND: &str = "command";
pub const USER: &str = "user";
pub const PRODUCT_AREA: &str = "product_area";
pub const TOOL_TAG: &str = "tool_tag";
pub const TARGETS: &str = "target";
pub const PACKAGES: &str = "package";
pub const TARGET_COUNT: &str = "target_count";
pub const PACKAGE_COUNT: &str = "package_count";
pub const TARGET_PREFIX: &str = "target_prefix";
pub const TARGET_COUNT_BUCKET: &str = "target_count_bucket";
pub const PACKAGE_COUNT_BUCKET: &str = "package_count_bucket";
pub const FLAG_PREFIX: &str = "flag:";

/// Separator between member values of a crossed feature (ASCII unit separator).
pub const CROSS_VALUE_SEP: char = '\u{1f}';
/// Separator between member names of a crossed feature.
pub const CROSS_NAME_SEP: char = '×';

pub const MAX_CROSSES: usize = 6;

const CONTEXT_FEATURES: [&str; 5] = [PRIORITY, COMMAND, USER, PRODUCT_AREA, TOOL_TAG];
const TARGET_CATEGORICAL: [&str; 5] =
    [TARGETS, PACKAGES, TARGET_PREFIX, TARGET_COUNT_BUCKET, PACKAGE_COUNT_BUCKET];

/// Flags treated as features unless a spec file says otherwise.
pub const DEFAULT_FLAG_FEATURES: [&str; 10] = [
    "--cache_test_results",
    "--cpu",
    "--discard_analysis_cache",
    "--fuseless_output",
    "--jobs",
    "--keep_going",
    "--keep_state_after_build",
    "--runs_per_test",
    "--test_size_filters",
    "--use_action_cache",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cross {
    pub features: Vec<String>,
}

impl Cross {
    pub fn new<S: AsRef<str>>(features: &[S]) -> Self {
        Cross { features: features.iter().map(|s| s.as_ref().to_string()).collect() }
    }

    pub fn name(&self) -> String {
        self.features.join(&CROSS_NAME_SEP.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Buckets {
    #[serde(default)]
    pub target_count: Vec<f64>,
    #[serde(default)]
    pub package_count: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub hash_dim: usize,
    /// Multiplier applied to raw numeric features (counts) before hashing.
    pub numeric_scale: f64,
    pub flag_features: Vec<String>,
    pub buckets: Buckets,
    pub crosses: Vec<Cross>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            hash_dim: 1 << 20,
            numeric_scale: 0.01,
            flag_features: DEFAULT_FLAG_FEATURES.iter().map(|s| s.to_string()).collect(),
            buckets: Buckets::default(),
            crosses: Vec::new(),
        }
    }
}

impl FeatureSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: FeatureSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("feature spec is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.hash_dim < 4 || !self.hash_dim.is_power_of_two() || self.hash_dim > 1 << 31 {
            return Err(Error::Config(format!(
                "hash_dim must be a power of two in [4, 2^31], got {}",
                self.hash_dim
            )));
        }
        if !(self.numeric_scale > 0.0 && self.numeric_scale.is_finite()) {
            return Err(Error::Config("numeric_scale must be positive".into()));
        }
        for edges in [&self.buckets.target_count, &self.buckets.package_count] {
            if edges.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(Error::Config("bucket boundaries must be sorted".into()));
            }
        }
        if self.crosses.len() > MAX_CROSSES {
            return Err(Error::Config(format!(
                "at most {MAX_CROSSES} feature crosses, got {}",
                self.crosses.len()
            )));
        }
        let known = self.categorical_names();
        for cross in &self.crosses {
            if cross.features.len() < 2 {
                return Err(Error::Config(format!("cross {:?} needs 2+ members", cross.features)));
            }
            for f in &cross.features {
                if !known.contains(f) {
                    return Err(Error::UnknownFeature(f.clone()));
                }
            }
        }
        Ok(())
    }

    /// Names of every categorical feature this spec can produce (crosses excluded).
    pub fn categorical_names(&self) -> BTreeSet<String> {
        CONTEXT_FEATURES
            .iter()
            .chain(TARGET_CATEGORICAL.iter())
            .map(|s| s.to_string())
            .chain(self.flag_features.iter().map(|f| format!("{FLAG_PREFIX}{f}")))
            .collect()
    }

    /// Weight indices that must stay non-negative.
    pub fn monotone_range(&self) -> Range<u32> {
        (self.hash_dim / 2) as u32..self.hash_dim as u32
    }

    /// Basic, synthetic and crossed features for a build of `targets`.
    pub fn bundle(&self, info: &RequestInfo, targets: &[Target]) -> Result<FeatureBundle> {
        let mut bundle = extract_basic(info, targets, self);
        add_synthetic(&mut bundle, targets, self)?;
        apply_crosses(bundle, self)
    }

    pub fn vectorize(&self, info: &RequestInfo, targets: &[Target]) -> Result<SparseVector> {
        Ok(featurize(&self.bundle(info, targets)?, self))
    }
}

/// Named features of one (hypothetical) build.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub categorical: BTreeMap<String, BTreeSet<String>>,
    pub numeric: BTreeMap<String, f64>,
    /// Features whose values come from the target list.
    pub target_derived: BTreeSet<String>,
}

impl FeatureBundle {
    pub fn insert_categorical<I, S>(&mut self, name: &str, values: I, target_derived: bool)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entry = self.categorical.entry(name.to_string()).or_default();
        entry.extend(values.into_iter().map(Into::into).filter(|v: &String| !v.is_empty()));
        if target_derived {
            self.target_derived.insert(name.to_string());
        }
    }

    pub fn insert_numeric(&mut self, name: &str, value: f64, target_derived: bool) {
        self.numeric.insert(name.to_string(), value);
        if target_derived {
            self.target_derived.insert(name.to_string());
        }
    }

    pub fn is_target_derived(&self, name: &str) -> bool {
        self.target_derived.contains(name)
    }
}

/// Table of basic features: request attributes, whitelisted flag values,
/// target labels, packages and their counts.
pub fn extract_basic(info: &RequestInfo, targets: &[Target], spec: &FeatureSpec) -> FeatureBundle {
    let mut b = FeatureBundle::default();
    b.insert_categorical(PRIORITY, [info.priority.as_str()], false);
    b.insert_categorical(COMMAND, [info.command.as_str()], false);
    b.insert_categorical(USER, [info.user.as_str()], false);
    b.insert_categorical(PRODUCT_AREA, [info.product_area.as_str()], false);
    b.insert_categorical(TOOL_TAG, [info.tool_tag.as_str()], false);
    for flag in &spec.flag_features {
        let values = info
            .flags
            .get_all(flag)
            .map(|v| if v.is_empty() { "true" } else { v });
        b.insert_categorical(&format!("{FLAG_PREFIX}{flag}"), values, false);
    }
    let labels: BTreeSet<&str> = targets.iter().map(|t| t.label.as_str()).collect();
    let packages: BTreeSet<&str> = targets.iter().map(|t| t.package()).collect();
    b.insert_numeric(TARGET_COUNT, labels.len() as f64, true);
    b.insert_numeric(PACKAGE_COUNT, packages.len() as f64, true);
    b.insert_categorical(TARGETS, labels, true);
    b.insert_categorical(PACKAGES, packages, true);
    b
}

/// Adds prefix splits and cumulative count buckets.
///
/// A count in bucket `k` emits bucket values `1..=k`, so a larger count only
/// ever adds one-hot entries.
pub fn add_synthetic(bundle: &mut FeatureBundle, targets: &[Target], spec: &FeatureSpec) -> Result<()> {
    let mut prefixes = BTreeSet::new();
    for t in targets {
        prefixes.extend(prefix_splits(&t.label)?);
    }
    bundle.insert_categorical(TARGET_PREFIX, prefixes, true);
    let counts = [
        (TARGET_COUNT, TARGET_COUNT_BUCKET, &spec.buckets.target_count),
        (PACKAGE_COUNT, PACKAGE_COUNT_BUCKET, &spec.buckets.package_count),
    ];
    for (count_name, bucket_name, edges) in counts {
        let count = bundle.numeric.get(count_name).copied().unwrap_or(0.0);
        let bucket = bucketize(count, edges);
        bundle.insert_categorical(bucket_name, (1..=bucket).map(|j| j.to_string()), true);
    }
    Ok(())
}

/// `//a/b/c:t` becomes `//a/b/c:t`, `//a/b/c`, `//a/b`, `//a`.
pub fn prefix_splits(label: &str) -> Result<Vec<String>> {
    let label = canonical_label(label)?;
    let (pkg, _) = label.split_once(':').expect("validated label has ':'");
    let mut out = vec![label.clone()];
    let mut dir = pkg;
    loop {
        out.push(dir.to_string());
        match dir.rfind('/') {
            Some(i) if i > 1 => dir = &dir[..i],
            _ => break,
        }
    }
    Ok(out)
}

/// Index of the first boundary `>= count`, or `boundaries.len()`.
pub fn bucketize(count: f64, boundaries: &[f64]) -> usize {
    boundaries.partition_point(|b| *b < count)
}

/// Interior quantile edges splitting `values` into `buckets` groups.
/// `buckets = 2` yields the median.
pub fn quantile_edges(values: &[f64], buckets: usize) -> Vec<f64> {
    if values.is_empty() || buckets < 2 {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return Vec::new();
    }
    let mut edges: Vec<f64> = (1..buckets)
        .map(|q| {
            let pos = q as f64 / buckets as f64 * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        })
        .collect();
    edges.dedup();
    edges
}

/// Adds one categorical feature per cross: the Cartesian product of the
/// member value sets, values joined with [`CROSS_VALUE_SEP`].
pub fn apply_crosses(mut bundle: FeatureBundle, spec: &FeatureSpec) -> Result<FeatureBundle> {
    for cross in &spec.crosses {
        let mut product: Vec<String> = vec![String::new()];
        let mut derived = false;
        for (i, member) in cross.features.iter().enumerate() {
            let values = bundle
                .categorical
                .get(member)
                .ok_or_else(|| Error::UnknownFeature(member.clone()))?;
            derived |= bundle.is_target_derived(member);
            let mut next = Vec::with_capacity(product.len() * values.len());
            for prefix in &product {
                for v in values {
                    let mut s = prefix.clone();
                    if i > 0 {
                        s.push(CROSS_VALUE_SEP);
                    }
                    s.push_str(v);
                    next.push(s);
                }
            }
            product = next;
        }
        bundle.insert_categorical(&cross.name(), product, derived);
    }
    Ok(bundle)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Maps a feature key into its half of the hash space.
pub fn hash_index(key: &str, target_derived: bool, hash_dim: usize) -> u32 {
    let half = (hash_dim / 2) as u64;
    let h = fnv1a64(key.as_bytes()) & (half - 1);
    if target_derived {
        (half | h) as u32
    } else if h == 0 {
        1
    } else {
        h as u32
    }
}

pub fn categorical_key(name: &str, value: &str) -> String {
    let mut key = String::with_capacity(name.len() + value.len() + 1);
    key.push_str(name);
    key.push('=');
    key.push_str(value);
    key
}

pub fn featurize(bundle: &FeatureBundle, spec: &FeatureSpec) -> SparseVector {
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    acc.insert(0, 1.0);
    for (name, values) in &bundle.categorical {
        let derived = bundle.is_target_derived(name);
        for v in values {
            let idx = hash_index(&categorical_key(name, v), derived, spec.hash_dim);
            *acc.entry(idx).or_insert(0.0) += 1.0;
        }
    }
    for (name, value) in &bundle.numeric {
        let idx = hash_index(name, bundle.is_target_derived(name), spec.hash_dim);
        *acc.entry(idx).or_insert(0.0) += value * spec.numeric_scale;
    }
    SparseVector { dim: spec.hash_dim, entries: acc.into_iter().collect() }
}

/// Sorted, duplicate-free `(index, value)` pairs. Index 0 is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub dim: usize,
    pub entries: Vec<(u32, f64)>,
}

impl SparseVector {
    /// Builds a vector from arbitrary pairs: sorts, sums duplicates and adds
    /// the bias entry if missing.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for (i, v) in pairs {
            if i as usize >= dim {
                return Err(Error::DimMismatch { expected: dim, actual: i as usize + 1 });
            }
            *acc.entry(i).or_insert(0.0) += v;
        }
        acc.entry(0).or_insert(1.0);
        Ok(SparseVector { dim, entries: acc.into_iter().collect() })
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|(i, _)| *i)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn squared_norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum()
    }
}

impl fmt::Display for SparseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, (i, v)) in self.entries.iter().enumerate() {
            if n > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{i}:{v}")?;
        }
        Ok(())
    }
}

impl SparseVector {
    /// Parses the `index:value` text form.
    pub fn parse(dim: usize, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for tok in text.split_whitespace() {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| Error::InvalidValue(format!("bad sparse entry {tok:?}")))?;
            let i = u32::from_str(i).map_err(|e| Error::InvalidValue(e.to_string()))?;
            let v = f64::from_str(v).map_err(|e| Error::InvalidValue(e.to_string()))?;
            entries.push((i, v));
        }
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidValue("sparse indices must ascend".into()));
        }
        Self::from_pairs(dim, entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BuildFlags, ContextKind, ExecutionContext, Priority};
    use proptest::prelude::*;

    fn info() -> RequestInfo {
        let mut i = RequestInfo::new(
            ExecutionContext { kind: ContextKind::Workspace, id: "ws".into() },
            BuildFlags::parse_args(&["--jobs=200", "--keep_going", "--color=yes"]).unwrap(),
            Priority::High,
        );
        i.command = "test".into();
        i.tool_tag = "presubmit".into();
        i
    }

    fn t(label: &str) -> Target {
        Target::parse(label, Default::default(), "java_test").unwrap()
    }

    #[test]
    fn counts_targets_and_packages() {
        let b = extract_basic(&info(), &[t("//a:x"), t("//a:y")], &FeatureSpec::default());
        assert_eq!(b.numeric[TARGET_COUNT], 2.0);
        assert_eq!(b.numeric[PACKAGE_COUNT], 1.0);
    }

    #[test]
    fn flag_and_priority_values() {
        let b = extract_basic(&info(), &[t("//a:x")], &FeatureSpec::default());
        assert_eq!(b.categorical["flag:--jobs"], BTreeSet::from(["200".to_string()]));
        assert_eq!(b.categorical["flag:--keep_going"], BTreeSet::from(["true".to_string()]));
        assert!(!b.categorical.contains_key("flag:--color"));
        assert_eq!(b.categorical[PRIORITY], BTreeSet::from(["high".to_string()]));
        assert!(b.categorical[USER].is_empty());
    }

    #[test]
    fn prefix_split_examples() {
        assert_eq!(prefix_splits("//a/b/c:t").unwrap(), ["//a/b/c:t", "//a/b/c", "//a/b", "//a"]);
        assert_eq!(prefix_splits("//a:t").unwrap(), ["//a:t", "//a"]);
        assert_eq!(prefix_splits("//x/y:z").unwrap(), ["//x/y:z", "//x/y", "//x"]);
        assert!(prefix_splits("x/y:z").is_err());
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucketize(3.0, &[5.0]), 0);
        assert_eq!(bucketize(7.0, &[5.0]), 1);
        assert_eq!(bucketize(5.0, &[5.0]), 0);
        assert_eq!(bucketize(9.0, &[]), 0);
    }

    #[test]
    fn median_edges() {
        assert_eq!(quantile_edges(&[1.0, 2.0, 3.0, 4.0, 5.0], 2), [3.0]);
        assert_eq!(quantile_edges(&[1.0, 1.0, 1.0], 4), [1.0]);
        assert!(quantile_edges(&[], 4).is_empty());
    }

    #[test]
    fn cross_of_singletons() {
        let spec = FeatureSpec { crosses: vec![Cross::new(&[PRIORITY, COMMAND])], ..Default::default() };
        let b = spec.bundle(&info(), &[t("//a:x")]).unwrap();
        let name = format!("{PRIORITY}×{COMMAND}");
        assert_eq!(b.categorical[&name], BTreeSet::from(["high\u{1f}test".to_string()]));
        assert!(!b.is_target_derived(&name));
    }

    #[test]
    fn cross_size_is_product() {
        let spec = FeatureSpec { crosses: vec![Cross::new(&[PACKAGES, TOOL_TAG])], ..Default::default() };
        let b = spec.bundle(&info(), &[t("//a:x"), t("//b:x"), t("//c/d:x")]).unwrap();
        assert_eq!(b.categorical[&format!("{PACKAGES}×{TOOL_TAG}")].len(), 3);
        assert!(b.is_target_derived(&format!("{PACKAGES}×{TOOL_TAG}")));
    }

    #[test]
    fn cross_missing_member() {
        let spec = FeatureSpec { crosses: vec![Cross::new(&[PRIORITY, "nope"])], ..Default::default() };
        let b = extract_basic(&info(), &[t("//a:x")], &spec);
        assert!(matches!(apply_crosses(b, &spec), Err(Error::UnknownFeature(f)) if f == "nope"));
        assert!(matches!(spec.validate(), Err(Error::UnknownFeature(_))));
    }

    #[test]
    fn too_many_crosses() {
        let spec = FeatureSpec {
            crosses: (0..7).map(|_| Cross::new(&[PRIORITY, COMMAND])).collect(),
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn empty_bundle_is_bias_only() {
        let v = featurize(&FeatureBundle::default(), &FeatureSpec::default());
        assert_eq!(v.entries, [(0, 1.0)]);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn namespaces_split_hash_space() {
        let spec = FeatureSpec { hash_dim: 64, ..Default::default() };
        let r = spec.monotone_range();
        let v = spec.vectorize(&info(), &[t("//a/b:x"), t("//c:y")]).unwrap();
        let b = spec.bundle(&info(), &[t("//a/b:x"), t("//c:y")]).unwrap();
        for (name, values) in &b.categorical {
            for value in values {
                let idx = hash_index(&categorical_key(name, value), b.is_target_derived(name), 64);
                assert_eq!(r.contains(&idx), b.is_target_derived(name), "{name}");
                assert!(idx >= 1);
            }
        }
        assert!(v.entries.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = FeatureSpec {
            crosses: vec![Cross::new(&[PRIORITY, PACKAGES])],
            buckets: Buckets { target_count: vec![5.0, 50.0], package_count: vec![2.0] },
            ..Default::default()
        };
        let back = FeatureSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
        let minimal = FeatureSpec::from_toml("hash_dim = 1024\n[[crosses]]\nfeatures = [\"priority\", \"tool_tag\"]\n").unwrap();
        assert_eq!(minimal.hash_dim, 1024);
        assert_eq!(minimal.crosses.len(), 1);
    }

    #[test]
    fn sparse_text_form() {
        let v = SparseVector::from_pairs(16, [(3, 2.5), (0, 1.0), (3, 0.5)]).unwrap();
        assert_eq!(v.to_string(), "0:1 3:3");
        assert_eq!(SparseVector::parse(16, &v.to_string()).unwrap(), v);
        assert!(SparseVector::parse(16, "3:1 2:1").is_err());
        assert!(SparseVector::from_pairs(4, [(9, 1.0)]).is_err());
    }

    fn arb_labels() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("//[a-e](/[a-e]){0,2}:[a-f]{1,2}", 1..12)
    }

    proptest! {
        #[test]
        fn extension_only_adds_target_indices(labels in arb_labels(), extra in "//[a-e](/[a-e]){0,2}:[a-f]{1,2}") {
            let spec = FeatureSpec {
                hash_dim: 1 << 12,
                buckets: Buckets { target_count: vec![2.0, 5.0], package_count: vec![1.0, 3.0] },
                crosses: vec![Cross::new(&[PACKAGES, PRIORITY]), Cross::new(&[TARGET_COUNT_BUCKET, TOOL_TAG])],
                ..Default::default()
            };
            let base: Vec<Target> = labels.iter().map(|l| t(l)).collect();
            let mut ext = base.clone();
            ext.push(t(&extra));
            let a = spec.vectorize(&info(), &base).unwrap();
            let b = spec.vectorize(&info(), &ext).unwrap();
            prop_assert_eq!(&a, &spec.vectorize(&info(), &base).unwrap());
            let r = spec.monotone_range();
            let bmap: BTreeMap<u32, f64> = b.entries.iter().copied().collect();
            for (i, v) in &a.entries {
                if r.contains(i) {
                    prop_assert!(bmap.get(i).copied().unwrap_or(0.0) >= *v);
                } else {
                    prop_assert_eq!(bmap.get(i).copied(), Some(*v));
                }
            }
            for (i, _) in &b.entries {
                if !r.contains(i) {
                    prop_assert!(a.entries.iter().any(|(j, _)| j == i));
                }
            }
        }
    }
}
