//! Domain types shared by every other module.
//!
//! These are plain value types. Behavior is limited to validation and the
//! canonical (byte-wise) ordering of targets.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A build target: the unit being batched.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub label: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub rule_kind: String,
}

impl Target {
    /// Validates `label` and builds a target.
    pub fn parse(label: &str, tags: BTreeSet<String>, rule_kind: &str) -> Result<Self> {
        let label = canonical_label(label)?;
        Ok(Target {
            label,
            tags,
            rule_kind: rule_kind.to_string(),
        })
    }

    /// The package part of the label, e.g. `//a/b/c` for `//a/b/c:t1`.
    pub fn package(&self) -> &str {
        split_label(&self.label).map(|(p, _)| p).unwrap_or(&self.label)
    }

    pub fn name(&self) -> &str {
        split_label(&self.label).map(|(_, n)| n).unwrap_or("")
    }

    /// Re-checks the label, e.g. after deserializing from an untrusted source.
    pub fn validate(&self) -> Result<()> {
        canonical_label(&self.label).map(|_| ())
    }
}

impl Ord for Target {
    fn cmp(&self, other: &Self) -> Ordering {
        self.label
            .as_bytes()
            .cmp(other.label.as_bytes())
            .then_with(|| self.rule_kind.cmp(&other.rule_kind))
            .then_with(|| self.tags.cmp(&other.tags))
    }
}

impl PartialOrd for Target {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Convenience wrapper over [`Target::parse`].
pub fn parse_target(label: &str, tags: BTreeSet<String>, rule_kind: &str) -> Result<Target> {
    Target::parse(label, tags, rule_kind)
}

fn split_label(label: &str) -> Option<(&str, &str)> {
    let colon = label.rfind(':')?;
    Some((&label[..colon], &label[colon + 1..]))
}

/// Validates a `//pkg/path:name` label. Trailing and leading whitespace is
/// trimmed; interior whitespace is rejected.
pub(crate) fn canonical_label(label: &str) -> Result<String> {
    let trimmed = label.trim();
    let malformed = |why: &str| Error::MalformedLabel {
        label: label.to_string(),
        reason: why.to_string(),
    };
    let rest = trimmed
        .strip_prefix("//")
        .ok_or_else(|| malformed("missing leading //"))?;
    if trimmed.chars().any(char::is_whitespace) {
        return Err(malformed("contains whitespace"));
    }
    let (pkg, name) = rest
        .split_once(':')
        .ok_or_else(|| malformed("missing ':'"))?;
    if name.is_empty() || name.contains(':') {
        return Err(malformed("bad target name"));
    }
    if pkg.is_empty() || pkg.split('/').any(str::is_empty) {
        return Err(malformed("package needs at least one non-empty segment"));
    }
    Ok(trimmed.to_string())
}

/// Ordered build flags. Duplicate keys are kept in order.
///
/// Serializes as a JSON list of `[key, value]` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BuildFlags {
    pub entries: Vec<(String, String)>,
}

impl BuildFlags {
    pub fn new(entries: Vec<(String, String)>) -> Result<Self> {
        let flags = BuildFlags { entries };
        flags.validate()?;
        Ok(flags)
    }

    pub fn validate(&self) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !k.starts_with("--")) {
            Some((k, _)) => Err(Error::InvalidFlag(k.clone())),
            None => Ok(()),
        }
    }

    /// Parses command-line style flags: `--key=value` or bare `--key`.
    pub fn parse_args<S: AsRef<str>>(args: &[S]) -> Result<Self> {
        let entries = args
            .iter()
            .map(|a| {
                let a = a.as_ref();
                match a.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => (a.to_string(), String::new()),
                }
            })
            .collect();
        Self::new(entries)
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextKind {
    Workspace,
    Revision,
}

/// Where the build runs: a client workspace or a committed revision.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecutionContext {
    pub kind: ContextKind,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExecutorType {
    X86,
    Gpu,
    Mac,
    Tpu,
    Other(String),
}

impl fmt::Display for ExecutorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutorType::X86 => f.write_str("x86"),
            ExecutorType::Gpu => f.write_str("gpu"),
            ExecutorType::Mac => f.write_str("mac"),
            ExecutorType::Tpu => f.write_str("tpu"),
            ExecutorType::Other(s) => write!(f, "other:{s}"),
        }
    }
}

impl std::str::FromStr for ExecutorType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "x86" => ExecutorType::X86,
            "gpu" => ExecutorType::Gpu,
            "mac" => ExecutorType::Mac,
            "tpu" => ExecutorType::Tpu,
            other => match other.strip_prefix("other:") {
                Some(name) if !name.is_empty() => ExecutorType::Other(name.to_string()),
                _ => return Err(Error::Config(format!("unknown executor type {s:?}"))),
            },
        })
    }
}

/// Sorted set of executor types a target needs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct ExecutorTypeSet(pub BTreeSet<ExecutorType>);

impl ExecutorTypeSet {
    pub fn contains(&self, t: &ExecutorType) -> bool {
        self.0.contains(t)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<ExecutorType> for ExecutorTypeSet {
    fn from_iter<I: IntoIterator<Item = ExecutorType>>(iter: I) -> Self {
        ExecutorTypeSet(iter.into_iter().collect())
    }
}

impl fmt::Display for ExecutorTypeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    High,
    Medium,
    Low,
}

impl Priority {
    pub const ALL: [Priority; 3] = [Priority::High, Priority::Medium, Priority::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            Priority::High => "high",
            Priority::Medium => "medium",
            Priority::Low => "low",
        }
    }
}

impl std::str::FromStr for Priority {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "high" => Ok(Priority::High),
            "medium" => Ok(Priority::Medium),
            "low" => Ok(Priority::Low),
            _ => Err(Error::Config(format!("unknown priority {s:?}"))),
        }
    }
}

/// Why a batch has the size it has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BatchSizeReason {
    OnlyOneTarget,
    MaxTargets,
    AllRemainingTargets,
    MaxMemory,
    MaxOccupancy,
    MemoryEstimateError,
    OccupancyEstimateError,
}

impl BatchSizeReason {
    pub const ALL: [BatchSizeReason; 7] = [
        BatchSizeReason::OnlyOneTarget,
        BatchSizeReason::MaxTargets,
        BatchSizeReason::AllRemainingTargets,
        BatchSizeReason::MaxMemory,
        BatchSizeReason::MaxOccupancy,
        BatchSizeReason::MemoryEstimateError,
        BatchSizeReason::OccupancyEstimateError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BatchSizeReason::OnlyOneTarget => "ONLY_ONE_TARGET",
            BatchSizeReason::MaxTargets => "MAX_TARGETS",
            BatchSizeReason::AllRemainingTargets => "ALL_REMAINING_TARGETS",
            BatchSizeReason::MaxMemory => "MAX_MEMORY",
            BatchSizeReason::MaxOccupancy => "MAX_OCCUPANCY",
            BatchSizeReason::MemoryEstimateError => "MEMORY_ESTIMATE_ERROR",
            BatchSizeReason::OccupancyEstimateError => "OCCUPANCY_ESTIMATE_ERROR",
        }
    }
}

impl fmt::Display for BatchSizeReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An execution request: context, flags and one batch of targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Build {
    pub id: String,
    pub context: ExecutionContext,
    pub flags: BuildFlags,
    pub targets: Vec<Target>,
    pub reason: BatchSizeReason,
    pub priority: Priority,
}

impl Build {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Request-level build attributes shared by every batch cut from one stream.
///
/// `command`, `user`, `product_area` and `tool_tag` only feed the estimators;
/// they default to empty strings when a client does not send them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestInfo {
    pub context: ExecutionContext,
    #[serde(default)]
    pub flags: BuildFlags,
    pub priority: Priority,
    #[serde(default)]
    pub command: String,
    #[serde(default)]
    pub user: String,
    #[serde(default)]
    pub product_area: String,
    #[serde(default)]
    pub tool_tag: String,
}

impl RequestInfo {
    pub fn new(context: ExecutionContext, flags: BuildFlags, priority: Priority) -> Self {
        RequestInfo {
            context,
            flags,
            priority,
            command: String::new(),
            user: String::new(),
            product_area: String::new(),
            tool_tag: String::new(),
        }
    }
}

/// Executor service units. 1 ESU is one executor or 2.5 GB of executor memory.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct EsuAmount(pub f64);

impl EsuAmount {
    pub const GB_PER_ESU: f64 = 2.5;

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(EsuAmount(value))
        } else {
            Err(Error::InvalidValue(format!("ESU amount must be >= 0, got {value}")))
        }
    }

    /// ESU for an action holding `executors` executors and `memory_gb` of executor memory.
    pub fn for_action(executors: f64, memory_gb: f64) -> Self {
        EsuAmount(executors + memory_gb / Self::GB_PER_ESU)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Oom,
    DeadlineExceeded,
    OtherFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeType {
    TypeI,
    TypeII,
}

/// Per-build outcome record; the source of training labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionStats {
    pub build_id: String,
    pub peak_heap_gb: f64,
    #[serde(default)]
    pub peak_post_gc_heap_gb: Option<f64>,
    pub gc_occurred: bool,
    pub exec_time_s: f64,
    pub total_executor_service_time_esu_s: f64,
    pub outcome: Outcome,
    #[serde(default)]
    pub de_type: Option<DeType>,
}

impl ExecutionStats {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::InvalidStats(format!("{}: {why}", self.build_id)));
        match (self.gc_occurred, self.peak_post_gc_heap_gb) {
            (true, None) => return bad("gc_occurred without post-GC peak"),
            (false, Some(_)) => return bad("post-GC peak without gc_occurred"),
            (true, Some(post)) if post > self.peak_heap_gb => {
                return bad("post-GC peak exceeds peak heap")
            }
            _ => {}
        }
        if !(self.exec_time_s > 0.0) {
            return bad("exec_time_s must be positive");
        }
        if !(self.total_executor_service_time_esu_s >= 0.0) {
            return bad("negative executor service time");
        }
        if self.peak_heap_gb < 0.0 || !self.peak_heap_gb.is_finite() {
            return bad("invalid peak heap");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(ts: &[&str]) -> BTreeSet<String> {
        ts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_nested_label() {
        let t = parse_target("//a/b/c:t1", tags(&[]), "java_library").unwrap();
        assert_eq!(t.package(), "//a/b/c");
        assert_eq!(t.name(), "t1");
    }

    #[test]
    fn keeps_tags() {
        let t = parse_target("//x:y", tags(&["requires-gpu"]), "java_test").unwrap();
        assert!(t.tags.contains("requires-gpu"));
        assert_eq!(t.package(), "//x");
    }

    #[test]
    fn rejects_malformed_labels() {
        for bad in ["a/b:t", "//a/b", "//:t", "//a//b:t", "//a b:t", "//a:", "//a:b:c"] {
            assert!(
                matches!(parse_target(bad, tags(&[]), "x"), Err(Error::MalformedLabel { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn ordering_is_bytewise() {
        let a = parse_target("//a/B:t", tags(&[]), "").unwrap();
        let b = parse_target("//a/a:t", tags(&[]), "").unwrap();
        assert!(a < b, "uppercase sorts before lowercase byte-wise");
    }

    #[test]
    fn stats_validation() {
        let mut s = ExecutionStats {
            build_id: "b".into(),
            peak_heap_gb: 3.0,
            peak_post_gc_heap_gb: Some(2.0),
            gc_occurred: true,
            exec_time_s: 10.0,
            total_executor_service_time_esu_s: 0.0,
            outcome: Outcome::Ok,
            de_type: None,
        };
        assert!(s.validate().is_ok());
        s.peak_post_gc_heap_gb = Some(4.0);
        assert!(s.validate().is_err());
        s.gc_occurred = false;
        assert!(s.validate().is_err());
        s.peak_post_gc_heap_gb = None;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn esu_unifies_memory_and_executors() {
        assert_eq!(EsuAmount::for_action(1.0, 5.0).value(), 3.0);
        assert!(EsuAmount::new(-1.0).is_err());
    }
}
