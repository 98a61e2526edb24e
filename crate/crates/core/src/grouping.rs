//! Executor-type inference and per-group lexicographic sorting.
//!
//! Targets that need different executor types are never mixed in one build:
//! a build waiting on scarce GPU executors would otherwise hold back
//! x86-only targets that could have run right away.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::model::{ExecutorType, ExecutorTypeSet, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMatch {
    /// Exact match against one of the target's tags.
    Tag,
    /// Prefix match against the target's rule kind.
    RulePrefix,
}

/// One line of the executor inference rules file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorRule {
    #[serde(rename = "match")]
    pub kind: RuleMatch,
    pub pattern: String,
    pub executor_type: ExecutorType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorRules {
    #[serde(default, rename = "rule")]
    pub rules: Vec<ExecutorRule>,
    /// Keep only the first occurrence of a label within one stream.
    #[serde(default = "default_true")]
    pub dedup: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ExecutorRules {
    fn default() -> Self {
        let rule = |kind, pattern: &str, executor_type| ExecutorRule {
            kind,
            pattern: pattern.to_string(),
            executor_type,
        };
        ExecutorRules {
            rules: vec![
                rule(RuleMatch::Tag, "requires-gpu", ExecutorType::Gpu),
                rule(RuleMatch::Tag, "requires-tpu", ExecutorType::Tpu),
                rule(RuleMatch::Tag, "requires-mac", ExecutorType::Mac),
                rule(RuleMatch::RulePrefix, "ios_", ExecutorType::Mac),
                rule(RuleMatch::RulePrefix, "macos_", ExecutorType::Mac),
            ],
            dedup: true,
        }
    }
}

impl ExecutorRules {
    /// Tags win over rule kinds; rule-kind rules only apply when no tag rule
    /// matched. X86 is always part of the result.
    pub fn infer(&self, target: &Target) -> ExecutorTypeSet {
        let mut set: ExecutorTypeSet = std::iter::once(ExecutorType::X86).collect();
        let mut tagged = false;
        for r in self.rules.iter().filter(|r| r.kind == RuleMatch::Tag) {
            if target.tags.contains(&r.pattern) {
                set.0.insert(r.executor_type.clone());
                tagged = true;
            }
        }
        if !tagged {
            for r in self.rules.iter().filter(|r| r.kind == RuleMatch::RulePrefix) {
                if target.rule_kind.starts_with(&r.pattern) {
                    set.0.insert(r.executor_type.clone());
                }
            }
        }
        set
    }

    /// Partitions `targets` by executor-type set and sorts each group by label.
    pub fn group_and_sort(&self, targets: &[Target]) -> BTreeMap<ExecutorTypeSet, Vec<Target>> {
        let mut seen = HashSet::new();
        let mut groups: BTreeMap<ExecutorTypeSet, Vec<Target>> = BTreeMap::new();
        for t in targets {
            if self.dedup && !seen.insert(t.label.as_str()) {
                continue;
            }
            groups.entry(self.infer(t)).or_default().push(t.clone());
        }
        for group in groups.values_mut() {
            // stable, so duplicates (when dedup is off) keep arrival order
            group.sort_by(|a, b| a.label.as_bytes().cmp(b.label.as_bytes()));
        }
        groups
    }
}

pub fn infer_executor_types(t: &Target) -> ExecutorTypeSet {
    ExecutorRules::default().infer(t)
}

pub fn group_and_sort(targets: &[Target]) -> BTreeMap<ExecutorTypeSet, Vec<Target>> {
    ExecutorRules::default().group_and_sort(targets)
}
