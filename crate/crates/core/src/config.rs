//! One TOML file with a table per subsystem. Every table and key is optional.
//!
//! ```toml
//! [batching]
//! max_targets_per_batch = 900
//! occupancy_cutoff_esu = 500.0
//!
//! [cluster]
//! worker_memory_gb = 13.0
//!
//! [[executors.rule]]
//! match = "tag"
//! pattern = "requires-gpu"
//! executor_type = "Gpu"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batcher::BatchingConfig;
use crate::error::Result;
use crate::grouping::ExecutorRules;
use crate::pipeline::PipelineConfig;
use crate::simulator::{ClusterConfig, ExperimentConfig, LogParams, WorkloadParams};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub batching: BatchingConfig,
    pub executors: ExecutorRules,
    pub pipeline: PipelineConfig,
    pub cluster: ClusterConfig,
    pub workload: WorkloadParams,
    pub experiment: ExperimentConfig,
    pub logs: LogParams,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Falls back to defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Config::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.batching.validate()?;
        self.pipeline.memory.validate()?;
        self.pipeline.recent_memory_config().validate()?;
        self.pipeline.occupancy.validate()?;
        self.cluster.validate()?;
        self.workload.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::RuleMatch;
    use crate::model::ExecutorType;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let c = Config::from_toml(
            "[batching]\nmax_targets_per_batch = 500\n[cluster]\nworker_memory_gb = 16.0\n\
             [[executors.rule]]\nmatch = \"tag\"\npattern = \"needs-arm\"\nexecutor_type = { Other = \"arm\" }\n",
        )
        .unwrap();
        assert_eq!(c.batching.max_targets_per_batch, 500);
        assert_eq!(c.batching.occupancy_cutoff_esu, 500.0);
        assert_eq!(c.cluster.worker_memory_gb, 16.0);
        assert_eq!(c.cluster.deadline_s, 5400.0);
        assert_eq!(c.executors.rules.len(), 1);
        assert_eq!(c.executors.rules[0].kind, RuleMatch::Tag);
        assert_eq!(c.executors.rules[0].executor_type, ExecutorType::Other("arm".into()));
    }

    #[test]
    fn unknown_table_is_rejected() {
        assert!(Config::from_toml("[batcher]\nmax_targets_per_batch = 5\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml("[batching]\nmax_targets_per_batch = 0\n").is_err());
        assert!(Config::from_toml("[cluster]\nworker_memory_gb = -1.0\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = Config::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
    }
}
