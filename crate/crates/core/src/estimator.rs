//! Trained models exposed through the batcher's [`Estimator`] interface.

use std::path::Path;
use std::sync::Arc;

use crate::batcher::{EstimateError, Estimator, EstimatorKind};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::model::{RequestInfo, Target};
use crate::pipeline::TrainedModels;
use crate::regression::{ensemble_max, predict, LinearModel};

pub const SPEC_FILE: &str = "feature_spec.toml";
pub const MEMORY_PRIMARY_FILE: &str = "memory_primary.model";
pub const MEMORY_RECENT_FILE: &str = "memory_recent.model";
pub const OCCUPANCY_FILE: &str = "occupancy.model";

/// The served model set: one feature spec, the memory pair, the occupancy model.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub spec: Arc<FeatureSpec>,
    pub memory_primary: Arc<LinearModel>,
    pub memory_recent: Option<Arc<LinearModel>>,
    pub occupancy: Arc<LinearModel>,
}

impl ModelSet {
    pub fn from_trained(t: &TrainedModels) -> Self {
        ModelSet {
            spec: Arc::new(t.spec.clone()),
            memory_primary: Arc::new(t.memory.primary.clone()),
            memory_recent: Some(Arc::new(t.memory.recent.clone())),
            occupancy: Arc::new(t.occupancy.clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SPEC_FILE), self.spec.to_toml())?;
        self.memory_primary.save(&dir.join(MEMORY_PRIMARY_FILE))?;
        if let Some(recent) = &self.memory_recent {
            recent.save(&dir.join(MEMORY_RECENT_FILE))?;
        }
        self.occupancy.save(&dir.join(OCCUPANCY_FILE))?;
        Ok(())
    }

    /// Loads a model directory. The recent memory model is optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let spec = FeatureSpec::from_toml(&std::fs::read_to_string(dir.join(SPEC_FILE))?)?;
        let memory_primary = LinearModel::load(&dir.join(MEMORY_PRIMARY_FILE))?;
        let recent_path = dir.join(MEMORY_RECENT_FILE);
        let memory_recent = if recent_path.exists() { Some(LinearModel::load(&recent_path)?) } else { None };
        let occupancy = LinearModel::load(&dir.join(OCCUPANCY_FILE))?;
        let set = ModelSet {
            spec: Arc::new(spec),
            memory_primary: Arc::new(memory_primary),
            memory_recent: memory_recent.map(Arc::new),
            occupancy: Arc::new(occupancy),
        };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        let dim = self.spec.hash_dim;
        let mut models = vec![(&self.memory_primary, EstimatorKind::Memory), (&self.occupancy, EstimatorKind::Occupancy)];
        if let Some(r) = &self.memory_recent {
            models.push((r, EstimatorKind::Memory));
        }
        for (m, kind) in models {
            if m.hash_dim != dim {
                return Err(Error::DimMismatch { expected: dim, actual: m.hash_dim });
            }
            if m.kind != kind {
                return Err(Error::KindMismatch(format!("expected a {kind:?} model, found {:?}", m.kind)));
            }
        }
        Ok(())
    }

    pub fn memory_estimator(&self) -> MemoryEstimator {
        MemoryEstimator {
            spec: self.spec.clone(),
            primary: self.memory_primary.clone(),
            recent: self.memory_recent.clone(),
        }
    }

    pub fn occupancy_estimator(&self) -> OccupancyEstimator {
        OccupancyEstimator { spec: self.spec.clone(), model: self.occupancy.clone() }
    }
}

fn to_estimate_error(e: Error) -> EstimateError {
    EstimateError(e.to_string())
}

/// Memory estimate: the max over the primary and (if present) recent model.
#[derive(Debug, Clone)]
pub struct MemoryEstimator {
    spec: Arc<FeatureSpec>,
    primary: Arc<LinearModel>,
    recent: Option<Arc<LinearModel>>,
}

impl MemoryEstimator {
    pub fn new(spec: Arc<FeatureSpec>, primary: Arc<LinearModel>, recent: Option<Arc<LinearModel>>) -> Self {
        MemoryEstimator { spec, primary, recent }
    }

    /// Estimate from the primary model alone.
    pub fn primary_only(&self, info: &RequestInfo, targets: &[Target]) -> Result<f64> {
        predict(&self.primary, &self.spec.vectorize(info, targets)?)
    }
}

impl Estimator for MemoryEstimator {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Memory
    }

    fn estimate(&self, info: &RequestInfo, targets: &[Target]) -> Result<f64, EstimateError> {
        let x = self.spec.vectorize(info, targets).map_err(to_estimate_error)?;
        match &self.recent {
            Some(recent) => ensemble_max(&self.primary, recent, &x),
            None => predict(&self.primary, &x),
        }
        .map_err(to_estimate_error)
    }
}

#[derive(Debug, Clone)]
pub struct OccupancyEstimator {
    spec: Arc<FeatureSpec>,
    model: Arc<LinearModel>,
}

impl OccupancyEstimator {
    pub fn new(spec: Arc<FeatureSpec>, model: Arc<LinearModel>) -> Self {
        OccupancyEstimator { spec, model }
    }
}

impl Estimator for OccupancyEstimator {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Occupancy
    }

    fn estimate(&self, info: &RequestInfo, targets: &[Target]) -> Result<f64, EstimateError> {
        let x = self.spec.vectorize(info, targets).map_err(to_estimate_error)?;
        predict(&self.model, &x).map_err(to_estimate_error)
    }
}
