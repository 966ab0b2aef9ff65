//! JSON run configuration shared by every command-line entry point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RecastError, Result};
use crate::integrate::AdapterKind;
use crate::mimicry::MimicryConfig;
use crate::model::RecastConfig;
use crate::til::{PretrainConfig, SuiteConfig, TilConfig, TrainMode};

/// Largest dense weight count a run may allocate.
pub const MAX_DENSE_PARAMS: usize = 50_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: RecastConfig,
    pub pretrain: PretrainConfig,
    pub mimicry: MimicryConfig,
    /// Minimum per-module cosine similarity a reconstruction must reach.
    pub similarity_threshold: f64,
    pub suite: SuiteConfig,
    pub til: TilConfig,
    pub mode: TrainMode,
    /// Trainable-parameter cap per task; unlimited when absent.
    pub budget: Option<usize>,
    pub adapter: Option<AdapterKind>,
    pub seed: u64,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: RecastConfig::uniform(6, 1, 16, 3, 2, 2),
            pretrain: PretrainConfig::default(),
            mimicry: MimicryConfig {
                max_epochs: 500,
                ..MimicryConfig::default()
            },
            similarity_threshold: 0.99,
            suite: SuiteConfig::default(),
            til: TilConfig::default(),
            mode: TrainMode::CoefficientsHead,
            budget: None,
            adapter: None,
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let dense = self
            .model
            .modules()
            .try_fold(0usize, |acc, (_, _, k)| {
                k.weight_shape().iter().try_fold(1usize, |p, &s| p.checked_mul(s)).and_then(|w| acc.checked_add(w))
            })
            .filter(|&n| n <= MAX_DENSE_PARAMS);
        if dense.is_none() {
            return Err(RecastError::InvalidArgument(format!(
                "model exceeds {MAX_DENSE_PARAMS} dense weights"
            )));
        }
        self.mimicry.validate()?;
        self.til.validate(self.model.layer_count())?;
        if let Some(a) = &self.adapter {
            a.validate()?;
        }
        if !(-1.0..=1.0).contains(&self.similarity_threshold) {
            return Err(RecastError::InvalidArgument(format!(
                "similarity_threshold must lie in [-1, 1], got {}",
                self.similarity_threshold
            )));
        }
        let s = &self.suite;
        if s.tasks < 2 || s.classes < 2 || s.classes > s.dim {
            return Err(RecastError::InvalidArgument(format!(
                "suite needs tasks ≥ 2 and 2 ≤ classes ≤ dim, got tasks={} classes={} dim={}",
                s.tasks, s.classes, s.dim
            )));
        }
        if !(s.separation > 0.0 && s.separation.is_finite() && s.cluster_std > 0.0 && s.cluster_std.is_finite()) {
            return Err(RecastError::InvalidArgument("suite separation and cluster_std must be finite and > 0".into()));
        }
        let samples = s.train_size.checked_add(s.val_size).and_then(|n| n.checked_add(s.test_size));
        if s.train_size == 0 || s.test_size == 0 || samples.and_then(|n| n.checked_mul(s.tasks * s.dim)).is_none_or(|n| n > MAX_DENSE_PARAMS) {
            return Err(RecastError::InvalidArgument("suite split sizes must be positive and desk-sized".into()));
        }
        if let Some(crate::model::ModuleKind::FullyConnected { d_in, .. }) = self.model.layers[0].first() {
            if *d_in != s.dim {
                return Err(RecastError::InvalidArgument(format!(
                    "suite dim {} does not match the first layer's input width {d_in}",
                    s.dim
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.pretrain.target_accuracy) || !(self.pretrain.learning_rate > 0.0) {
            return Err(RecastError::InvalidArgument("pretrain target_accuracy ∈ [0, 1] and learning_rate > 0 required".into()));
        }
        Ok(())
    }

    /// Applies one seed to every randomized stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.mimicry.seed = seed;
        self.suite.seed = seed;
        self.til.seed = seed;
        self
    }
}

/// Parses and validates a run configuration.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path)?)
}
