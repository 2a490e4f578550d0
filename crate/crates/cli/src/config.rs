//! JSON run definitions. Every key is optional; unknown keys are rejected.

use std::path::Path;

use egif::geometry::TransformMode;
use egif::implicitnet::{EquivarianceMode, ModelConfig};
use egif::recon::Bounds;
use egif::training::{AdamHyper, LrSchedule, ShapeFamily, TrainingConfig};
use serde::{Deserialize, Serialize};

/// Model and training settings, then reconstruction and audit settings.
///
/// Defaults: mode `sim`, k 20, fractions `[0.2, 0.05]`, 32 scalar and 8
/// vector channels (64 and 0 in plain mode), decoder 32 wide with 5 blocks,
/// seed 0, 3000 iterations of one cloud with 300 surface points and 512
/// queries (half near the surface), noise 0.005, Adam at 1e-3 dropping
/// tenfold after two thirds of the run, no augmentation, sphere/box family,
/// validation on 8 shapes with 2048 queries every 100 steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: EquivarianceMode,
    pub k: usize,
    pub fractions: Vec<f64>,
    /// Mode default when absent.
    pub scalar_channels: Option<usize>,
    pub vector_channels: Option<usize>,
    pub decoder_width: usize,
    pub decoder_blocks: usize,
    pub scalar_bias: bool,
    pub seed: u64,
    pub iterations: usize,
    pub clouds_per_step: usize,
    pub surface_points: usize,
    pub queries_per_cloud: usize,
    pub noise_sd: f64,
    pub near_surface_fraction: f64,
    pub schedule: LrSchedule,
    pub adam: AdamHyper,
    pub augmentation: TransformMode,
    pub family: ShapeFamily,
    pub validation_shapes: usize,
    pub validation_queries: usize,
    pub log_every: usize,
    pub record_wall_time: bool,
    pub reconstruction: ReconSettings,
    pub audit: AuditSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconSettings {
    pub resolution: usize,
    pub tau: f64,
    pub bounds: Bounds,
    /// Uniform IoU queries per shape in `eval`.
    pub n_eval: usize,
    pub chamfer_samples: usize,
}

impl Default for ReconSettings {
    fn default() -> Self {
        Self { resolution: 64, tau: 0.5, bounds: Bounds::unit_cube(), n_eval: 10_000, chamfer_samples: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSettings {
    /// Transforms drawn per class.
    pub transforms: usize,
    pub tolerance: f64,
    /// Size of the synthetic probe cloud.
    pub cloud_points: usize,
    pub queries: usize,
    pub seed: u64,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self { transforms: 100, tolerance: 1e-8, cloud_points: 300, queries: 200, seed: 0 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(EquivarianceMode::Sim);
        let t = TrainingConfig::new(model.clone());
        Self {
            mode: model.mode,
            k: model.k,
            fractions: model.fractions,
            scalar_channels: None,
            vector_channels: None,
            decoder_width: model.decoder_width,
            decoder_blocks: model.decoder_blocks,
            scalar_bias: model.scalar_bias,
            seed: t.seed,
            iterations: t.iterations,
            clouds_per_step: t.clouds_per_step,
            surface_points: t.surface_points,
            queries_per_cloud: t.queries_per_cloud,
            noise_sd: t.noise_sd,
            near_surface_fraction: t.near_surface_fraction,
            schedule: t.schedule,
            adam: t.adam,
            augmentation: t.augmentation,
            family: t.family,
            validation_shapes: t.validation_shapes,
            validation_queries: t.validation_queries,
            log_every: t.log_every,
            record_wall_time: t.record_wall_time,
            reconstruction: ReconSettings::default(),
            audit: AuditSettings::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        Self::from_json(&text).map_err(|source| ConfigError::Parse { path: p, source })
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = ModelConfig::new(self.mode);
        ModelConfig {
            mode: self.mode,
            k: self.k,
            fractions: self.fractions.clone(),
            scalar_channels: self.scalar_channels.unwrap_or(base.scalar_channels),
            vector_channels: self.vector_channels.unwrap_or(base.vector_channels),
            decoder_width: self.decoder_width,
            decoder_blocks: self.decoder_blocks,
            scalar_bias: self.scalar_bias,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            model: self.model_config(),
            seed: self.seed,
            iterations: self.iterations,
            clouds_per_step: self.clouds_per_step,
            surface_points: self.surface_points,
            queries_per_cloud: self.queries_per_cloud,
            noise_sd: self.noise_sd,
            near_surface_fraction: self.near_surface_fraction,
            schedule: self.schedule,
            adam: self.adam,
            augmentation: self.augmentation,
            family: self.family,
            validation_shapes: self.validation_shapes,
            validation_queries: self.validation_queries,
            log_every: self.log_every,
            record_wall_time: self.record_wall_time,
        }
    }
}
