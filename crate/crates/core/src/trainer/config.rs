use serde::{Deserialize, Serialize};

use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::filternet::{FeatureConfig, FilterNetConfig};
use crate::losses::LossWeights;
use crate::static_field::StaticFieldConfig;

/// Scalar type used for parameters and tape arithmetic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Test-time appearance fitting on the left half of a view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Pixels per iteration.
    pub rays: usize,
    /// Upper bound on the left-half pixels cached for fitting.
    pub max_pixels: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.02,
            rays: 512,
            max_pixels: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub precision: Precision,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub rays_per_batch: usize,
    /// Step size at step 0; decays exponentially to `final_learning_rate`
    /// at `steps`.
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    /// Concrete temperature, annealed linearly over the run.
    pub initial_temperature: f64,
    pub final_temperature: f64,
    /// Floor added to the smoothed coarse weights before fine resampling.
    pub resample_padding: f64,
    /// Standard deviation of the initial embedding tables.
    pub embedding_scale: f64,
    /// With the filter off, the transient opacity is pinned to zero and
    /// FilterNet is never evaluated.
    pub filter_enabled: bool,
    /// Steps at the start of training that use the filter-disabled
    /// objective, so the static field fits the scene before the filter can
    /// explain pixels away.
    pub filter_warmup: u64,
    /// Scalar log cadence in steps (0 disables).
    pub log_every: u64,
    /// Validation render cadence in steps (0 disables).
    pub validate_every: u64,
    /// Rays per chunk when rendering full images.
    pub render_chunk: usize,
    pub adam: AdamConfig,
    pub fit: FitConfig,
    pub encoding: EncodingConfig,
    pub field: StaticFieldConfig,
    pub filter: FilterNetConfig,
    pub features: FeatureConfig,
    pub losses: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 20_000,
            precision: Precision::F32,
            coarse_samples: 64,
            fine_samples: 64,
            rays_per_batch: 1024,
            learning_rate: 5e-4,
            final_learning_rate: 5e-5,
            initial_temperature: 0.5,
            final_temperature: 0.25,
            resample_padding: 0.01,
            embedding_scale: 0.01,
            filter_enabled: true,
            filter_warmup: 0,
            log_every: 100,
            validate_every: 0,
            render_chunk: 2048,
            adam: AdamConfig::default(),
            fit: FitConfig::default(),
            encoding: EncodingConfig::default(),
            field: StaticFieldConfig::default(),
            filter: FilterNetConfig::default(),
            features: FeatureConfig::default(),
            losses: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Preset sized for 64×64 synthetic scenes on a CPU: narrower networks,
    /// 32 + 32 samples per ray, a faster learning-rate schedule and a
    /// static-only warm-up.
    pub fn compact() -> Self {
        let mut c = Self {
            steps: 2000,
            rays_per_batch: 512,
            coarse_samples: 32,
            fine_samples: 32,
            learning_rate: 2e-3,
            final_learning_rate: 2e-4,
            filter_warmup: 500,
            ..Self::default()
        };
        c.field.trunk_depth = 4;
        c.field.trunk_width = 64;
        c.field.color_width = 32;
        c.field.appearance_dim = 16;
        c.filter.depth = 4;
        c.filter.width = 64;
        c.filter.transient_dim = 32;
        c.encoding.pixel_levels = 6;
        c.features.adapter_width = 64;
        c.features.feature_dim = 64;
        c.losses.lambda_alpha = 0.3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.coarse_samples == 0 || self.fine_samples == 0 || self.rays_per_batch == 0 {
            return bad("sample counts and rays per batch must be at least 1");
        }
        if self.render_chunk == 0 {
            return bad("render_chunk must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.initial_temperature > 0.0 && self.final_temperature > 0.0) {
            return bad("Concrete temperatures must be positive");
        }
        if !(self.resample_padding >= 0.0) || !(self.embedding_scale > 0.0) {
            return bad("resample_padding must be non-negative and embedding_scale positive");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad("Adam betas must be in [0, 1) and epsilon positive");
        }
        if !(self.fit.learning_rate > 0.0) || self.fit.rays == 0 || self.fit.max_pixels == 0 {
            return bad("fit learning rate, rays and max_pixels must be positive");
        }
        self.encoding.validate()?;
        self.field.validate()?;
        self.filter.validate()?;
        self.losses.validate()
    }

    /// Step size at `step`: geometric interpolation between the initial and
    /// final rates.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let f = (step as f64 / self.steps.max(1) as f64).min(1.0);
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(f)
    }

    /// Whether the filter takes part in the objective at `step`.
    pub fn filter_active_at(&self, step: u64) -> bool {
        self.filter_enabled && step >= self.filter_warmup
    }

    pub fn temperature_at(&self, step: u64) -> f64 {
        let f = (step as f64 / self.steps.max(1) as f64).min(1.0);
        self.initial_temperature + f * (self.final_temperature - self.initial_temperature)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}
