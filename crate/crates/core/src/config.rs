//! Run configuration: model architecture, synthetic scenario, training and
//! evaluation settings. Every field defaults to the desk preset.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::AttnScale;

/// Hourly regional frames fed to the regional encoder.
pub const HISTORY_FRAMES: usize = 6;
/// Hourly lead times produced per coupled step.
pub const LEAD_HOURS: usize = 6;
/// Fine cells per coarse cell along each axis.
pub const REFINEMENT: usize = 5;
/// Canonical regional channel order.
pub const REGIONAL_VARIABLES: [&str; 7] = ["U", "V", "T", "Q", "P", "TCC", "SSRD"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Adaptive,
    Random,
    FixedGrid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    #[default]
    Bidirectional,
    /// Global-to-regional only; the global stream is never written.
    Unidirectional,
    /// Standalone regional model: no ScaleMixer and no global tokens in the heads.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub global_height: usize,
    pub global_width: usize,
    pub upper_air_vars: usize,
    pub pressure_levels: usize,
    pub surface_vars: usize,
    pub static_channels: usize,
    /// Global patch size `P`.
    pub patch: usize,
    /// Regional patch size `p`; must equal `5·P`.
    pub region_patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Global encoder depth `M`.
    pub global_layers: usize,
    /// Coupling blocks `k` (regional encoder layers and ScaleMixer modules).
    pub blocks: usize,
    /// Key positions `m` per ScaleMixer.
    pub key_positions: usize,
    pub regional_height: usize,
    pub regional_width: usize,
    pub regional_vars: usize,
    /// Top-left global token covered by the region.
    pub region_token_row: usize,
    pub region_token_col: usize,
    pub position_conv_channels: usize,
    pub global_head_hidden: usize,
    pub head_hidden: usize,
    pub fourier_dim: usize,
    pub attn_scale: AttnScale,
    pub dropout: f64,
    pub drop_path: f64,
    pub sampling: Sampling,
    pub coupling: Coupling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            global_height: 32,
            global_width: 64,
            upper_air_vars: 2,
            pressure_levels: 2,
            surface_vars: 2,
            static_channels: 2,
            patch: 4,
            region_patch: 20,
            dim: 32,
            heads: 4,
            mlp_ratio: 4,
            global_layers: 8,
            blocks: 4,
            key_positions: 8,
            regional_height: 40,
            regional_width: 60,
            regional_vars: 7,
            region_token_row: 3,
            region_token_col: 7,
            position_conv_channels: 8,
            global_head_hidden: 32,
            head_hidden: 64,
            fourier_dim: 32,
            attn_scale: AttnScale::PerHead,
            dropout: 0.0,
            drop_path: 0.0,
            sampling: Sampling::Adaptive,
            coupling: Coupling::Bidirectional,
        }
    }

    /// Full-size architecture. Only ever counted, never allocated.
    pub fn paper_scale() -> Self {
        Self {
            global_height: 720,
            global_width: 1440,
            upper_air_vars: 5,
            pressure_levels: 13,
            surface_vars: 4,
            static_channels: 3,
            patch: 6,
            region_patch: 30,
            dim: 1536,
            heads: 8,
            mlp_ratio: 4,
            global_layers: 24,
            blocks: 4,
            key_positions: 64,
            regional_height: 1200,
            regional_width: 1800,
            regional_vars: 7,
            region_token_row: 6,
            region_token_col: 120,
            position_conv_channels: 384,
            global_head_hidden: 1536,
            head_hidden: 768,
            fourier_dim: 1536,
            attn_scale: AttnScale::PerHead,
            dropout: 0.1,
            drop_path: 0.1,
            sampling: Sampling::Adaptive,
            coupling: Coupling::Bidirectional,
        }
    }

    /// Total global channels `C`.
    pub fn global_channels(&self) -> usize {
        self.upper_air_channels() + self.surface_vars + self.static_channels
    }

    pub fn upper_air_channels(&self) -> usize {
        self.upper_air_vars * self.pressure_levels
    }

    /// Predicted global channels (static channels excluded).
    pub fn predicted_channels(&self) -> usize {
        self.global_channels() - self.static_channels
    }

    pub fn global_grid(&self) -> (usize, usize) {
        (self.global_height / self.patch, self.global_width / self.patch)
    }

    pub fn global_tokens(&self) -> usize {
        let (a, b) = self.global_grid();
        a * b
    }

    pub fn regional_grid(&self) -> (usize, usize) {
        (self.regional_height / self.region_patch, self.regional_width / self.region_patch)
    }

    pub fn regional_tokens(&self) -> usize {
        let (a, b) = self.regional_grid();
        a * b
    }

    /// Global encoder layers per coupling block (`L = M / k`).
    pub fn layers_per_block(&self) -> usize {
        self.global_layers / self.blocks.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("global_height", self.global_height),
            ("global_width", self.global_width),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("global_layers", self.global_layers),
            ("blocks", self.blocks),
            ("key_positions", self.key_positions),
            ("regional_height", self.regional_height),
            ("regional_width", self.regional_width),
            ("regional_vars", self.regional_vars),
            ("position_conv_channels", self.position_conv_channels),
            ("global_head_hidden", self.global_head_hidden),
            ("head_hidden", self.head_hidden),
            ("fourier_dim", self.fourier_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.predicted_channels() == 0 {
            return Err(Error::config("surface_vars", "no predicted global channels"));
        }
        if self.global_height % self.patch != 0 || self.global_width % self.patch != 0 {
            return Err(Error::config(
                "patch",
                format!("{} does not divide the {}x{} global grid", self.patch, self.global_height, self.global_width),
            ));
        }
        if self.region_patch != REFINEMENT * self.patch {
            return Err(Error::config("region_patch", format!("must equal {REFINEMENT}·patch = {}", REFINEMENT * self.patch)));
        }
        if self.regional_height % self.region_patch != 0 || self.regional_width % self.region_patch != 0 {
            return Err(Error::config(
                "region_patch",
                format!("{} does not divide the {}x{} regional grid", self.region_patch, self.regional_height, self.regional_width),
            ));
        }
        if self.global_layers % self.blocks != 0 {
            return Err(Error::config(
                "blocks",
                format!("global_layers {} is not a multiple of blocks {}", self.global_layers, self.blocks),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config("heads", format!("dim {} not divisible by {}", self.dim, self.heads)));
        }
        if self.fourier_dim % 2 != 0 {
            return Err(Error::config("fourier_dim", "must be even"));
        }
        if self.key_positions > self.global_tokens() {
            return Err(Error::config(
                "key_positions",
                format!("{} exceeds the {} global tokens", self.key_positions, self.global_tokens()),
            ));
        }
        let (gh, gw) = self.global_grid();
        let (rh, rw) = self.regional_grid();
        if self.region_token_row + rh > gh || self.region_token_col + rw > gw {
            return Err(Error::config(
                "region_token_row",
                format!(
                    "region of {rh}x{rw} tokens at ({}, {}) leaves the {gh}x{gw} global token grid",
                    self.region_token_row, self.region_token_col
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("dropout", "rates must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Parameters of the synthetic multiscale world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Coarse grid rows/cols; the fine grid is `REFINEMENT×` denser.
    pub global_height: usize,
    pub global_width: usize,
    /// Fine-cell offset of the region's top-left corner.
    pub region_row: usize,
    pub region_col: usize,
    pub region_height: usize,
    pub region_width: usize,
    /// Ridge height in orography units and ridge wavelength in fine cells.
    pub ridge_amplitude: f64,
    pub ridge_wavelength: f64,
    /// Mean wind speed in fine cells per hour.
    pub base_wind: f64,
    /// Hours for the mean wind to rotate once (0 disables rotation).
    pub rotation_period: f64,
    /// Amplitude of the large-scale streamfunction modes, fine cells per hour.
    pub mode_amplitude: f64,
    /// Gain of wind speed with normalized terrain height.
    pub terrain_wind_gain: f64,
    pub noise_scale: f64,
    /// Hourly fine frames to generate.
    pub n_timesteps: usize,
    /// Day-of-year of the first frame (frame 0 is 00 UTC).
    pub start_day: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            global_height: 32,
            global_width: 64,
            region_row: 60,
            region_col: 140,
            region_height: 40,
            region_width: 60,
            ridge_amplitude: 1.0,
            ridge_wavelength: 24.0,
            base_wind: 1.5,
            rotation_period: 240.0,
            mode_amplitude: 1.0,
            terrain_wind_gain: 0.5,
            noise_scale: 0.02,
            n_timesteps: 1920,
            start_day: 1,
        }
    }
}

pub const MIN_TIMESTEPS: usize = 12;

impl ScenarioConfig {
    pub fn fine_height(&self) -> usize {
        self.global_height * REFINEMENT
    }

    pub fn fine_width(&self) -> usize {
        self.global_width * REFINEMENT
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_timesteps < MIN_TIMESTEPS {
            return Err(Error::config("data.n_timesteps", format!("{} is below the minimum of {MIN_TIMESTEPS}", self.n_timesteps)));
        }
        if self.global_height == 0 || self.global_width == 0 {
            return Err(Error::config("data.global_height", "grid must be non-empty"));
        }
        if self.region_height == 0
            || self.region_width == 0
            || self.region_row + self.region_height > self.fine_height()
            || self.region_col + self.region_width > self.fine_width()
        {
            return Err(Error::config("data.region_row", "region must lie inside the global domain"));
        }
        if self.ridge_wavelength <= 0.0 {
            return Err(Error::config("data.ridge_wavelength", "must be positive"));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::config("data.noise_scale", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    /// Samples averaged per optimizer step.
    pub batch_size: usize,
    /// Global pretraining steps.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Regional one-step training steps.
    pub steps: usize,
    /// Rollout fine-tuning steps and fixed learning rate.
    pub rollout_steps: usize,
    pub rollout_lr: f64,
    pub horizon_steps: usize,
    /// Validation cadence for the training log (0 = only at the end).
    pub eval_every: usize,
    /// Per-surface-variable weights `w^S`; empty means all ones.
    pub surface_weights: Vec<f64>,
    /// Per (upper-air variable, level) weights `w^A`, variable-major; empty means all ones.
    pub upper_air_weights: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            min_lr: 1e-6,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            batch_size: 1,
            pretrain_steps: 1500,
            pretrain_lr: 1e-3,
            steps: 2000,
            rollout_steps: 150,
            rollout_lr: 3e-5,
            horizon_steps: 8,
            eval_every: 500,
            surface_weights: Vec::new(),
            upper_air_weights: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.lr < 0.0 || self.min_lr < 0.0 || self.rollout_lr < 0.0 || self.pretrain_lr < 0.0 {
            return Err(Error::config("train.lr", "learning rates must be non-negative"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.horizon_steps == 0 {
            return Err(Error::config("train.horizon_steps", "must be at least 1"));
        }
        if !self.surface_weights.is_empty() && self.surface_weights.len() != model.surface_vars {
            return Err(Error::config("train.surface_weights", "one weight per surface variable"));
        }
        if !self.upper_air_weights.is_empty() && self.upper_air_weights.len() != model.upper_air_channels() {
            return Err(Error::config("train.upper_air_weights", "one weight per (variable, level) pair"));
        }
        Ok(())
    }

    pub fn surface_weights(&self, model: &ModelConfig) -> Vec<f64> {
        if self.surface_weights.is_empty() {
            vec![1.0; model.surface_vars]
        } else {
            self.surface_weights.clone()
        }
    }

    pub fn upper_air_weights(&self, model: &ModelConfig) -> Vec<f64> {
        if self.upper_air_weights.is_empty() {
            vec![1.0; model.upper_air_channels()]
        } else {
            self.upper_air_weights.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Coupled steps per forecast (8 → 48 hourly lead times).
    pub rollout_steps: usize,
    /// Lead time the ablation table reports RMSE at.
    pub ablation_lead_hours: usize,
    /// Regional-encoder depths for the sensitivity sweep.
    pub k_sweep: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { rollout_steps: 8, ablation_lead_hours: 24, k_sweep: vec![2, 4, 8] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: ScenarioConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Miniature end-to-end configuration for tests and smoke runs.
    pub fn toy() -> Self {
        let model = ModelConfig {
            global_height: 8,
            global_width: 16,
            patch: 2,
            region_patch: 10,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            global_layers: 2,
            blocks: 2,
            key_positions: 3,
            regional_height: 20,
            regional_width: 20,
            region_token_row: 1,
            region_token_col: 3,
            position_conv_channels: 4,
            global_head_hidden: 6,
            head_hidden: 6,
            fourier_dim: 4,
            ..ModelConfig::desk()
        };
        let data = ScenarioConfig {
            global_height: 8,
            global_width: 16,
            region_row: 10,
            region_col: 30,
            region_height: 20,
            region_width: 20,
            n_timesteps: 240,
            ..ScenarioConfig::default()
        };
        let train = TrainConfig {
            warmup_steps: 5,
            pretrain_steps: 20,
            steps: 20,
            rollout_steps: 4,
            horizon_steps: 2,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let eval = EvalConfig { rollout_steps: 2, ablation_lead_hours: 6, k_sweep: vec![1, 2] };
        Self { model, data, train, eval }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate(&self.model)?;
        let m = &self.model;
        let d = &self.data;
        if d.global_height != m.global_height || d.global_width != m.global_width {
            return Err(Error::config("data.global_height", "scenario grid differs from model grid"));
        }
        if d.region_height != m.regional_height || d.region_width != m.regional_width {
            return Err(Error::config("data.region_height", "scenario region differs from model region"));
        }
        if m.regional_vars != REGIONAL_VARIABLES.len() {
            return Err(Error::config("model.regional_vars", "the synthetic world has 7 regional channels"));
        }
        if m.global_channels() != 8 || m.upper_air_vars != 2 || m.pressure_levels != 2 || m.static_channels != 2 {
            return Err(Error::config(
                "model.upper_air_vars",
                "the synthetic world provides 2 upper-air variables on 2 levels, 2 surface and 2 static channels",
            ));
        }
        if d.region_row != m.region_token_row * m.region_patch || d.region_col != m.region_token_col * m.region_patch {
            return Err(Error::config(
                "data.region_row",
                format!(
                    "region offset must be ({}, {}) fine cells to align with global token ({}, {})",
                    m.region_token_row * m.region_patch,
                    m.region_token_col * m.region_patch,
                    m.region_token_row,
                    m.region_token_col
                ),
            ));
        }
        if self.eval.rollout_steps == 0 {
            return Err(Error::config("eval.rollout_steps", "must be at least 1"));
        }
        if self.eval.ablation_lead_hours == 0 || self.eval.ablation_lead_hours > self.eval.rollout_steps * LEAD_HOURS {
            return Err(Error::config("eval.ablation_lead_hours", "must lie within the rollout horizon"));
        }
        for &k in &self.eval.k_sweep {
            if k == 0 || m.global_layers % k != 0 {
                return Err(Error::config("eval.k_sweep", format!("{k} does not divide global_layers")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        RunConfig::default().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[model]\ndimm = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "dimm"), "{err}");
    }

    #[test]
    fn short_series_names_the_field() {
        let err = RunConfig::from_toml("[data]\nn_timesteps = 5\n").unwrap_err();
        assert!(err.to_string().contains("data.n_timesteps"), "{err}");
    }

    #[test]
    fn layer_split_must_be_exact() {
        let mut m = ModelConfig::desk();
        m.blocks = 3;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::desk();
        m.region_patch = 16;
        assert!(m.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.lr = 1e-3;
        assert_ne!(a.hash(), b.hash());
        let round = RunConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(round, a);
    }
}
