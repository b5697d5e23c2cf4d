//! Serializable run description shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{CondMode, DenoiserConfig, Objective};
use crate::error::{Error, Result};
use crate::samplers::{SamplerConfig, SamplerMode};
use crate::schedules::{BridgeSchedule, NoiseSchedule, ScheduleKind};
use crate::testbed::TestbedConfig;
use crate::training::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub bridge_beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Cosine, timesteps: 1000, bridge_beta_max: 3e-4 }
    }
}

impl ScheduleConfig {
    pub fn noise(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.timesteps)
    }

    pub fn bridge(&self) -> Result<BridgeSchedule> {
        BridgeSchedule::new(self.timesteps, self.bridge_beta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub time_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden: 256, time_dim: 64 }
    }
}

/// Target of the Gaussian sampler check, plus the source distribution for
/// the bridge variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianSettings {
    pub mu: Vec<f64>,
    pub s: f64,
    pub source_mu: Vec<f64>,
    pub source_s: f64,
    pub samples: usize,
    pub tolerance: f64,
}

impl Default for GaussianSettings {
    fn default() -> Self {
        Self {
            mu: vec![-1.0, -0.3, 0.4, 1.0],
            s: 0.5,
            source_mu: vec![0.5, 0.5, -0.5, -0.5],
            source_s: 1.0,
            samples: 10_000,
            tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    /// Pairs sampled for the CFG and speaker-swap readouts.
    pub eval_pairs: usize,
    /// Pairs in the held-out loss batch of the misalignment experiment.
    pub heldout_pairs: usize,
    pub guidance_sweep: Vec<f64>,
    pub gaussian: GaussianSettings,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self { eval_pairs: 32, heldout_pairs: 1024, guidance_sweep: vec![0.0, 1.0, 2.0, 4.0], gaussian: Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub testbed: TestbedConfig,
    pub schedule: ScheduleConfig,
    pub network: NetworkConfig,
    pub sampler: SamplerConfig,
    pub training: TrainConfig,
    pub experiment: ExperimentSettings,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            testbed: TestbedConfig::default(),
            schedule: ScheduleConfig::default(),
            network: NetworkConfig::default(),
            sampler: SamplerConfig::i2sb(),
            training: TrainConfig::default(),
            experiment: ExperimentSettings::default(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Same as the default but on the compact testbed, sized so the trained
    /// experiments finish in minutes on one core.
    pub fn compact() -> Self {
        Self { testbed: TestbedConfig::compact(), ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config always serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.testbed.validate()?;
        if self.schedule.timesteps < 2 {
            return Err(Error::Config(format!("schedule.timesteps must be >= 2, got {}", self.schedule.timesteps)));
        }
        if !(self.schedule.bridge_beta_max > 0.0 && self.schedule.bridge_beta_max.is_finite()) {
            return Err(Error::Config("schedule.bridge_beta_max must be > 0".into()));
        }
        if self.network.hidden == 0 || self.network.time_dim == 0 || !self.network.time_dim.is_multiple_of(2) {
            return Err(Error::Config("network.hidden must be > 0 and network.time_dim even and > 0".into()));
        }
        self.sampler.validate(self.schedule.timesteps)?;
        self.training.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let ex = &self.experiment;
        if ex.eval_pairs == 0 || ex.heldout_pairs == 0 {
            return Err(Error::Config("eval_pairs and heldout_pairs must be positive".into()));
        }
        if ex.guidance_sweep.is_empty()
            || ex.guidance_sweep[0] != 0.0
            || ex.guidance_sweep.windows(2).any(|w| !(w[1] > w[0]))
            || ex.guidance_sweep.iter().any(|w| !w.is_finite())
        {
            return Err(Error::Config("guidance_sweep must start at 0 and increase strictly".into()));
        }
        let g = &ex.gaussian;
        if g.mu.is_empty() || g.mu.len() != g.source_mu.len() {
            return Err(Error::Config("gaussian.mu and gaussian.source_mu must be non-empty and equally long".into()));
        }
        if !(g.s > 0.0 && g.source_s > 0.0) {
            return Err(Error::Config("gaussian standard deviations must be > 0".into()));
        }
        if g.samples < 1000 {
            return Err(Error::Config("gaussian.samples must be at least 1000".into()));
        }
        if !(g.tolerance > 0.0) {
            return Err(Error::Config("gaussian.tolerance must be > 0".into()));
        }
        Ok(())
    }

    pub fn denoiser_config(&self, cond_mode: CondMode, objective: Objective) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.testbed.channels,
            height: self.testbed.height,
            width: self.testbed.max_width,
            hidden: self.network.hidden,
            time_dim: self.network.time_dim,
            embed_dim: self.testbed.embed_dim,
            timesteps: self.schedule.timesteps,
            cond_mode,
            objective,
        }
    }

    /// Training mode and network layout implied by the sampler section:
    /// channel-concat v-prediction for DDIM, embed-inject x0-prediction for
    /// the bridge.
    pub fn model_layout(&self) -> (TrainMode, DenoiserConfig) {
        match self.sampler.mode {
            SamplerMode::Ddim => {
                (TrainMode::PaletteDdim, self.denoiser_config(CondMode::ConcatChannels, Objective::VPrediction))
            }
            SamplerMode::I2sb => (
                TrainMode::I2sb {
                    ot_ode: self.sampler.ot_ode,
                    x1_noise_std: if self.sampler.add_x1_noise { self.sampler.x1_noise_std } else { 0.0 },
                },
                self.denoiser_config(CondMode::EmbedInject, Objective::X0Prediction),
            ),
        }
    }
}
