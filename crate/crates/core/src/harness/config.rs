use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::acoustics::AcousticsConfig;
use crate::embodiment::NoiseConfig;
use crate::policy::{PolicyConfig, TrainConfig};
use crate::renderer::PredictorConfig;
use crate::rewards::RewardWeights;
use crate::world::Material;

/// Procedural world pools for training, validation and testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldsConfig {
    /// Side lengths are drawn uniformly from this inclusive range, meters.
    pub extent_min: u32,
    pub extent_max: u32,
    pub rooms_min: usize,
    pub rooms_max: usize,
    pub cell_size: f64,
    pub corridor_width: f64,
    pub palette: Vec<Material>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for WorldsConfig {
    fn default() -> Self {
        Self {
            extent_min: 12,
            extent_max: 32,
            rooms_min: 2,
            rooms_max: 6,
            cell_size: 0.25,
            corridor_width: 1.0,
            palette: Material::default_palette(),
            train: 40,
            val: 8,
            test: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// Change in mean error over all evaluation queries.
    Global,
    /// Change in error at the query nearest the agent.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub budget: usize,
    pub queries: usize,
    /// Seed of the evaluation-query draw.
    pub query_seed: u64,
    /// Minimum clearance between a query point and any wall, meters.
    pub query_margin: f64,
    pub scan_rays: usize,
    pub max_range: f64,
    pub reward_mode: RewardMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            horizon: 200,
            budget: 20,
            queries: 60,
            query_seed: 0,
            query_margin: 0.5,
            scan_rays: 64,
            max_range: 10.0,
            reward_mode: RewardMode::Global,
        }
    }
}

/// Training schedule beyond the optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Episodes collected per update; each runs in its own environment slot.
    pub episodes_per_update: usize,
    /// Validate every this many updates (0 disables).
    pub val_every: u64,
    /// Episodes per validation world.
    pub val_episodes: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { episodes_per_update: 4, val_every: 100, val_episodes: 1, checkpoint_every: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    /// `name=spec` entries; see [`super::AgentSpec::parse`].
    pub agents: Vec<String>,
    pub seeds: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            agents: vec!["random".into(), "forward".into(), "greedy".into()],
            seeds: 3,
        }
    }
}

/// Top-level configuration file. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub workers: usize,
    pub worlds: WorldsConfig,
    pub episode: EpisodeConfig,
    pub acoustics: AcousticsConfig,
    pub predictor: PredictorConfig,
    pub noise: NoiseConfig,
    pub rewards: RewardWeights,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub trainer: TrainerConfig,
    pub suite: SuiteConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            worlds: WorldsConfig::default(),
            episode: EpisodeConfig::default(),
            acoustics: AcousticsConfig::default(),
            predictor: PredictorConfig::default(),
            noise: NoiseConfig::default(),
            rewards: RewardWeights::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            trainer: TrainerConfig::default(),
            suite: SuiteConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(s: &str) -> Result<Self, HarnessError> {
        let c: Config = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let w = &self.worlds;
        if w.extent_min < 3 || w.extent_max < w.extent_min {
            return bad(format!("bad extent range {}..={}", w.extent_min, w.extent_max));
        }
        if w.rooms_min < 1 || w.rooms_max < w.rooms_min {
            return bad(format!("bad room range {}..={}", w.rooms_min, w.rooms_max));
        }
        let e = &self.episode;
        if e.budget > e.horizon || e.horizon == 0 {
            return bad(format!("need 0 < horizon and budget <= horizon, got T={} N={}", e.horizon, e.budget));
        }
        if e.queries == 0 {
            return bad("queries must be >= 1".into());
        }
        if e.scan_rays < 3 || !(e.max_range > 0.0) {
            return bad("scan_rays must be >= 3 and max_range positive".into());
        }
        if self.trainer.episodes_per_update == 0 {
            return bad("episodes_per_update must be >= 1".into());
        }
        self.acoustics.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.predictor.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.noise.validate().map_err(HarnessError::Config)?;
        self.rewards.validate().map_err(HarnessError::Config)?;
        self.policy.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.policy.pose_period <= f64::from(w.extent_max) {
            return bad("policy.pose_period must exceed worlds.extent_max".into());
        }
        Ok(())
    }

    /// Short hash of everything except parallelism, for cache keys and
    /// report headers.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 1;
        crate::policy::config_hash(&c)[..16].to_string()
    }
}
