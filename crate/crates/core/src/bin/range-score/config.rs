use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use range_score::metrics::MetricConfig;
use range_score::sampling::{SamplerConfig, SamplerVariant};
use range_score::scorenet::{NoiseConditioning, ScoreNetConfig};
use range_score::synthworld::SceneParams;
use range_score::training::{NoiseSchedule, TrainConfig};
use range_score::ProjectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Kitti64,
    Small256,
    Nuscenes32,
}

impl Preset {
    pub fn projection(self) -> ProjectionConfig {
        match self {
            Preset::Kitti64 => ProjectionConfig::kitti(),
            Preset::Small256 => ProjectionConfig::small(),
            Preset::Nuscenes32 => ProjectionConfig::nuscenes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Explicit twelve-entry channel plan; overrides `channel_divisor`.
    pub channels: Option<Vec<usize>>,
    pub channel_divisor: usize,
    pub circular_conv: bool,
    pub coord_channels: bool,
    pub conditioning: NoiseConditioning,
    pub init_seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            channels: None,
            channel_divisor: 1,
            circular_conv: true,
            coord_channels: true,
            conditioning: NoiseConditioning::OutputScale,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub sigma_first: f64,
    pub sigma_last: f64,
    pub levels: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            sigma_first: 50.0,
            sigma_last: 0.01,
            levels: 232,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifySection {
    pub lambda: f64,
    pub stride: usize,
    pub per_level_scaling: bool,
}

impl Default for DensifySection {
    fn default() -> Self {
        DensifySection {
            lambda: 1.0,
            stride: 4,
            per_level_scaling: false,
        }
    }
}

/// Every knob of every command. Loaded from TOML, overridden by flags, and
/// written back next to each command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub preset: Preset,
    /// Replaces the preset geometry when present.
    pub projection: Option<ProjectionConfig>,
    pub scene: SceneParams,
    pub network: NetworkSection,
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub densify: DensifySection,
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            preset: Preset::Small256,
            projection: None,
            scene: SceneParams::default(),
            network: NetworkSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            densify: DensifySection::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn projection(&self) -> ProjectionConfig {
        self.projection.unwrap_or_else(|| self.preset.projection())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        Ok(NoiseSchedule::geometric(
            s.sigma_first,
            s.sigma_last,
            s.levels,
        )?)
    }

    pub fn network(&self) -> Result<ScoreNetConfig> {
        let p = self.projection();
        let mut cfg = ScoreNetConfig::new(p.height, p.width, self.schedule.levels);
        cfg = match &self.network.channels {
            Some(c) => ScoreNetConfig {
                channels: c.clone(),
                ..cfg
            },
            None => cfg.with_channel_divisor(self.network.channel_divisor),
        };
        cfg.circular_conv = self.network.circular_conv;
        cfg.coord_channels = self.network.coord_channels;
        cfg.conditioning = self.network.conditioning;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            deterministic: self.deterministic,
            ..self.train.clone()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sampler.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.projection().validate()?;
        self.schedule()?;
        self.network()?;
        self.train_config().validate()?;
        self.sampler_config().validate()?;
        if self.densify.stride == 0 {
            bail!("densify.stride must be >= 1");
        }
        if !(self.densify.lambda >= 0.0) {
            bail!("densify.lambda must be >= 0");
        }
        Ok(())
    }
}

pub fn parse_variant(s: &str) -> Result<SamplerVariant> {
    match s {
        "as-printed" => Ok(SamplerVariant::AsPrinted),
        "ncsn-standard" => Ok(SamplerVariant::NcsnStandard),
        other => bail!("unknown sampler variant {other:?} (as-printed | ncsn-standard)"),
    }
}
