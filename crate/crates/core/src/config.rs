//! The run configuration: every tunable of every stage in one JSON document.
//! Missing keys take their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{ScheduleConfig, VarianceMode};
use crate::error::{Error, Result};
use crate::eval::{BenchConfig, DreamConfig};
use crate::formats::write_json;
use crate::model::ArchitectureConfig;
use crate::orchestrator::PipelineConfig;
use crate::pretrain::PretrainConfig;
use crate::rng::derive_seed;
use crate::scorer::EmbedderConfig;
use crate::world::WorldConfig;

/// Artifact locations, relative to the output directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub base: PathBuf,
    pub embedder: PathBuf,
    pub pipeline: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data".into(),
            base: "base.ntc".into(),
            embedder: "embedder.ntc".into(),
            pipeline: "pipeline".into(),
            report: "bench_report".into(),
        }
    }
}

impl PathsConfig {
    pub fn resolve(&self, out: &Path) -> PathsConfig {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { out.join(p) };
        PathsConfig {
            data: r(&self.data),
            base: r(&self.base),
            embedder: r(&self.embedder),
            pipeline: r(&self.pipeline),
            report: r(&self.report),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_heldout: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_train: 512, n_heldout: 32 }
    }
}

/// Demonstration-conditioned generation at inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub guidance_weight: f64,
    pub variance: VarianceMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { guidance_weight: 3.0, variance: VarianceMode::FixedSmall }
    }
}

/// Pipeline stages, each with its own seed derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Pretrain,
    Embedder,
    Pipeline,
    Bench,
    Dream,
    Sample,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub architecture: ArchitectureConfig,
    pub pretrain: PretrainConfig,
    pub embedder: EmbedderConfig,
    pub pipeline: PipelineConfig,
    pub bench: BenchConfig,
    pub dream: DreamConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.architecture.validate()?;
        self.embedder.validate()?;
        self.pipeline.validate()?;
        self.schedule.build::<f64>()?;
        if self.architecture.image_size != self.world.image_size || self.embedder.image_size != self.world.image_size {
            return Err(Error::Invalid("world, architecture and embedder image sizes must agree".into()));
        }
        if self.dataset.n_train == 0 || self.dataset.n_heldout == 0 {
            return Err(Error::range("dataset", "both splits must be nonempty"));
        }
        if self.bench.demo_count > self.architecture.max_demos {
            return Err(Error::TooManyDemos { count: self.bench.demo_count, max: self.architecture.max_demos });
        }
        Ok(())
    }

    /// The dataset uses the run seed itself; every other stage a derived one.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Data => self.seed,
            other => derive_seed(self.seed, &[0x57a6e, other as u64]),
        }
    }

    /// Writes the fully resolved configuration as `<dir>/config.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("config.json"), self)
    }
}
