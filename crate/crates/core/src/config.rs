//! Experiment configuration: one document wiring the scene generator,
//! network, both training stages and the evaluation protocol together,
//! with every random stream derived from a single master seed.

use crate::augment::AugmentSpec;
use crate::error::{Error, Result};
use crate::eval::ProtocolSpec;
use crate::metainit::{GradAccumConfig, MetaConfig, PretrainConfig};
use crate::net::NetworkSpec;
use crate::scenes::SceneGenConfig;
use crate::seeds::{derive, Stream};
use crate::tensor::Dtype;
use crate::trainer::SupervisedConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Numeric precision the experiment runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

/// Which stage-1 strategy produces the initialization for stage 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", content = "settings", rename_all = "snake_case")]
pub enum Stage1Strategy {
    /// Skip stage 1: stage 2 starts from random initialization.
    None,
    /// Meta-initialization via inner-loop exploration and interpolating
    /// meta-updates.
    Reptile(MetaConfig),
    /// First-order support/query variant.
    Fomaml(MetaConfig),
    /// Plain supervised pretraining.
    Pretrain(PretrainConfig),
    /// Gradient accumulation as stage 1, then normal stage 2.
    GradAccum(GradAccumConfig),
    /// Gradient accumulation replacing the whole pipeline: stage 2 is
    /// skipped and the accumulated parameters are the final model.
    GradAccumSingleStage(GradAccumConfig),
}

impl Stage1Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Stage1Strategy::None => "none",
            Stage1Strategy::Reptile(_) => "reptile",
            Stage1Strategy::Fomaml(_) => "fomaml",
            Stage1Strategy::Pretrain(_) => "pretrain",
            Stage1Strategy::GradAccum(_) => "grad_accum",
            Stage1Strategy::GradAccumSingleStage(_) => "grad_accum_single_stage",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Stage1Strategy::None => Ok(()),
            Stage1Strategy::Reptile(c) | Stage1Strategy::Fomaml(c) => c.validate(),
            Stage1Strategy::Pretrain(c) => c.validate(),
            Stage1Strategy::GradAccum(c) | Stage1Strategy::GradAccumSingleStage(c) => c.validate(),
        }
    }

    /// Stage-1 sampler seed, if the strategy has one.
    fn seed_mut(&mut self) -> Option<&mut u64> {
        match self {
            Stage1Strategy::None => None,
            Stage1Strategy::Reptile(c) | Stage1Strategy::Fomaml(c) => Some(&mut c.seed),
            Stage1Strategy::Pretrain(c) => Some(&mut c.seed),
            Stage1Strategy::GradAccum(c) | Stage1Strategy::GradAccumSingleStage(c) => {
                Some(&mut c.seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Single source of randomness; every component seed is derived from
    /// it when the config is resolved.
    pub master_seed: u64,
    pub precision: Precision,
    pub generator: SceneGenConfig,
    pub network: NetworkSpec,
    pub stage1: Stage1Strategy,
    pub stage2: SupervisedConfig,
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub augment: AugmentSpec,
}

impl ExperimentConfig {
    /// Desk-scale preset: small scenes, small network, minutes of compute.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig {
            schema_version: 1,
            master_seed: 0,
            precision: Precision::F32,
            generator: SceneGenConfig::desk(),
            network: NetworkSpec::desk(),
            stage1: Stage1Strategy::Reptile(MetaConfig::desk()),
            stage2: SupervisedConfig::desk(),
            protocol: ProtocolSpec::intra_domain(),
            augment: AugmentSpec::default(),
        };
        cfg.resolve_seeds();
        cfg
    }

    /// Full-scale preset mirroring the desk layout at production sizes.
    pub fn full() -> Self {
        let mut cfg = ExperimentConfig {
            schema_version: 1,
            master_seed: 0,
            precision: Precision::F32,
            generator: SceneGenConfig::full(),
            network: NetworkSpec::full(),
            stage1: Stage1Strategy::Reptile(MetaConfig::full()),
            stage2: SupervisedConfig::full(),
            protocol: ProtocolSpec::intra_domain(),
            augment: AugmentSpec::default(),
        };
        cfg.resolve_seeds();
        cfg
    }

    /// Overwrites every component seed with its derivation from
    /// `master_seed`. Seed values read from a config file are therefore
    /// advisory only; the master seed is authoritative.
    pub fn resolve_seeds(&mut self) {
        self.generator.seed = derive(self.master_seed, Stream::Generator);
        if let Some(s) = self.stage1.seed_mut() {
            *s = derive(self.master_seed, Stream::Stage1Sampler);
        }
        self.stage2.seed = derive(self.master_seed, Stream::Stage2Sampler);
    }

    /// Seed for network parameter initialization.
    pub fn init_seed(&self) -> u64 {
        derive(self.master_seed, Stream::Init)
    }

    /// Seed for augmentation draws.
    pub fn augment_seed(&self) -> u64 {
        derive(self.master_seed, Stream::Augment)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported experiment schema {}",
                self.schema_version
            )));
        }
        self.generator.validate()?;
        self.network.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.protocol.validate()?;
        self.augment.validate()?;
        if self.network.input_size != self.generator.image_size {
            return Err(Error::Config(format!(
                "network expects {:?} input but the generator renders {:?}",
                self.network.input_size, self.generator.image_size
            )));
        }
        if self.stage2.depth_range != self.generator.depth_range {
            return Err(Error::Config(format!(
                "stage-2 depth range {:?} differs from the generator's {:?}",
                self.stage2.depth_range, self.generator.depth_range
            )));
        }
        let n_train = self.generator.num_scenes * self.generator.frames_per_scene;
        let needed = match &self.stage1 {
            Stage1Strategy::None => 0,
            Stage1Strategy::Reptile(c) => c.tasks_per_iter,
            Stage1Strategy::Fomaml(c) => 2 * c.tasks_per_iter,
            Stage1Strategy::Pretrain(c) => c.batch_size,
            Stage1Strategy::GradAccum(c) | Stage1Strategy::GradAccumSingleStage(c) => c.batch_size,
        };
        if needed > n_train {
            return Err(Error::Config(format!(
                "stage 1 ({}) draws {needed} tasks per iteration but the training split only has {n_train}",
                self.stage1.label()
            )));
        }
        if self.stage2.batch_size > n_train {
            return Err(Error::Config(format!(
                "stage-2 batch size {} exceeds the {n_train} training tasks",
                self.stage2.batch_size
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; identifies an experiment
    /// in reports and provenance records.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("experiment config serialises");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))
}

pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Data(format!("serializing experiment config: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
