//! Run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::{validate_patch_size, SplitMode};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::mutual::{Branch, KlMode, MutualConfig, SoftmaxMode, TemperatureGranularity};
use crate::optim::MultiStepLr;
use crate::transformer::TransformerReadout;

/// Module toggles; every row of the ablation grid is one combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub enable_cnn: bool,
    pub enable_trans: bool,
    pub enable_ssm: bool,
    pub guide_cnn: bool,
    pub guide_trans: bool,
    pub guide_ssm: bool,
    pub enable_mutual: bool,
    pub enable_mask: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub fn all() -> Self {
        Self {
            enable_cnn: true,
            enable_trans: true,
            enable_ssm: true,
            guide_cnn: true,
            guide_trans: true,
            guide_ssm: true,
            enable_mutual: true,
            enable_mask: true,
        }
    }

    /// Ablation experiment `n` in `1..=12`.
    pub fn experiment(n: usize) -> Result<Self> {
        let a = Self::all();
        let only = |cnn: bool, trans: bool, ssm: bool, mutual: bool| Self {
            enable_cnn: cnn,
            enable_trans: trans,
            enable_ssm: ssm,
            guide_cnn: cnn,
            guide_trans: trans,
            guide_ssm: ssm,
            enable_mutual: mutual,
            enable_mask: true,
        };
        Ok(match n {
            1 => only(true, false, false, false),
            2 => only(false, true, false, false),
            3 => only(false, false, true, false),
            4 => only(false, true, true, true),
            5 => only(true, false, true, true),
            6 => only(true, true, false, true),
            7 => Self {
                guide_cnn: false,
                ..a
            },
            8 => Self {
                guide_trans: false,
                ..a
            },
            9 => Self {
                guide_ssm: false,
                ..a
            },
            10 => Self {
                enable_mutual: false,
                ..a
            },
            11 => Self {
                enable_mask: false,
                ..a
            },
            12 => a,
            _ => {
                return Err(Error::Config(format!(
                    "ablation experiment {n} outside 1..=12"
                )))
            }
        })
    }

    pub fn branches(&self) -> Vec<Branch> {
        let mut v = Vec::new();
        if self.enable_cnn {
            v.push(Branch::Cnn);
        }
        if self.enable_trans {
            v.push(Branch::Trans);
        }
        if self.enable_ssm {
            v.push(Branch::Mamba);
        }
        v
    }

    /// Whether any enabled branch consumes diffusion features.
    pub fn needs_diffusion(&self) -> bool {
        (self.enable_cnn && self.guide_cnn)
            || (self.enable_trans && self.guide_trans)
            || (self.enable_ssm && self.guide_ssm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Total iterations; mask progress runs from 0 to 1 over them.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub exchange_rate: f64,
    pub grad_clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 2e-3,
            base_channels: 16,
            depth: 3,
            time_embed_dim: 32,
            exchange_rate: 0.25,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            learning_rate: 4e-4,
            lr_decay: 0.5,
            milestones: vec![500, 750],
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr {
            base: self.learning_rate,
            milestones: self.milestones.clone(),
            gamma: self.lr_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Diffusion step at which features are read out.
    pub t_star: usize,
    /// Decoder stage (0 = bottleneck); `None` picks the penultimate stage.
    pub stage: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            t_star: 5,
            stage: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub ssm_state: usize,
    pub ssm_bidirectional: bool,
    pub transformer_readout: TransformerReadout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            ssm_state: 16,
            ssm_bidirectional: false,
            transformer_readout: TransformerReadout::ClsSum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutualOptions {
    pub kl_mode: KlMode,
    pub softmax_mode: SoftmaxMode,
    pub temperature_granularity: TemperatureGranularity,
    pub branch_ce: bool,
    pub detach_teacher: bool,
}

impl Default for MutualOptions {
    fn default() -> Self {
        let d = MutualConfig::default();
        Self {
            kl_mode: d.kl_mode,
            softmax_mode: d.softmax_mode,
            temperature_granularity: d.temperature_granularity,
            branch_ce: d.branch_ce,
            detach_teacher: d.detach_teacher,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Cap on evaluated test pixels (evenly strided); `None` evaluates all.
    pub max_test: Option<usize>,
    pub batch_size: usize,
    pub render_map: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_test: None,
            batch_size: 256,
            render_map: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub patch_size: usize,
    pub samples_per_class: usize,
    pub split: SplitMode,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub mutual: MutualOptions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: PathBuf::from("scene"),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            patch_size: 9,
            samples_per_class: 100,
            split: SplitMode::Random,
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            toggles: Toggles::default(),
            mutual: MutualOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        validate_patch_size(self.patch_size).map_err(|e| cfg_err(e.to_string()))?;
        if !(self.train.learning_rate > 0.0) || !(self.pretrain.learning_rate > 0.0) {
            return Err(cfg_err("learning rates must be positive"));
        }
        if !(self.train.lr_decay > 0.0 && self.train.lr_decay <= 1.0) {
            return Err(cfg_err("lr_decay must lie in (0, 1]"));
        }
        if self.toggles.branches().is_empty() {
            return Err(cfg_err("at least one branch must be enabled"));
        }
        if self.seeds.is_empty() {
            return Err(cfg_err("at least one seed is required"));
        }
        if self.samples_per_class == 0
            || self.train.batch_size == 0
            || self.pretrain.batch_size == 0
            || self.eval.batch_size == 0
        {
            return Err(cfg_err("sample and batch counts must be positive"));
        }
        if self.model.embedding_dim == 0 || self.model.ssm_state == 0 {
            return Err(cfg_err("embedding and state widths must be positive"));
        }
        if self.features.t_star == 0 || self.features.t_star > self.schedule.steps {
            return Err(cfg_err(format!(
                "t_star {} outside 1..={}",
                self.features.t_star, self.schedule.steps
            )));
        }
        if let Some(s) = self.features.stage {
            if s >= self.pretrain.depth {
                return Err(cfg_err(format!(
                    "feature stage {s} exceeds {} decoder stages",
                    self.pretrain.depth
                )));
            }
        }
        Ok(())
    }

    pub fn feature_stage(&self) -> usize {
        self.features
            .stage
            .unwrap_or(self.pretrain.depth.saturating_sub(2))
    }

    pub fn mutual_config(&self) -> MutualConfig {
        let m = &self.mutual;
        MutualConfig {
            enabled: self.toggles.enable_mutual,
            kl_mode: m.kl_mode,
            softmax_mode: m.softmax_mode,
            branch_ce: m.branch_ce,
            detach_teacher: m.detach_teacher,
            temperature_granularity: m.temperature_granularity,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// Reads a config file; relative scene and output paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            for p in [&mut c.scene, &mut c.out_dir] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(c)
    }
}
