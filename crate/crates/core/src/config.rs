//! Run configuration shared by every command. Unknown keys are rejected
//! and every section has defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{StorageKind, SynthSpec};
use crate::error::{Error, Result};
use crate::imaging::PsnrChannels;
use crate::losses::{BalanceMode, LossWeights};
use crate::models::{ClassConfig, FsrcnnConfig, SrContainer};
use crate::router::{CostTable, RouteOptions, Routing};
use crate::tensor::CosineSchedule;
use crate::training::{Stage, StageConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of training PNGs; ignored when `data.synth` is set.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Directory of validation PNGs; ignored when `data.synth_validation` is set.
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
}

fn default_workdir() -> PathBuf {
    PathBuf::from("work")
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: None,
            validation: None,
            workdir: default_workdir(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// One width per branch, cheapest first. Its length is the class count.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// Mapping-layer count per branch; 4 for every branch when absent.
    #[serde(default)]
    pub mapping_layers: Option<Vec<usize>>,
    #[serde(default = "default_shrink")]
    pub shrink: usize,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub class_module: ClassModuleConfig,
}

fn default_widths() -> Vec<usize> {
    vec![16, 36, 56]
}
fn default_shrink() -> usize {
    12
}
fn default_scale() -> usize {
    4
}
fn default_channels() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: default_widths(),
            mapping_layers: None,
            shrink: default_shrink(),
            scale: default_scale(),
            channels: default_channels(),
            class_module: ClassModuleConfig::default(),
        }
    }
}

/// Class module layout; the class count and input channels follow the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassModuleConfig {
    #[serde(default = "default_cm_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_cm_strides")]
    pub strides: Vec<usize>,
    #[serde(default = "default_cm_kernel")]
    pub kernel: usize,
}

fn default_cm_widths() -> Vec<usize> {
    ClassConfig::default().widths
}
fn default_cm_strides() -> Vec<usize> {
    ClassConfig::default().strides
}
fn default_cm_kernel() -> usize {
    ClassConfig::default().kernel
}

impl Default for ClassModuleConfig {
    fn default() -> Self {
        ClassModuleConfig {
            widths: default_cm_widths(),
            strides: default_cm_strides(),
            kernel: default_cm_kernel(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub iterations: u64,
    pub batch_size: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    /// Cosine period; the stage length when absent.
    #[serde(default)]
    pub period: Option<u64>,
}

fn default_lr_max() -> f64 {
    1e-3
}
fn default_lr_min() -> f64 {
    1e-7
}

impl StageSettings {
    fn with(iterations: u64, batch_size: usize) -> Self {
        StageSettings {
            iterations,
            batch_size,
            lr_max: default_lr_max(),
            lr_min: default_lr_min(),
            period: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub balance: BalanceMode,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Iterations between log records (with validation in the later stages).
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Caps the number of validation images used during training.
    #[serde(default)]
    pub eval_images: Option<usize>,
    #[serde(default = "default_pretrain")]
    pub pretrain: StageSettings,
    #[serde(default = "default_classifier")]
    pub classifier: StageSettings,
    #[serde(default = "default_joint")]
    pub joint: StageSettings,
}

fn default_true() -> bool {
    true
}
fn default_eval_interval() -> u64 {
    500
}
fn default_pretrain() -> StageSettings {
    StageSettings::with(5000, 16)
}
fn default_classifier() -> StageSettings {
    StageSettings::with(2000, 96)
}
fn default_joint() -> StageSettings {
    StageSettings::with(2000, 96)
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 0,
            weights: LossWeights::default(),
            balance: BalanceMode::default(),
            augment: true,
            eval_interval: default_eval_interval(),
            eval_images: None,
            pretrain: default_pretrain(),
            classifier: default_classifier(),
            joint: default_joint(),
        }
    }
}

/// Reference used to rank tiles by restoration difficulty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScorerConfig {
    #[default]
    Bicubic,
    /// The largest branch after `iterations` L1 steps on all tiles.
    Warmup { iterations: u64, batch_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_tile")]
    pub tile: usize,
    #[serde(default = "default_train_stride")]
    pub train_stride: usize,
    #[serde(default = "default_hr_scales")]
    pub hr_scales: Vec<f64>,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub storage: StorageKind,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub synth_validation: Option<SynthSpec>,
}

fn default_tile() -> usize {
    32
}
fn default_train_stride() -> usize {
    16
}
fn default_hr_scales() -> Vec<f64> {
    vec![0.6, 0.7, 0.8, 0.9]
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            tile: default_tile(),
            train_stride: default_train_stride(),
            hr_scales: default_hr_scales(),
            scorer: ScorerConfig::default(),
            storage: StorageKind::default(),
            synth: None,
            synth_validation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_stride")]
    pub stride: usize,
    /// Tiles per forward pass.
    #[serde(default = "default_eval_batch")]
    pub batch: usize,
    #[serde(default)]
    pub psnr: PsnrChannels,
    /// Branch and classifier costs to report FLOPs with instead of our own count.
    #[serde(default)]
    pub cost_table: Option<CostTable>,
}

fn default_eval_stride() -> usize {
    28
}
fn default_eval_batch() -> usize {
    64
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            stride: default_eval_stride(),
            batch: default_eval_batch(),
            psnr: PsnrChannels::default(),
            cost_table: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the effective configuration as `config.json` inside `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))
    }

    pub fn classes(&self) -> usize {
        self.model.widths.len()
    }

    pub fn branch_configs(&self) -> Result<Vec<FsrcnnConfig>> {
        let m = self.classes();
        let depths = match &self.model.mapping_layers {
            Some(d) if d.len() != m => {
                return Err(Error::InvalidArgument(format!(
                    "{} mapping-layer counts for {m} branches",
                    d.len()
                )))
            }
            Some(d) => d.clone(),
            None => vec![4; m],
        };
        Ok(self
            .model
            .widths
            .iter()
            .zip(depths)
            .map(|(&d, m)| FsrcnnConfig {
                d,
                s: self.model.shrink,
                m,
                scale: self.model.scale,
                channels: self.model.channels,
            })
            .collect())
    }

    pub fn class_config(&self) -> ClassConfig {
        let cm = &self.model.class_module;
        ClassConfig {
            widths: cm.widths.clone(),
            strides: cm.strides.clone(),
            kernel: cm.kernel,
            classes: self.classes(),
            in_channels: self.model.channels,
        }
    }

    pub fn stage_config(&self, stage: Stage) -> Result<StageConfig> {
        let t = &self.training;
        let s = match stage {
            Stage::Pretrain => &t.pretrain,
            Stage::Classifier => &t.classifier,
            Stage::Joint => &t.joint,
        };
        let mut cfg = StageConfig::new(stage, s.iterations, s.batch_size)?;
        cfg.schedule = CosineSchedule::new(s.lr_max, s.lr_min, s.period.unwrap_or(s.iterations).max(1))?;
        cfg.weights = t.weights;
        cfg.balance = t.balance;
        cfg.augment = t.augment;
        cfg.eval_interval = t.eval_interval;
        Ok(cfg)
    }

    pub fn route_options(&self, routing: Routing) -> RouteOptions {
        RouteOptions {
            tile: self.data.tile,
            stride: self.eval.stride,
            batch: self.eval.batch,
            routing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.classes() < 2 {
            return bad(format!("need at least two branch widths, got {:?}", self.model.widths));
        }
        let configs = self.branch_configs()?;
        configs.iter().try_for_each(FsrcnnConfig::validate)?;
        self.class_config().validate()?;
        // checks nondecreasing branch cost
        SrContainer::new(&configs, 0)?;
        let d = &self.data;
        if d.tile == 0 || d.train_stride == 0 || d.train_stride > d.tile {
            return bad(format!("need 1 <= train_stride <= tile, got {} and {}", d.train_stride, d.tile));
        }
        if self.eval.stride == 0 || self.eval.stride > d.tile || self.eval.batch == 0 {
            return bad(format!("need 1 <= eval stride <= tile and a positive batch, got {:?}", self.eval));
        }
        if d.hr_scales.is_empty() || d.hr_scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return bad(format!("HR scales must lie in (0, 1], got {:?}", d.hr_scales));
        }
        for spec in [&d.synth, &d.synth_validation].into_iter().flatten() {
            if spec.channels != self.model.channels {
                return bad(format!(
                    "synthetic images have {} channels, the model {}",
                    spec.channels, self.model.channels
                ));
            }
            if spec.size < d.tile * self.model.scale {
                return bad(format!("synthetic size {} is below one HR tile", spec.size));
            }
        }
        if let ScorerConfig::Warmup { batch_size: 0, .. } = d.scorer {
            return bad("warmup batch size must be positive".into());
        }
        if let Some(ct) = &self.eval.cost_table {
            if ct.branches.len() != self.classes() {
                return bad(format!("cost table has {} branch costs for {} branches", ct.branches.len(), self.classes()));
            }
        }
        for stage in Stage::ALL {
            self.stage_config(stage)?.validate(self.classes())?;
        }
        Ok(())
    }
}
