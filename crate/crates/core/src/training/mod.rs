//! Three-stage training: per-class branch pretraining, classifier training
//! with frozen branches, and joint finetuning.

mod eval;
mod state;

pub use eval::{evaluate, Evaluation, ImageEval, ValImage};
pub use state::TrainState;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::TileSample;
use crate::error::{Error, Result};
use crate::imaging::{augment, Augment, Image, PsnrChannels};
use crate::losses::{average_loss, blended_output, class_loss, image_loss, total_loss, BalanceMode, LossWeights};
use crate::models::{Branch, FsrcnnConfig};
use crate::router::RouteOptions;
use crate::tensor::{AdamState, CosineSchedule, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Classifier,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretrain, Stage::Classifier, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Classifier => "classifier",
            Stage::Joint => "joint",
        }
    }

    /// The stage whose checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Pretrain => None,
            Stage::Classifier => Some(Stage::Pretrain),
            Stage::Joint => Some(Stage::Classifier),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}; expected pretrain, classifier or joint")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    /// Per branch for pretraining, total otherwise.
    pub iterations: u64,
    pub batch_size: usize,
    pub schedule: CosineSchedule,
    pub weights: LossWeights,
    pub balance: BalanceMode,
    pub freeze_sr: bool,
    pub augment: bool,
    /// Iterations between log records; 0 logs only the final iteration.
    pub eval_interval: u64,
}

impl StageConfig {
    /// Stage defaults with a cosine period equal to the stage length.
    pub fn new(stage: Stage, iterations: u64, batch_size: usize) -> Result<Self> {
        Ok(StageConfig {
            stage,
            iterations,
            batch_size,
            schedule: CosineSchedule::new(1e-3, 1e-7, iterations.max(1))?,
            weights: LossWeights::default(),
            balance: BalanceMode::Strict,
            freeze_sr: stage == Stage::Classifier,
            augment: true,
            eval_interval: 0,
        })
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        match self.stage {
            Stage::Pretrain => Ok(()),
            Stage::Classifier | Stage::Joint => {
                if self.stage == Stage::Classifier && !self.freeze_sr {
                    return Err(Error::InvalidArgument("the classifier stage requires frozen SR branches".into()));
                }
                if self.stage == Stage::Joint && self.freeze_sr {
                    return Err(Error::InvalidArgument("the joint stage trains every parameter".into()));
                }
                self.weights.validate()?;
                if self.balance == BalanceMode::Strict && self.weights.w3 > 0.0 && self.batch_size % classes != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "batch size {} is not divisible by {classes} classes",
                        self.batch_size
                    )));
                }
                Ok(())
            }
        }
    }

    fn should_log(&self, t: u64) -> bool {
        t + 1 == self.iterations || (self.eval_interval > 0 && (t + 1) % self.eval_interval == 0)
    }
}

/// One JSON-lines training log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    /// Branch being pretrained; absent in later stages.
    pub branch: Option<usize>,
    pub l1: f64,
    pub lc: f64,
    pub la: f64,
    pub loss: f64,
    pub lr: f64,
    pub psnr: Option<f64>,
    pub flops: Option<f64>,
    pub hist: Option<Vec<f64>>,
    pub mean_max_prob: Option<f64>,
}

/// Validation images and routing settings used at each log point.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub images: &'a [ValImage],
    pub route: &'a RouteOptions,
    pub psnr: PsnrChannels,
}

/// Losses averaged since the previous log point.
#[derive(Default)]
struct Running {
    sums: [f64; 4],
    n: u64,
}

impl Running {
    fn add(&mut self, l: [f64; 4]) {
        for (s, v) in self.sums.iter_mut().zip(l) {
            *s += v;
        }
        self.n += 1;
    }

    fn take(&mut self) -> [f64; 4] {
        let n = self.n.max(1) as f64;
        let out = self.sums.map(|s| s / n);
        *self = Running::default();
        out
    }
}

fn sample_batch(rng: &mut ChaCha8Rng, pool: &[&TileSample], n: usize, aug: bool) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut lr = Vec::with_capacity(n);
    let mut hr = Vec::with_capacity(n);
    for _ in 0..n {
        let s = pool[rng.gen_range(0..pool.len())];
        if aug {
            let op = Augment::ALL[rng.gen_range(0..Augment::ALL.len())];
            lr.push(augment(&s.lr, op));
            hr.push(augment(&s.hr, op));
        } else {
            lr.push(s.lr.clone());
            hr.push(s.hr.clone());
        }
    }
    let refs = |v: &[Image]| -> Result<Tensor<f32>> { Image::batch(&v.iter().collect::<Vec<_>>()) };
    Ok((refs(&lr)?, refs(&hr)?))
}

/// One L1 step on a single branch; returns the batch loss.
fn branch_step(branch: &mut Branch, adam: &mut AdamState, lr_batch: Tensor<f32>, hr_batch: Tensor<f32>, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let params = branch.params.bind(&mut tape, true)?;
    let x = tape.constant(lr_batch)?;
    let y = tape.constant(hr_batch)?;
    let out = branch.network.forward(&mut tape, x, &params)?;
    let loss = image_loss(&mut tape, out, y)?;
    let value = tape.value(loss).data()[0] as f64;
    let mut grads = tape.backward(loss)?;
    let g: Vec<Option<Tensor<f32>>> = params.iter().map(|&p| grads.take(p)).collect();
    let g: Vec<Option<&Tensor<f32>>> = g.iter().map(Option::as_ref).collect();
    adam.step(branch.params.tensors_mut(), &g, lr)?;
    Ok(value)
}

/// Trains branch `j` with L1 on the tiles of class `j` only.
pub fn pretrain_branches(
    state: &mut TrainState,
    samples: &[TileSample],
    cfg: &StageConfig,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate(state.container.len())?;
    let pools: Vec<Vec<&TileSample>> = (0..state.container.len())
        .map(|j| samples.iter().filter(|s| s.class_label == Some(j)).collect())
        .collect();
    if let Some(j) = pools.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(j));
    }
    state.reset_optimizers();
    for (j, pool) in pools.iter().enumerate() {
        let mut running = Running::default();
        for t in 0..cfg.iterations {
            let lr = cfg.schedule.lr_at(t)?;
            let (x, y) = sample_batch(&mut state.rng, pool, cfg.batch_size, cfg.augment)?;
            let branch = state.container.branch_mut(j)?;
            let l1 = branch_step(branch, &mut state.sr_adam[j], x, y, lr)?;
            running.add([l1, 0.0, 0.0, l1]);
            state.iteration = t + 1;
            if cfg.should_log(t) {
                let [l1, lc, la, loss] = running.take();
                log(&LogRecord {
                    iter: t + 1,
                    branch: Some(j),
                    l1,
                    lc,
                    la,
                    loss,
                    lr,
                    psnr: None,
                    flops: None,
                    hist: None,
                    mean_max_prob: None,
                })?;
            }
        }
    }
    Ok(())
}

/// Loss values of one blended step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l1: f64,
    pub lc: f64,
    pub la: f64,
    pub total: f64,
}

/// Forward and backward pass of the blended objective on one batch, then
/// an optimizer step on every unfrozen parameter group.
pub fn blended_step(
    state: &mut TrainState,
    lr_batch: Tensor<f32>,
    hr_batch: Tensor<f32>,
    cfg: &StageConfig,
    lr: f64,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let class_vars = state.class_module.params.bind(&mut tape, true)?;
    let x = tape.constant(lr_batch.clone())?;
    let probs = state.class_module.network.forward(&mut tape, x, &class_vars)?;
    let mut branch_vars = Vec::with_capacity(state.container.len());
    let mut outputs = Vec::with_capacity(state.container.len());
    for b in state.container.branches() {
        if cfg.freeze_sr {
            outputs.push(tape.constant(b.network.infer(&b.params, &lr_batch)?)?);
            branch_vars.push(Vec::new());
        } else {
            let vars = b.params.bind(&mut tape, true)?;
            outputs.push(b.network.forward(&mut tape, x, &vars)?);
            branch_vars.push(vars);
        }
    }
    let y = tape.constant(hr_batch)?;
    let blended = blended_output(&mut tape, probs, &outputs)?;
    let l1 = image_loss(&mut tape, blended, y)?;
    let lc = class_loss(&mut tape, probs)?;
    let la = average_loss(&mut tape, probs, cfg.balance)?;
    let total = total_loss(&mut tape, l1, lc, la, &cfg.weights)?;
    let value = |v| tape.value(v).data()[0] as f64;
    let losses = StepLosses {
        l1: value(l1),
        lc: value(lc),
        la: value(la),
        total: value(total),
    };
    let mut grads = tape.backward(total)?;
    let g: Vec<Option<Tensor<f32>>> = class_vars.iter().map(|&p| grads.take(p)).collect();
    let g: Vec<Option<&Tensor<f32>>> = g.iter().map(Option::as_ref).collect();
    state.class_adam.step(state.class_module.params.tensors_mut(), &g, lr)?;
    if !cfg.freeze_sr {
        for (j, vars) in branch_vars.iter().enumerate() {
            let g: Vec<Option<Tensor<f32>>> = vars.iter().map(|&p| grads.take(p)).collect();
            let g: Vec<Option<&Tensor<f32>>> = g.iter().map(Option::as_ref).collect();
            let branch = state.container.branch_mut(j)?;
            state.sr_adam[j].step(branch.params.tensors_mut(), &g, lr)?;
        }
    }
    Ok(losses)
}

/// Classifier training (frozen branches) or joint finetuning, depending on
/// `cfg.stage`. Batches are drawn uniformly from all tiles.
pub fn train_router(
    state: &mut TrainState,
    samples: &[TileSample],
    cfg: &StageConfig,
    validation: Option<Validation<'_>>,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<()> {
    if cfg.stage == Stage::Pretrain {
        return Err(Error::InvalidArgument("use pretrain_branches for the pretrain stage".into()));
    }
    cfg.validate(state.container.len())?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training tiles".into()));
    }
    let pool: Vec<&TileSample> = samples.iter().collect();
    state.reset_optimizers();
    let mut running = Running::default();
    for t in 0..cfg.iterations {
        let lr = cfg.schedule.lr_at(t)?;
        let (x, y) = sample_batch(&mut state.rng, &pool, cfg.batch_size, cfg.augment)?;
        let l = blended_step(state, x, y, cfg, lr)?;
        running.add([l.l1, l.lc, l.la, l.total]);
        state.iteration = t + 1;
        if cfg.should_log(t) {
            let [l1, lc, la, loss] = running.take();
            let eval = match validation {
                Some(v) => Some(evaluate(&state.class_module, &state.container, v.images, v.route, v.psnr)?),
                None => None,
            };
            log(&LogRecord {
                iter: t + 1,
                branch: None,
                l1,
                lc,
                la,
                loss,
                lr,
                psnr: eval.as_ref().map(|e| e.psnr),
                flops: eval.as_ref().map(|e| e.avg_flops),
                hist: eval.as_ref().map(|e| e.histogram.clone()),
                mean_max_prob: eval.as_ref().and_then(|e| e.mean_max_prob),
            })?;
        }
    }
    Ok(())
}

/// A fresh branch fitted to every tile with L1; used as a difficulty
/// reference before any class labels exist.
pub fn warmup_reference(
    config: FsrcnnConfig,
    samples: &[TileSample],
    cfg: &StageConfig,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<Branch> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no tiles to warm up on".into()));
    }
    let mut branch = Branch::new(config, seed)?;
    let mut adam = AdamState::new(branch.params.tensors());
    let pool: Vec<&TileSample> = samples.iter().collect();
    for t in 0..cfg.iterations {
        let (x, y) = sample_batch(rng, &pool, cfg.batch_size, cfg.augment)?;
        branch_step(&mut branch, &mut adam, x, y, cfg.schedule.lr_at(t)?)?;
    }
    Ok(branch)
}
