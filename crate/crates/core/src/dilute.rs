//! Dilution training: decay a scalar sparse mask on selected attention
//! layers until they are identity mappings.
//!
//! Per step the forward uses the current mask value, the loss is
//! cross-entropy, and after the optimizer update the mask advances according
//! to the schedule granularity. With feature compensation the residual is
//! amplified by `(2 - M)` as the branch fades, so a fully diluted block
//! outputs exactly `2x`; the naive form leaves the residual alone and ends
//! at `x`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::dataset::{DatasetError, LabeledTensorDataset};
use crate::stats;
use crate::tensor::{Scalar, Tape, TensorError, Var};
use crate::vit::{diluted_combine, BlockMode, ForwardOptions, ViTModel, VitError};

#[derive(Debug, Error)]
pub enum DiluteError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
}

pub type Result<T> = std::result::Result<T, DiluteError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerEpoch,
    PerIteration,
}

/// Decay law M(t): 1 at t=0, 0 at t>=T, non-increasing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub kind: ScheduleKind,
    /// Decay steps. 0 only via [`MaskSchedule::immediate`]: the mask is
    /// already 0 at t=0 (the no-dilution ablation floor).
    pub total_steps: u64,
    pub granularity: Granularity,
}

impl MaskSchedule {
    pub fn new(kind: ScheduleKind, total_steps: u64, granularity: Granularity) -> Result<Self> {
        if total_steps == 0 {
            return Err(DiluteError::Invalid(
                "schedule needs total_steps >= 1 (use `immediate` for the degenerate case)".into(),
            ));
        }
        Ok(MaskSchedule {
            kind,
            total_steps,
            granularity,
        })
    }

    /// Degenerate schedule: M = 0 from the first step.
    pub fn immediate(granularity: Granularity) -> Self {
        MaskSchedule {
            kind: ScheduleKind::Linear,
            total_steps: 0,
            granularity,
        }
    }

    pub fn value(&self, t: u64) -> f64 {
        if self.total_steps == 0 || t >= self.total_steps {
            return 0.0;
        }
        let frac = t as f64 / self.total_steps as f64;
        match self.kind {
            ScheduleKind::Linear => (1.0 - frac).max(0.0),
            ScheduleKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }
}

/// Eq-style diluted attention sublayer on an explicit input, for oracle
/// tests and inspection; the training forward applies the identical ops via
/// the model's Diluted mode.
pub fn diluted_attention_forward<T: Scalar>(
    model: &ViTModel<T>,
    tape: &mut Tape<T>,
    block: usize,
    x: Var,
    mask: f64,
    compensated: bool,
) -> Result<Var> {
    let branch = model.attention_branch_forward(tape, block, x)?;
    Ok(diluted_combine(tape, branch, x, mask, compensated)?)
}

// ── Optimizers ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub compensation: bool,
    /// Layers to dilute, ordered as chosen by the selector.
    pub selected_layers: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            compensation: true,
            selected_layers: Vec::new(),
        }
    }
}

/// Cosine learning-rate decay from `lr` to `min_lr` over `total` steps.
fn lr_at(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return cfg.lr;
    }
    let frac = step as f64 / (total - 1) as f64;
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Decoupled weight decay applies to projection weights only, never to
/// biases, norm parameters, or token embeddings.
fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update<T: Scalar>(
        &mut self,
        cfg: &TrainConfig,
        lr: f64,
        name: &str,
        param: &mut [T],
        grad: &[T],
    ) {
        let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
        match self.kind {
            OptimizerKind::AdamW => {
                let m = self
                    .m
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; param.len()]);
                let v = self
                    .v
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; param.len()]);
                let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
                let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
                for i in 0..param.len() {
                    let g = grad[i].as_f64();
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    let p = param[i].as_f64();
                    param[i] =
                        T::from_f64(p - lr * (mhat / (vhat.sqrt() + 1e-8) + wd * p));
                }
            }
            OptimizerKind::Sgd => {
                let m = self
                    .m
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; param.len()]);
                for i in 0..param.len() {
                    let g = grad[i].as_f64() + wd * param[i].as_f64();
                    m[i] = cfg.momentum * m[i] + g;
                    param[i] = T::from_f64(param[i].as_f64() - lr * m[i]);
                }
            }
        }
    }
}

// ── Training log ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub mask: f64,
    pub grad_norm_attn: f64,
    pub grad_norm_other: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,M,grad_norm_attn,grad_norm_other,lr\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.loss, r.mask, r.grad_norm_attn, r.grad_norm_other, r.lr
            ));
        }
        s
    }

    pub fn from_csv(csv: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in csv.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(DiluteError::Invalid(format!(
                    "log line {i}: expected 6 fields"
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| DiluteError::Invalid(format!("log line {i}: bad number")))
            };
            rows.push(TrainLogRow {
                step: f[0]
                    .parse()
                    .map_err(|_| DiluteError::Invalid(format!("log line {i}: bad step")))?,
                loss: parse(f[1])?,
                mask: parse(f[2])?,
                grad_norm_attn: parse(f[3])?,
                grad_norm_other: parse(f[4])?,
                lr: parse(f[5])?,
            });
        }
        Ok(TrainLog { rows })
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Gradient-stability view of a training log: the per-step branch norms plus
/// a jitter statistic (mean squared first difference of the loss, normalized
/// by the squared mean loss) for comparing naive and compensated runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradStabilityReport {
    pub steps: Vec<u64>,
    pub grad_norm_attn: Vec<f64>,
    pub grad_norm_other: Vec<f64>,
    pub mask: Vec<f64>,
    pub loss_jitter: f64,
}

pub fn gradient_stability_report(log: &TrainLog) -> GradStabilityReport {
    let losses: Vec<f64> = log.rows.iter().map(|r| r.loss).collect();
    let diffs: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
    let mean_loss = stats::mean(&losses);
    let jitter = if diffs.is_empty() || mean_loss == 0.0 {
        0.0
    } else {
        diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64 / (mean_loss * mean_loss)
    };
    GradStabilityReport {
        steps: log.rows.iter().map(|r| r.step).collect(),
        grad_norm_attn: log.rows.iter().map(|r| r.grad_norm_attn).collect(),
        grad_norm_other: log.rows.iter().map(|r| r.grad_norm_other).collect(),
        mask: log.rows.iter().map(|r| r.mask).collect(),
        loss_jitter: jitter,
    }
}

// ── Training loops ──────────────────────────────────────────────────────

/// Plain supervised training, no dilution.
pub fn train_dense<T: Scalar>(
    model: &mut ViTModel<T>,
    cfg: &TrainConfig,
    data: &LabeledTensorDataset,
) -> Result<TrainLog> {
    run_training(model, cfg, data, None)
}

/// Dilute `cfg.selected_layers` under `schedule` while training the whole
/// network. Selected blocks must start in Full mode; they finish Diluted
/// with M = 0.
pub fn train_dilute<T: Scalar>(
    model: &mut ViTModel<T>,
    cfg: &TrainConfig,
    schedule: &MaskSchedule,
    data: &LabeledTensorDataset,
) -> Result<TrainLog> {
    if cfg.selected_layers.is_empty() {
        return Err(DiluteError::Invalid("no layers selected for dilution".into()));
    }
    for &i in &cfg.selected_layers {
        if i >= model.config.depth {
            return Err(DiluteError::Invalid(format!(
                "selected layer {i} out of range"
            )));
        }
        if !matches!(model.blocks[i].mode, BlockMode::Full) {
            return Err(DiluteError::Invalid(format!(
                "selected layer {i} is not in Full mode"
            )));
        }
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let budget = match schedule.granularity {
        Granularity::PerIteration => cfg.epochs as u64 * steps_per_epoch,
        Granularity::PerEpoch => cfg.epochs as u64,
    };
    if budget < schedule.total_steps {
        return Err(DiluteError::Invalid(format!(
            "schedule needs {} decay steps but training provides {budget}",
            schedule.total_steps
        )));
    }
    run_training(model, cfg, data, Some(schedule))
}

fn set_masks<T: Scalar>(model: &mut ViTModel<T>, layers: &[usize], mask: f64, compensated: bool) {
    for &i in layers {
        model.blocks[i].mode = BlockMode::Diluted { mask, compensated };
    }
}

fn run_training<T: Scalar>(
    model: &mut ViTModel<T>,
    cfg: &TrainConfig,
    data: &LabeledTensorDataset,
    schedule: Option<&MaskSchedule>,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(DiluteError::Invalid("empty training set".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(DiluteError::Invalid(
            "batch_size and epochs must be positive".into(),
        ));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut log = TrainLog::default();
    let mut step: u64 = 0;

    // Attention-branch parameters of the diluted layers (all attention
    // parameters when training densely).
    let attn_group: Vec<usize> = if schedule.is_some() {
        cfg.selected_layers.clone()
    } else {
        (0..model.config.depth).collect()
    };
    let is_attn_param = |name: &str| -> bool {
        attn_group.iter().any(|i| {
            name.starts_with(&format!("blocks.{i}.attn."))
                || name.starts_with(&format!("blocks.{i}.norm1."))
        })
    };

    for epoch in 0..cfg.epochs {
        for batch_idx in data.epoch_batches(cfg.batch_size, cfg.seed, epoch as u64) {
            let mask = schedule.map(|s| {
                let t = match s.granularity {
                    Granularity::PerIteration => step,
                    Granularity::PerEpoch => epoch as u64,
                };
                s.value(t)
            });
            if let Some(m) = mask {
                set_masks(model, &cfg.selected_layers, m, cfg.compensation);
            }

            let images = data.batch_images::<T>(&batch_idx);
            let labels = data.batch_labels(&batch_idx);
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &images, &ForwardOptions::default())?;
            let loss = tape.cross_entropy(pass.logits, &labels)?;
            let loss_val = tape.value(loss).item().as_f64();
            if !loss_val.is_finite() {
                return Err(DiluteError::NonFiniteLoss {
                    step,
                    value: loss_val,
                });
            }
            tape.backward(loss)?;

            let lr = lr_at(cfg, step, total_steps);
            optimizer.begin_step();
            let mut sq_attn = 0.0f64;
            let mut sq_other = 0.0f64;
            for (name, var) in &pass.params {
                let grad = tape.grad(*var).expect("backward populated").to_vec();
                let sq: f64 = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum();
                if is_attn_param(name) {
                    sq_attn += sq;
                } else {
                    sq_other += sq;
                }
                let param = model
                    .tensor_mut(name)
                    .expect("bound parameter exists on model");
                optimizer.update(cfg, lr, name, param.data_mut(), &grad);
            }
            log.rows.push(TrainLogRow {
                step,
                loss: loss_val,
                mask: mask.unwrap_or(1.0),
                grad_norm_attn: sq_attn.sqrt(),
                grad_norm_other: sq_other.sqrt(),
                lr,
            });
            step += 1;
        }
    }

    // The schedule has run its course: selected blocks end fully diluted.
    if let Some(s) = schedule {
        let end = match s.granularity {
            Granularity::PerIteration => step,
            Granularity::PerEpoch => cfg.epochs as u64,
        };
        set_masks(model, &cfg.selected_layers, s.value(end), cfg.compensation);
    }
    Ok(log)
}
