//! ADAM with a staircase learning-rate decay, the masked multi-task loss,
//! and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::graph::{make_batch, Graph};
use crate::matrix::Matrix;
use crate::model::{forward, ModelConfig, ModelParams, ParamTensors};
use crate::regularizers::{total_loss, RegularizerConfig};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_DECAY_BASE: f64 = 0.97;
pub const DEFAULT_DECAY_EVERY: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_base: f64,
    pub decay_every: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            base_lr: 1e-3,
            decay_base: DEFAULT_DECAY_BASE,
            decay_every: DEFAULT_DECAY_EVERY,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::contract(
                "train: epochs, batch_size and decay_every must be >= 1",
            ));
        }
        if !(self.decay_base > 0.0 && self.decay_base <= 1.0) {
            return Err(Error::contract("train: decay_base must lie in (0, 1]"));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::contract("train: base_lr must be > 0"));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        staircase(self.base_lr, self.decay_base, self.decay_every, step)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

fn staircase(base_lr: f64, decay_base: f64, every: u64, step: u64) -> f64 {
    base_lr * decay_base.powi((step / every) as i32)
}

/// `base_lr · 0.97^⌊step / 1000⌋`.
pub fn lr_schedule(base_lr: f64, step: u64) -> f64 {
    staircase(base_lr, DEFAULT_DECAY_BASE, DEFAULT_DECAY_EVERY, step)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let first_moment: Vec<Matrix> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            step: 0,
            second_moment: first_moment.clone(),
            first_moment,
        }
    }
}

/// One bias-corrected ADAM update of every `(name, parameter)` pair. No
/// parameter is touched if any gradient is non-finite.
pub fn adam_step(
    params: &mut [(&str, &mut Matrix)],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "adam_step: gradient shape {:?} for parameter {name} of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: (*name).to_owned(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].as_mut_slice();
        let v = state.second_moment[i].as_mut_slice();
        for (k, (theta, &gk)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Mean over observed entries of squared error (regression tasks) and
/// logistic loss on logits (classification tasks). With nothing observed
/// the loss is a constant 0.
pub fn task_loss<'t>(
    predictions: Tensor<'t>,
    targets: &Matrix,
    target_mask: &Matrix,
    task_kinds: &[TaskKind],
) -> Result<Tensor<'t>> {
    let tape = predictions.tape();
    if predictions.cols() != task_kinds.len() {
        return Err(Error::contract(format!(
            "{} prediction columns for {} tasks",
            predictions.cols(),
            task_kinds.len()
        )));
    }
    let observed = target_mask.sum();
    if observed == 0.0 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let kind_mask = |kind: TaskKind| {
        let mut m = target_mask.clone();
        for r in 0..m.rows() {
            for (c, k) in task_kinds.iter().enumerate() {
                if *k != kind {
                    m.set(r, c, 0.0);
                }
            }
        }
        m
    };
    let mut parts = Vec::new();
    if task_kinds.contains(&TaskKind::Regression) {
        parts.push(predictions.masked_squared_error(targets, &kind_mask(TaskKind::Regression))?);
    }
    if task_kinds.contains(&TaskKind::Classification) {
        parts.push(predictions.logistic_loss(targets, &kind_mask(TaskKind::Classification))?);
    }
    let mut sum = parts[0];
    for p in &parts[1..] {
        sum = sum.add(p)?;
    }
    Ok(sum.scale(1.0 / observed))
}

/// Per-epoch means over the steps of the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub task_loss: f64,
    pub bro_loss: f64,
    pub g: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,task_loss,bro_loss,g\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.step,
                crate::report::fmt_g(r.lr),
                crate::report::fmt_g(r.task_loss),
                crate::report::fmt_g(r.bro_loss),
                crate::report::fmt_g(r.g)
            );
        }
        out
    }
}

/// Trains on every graph of `dataset`.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    reg_cfg: &RegularizerConfig,
) -> Result<(ModelParams, TrainingHistory)> {
    let graphs: Vec<&Graph> = dataset.graphs.iter().collect();
    let cfg = model_cfg.resolved_for(dataset);
    train_graphs(&graphs, &dataset.task_kinds, &cfg, train_cfg, reg_cfg)
}

/// Trains on `graphs`, reshuffled every epoch by `train_cfg.seed`. The
/// last partial batch is kept.
pub fn train_graphs(
    graphs: &[&Graph],
    task_kinds: &[TaskKind],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    reg_cfg: &RegularizerConfig,
) -> Result<(ModelParams, TrainingHistory)> {
    if graphs.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    train_cfg.validate()?;
    reg_cfg.validate()?;
    if model_cfg.num_tasks != task_kinds.len() {
        return Err(Error::contract(format!(
            "model has {} tasks, data has {}",
            model_cfg.num_tasks,
            task_kinds.len()
        )));
    }
    let mut params = ModelParams::init(model_cfg)?;
    let names = params.names();
    let mut adam = AdamState::new(params.matrices());
    let adam_cfg = train_cfg.adam();
    let features = model_cfg.features();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut history = TrainingHistory::default();
    let mut step: u64 = 0;

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let (mut task_sum, mut bro_sum, mut g_sum, mut lr) = (0.0, 0.0, 0.0, 0.0);
        let mut steps_in_epoch = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            let members: Vec<&Graph> = chunk.iter().map(|&i| graphs[i]).collect();
            let batch = make_batch(&members, features)?;
            let tape = Tape::new();
            let p = ParamTensors::trainable(&tape, &params);
            let out = forward(&tape, &p, model_cfg, &batch)?;
            let task = task_loss(out.predictions, &batch.targets, &batch.target_mask, task_kinds)?;
            let loss = total_loss(
                task,
                p.output_weights,
                out.final_embeddings,
                &batch.node_offsets,
                reg_cfg,
            )?;
            if !loss.total.item().is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let grads = tape.backward(loss.total)?;
            let grads: Vec<Matrix> = p.tensors().into_iter().map(|t| grads.wrt(t)).collect();
            lr = train_cfg.learning_rate(step);
            let mut named: Vec<(&str, &mut Matrix)> = names
                .iter()
                .map(String::as_str)
                .zip(params.matrices_mut())
                .collect();
            adam_step(&mut named, &grads, &mut adam, lr, &adam_cfg)?;
            step += 1;
            steps_in_epoch += 1;
            task_sum += task.item();
            bro_sum += loss.bro.item();
            g_sum += loss.gini.item();
        }
        if !params.is_finite() {
            return Err(Error::Divergence { epoch, step });
        }
        let k = steps_in_epoch as f64;
        history.epochs.push(EpochRecord {
            epoch,
            step,
            lr,
            task_loss: task_sum / k,
            bro_loss: bro_sum / k,
            g: g_sum / k,
        });
    }
    Ok((params, history))
}
