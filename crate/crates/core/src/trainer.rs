//! L1+L2 loss, Adam, scheduled sampling and the training loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::datagen::SequenceBatch;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::metrics::{Convention, Metric, MetricReport};
use crate::model::{rollout, Model};
use crate::params::Bound;
use crate::rng::{rng_for, Rng};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `mean|p − t| + mean (p − t)²`.
pub fn loss_l1l2<'t, S: Scalar>(pred: Var<'t, S>, target: Var<'t, S>) -> Result<Var<'t, S>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch { op: "loss_l1l2", lhs: pred.shape(), rhs: target.shape() });
    }
    let d = pred.sub(target)?;
    d.abs().mean().add(d.square().mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::config("adam", "parameter and gradient counts differ"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = S::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        for i in 0..params.len() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            for (j, theta) in params[i].data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Ground-truth probability `ε = max(0, 1 − iteration / decay_steps)`.
pub fn sampling_probability(iteration: usize, decay_steps: usize) -> f64 {
    (1.0 - iteration as f64 / decay_steps.max(1) as f64).max(0.0)
}

/// Independently true (feed ground truth) with probability ε per step.
pub fn sampling_mask(iteration: usize, steps: usize, decay_steps: usize, rng: &mut Rng) -> Vec<bool> {
    let eps = sampling_probability(iteration, decay_steps);
    (0..steps).map(|_| rng.random_bool(eps)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub iters: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Scheduled sampling decay; `None` means half of `iters`.
    pub decay_steps: Option<usize>,
    /// Evaluate and checkpoint every this many iterations; 0 only at the end.
    pub eval_interval: usize,
    pub context: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 8,
            iters: 2000,
            adam: AdamConfig::default(),
            clip_norm: 10.0,
            decay_steps: None,
            eval_interval: 0,
            context: 10,
            horizon: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn decay(&self) -> usize {
        self.decay_steps.unwrap_or(self.iters / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if self.context == 0 {
            return Err(Error::config("context", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr >= 0.0) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if self.decay_steps == Some(0) {
            return Err(Error::config("decay_steps", "must be positive"));
        }
        Ok(())
    }

    fn check_data(&self, key: &str, data: &SequenceBatch, model: &Model<f32>) -> Result<()> {
        if data.steps() < self.context + self.horizon {
            return Err(Error::config(
                key,
                format!("sequences have {} frames, need context + horizon = {}", data.steps(), self.context + self.horizon),
            ));
        }
        let c = &model.config;
        if data.frame_shape() != [c.in_channels, c.height, c.width] {
            return Err(Error::config(
                key,
                format!("frames are {:?}, model expects {:?}", data.frame_shape(), [c.in_channels, c.height, c.width]),
            ));
        }
        if data.is_empty() {
            return Err(Error::config(key, "no sequences"));
        }
        Ok(())
    }
}

/// One CSV row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub eval_mse: Option<f64>,
    pub eval_ssim: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("iteration,loss,eval_mse,eval_ssim\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.iteration, r.loss, opt(r.eval_mse), opt(r.eval_ssim));
    }
    s
}

/// Where the loop writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Deterministic minibatch order: each epoch is a fresh shuffle keyed by the
/// epoch number.
pub struct BatchSampler {
    seed: u64,
    len: usize,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, len: usize) -> Self {
        let mut s = BatchSampler { seed, len, epoch: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng_for(self.seed, &format!("epoch/{}", self.epoch)));
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.len {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean L1+L2 loss over every next-frame prediction of one rollout, and
/// the tape vars of the parameters.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<'t>(
    model: &Model<f32>,
    bound: &Bound<'t, f32>,
    tape: &'t Tape<f32>,
    data: &SequenceBatch,
    indices: &[usize],
    context: usize,
    horizon: usize,
    mask: Option<&[bool]>,
) -> Result<Var<'t, f32>> {
    let frame = |t: usize| tape.constant(data.frames_at(indices, t));
    let ctx: Vec<_> = (0..context).map(frame).collect();
    let truth: Vec<_> = (context..context + horizon - 1).map(frame).collect();
    let out = rollout(model, bound, &ctx, horizon, &truth, mask, None)?;
    let preds: Vec<_> = out.context_preds.iter().chain(&out.horizon_preds).copied().collect();
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (i, p) in preds.iter().enumerate() {
        let target = if i + 1 < context { ctx[i + 1] } else { frame(i + 1) };
        total = total.add(loss_l1l2(*p, target)?)?;
    }
    Ok(total.scale(1.0 / preds.len() as f32))
}

/// Horizon metrics of `model` on `data`, processed in chunks of `batch`.
pub fn evaluate(
    model: &Model<f32>,
    data: &SequenceBatch,
    context: usize,
    horizon: usize,
    batch: usize,
    metrics: &[Metric],
    convention: Convention,
) -> Result<MetricReport> {
    let mut per_step: Vec<Vec<f32>> = vec![Vec::new(); horizon];
    let mut targets: Vec<Vec<f32>> = vec![Vec::new(); horizon];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let tape = Tape::new();
        let bound = model.params.bind_frozen(&tape);
        let ctx: Vec<_> = (0..context).map(|t| tape.constant(data.frames_at(chunk, t))).collect();
        let out = rollout(model, &bound, &ctx, horizon, &[], None, None)?;
        for (j, p) in out.horizon_preds.iter().enumerate() {
            per_step[j].extend_from_slice(p.value().data());
            targets[j].extend_from_slice(data.frames_at(chunk, context + j).data());
        }
    }
    let [c, h, w] = data.frame_shape();
    let shape = [data.len(), c, h, w];
    let preds = per_step.into_iter().map(|d| Tensor::new(shape, d)).collect::<Result<Vec<_>>>()?;
    let targets = targets.into_iter().map(|d| Tensor::new(shape, d)).collect::<Result<Vec<_>>>()?;
    MetricReport::evaluate(&preds, &targets, metrics, convention)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub adam: AdamState<f32>,
}

/// Runs `cfg.iters` Adam steps on minibatches of `train_data`. Evaluation
/// on `eval_data` (horizon MSE and SSIM) and checkpointing happen every
/// `eval_interval` iterations and after the last one.
pub fn train(
    model: &mut Model<f32>,
    train_data: &SequenceBatch,
    eval_data: Option<&SequenceBatch>,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_data("train data", train_data, model)?;
    if let Some(e) = eval_data {
        cfg.check_data("eval data", e, model)?;
    }
    let mut adam = AdamState::new(model.params.tensors(), cfg.adam);
    let mut sampler = BatchSampler::new(cfg.seed, train_data.len());
    let mut mask_rng = rng_for(cfg.seed, "scheduled-sampling");
    let mut log = Vec::with_capacity(cfg.iters);

    let checkpoint = |model: &Model<f32>, log: &[LogRow]| -> Result<()> {
        if let Some(p) = &outputs.checkpoint {
            save_checkpoint(model, p)?;
        }
        if let Some(p) = &outputs.log {
            atomic_write(p, log_csv(log).as_bytes())?;
        }
        Ok(())
    };

    for it in 1..=cfg.iters {
        let indices = sampler.next_batch(cfg.batch);
        let mask = sampling_mask(it - 1, cfg.horizon - 1, cfg.decay(), &mut mask_rng);
        let (loss, mut grads) = {
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let loss =
                batch_loss(model, &bound, &tape, train_data, &indices, cfg.context, cfg.horizon, Some(&mask))?;
            let g = loss.backward()?;
            let grads: Vec<_> = bound.vars().iter().map(|v| g.get_or_zeros(*v)).collect();
            (loss.value().item() as f64, grads)
        };
        if !loss.is_finite() {
            return Err(Error::Format { what: "training", msg: format!("loss became {loss} at iteration {it}") });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(model.params.tensors_mut(), &grads)?;

        let mut row = LogRow { iteration: it, loss, eval_mse: None, eval_ssim: None };
        let at_eval = it == cfg.iters || (cfg.eval_interval > 0 && it % cfg.eval_interval == 0);
        if at_eval {
            if let Some(e) = eval_data {
                let r = evaluate(model, e, cfg.context, cfg.horizon, cfg.batch, &[Metric::Mse, Metric::Ssim], Convention::PixelMean)?;
                row.eval_mse = r.aggregate(Metric::Mse);
                row.eval_ssim = r.aggregate(Metric::Ssim).filter(|v| v.is_finite());
            }
        }
        log.push(row);
        if at_eval {
            checkpoint(model, &log)?;
        }
    }
    if cfg.iters == 0 {
        checkpoint(model, &log)?;
    }
    Ok(TrainOutcome { log, adam })
}
