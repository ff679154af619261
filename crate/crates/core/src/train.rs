//! Masked pre-training and full-token fine-tuning.
//!
//! Both phases share one step: draw timesteps and noise, build the
//! interpolant, decide path drop and class drop per sample (independently of
//! each other), run the network, regress the velocity, clip the global
//! gradient norm, take an AdamW step and update the EMA. Pre-training feeds
//! the middle blocks a structured subset of tokens; fine-tuning feeds them
//! every token.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SprintError};
use crate::flow::{velocity_loss, velocity_loss_grad, FlowSample, TimeDist};
use crate::grid::TokenBatch;
use crate::net::checkpoint::{self, Checkpoint};
use crate::net::{stage_of, ModelParams, Stage};
use crate::rng::{stream, Purpose};
use crate::subsample::{DropMask, DropStrategy};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    /// Stream key of the phase.
    pub fn id(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Finetune => 2,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

/// Schedule and optimizer settings of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Learning rate after warmup.
    pub lr: f64,
    /// Learning rate at iteration 0 when `warmup > 0`.
    pub lr_start: f64,
    pub warmup: u64,
    pub ema_decay: f64,
    /// EMA decay used while the learning rate warms up.
    pub ema_warmup_decay: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 32,
            lr: 1e-3,
            lr_start: 1e-3,
            warmup: 0,
            ema_decay: 0.999,
            ema_warmup_decay: 0.99,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Token and condition dropping during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropConfig {
    /// Pre-training token drop.
    pub mask: DropStrategy,
    /// Probability that a sample's whole sparse path is replaced by the mask
    /// token. Shared by both phases.
    pub path_drop_prob: f64,
    pub class_drop_prob: f64,
}

impl Default for DropConfig {
    fn default() -> Self {
        Self {
            mask: DropStrategy::Structured { n: 2, k: 1 },
            path_drop_prob: 0.1,
            class_drop_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub schedule: PhaseConfig,
    pub drop: DropConfig,
    pub time: TimeDist,
    pub mask_token_trainable: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let bad = |m: String| Err(SprintError::Config(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.drop.path_drop_prob) || !unit(self.drop.class_drop_prob) {
            return bad(format!(
                "drop probabilities must lie in [0, 1], got path {} class {}",
                self.drop.path_drop_prob, self.drop.class_drop_prob
            ));
        }
        if !(s.clip > 0.0) {
            return bad(format!("clip norm must be positive, got {}", s.clip));
        }
        if !unit(s.ema_decay) || !unit(s.ema_warmup_decay) {
            return bad("EMA decays must lie in [0, 1]".into());
        }
        if !(s.lr >= 0.0 && s.lr_start >= 0.0) || s.batch_size == 0 {
            return bad("learning rates must be non-negative and batch_size positive".into());
        }
        if !unit(s.beta1) || !unit(s.beta2) || !(s.adam_eps > 0.0) || s.weight_decay < 0.0 {
            return bad("invalid AdamW hyperparameters".into());
        }
        if let DropStrategy::Random { ratio } = self.drop.mask {
            if !(0.0..1.0).contains(&ratio) {
                return bad(format!("random drop ratio must lie in [0, 1), got {ratio}"));
            }
        }
        self.time.validate()
    }
}

/// Linear warmup from `lr_start` to `lr` over `warmup` iterations, constant
/// afterwards.
pub fn lr_at(iter: u64, cfg: &PhaseConfig) -> f64 {
    if iter >= cfg.warmup {
        cfg.lr
    } else {
        cfg.lr_start + (cfg.lr - cfg.lr_start) * iter as f64 / cfg.warmup as f64
    }
}

pub fn ema_decay_at(iter: u64, cfg: &PhaseConfig) -> f64 {
    if iter < cfg.warmup {
        cfg.ema_warmup_decay
    } else {
        cfg.ema_decay
    }
}

fn check_same_layout<T: Scalar>(a: &ModelParams<T>, b: &ModelParams<T>) -> Result<()> {
    if a.config != b.config {
        return Err(SprintError::InvalidArgument(
            "parameter trees come from different model configs".into(),
        ));
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update<T: Scalar>(ema: &mut ModelParams<T>, params: &ModelParams<T>, decay: f64) -> Result<()> {
    check_same_layout(ema, params)?;
    let d = T::of(decay);
    let e = T::of(1.0 - decay);
    for (dst, src) in ema.named_mut().into_iter().zip(params.named()) {
        for (a, &p) in dst.data.iter_mut().zip(src.data) {
            *a = d * *a + e * p;
        }
    }
    Ok(())
}

/// ℓ2 norm over the named subset of `grads`.
pub fn grad_norm_of<T: Scalar>(names: &[String], grads: &ModelParams<T>) -> Result<f64> {
    let by_name: HashMap<String, &[T]> = grads.named().into_iter().map(|p| (p.name, p.data)).collect();
    let mut sum = 0.0;
    for name in names {
        let data = by_name
            .get(name)
            .ok_or_else(|| SprintError::MissingGradient(name.clone()))?;
        sum += data.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
    }
    Ok(sum.sqrt())
}

pub fn global_norm<T: Scalar>(grads: &ModelParams<T>) -> f64 {
    grads
        .named()
        .iter()
        .flat_map(|p| p.data.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in grads.named_mut() {
            p.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Names of the encoder parameters.
pub fn encoder_param_names<T: Scalar>(params: &ModelParams<T>) -> Vec<String> {
    params
        .named()
        .into_iter()
        .filter(|p| stage_of(&p.name) == Stage::Encoder)
        .map(|p| p.name)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T = f32> {
    pub params: ModelParams<T>,
    pub ema: ModelParams<T>,
    pub adam_m: ModelParams<T>,
    pub adam_v: ModelParams<T>,
    /// Steps completed in the current phase.
    pub iteration: u64,
    /// Optimizer steps over the whole run, for bias correction.
    pub adam_step: u64,
    pub phase: Phase,
    /// Root of every random stream; with `iteration` it fixes all draws.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: u64,
    pub phase: Phase,
    pub loss: f64,
    /// ℓ2 norm of the encoder gradient, before clipping.
    pub grad_norm_f: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ModelParams<T>, seed: u64) -> Self {
        Self {
            ema: params.clone(),
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            iteration: 0,
            adam_step: 0,
            phase: Phase::Pretrain,
            seed,
        }
    }

    /// Switches to fine-tuning, restarting the phase counter. Optimizer
    /// moments and EMA carry over.
    pub fn begin_finetune(&mut self) {
        self.phase = Phase::Finetune;
        self.iteration = 0;
    }

    fn rng(&self, purpose: Purpose) -> rand_chacha::ChaCha8Rng {
        stream(self.seed, self.phase.id(), self.iteration, purpose)
    }

    fn adamw(&mut self, grads: &ModelParams<T>, lr: f64, cfg: &PhaseConfig) {
        self.adam_step += 1;
        let step = self.adam_step as i32;
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let one = T::one();
        let c1 = T::of(1.0 - cfg.beta1.powi(step));
        let c2 = T::of(1.0 - cfg.beta2.powi(step));
        let eps = T::of(cfg.adam_eps);
        let lr_t = T::of(lr);
        let decay = T::of(1.0 - lr * cfg.weight_decay);
        let params = self.params.named_mut();
        let ms = self.adam_m.named_mut();
        let vs = self.adam_v.named_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads.named()).zip(ms).zip(vs) {
            for (((w, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// One optimization step on `(x0, labels)`.
    fn step(
        &mut self,
        x0: &TokenBatch<T>,
        labels: &[usize],
        cfg: &TrainConfig,
        mask: &DropMask,
    ) -> Result<StepMetrics> {
        let b = x0.batch();
        if labels.len() != b {
            return Err(SprintError::Dimension(format!(
                "{} labels for batch {b}",
                labels.len()
            )));
        }
        let t = cfg.time.sample::<T, _>(b, &mut self.rng(Purpose::Timestep));
        let mut noise = self.rng(Purpose::Noise);
        let eps = Array3::from_shape_simple_fn(x0.tokens.raw_dim(), || {
            T::of(StandardNormal.sample(&mut noise))
        });
        let eps = TokenBatch::new(eps, x0.positions.clone(), x0.grid)?;
        let mut pd = self.rng(Purpose::PathDrop);
        let path_drop: Vec<bool> = (0..b).map(|_| pd.random_bool(cfg.drop.path_drop_prob)).collect();
        let mut cd = self.rng(Purpose::ClassDrop);
        let cond: Vec<Option<usize>> = labels
            .iter()
            .map(|&l| (!cd.random_bool(cfg.drop.class_drop_prob)).then_some(l))
            .collect();
        let sample = FlowSample::new(x0.clone(), eps, t, cond)?;

        let (pred, tape) =
            self.params
                .forward_train(&sample.x_t, &sample.t, &sample.labels, mask, &path_drop)?;
        let loss = velocity_loss(&pred, &sample.v_target)?.f64();
        if !loss.is_finite() {
            let max_abs = pred.tokens.iter().fold(0.0f64, |m, v| m.max(v.f64().abs()));
            return Err(SprintError::NonFiniteLoss {
                phase: self.phase.to_string(),
                iteration: self.iteration,
                diagnostic: format!(
                    "loss {loss}, max |prediction| {max_abs}, param norm {:.4e}",
                    global_norm(&self.params)
                ),
            });
        }
        let d_pred = velocity_loss_grad(&pred, &sample.v_target)?;
        let mut grads = self.params.backward(&tape, d_pred.view())?;
        if !cfg.mask_token_trainable {
            grads.mask_token.fill(T::zero());
        }
        let grad_norm_f = grad_norm_of(&encoder_param_names(&grads), &grads)?;
        let grad_norm = clip_global_norm(&mut grads, cfg.schedule.clip);
        let lr = lr_at(self.iteration, &cfg.schedule);
        self.adamw(&grads, lr, &cfg.schedule);
        ema_update(&mut self.ema, &self.params, ema_decay_at(self.iteration, &cfg.schedule))?;
        let metrics = StepMetrics {
            iter: self.iteration,
            phase: self.phase,
            loss,
            grad_norm_f,
            grad_norm,
            lr,
        };
        self.iteration += 1;
        Ok(metrics)
    }

    pub fn pretrain_step(
        &mut self,
        x0: &TokenBatch<T>,
        labels: &[usize],
        cfg: &TrainConfig,
    ) -> Result<StepMetrics> {
        self.expect_phase(Phase::Pretrain, cfg)?;
        let mask = cfg.drop.mask.draw(x0.grid, &mut self.rng(Purpose::Mask))?;
        self.step(x0, labels, cfg, &mask)
    }

    pub fn finetune_step(
        &mut self,
        x0: &TokenBatch<T>,
        labels: &[usize],
        cfg: &TrainConfig,
    ) -> Result<StepMetrics> {
        self.expect_phase(Phase::Finetune, cfg)?;
        let mask = DropMask::keep_all(x0.len());
        self.step(x0, labels, cfg, &mask)
    }

    fn expect_phase(&self, phase: Phase, cfg: &TrainConfig) -> Result<()> {
        if self.phase != phase || cfg.phase != phase {
            return Err(SprintError::InvalidArgument(format!(
                "{phase} step on a {} state with a {} config",
                self.phase, cfg.phase
            )));
        }
        Ok(())
    }
}

impl TrainState<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "phase": self.phase,
            "iteration": self.iteration,
            "adam_step": self.adam_step,
            "seed": self.seed,
        });
        checkpoint::save(
            path,
            meta,
            &[
                ("params", &self.params),
                ("ema", &self.ema),
                ("adam_m", &self.adam_m),
                ("adam_v", &self.adam_v),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(checkpoint::load(path)?)
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| SprintError::Checkpoint(format!("metadata lacks `{k}`")))
        };
        let phase: Phase = serde_json::from_value(field("phase")?)?;
        let iteration: u64 = serde_json::from_value(field("iteration")?)?;
        let adam_step: u64 = serde_json::from_value(field("adam_step")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        Ok(Self {
            params: ck.take("params")?,
            ema: ck.take("ema")?,
            adam_m: ck.take("adam_m")?,
            adam_v: ck.take("adam_v")?,
            iteration,
            adam_step,
            phase,
            seed,
        })
    }
}
