//! Contrastive maximum-likelihood training.
//!
//! Each step pulls positives from the data, starts negatives from the replay
//! buffer, runs Langevin dynamics on them (no gradient flows through the chain)
//! and minimises
//!
//! ```text
//! mean_i  α·(E(x⁺ᵢ)² + E(x⁻ᵢ)²) + E(x⁺ᵢ) − E(x⁻ᵢ)
//! ```
//!
//! with Adam. Gradient components further than `clip_sigmas` standard
//! deviations from Adam's second-moment estimate are clipped first.
//!
//! [`kl_finetune_step`] is the other objective: it keeps the chain on the tape
//! and minimises a frozen target energy at the chain's end point, which needs
//! second derivatives of the model.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EbmError, Result};
use crate::model::{EnergyFn, ParamEnergy};
use crate::sampler::{run_chain, LangevinConfig, ReplayBuffer};
use crate::tensor::Tensor;

/// Longest Langevin chain that [`kl_finetune_step`] will keep on a tape.
pub const MAX_TAPED_STEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Coefficient α of the squared-energy penalty. Default 1.
    #[serde(default = "d::l2_coeff")]
    pub l2_coeff: f64,
    /// Default 1e-4.
    #[serde(default = "d::learning_rate")]
    pub learning_rate: f64,
    /// Default 0.0.
    #[serde(default)]
    pub beta1: f64,
    /// Default 0.999.
    #[serde(default = "d::beta2")]
    pub beta2: f64,
    #[serde(default = "d::adam_eps")]
    pub adam_eps: f64,
    /// Positive and negative samples per step. Default 128.
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    /// Gradient components beyond this many Adam standard deviations are
    /// clipped. Default 3.
    #[serde(default = "d::clip_sigmas")]
    pub clip_sigmas: f64,
    /// Replay buffer capacity. Default 10000.
    #[serde(default = "d::buffer_size")]
    pub buffer_size: usize,
    /// Chance a chain starts from uniform noise. Default 0.05.
    #[serde(default = "d::uniform_prob")]
    pub uniform_prob: f64,
    #[serde(default = "d::total_steps")]
    pub total_steps: usize,
    #[serde(default)]
    pub langevin: LangevinConfig,
}

mod d {
    pub fn l2_coeff() -> f64 {
        1.0
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn clip_sigmas() -> f64 {
        3.0
    }
    pub fn buffer_size() -> usize {
        10_000
    }
    pub fn uniform_prob() -> f64 {
        0.05
    }
    pub fn total_steps() -> usize {
        1000
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_coeff: d::l2_coeff(),
            learning_rate: d::learning_rate(),
            beta1: 0.0,
            beta2: d::beta2(),
            adam_eps: d::adam_eps(),
            batch_size: d::batch_size(),
            clip_sigmas: d::clip_sigmas(),
            buffer_size: d::buffer_size(),
            uniform_prob: d::uniform_prob(),
            total_steps: d::total_steps(),
            langevin: LangevinConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip_sigmas: self.clip_sigmas,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l2_coeff >= 0.0) {
            return Err(EbmError::Config("l2_coeff must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(EbmError::Config("batch_size must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(EbmError::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.langevin.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_sigmas: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn for_model<M: ParamEnergy + ?Sized>(model: &M) -> Self {
        Self::for_params(&model.params())
    }
}

/// One Adam update with second-moment clipping.
///
/// Before the moments are updated, each gradient component is clipped to
/// `clip_sigmas·√v̂ + ε`, where `v̂` is the bias-corrected second moment from
/// the previous steps. The first step has no estimate yet and is not clipped.
pub fn adam_step(
    params: Vec<&mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(EbmError::Contract(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(Tensor::has_non_finite) {
        return Err(EbmError::TrainingDiverged(format!(
            "non-finite gradient in parameter {i}"
        )));
    }
    let prev = state.t;
    state.t += 1;
    let t = state.t as i32;
    let prev_correction = 1.0 - cfg.beta2.powi(prev as i32);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(EbmError::Dimension(format!(
                "parameter {k} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let mut gj = gj;
            if prev > 0 && cfg.clip_sigmas.is_finite() {
                let bound = cfg.clip_sigmas * (v[j] / prev_correction).sqrt() + cfg.eps;
                gj = gj.clamp(-bound, bound);
            }
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *pj -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `mean(α(e⁺² + e⁻²) + e⁺ − e⁻)` over the batch.
pub fn contrastive_loss<'t>(e_pos: Var<'t>, e_neg: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    if e_pos.value().shape() != e_neg.value().shape() {
        return Err(EbmError::Dimension(format!(
            "positive energies {:?} vs negative {:?}",
            e_pos.value().shape(),
            e_neg.value().shape()
        )));
    }
    let reg = e_pos.square().add(e_neg.square())?.scale(alpha);
    Ok(reg.add(e_pos.sub(e_neg)?)?.mean())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub e_pos: f64,
    pub e_neg: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,e_pos,e_neg,loss,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.step, self.e_pos, self.e_neg, self.loss, self.wall_ms
        )
    }
}

/// One contrastive training step on the positive batch `positives`.
///
/// When `cfg.langevin.mask` is set, the fixed components of each negative are
/// copied from its positive, so the chain samples the free components
/// conditioned on the rest.
pub fn train_step<M, R>(
    model: &mut M,
    adam: &mut AdamState,
    positives: &Tensor,
    labels: Option<&[usize]>,
    buffer: &mut ReplayBuffer,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepReport>
where
    M: ParamEnergy,
    R: Rng + ?Sized,
{
    let init = match labels {
        Some(l) => buffer.init_batch_for_labels(l, rng).samples,
        None => buffer.init_batch(positives.rows(), rng).samples,
    };
    train_step_from(model, adam, positives, labels, init, Some(buffer), cfg, rng)
}

/// [`train_step`] with the chain started from `init` instead of the buffer.
/// The negatives are still inserted into `buffer` when one is given.
#[allow(clippy::too_many_arguments)]
pub fn train_step_from<M, R>(
    model: &mut M,
    adam: &mut AdamState,
    positives: &Tensor,
    labels: Option<&[usize]>,
    mut init: Tensor,
    buffer: Option<&mut ReplayBuffer>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepReport>
where
    M: ParamEnergy,
    R: Rng + ?Sized,
{
    let start = Instant::now();
    if init.shape() != positives.shape() {
        return Err(EbmError::Dimension(format!(
            "chain start {:?} vs positives {:?}",
            init.shape(),
            positives.shape()
        )));
    }
    if let Some(mask) = &cfg.langevin.mask {
        let d = positives.cols();
        if mask.len() != d {
            return Err(EbmError::Dimension(format!(
                "mask length {} for dimension {d}",
                mask.len()
            )));
        }
        for (i, v) in init.data_mut().iter_mut().enumerate() {
            if !mask[i % d] {
                *v = positives.data()[i];
            }
        }
    }
    let negatives = run_chain(model, &init, labels, &cfg.langevin, rng)?.samples;

    let tape = Tape::new();
    let params = model.param_vars(&tape);
    let e_pos = model.forward(&tape, &params, tape.constant(positives.clone()), labels)?;
    let e_neg = model.forward(&tape, &params, tape.constant(negatives.clone()), labels)?;
    let loss = contrastive_loss(e_pos, e_neg, cfg.l2_coeff)?;
    let loss_value = loss.value().data()[0];
    if !loss_value.is_finite() {
        return Err(EbmError::TrainingDiverged(format!("loss is {loss_value}")));
    }
    let grads: Vec<Tensor> = tape
        .gradient(loss, &params)?
        .into_iter()
        .map(|g| g.detach())
        .collect();
    let report = StepReport {
        step: adam.t as usize,
        e_pos: e_pos.value().mean(),
        e_neg: e_neg.value().mean(),
        loss: loss_value,
        wall_ms: 0.0,
    };
    drop(params);
    drop(tape);

    adam_step(model.params_mut(), &grads, adam, &cfg.adam())?;
    model.after_update();
    if let Some(buffer) = buffer {
        buffer.insert(&negatives, labels)?;
    }
    Ok(StepReport {
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        ..report
    })
}

/// Runs `steps` training steps on random minibatches of `data`.
#[allow(clippy::too_many_arguments)]
pub fn fit<M, R>(
    model: &mut M,
    adam: &mut AdamState,
    buffer: &mut ReplayBuffer,
    data: &Tensor,
    labels: Option<&[usize]>,
    cfg: &TrainConfig,
    steps: usize,
    rng: &mut R,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()>
where
    M: ParamEnergy,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if data.rows() == 0 {
        return Err(EbmError::EmptyInput("training data".into()));
    }
    for _ in 0..steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..data.rows()))
            .collect();
        let batch = data.select_rows(&idx);
        let batch_labels: Option<Vec<usize>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
        let report = train_step(
            model,
            adam,
            &batch,
            batch_labels.as_deref(),
            buffer,
            cfg,
            rng,
        )?;
        on_step(&report);
    }
    Ok(())
}

/// The model's energy and gradient inputs for a taped chain.
pub struct TapedChain<'a> {
    pub init: &'a Tensor,
    pub labels: Option<&'a [usize]>,
    pub target_labels: Option<&'a [usize]>,
    pub langevin: &'a LangevinConfig,
}

/// Loss `mean(Ē(x_K(θ)))` and its gradient with respect to the model
/// parameters, where `x_K` is a Langevin chain kept entirely on the tape and
/// `Ē` is a frozen target. Noise is drawn fresh and enters as a constant.
pub fn kl_loss_and_grads<M, T, R>(
    model: &M,
    target: &T,
    chain: &TapedChain<'_>,
    rng: &mut R,
) -> Result<(f64, Vec<Tensor>)>
where
    M: ParamEnergy + ?Sized,
    T: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    let cfg = chain.langevin;
    cfg.validate()?;
    if cfg.steps > MAX_TAPED_STEPS {
        return Err(EbmError::TapeDepth {
            requested: cfg.steps,
            limit: MAX_TAPED_STEPS,
        });
    }
    let (rows, d) = (chain.init.rows(), chain.init.cols());
    let tape = Tape::new();
    let params = model.param_vars(&tape);
    let origin = tape.constant(chain.init.clone());
    let mask = cfg.mask.as_ref().map(|m| {
        if m.len() != d {
            return Err(EbmError::Dimension(format!(
                "mask length {} for dimension {d}",
                m.len()
            )));
        }
        let data = (0..rows * d)
            .map(|i| if m[i % d] { 1.0 } else { 0.0 })
            .collect();
        Tensor::matrix(rows, d, data)
    });
    let mask = mask.transpose()?;

    let mut x = origin;
    for k in 0..cfg.steps {
        let e = model.forward(&tape, &params, x, chain.labels)?;
        let g = tape.gradient(e.sum(), &[x])?[0];
        if g.value().has_non_finite() {
            return Err(EbmError::ChainDiverged { step: k });
        }
        let mut noise = Tensor::zeros(&[rows, d]);
        for v in noise.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = cfg.noise * z;
        }
        let mut delta = g.clamp(-cfg.grad_clip, cfg.grad_clip).scale(-cfg.step_size);
        delta = delta.add(tape.constant(noise))?;
        if let Some(m) = &mask {
            delta = delta.mul(tape.constant(m.clone()))?;
        }
        x = x.add(delta)?;
        if let Some(eps) = cfg.deviation_bound {
            x = x.sub(origin)?.clamp(-eps, eps).add(origin)?;
        }
    }
    let loss = target.energy_on(&tape, x, chain.target_labels)?.mean();
    let value = loss.value().data()[0];
    if !value.is_finite() {
        return Err(EbmError::ChainDiverged { step: cfg.steps });
    }
    let grads = tape
        .gradient(loss, &params)?
        .into_iter()
        .map(|g| g.detach())
        .collect();
    Ok((value, grads))
}

/// One fine-tuning update: [`kl_loss_and_grads`] followed by Adam.
pub fn kl_finetune_step<M, T, R>(
    model: &mut M,
    adam: &mut AdamState,
    target: &T,
    chain: &TapedChain<'_>,
    adam_cfg: &AdamConfig,
    rng: &mut R,
) -> Result<f64>
where
    M: ParamEnergy,
    T: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    let (loss, grads) = kl_loss_and_grads(model, target, chain, rng)?;
    adam_step(model.params_mut(), &grads, adam, adam_cfg)?;
    model.after_update();
    Ok(loss)
}
