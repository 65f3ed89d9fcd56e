//! Langevin-dynamics implicit generation.
//!
//! One step is
//!
//! ```text
//! x' = x − λ·clip(∇ₓE(x), ±c) + σ·ξ,   ξ ~ N(0, I)
//! ```
//!
//! with step size and noise scale decoupled. The textbook form
//! `x' = x − (λ₁/2)∇E + ω, ω ~ N(0, λ₁)` is the special case `λ₁ = 2λ`,
//! `σ = √λ₁`; its stationary law (for small steps) is `exp(−E)`. With an
//! arbitrary `(λ, σ)` pair the chain instead targets `exp(−E/T)` with
//! `T = σ²/(2λ)`.
//!
//! Chains start from a [`ReplayBuffer`] of earlier samples, falling back to
//! uniform noise on `[0, 1]^d`. No tape survives a step: samples leave the
//! sampler as plain tensors.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, EbmError, Result};
use crate::model::EnergyFn;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinConfig {
    /// Steps per chain, K. Default 60.
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    /// Gradient step size λ. Default 10.
    #[serde(default = "defaults::step_size")]
    pub step_size: f64,
    /// Standard deviation σ of the added Gaussian noise. Default 0.005.
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    /// Per-component gradient clip c. Default 0.01.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    /// Components allowed to move (`true`); the rest stay fixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    /// L∞ radius around the chain's starting point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation_bound: Option<f64>,
}

mod defaults {
    pub fn steps() -> usize {
        60
    }
    pub fn step_size() -> f64 {
        10.0
    }
    pub fn noise() -> f64 {
        0.005
    }
    pub fn grad_clip() -> f64 {
        0.01
    }
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            steps: defaults::steps(),
            step_size: defaults::step_size(),
            noise: defaults::noise(),
            grad_clip: defaults::grad_clip(),
            mask: None,
            deviation_bound: None,
        }
    }
}

impl LangevinConfig {
    /// Unadjusted Langevin at temperature 1: `σ = √(2λ)`, no clipping.
    pub fn unit_temperature(steps: usize, step_size: f64) -> Self {
        Self {
            steps,
            step_size,
            noise: (2.0 * step_size).sqrt(),
            grad_clip: f64::INFINITY,
            mask: None,
            deviation_bound: None,
        }
    }

    /// Temperature `σ²/(2λ)` of the stationary law `exp(−E/T)`.
    pub fn temperature(&self) -> f64 {
        self.noise * self.noise / (2.0 * self.step_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(EbmError::Config("langevin step_size must be > 0".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(EbmError::Config("langevin noise must be >= 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(EbmError::Config("langevin grad_clip must be > 0".into()));
        }
        if let Some(eps) = self.deviation_bound {
            if !(eps > 0.0) {
                return Err(EbmError::Config("deviation_bound must be > 0".into()));
            }
        }
        Ok(())
    }

    fn check_mask(&self, d: usize) -> Result<()> {
        match &self.mask {
            Some(m) if m.len() != d => {
                dim_err(format!("mask of length {} for dimension {d}", m.len()))
            }
            _ => Ok(()),
        }
    }
}

/// One Langevin step from `x`. Returns the new state and the energies at `x`.
///
/// `origin` is the chain's starting point, needed only when
/// `cfg.deviation_bound` is set. `step` labels a divergence error.
pub fn langevin_step<E, R>(
    energy: &E,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &LangevinConfig,
    origin: Option<&Tensor>,
    step: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    cfg.check_mask(x.cols())?;
    let (e, grad) = energy.energy_and_grad(x, labels)?;
    if grad.has_non_finite() || e.iter().any(|v| !v.is_finite()) {
        return Err(EbmError::ChainDiverged { step });
    }
    let d = x.cols();
    let (lam, sigma, c) = (cfg.step_size, cfg.noise, cfg.grad_clip);
    let mut out = x.clone();
    for (i, (o, g)) in out.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let xi: f64 = StandardNormal.sample(rng);
        if cfg.mask.as_ref().is_some_and(|m| !m[i % d]) {
            continue;
        }
        *o += -lam * g.clamp(-c, c) + sigma * xi;
    }
    if let Some(eps) = cfg.deviation_bound {
        let origin = origin.ok_or_else(|| {
            EbmError::Contract("deviation_bound set but no chain origin given".into())
        })?;
        for (o, a) in out.data_mut().iter_mut().zip(origin.data()) {
            *o = o.clamp(a - eps, a + eps);
        }
    }
    Ok((out, e))
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub samples: Tensor,
    /// Batch-mean energy before each step and after the last (K + 1 values).
    pub energy_trace: Vec<f64>,
}

/// Runs `cfg.steps` Langevin steps from `init`.
pub fn run_chain<E, R>(
    energy: &E,
    init: &Tensor,
    labels: Option<&[usize]>,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<ChainOutput>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let mean = |e: &[f64]| e.iter().sum::<f64>() / e.len().max(1) as f64;
    let mut x = init.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for k in 0..cfg.steps {
        let (next, e) = langevin_step(energy, &x, labels, cfg, Some(init), k, rng)?;
        trace.push(mean(&e));
        x = next;
    }
    let e = energy.energy(&x, labels)?;
    if e.iter().any(|v| !v.is_finite()) {
        return Err(EbmError::ChainDiverged { step: cfg.steps });
    }
    trace.push(mean(&e));
    Ok(ChainOutput {
        samples: x,
        energy_trace: trace,
    })
}

/// Restores the components flagged in `mask`, keeping the rest bit-identical.
pub fn inpaint<E, R>(
    corrupt: &Tensor,
    mask: &[bool],
    energy: &E,
    labels: Option<&[usize]>,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    let cfg = LangevinConfig {
        mask: Some(mask.to_vec()),
        ..cfg.clone()
    };
    Ok(run_chain(energy, corrupt, labels, &cfg, rng)?.samples)
}

/// Runs the chain from `x0` while keeping every state within `bound` of `x0`
/// in L∞.
pub fn refine_bounded<E, R>(
    x0: &Tensor,
    bound: f64,
    energy: &E,
    labels: Option<&[usize]>,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    if !(bound > 0.0) {
        return Err(EbmError::Contract("refinement bound must be > 0".into()));
    }
    let cfg = LangevinConfig {
        deviation_bound: Some(bound),
        ..cfg.clone()
    };
    Ok(run_chain(energy, x0, labels, &cfg, rng)?.samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub sample: Vec<f64>,
    pub label: Option<usize>,
}

/// Bounded FIFO store of past negative samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    uniform_prob: f64,
    entries: VecDeque<BufferEntry>,
}

/// Which rows of an initial batch came from the buffer.
#[derive(Clone, Debug)]
pub struct InitBatch {
    pub samples: Tensor,
    pub from_buffer: Vec<bool>,
}

impl ReplayBuffer {
    /// `uniform_prob` is the chance a chain starts from uniform noise instead of
    /// a stored sample (0.05 by default).
    pub fn new(capacity: usize, dim: usize, uniform_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&uniform_prob) {
            return Err(EbmError::Config(format!(
                "uniform_prob {uniform_prob} outside [0, 1]"
            )));
        }
        if dim == 0 {
            return Err(EbmError::Config("buffer dimension must be > 0".into()));
        }
        Ok(Self {
            capacity,
            dim,
            uniform_prob,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn uniform_prob(&self) -> f64 {
        self.uniform_prob
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    /// Appends rows, evicting the oldest beyond capacity.
    pub fn insert(&mut self, samples: &Tensor, labels: Option<&[usize]>) -> Result<()> {
        if !samples.is_matrix() || samples.cols() != self.dim {
            return dim_err(format!(
                "buffer holds {}-d samples, got shape {:?}",
                self.dim,
                samples.shape()
            ));
        }
        if let Some(l) = labels {
            if l.len() != samples.rows() {
                return dim_err(format!("{} labels for {} samples", l.len(), samples.rows()));
            }
        }
        for r in 0..samples.rows() {
            if self.capacity == 0 {
                break;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(BufferEntry {
                sample: samples.row_slice(r).to_vec(),
                label: labels.map(|l| l[r]),
            });
        }
        Ok(())
    }

    /// Draws `batch` starting points: each row comes from a uniformly chosen
    /// stored sample with probability `1 − uniform_prob`, else from
    /// `U[0, 1]^d`. An empty buffer yields only uniform rows.
    pub fn init_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> InitBatch {
        self.draw(batch, rng, |_| None)
    }

    /// Like [`init_batch`](Self::init_batch), but row `i` only draws stored
    /// samples carrying `labels[i]`.
    pub fn init_batch_for_labels<R: Rng + ?Sized>(
        &self,
        labels: &[usize],
        rng: &mut R,
    ) -> InitBatch {
        let mut by_label: std::collections::HashMap<usize, Vec<usize>> = Default::default();
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(l) = e.label {
                by_label.entry(l).or_default().push(i);
            }
        }
        self.draw(labels.len(), rng, |row| {
            Some(by_label.get(&labels[row]).map_or(&[][..], Vec::as_slice))
        })
    }

    /// `pool(row)` restricts the candidate entries for a row; `None` means all.
    fn draw<'a, R, F>(&self, batch: usize, rng: &mut R, pool: F) -> InitBatch
    where
        R: Rng + ?Sized,
        F: Fn(usize) -> Option<&'a [usize]>,
    {
        let d = self.dim;
        let mut data = Vec::with_capacity(batch * d);
        let mut from_buffer = Vec::with_capacity(batch);
        for row in 0..batch {
            let use_uniform = rng.random::<f64>() < self.uniform_prob;
            let candidates = pool(row);
            let available = candidates.map_or(self.entries.len(), <[usize]>::len);
            if !use_uniform && available > 0 {
                let j = rng.random_range(0..available);
                let k = candidates.map_or(j, |c| c[j]);
                data.extend_from_slice(&self.entries[k].sample);
                from_buffer.push(true);
            } else {
                data.extend((0..d).map(|_| rng.random::<f64>()));
                from_buffer.push(false);
            }
        }
        InitBatch {
            samples: Tensor::matrix(batch, d, data).expect("sized above"),
            from_buffer,
        }
    }

    /// All stored samples as a matrix, plus labels when every entry has one.
    pub fn snapshot(&self) -> (Tensor, Option<Vec<usize>>) {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for e in &self.entries {
            data.extend_from_slice(&e.sample);
        }
        let labels: Option<Vec<usize>> = self.entries.iter().map(|e| e.label).collect();
        let labels = if self.entries.is_empty() {
            None
        } else {
            labels
        };
        (
            Tensor::matrix(self.entries.len(), self.dim, data).expect("sized above"),
            labels,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Quadratic;
    use crate::seeded;

    struct Flat(usize);
    impl EnergyFn for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn energy_on<'t>(
            &self,
            _tape: &'t crate::Tape,
            x: crate::Var<'t>,
            _labels: Option<&[usize]>,
        ) -> Result<crate::Var<'t>> {
            Ok(x.sum_cols()?.scale(0.0))
        }
    }

    struct Poisoned;
    impl EnergyFn for Poisoned {
        fn dim(&self) -> usize {
            1
        }
        fn energy_on<'t>(
            &self,
            _tape: &'t crate::Tape,
            x: crate::Var<'t>,
            _labels: Option<&[usize]>,
        ) -> Result<crate::Var<'t>> {
            Ok(x.ln())
        }
    }

    fn cfg(steps: usize, step_size: f64, noise: f64) -> LangevinConfig {
        LangevinConfig {
            steps,
            step_size,
            noise,
            grad_clip: f64::INFINITY,
            mask: None,
            deviation_bound: None,
        }
    }

    #[test]
    fn zero_gradient_without_noise_is_a_fixed_point() {
        let x = Tensor::uniform(&[5, 3], 0.0, 1.0, &mut seeded(0));
        let out = run_chain(&Flat(3), &x, None, &cfg(10, 0.5, 0.0), &mut seeded(1)).unwrap();
        assert_eq!(out.samples, x);
    }

    #[test]
    fn zero_steps_returns_init() {
        let x = Tensor::uniform(&[4, 2], 0.0, 1.0, &mut seeded(0));
        let q = Quadratic::new(vec![0.5, 0.5], 10.0);
        let out = run_chain(&q, &x, None, &cfg(0, 0.1, 0.3), &mut seeded(1)).unwrap();
        assert_eq!(out.samples, x);
        assert_eq!(out.energy_trace.len(), 1);
    }

    #[test]
    fn all_false_mask_freezes_everything() {
        let x = Tensor::uniform(&[4, 2], 0.0, 1.0, &mut seeded(0));
        let q = Quadratic::new(vec![0.0, 0.0], 100.0);
        let out = inpaint(
            &x,
            &[false, false],
            &q,
            None,
            &cfg(20, 0.01, 0.2),
            &mut seeded(2),
        )
        .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn unmasked_components_are_bit_identical() {
        let x = Tensor::uniform(&[16, 3], 0.0, 1.0, &mut seeded(0));
        let q = Quadratic::new(vec![0.1, 0.9, 0.5], 30.0);
        let out = inpaint(
            &x,
            &[true, false, true],
            &q,
            None,
            &cfg(30, 0.01, 0.1),
            &mut seeded(3),
        )
        .unwrap();
        for r in 0..16 {
            assert_eq!(out.get(r, 1).to_bits(), x.get(r, 1).to_bits());
            assert_ne!(out.get(r, 0), x.get(r, 0));
        }
    }

    #[test]
    fn gradient_descent_energy_trace_is_non_increasing() {
        let x = Tensor::uniform(&[8, 2], 0.0, 1.0, &mut seeded(4));
        let q = Quadratic::new(vec![0.2, 0.7], 5.0);
        let out = run_chain(&q, &x, None, &cfg(40, 0.05, 0.0), &mut seeded(5)).unwrap();
        for w in out.energy_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn tiny_deviation_bound_pins_the_chain() {
        let x = Tensor::uniform(&[8, 2], 0.0, 1.0, &mut seeded(6));
        let q = Quadratic::new(vec![0.5, 0.5], 50.0);
        let out = refine_bounded(&x, 1e-9, &q, None, &cfg(10, 0.01, 0.1), &mut seeded(7)).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-9 + 1e-15);
        }
        assert!(refine_bounded(&x, 0.0, &q, None, &cfg(10, 0.01, 0.1), &mut seeded(7)).is_err());
    }

    #[test]
    fn nan_gradient_reports_the_step() {
        // ln(x) for x stepping below zero: the gradient 1/x pushes x down.
        let x = Tensor::column(vec![0.05]);
        let err = run_chain(&Poisoned, &x, None, &cfg(10, 0.01, 0.0), &mut seeded(0)).unwrap_err();
        match err {
            EbmError::ChainDiverged { step } => assert!(step > 0 && step <= 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fixed_seed_gives_identical_chains() {
        let x = Tensor::uniform(&[8, 2], 0.0, 1.0, &mut seeded(8));
        let q = Quadratic::new(vec![0.3, 0.3], 20.0);
        let a = run_chain(&q, &x, None, &cfg(25, 0.01, 0.14), &mut seeded(9)).unwrap();
        let b = run_chain(&q, &x, None, &cfg(25, 0.01, 0.14), &mut seeded(9)).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.energy_trace, b.energy_trace);
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = ReplayBuffer::new(2, 1, 0.05).unwrap();
        buf.insert(&Tensor::column(vec![1.0, 2.0, 3.0]), Some(&[7, 8, 9]))
            .unwrap();
        assert_eq!(buf.len(), 2);
        let (s, l) = buf.snapshot();
        assert_eq!(s.data(), &[2.0, 3.0]);
        assert_eq!(l, Some(vec![8, 9]));
    }

    #[test]
    fn holds_exactly_the_last_n() {
        let n = 7;
        let mut buf = ReplayBuffer::new(n, 1, 0.05).unwrap();
        for i in 0..10 * n {
            buf.insert(&Tensor::column(vec![i as f64]), None).unwrap();
        }
        let (s, l) = buf.snapshot();
        let expected: Vec<f64> = (9 * n..10 * n).map(|i| i as f64).collect();
        assert_eq!(s.data(), expected.as_slice());
        assert_eq!(l, None);
    }

    #[test]
    fn insert_rejects_wrong_dimension() {
        let mut buf = ReplayBuffer::new(4, 2, 0.05).unwrap();
        assert!(buf.insert(&Tensor::zeros(&[1, 3]), None).is_err());
        assert!(ReplayBuffer::new(4, 2, 1.5).is_err());
    }

    #[test]
    fn empty_buffer_draws_uniform() {
        let buf = ReplayBuffer::new(10, 3, 0.0).unwrap();
        let b = buf.init_batch(50, &mut seeded(0));
        assert!(b.from_buffer.iter().all(|f| !f));
        assert!(b.samples.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn zero_uniform_prob_draws_only_buffer() {
        let mut buf = ReplayBuffer::new(10, 1, 0.0).unwrap();
        buf.insert(&Tensor::column(vec![5.0, 6.0]), None).unwrap();
        let b = buf.init_batch(100, &mut seeded(0));
        assert!(b.from_buffer.iter().all(|&f| f));
        assert!(b.samples.data().iter().all(|&v| v == 5.0 || v == 6.0));
    }

    #[test]
    fn label_matched_draws() {
        let mut buf = ReplayBuffer::new(10, 1, 0.0).unwrap();
        buf.insert(&Tensor::column(vec![1.0, 2.0, 3.0]), Some(&[0, 1, 0]))
            .unwrap();
        let b = buf.init_batch_for_labels(&[1, 1, 0, 2], &mut seeded(1));
        assert_eq!(b.samples.get(0, 0), 2.0);
        assert_eq!(b.samples.get(1, 0), 2.0);
        assert!(b.samples.get(2, 0) == 1.0 || b.samples.get(2, 0) == 3.0);
        assert!(!b.from_buffer[3]);
    }
}
