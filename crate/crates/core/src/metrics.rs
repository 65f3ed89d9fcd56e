//! Evaluation: partition-function brackets, OOD AUROC, Gaussian Frechet
//! distance, KS statistic, mode coverage, and energy-based classification
//! under PGD attack.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EbmError, Result};
use crate::model::EnergyFn;
use crate::sampler::{refine_bounded, LangevinConfig};
use crate::tensor::Tensor;

/// Rows evaluated per network call in grid and chain sweeps.
const CHUNK: usize = 4096;

/// `ln Σ exp(v)` with the usual max shift. `-inf` for an empty or all `-inf`
/// input.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn labels_for(label: Option<usize>, n: usize) -> Option<Vec<usize>> {
    label.map(|l| vec![l; n])
}

/// Midpoint-rule `ln ∫ exp(−E)` over the box `bounds`, with cells of width
/// at most `resolution` along each axis.
pub fn log_partition_quadrature<E: EnergyFn + ?Sized>(
    energy: &E,
    label: Option<usize>,
    bounds: &[(f64, f64)],
    resolution: f64,
) -> Result<f64> {
    let d = bounds.len();
    if d == 0 || d > 2 {
        return Err(EbmError::Unsupported(format!(
            "quadrature in {d} dimensions"
        )));
    }
    if d != energy.dim() {
        return Err(EbmError::Dimension(format!(
            "{d} bounds for a {}-dim energy",
            energy.dim()
        )));
    }
    if !(resolution > 0.0) || bounds.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(EbmError::Contract(
            "quadrature needs resolution > 0 and non-empty bounds".into(),
        ));
    }
    let counts: Vec<usize> = bounds
        .iter()
        .map(|(lo, hi)| ((hi - lo) / resolution).ceil() as usize)
        .collect();
    let widths: Vec<f64> = bounds
        .iter()
        .zip(&counts)
        .map(|((lo, hi), &n)| (hi - lo) / n as f64)
        .collect();
    let total: usize = counts.iter().product();
    let point = |k: usize| -> Vec<f64> {
        let mut rest = k;
        let mut p = vec![0.0; d];
        for a in (0..d).rev() {
            let i = rest % counts[a];
            rest /= counts[a];
            p[a] = bounds[a].0 + (i as f64 + 0.5) * widths[a];
        }
        p
    };
    let mut neg_e = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let data: Vec<f64> = (start..end).flat_map(point).collect();
        let x = Tensor::matrix(end - start, d, data)?;
        let e = energy.energy(&x, labels_for(label, end - start).as_deref())?;
        neg_e.extend(e.iter().map(|v| -v));
        start = end;
    }
    let log_cell: f64 = widths.iter().map(|w| w.ln()).sum();
    Ok(logsumexp(&neg_e) + log_cell)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseDist {
    /// Uniform on [0, 1]^d; transitions never leave the cube.
    UniformCube,
    /// Isotropic Gaussian.
    Gaussian { mean: f64, std: f64 },
}

impl BaseDist {
    fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            BaseDist::UniformCube => {
                if x.iter().all(|v| (0.0..=1.0).contains(v)) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            BaseDist::Gaussian { mean, std } => x
                .iter()
                .map(|v| {
                    -0.5 * ((v - mean) / std).powi(2) - std.ln() - 0.5 * std::f64::consts::TAU.ln()
                })
                .sum(),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, d: usize, rng: &mut R) -> Tensor {
        match self {
            BaseDist::UniformCube => Tensor::uniform(&[n, d], 0.0, 1.0, rng),
            BaseDist::Gaussian { mean, std } => Tensor::randn(&[n, d], rng).map(|z| mean + std * z),
        }
    }

    fn grad_neg_log_density(&self, x: f64) -> f64 {
        match self {
            BaseDist::UniformCube => 0.0,
            BaseDist::Gaussian { mean, std } => (x - mean) / (std * std),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AisConfig {
    pub chains: usize,
    /// Number of annealing steps after β = 0.
    pub temperatures: usize,
    /// MALA transitions per intermediate temperature.
    pub transitions: usize,
    /// MALA step `h` at β = 1; at smaller β it grows as `h/√β`, capped at
    /// `max_step`.
    pub step_size: f64,
    pub max_step: f64,
    /// Smallest non-zero β of the geometric ladder.
    pub beta_min: f64,
    /// MALA transitions at β = 1 before the reverse chain starts.
    pub burn_in: usize,
    pub base: BaseDist,
}

impl Default for AisConfig {
    fn default() -> Self {
        Self {
            chains: 256,
            temperatures: 100,
            transitions: 2,
            step_size: 3e-3,
            max_step: 0.05,
            beta_min: 1e-4,
            burn_in: 300,
            base: BaseDist::UniformCube,
        }
    }
}

impl AisConfig {
    /// `0` followed by `temperatures` geometrically spaced values ending at 1.
    pub fn schedule(&self) -> Result<Vec<f64>> {
        if self.temperatures == 0 {
            return Err(EbmError::Config(
                "AIS needs at least one temperature".into(),
            ));
        }
        if !(self.beta_min > 0.0 && self.beta_min < 1.0) {
            return Err(EbmError::Config("beta_min must lie in (0, 1)".into()));
        }
        let t = self.temperatures;
        let mut betas = vec![0.0];
        if t == 1 {
            betas.push(1.0);
        } else {
            let lmin = self.beta_min.ln();
            betas.extend((0..t).map(|i| (lmin * (1.0 - i as f64 / (t - 1) as f64)).exp()));
            betas[t] = 1.0;
        }
        Ok(betas)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogZEstimate {
    pub log_z: f64,
    /// Delta-method standard error of `log_z`.
    pub std_err: f64,
    pub log_weights: Vec<f64>,
}

fn summarize(log_weights: Vec<f64>, negate: bool, offset: f64) -> Result<LogZEstimate> {
    let n = log_weights.len() as f64;
    let lse = logsumexp(&log_weights);
    if !lse.is_finite() {
        return Err(EbmError::Degenerate(
            "every importance weight is zero".into(),
        ));
    }
    let log_mean = lse - n.ln();
    let w: Vec<f64> = log_weights.iter().map(|l| (l - log_mean).exp()).collect();
    let var = w.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let std_err = (var / n).sqrt();
    Ok(LogZEstimate {
        log_z: if negate {
            offset - log_mean
        } else {
            offset + log_mean
        },
        std_err,
        log_weights,
    })
}

/// Log of the annealed target `(1 − β)·ln q(x) − β·E(x)` and its gradient.
struct Annealed<'a, E: ?Sized> {
    energy: &'a E,
    label: Option<usize>,
    base: &'a BaseDist,
}

impl<E: EnergyFn + ?Sized> Annealed<'_, E> {
    fn energies(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let (e, g) = self
            .energy
            .energy_and_grad(x, labels_for(self.label, x.rows()).as_deref())?;
        if e.iter().any(|v| !v.is_finite()) || g.has_non_finite() {
            return Err(EbmError::Degenerate(
                "energy or gradient is not finite during annealing".into(),
            ));
        }
        Ok((e, g))
    }

    fn log_f(&self, beta: f64, e: f64, x: &[f64]) -> f64 {
        let lq = self.base.log_density(x);
        if lq == f64::NEG_INFINITY {
            return lq;
        }
        match self.base {
            BaseDist::UniformCube => -beta * e,
            BaseDist::Gaussian { .. } => (1.0 - beta) * lq - beta * e,
        }
    }

    /// MALA transition leaving `exp(log_f(β))` invariant.
    fn mala<R: Rng + ?Sized>(&self, beta: f64, h: f64, x: &mut Tensor, rng: &mut R) -> Result<()> {
        let (n, d) = (x.rows(), x.cols());
        let (e, g) = self.energies(x)?;
        let drift = |g: &[f64], x: &[f64]| -> Vec<f64> {
            g.iter()
                .zip(x)
                .map(|(gi, xi)| beta * gi + (1.0 - beta) * self.base.grad_neg_log_density(*xi))
                .collect()
        };
        let mut prop = x.clone();
        for r in 0..n {
            let u = drift(g.row_slice(r), x.row_slice(r));
            for (j, p) in prop.row_slice_mut(r).iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *p += -h * u[j] + (2.0 * h).sqrt() * z;
            }
        }
        // Rows outside the base support get +inf energy without a network call.
        let (ep, gp) = self.energies(&prop)?;
        for r in 0..n {
            let accept_u: f64 = rng.random();
            let (xr, pr) = (x.row_slice(r), prop.row_slice(r));
            let lf_new = self.log_f(beta, ep[r], pr);
            if lf_new == f64::NEG_INFINITY {
                continue;
            }
            let lf_old = self.log_f(beta, e[r], xr);
            let (u_old, u_new) = (drift(g.row_slice(r), xr), drift(gp.row_slice(r), pr));
            let log_q = |to: &[f64], from: &[f64], u: &[f64]| -> f64 {
                -(0..d)
                    .map(|j| (to[j] - from[j] + h * u[j]).powi(2))
                    .sum::<f64>()
                    / (4.0 * h)
            };
            let log_alpha = lf_new - lf_old + log_q(xr, pr, &u_new) - log_q(pr, xr, &u_old);
            if accept_u.ln() < log_alpha {
                let new = pr.to_vec();
                x.row_slice_mut(r).copy_from_slice(&new);
            }
        }
        Ok(())
    }

    fn step_for(cfg: &AisConfig, beta: f64) -> f64 {
        (cfg.step_size / beta.max(1e-300).sqrt()).min(cfg.max_step)
    }
}

fn ais_check<E: EnergyFn + ?Sized>(energy: &E, cfg: &AisConfig) -> Result<Vec<f64>> {
    if cfg.chains == 0 {
        return Err(EbmError::Config("AIS needs at least one chain".into()));
    }
    if !(cfg.step_size > 0.0) {
        return Err(EbmError::Config("AIS step_size must be > 0".into()));
    }
    if let BaseDist::Gaussian { std, .. } = cfg.base {
        if !(std > 0.0) {
            return Err(EbmError::Config("Gaussian base std must be > 0".into()));
        }
    }
    let _ = energy.dim();
    cfg.schedule()
}

/// Annealed importance sampling from the base distribution to
/// `exp(−E)`. The log-mean weight is a stochastic lower bound on `ln Z`.
pub fn ais_log_z<E: EnergyFn + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    label: Option<usize>,
    cfg: &AisConfig,
    rng: &mut R,
) -> Result<LogZEstimate> {
    let betas = ais_check(energy, cfg)?;
    let target = Annealed {
        energy,
        label,
        base: &cfg.base,
    };
    let mut x = cfg.base.sample(cfg.chains, energy.dim(), rng);
    let mut lw = vec![0.0; cfg.chains];
    for t in 1..betas.len() {
        let e = energy.energy(&x, labels_for(label, x.rows()).as_deref())?;
        for (r, w) in lw.iter_mut().enumerate() {
            *w += target.log_f(betas[t], e[r], x.row_slice(r))
                - target.log_f(betas[t - 1], e[r], x.row_slice(r));
        }
        if t + 1 < betas.len() {
            for _ in 0..cfg.transitions {
                target.mala(
                    betas[t],
                    Annealed::<E>::step_for(cfg, betas[t]),
                    &mut x,
                    rng,
                )?;
            }
        }
    }
    summarize(lw, false, 0.0)
}

/// Reverse annealing from approximate model samples `init` (typically the
/// replay buffer) down to the base. `−ln mean(w)` is a stochastic upper bound
/// on `ln Z` when `init` is an exact model sample.
pub fn raise_log_z<E: EnergyFn + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    label: Option<usize>,
    cfg: &AisConfig,
    init: &Tensor,
    rng: &mut R,
) -> Result<LogZEstimate> {
    let betas = ais_check(energy, cfg)?;
    if init.cols() != energy.dim() || init.rows() == 0 {
        return Err(EbmError::Dimension(format!(
            "reverse chains need a non-empty [n, {}] start, got {:?}",
            energy.dim(),
            init.shape()
        )));
    }
    let target = Annealed {
        energy,
        label,
        base: &cfg.base,
    };
    let idx: Vec<usize> = (0..cfg.chains).map(|i| i % init.rows()).collect();
    let mut x = init.select_rows(&idx);
    if let BaseDist::UniformCube = cfg.base {
        for v in x.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let top = betas.len() - 1;
    for _ in 0..cfg.burn_in {
        target.mala(1.0, Annealed::<E>::step_for(cfg, 1.0), &mut x, rng)?;
    }
    let mut lw = vec![0.0; cfg.chains];
    for t in (1..=top).rev() {
        if t < top {
            for _ in 0..cfg.transitions {
                target.mala(
                    betas[t],
                    Annealed::<E>::step_for(cfg, betas[t]),
                    &mut x,
                    rng,
                )?;
            }
        }
        let e = energy.energy(&x, labels_for(label, x.rows()).as_deref())?;
        for (r, w) in lw.iter_mut().enumerate() {
            *w += target.log_f(betas[t - 1], e[r], x.row_slice(r))
                - target.log_f(betas[t], e[r], x.row_slice(r));
        }
    }
    summarize(lw, true, 0.0)
}

/// AIS and RAISE estimates and the interval reported from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Bracket {
    pub ais: LogZEstimate,
    pub raise: LogZEstimate,
    /// `ais − z·se` and `raise + z·se`.
    pub lower: f64,
    pub upper: f64,
}

impl Bracket {
    pub fn new(ais: LogZEstimate, raise: LogZEstimate, z: f64) -> Self {
        let lower = ais.log_z.min(raise.log_z) - z * ais.std_err;
        let upper = raise.log_z.max(ais.log_z) + z * raise.std_err;
        Self {
            ais,
            raise,
            lower,
            upper,
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Runs AIS and RAISE with independent halves of the RNG stream.
pub fn log_z_bracket<E: EnergyFn + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    label: Option<usize>,
    cfg: &AisConfig,
    model_samples: &Tensor,
    z: f64,
    rng: &mut R,
) -> Result<Bracket> {
    let ais = ais_log_z(energy, label, cfg, rng)?;
    let raise = raise_log_z(energy, label, cfg, model_samples, rng)?;
    Ok(Bracket::new(ais, raise, z))
}

/// Probability that a random in-distribution score exceeds a random
/// out-of-distribution score, ties counting one half.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(EbmError::EmptyInput("AUROC needs both score sets".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, true))
        .chain(scores_out.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(EbmError::Contract("AUROC scores contain NaN".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += mid_rank * all[i..j].iter().filter(|(_, is_in)| *is_in).count() as f64;
        i = j;
    }
    let (n1, n0) = (scores_in.len() as f64, scores_out.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Mean and unbiased covariance of the rows of `x`.
pub fn moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = (x.rows(), x.cols());
    if n < d + 1 || n < 2 {
        return Err(EbmError::Degenerate(format!(
            "{n} samples cannot fit a {d}-dim Gaussian"
        )));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |r, c| m[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Eigenvalues below this are treated as zero when taking square roots.
const EIGEN_FLOOR: f64 = 1e-10;

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig
        .eigenvalues
        .map(|l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_from_moments(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(EbmError::Dimension(
            "Frechet moments disagree in dimension".into(),
        ));
    }
    let r1 = sqrt_psd(s1);
    let cross = sqrt_psd(&(&r1 * s2 * &r1));
    let v = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

/// Frechet distance between Gaussians fitted to the rows of `a` and `b`.
pub fn frechet_gaussian(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(EbmError::Dimension(format!(
            "{} vs {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let (m1, s1) = moments(a)?;
    let (m2, s2) = moments(b)?;
    frechet_from_moments(&m1, &s1, &m2, &s2)
}

/// Largest gap between the two empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(EbmError::EmptyInput(
            "KS statistic needs two samples".into(),
        ));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = match a[i].total_cmp(&b[j]) {
            Ordering::Greater => b[j],
            _ => a[i],
        };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(best)
}

/// Energy of every row under every class: `[n, C]`.
pub fn class_energies<E: EnergyFn + ?Sized>(energy: &E, x: &Tensor) -> Result<Tensor> {
    let c = energy.num_classes();
    if c == 0 {
        return Err(EbmError::Contract(
            "classification needs a conditional model".into(),
        ));
    }
    let n = x.rows();
    let mut out = Tensor::zeros(&[n, c]);
    for k in 0..c {
        let e = energy.energy(x, Some(&vec![k; n]))?;
        for (r, v) in e.into_iter().enumerate() {
            out.set(r, k, v);
        }
    }
    Ok(out)
}

fn argmin_rows(e: &Tensor) -> Vec<usize> {
    (0..e.rows())
        .map(|r| {
            let row = e.row_slice(r);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] < row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Lowest-energy class per row; ties go to the lowest class index.
pub fn energy_classify<E: EnergyFn + ?Sized>(energy: &E, x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmin_rows(&class_energies(energy, x)?))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub eps: f64,
    #[serde(default = "pgd_steps")]
    pub steps: usize,
    /// Defaults to `eps / 4`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "pgd_norm")]
    pub norm: Norm,
}

fn pgd_steps() -> usize {
    20
}

fn pgd_norm() -> Norm {
    Norm::Linf
}

impl PgdConfig {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            steps: pgd_steps(),
            step_size: None,
            norm: Norm::Linf,
        }
    }
}

/// Gradient with respect to `x` of the cross-entropy of the logits `−E(x, c)`
/// against `y`, and the loss per row.
pub fn energy_ce_grad<E: EnergyFn + ?Sized>(
    energy: &E,
    x: &Tensor,
    y: &[usize],
) -> Result<(Vec<f64>, Tensor)> {
    let (n, d, c) = (x.rows(), x.cols(), energy.num_classes());
    if c == 0 {
        return Err(EbmError::Contract(
            "attack needs a conditional model".into(),
        ));
    }
    let mut es = Vec::with_capacity(c);
    let mut gs = Vec::with_capacity(c);
    for k in 0..c {
        let (e, g) = energy.energy_and_grad(x, Some(&vec![k; n]))?;
        es.push(e);
        gs.push(g);
    }
    let mut loss = vec![0.0; n];
    let mut grad = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let logits: Vec<f64> = (0..c).map(|k| -es[k][r]).collect();
        let lse = logsumexp(&logits);
        loss[r] = lse - logits[y[r]];
        for k in 0..c {
            // ∂CE/∂logit_k = p_k − [k = y], and ∂logit_k/∂x = −∂E_k/∂x.
            let coef = -((logits[k] - lse).exp() - f64::from(u8::from(k == y[r])));
            for (o, g) in grad.row_slice_mut(r).iter_mut().zip(gs[k].row_slice(r)) {
                *o += coef * g;
            }
        }
    }
    Ok((loss, grad))
}

/// Projected gradient ascent on the energy-logit cross-entropy, kept in the
/// `eps`-ball around `x` and in the unit cube. No random start.
pub fn pgd_attack<E: EnergyFn + ?Sized>(
    energy: &E,
    x: &Tensor,
    y: &[usize],
    cfg: &PgdConfig,
) -> Result<Tensor> {
    if !(cfg.eps > 0.0) {
        return Err(EbmError::Contract("PGD radius must be > 0".into()));
    }
    if y.len() != x.rows() {
        return Err(EbmError::Dimension(format!(
            "{} labels for {} rows",
            y.len(),
            x.rows()
        )));
    }
    let alpha = cfg.step_size.unwrap_or(cfg.eps / 4.0);
    let d = x.cols();
    let mut adv = x.clone();
    for _ in 0..cfg.steps {
        let (_, g) = energy_ce_grad(energy, &adv, y)?;
        for r in 0..x.rows() {
            let gr = g.row_slice(r);
            let step: Vec<f64> = match cfg.norm {
                Norm::Linf => gr
                    .iter()
                    .map(|v| alpha * v.signum() * f64::from(u8::from(*v != 0.0)))
                    .collect(),
                Norm::L2 => {
                    let n = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        gr.iter().map(|v| alpha * v / n).collect()
                    } else {
                        vec![0.0; d]
                    }
                }
            };
            let x0 = x.row_slice(r);
            let row = adv.row_slice_mut(r);
            for j in 0..d {
                row[j] += step[j];
            }
            match cfg.norm {
                Norm::Linf => {
                    for j in 0..d {
                        row[j] = row[j].clamp(x0[j] - cfg.eps, x0[j] + cfg.eps);
                    }
                }
                Norm::L2 => {
                    let n = (0..d).map(|j| (row[j] - x0[j]).powi(2)).sum::<f64>().sqrt();
                    if n > cfg.eps {
                        for j in 0..d {
                            row[j] = x0[j] + (row[j] - x0[j]) * cfg.eps / n;
                        }
                    }
                }
            }
            for v in row.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(adv)
}

/// Refines each row under every class with a bounded chain, then classifies
/// by the lowest refined energy.
pub fn refine_and_classify<E: EnergyFn + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    x: &Tensor,
    bound: f64,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let (n, c) = (x.rows(), energy.num_classes());
    if c == 0 {
        return Err(EbmError::Contract(
            "classification needs a conditional model".into(),
        ));
    }
    let mut e = Tensor::zeros(&[n, c]);
    for k in 0..c {
        let labels = vec![k; n];
        let refined = refine_bounded(x, bound, energy, Some(&labels), cfg, rng)?;
        for (r, v) in energy
            .energy(&refined, Some(&labels))?
            .into_iter()
            .enumerate()
        {
            e.set(r, k, v);
        }
    }
    Ok(argmin_rows(&e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub fractions: Vec<f64>,
    pub unassigned: f64,
}

/// Fraction of samples whose nearest center is within `radius`, per center.
pub fn mode_coverage(samples: &Tensor, centers: &[Vec<f64>], radius: f64) -> Result<Coverage> {
    if !(radius > 0.0) {
        return Err(EbmError::Contract("coverage radius must be > 0".into()));
    }
    let mut counts = vec![0usize; centers.len()];
    let n = samples.rows();
    if n == 0 {
        return Ok(Coverage {
            fractions: vec![0.0; centers.len()],
            unassigned: 0.0,
        });
    }
    let mut unassigned = 0;
    for r in 0..n {
        let row = samples.row_slice(r);
        let nearest = centers
            .iter()
            .map(|c| {
                c.iter()
                    .zip(row)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((k, dist)) if dist <= radius => counts[k] += 1,
            _ => unassigned += 1,
        }
    }
    Ok(Coverage {
        fractions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        unassigned: unassigned as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Quadratic;
    use crate::seeded;
    use crate::Tape;
    use crate::Var;

    /// `E(x) = c` everywhere.
    struct Constant(f64, usize);

    impl EnergyFn for Constant {
        fn dim(&self) -> usize {
            self.1
        }
        fn energy_on<'t>(&self, _: &'t Tape, x: Var<'t>, _: Option<&[usize]>) -> Result<Var<'t>> {
            Ok(x.sum_cols()?.scale(0.0).offset(self.0))
        }
    }

    #[test]
    fn gaussian_normalizer() {
        let q = Quadratic::new(vec![0.0], 1.0);
        let lz = log_partition_quadrature(&q, None, &[(-10.0, 10.0)], 1e-3).unwrap();
        assert!((lz - 0.5 * std::f64::consts::TAU.ln()).abs() < 1e-4);
    }

    #[test]
    fn constant_energy_quadrature() {
        assert!(
            log_partition_quadrature(&Constant(0.0, 1), None, &[(0.0, 1.0)], 0.01)
                .unwrap()
                .abs()
                < 1e-12
        );
        let v = log_partition_quadrature(&Constant(1.5, 2), None, &[(0.0, 2.0), (0.0, 3.0)], 0.1)
            .unwrap();
        assert!((v - (-1.5 + 6f64.ln())).abs() < 1e-12);
        assert!(matches!(
            log_partition_quadrature(&Constant(0.0, 3), None, &[(0.0, 1.0); 3], 0.1),
            Err(EbmError::Unsupported(_))
        ));
    }

    #[test]
    fn schedule_shape() {
        let cfg = AisConfig {
            temperatures: 1,
            ..AisConfig::default()
        };
        assert_eq!(cfg.schedule().unwrap(), vec![0.0, 1.0]);
        let b = AisConfig::default().schedule().unwrap();
        assert_eq!(b.len(), 101);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert_eq!((b[0], b[100]), (0.0, 1.0));
    }

    #[test]
    fn target_equal_to_base_gives_zero() {
        for t in [1, 10] {
            let cfg = AisConfig {
                chains: 16,
                temperatures: t,
                ..AisConfig::default()
            };
            let e = ais_log_z(&Constant(0.0, 2), None, &cfg, &mut seeded(0)).unwrap();
            assert_eq!(e.log_z, 0.0);
            assert!(e.log_weights.iter().all(|&w| w == 0.0));
            let init = Tensor::uniform(&[8, 2], 0.0, 1.0, &mut seeded(1));
            let r = raise_log_z(&Constant(0.0, 2), None, &cfg, &init, &mut seeded(2)).unwrap();
            assert_eq!(r.log_z, 0.0);
        }
    }

    #[test]
    fn gaussian_base_constant_offset() {
        let q = Quadratic::new(vec![0.0], 4.0);
        let cfg = AisConfig {
            chains: 8,
            temperatures: 5,
            base: BaseDist::Gaussian {
                mean: 0.0,
                std: 0.5,
            },
            ..AisConfig::default()
        };
        let e = ais_log_z(&q, None, &cfg, &mut seeded(0)).unwrap();
        let truth = 0.5 * (std::f64::consts::TAU / 4.0).ln();
        assert!((e.log_z - truth).abs() < 1e-12);
    }

    #[test]
    fn auroc_basics() {
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0, 1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[2.0, 0.0], &[1.0]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let m = |v: f64| DVector::from_element(1, v);
        let s = |v: f64| DMatrix::from_element(1, 1, v * v);
        assert!(
            (frechet_from_moments(&m(0.0), &s(1.0), &m(3.0), &s(1.0)).unwrap() - 9.0).abs() < 1e-6
        );
        assert!(
            (frechet_from_moments(&m(0.0), &s(1.0), &m(0.0), &s(2.0)).unwrap() - 1.0).abs() < 1e-6
        );
    }

    #[test]
    fn frechet_identical_sets() {
        let x = Tensor::uniform(&[50, 3], 0.0, 1.0, &mut seeded(0));
        assert!(frechet_gaussian(&x, &x).unwrap() < 1e-8);
        let flat = Tensor::matrix(4, 2, vec![0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0]).unwrap();
        assert!(frechet_gaussian(&flat, &flat).unwrap() < 1e-8);
        assert!(frechet_gaussian(&Tensor::zeros(&[2, 2]), &flat).is_err());
    }

    #[test]
    fn ks_extremes() {
        assert_eq!(
            ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            0.0
        );
        assert_eq!(ks_statistic(&[1.0, 2.0], &[5.0, 6.0]).unwrap(), 1.0);
        assert!((ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[3.5]).unwrap() - 0.75).abs() < 1e-15);
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn coverage_cases() {
        let centers = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let at_zero = Tensor::zeros(&[5, 2]);
        assert_eq!(
            mode_coverage(&at_zero, &centers, 0.1).unwrap().fractions,
            vec![1.0, 0.0]
        );
        let empty = Tensor::zeros(&[0, 2]);
        let c = mode_coverage(&empty, &centers, 0.1).unwrap();
        assert_eq!((c.fractions, c.unassigned), (vec![0.0, 0.0], 0.0));
        let far = Tensor::full(&[2, 2], 0.5);
        assert_eq!(mode_coverage(&far, &centers, 0.1).unwrap().unassigned, 1.0);
    }
}
