//! Energy functions.
//!
//! [`EnergyFn`] is anything that maps a batch `[batch, d]` to per-row energies
//! `[batch, 1]` on a tape; the sampler and metrics only need this.
//! [`ParamEnergy`] adds trainable parameters. [`EnergyNet`] is the main model: a
//! fully-connected network with optional per-class gain/bias modulation and
//! spectral normalization. [`Quadratic`] is an isotropic Gaussian energy used as
//! an analytic fixture.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{dim_err, EbmError, Result};
use crate::tensor::Tensor;

/// Power iterations run when a network is constructed.
pub const INIT_POWER_ITERATIONS: usize = 50;

pub trait EnergyFn {
    fn dim(&self) -> usize;

    /// 0 for unconditional energies.
    fn num_classes(&self) -> usize {
        0
    }

    /// Per-row energies of `x` as a `[batch, 1]` node.
    fn energy_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>>;

    fn energy(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        Ok(self.energy_on(&tape, xv, labels)?.detach().into_data())
    }

    /// Energies and `∇ₓE`, row by row.
    fn energy_and_grad(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<(Vec<f64>, Tensor)> {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let e = self.energy_on(&tape, xv, labels)?;
        let g = tape.gradient(e.sum(), &[xv])?[0];
        Ok((e.detach().into_data(), g.detach()))
    }

    fn grad_x(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
        Ok(self.energy_and_grad(x, labels)?.1)
    }
}

impl<E: EnergyFn + ?Sized> EnergyFn for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn energy_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        (**self).energy_on(tape, x, labels)
    }
}

/// An energy with trainable parameters.
pub trait ParamEnergy: EnergyFn {
    /// Parameters in declaration order.
    fn params(&self) -> Vec<&Tensor>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Energies computed from the given parameter nodes (same order as
    /// [`params`](Self::params)).
    fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>>;

    /// Hook run after each optimizer update.
    fn after_update(&mut self) {}

    fn param_vars<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Forward pass with parameters entered as constants.
pub fn const_forward<'t, M: ParamEnergy + ?Sized>(
    model: &M,
    tape: &'t Tape,
    x: Var<'t>,
    labels: Option<&[usize]>,
) -> Result<Var<'t>> {
    let params: Vec<Var<'t>> = model
        .params()
        .into_iter()
        .map(|p| tape.constant(p.clone()))
        .collect();
    model.forward(tape, &params, x, labels)
}

/// Validates a batch against an energy's input dimension and label contract.
pub fn check_batch(
    dim: usize,
    num_classes: usize,
    x: &Tensor,
    labels: Option<&[usize]>,
) -> Result<()> {
    if !x.is_matrix() || x.cols() != dim {
        return dim_err(format!(
            "input shape {:?}, expected [batch, {dim}]",
            x.shape()
        ));
    }
    match (num_classes, labels) {
        (0, None) => Ok(()),
        (0, Some(_)) => Err(EbmError::Label(
            "labels given to an unconditional model".into(),
        )),
        (_, None) => Err(EbmError::Label("conditional model needs labels".into())),
        (c, Some(l)) => {
            if l.len() != x.rows() {
                return Err(EbmError::Label(format!(
                    "{} labels for {} rows",
                    l.len(),
                    x.rows()
                )));
            }
            match l.iter().find(|&&y| y >= c) {
                Some(y) => Err(EbmError::Label(format!(
                    "label {y} out of range for {c} classes"
                ))),
                None => Ok(()),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input dimension, hidden widths, then 1.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// 0 means unconditional.
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub spectral_norm: bool,
    /// Power iterations per training step.
    #[serde(default = "default_power_iterations")]
    pub power_iterations: usize,
}

fn default_power_iterations() -> usize {
    1
}

impl ModelConfig {
    pub fn mlp(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
            activation: Activation::default(),
            num_classes: 0,
            spectral_norm: false,
            power_iterations: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(EbmError::Config(
                "widths need an input and an output".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(EbmError::Config("zero-width layer".into()));
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(EbmError::Config("last layer width must be 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
    /// Per-class gain `[classes, out]`, hidden layers of conditional nets only.
    pub gain: Option<Tensor>,
    /// Per-class bias `[classes, out]`.
    pub shift: Option<Tensor>,
    /// Left singular vector estimate `[1, in]` when spectral norm is on.
    pub u: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyNet {
    config: ModelConfig,
    layers: Vec<Layer>,
}

impl EnergyNet {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.widths.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (config.widths[l], config.widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let hidden = l + 1 < n;
            let conditional = hidden && config.num_classes > 0;
            let u = config.spectral_norm.then(|| {
                let g = Tensor::randn(&[1, fan_in], rng);
                let norm = g.norm().max(f64::MIN_POSITIVE);
                g.map(|v| v / norm)
            });
            layers.push(Layer {
                weight: Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng),
                bias: Tensor::uniform(&[1, fan_out], -bound, bound, rng),
                gain: conditional.then(|| Tensor::ones(&[config.num_classes, fan_out])),
                shift: conditional.then(|| Tensor::zeros(&[config.num_classes, fan_out])),
                u,
            });
        }
        let mut net = Self { config, layers };
        for _ in 0..INIT_POWER_ITERATIONS {
            net.spectral_update();
        }
        Ok(net)
    }

    /// Reassembles a network from stored layers.
    pub fn from_layers(config: ModelConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let net = Self { config, layers };
        let expected = net.layout();
        if net.layers.len() != expected.len() {
            return Err(EbmError::Format(format!(
                "{} layers for widths {:?}",
                net.layers.len(),
                net.config.widths
            )));
        }
        for (layer, shapes) in net.layers.iter().zip(&expected) {
            let got = [
                Some(layer.weight.shape().to_vec()),
                Some(layer.bias.shape().to_vec()),
                layer.gain.as_ref().map(|t| t.shape().to_vec()),
                layer.shift.as_ref().map(|t| t.shape().to_vec()),
                layer.u.as_ref().map(|t| t.shape().to_vec()),
            ];
            if got != *shapes {
                return Err(EbmError::Format("layer shapes disagree with config".into()));
            }
        }
        Ok(net)
    }

    /// Per-layer shapes of `[W, b, γ, β, u]` implied by the config.
    pub fn layout(&self) -> Vec<[Option<Vec<usize>>; 5]> {
        layout_for(&self.config)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// One power-iteration step on every weight: `v = Wᵀu/‖Wᵀu‖`,
    /// `u = Wv/‖Wv‖`. Zero weights are skipped with a warning.
    pub fn spectral_update(&mut self) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            if let Some(u) = layer.u.as_mut() {
                if power_iteration(&layer.weight, u).is_none() {
                    warn!("layer {l}: zero weight matrix, spectral normalization skipped");
                }
            }
        }
    }

    /// Current top-singular-value estimates `‖Wᵀu‖`, one per spectral layer.
    pub fn sigma_estimates(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| l.u.as_ref().map(|u| sigma_estimate(&l.weight, u)))
            .collect()
    }
}

pub(crate) fn layout_for(config: &ModelConfig) -> Vec<[Option<Vec<usize>>; 5]> {
    let n = config.widths.len() - 1;
    (0..n)
        .map(|l| {
            let (i, o) = (config.widths[l], config.widths[l + 1]);
            let cond = l + 1 < n && config.num_classes > 0;
            [
                Some(vec![i, o]),
                Some(vec![1, o]),
                cond.then(|| vec![config.num_classes, o]),
                cond.then(|| vec![config.num_classes, o]),
                config.spectral_norm.then(|| vec![1, i]),
            ]
        })
        .collect()
}

/// `‖Wᵀu‖`, which equals `uᵀWv` for `v = Wᵀu/‖Wᵀu‖`.
pub fn sigma_estimate(w: &Tensor, u: &Tensor) -> f64 {
    u.matmul(w).map(|t| t.norm()).unwrap_or(0.0)
}

/// One power-iteration step; returns the new estimate, or `None` when `W` is
/// zero in the probed direction.
pub fn power_iteration(w: &Tensor, u: &mut Tensor) -> Option<f64> {
    let wtu = u.matmul(w).ok()?; // [1, out]
    let n1 = wtu.norm();
    if n1 == 0.0 || !n1.is_finite() {
        return None;
    }
    let v = wtu.map(|x| x / n1);
    let wv = crate::tensor::matmul_t(&v, false, w, true).ok()?; // [1, in]
    let n2 = wv.norm();
    if n2 == 0.0 || !n2.is_finite() {
        return None;
    }
    *u = wv.map(|x| x / n2);
    Some(sigma_estimate(w, u))
}

/// `W / σ̂` on the tape, with `u` and `v` held constant.
pub(crate) fn normalized_weight<'t>(tape: &'t Tape, w: Var<'t>, u: &Tensor) -> Result<Var<'t>> {
    let wv = w.value();
    let wtu = u.matmul(&wv)?;
    let n = wtu.norm();
    if n == 0.0 || !n.is_finite() {
        return Ok(w);
    }
    let v = wtu.map(|x| x / n);
    let outer = u.transpose().matmul(&v)?; // [in, out]
    let sigma = w.mul(tape.constant(outer))?.sum();
    w.div_scalar(sigma)
}

impl EnergyFn for EnergyNet {
    fn dim(&self) -> usize {
        self.config.widths[0]
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn energy_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        const_forward(self, tape, x, labels)
    }
}

impl ParamEnergy for EnergyNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            out.extend(l.gain.as_ref());
            out.extend(l.shift.as_ref());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            out.extend(l.gain.as_mut());
            out.extend(l.shift.as_mut());
        }
        out
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        check_batch(self.dim(), self.num_classes(), &x.value(), labels)?;
        let mut it = params.iter().copied();
        let mut next = || {
            it.next()
                .ok_or_else(|| EbmError::Contract("too few parameter nodes".into()))
        };
        let n = self.layers.len();
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut w = next()?;
            let b = next()?;
            if let Some(u) = &layer.u {
                w = normalized_weight(tape, w, u)?;
            }
            h = h.matmul(w)?.add_row(b)?;
            if l + 1 < n {
                h = h.activation(self.config.activation);
                if layer.gain.is_some() {
                    let labels = labels.expect("checked above");
                    let gain = next()?.gather_rows(labels)?;
                    let shift = next()?.gather_rows(labels)?;
                    h = h.mul(gain)?.add(shift)?;
                }
            }
        }
        Ok(h)
    }

    fn after_update(&mut self) {
        for _ in 0..self.config.power_iterations {
            self.spectral_update();
        }
    }
}

/// `E(x) = ½·exp(log_precision)·‖x − center‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    /// `[1, d]`
    pub center: Tensor,
    /// `[1, 1]`
    pub log_precision: Tensor,
}

impl Quadratic {
    pub fn new(center: Vec<f64>, precision: f64) -> Self {
        Self {
            center: Tensor::row(center),
            log_precision: Tensor::scalar(precision.ln()),
        }
    }

    pub fn precision(&self) -> f64 {
        self.log_precision.data()[0].exp()
    }
}

impl EnergyFn for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn energy_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        const_forward(self, tape, x, labels)
    }
}

impl ParamEnergy for Quadratic {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.center, &self.log_precision]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.center, &mut self.log_precision]
    }

    fn forward<'t>(
        &self,
        _tape: &'t Tape,
        params: &[Var<'t>],
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        check_batch(self.dim(), 0, &x.value(), labels)?;
        let rows = x.value().rows();
        let diff = x.sub(params[0].expand_row(rows)?)?;
        let sq = diff.square().sum_cols()?;
        let prec = params[1].exp().expand_scalar(rows, 1)?;
        Ok(sq.mul(prec)?.scale(0.5))
    }
}

/// Serializable description of any model kind a checkpoint can hold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp(ModelConfig),
    Quadratic { dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Net(EnergyNet),
    Quadratic(Quadratic),
}

impl Model {
    /// A fresh model. Quadratics start centered in the unit cube with unit
    /// precision.
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Mlp(cfg) => Model::Net(EnergyNet::new(cfg.clone(), rng)?),
            ModelSpec::Quadratic { dim } => Model::Quadratic(Quadratic::new(vec![0.5; *dim], 1.0)),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Net(n) => ModelSpec::Mlp(n.config().clone()),
            Model::Quadratic(q) => ModelSpec::Quadratic { dim: q.dim() },
        }
    }

    pub fn as_net(&self) -> Option<&EnergyNet> {
        match self {
            Model::Net(n) => Some(n),
            Model::Quadratic(_) => None,
        }
    }
}

impl EnergyFn for Model {
    fn dim(&self) -> usize {
        match self {
            Model::Net(n) => n.dim(),
            Model::Quadratic(q) => q.dim(),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            Model::Net(n) => n.num_classes(),
            Model::Quadratic(_) => 0,
        }
    }

    fn energy_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        match self {
            Model::Net(n) => n.energy_on(tape, x, labels),
            Model::Quadratic(q) => q.energy_on(tape, x, labels),
        }
    }
}

impl ParamEnergy for Model {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Net(n) => n.params(),
            Model::Quadratic(q) => q.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Net(n) => n.params_mut(),
            Model::Quadratic(q) => q.params_mut(),
        }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        match self {
            Model::Net(n) => n.forward(tape, params, x, labels),
            Model::Quadratic(q) => q.forward(tape, params, x, labels),
        }
    }

    fn after_update(&mut self) {
        if let Model::Net(n) = self {
            n.after_update();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;

    fn single_linear() -> EnergyNet {
        let mut net = EnergyNet::new(ModelConfig::mlp(&[2, 1]), &mut seeded(0)).unwrap();
        net.layers[0].weight = Tensor::column(vec![1.0, 2.0]);
        net.layers[0].bias = Tensor::scalar(0.0);
        net
    }

    #[test]
    fn linear_energy_is_a_dot_product() {
        let net = single_linear();
        let e = net.energy(&Tensor::row(vec![3.0, 4.0]), None).unwrap();
        assert_eq!(e, vec![11.0]);
    }

    #[test]
    fn untrained_conditioning_is_the_identity() {
        let mut cfg = ModelConfig::mlp(&[3, 8, 8, 1]);
        let uncond = EnergyNet::new(cfg.clone(), &mut seeded(5)).unwrap();
        cfg.num_classes = 4;
        let mut cond = EnergyNet::new(cfg, &mut seeded(5)).unwrap();
        for (c, u) in cond.layers.iter_mut().zip(uncond.layers()) {
            c.weight = u.weight.clone();
            c.bias = u.bias.clone();
        }
        let x = Tensor::uniform(&[6, 3], 0.0, 1.0, &mut seeded(1));
        let a = uncond.energy(&x, None).unwrap();
        for y in 0..4 {
            let b = cond.energy(&x, Some(&[y; 6])).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn label_contract() {
        let mut cfg = ModelConfig::mlp(&[2, 4, 1]);
        cfg.num_classes = 2;
        let net = EnergyNet::new(cfg, &mut seeded(0)).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(net.energy(&x, None), Err(EbmError::Label(_))));
        assert!(matches!(
            net.energy(&x, Some(&[0, 2])),
            Err(EbmError::Label(_))
        ));
        assert!(net.energy(&x, Some(&[0, 1])).is_ok());
        assert!(matches!(
            single_linear().energy(&x, Some(&[0, 0])),
            Err(EbmError::Label(_))
        ));
    }

    #[test]
    fn quadratic_gradient_is_x() {
        let q = Quadratic::new(vec![0.0, 0.0], 1.0);
        let x = Tensor::from_rows(&[vec![0.3, -2.0], vec![1.5, 4.0]]).unwrap();
        let (e, g) = q.energy_and_grad(&x, None).unwrap();
        assert!((e[0] - 0.5 * (0.09 + 4.0)).abs() < 1e-12);
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_do_not_interact() {
        let net = EnergyNet::new(ModelConfig::mlp(&[3, 16, 16, 1]), &mut seeded(2)).unwrap();
        let x = Tensor::uniform(&[4, 3], 0.0, 1.0, &mut seeded(3));
        let g0 = net.grad_x(&x, None).unwrap();
        let mut x2 = x.clone();
        x2.set(1, 0, 0.9);
        x2.set(1, 2, -0.4);
        let g1 = net.grad_x(&x2, None).unwrap();
        for r in [0, 2, 3] {
            assert_eq!(g0.row_slice(r), g1.row_slice(r));
        }
    }

    #[test]
    fn power_iteration_finds_diag_top_value() {
        let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut u = Tensor::row(vec![0.6, 0.8]);
        for _ in 0..50 {
            power_iteration(&w, &mut u);
        }
        assert!((sigma_estimate(&w, &u) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn zero_weight_is_skipped() {
        let mut cfg = ModelConfig::mlp(&[2, 2, 1]);
        cfg.spectral_norm = true;
        let mut net = EnergyNet::new(cfg, &mut seeded(0)).unwrap();
        net.layers[0].weight = Tensor::zeros(&[2, 2]);
        let u_before = net.layers[0].u.clone();
        net.spectral_update();
        assert_eq!(net.layers[0].u, u_before);
        let e = net.energy(&Tensor::row(vec![0.5, 0.5]), None).unwrap();
        assert!(e[0].is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::mlp(&[2, 4, 2]).validate().is_err());
        assert!(ModelConfig::mlp(&[2]).validate().is_err());
        assert!(ModelConfig::mlp(&[2, 0, 1]).validate().is_err());
        assert!(ModelConfig::mlp(&[2, 4, 1]).validate().is_ok());
    }
}
