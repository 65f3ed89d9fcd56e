//! Feedforward baselines: a cross-entropy classifier and an MSE regressor.

use rand::Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{EbmError, Result};
use crate::model::{normalized_weight, power_iteration, INIT_POWER_ITERATIONS};
use crate::tensor::Tensor;
use crate::trainer::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    us: Option<Vec<Tensor>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        spectral_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(EbmError::Config(format!("bad MLP widths {widths:?}")));
        }
        let mut weights = vec![];
        let mut biases = vec![];
        let mut us = vec![];
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(Tensor::uniform(&[w[0], w[1]], -bound, bound, rng));
            biases.push(Tensor::uniform(&[1, w[1]], -bound, bound, rng));
            let g = Tensor::randn(&[1, w[0]], rng);
            let n = g.norm().max(f64::MIN_POSITIVE);
            us.push(g.map(|v| v / n));
        }
        let mut mlp = Self {
            widths: widths.to_vec(),
            activation,
            weights,
            biases,
            us: spectral_norm.then_some(us),
        };
        for _ in 0..INIT_POWER_ITERATIONS {
            mlp.spectral_update();
        }
        Ok(mlp)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn spectral_update(&mut self) {
        if let Some(us) = self.us.as_mut() {
            for (w, u) in self.weights.iter().zip(us.iter_mut()) {
                power_iteration(w, u);
            }
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        if x.value().cols() != self.widths[0] {
            return Err(EbmError::Dimension(format!(
                "input has {} columns, MLP expects {}",
                x.value().cols(),
                self.widths[0]
            )));
        }
        let n = self.weights.len();
        let mut h = x;
        for l in 0..n {
            let mut w = params[2 * l];
            if let Some(us) = &self.us {
                w = normalized_weight(tape, w, &us[l])?;
            }
            h = h.matmul(w)?.add_row(params[2 * l + 1])?;
            if l + 1 < n {
                h = h.activation(self.activation);
            }
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let out = self.forward(&tape, &params, tape.constant(x.clone()))?;
        Ok(out.detach())
    }

    /// One Adam step on `loss(forward(x))`; returns the loss value.
    fn step<F>(
        &mut self,
        adam: &mut AdamState,
        cfg: &AdamConfig,
        x: &Tensor,
        loss: F,
    ) -> Result<f64>
    where
        F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect();
        let out = self.forward(&tape, &params, tape.constant(x.clone()))?;
        let l = loss(out)?;
        let value = l.value().data()[0];
        let grads: Vec<Tensor> = tape
            .gradient(l, &params)?
            .into_iter()
            .map(|g| g.detach())
            .collect();
        drop(params);
        adam_step(self.params_mut(), &grads, adam, cfg)?;
        self.spectral_update();
        Ok(value)
    }

    /// Cross-entropy step treating the outputs as logits.
    pub fn train_classifier_step(
        &mut self,
        adam: &mut AdamState,
        cfg: &AdamConfig,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<f64> {
        let c = *self.widths.last().expect("validated");
        let onehot = one_hot(labels, c)?;
        self.step(adam, cfg, x, |logits| cross_entropy(logits, &onehot))
    }

    pub fn train_regressor_step(
        &mut self,
        adam: &mut AdamState,
        cfg: &AdamConfig,
        x: &Tensor,
        target: &Tensor,
    ) -> Result<f64> {
        self.step(adam, cfg, x, |pred| {
            let tape = pred.tape();
            Ok(pred.sub(tape.constant(target.clone()))?.square().mean())
        })
    }

    /// Index of the largest output per row, lowest index on ties.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.predict(x)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row_slice(r);
                (1..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(EbmError::Label(format!("label {l} with {classes} classes")));
        }
        t.set(r, l, 1.0);
    }
    Ok(t)
}

/// `mean_r(logsumexp(logits_r) − logits_r · onehot_r)`.
pub fn cross_entropy<'t>(logits: Var<'t>, onehot: &Tensor) -> Result<Var<'t>> {
    let tape = logits.tape();
    let v = logits.value();
    let (n, c) = (v.rows(), v.cols());
    let shift: Vec<f64> = (0..n)
        .map(|r| {
            v.row_slice(r)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shifted = logits.sub(tape.constant(Tensor::column(shift)).expand_col(c)?)?;
    let lse = shifted.exp().sum_cols()?.ln();
    let picked = shifted.mul(tape.constant(onehot.clone()))?.sum_cols()?;
    Ok(lse.sub(picked)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let tape = Tape::new();
        let logits =
            tape.var(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1.0]).unwrap());
        let ce = cross_entropy(logits, &one_hot(&[2, 1], 3).unwrap())
            .unwrap()
            .value()
            .data()[0];
        let row0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let row1 = 1000.0 + (1.0 + (-1000f64).exp() + (-1001f64).exp()).ln() - 0.0;
        assert!((ce - (row0 + row1) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn classifier_learns_a_threshold() {
        let mut rng = seeded(0);
        let mut mlp = Mlp::new(&[1, 16, 2], Activation::default(), false, &mut rng).unwrap();
        let mut adam = AdamState::for_params(&mlp.params());
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        };
        let x = Tensor::uniform(&[200, 1], 0.0, 1.0, &mut rng);
        let y: Vec<usize> = x.data().iter().map(|&v| usize::from(v > 0.5)).collect();
        for _ in 0..500 {
            mlp.train_classifier_step(&mut adam, &cfg, &x, &y).unwrap();
        }
        let acc = mlp
            .classify(&x)
            .unwrap()
            .iter()
            .zip(&y)
            .filter(|(a, b)| a == b)
            .count();
        assert!(acc >= 190, "{acc}/200");
    }

    #[test]
    fn spectral_regressor_fits_a_line() {
        let mut rng = seeded(1);
        let mut mlp = Mlp::new(&[1, 16, 1], Activation::default(), true, &mut rng).unwrap();
        let mut adam = AdamState::for_params(&mlp.params());
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        };
        let x = Tensor::uniform(&[100, 1], 0.0, 1.0, &mut rng);
        let y = x.map(|v| 0.5 * v + 0.2);
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            loss = mlp.train_regressor_step(&mut adam, &cfg, &x, &y).unwrap();
        }
        assert!(loss < 1e-3, "{loss}");
    }
}
