//! Composition by summing energies: `E(x) = Σᵢ Eᵢ(x, yᵢ)`, a product of
//! experts. Sampling runs Langevin dynamics on the sum, or steps through the
//! components in turn.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EbmError, Result};
use crate::model::{check_batch, EnergyFn, ParamEnergy};
use crate::sampler::{langevin_step, run_chain, LangevinConfig, ReplayBuffer};
use crate::tensor::Tensor;
use crate::trainer::{kl_finetune_step, train_step, AdamState, TapedChain, TrainConfig};

/// A borrowed model and the label it is conditioned on.
#[derive(Clone, Copy)]
pub struct Component<'a> {
    pub energy: &'a dyn EnergyFn,
    pub label: Option<usize>,
}

impl<'a> Component<'a> {
    pub fn new(energy: &'a dyn EnergyFn, label: Option<usize>) -> Self {
        Self { energy, label }
    }
}

/// Sum of borrowed component energies. Incoming labels are ignored; each
/// component uses its own.
pub struct SumEnergy<'a> {
    parts: Vec<Component<'a>>,
    dim: usize,
}

pub fn sum_energy<'a>(parts: Vec<Component<'a>>) -> Result<SumEnergy<'a>> {
    let dim = parts
        .first()
        .ok_or_else(|| EbmError::EmptyInput("composition needs at least one model".into()))?
        .energy
        .dim();
    for (i, p) in parts.iter().enumerate() {
        if p.energy.dim() != dim {
            return Err(EbmError::Dimension(format!(
                "component {i} has dimension {}, component 0 has {dim}",
                p.energy.dim()
            )));
        }
    }
    Ok(SumEnergy { parts, dim })
}

fn component_energy<'t>(
    energy: &dyn EnergyFn,
    label: Option<usize>,
    tape: &'t Tape,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let labels = label.map(|l| vec![l; x.value().rows()]);
    energy.energy_on(tape, x, labels.as_deref())
}

impl SumEnergy<'_> {
    pub fn parts(&self) -> &[Component<'_>] {
        &self.parts
    }
}

impl EnergyFn for SumEnergy<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        _labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        let mut total = component_energy(self.parts[0].energy, self.parts[0].label, tape, x)?;
        for p in &self.parts[1..] {
            total = total.add(component_energy(p.energy, p.label, tape, x)?)?;
        }
        Ok(total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    #[serde(default)]
    pub langevin: LangevinConfig,
    /// Step each component in turn instead of following the summed gradient.
    /// One chain step is then one step per component.
    #[serde(default)]
    pub round_robin: bool,
}

/// Samples the product distribution starting from `init`.
pub fn joint_sample<R: Rng + ?Sized>(
    parts: &[Component<'_>],
    cfg: &JointConfig,
    init: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let sum = sum_energy(parts.to_vec())?;
    if !cfg.round_robin {
        return Ok(run_chain(&sum, init, None, &cfg.langevin, rng)?.samples);
    }
    cfg.langevin.validate()?;
    let mut x = init.clone();
    for k in 0..cfg.langevin.steps {
        for p in parts {
            let labels = p.label.map(|l| vec![l; x.rows()]);
            x = langevin_step(
                p.energy,
                &x,
                labels.as_deref(),
                &cfg.langevin,
                Some(init),
                k,
                rng,
            )?
            .0;
        }
    }
    Ok(x)
}

/// Owned, trainable sum of models.
///
/// Label `k` passed to the sum selects the label tuple `combos[k]`, one entry
/// per component. Without combos the sum is unconditional and every component
/// uses its default label.
#[derive(Clone, Debug, PartialEq)]
pub struct SumModel<M> {
    parts: Vec<M>,
    defaults: Vec<Option<usize>>,
    combos: Vec<Vec<Option<usize>>>,
}

impl<M: ParamEnergy> SumModel<M> {
    pub fn new(parts: Vec<(M, Option<usize>)>) -> Result<Self> {
        let dim = parts
            .first()
            .ok_or_else(|| EbmError::EmptyInput("composition needs at least one model".into()))?
            .0
            .dim();
        if let Some(i) = parts.iter().position(|p| p.0.dim() != dim) {
            return Err(EbmError::Dimension(format!(
                "component {i} differs in input dimension"
            )));
        }
        let (parts, defaults) = parts.into_iter().unzip();
        Ok(Self {
            parts,
            defaults,
            combos: vec![],
        })
    }

    /// Makes the sum conditional on the given label tuples.
    pub fn with_combos(mut self, combos: Vec<Vec<Option<usize>>>) -> Result<Self> {
        for c in &combos {
            if c.len() != self.parts.len() {
                return Err(EbmError::Dimension(format!(
                    "label tuple {c:?} for {} components",
                    self.parts.len()
                )));
            }
            for (m, l) in self.parts.iter().zip(c) {
                if let Some(l) = l {
                    if *l >= m.num_classes() {
                        return Err(EbmError::Label(format!(
                            "label {l} for a model with {} classes",
                            m.num_classes()
                        )));
                    }
                }
            }
        }
        self.combos = combos;
        Ok(self)
    }

    pub fn parts(&self) -> &[M] {
        &self.parts
    }

    pub fn into_parts(self) -> Vec<M> {
        self.parts
    }

    pub fn combos(&self) -> &[Vec<Option<usize>>] {
        &self.combos
    }

    pub fn set_defaults(&mut self, labels: Vec<Option<usize>>) -> Result<()> {
        if labels.len() != self.parts.len() {
            return Err(EbmError::Dimension(
                "one default label per component".into(),
            ));
        }
        self.defaults = labels;
        Ok(())
    }

    /// Per-component label vectors for a batch.
    fn component_labels(&self, rows: usize, labels: Option<&[usize]>) -> Vec<Option<Vec<usize>>> {
        (0..self.parts.len())
            .map(|i| match labels {
                Some(ls) => {
                    let col: Option<Vec<usize>> = ls.iter().map(|&k| self.combos[k][i]).collect();
                    col
                }
                None => self.defaults[i].map(|l| vec![l; rows]),
            })
            .collect()
    }
}

impl<M: ParamEnergy> EnergyFn for SumModel<M> {
    fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    fn num_classes(&self) -> usize {
        self.combos.len()
    }

    fn energy_on<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        let params: Vec<Var<'t>> = self
            .params()
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        self.forward(tape, &params, x, labels)
    }
}

impl<M: ParamEnergy> ParamEnergy for SumModel<M> {
    fn params(&self) -> Vec<&Tensor> {
        self.parts.iter().flat_map(|m| m.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.parts.iter_mut().flat_map(|m| m.params_mut()).collect()
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: Var<'t>,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        let rows = x.value().rows();
        check_batch(self.dim(), self.num_classes(), &x.value(), labels)?;
        let per_part = self.component_labels(rows, labels);
        let mut offset = 0;
        let mut total: Option<Var<'t>> = None;
        for (m, l) in self.parts.iter().zip(&per_part) {
            let n = m.params().len();
            let e = m.forward(tape, &params[offset..offset + n], x, l.as_deref())?;
            offset += n;
            total = Some(match total {
                None => e,
                Some(t) => t.add(e)?,
            });
        }
        Ok(total.expect("at least one component"))
    }

    fn after_update(&mut self) {
        for m in &mut self.parts {
            m.after_update();
        }
    }
}

/// Alternates taped-chain KL steps, whose target is a frozen copy of the
/// current sum, with contrastive steps on the union of the training sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "ft::epochs")]
    pub epochs: usize,
    /// Contrastive steps per epoch.
    #[serde(default = "ft::ml_steps")]
    pub ml_steps: usize,
    /// KL steps per epoch.
    #[serde(default = "ft::kl_steps")]
    pub kl_steps: usize,
    /// Chain used inside the KL step; at most 10 steps.
    #[serde(default = "ft::kl_langevin")]
    pub kl_langevin: LangevinConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

mod ft {
    use crate::sampler::LangevinConfig;

    pub fn epochs() -> usize {
        100
    }
    pub fn ml_steps() -> usize {
        1
    }
    pub fn kl_steps() -> usize {
        1
    }
    pub fn kl_langevin() -> LangevinConfig {
        LangevinConfig {
            steps: 10,
            ..LangevinConfig::default()
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: ft::epochs(),
            ml_steps: ft::ml_steps(),
            kl_steps: ft::kl_steps(),
            kl_langevin: ft::kl_langevin(),
            train: TrainConfig::default(),
        }
    }
}

/// Fine-tunes the sum so it reproduces the training sets. `data` holds all
/// training points and `labels` the combo index of each. Returns the KL loss
/// of every KL step.
pub fn finetune_combination<M, R>(
    model: &mut SumModel<M>,
    data: &Tensor,
    labels: &[usize],
    buffer: &mut ReplayBuffer,
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    M: ParamEnergy + Clone,
    R: Rng + ?Sized,
{
    if cfg.epochs == 0 {
        return Ok(vec![]);
    }
    check_batch(model.dim(), model.num_classes(), data, Some(labels))?;
    if data.rows() == 0 {
        return Err(EbmError::EmptyInput("fine-tuning data".into()));
    }
    cfg.train.validate()?;
    let adam_cfg = cfg.train.adam();
    let mut adam = AdamState::for_model(model);
    let mut losses = vec![];
    let batch = cfg.train.batch_size;
    for _ in 0..cfg.epochs {
        for _ in 0..cfg.ml_steps {
            let idx: Vec<usize> = (0..batch)
                .map(|_| rng.random_range(0..data.rows()))
                .collect();
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            train_step(
                model,
                &mut adam,
                &data.select_rows(&idx),
                Some(&l),
                buffer,
                &cfg.train,
                rng,
            )?;
        }
        for _ in 0..cfg.kl_steps {
            let l: Vec<usize> = (0..batch)
                .map(|_| labels[rng.random_range(0..labels.len())])
                .collect();
            let init = buffer.init_batch_for_labels(&l, rng).samples;
            let target = model.clone();
            let chain = TapedChain {
                init: &init,
                labels: Some(&l),
                target_labels: Some(&l),
                langevin: &cfg.kl_langevin,
            };
            losses.push(kl_finetune_step(
                model, &mut adam, &target, &chain, &adam_cfg, rng,
            )?);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EnergyNet, ModelConfig, Quadratic};
    use crate::seeded;

    #[test]
    fn single_component_matches_the_model() {
        let net = EnergyNet::new(ModelConfig::mlp(&[2, 8, 1]), &mut seeded(0)).unwrap();
        let sum = sum_energy(vec![Component::new(&net, None)]).unwrap();
        let x = Tensor::uniform(&[5, 2], 0.0, 1.0, &mut seeded(1));
        assert_eq!(
            sum.energy_and_grad(&x, None).unwrap(),
            net.energy_and_grad(&x, None).unwrap()
        );
    }

    #[test]
    fn two_quadratics_meet_in_the_middle() {
        let a = Quadratic::new(vec![0.0], 1.0);
        let b = Quadratic::new(vec![2.0], 1.0);
        let sum = sum_energy(vec![Component::new(&a, None), Component::new(&b, None)]).unwrap();
        let x = Tensor::column(vec![0.5, 1.0, 1.5]);
        let e = sum.energy(&x, None).unwrap();
        assert!(e[1] < e[0] && e[1] < e[2]);
        assert!(sum.grad_x(&x, None).unwrap().data()[1].abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Quadratic::new(vec![0.0], 1.0);
        let b = Quadratic::new(vec![0.0, 0.0], 1.0);
        assert!(sum_energy(vec![Component::new(&a, None), Component::new(&b, None)]).is_err());
        assert!(SumModel::new(vec![(a, None), (b, None)]).is_err());
    }

    #[test]
    fn one_model_joint_sample_is_the_plain_chain() {
        let q = Quadratic::new(vec![0.5, 0.5], 4.0);
        let init = Tensor::uniform(&[6, 2], 0.0, 1.0, &mut seeded(0));
        let cfg = JointConfig {
            langevin: LangevinConfig::unit_temperature(20, 0.01),
            round_robin: false,
        };
        let joint = joint_sample(&[Component::new(&q, None)], &cfg, &init, &mut seeded(5)).unwrap();
        let plain = run_chain(&q, &init, None, &cfg.langevin, &mut seeded(5))
            .unwrap()
            .samples;
        assert_eq!(joint, plain);
        let rr = joint_sample(
            &[Component::new(&q, None)],
            &JointConfig {
                round_robin: true,
                ..cfg
            },
            &init,
            &mut seeded(5),
        )
        .unwrap();
        assert_eq!(rr, plain);
    }

    #[test]
    fn sum_model_matches_borrowed_sum() {
        let mut rng = seeded(3);
        let a = EnergyNet::new(
            ModelConfig {
                num_classes: 3,
                ..ModelConfig::mlp(&[2, 8, 1])
            },
            &mut rng,
        )
        .unwrap();
        let b = EnergyNet::new(ModelConfig::mlp(&[2, 8, 1]), &mut rng).unwrap();
        let x = Tensor::uniform(&[4, 2], 0.0, 1.0, &mut rng);
        let borrowed =
            sum_energy(vec![Component::new(&a, Some(2)), Component::new(&b, None)]).unwrap();
        let owned = SumModel::new(vec![(a.clone(), Some(2)), (b.clone(), None)]).unwrap();
        assert_eq!(
            owned.energy(&x, None).unwrap(),
            borrowed.energy(&x, None).unwrap()
        );
        let combos = owned
            .with_combos(vec![vec![Some(0), None], vec![Some(2), None]])
            .unwrap();
        assert_eq!(
            combos.energy(&x, Some(&[1, 1, 1, 1])).unwrap(),
            borrowed.energy(&x, None).unwrap()
        );
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let q = Quadratic::new(vec![0.5], 2.0);
        let mut model = SumModel::new(vec![(q.clone(), None)])
            .unwrap()
            .with_combos(vec![vec![None]])
            .unwrap();
        let before = model.clone();
        let mut buf = ReplayBuffer::new(10, 1, 0.05).unwrap();
        let cfg = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        let data = Tensor::column(vec![0.5]);
        finetune_combination(&mut model, &data, &[0], &mut buf, &cfg, &mut seeded(0)).unwrap();
        assert_eq!(model, before);
    }
}
