//! End-to-end recipes shared by the command-line tool and the test suites:
//! training from a run config, sequential class-pair training, pendulum
//! rollouts and adversarial sweeps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Mlp;
use crate::checkpoint::Checkpoint;
use crate::config::{Dataset, RunConfig};
use crate::datagen::{self, PendulumConfig};
use crate::error::{EbmError, Result};
use crate::metrics::{
    self, accuracy, energy_classify, pgd_attack, refine_and_classify, Norm, PgdConfig,
};
use crate::model::{EnergyFn, EnergyNet, Model, ModelConfig};
use crate::sampler::{run_chain, LangevinConfig, ReplayBuffer};
use crate::tensor::Tensor;
use crate::trainer::{fit, train_step_from, AdamState, StepReport, TrainConfig};
use crate::{stream, Activation};

/// Stream ids derived from a run seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const HELDOUT: u64 = 5;
    pub const BASELINE: u64 = 6;
}

/// Training recipe for the 2D toy problems: a weak energy penalty and a chain
/// at temperature 1/4 without gradient clipping. The image-scale defaults
/// (α = 1, λ = 10, σ = 0.005, c = 0.01) fail to cover a 4-mode mixture.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        l2_coeff: 0.1,
        learning_rate: 1e-3,
        batch_size: 128,
        langevin: LangevinConfig {
            steps: 40,
            step_size: 2e-4,
            noise: 0.01,
            grad_clip: f64::INFINITY,
            mask: None,
            deviation_bound: None,
        },
        ..TrainConfig::default()
    }
}

pub struct TrainedRun {
    pub model: Model,
    pub adam: AdamState,
    pub buffer: ReplayBuffer,
    pub data: Dataset,
    pub reports: Vec<StepReport>,
}

impl TrainedRun {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint::new(
            cfg.seed,
            self.adam.t,
            self.model.clone(),
            Some(cfg.train.clone()),
            Some(cfg.data.clone()),
            Some(self.adam.clone()),
            Some(self.buffer.clone()),
        )
    }
}

/// Generates the data, builds the model and trains for `train.total_steps`.
pub fn train_run(cfg: &RunConfig, mut on_step: impl FnMut(&StepReport)) -> Result<TrainedRun> {
    cfg.validate()?;
    let data = cfg.data.generate(&mut stream(cfg.seed, streams::DATA))?;
    let mut model = Model::build(&cfg.model, &mut stream(cfg.seed, streams::INIT))?;
    if data.x.cols() != model.dim() {
        return Err(EbmError::Dimension(format!(
            "data has {} columns, model expects {}",
            data.x.cols(),
            model.dim()
        )));
    }
    let labels = if model.num_classes() > 0 {
        Some(
            data.labels
                .as_deref()
                .ok_or_else(|| EbmError::Label("conditional model needs labelled data".into()))?,
        )
    } else {
        None
    };
    let mut adam = AdamState::for_model(&model);
    let mut buffer = ReplayBuffer::new(cfg.train.buffer_size, model.dim(), cfg.train.uniform_prob)?;
    let mut reports = vec![];
    fit(
        &mut model,
        &mut adam,
        &mut buffer,
        &data.x,
        labels,
        &cfg.train,
        cfg.train.total_steps,
        &mut stream(cfg.seed, streams::TRAIN),
        |r| {
            on_step(r);
            reports.push(r.clone());
        },
    )?;
    Ok(TrainedRun {
        model,
        adam,
        buffer,
        data,
        reports,
    })
}

/// Runs the sampler from `init`, or from uniform noise when `init` is absent.
pub fn generate<E: EnergyFn + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    n: usize,
    init: Option<&Tensor>,
    labels: Option<&[usize]>,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let start = match init {
        Some(t) => t.clone(),
        None => Tensor::uniform(&[n, energy.dim()], 0.0, 1.0, rng),
    };
    Ok(run_chain(energy, &start, labels, cfg, rng)?.samples)
}

/// Trains a conditional network on labelled data with random minibatches and
/// label-matched chain starts.
#[allow(clippy::too_many_arguments)]
pub fn train_conditional<R: Rng + ?Sized>(
    net: &mut EnergyNet,
    adam: &mut AdamState,
    buffer: &mut ReplayBuffer,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    steps: usize,
    rng: &mut R,
) -> Result<()> {
    fit(net, adam, buffer, x, Some(labels), cfg, steps, rng, |_| {})
}

/// Sequential class-pair training of a conditional EBM and of a
/// cross-entropy MLP with the same schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualConfig {
    /// Clusters sit evenly on a circle around (0.5, 0.5).
    pub classes: usize,
    pub circle_radius: f64,
    pub sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub hidden: Vec<usize>,
    pub spectral_norm: bool,
    pub steps_per_task: usize,
    pub train: TrainConfig,
    pub baseline_hidden: Vec<usize>,
    pub baseline_learning_rate: f64,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            circle_radius: 0.35,
            sigma: 0.02,
            train_per_class: 200,
            test_per_class: 100,
            hidden: vec![64, 64],
            spectral_norm: false,
            steps_per_task: 1000,
            train: toy_train_config(),
            baseline_hidden: vec![64, 64],
            baseline_learning_rate: 1e-3,
        }
    }
}

impl ContinualConfig {
    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / self.classes as f64;
                vec![
                    0.5 + self.circle_radius * a.cos(),
                    0.5 + self.circle_radius * a.sin(),
                ]
            })
            .collect()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.classes / 2).map(|i| (2 * i, 2 * i + 1)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinualRow {
    pub task: usize,
    pub classes: (usize, usize),
    /// Accuracy on all test classes after finishing this task.
    pub ebm_all: f64,
    pub baseline_all: f64,
    /// Accuracy on the classes of tasks seen so far.
    pub ebm_seen: f64,
    pub baseline_seen: f64,
}

fn labelled_clusters<R: Rng + ?Sized>(
    cfg: &ContinualConfig,
    per_class: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let centers = cfg.centers();
    let mut parts = vec![];
    let mut labels = vec![];
    for (k, c) in centers.iter().enumerate() {
        parts
            .push(datagen::gaussian_mixture(std::slice::from_ref(c), cfg.sigma, per_class, rng)?.0);
        labels.extend(std::iter::repeat_n(k, per_class));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((Tensor::vstack(&refs)?, labels))
}

fn subset_accuracy(pred: &[usize], truth: &[usize], keep: impl Fn(usize) -> bool) -> f64 {
    let (p, t): (Vec<usize>, Vec<usize>) = pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| keep(t))
        .map(|(&p, &t)| (p, t))
        .unzip();
    accuracy(&p, &t)
}

pub fn continual_learning(cfg: &ContinualConfig, seed: u64) -> Result<Vec<ContinualRow>> {
    let (train_x, train_y) =
        labelled_clusters(cfg, cfg.train_per_class, &mut stream(seed, streams::DATA))?;
    let (test_x, test_y) =
        labelled_clusters(cfg, cfg.test_per_class, &mut stream(seed, streams::HELDOUT))?;
    let tasks = datagen::split_tasks(&train_x, &train_y, &cfg.pairs())?;

    let mut widths = vec![2];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let model_cfg = ModelConfig {
        num_classes: cfg.classes,
        spectral_norm: cfg.spectral_norm,
        ..ModelConfig::mlp(&widths)
    };
    let mut net = EnergyNet::new(model_cfg, &mut stream(seed, streams::INIT))?;
    let mut adam = AdamState::for_model(&net);
    let mut buffer = ReplayBuffer::new(cfg.train.buffer_size, 2, cfg.train.uniform_prob)?;

    let mut bwidths = vec![2];
    bwidths.extend(&cfg.baseline_hidden);
    bwidths.push(cfg.classes);
    let mut base_rng = stream(seed, streams::BASELINE);
    let mut mlp = Mlp::new(&bwidths, Activation::default(), false, &mut base_rng)?;
    let mut base_adam = AdamState::for_params(&mlp.params());
    let base_cfg = crate::trainer::AdamConfig {
        learning_rate: cfg.baseline_learning_rate,
        ..cfg.train.adam()
    };

    let mut rng = stream(seed, streams::TRAIN);
    let mut rows = vec![];
    let mut seen = vec![];
    for task in &tasks {
        train_conditional(
            &mut net,
            &mut adam,
            &mut buffer,
            &task.data,
            &task.labels,
            &cfg.train,
            cfg.steps_per_task,
            &mut rng,
        )?;
        for _ in 0..cfg.steps_per_task {
            let idx: Vec<usize> = (0..cfg.train.batch_size)
                .map(|_| base_rng.random_range(0..task.labels.len()))
                .collect();
            let y: Vec<usize> = idx.iter().map(|&i| task.labels[i]).collect();
            mlp.train_classifier_step(&mut base_adam, &base_cfg, &task.data.select_rows(&idx), &y)?;
        }
        seen.extend([task.classes.0, task.classes.1]);
        let ebm_pred = energy_classify(&net, &test_x)?;
        let base_pred = mlp.classify(&test_x)?;
        rows.push(ContinualRow {
            task: task.id,
            classes: task.classes,
            ebm_all: accuracy(&ebm_pred, &test_y),
            baseline_all: accuracy(&base_pred, &test_y),
            ebm_seen: subset_accuracy(&ebm_pred, &test_y, |c| seen.contains(&c)),
            baseline_seen: subset_accuracy(&base_pred, &test_y, |c| seen.contains(&c)),
        });
    }
    Ok(rows)
}

/// Pendulum transition model `E(s, s')` against a feedforward regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub pendulum: PendulumConfig,
    pub hidden: Vec<usize>,
    pub steps: usize,
    /// The mask is set by the recipe; the chain is started at `s' = s`.
    pub train: TrainConfig,
    pub horizon: usize,
    pub rollouts_per_start: usize,
    pub baseline_hidden: Vec<usize>,
    pub baseline_steps: usize,
    pub baseline_learning_rate: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            pendulum: PendulumConfig {
                trajectories: 1000,
                ..PendulumConfig::default()
            },
            hidden: vec![64, 64],
            steps: 3000,
            train: toy_train_config(),
            horizon: 50,
            rollouts_per_start: 4,
            baseline_hidden: vec![64, 64],
            baseline_steps: 3000,
            baseline_learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryReport {
    /// Frechet distance to the held-out states at steps `1..=horizon`.
    pub ebm: Vec<f64>,
    pub baseline: Vec<f64>,
}

impl TrajectoryReport {
    pub fn mean_ebm(&self) -> f64 {
        self.ebm.iter().sum::<f64>() / self.ebm.len().max(1) as f64
    }

    pub fn mean_baseline(&self) -> f64 {
        self.baseline.iter().sum::<f64>() / self.baseline.len().max(1) as f64
    }
}

const NEXT_STATE_MASK: [bool; 4] = [false, false, true, true];

/// Samples `s'` given each row of `states` with the masked chain started at
/// `s' = s`.
pub fn sample_next<E: EnergyFn + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    states: &Tensor,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let n = states.rows();
    let mut init = Vec::with_capacity(4 * n);
    for r in 0..n {
        let s = states.row_slice(r);
        init.extend_from_slice(s);
        init.extend_from_slice(s);
    }
    let cfg = LangevinConfig {
        mask: Some(NEXT_STATE_MASK.to_vec()),
        ..cfg.clone()
    };
    let out = run_chain(energy, &Tensor::matrix(n, 4, init)?, None, &cfg, rng)?.samples;
    let next: Vec<f64> = (0..n)
        .flat_map(|r| out.row_slice(r)[2..].to_vec())
        .collect();
    Tensor::matrix(n, 2, next)
}

/// Row `i` is the state of path `i` at time `t`.
pub fn states_at(paths: &[Vec<[f64; 2]>], t: usize) -> Result<Tensor> {
    Tensor::matrix(paths.len(), 2, paths.iter().flat_map(|p| p[t]).collect())
}

pub fn trajectory_experiment(cfg: &TrajectoryConfig, seed: u64) -> Result<TrajectoryReport> {
    let data = datagen::trajectory_sim(&cfg.pendulum, &mut stream(seed, streams::DATA))?;
    if cfg.horizon >= cfg.pendulum.length {
        return Err(EbmError::Config(format!(
            "horizon {} needs trajectories longer than {}",
            cfg.horizon, cfg.pendulum.length
        )));
    }
    let starts = data.test_paths.len() * cfg.rollouts_per_start;
    if starts < 3 {
        return Err(EbmError::Config(
            "need at least 3 rollouts for a 2-D Frechet distance".into(),
        ));
    }
    let pairs = data.train.pairs();
    let train_cfg = TrainConfig {
        langevin: LangevinConfig {
            mask: Some(NEXT_STATE_MASK.to_vec()),
            ..cfg.train.langevin.clone()
        },
        ..cfg.train.clone()
    };
    let mut widths = vec![4];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let mut net = EnergyNet::new(
        ModelConfig {
            spectral_norm: false,
            ..ModelConfig::mlp(&widths)
        },
        &mut stream(seed, streams::INIT),
    )?;
    let mut adam = AdamState::for_model(&net);
    let mut rng = stream(seed, streams::TRAIN);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..train_cfg.batch_size)
            .map(|_| rng.random_range(0..pairs.rows()))
            .collect();
        let pos = pairs.select_rows(&idx);
        // The free half starts at the current state; the mask fills the rest.
        let mut init = pos.clone();
        for r in 0..init.rows() {
            let row = init.row_slice_mut(r);
            row[2] = row[0];
            row[3] = row[1];
        }
        train_step_from(
            &mut net, &mut adam, &pos, None, init, None, &train_cfg, &mut rng,
        )?;
    }

    let mut bwidths = vec![2];
    bwidths.extend(&cfg.baseline_hidden);
    bwidths.push(2);
    let mut base_rng = stream(seed, streams::BASELINE);
    let mut mlp = Mlp::new(&bwidths, Activation::default(), true, &mut base_rng)?;
    let mut base_adam = AdamState::for_params(&mlp.params());
    let base_cfg = crate::trainer::AdamConfig {
        learning_rate: cfg.baseline_learning_rate,
        ..cfg.train.adam()
    };
    for _ in 0..cfg.baseline_steps {
        let idx: Vec<usize> = (0..cfg.train.batch_size)
            .map(|_| base_rng.random_range(0..data.train.states.rows()))
            .collect();
        mlp.train_regressor_step(
            &mut base_adam,
            &base_cfg,
            &data.train.states.select_rows(&idx),
            &data.train.next.select_rows(&idx),
        )?;
    }

    let idx: Vec<usize> = (0..starts).map(|i| i / cfg.rollouts_per_start).collect();
    let start = states_at(&data.test_paths, 0)?.select_rows(&idx);
    let mut sample_rng = stream(seed, streams::SAMPLE);
    let (mut s_ebm, mut s_base) = (start.clone(), start);
    let mut report = TrajectoryReport {
        ebm: vec![],
        baseline: vec![],
    };
    for t in 1..=cfg.horizon {
        s_ebm = sample_next(&net, &s_ebm, &cfg.train.langevin, &mut sample_rng)?;
        s_base = mlp.predict(&s_base)?;
        let truth = states_at(&data.test_paths, t)?;
        report.ebm.push(metrics::frechet_gaussian(&s_ebm, &truth)?);
        report
            .baseline
            .push(metrics::frechet_gaussian(&s_base, &truth)?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// L∞ bound on how far refinement may move an input.
    pub bound: f64,
    pub langevin: LangevinConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackRow {
    pub eps: f64,
    pub clean: f64,
    pub attacked: f64,
    pub refined: Option<f64>,
}

/// Accuracy under a PGD attack at each radius, optionally followed by bounded
/// refinement before classification.
pub fn attack_sweep<E: EnergyFn + ?Sized, R: Rng + ?Sized>(
    energy: &E,
    x: &Tensor,
    y: &[usize],
    eps: &[f64],
    norm: Norm,
    refine: Option<&RefineConfig>,
    rng: &mut R,
) -> Result<Vec<AttackRow>> {
    let clean = accuracy(&energy_classify(energy, x)?, y);
    eps.iter()
        .map(|&e| {
            let adv = pgd_attack(
                energy,
                x,
                y,
                &PgdConfig {
                    norm,
                    ..PgdConfig::new(e)
                },
            )?;
            let attacked = accuracy(&energy_classify(energy, &adv)?, y);
            let refined = match refine {
                Some(rc) => Some(accuracy(
                    &refine_and_classify(energy, &adv, rc.bound, &rc.langevin, rng)?,
                    y,
                )),
                None => None,
            };
            Ok(AttackRow {
                eps: e,
                clean,
                attacked,
                refined,
            })
        })
        .collect()
}
