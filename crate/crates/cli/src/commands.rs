use std::path::{Path, PathBuf};

use ebm_core::checkpoint::Checkpoint;
use ebm_core::compose::{
    finetune_combination, joint_sample, Component, FinetuneConfig, JointConfig, SumModel,
};
use ebm_core::config::{DatasetSpec, RunConfig};
use ebm_core::datagen::{self, pgm_grid};
use ebm_core::experiments::{
    attack_sweep, continual_learning, sample_next, states_at, streams, train_run, ContinualConfig,
    RefineConfig,
};
use ebm_core::metrics::{
    auroc, frechet_gaussian, ks_statistic, log_partition_quadrature, log_z_bracket, mode_coverage,
    AisConfig, Norm,
};
use ebm_core::model::Model;
use ebm_core::sampler::{inpaint, run_chain};
use ebm_core::trainer::StepReport;
use ebm_core::{stream, EbmError, EnergyFn, LangevinConfig, ReplayBuffer, Result, Tensor};
use log::info;
use serde::Deserialize;

use crate::io::{
    load_checkpoint, load_toml, parse_label, parse_mask, read_csv, write_csv, write_report,
};
use crate::{Cli, Command, EvalArgs, Metric, NormArg};

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train {
            config,
            out,
            metrics,
        } => train(&config, &out, metrics, seed),
        Command::Sample {
            checkpoint,
            n,
            steps,
            label,
            init_file,
            out,
        } => sample(
            &checkpoint,
            n,
            steps,
            label,
            init_file.as_deref(),
            &out,
            seed.unwrap_or(0),
        ),
        Command::Inpaint {
            checkpoint,
            input,
            mask,
            steps,
            label,
            out,
        } => inpaint_file(
            &checkpoint,
            &input,
            &mask,
            steps,
            label,
            &out,
            seed.unwrap_or(0),
        ),
        Command::Compose {
            checkpoints,
            labels,
            n,
            steps,
            round_robin,
            finetune_config,
            finetune_data,
            out,
        } => {
            let finetune = match (finetune_config, finetune_data) {
                (Some(c), Some(d)) => Some((c, d)),
                _ => None,
            };
            compose(
                &checkpoints,
                &labels,
                n,
                steps,
                round_robin,
                finetune,
                &out,
                seed.unwrap_or(0),
            )
        }
        Command::Eval(args) => eval(&args, seed.unwrap_or(0)),
        Command::Continual { config, out } => continual(config.as_deref(), &out, seed),
        Command::Attack {
            checkpoint,
            eps,
            norm,
            refine,
            refine_bound,
            refine_steps,
            refine_step_size,
            test_file,
            n,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let refine = refine.then(|| RefineConfig {
                bound: refine_bound,
                langevin: LangevinConfig {
                    steps: refine_steps,
                    step_size: refine_step_size,
                    ..train_langevin(&ck)
                },
            });
            let norm = match norm {
                NormArg::Linf => Norm::Linf,
                NormArg::L2 => Norm::L2,
            };
            attack(
                &ck,
                &eps,
                norm,
                refine.as_ref(),
                test_file.as_deref(),
                n,
                &out,
                seed.unwrap_or(0),
            )
        }
    }
}

fn train(config: &Path, out: &Path, metrics: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut rows = vec![];
    let run = train_run(&cfg, |r| {
        if r.step % 100 == 0 {
            info!(
                "step {} e_pos {:.4} e_neg {:.4} loss {:.4}",
                r.step, r.e_pos, r.e_neg, r.loss
            );
        }
        rows.push(r.csv_row());
    })?;
    run.checkpoint(&cfg).save(out)?;
    let metrics = metrics.unwrap_or_else(|| out.with_extension("csv"));
    write_report(&metrics, StepReport::CSV_HEADER, &rows)?;
    info!("wrote {} and {}", out.display(), metrics.display());
    Ok(())
}

/// The training chain, or the sampler defaults when the checkpoint has no
/// training config.
fn train_langevin(ck: &Checkpoint) -> LangevinConfig {
    ck.manifest
        .train
        .as_ref()
        .map(|t| t.langevin.clone())
        .unwrap_or_default()
}

fn chain_config(ck: &Checkpoint, steps: Option<usize>) -> LangevinConfig {
    let mut cfg = train_langevin(ck);
    if let Some(k) = steps {
        cfg.steps = k;
    }
    cfg
}

/// CSV, or a PGM grid of square images when `out` ends in `.pgm`.
fn write_samples(out: &Path, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
    {
        let side = (x.cols() as f64).sqrt().round() as usize;
        let cols = (x.rows() as f64).sqrt().ceil() as usize;
        return ebm_core::checkpoint::write_atomic(out, &pgm_grid(x, side, cols)?);
    }
    write_csv(out, x, labels)
}

fn sample(
    checkpoint: &Path,
    n: usize,
    steps: Option<usize>,
    label: Option<usize>,
    init_file: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = chain_config(&ck, steps);
    let mut rng = stream(seed, streams::SAMPLE);
    let (init, labels) = match init_file {
        Some(f) => {
            let (x, file_labels) = read_csv(f)?;
            let labels = label.map(|l| vec![l; x.rows()]).or(file_labels);
            (x, labels)
        }
        None => {
            let labels = label.map(|l| vec![l; n]);
            let x = match (&ck.buffer, &labels) {
                (Some(b), Some(l)) => b.init_batch_for_labels(l, &mut rng).samples,
                (Some(b), None) => b.init_batch(n, &mut rng).samples,
                (None, _) => Tensor::uniform(&[n, ck.model.dim()], 0.0, 1.0, &mut rng),
            };
            (x, labels)
        }
    };
    let x = run_chain(&ck.model, &init, labels.as_deref(), &cfg, &mut rng)?.samples;
    write_samples(out, &x, labels.as_deref())
}

fn inpaint_file(
    checkpoint: &Path,
    input: &Path,
    mask: &str,
    steps: Option<usize>,
    label: Option<usize>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = chain_config(&ck, steps);
    let (x, file_labels) = read_csv(input)?;
    let labels = label.map(|l| vec![l; x.rows()]).or(file_labels);
    let mask = parse_mask(mask)?;
    let restored = inpaint(
        &x,
        &mask,
        &ck.model,
        labels.as_deref(),
        &cfg,
        &mut stream(seed, streams::SAMPLE),
    )?;
    write_samples(out, &restored, labels.as_deref())
}

#[allow(clippy::too_many_arguments)]
fn compose(
    checkpoints: &[PathBuf],
    labels: &[String],
    n: usize,
    steps: Option<usize>,
    round_robin: bool,
    finetune: Option<(PathBuf, PathBuf)>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let cks = checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Option<usize>> = if labels.is_empty() {
        vec![None; cks.len()]
    } else if labels.len() == cks.len() {
        labels
            .iter()
            .map(|s| parse_label(s))
            .collect::<Result<_>>()?
    } else {
        return Err(EbmError::Config(format!(
            "{} labels for {} checkpoints",
            labels.len(),
            cks.len()
        )));
    };
    let langevin = chain_config(&cks[0], steps);
    let mut models: Vec<Model> = cks.into_iter().map(|c| c.model).collect();

    if let Some((cfg_path, data_path)) = finetune {
        let ft: FinetuneConfig = load_toml(&cfg_path)?;
        let (data, _) = read_csv(&data_path)?;
        // Every example shows the one requested combination.
        let mut sum = SumModel::new(models.into_iter().zip(labels.iter().copied()).collect())?
            .with_combos(vec![labels.clone()])?;
        let mut buffer = ReplayBuffer::new(ft.train.buffer_size, sum.dim(), ft.train.uniform_prob)?;
        let losses = finetune_combination(
            &mut sum,
            &data,
            &vec![0; data.rows()],
            &mut buffer,
            &ft,
            &mut stream(seed, streams::TRAIN),
        )?;
        info!(
            "fine-tuned for {} KL steps, last loss {:?}",
            losses.len(),
            losses.last()
        );
        models = sum.into_parts();
    }

    let parts: Vec<Component<'_>> = models
        .iter()
        .zip(&labels)
        .map(|(m, &l)| Component::new(m as &dyn EnergyFn, l))
        .collect();
    let mut rng = stream(seed, streams::SAMPLE);
    let init = Tensor::uniform(&[n, models[0].dim()], 0.0, 1.0, &mut rng);
    let x = joint_sample(
        &parts,
        &JointConfig {
            langevin,
            round_robin,
        },
        &init,
        &mut rng,
    )?;
    write_samples(out, &x, None)
}

fn dataset_spec(ck: &Checkpoint) -> Result<&DatasetSpec> {
    ck.manifest
        .dataset
        .as_ref()
        .ok_or_else(|| EbmError::Config("checkpoint records no dataset".into()))
}

fn training_data(ck: &Checkpoint) -> Result<(Tensor, Option<Vec<usize>>)> {
    let d = dataset_spec(ck)?.generate(&mut stream(ck.manifest.seed, streams::DATA))?;
    Ok((d.x, d.labels))
}

/// Fresh draws from the training distribution; `n` overrides the size.
fn held_out(ck: &Checkpoint, n: Option<usize>) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut spec = dataset_spec(ck)?.clone();
    match (&mut spec, n) {
        (DatasetSpec::Csv { .. }, _) => {
            return Err(EbmError::Config(
                "held-out draws need a generated dataset; pass a test file".into(),
            ))
        }
        (
            DatasetSpec::Mixture { n: size, .. }
            | DatasetSpec::Clusters { n: size, .. }
            | DatasetSpec::Ring { n: size, .. },
            Some(n),
        ) => *size = n,
        _ => {}
    }
    let d = spec.generate(&mut stream(ck.manifest.seed, streams::HELDOUT))?;
    Ok((d.x, d.labels))
}

fn csv_or<F>(file: Option<&Path>, fallback: F) -> Result<(Tensor, Option<Vec<usize>>)>
where
    F: FnOnce() -> Result<(Tensor, Option<Vec<usize>>)>,
{
    match file {
        Some(f) => read_csv(f),
        None => fallback(),
    }
}

/// Labels for a conditional model: the override, else the file's.
fn pick_labels(
    model: &Model,
    label: Option<usize>,
    rows: usize,
    file: Option<Vec<usize>>,
) -> Option<Vec<usize>> {
    if model.num_classes() == 0 {
        return None;
    }
    label.map(|l| vec![l; rows]).or(file)
}

fn eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = &ck.model;
    let mut rng = stream(seed, streams::EVAL);
    match a.metric {
        Metric::LogzBracket => {
            let cfg: AisConfig = match &a.ais_config {
                Some(p) => load_toml(p)?,
                None => AisConfig::default(),
            };
            let start = match &ck.buffer {
                Some(b) if b.len() >= cfg.chains => {
                    let (all, _) = b.snapshot();
                    all.select_rows(&(all.rows() - cfg.chains..all.rows()).collect::<Vec<_>>())
                }
                _ => Tensor::uniform(&[cfg.chains, model.dim()], 0.0, 1.0, &mut rng),
            };
            let b = log_z_bracket(model, a.label, &cfg, &start, a.z, &mut rng)?;
            let truth = if model.dim() <= 2 {
                let bounds = vec![(0.0, 1.0); model.dim()];
                log_partition_quadrature(model, a.label, &bounds, a.quadrature_res)?.to_string()
            } else {
                String::new()
            };
            write_report(
                &a.out,
                "ais,ais_se,raise,raise_se,lower,upper,quadrature",
                &[format!(
                    "{},{},{},{},{},{},{truth}",
                    b.ais.log_z, b.ais.std_err, b.raise.log_z, b.raise.std_err, b.lower, b.upper
                )],
            )
        }
        Metric::OodAuroc => {
            let ood_file = a
                .ood_file
                .as_deref()
                .ok_or_else(|| EbmError::Config("ood-auroc needs --ood-file".into()))?;
            let (xi, li) = csv_or(a.in_file.as_deref(), || held_out(&ck, Some(a.n)))?;
            let (xo, lo) = read_csv(ood_file)?;
            let score = |x: &Tensor, l: Option<Vec<usize>>| -> Result<Vec<f64>> {
                let l = pick_labels(model, a.label, x.rows(), l);
                Ok(model
                    .energy(x, l.as_deref())?
                    .into_iter()
                    .map(|e| -e)
                    .collect())
            };
            let v = auroc(&score(&xi, li)?, &score(&xo, lo)?)?;
            write_report(
                &a.out,
                "auroc,n_in,n_out",
                &[format!("{v},{},{}", xi.rows(), xo.rows())],
            )
        }
        Metric::KsOverfit => {
            let (xt, lt) = training_data(&ck)?;
            let (xh, lh) = csv_or(a.test_file.as_deref(), || held_out(&ck, None))?;
            let et = model.energy(&xt, pick_labels(model, a.label, xt.rows(), lt).as_deref())?;
            let eh = model.energy(&xh, pick_labels(model, a.label, xh.rows(), lh).as_deref())?;
            let ks = ks_statistic(&et, &eh)?;
            write_report(
                &a.out,
                "ks,n_train,n_test",
                &[format!("{ks},{},{}", xt.rows(), xh.rows())],
            )
        }
        Metric::ModeCoverage => {
            let centers = dataset_spec(&ck)?
                .centers()
                .ok_or_else(|| {
                    EbmError::Config("mode-coverage needs a mixture or cluster dataset".into())
                })?
                .to_vec();
            let x = match (&a.samples, &ck.buffer) {
                (Some(p), _) => read_csv(p)?.0,
                (None, Some(b)) if !b.is_empty() => {
                    let (all, _) = b.snapshot();
                    let from = all.rows().saturating_sub(a.n);
                    all.select_rows(&(from..all.rows()).collect::<Vec<_>>())
                }
                _ => {
                    return Err(EbmError::Config(
                        "no --samples and the checkpoint has no buffer".into(),
                    ))
                }
            };
            let cov = mode_coverage(&x, &centers, a.radius)?;
            let mut rows: Vec<String> = cov
                .fractions
                .iter()
                .enumerate()
                .map(|(k, f)| format!("{k},{f}"))
                .collect();
            rows.push(format!("unassigned,{}", cov.unassigned));
            write_report(&a.out, "mode,fraction", &rows)
        }
        Metric::FrechetRollout => {
            let DatasetSpec::Pendulum(pcfg) = dataset_spec(&ck)? else {
                return Err(EbmError::Config(
                    "frechet-rollout needs a pendulum checkpoint".into(),
                ));
            };
            if a.horizon >= pcfg.length {
                return Err(EbmError::Config(format!(
                    "horizon {} needs trajectories longer than {}",
                    a.horizon, pcfg.length
                )));
            }
            let data = datagen::trajectory_sim(pcfg, &mut stream(ck.manifest.seed, streams::DATA))?;
            let starts = data.test_paths.len() * a.rollouts_per_start;
            let idx: Vec<usize> = (0..starts).map(|i| i / a.rollouts_per_start).collect();
            let mut s = states_at(&data.test_paths, 0)?.select_rows(&idx);
            let cfg = train_langevin(&ck);
            let mut rng = stream(seed, streams::SAMPLE);
            let mut rows = vec![];
            for t in 1..=a.horizon {
                s = sample_next(model, &s, &cfg, &mut rng)?;
                let f = frechet_gaussian(&s, &states_at(&data.test_paths, t)?)?;
                rows.push(format!("{t},{f}"));
            }
            write_report(&a.out, "step,frechet", &rows)
        }
    }
}

/// Optional `seed` and `[continual]` section.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ContinualFile {
    seed: u64,
    continual: ContinualConfig,
}

fn continual(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let file: ContinualFile = match config {
        Some(p) => load_toml(p)?,
        None => ContinualFile::default(),
    };
    let rows = continual_learning(&file.continual, seed.unwrap_or(file.seed))?;
    let rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.task,
                r.classes.0,
                r.classes.1,
                r.ebm_all,
                r.baseline_all,
                r.ebm_seen,
                r.baseline_seen
            )
        })
        .collect();
    write_report(
        out,
        "task,class_a,class_b,ebm_all,baseline_all,ebm_seen,baseline_seen",
        &rows,
    )
}

#[allow(clippy::too_many_arguments)]
fn attack(
    ck: &Checkpoint,
    eps: &[f64],
    norm: Norm,
    refine: Option<&RefineConfig>,
    test_file: Option<&Path>,
    n: usize,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let (x, y) = csv_or(test_file, || held_out(ck, Some(n)))?;
    let y = y.ok_or_else(|| EbmError::Label("attack needs labelled test points".into()))?;
    let rows = attack_sweep(
        &ck.model,
        &x,
        &y,
        eps,
        norm,
        refine,
        &mut stream(seed, streams::EVAL),
    )?;
    let rows: Vec<String> = rows
        .iter()
        .map(|r| {
            let refined = r.refined.map(|v| v.to_string()).unwrap_or_default();
            format!("{},{},{},{refined}", r.eps, r.clean, r.attacked)
        })
        .collect();
    write_report(out, "eps,clean,attacked,refined", &rows)
}
