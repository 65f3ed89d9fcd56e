use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod io;

#[derive(Parser)]
#[command(
    name = "ebm",
    version,
    about = "Train, sample and evaluate energy-based models"
)]
struct Cli {
    /// Seed for every random stream of the command. `train` defaults to the
    /// config's seed, everything else to 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-step metrics CSV. Defaults to the checkpoint path with a
        /// `.csv` extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Draw samples with Langevin dynamics.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Chain length; defaults to the training chain length.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        label: Option<usize>,
        /// CSV of starting points. Otherwise chains start from the replay
        /// buffer, or from uniform noise when there is none.
        #[arg(long)]
        init_file: Option<PathBuf>,
        /// `.pgm` writes an image grid, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample the free coordinates of each input row.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// One 0/1 per coordinate, comma separated; 1 marks a coordinate to
        /// resample.
        #[arg(long)]
        mask: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample from the sum of several models' energies.
    Compose {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// One per checkpoint; `-` for an unconditional model.
        #[arg(long, num_args = 1..)]
        labels: Vec<String>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        /// Step through the models in turn instead of following the summed
        /// gradient.
        #[arg(long)]
        round_robin: bool,
        /// TOML fine-tuning recipe for the combination.
        #[arg(long, requires = "finetune_data")]
        finetune_config: Option<PathBuf>,
        /// CSV of examples of the combined concept.
        #[arg(long)]
        finetune_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a CSV report.
    Eval(EvalArgs),
    /// Sequential class-pair training of an EBM and an MLP baseline.
    Continual {
        /// TOML with optional `seed` and `[continual]`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Robust accuracy under PGD, with optional bounded refinement.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Attack radii, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        #[arg(long, value_enum, default_value_t = NormArg::Linf)]
        norm: NormArg,
        #[arg(long)]
        refine: bool,
        #[arg(long, default_value_t = 0.1)]
        refine_bound: f64,
        #[arg(long, default_value_t = 10)]
        refine_steps: usize,
        #[arg(long, default_value_t = 6e-4)]
        refine_step_size: f64,
        /// Labelled CSV; defaults to fresh held-out draws of the training set.
        #[arg(long)]
        test_file: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    label: Option<usize>,
    /// logz-bracket: standard errors added on each side.
    #[arg(long, default_value_t = 2.0)]
    z: f64,
    /// logz-bracket: TOML AIS settings.
    #[arg(long)]
    ais_config: Option<PathBuf>,
    /// logz-bracket: quadrature grid spacing (1 and 2 dimensions only).
    #[arg(long, default_value_t = 1e-3)]
    quadrature_res: f64,
    /// ood-auroc: in-distribution CSV; defaults to held-out draws.
    #[arg(long)]
    in_file: Option<PathBuf>,
    /// ood-auroc: out-of-distribution CSV.
    #[arg(long)]
    ood_file: Option<PathBuf>,
    /// ks-overfit: held-out CSV; defaults to fresh draws.
    #[arg(long)]
    test_file: Option<PathBuf>,
    /// mode-coverage: samples CSV; defaults to the newest buffer entries.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    radius: f64,
    /// Number of samples or held-out points drawn.
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// frechet-rollout: rollout length.
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    #[arg(long, default_value_t = 4)]
    rollouts_per_start: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    LogzBracket,
    OodAuroc,
    FrechetRollout,
    KsOverfit,
    ModeCoverage,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Linf,
    L2,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("EBM_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error[{}]: {}",
                e.category(),
                e.to_string().replace('\n', " ")
            );
            ExitCode::FAILURE
        }
    }
}
