//! Energy-based models trained by implicit generation.
//!
//! An energy network `E(x)` defines the density `p(x) ∝ exp(−E(x))`. Samples
//! are drawn with Langevin dynamics seeded from a replay buffer of earlier
//! samples, and the network is fitted with the contrastive maximum-likelihood
//! gradient. Around that core live the evaluation tools: partition-function
//! brackets, OOD scoring, composition by summing energies, energy-based
//! classification with adversarial attack and refinement, and trajectory
//! rollouts.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod compose;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Activation, Tape, Var};
pub use error::{EbmError, Result};
pub use model::{EnergyFn, EnergyNet, ModelConfig, ParamEnergy, Quadratic};
pub use sampler::{LangevinConfig, ReplayBuffer};
pub use tensor::Tensor;
pub use trainer::{AdamState, TrainConfig};

/// Deterministic RNG used throughout; identical on every platform.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Independent stream `id` of the generator seeded with `seed`.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = seeded(seed);
    rng.set_stream(id);
    rng
}
