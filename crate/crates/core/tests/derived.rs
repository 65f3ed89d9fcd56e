//! Measured behaviour with closed-form or statistical oracles, on energies
//! cheap enough to run without training.

use ebm_core::datagen::{gaussian_mixture, square_corners};
use ebm_core::metrics::{ais_log_z, ks_statistic, log_z_bracket, mode_coverage, AisConfig};
use ebm_core::sampler::run_chain;
use ebm_core::{
    seeded, stream, EnergyFn, EnergyNet, LangevinConfig, ModelConfig, Quadratic, ReplayBuffer,
    Tape, Tensor, Var,
};
use rand::Rng;

const PREC: f64 = 100.0;

/// `½·100·(x − 0.5)²` on [0, 1]. The cube cuts at 5σ, so the Gaussian
/// normalizer is exact to well below the tolerances here.
fn narrow_quadratic() -> (Quadratic, f64) {
    (
        Quadratic::new(vec![0.5], PREC),
        0.5 * (std::f64::consts::TAU / PREC).ln(),
    )
}

fn exact_samples(n: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(&[n, 1], rng).map(|z| 0.5 + z / PREC.sqrt())
}

#[test]
fn ais_recovers_a_gaussian_normalizer() {
    let (q, truth) = narrow_quadratic();
    let est = ais_log_z(&q, None, &AisConfig::default(), &mut seeded(1)).unwrap();
    assert!((est.log_z - truth).abs() < 0.1, "{} vs {truth}", est.log_z);
}

#[test]
fn doubling_chains_shrinks_the_standard_error() {
    let (q, _) = narrow_quadratic();
    let se = |chains: usize| -> f64 {
        let cfg = AisConfig {
            chains,
            temperatures: 30,
            ..AisConfig::default()
        };
        (0..8)
            .map(|s| ais_log_z(&q, None, &cfg, &mut seeded(s)).unwrap().std_err)
            .sum::<f64>()
            / 8.0
    };
    let ratio = se(128) / se(256);
    assert!(
        (1.2..1.7).contains(&ratio),
        "ratio {ratio}, expected about √2"
    );
}

#[test]
fn bracket_contains_the_truth() {
    let (q, truth) = narrow_quadratic();
    let cfg = AisConfig {
        chains: 64,
        temperatures: 30,
        burn_in: 50,
        ..AisConfig::default()
    };
    let mut hits = 0;
    for s in 0..50 {
        let mut rng = seeded(s);
        let init = exact_samples(cfg.chains, &mut rng);
        hits += usize::from(
            log_z_bracket(&q, None, &cfg, &init, 2.0, &mut rng)
                .unwrap()
                .contains(truth),
        );
    }
    assert!(hits >= 45, "{hits}/50");
}

#[test]
fn bracket_narrows_with_more_temperatures() {
    let (q, _) = narrow_quadratic();
    let width = |temperatures: usize| -> f64 {
        let cfg = AisConfig {
            chains: 64,
            temperatures,
            burn_in: 50,
            ..AisConfig::default()
        };
        (0..5)
            .map(|s| {
                let mut rng = seeded(100 + s);
                let init = exact_samples(cfg.chains, &mut rng);
                log_z_bracket(&q, None, &cfg, &init, 0.0, &mut rng)
                    .unwrap()
                    .width()
            })
            .sum::<f64>()
            / 5.0
    };
    let w: Vec<f64> = [10, 100, 1000].iter().map(|&t| width(t)).collect();
    assert!(w[0] > w[1] && w[1] > w[2], "{w:?}");
}

#[test]
fn ks_between_draws_of_one_distribution_is_small() {
    let mut rng = seeded(3);
    let a: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
    let ks = ks_statistic(&a, &b).unwrap();
    assert!(ks < 0.03, "{ks}");
}

#[test]
fn uniform_restarts_happen_at_the_configured_rate() {
    let mut buf = ReplayBuffer::new(1000, 2, 0.05).unwrap();
    buf.insert(&Tensor::zeros(&[1000, 2]), None).unwrap();
    let mut rng = seeded(4);
    let (mut fresh, mut total) = (0, 0);
    for _ in 0..100 {
        let b = buf.init_batch(1000, &mut rng);
        fresh += b.from_buffer.iter().filter(|f| !**f).count();
        total += b.from_buffer.len();
    }
    let rate = fresh as f64 / total as f64;
    assert!((rate - 0.05).abs() < 0.005, "{rate}");
}

#[test]
fn random_networks_give_finite_energies() {
    let mut rng = stream(9, 0);
    let net = EnergyNet::new(ModelConfig::mlp(&[2, 64, 64, 1]), &mut rng).unwrap();
    let x = Tensor::uniform(&[10_000, 2], 0.0, 1.0, &mut rng);
    assert!(net.energy(&x, None).unwrap().iter().all(|e| e.is_finite()));
}

#[test]
fn exact_mixture_samples_cover_every_mode() {
    let centers = square_corners(0.2, 0.8);
    let (x, _) = gaussian_mixture(&centers, 0.02, 4000, &mut seeded(5)).unwrap();
    let cov = mode_coverage(&x, &centers, 0.1).unwrap();
    assert!(
        cov.fractions.iter().all(|f| (f - 0.25).abs() < 0.03),
        "{cov:?}"
    );
    assert_eq!(cov.unassigned, 0.0);
}

/// `−ln(exp(−(x−0.3)²/2s²) + exp(−(x−0.7)²/2s²))` in one dimension.
struct TwoModes {
    s: f64,
}

impl EnergyFn for TwoModes {
    fn dim(&self) -> usize {
        1
    }

    fn energy_on<'t>(
        &self,
        _tape: &'t Tape,
        x: Var<'t>,
        _labels: Option<&[usize]>,
    ) -> ebm_core::Result<Var<'t>> {
        let k = -0.5 / (self.s * self.s);
        let bump = |c: f64| x.offset(-c).square().scale(k).exp();
        Ok(bump(0.3).add(bump(0.7))?.ln().neg())
    }
}

#[test]
fn short_chains_from_uniform_reach_both_modes() {
    let e = TwoModes { s: 0.05 };
    let mut rng = seeded(6);
    let init = Tensor::uniform(&[64, 1], 0.0, 1.0, &mut rng);
    let out = run_chain(
        &e,
        &init,
        None,
        &LangevinConfig::unit_temperature(200, 1e-4),
        &mut rng,
    )
    .unwrap()
    .samples;
    let left = out
        .data()
        .iter()
        .filter(|v| (*v - 0.3).abs() < 0.15)
        .count() as f64
        / 64.0;
    let right = out
        .data()
        .iter()
        .filter(|v| (*v - 0.7).abs() < 0.15)
        .count() as f64
        / 64.0;
    assert!(left >= 0.2 && right >= 0.2, "{left} {right}");
}
