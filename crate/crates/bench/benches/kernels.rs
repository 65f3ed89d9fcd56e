use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ebm_core::experiments::toy_train_config;
use ebm_core::sampler::langevin_step;
use ebm_core::trainer::train_step;
use ebm_core::{seeded, AdamState, EnergyFn, EnergyNet, ModelConfig, ReplayBuffer, Tensor};

fn net() -> EnergyNet {
    EnergyNet::new(ModelConfig::mlp(&[2, 64, 64, 1]), &mut seeded(0)).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = seeded(1);
    let a = Tensor::uniform(&[128, 64], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[64, 64], -1.0, 1.0, &mut rng);
    c.bench_function("matmul 128x64x64", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn gradient(c: &mut Criterion) {
    let net = net();
    let x = Tensor::uniform(&[128, 2], 0.0, 1.0, &mut seeded(2));
    c.bench_function("energy and input gradient, batch 128", |bench| {
        bench.iter(|| net.energy_and_grad(black_box(&x), None).unwrap())
    });
}

fn langevin(c: &mut Criterion) {
    let net = net();
    let cfg = toy_train_config().langevin;
    let mut rng = seeded(3);
    let x = Tensor::uniform(&[128, 2], 0.0, 1.0, &mut rng);
    c.bench_function("langevin step, batch 128", |bench| {
        bench.iter(|| langevin_step(&net, black_box(&x), None, &cfg, None, 0, &mut rng).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let mut net = net();
    let cfg = toy_train_config();
    let mut adam = AdamState::for_model(&net);
    let mut buffer = ReplayBuffer::new(cfg.buffer_size, 2, cfg.uniform_prob).unwrap();
    let mut rng = seeded(4);
    let data = Tensor::uniform(&[cfg.batch_size, 2], 0.0, 1.0, &mut rng);
    c.bench_function("contrastive training step, K=40", |bench| {
        bench.iter(|| {
            train_step(
                &mut net,
                &mut adam,
                &data,
                None,
                &mut buffer,
                &cfg,
                &mut rng,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, matmul, gradient, langevin, training);
criterion_main!(benches);
