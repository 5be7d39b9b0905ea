use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unictr_bench::{batch, tiny_setup};
use unictr_core::autodiff::Tape;
use unictr_core::metrics::auc;
use unictr_core::model::MaskMode;
use unictr_core::optim::Optimizer;
use unictr_core::tensor::Tensor;
use unictr_core::trainer::{train_step, TrainConfig};

fn tape_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand_tensor = |r: usize, k: usize| {
        Tensor::new(vec![r, k], (0..r * k).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let (a, b) = (rand_tensor(256, 64), rand_tensor(64, 64));
    c.bench_function("matmul 256x64x64 forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(a.clone());
            let w = tape.leaf(b.clone(), true);
            let y = tape.matmul(x, w).unwrap();
            let s = tape.sum(y).unwrap();
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn model(c: &mut Criterion) {
    let (_, mut model, enc) = tiny_setup(400);
    let b = batch(&enc, 32);
    for mode in [MaskMode::Dispatch, MaskMode::Strict] {
        c.bench_function(&format!("predict batch 32 ({mode:?})"), |bench| {
            bench.iter(|| black_box(model.predict(&b, mode).unwrap()))
        });
    }
    let cfg = TrainConfig::default();
    let mut opt = Optimizer::new(cfg.optimizer_config());
    c.bench_function("train step batch 32", |bench| {
        bench.iter(|| black_box(train_step(&mut model, &b, &cfg, &mut opt, 1e-3, 1).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..100_000).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = (0..100_000).map(|_| rng.gen_range(0..2)).collect();
    c.bench_function("auc 100k", |bench| {
        bench.iter_batched(|| scores.clone(), |s| black_box(auc(&s, &labels).unwrap()), BatchSize::LargeInput)
    });
}

criterion_group!(benches, tape_matmul, model, metrics);
criterion_main!(benches);
