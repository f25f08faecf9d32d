use criterion::{criterion_group, criterion_main, Criterion};
use mtan::objectives::{loss_and_gradients, Objective};
use mtan::{adam_step, AdamConfig, AdamState};
use mtan_bench::{interpolation_model, synthetic_series};

fn train_step(c: &mut Criterion) {
    let series = synthetic_series(50);
    let batch: Vec<_> = series.iter().collect();
    let objective = Objective::unsupervised(5, 0.5, 0);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("loss_and_gradients/50x5", |b| {
        let model = interpolation_model();
        b.iter(|| loss_and_gradients(&model, &batch, &batch, &objective).unwrap())
    });
    group.bench_function("with_adam/50x5", |b| {
        let mut model = interpolation_model();
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3));
        b.iter(|| {
            let (_, grads) = loss_and_gradients(&model, &batch, &batch, &objective).unwrap();
            adam_step(&mut model.params, &grads, &mut adam).unwrap();
        })
    });
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
