use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mtan::model::reference_times;
use mtan_bench::{interpolation_model, synthetic_series};

fn mtand(c: &mut Criterion) {
    let model = interpolation_model();
    let mtan = model.encoder_mtan().unwrap().expect("learned kernel");
    let refs = reference_times(model.config.ref_points);
    let mut group = c.benchmark_group("mtand");
    for n in [1, 10, 50] {
        let series = synthetic_series(n);
        let batch: Vec<_> = series.iter().collect();
        group.bench_with_input(BenchmarkId::new("batched", n), &batch, |b, batch| {
            b.iter(|| mtan.mtand_batch(&refs, batch).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("per_query", n), &series, |b, series| {
            b.iter(|| {
                for s in series {
                    for &t in &refs {
                        mtan.mtan_embed(t, s).unwrap();
                    }
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, mtand);
criterion_main!(benches);
