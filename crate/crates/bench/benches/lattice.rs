use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use segrnn_bench::{compact_config, frames, labels, lattice};
use segrnn_core::decoder::{decode_joint, decode_marginal_hybrid};
use segrnn_core::{log_clamped, log_partition, Model, Vocabulary};

fn recursions(c: &mut Criterion) {
    let mut group = c.benchmark_group("recursions");
    for t in [64, 256] {
        let lat = lattice(t, 30, 5, 1);
        let y = labels(t, 30, 5, 2);
        group.bench_with_input(BenchmarkId::new("log_partition", t), &lat, |b, lat| b.iter(|| log_partition(lat)));
        group.bench_with_input(BenchmarkId::new("log_clamped", t), &lat, |b, lat| {
            b.iter(|| log_clamped(lat, &y).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("decode_joint", t), &lat, |b, lat| b.iter(|| decode_joint(lat)));
        group.bench_with_input(BenchmarkId::new("decode_marginal_hybrid", t), &lat, |b, lat| {
            b.iter(|| decode_marginal_hybrid(lat))
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let vocab = Vocabulary::new(["a", "b", "c", "d", "e"]).unwrap();
    let model = Model::new(compact_config(), 8, vocab, 0.3, 3).unwrap();
    let x = frames(60, 8, 4);
    let y = labels(30, model.clamp_len(), 5, 5);
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("lattice", |b| b.iter(|| model.lattice(&x).unwrap()));
    group.bench_function("loss_and_gradients", |b| b.iter(|| model.loss_and_gradients(&x, &y, Some(7)).unwrap()));
    group.finish();
}

criterion_group!(benches, recursions, model);
criterion_main!(benches);
