//! Benchmarks of the data-parallel kernels. Benchmark ids carry the active
//! execution mode, so running
//!
//! ```text
//! cargo bench -p scanmix-core
//! cargo bench -p scanmix-core --no-default-features
//! ```
//!
//! records `<kernel>/parallel/...` and `<kernel>/serial/...` entries that can
//! be compared directly.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use scanmix_core::datagen::generate_blobs;
use scanmix_core::divide::per_sample_losses;
use scanmix_core::losses::{
    estimate_q, loss_mle, loss_scan, warmup_loss, MixConfig, MixItem, MixedBatch,
};
use scanmix_core::net::{ModelParams, NetConfig};
use scanmix_core::noise::{inject, symmetric_matrix};
use scanmix_core::parallel;
use scanmix_core::pretrain::mine_knn;
use scanmix_core::rng::seed_stream;
use scanmix_core::trainer::predictions;

use rand::Rng;

fn bench_knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("mine_knn");
    for &n in &[500usize, 2000] {
        let mut rng = seed_stream(1, 0, n as u64);
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        group.bench_with_input(
            BenchmarkId::new(parallel::mode(), n),
            &features,
            |b, features| b.iter(|| mine_knn(features, 20).unwrap()),
        );
    }
    group.finish();
}

fn bench_per_sample_losses(c: &mut Criterion) {
    let ds = generate_blobs(4, 500, 2, 0.5, 1).unwrap();
    let m = symmetric_matrix(4, 0.5).unwrap();
    let noisy = inject(&ds, &m, 2).unwrap();
    let params = ModelParams::init(&NetConfig::new(2, 4), 3);
    let mut group = c.benchmark_group("per_sample_losses");
    group.bench_function(
        BenchmarkId::new(parallel::mode(), noisy.sample_count()),
        |b| b.iter(|| per_sample_losses(&params, &noisy)),
    );
    group.finish();
}

fn bench_warmup_gradients(c: &mut Criterion) {
    let ds = generate_blobs(4, 500, 2, 0.5, 1).unwrap();
    let params = ModelParams::init(&NetConfig::new(2, 4), 3);
    let mut group = c.benchmark_group("warmup_gradients");
    group.bench_function(
        BenchmarkId::new(parallel::mode(), ds.sample_count()),
        |b| b.iter(|| warmup_loss(&params, &ds).unwrap()),
    );
    group.finish();
}

fn bench_mixed_batch_gradients(c: &mut Criterion) {
    let params = ModelParams::init(&NetConfig::new(2, 4), 3);
    let mut rng = seed_stream(5, 0, 0);
    let item = |rng: &mut rand_chacha::ChaCha8Rng| {
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        MixItem {
            input: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            target: raw.into_iter().map(|v| v / s).collect(),
        }
    };
    let batch = MixedBatch {
        x_prime: (0..64).map(|_| item(&mut rng)).collect(),
        u_prime: (0..64).map(|_| item(&mut rng)).collect(),
        fallback_used: false,
    };
    let cfg = MixConfig::new(4);
    let mut group = c.benchmark_group("mixed_batch_gradients");
    group.bench_function(BenchmarkId::new(parallel::mode(), 128), |b| {
        b.iter(|| loss_mle(&params, &batch, &cfg).unwrap())
    });
    group.finish();
}

fn bench_clustering_loss(c: &mut Criterion) {
    let ds = generate_blobs(4, 500, 2, 0.5, 1).unwrap();
    let params = ModelParams::init(&NetConfig::new(2, 4), 3);
    let knn = mine_knn(&ds.features, 20).unwrap();
    let preds = predictions(&params, &ds).unwrap();
    let q = estimate_q(&preds, &knn);
    let cfg = scanmix_core::losses::ScanConfig::default();
    let mut group = c.benchmark_group("clustering_loss");
    group.bench_function(
        BenchmarkId::new(parallel::mode(), ds.sample_count()),
        |b| b.iter(|| loss_scan(&params, &ds, &knn, &q, &cfg).unwrap()),
    );
    group.finish();
}

criterion_group!(
    benches,
    bench_knn,
    bench_per_sample_losses,
    bench_warmup_gradients,
    bench_mixed_batch_gradients,
    bench_clustering_loss
);
criterion_main!(benches);
