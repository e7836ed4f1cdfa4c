//! Sequential vs rayon-parallel kernels. The sequential arm runs the same
//! code inside a one-thread pool; with `--no-default-features` only the
//! sequential arm exists.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use soul::experiment::{run, RunConfig};
use soul::linalg::{svd, Matrix};
use soul::memory::BufferMemory;
use soul::owl::{agreement_filter, Candidate, OwlConfig};
use soul::rng_from_seed;

fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = rng_from_seed(seed);
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn arms() -> Vec<(&'static str, rayon::ThreadPool)> {
    let mut out = vec![(
        "sequential",
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap(),
    )];
    if soul::par::is_parallel() {
        out.push(("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()));
    }
    out
}

fn bench_matmul(c: &mut Criterion) {
    let a = random_matrix(1, 512, 256);
    let b = random_matrix(2, 256, 256);
    let mut group = c.benchmark_group("matmul_512x256x256");
    for (name, pool) in arms() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn bench_svd(c: &mut Criterion) {
    let m = random_matrix(3, 100, 400);
    let mut group = c.benchmark_group("svd_100x400");
    group.sample_size(10);
    for (name, pool) in arms() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| svd(&m).unwrap()))
        });
    }
    group.finish();
}

fn bench_votes(c: &mut Criterion) {
    let dims = 16;
    let mut rng = rng_from_seed(4);
    let mut memory = BufferMemory::new(1500);
    let stored = random_matrix(5, 3000, dims);
    let labels: Vec<u8> = (0..3000).map(|_| rng.random_range(0..2u8)).collect();
    memory.reorganize(&stored, &labels, 1, &mut rng).unwrap();
    let pool_rows = random_matrix(6, 2000, dims);
    let cands: Vec<Candidate> = (0..2000)
        .map(|i| Candidate {
            index: i,
            label: (i % 2) as u8,
            confidence: 0.99,
        })
        .collect();
    let (top_a, top_b) = cands.split_at(1000);
    let cfg = OwlConfig::default();
    let mut group = c.benchmark_group("memory_votes_2000x1500");
    for (name, pool) in arms() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| {
                bench.iter(|| agreement_filter(top_a, top_b, &pool_rows, &memory, &cfg).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_seeds(c: &mut Criterion) {
    let mut cfg = RunConfig::preset("synthetic-small").unwrap();
    cfg.train.max_epochs = 3;
    let mut group = c.benchmark_group("synthetic_small_3_seeds");
    group.sample_size(10);
    for (name, pool) in arms() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| run(&cfg, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_svd, bench_votes, bench_seeds);
criterion_main!(benches);
