use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rhsim_bench::{corpus, double_sided};
use rhsim_core::cache::{CacheConfig, CacheState};
use rhsim_core::dram::{Dram, DramConfig, FaultMap};
use rhsim_core::runner::{
    parse_config, replicate_table1, replicate_table2, run_batch, run_config, run_expressive_config,
    EXPRESSIVE_FIXTURE,
};

fn dram(c: &mut Criterion) {
    c.bench_function("dram/double_sided_10k", |b| b.iter(|| double_sided(black_box(10_000))));
}

fn cache(c: &mut Criterion) {
    c.bench_function("cache/strided_4k", |b| {
        b.iter(|| {
            let mut d = Dram::new(DramConfig::default(), FaultMap::empty(), 0).unwrap();
            let mut cache = CacheState::new(CacheConfig::default(), 1 << 16).unwrap();
            for (t, i) in (0..4096u64).enumerate() {
                cache.access(black_box(i * 64 % (1 << 16)), t as u64, &mut d).unwrap();
            }
        })
    });
}

fn scenarios(c: &mut Criterion) {
    let configs = corpus();
    let drammer = configs.iter().find(|c| c.name == "drammer").unwrap().clone();
    c.bench_function("scenario/drammer", |b| b.iter(|| run_config(black_box(&drammer)).unwrap()));
    let expressive = parse_config(EXPRESSIVE_FIXTURE).unwrap();
    c.bench_function("scenario/expressive", |b| b.iter(|| run_expressive_config(black_box(&expressive)).unwrap()));
}

fn tables(c: &mut Criterion) {
    let mut g = c.benchmark_group("tables");
    g.sample_size(10);
    g.bench_function("table1", |b| b.iter(|| replicate_table1().unwrap()));
    g.bench_function("table2", |b| b.iter(|| replicate_table2().unwrap()));
    g.finish();
}

fn batch(c: &mut Criterion) {
    let configs = corpus();
    let mut g = c.benchmark_group("batch");
    g.sample_size(10);
    for threads in [1, 4] {
        g.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &n| {
            b.iter(|| run_batch(black_box(&configs), n))
        });
    }
    g.finish();
}

criterion_group!(benches, dram, cache, scenarios, tables, batch);
criterion_main!(benches);
