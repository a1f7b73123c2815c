//! Parallel vs sequential execution of the hot pipelines. The sequential
//! measurements run the same code inside a single-thread pool (or directly
//! in a build without the `parallel` feature).

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use causim::extract::{extract_causal_model, verify_theorem1};
use causim::fixtures::{self, RandomProtocolParams};
use causim::par::run_sequential;
use causim::protocol::{validate_protocol, SettingVector};
use causim::tensor::haar_unitary;

fn bench_switch_verify(c: &mut Criterion) {
    let spec = fixtures::switch_protocol();
    let mut group = c.benchmark_group("switch_theorem_check");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(verify_theorem1(&spec).unwrap().max_deviation))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            run_sequential(|| black_box(verify_theorem1(&spec).unwrap().max_deviation))
        })
    });
    group.finish();
}

fn bench_random_validation(c: &mut Criterion) {
    let params = RandomProtocolParams { n_parties: 3, system_dim: 3, t_steps: 5 };
    let spec = fixtures::random_protocol(&params, 7).unwrap();
    let mut group = c.benchmark_group("random_spec_validation");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(validate_protocol(&spec).unwrap().max_leak))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| run_sequential(|| black_box(validate_protocol(&spec).unwrap().max_leak)))
    });
    group.finish();
}

fn bench_extraction(c: &mut Criterion) {
    let spec = fixtures::switch_protocol();
    let x = SettingVector::new(&spec, vec![0, 1, 1]).unwrap();
    c.bench_function("switch_model_extraction", |b| {
        b.iter(|| black_box(extract_causal_model(&spec, &x).unwrap().nodes().len()))
    });
}

fn bench_haar_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("haar_batch_256");
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let qs = causim::par::map_indexed(256, |s| haar_unitary(8, s as u64));
            black_box(qs.len())
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            run_sequential(|| {
                let qs = causim::par::map_indexed(256, |s| haar_unitary(8, s as u64));
                black_box(qs.len())
            })
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_switch_verify,
    bench_random_validation,
    bench_extraction,
    bench_haar_batch
);
criterion_main!(benches);
