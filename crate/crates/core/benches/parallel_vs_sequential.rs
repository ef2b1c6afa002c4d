use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mcqtok::data::{gen_vectors, MixtureSpec};
use mcqtok::eval::compare_quantizers;
use mcqtok::par::Execution;
use mcqtok::quantize::{fit_kmeans_with, fit_quantizer, KMeansConfig, QuantizerSpec, Scheme};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn quantize_batch(c: &mut Criterion) {
    let train = gen_vectors(0, 8000, 64, MixtureSpec::Isotropic);
    let tokens = gen_vectors(1, 4096, 64, MixtureSpec::Isotropic);
    let mut group = c.benchmark_group("encode_batch");
    for spec in [
        QuantizerSpec::new(Scheme::Mcq, 8, 256),
        QuantizerSpec::new(Scheme::Rq, 8, 256),
    ] {
        let cfg = KMeansConfig {
            max_iters: 5,
            ..KMeansConfig::new(spec.k, 0)
        };
        let q = fit_quantizer(Execution::default(), &train.data, 64, &spec, &cfg).unwrap();
        for (mode, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(spec.label(), mode), &exec, |b, &exec| {
                b.iter(|| q.encode_batch(exec, black_box(&tokens.data)).unwrap())
            });
        }
    }
    group.finish();
}

fn kmeans(c: &mut Criterion) {
    let data = gen_vectors(
        2,
        20_000,
        16,
        MixtureSpec::Mixture {
            components: 32,
            spread: 3.0,
        },
    );
    let cfg = KMeansConfig {
        max_iters: 10,
        tol: 0.0,
        ..KMeansConfig::new(128, 0)
    };
    let mut group = c.benchmark_group("kmeans_20k_x16_k128");
    group.sample_size(10);
    for (mode, exec) in MODES {
        group.bench_function(mode, |b| {
            b.iter(|| fit_kmeans_with(exec, black_box(&data.data), 16, &cfg).unwrap())
        });
    }
    group.finish();
}

fn compare(c: &mut Criterion) {
    let train = gen_vectors(3, 6000, 32, MixtureSpec::Isotropic);
    let test = gen_vectors(4, 1000, 32, MixtureSpec::Isotropic);
    let specs: Vec<QuantizerSpec> = ["mcq:4x64", "rq:4x64"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let mut group = c.benchmark_group("compare_2x2");
    group.sample_size(10);
    for (mode, exec) in MODES {
        group.bench_function(mode, |b| {
            b.iter(|| compare_quantizers(exec, black_box(&train), &test, &specs, &[0, 1]).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, quantize_batch, kmeans, compare);
criterion_main!(benches);
