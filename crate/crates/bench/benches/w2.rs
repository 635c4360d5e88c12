use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use latent_audit::seed;
use latent_audit::w2reg::{w2_pseudo_gradient, w2_squared, DiscreteCdf, DEFAULT_GRID};
use rand::Rng;

fn scores(n: usize, shift: f64, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s);
    (0..n).map(|_| (rng.random::<f64>() + shift).clamp(0.0, 1.0)).collect()
}

fn bench_w2(c: &mut Criterion) {
    let mut group = c.benchmark_group("w2");
    for n in [100, 10_000] {
        let (a, b) = (scores(n, 0.0, 1), scores(n + n / 3, 0.1, 2));
        group.bench_with_input(BenchmarkId::new("w2_squared", n), &n, |bench, _| bench.iter(|| w2_squared(&a, &b).unwrap()));
        group.bench_with_input(BenchmarkId::new("cdf", n), &n, |bench, _| {
            bench.iter(|| DiscreteCdf::new(&a, &b, [a.len(), b.len()], DEFAULT_GRID).unwrap())
        });
    }
    let (a, b) = (scores(64, 0.0, 3), scores(64, 0.2, 4));
    let cdf = DiscreteCdf::new(&a, &b, [64, 64], DEFAULT_GRID).unwrap();
    group.bench_function("pseudo_gradient_batch64", |bench| {
        bench.iter(|| a.iter().map(|&v| w2_pseudo_gradient(v, 0, &cdf).unwrap()).sum::<f64>())
    });
    group.finish();
}

criterion_group!(benches, bench_w2);
criterion_main!(benches);
