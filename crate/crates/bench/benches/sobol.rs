use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use latent_audit::decompose::truncated_svd;
use latent_audit::sobol::{jansen, total_sobol, ConceptSpace, MaskBatch, ScoreFunction, SobolConfig};
use latent_audit::MlpHead;
use latent_audit_bench::family;

fn bench_masks(c: &mut Criterion) {
    let mut group = c.benchmark_group("masks");
    for rank in [5, 20] {
        group.bench_with_input(BenchmarkId::new("qmc_8192", rank), &rank, |b, &r| b.iter(|| MaskBatch::qmc(1 << 13, r, 0).unwrap()));
    }
    let masks = MaskBatch::qmc(1 << 13, 2, 0).unwrap();
    group.bench_function("jansen_linear_8192", |b| {
        b.iter(|| jansen(&masks, |m| m.column(0).iter().zip(m.column(1).iter()).map(|(a, b)| 3.0 * a + 4.0 * b).collect()).unwrap())
    });
    group.finish();
}

fn bench_total_sobol(c: &mut Criterion) {
    let mut group = c.benchmark_group("total_sobol");
    group.sample_size(10);
    let fam = family(400, 24);
    for rank in [5, 20] {
        let dec = truncated_svd(&fam.activations, rank).unwrap();
        let head = MlpHead::init(24, 128, 2, 0);
        let cfg = SobolConfig { n_masks: 1024, max_instances: 64, ..SobolConfig::default() };
        let masks = cfg.masks(rank).unwrap();
        group.bench_with_input(BenchmarkId::new("1024_masks_64_rows", rank), &rank, |b, _| {
            b.iter(|| total_sobol(ConceptSpace::from_decomposition(&dec), &head, &ScoreFunction::top2(), &masks, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_masks, bench_total_sobol);
criterion_main!(benches);
