use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pkpd_bench::{cohort, preset_model};
use pkpd_core::dataset::Batch;
use pkpd_core::diffcore::{Graph, Tensor};
use pkpd_core::eval::{forecast, is_nll, ForecastSpec};
use pkpd_core::inference::{elbo, Proposal};
use pkpd_core::models::ModelKind;
use pkpd_core::training::fit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul_backward");
    for n in [32usize, 128] {
        let a = Tensor::new(vec![100, n], (0..100 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.leaf(a.clone());
                let w = g.leaf(b.clone());
                let y = g.matmul(x, w).unwrap();
                let s = g.sum(y).unwrap();
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

const KINDS: [ModelKind; 6] = [
    ModelKind::SsmLinear,
    ModelKind::SsmNl,
    ModelKind::SsmPkpd,
    ModelKind::SsmAttnhist,
    ModelKind::FommPkpd,
    ModelKind::GruPkpd,
];

fn training_epoch(c: &mut Criterion) {
    let data = cohort(100);
    let mut group = c.benchmark_group("epoch_n100");
    group.sample_size(10);
    for kind in KINDS {
        let (cfg, model) = preset_model(kind, &data);
        group.bench_function(kind.tag(), |bench| {
            bench.iter_batched(|| model.clone(), |mut m| fit(&mut m, &cfg, &data).unwrap(), criterion::BatchSize::LargeInput)
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let data = cohort(200);
    let batch = Batch::from_cohort(&data);
    let (_, model) = preset_model(ModelKind::SsmPkpd, &data);
    let mut group = c.benchmark_group("evaluation_n200");
    group.sample_size(10);
    group.bench_function("elbo", |bench| bench.iter(|| elbo(&model, &batch, 1, 1).unwrap()));
    group.bench_function("is_nll_s16", |bench| bench.iter(|| is_nll(&model, &batch, 16, 1, Proposal::InferenceNet).unwrap()));
    group.bench_function("forecast_c3_f12", |bench| bench.iter(|| forecast(&model, &data, ForecastSpec::new(3, 12), 1).unwrap()));
    group.finish();
}

criterion_group!(benches, matmul, training_epoch, evaluation);
criterion_main!(benches);
