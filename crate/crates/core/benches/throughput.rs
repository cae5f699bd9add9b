//! Throughput of the data-parallel kernels. With the default `parallel`
//! feature each kernel runs on a one-thread pool and on the full pool (`pool-N`);
//! `cargo bench --no-default-features` measures the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cpft::config::TrainConfig;
use cpft::conformal::split_cp;
use cpft::data::{generate_synthetic, Dataset, SynthSpec};
use cpft::eval::evaluate;
use cpft::model::{EncoderKind, ModelParams};
use cpft::training::{batch_gradient, fit_view, Weights};

fn fixture() -> (Dataset, ModelParams) {
    let ds = generate_synthetic(&SynthSpec {
        n_users: 1024,
        n_items: 500,
        ..SynthSpec::default()
    })
    .unwrap();
    let params = ModelParams::init(EncoderKind::Gru, ds.catalog_size(), 64, 0);
    (ds, params)
}

#[cfg(feature = "parallel")]
fn modes() -> Vec<(String, Option<rayon::ThreadPool>)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    let n = all.current_num_threads();
    vec![("single".into(), Some(one)), (format!("pool-{n}"), Some(all))]
}

#[cfg(not(feature = "parallel"))]
fn modes() -> Vec<(String, Option<()>)> {
    vec![("sequential".into(), None)]
}

#[cfg(feature = "parallel")]
fn within<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    pool.as_ref().unwrap().install(f)
}

#[cfg(not(feature = "parallel"))]
fn within<R>(_: &Option<()>, f: impl FnOnce() -> R) -> R {
    f()
}

fn kernels(c: &mut Criterion) {
    let (ds, params) = fixture();
    let cfg = TrainConfig::default();
    let weights = Weights::from_config(&cfg);
    let view = fit_view(&ds);
    let batch: Vec<_> = view.iter().take(cfg.batch_size).collect();
    let pairs = ds.test_pairs();
    let (calib, test) = pairs.split_at(pairs.len() / 2);

    let mut g = c.benchmark_group("kernels");
    g.sample_size(20);
    for (label, pool) in modes() {
        g.bench_with_input(BenchmarkId::new("batch_gradient", &label), &pool, |b, pool| {
            b.iter(|| within(pool, || batch_gradient(&params, &batch, &cfg, weights, None).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("evaluate", &label), &pool, |b, pool| {
            b.iter(|| within(pool, || evaluate(&params, &ds, cfg.alpha, &[10, 20], false).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("split_cp", &label), &pool, |b, pool| {
            b.iter(|| within(pool, || split_cp(&params, calib, test, cfg.alpha).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
