//! Parallel vs sequential throughput of the hot paths.
//!
//! `cargo bench -p continuum-core` measures the rayon build on the default pool
//! and on a one-thread pool; `cargo bench -p continuum-core --no-default-features`
//! measures the plain sequential loops under the `sequential` label.

use std::hint::black_box;
use std::time::Duration;

use continuum::reparam::{materialize_with_weights, LatentParams};
use continuum::{
    is_parallel, render, render_backward, sample_dictionary, CovarianceParams, GaussianField, GaussianKernel,
    GridSpec, ImageBuffer, PriorModel, RenderRequest,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(side: u32, kpp: u32) -> GaussianField {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = (side * side * kpp) as usize;
    let ks = (0..n)
        .map(|_| {
            let cov = loop {
                let c = CovarianceParams::new(
                    rng.random_range(0.05..2.4),
                    rng.random_range(0.05..2.2),
                    rng.random_range(-0.9..1.5),
                );
                if let Ok(c) = c {
                    break c;
                }
            };
            let pos = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
            GaussianKernel::new(pos.0, pos.1, cov, [rng.random(), rng.random(), rng.random()]).unwrap()
        })
        .collect();
    GaussianField::new(ks, side, side, kpp).unwrap()
}

/// Runs `f` once per execution mode available in this build.
fn for_each_mode(mut f: impl FnMut(&str, &dyn Fn(&mut (dyn FnMut() + Send)))) {
    if !is_parallel() {
        f("sequential", &|body| body());
        return;
    }
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    f("rayon", &|body| body());
    f("rayon-1thread", &|body| one.install(&mut *body));
}

fn bench_render(c: &mut Criterion) {
    let f = field(32, 4);
    let mut g = c.benchmark_group("render");
    for s in [4.0, 12.0] {
        let req = RenderRequest::scale(s);
        let px = (32.0 * s) as u64 * (32.0 * s) as u64;
        g.throughput(Throughput::Elements(px));
        for_each_mode(|label, run| {
            g.bench_with_input(BenchmarkId::new(label, s), &req, |b, req| {
                b.iter(|| run(&mut || drop(black_box(render(&f, req).unwrap()))))
            });
        });
    }
    g.finish();
}

fn bench_backward(c: &mut Criterion) {
    let f = field(24, 4);
    let req = RenderRequest::scale(1.0);
    let d = ImageBuffer::filled(24, 24, [0.01; 3]);
    let mut g = c.benchmark_group("render_backward");
    for_each_mode(|label, run| {
        g.bench_function(label, |b| {
            b.iter(|| run(&mut || drop(black_box(render_backward(&f, &req, &d).unwrap()))))
        });
    });
    g.finish();
}

fn bench_materialize(c: &mut Criterion) {
    let dict = sample_dictionary(&PriorModel::shipped_default(), 730, 0).unwrap();
    let grid = GridSpec::new(24, 24, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let values = (0..grid.kernel_count() * (dict.len() + 5))
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let latent = LatentParams::from_values(grid, dict.len(), 1.0, values).unwrap();
    let mut g = c.benchmark_group("materialize");
    for_each_mode(|label, run| {
        g.bench_function(label, |b| {
            b.iter(|| run(&mut || drop(black_box(materialize_with_weights(&latent, &dict).unwrap()))))
        });
    });
    g.finish();
}

fn config() -> Criterion {
    Criterion::default()
        .warm_up_time(Duration::from_secs(1))
        .measurement_time(Duration::from_secs(3))
        .sample_size(10)
}

criterion_group!(
    name = benches;
    config = config();
    targets = bench_render, bench_backward, bench_materialize
);
criterion_main!(benches);
