//! Compares the rayon fan-out against the always-available sequential path
//! on the two data-parallel inner loops that dominate runtime: reverse
//! sampling trajectories and per-sample gradient batches.
//!
//! Run with `cargo bench -p pairdiff`. Both paths produce identical results
//! (ordered collection); only the scheduling differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pairdiff::dataset::build_triples;
use pairdiff::denoiser::{ConvDenoiser, GaussianOracle};
use pairdiff::field::Field;
use pairdiff::paired::{forward_noise_pair, sample_branch, SamplePair};
use pairdiff::parallel::{par_map_indexed, seq_map_indexed};
use pairdiff::phantom::{LesionSpec, PhantomSpec, Range};
use pairdiff::rng::Stream;
use pairdiff::schedule::NoiseSchedule;

fn bench_sampling(c: &mut Criterion) {
    let schedule = NoiseSchedule::linear(1024, 1e-4, 0.02).unwrap();
    let timeline = schedule.subsample(32).unwrap();
    let oracle = GaussianOracle::new(Field::constant(16, 16, 0.2), 0.25);
    let cond = Field::zeros(16, 16);
    let trajectories = 64usize;
    let job = |i: usize| {
        let mut rng = Stream::new(42).substream(i as u64);
        sample_branch(&oracle, &cond, &timeline, 16, 16, &mut rng).mean()
    };

    let mut group = c.benchmark_group("oracle_trajectories");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("parallel", trajectories), |b| {
        b.iter(|| par_map_indexed(trajectories, job))
    });
    group.bench_function(BenchmarkId::new("sequential", trajectories), |b| {
        b.iter(|| seq_map_indexed(trajectories, job))
    });
    group.finish();
}

fn bench_batch_gradients(c: &mut Criterion) {
    let pspec = PhantomSpec {
        size: 32,
        outer_a: Range::new(0.30, 0.34),
        outer_b: Range::new(0.32, 0.36),
        ..PhantomSpec::default()
    };
    let triples = build_triples(&pspec, &LesionSpec::default(), 8, &Stream::new(5)).unwrap();
    let schedule = NoiseSchedule::linear(256, 1e-4, 0.02).unwrap();
    let mut rng = Stream::new(9);
    let model = ConvDenoiser::init(&mut rng);
    let batch = 8usize;
    let job = |i: usize| {
        let triple = &triples[i % triples.len()];
        let mut rng = Stream::new(77).substream(i as u64);
        let t = 1 + rng.next_below(256) as usize;
        let pair = SamplePair {
            mask: triple.mask.to_diffusion_field(),
            image: triple.pathological.clone(),
        };
        let noised = forward_noise_pair(&pair, &schedule, t, &mut rng).unwrap();
        let (pred, cache) = model.forward_cached(&noised.y_t, &noised.x_t, t, 256);
        let gout = pred.sub(&noised.eps_y).unwrap().scale(2.0 / 1024.0);
        let grads = model.backward_params(&cache, &gout);
        grads.get_param(0)
    };

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", batch), |b| {
        b.iter(|| par_map_indexed(batch, job))
    });
    group.bench_function(BenchmarkId::new("sequential", batch), |b| {
        b.iter(|| seq_map_indexed(batch, job))
    });
    group.finish();
}

criterion_group!(benches, bench_sampling, bench_batch_gradients);
criterion_main!(benches);
