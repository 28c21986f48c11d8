// temporary perf probe: real train-step wall time at the acceptance shape
use pairdiff::dataset::build_triples;
use pairdiff::phantom::{LesionSpec, PhantomSpec};
use pairdiff::rng::Stream;
use pairdiff::trainer::{train_step, TrainConfig, TrainerState};

fn main() {
    let pspec = PhantomSpec::default();
    let lspec = LesionSpec::default();
    let triples = build_triples(&pspec, &lspec, 64, &Stream::new(5)).unwrap();
    let cfg = TrainConfig {
        steps: 40,
        batch_size: 16,
        seed: 11,
        ..TrainConfig::default()
    };
    let mut state = TrainerState::new(&cfg).unwrap();
    // warmup
    for _ in 0..3 { train_step(&mut state, &triples, &cfg); }
    let n = 20;
    let t0 = std::time::Instant::now();
    let mut last = (0.0, 0.0);
    for _ in 0..n { last = train_step(&mut state, &triples, &cfg); }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("train step: {:.1} ms wall; 3000 steps = {:.1} min (losses {:.3} {:.3})",
             dt * 1e3, dt * 3000.0 / 60.0, last.0, last.1);
}
