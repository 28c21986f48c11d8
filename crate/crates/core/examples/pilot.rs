// temporary pilot: calibrate training + directional checks before freezing acceptance
use pairdiff::dataset::build_triples;
use pairdiff::denoiser::NoisePredictor;
use pairdiff::editing::GuidanceConfig;
use pairdiff::cli::{run_h2p_cases, run_p2h_cases};
use pairdiff::metrics::{self, Featurizer, Kernel};
use pairdiff::paired::{sample_unconditional_pair, PairModels, PairSamplerOptions};
use pairdiff::parallel::par_map_indexed;
use pairdiff::phantom::{LesionSpec, PhantomSpec};
use pairdiff::rng::Stream;
use pairdiff::trainer::{train_step, TrainConfig, TrainerState};
use pairdiff::Field;

fn main() {
    let steps: usize = std::env::var("PILOT_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(400);
    let lr: f64 = std::env::var("PILOT_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let k: usize = std::env::var("PILOT_K").ok().and_then(|v| v.parse().ok()).unwrap_or(60);
    let pspec = PhantomSpec::default();
    let lspec = LesionSpec::default();
    let train_triples = build_triples(&pspec, &lspec, 256, &Stream::new(5)).unwrap();
    let held = build_triples(&pspec, &lspec, 12, &Stream::new(999)).unwrap();
    let cfg = TrainConfig { steps, batch_size: 16, learning_rate: lr, seed: 11, ..TrainConfig::default() };
    let mut state = TrainerState::new(&cfg).unwrap();
    let t0 = std::time::Instant::now();
    let mut first = 0.0;
    let mut curve = Vec::new();
    for s in 0..steps {
        let (lx, ly) = train_step(&mut state, &train_triples, &cfg);
        if s == 0 { first = lx + ly; }
        curve.push(lx + ly);
        if s % 100 == 99 {
            let recent: f64 = curve[curve.len()-50..].iter().sum::<f64>() / 50.0;
            println!("step {:4}: recent mean loss {:.4} ({:.1}s)", s + 1, recent, t0.elapsed().as_secs_f64());
        }
    }
    let last50: f64 = curve[curve.len().saturating_sub(50)..].iter().sum::<f64>() / 50.0;
    println!("loss first {:.4} -> last50 {:.4} (drop {:.1}%)", first, last50, (1.0 - last50 / first) * 100.0);

    let timeline = state.schedule.subsample(k).unwrap();
    let brain = &state.brain;
    let lesion = &state.lesion;

    // ACG toggle on p2h
    for acg in [true, false] {
        let g = GuidanceConfig { acg_enabled: acg, ..GuidanceConfig::default() };
        let stats = run_p2h_cases(brain as &dyn NoisePredictor, &held, &g, &timeline, 42, 12).unwrap();
        let mut l1s: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let mut psnrs: Vec<f64> = stats.iter().map(|s| s.1).collect();
        l1s.sort_by(f64::total_cmp); psnrs.sort_by(f64::total_cmp);
        println!("p2h acg={acg}: median outside-L1 {:.4}, median PSNR {:.2}", l1s[6], psnrs[6]);
    }
    // LCG toggle on h2p
    let mut per = Vec::new();
    for lcg in [true, false] {
        let g = GuidanceConfig { lcg_enabled: lcg, ..GuidanceConfig::default() };
        let shifts = run_h2p_cases(brain as &dyn NoisePredictor, &held, &g, &timeline, 43, 12).unwrap();
        println!("h2p lcg={lcg}: shifts {:?}", shifts.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        per.push(shifts);
    }
    let wins = per[0].iter().zip(&per[1]).filter(|(w, wo)| w >= wo).count();
    println!("lcg wins: {wins}/12");
    // alpha0 sweep
    let mut seq = Vec::new();
    for a0 in [5.0, 10.0, 20.0, 30.0] {
        let g = GuidanceConfig { alpha0: a0, ..GuidanceConfig::default() };
        let stats = run_p2h_cases(brain as &dyn NoisePredictor, &held, &g, &timeline, 44, 12).unwrap();
        let mut whole: Vec<f64> = stats.iter().map(|s| s.2).collect();
        whole.sort_by(f64::total_cmp);
        seq.push(whole[6]);
    }
    println!("alpha0 sweep whole-L1 medians: {seq:?}");
    // onestep ablation MMD
    let reference: Vec<Field> = train_triples.iter().take(128).map(|t| t.pathological.clone()).collect();
    let re = metrics::embed_fields(&reference, Featurizer::DownsampleFlatten { grid: 8 }).unwrap();
    for (name, opts) in [("estimate", PairSamplerOptions::default()), ("noisy", PairSamplerOptions::noisy_conditioning())] {
        let models = PairModels { lesion, brain };
        let base = Stream::new(7);
        let images: Vec<Field> = par_map_indexed(32, |i| {
            let mut rng = base.substream(i as u64);
            sample_unconditional_pair(&models, &timeline, &opts, 48, 48, &mut rng).pair.image
        });
        let ge = metrics::embed_fields(&images, Featurizer::DownsampleFlatten { grid: 8 }).unwrap();
        let mmd = metrics::mmd2_unbiased(&ge, &re, Kernel::Rbf { bandwidth: None }).unwrap();
        println!("uncond {name}: mmd2 {mmd:.5}");
    }
    println!("pilot done in {:.1}s", t0.elapsed().as_secs_f64());
}
