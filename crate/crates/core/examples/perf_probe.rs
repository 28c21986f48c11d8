// temporary perf probe
use pairdiff::denoiser::ConvDenoiser;
use pairdiff::field::Field;
use pairdiff::rng::Stream;

fn main() {
    let mut rng = Stream::new(1);
    let mut model = ConvDenoiser::init(&mut rng);
    for block in model.blocks_mut() {
        for v in block.iter_mut() { *v = 0.01; }
    }
    let noisy = Field::gaussian(48, 48, &mut rng);
    let cond = Field::gaussian(48, 48, &mut rng);
    let target = Field::gaussian(48, 48, &mut rng);

    // forward only
    let t0 = std::time::Instant::now();
    let n_fwd = 200;
    let mut sink = 0.0;
    for i in 0..n_fwd {
        let out = model.forward(&noisy, &cond, 1 + i % 1024, 1024);
        sink += out.get(0, 0);
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs_fwd = 43.5e6;
    println!("forward: {:.2} ms each, {:.2} GMAC/s (sink {sink})", dt / n_fwd as f64 * 1e3, macs_fwd * n_fwd as f64 / dt / 1e9);

    // forward + backward
    let t0 = std::time::Instant::now();
    let n_fb = 100;
    let mut sink2 = 0.0;
    for i in 0..n_fb {
        let (out, cache) = model.forward_cached(&noisy, &cond, 1 + i % 1024, 1024);
        let gout = out.sub(&target).unwrap().scale(2.0 / 2304.0);
        let (grads, _, _) = model.backward(&cache, &gout);
        sink2 += grads.get_param(0);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("fwd+bwd: {:.2} ms each, {:.2} GMAC/s (sink {sink2})", dt / n_fb as f64 * 1e3, 3.0 * macs_fwd * n_fb as f64 / dt / 1e9);
    // projected train step: 16 samples x (2 fwd + 2 fwd_bwd)
    let per_step = 16.0 * (2.0 * (dt / n_fb as f64 / 3.0) + 2.0 * (dt / n_fb as f64));
    println!("projected single-core train step: {:.1} ms; 3000 steps: {:.1} min", per_step * 1e3, per_step * 3000.0 / 60.0);
}
