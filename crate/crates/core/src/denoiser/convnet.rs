//! Small convolutional noise predictor with hand-written backprop.
//!
//! Fixed architecture: the noisy field and its conditioning field enter as
//! two channels, pass through five same-padded 3x3 convolutions
//! (2 -> 16 -> 32 -> 32 -> 16 -> 1) with a sigmoid-weighted linear unit
//! between them, and a sinusoidal time embedding is mapped by a learned
//! affine to per-channel biases added to the first convolution's output.
//! The final convolution is zero-initialized so an untrained model predicts
//! zero noise.
//!
//! Internally every activation plane carries an explicit one-pixel zero ring,
//! so the 3x3 kernels run branch-free over contiguous rows; the ring is
//! invariant under the activation (silu(0) = 0) and under convolution writes,
//! which only touch the interior.

use crate::denoiser::{DenoiserInput, NoisePredictor};
use crate::field::Field;
use crate::rng::Stream;
use crate::ubt::Tensor;
use crate::{Error, Result};

/// Channel counts through the network; conv `i` maps CHANNELS[i] -> CHANNELS[i+1].
pub const CHANNELS: [usize; 6] = [2, 16, 32, 32, 16, 1];

/// Sinusoidal embedding width: 8 sine/cosine pairs of t/T.
pub const TIME_EMBED_DIM: usize = 16;

/// One 3x3 convolution layer; weights are `[out_c][in_c][3][3]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_c: usize,
    pub out_c: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_c: usize, out_c: usize) -> Self {
        ConvLayer {
            in_c,
            out_c,
            weight: vec![0.0; out_c * in_c * 9],
            bias: vec![0.0; out_c],
        }
    }
}

/// Parameters of the conv denoiser; also reused as the gradient and
/// optimizer-moment container since those mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDenoiser {
    pub layers: Vec<ConvLayer>,
    /// Affine from time embedding to layer-0 per-channel biases, `[16][TIME_EMBED_DIM]`.
    pub time_weight: Vec<f64>,
    pub time_bias: Vec<f64>,
}

/// t/T at geometrically doubling frequencies, sine and cosine per frequency.
pub fn time_embedding(t: usize, t_total: usize) -> [f64; TIME_EMBED_DIM] {
    let tau = t as f64 / t_total as f64;
    let mut emb = [0.0; TIME_EMBED_DIM];
    let mut omega = std::f64::consts::PI;
    for k in 0..TIME_EMBED_DIM / 2 {
        emb[2 * k] = (omega * tau).sin();
        emb[2 * k + 1] = (omega * tau).cos();
        omega *= 2.0;
    }
    emb
}

/// Branch-free exp with ~1 ulp accuracy; vectorizes in the activation
/// loops, unlike the libm call.
#[inline(always)]
fn fast_exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Clamp keeps 2^k finite; the true exp under/overflows out here anyway.
    let x = x.clamp(-708.0, 708.0);
    let kf = (x * LOG2E).round();
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // Degree-13 Taylor on |r| <= ln2/2 keeps the relative error near 1e-16.
    let mut p = 1.0 / 6_227_020_800.0;
    p = fmadd(p, r, 1.0 / 479_001_600.0);
    p = fmadd(p, r, 1.0 / 39_916_800.0);
    p = fmadd(p, r, 1.0 / 3_628_800.0);
    p = fmadd(p, r, 1.0 / 362_880.0);
    p = fmadd(p, r, 1.0 / 40_320.0);
    p = fmadd(p, r, 1.0 / 5_040.0);
    p = fmadd(p, r, 1.0 / 720.0);
    p = fmadd(p, r, 1.0 / 120.0);
    p = fmadd(p, r, 1.0 / 24.0);
    p = fmadd(p, r, 1.0 / 6.0);
    p = fmadd(p, r, 0.5);
    p = fmadd(p, r, 1.0);
    p = fmadd(p, r, 1.0);
    let scale = f64::from_bits(((kf as i64 + 1023) as u64) << 52);
    p * scale
}

#[inline(always)]
fn silu(x: f64) -> f64 {
    x / (1.0 + fast_exp(-x))
}

#[inline(always)]
fn dsilu(x: f64) -> f64 {
    let s = 1.0 / (1.0 + fast_exp(-x));
    s * (1.0 + x * (1.0 - s))
}

// Fused multiply-add where the hardware has it; keeps the hot loops on the
// FMA ports and stays deterministic within one build.
#[inline(always)]
fn fmadd(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// Lane-split dot product; independent accumulators let the loop vectorize.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            lanes[j] = fmadd(xa[j], xb[j], lanes[j]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder().iter()) {
        tail = fmadd(*x, *y, tail);
    }
    lanes.iter().sum::<f64>() + tail
}

// ---------------------------------------------------------------------------
// Scratch-plane pool
// ---------------------------------------------------------------------------

// Activation planes are multi-hundred-KB buffers churned on every network
// evaluation; recycling them per thread avoids the mmap and page-fault cost
// of fresh allocations. Buffers come back zeroed, so semantics match a
// fresh `vec![0.0; len]`.
thread_local! {
    static PLANE_POOL: std::cell::RefCell<Vec<Vec<f64>>> =
        const { std::cell::RefCell::new(Vec::new()) };
}

fn take_plane(len: usize) -> Vec<f64> {
    let mut buf = PLANE_POOL
        .with(|p| p.borrow_mut().pop())
        .unwrap_or_default();
    buf.clear();
    buf.resize(len, 0.0);
    buf
}

fn give_plane(buf: Vec<f64>) {
    PLANE_POOL.with(|p| {
        let mut pool = p.borrow_mut();
        if pool.len() < 32 {
            pool.push(buf);
        }
    });
}

// ---------------------------------------------------------------------------
// Padded-plane geometry
// ---------------------------------------------------------------------------

#[inline]
fn padded_row(w: usize) -> usize {
    w + 2
}

#[inline]
fn padded_channel(h: usize, w: usize) -> usize {
    (h + 2) * (w + 2)
}

/// Copies an unpadded h x w channel into the interior of a padded plane.
fn pad_into(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let pw = padded_row(w);
    for y in 0..h {
        dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

fn unpad_channel(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let pw = padded_row(w);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&src[(y + 1) * pw + 1..(y + 1) * pw + 1 + w]);
    }
    out
}

fn fill_interior(ch: &mut [f64], h: usize, w: usize, value: f64) {
    let pw = padded_row(w);
    for y in 0..h {
        ch[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].fill(value);
    }
}

fn interior_sum(ch: &[f64], h: usize, w: usize) -> f64 {
    let pw = padded_row(w);
    let mut total = 0.0;
    for y in 0..h {
        total += ch[(y + 1) * pw + 1..(y + 1) * pw + 1 + w]
            .iter()
            .sum::<f64>();
    }
    total
}

// ---------------------------------------------------------------------------
// 3x3 kernels on padded planes
// ---------------------------------------------------------------------------

// The 9-tap accumulations below are split into short independent chains so
// the vectorized loops are throughput- rather than FMA-latency-bound, and
// the layer drivers walk the planes in row strips so the accumulator block
// stays L1-resident across input-channel passes.

/// Rows per tile: 4 output channels x (STRIP_ROWS+2) padded rows fit in L1.
const STRIP_ROWS: usize = 8;

/// out (padded) += conv3x3(inp (padded), w9) over output rows y0..y1.
fn pconv1(inp: &[f64], w: usize, y0: usize, y1: usize, w9: &[f64], out: &mut [f64]) {
    let pw = padded_row(w);
    let k: [f64; 9] = w9[..9].try_into().expect("9 taps");
    assert!(inp.len() >= (y1 + 2) * pw && out.len() >= (y1 + 2) * pw);
    for y in y0..y1 {
        let top = &inp[y * pw..][..pw];
        let mid = &inp[(y + 1) * pw..][..pw];
        let bot = &inp[(y + 2) * pw..][..pw];
        let orow = &mut out[(y + 1) * pw + 1..][..w];
        for x in 0..w {
            let mut s_t = k[0] * top[x];
            s_t = fmadd(k[1], top[x + 1], s_t);
            s_t = fmadd(k[2], top[x + 2], s_t);
            let mut s_m = k[3] * mid[x];
            s_m = fmadd(k[4], mid[x + 1], s_m);
            s_m = fmadd(k[5], mid[x + 2], s_m);
            let mut s_b = k[6] * bot[x];
            s_b = fmadd(k[7], bot[x + 1], s_b);
            s_b = fmadd(k[8], bot[x + 2], s_b);
            orow[x] += (s_t + s_m) + s_b;
        }
    }
}

/// Four output channels against one input channel over output rows y0..y1;
/// shares the input loads across the four accumulators.
fn pconv4(
    inp: &[f64],
    h: usize,
    w: usize,
    y0: usize,
    y1: usize,
    w9x4: [&[f64]; 4],
    out4: &mut [f64],
) {
    let pw = padded_row(w);
    let pc = padded_channel(h, w);
    assert!(inp.len() >= pc && out4.len() >= 4 * pc && y1 <= h);
    let k0: [f64; 9] = w9x4[0][..9].try_into().expect("9 taps");
    let k1: [f64; 9] = w9x4[1][..9].try_into().expect("9 taps");
    let k2: [f64; 9] = w9x4[2][..9].try_into().expect("9 taps");
    let k3: [f64; 9] = w9x4[3][..9].try_into().expect("9 taps");
    let (o01, o23) = out4.split_at_mut(2 * pc);
    let (o0, o1) = o01.split_at_mut(pc);
    let (o2, o3) = o23.split_at_mut(pc);
    for y in y0..y1 {
        let top = &inp[y * pw..][..pw];
        let mid = &inp[(y + 1) * pw..][..pw];
        let bot = &inp[(y + 2) * pw..][..pw];
        let base = (y + 1) * pw + 1;
        let r0 = &mut o0[base..][..w];
        let r1 = &mut o1[base..][..w];
        let r2 = &mut o2[base..][..w];
        let r3 = &mut o3[base..][..w];
        for x in 0..w {
            let t0 = top[x];
            let t1 = top[x + 1];
            let t2 = top[x + 2];
            let m0 = mid[x];
            let m1 = mid[x + 1];
            let m2 = mid[x + 2];
            let b0 = bot[x];
            let b1 = bot[x + 1];
            let b2 = bot[x + 2];
            // Two chains per output channel keep eight chains in flight.
            let mut u = k0[0] * t0;
            u = fmadd(k0[1], t1, u);
            u = fmadd(k0[2], t2, u);
            u = fmadd(k0[3], m0, u);
            let mut v = r0[x];
            v = fmadd(k0[4], m1, v);
            v = fmadd(k0[5], m2, v);
            v = fmadd(k0[6], b0, v);
            v = fmadd(k0[7], b1, v);
            v = fmadd(k0[8], b2, v);
            r0[x] = u + v;
            let mut u = k1[0] * t0;
            u = fmadd(k1[1], t1, u);
            u = fmadd(k1[2], t2, u);
            u = fmadd(k1[3], m0, u);
            let mut v = r1[x];
            v = fmadd(k1[4], m1, v);
            v = fmadd(k1[5], m2, v);
            v = fmadd(k1[6], b0, v);
            v = fmadd(k1[7], b1, v);
            v = fmadd(k1[8], b2, v);
            r1[x] = u + v;
            let mut u = k2[0] * t0;
            u = fmadd(k2[1], t1, u);
            u = fmadd(k2[2], t2, u);
            u = fmadd(k2[3], m0, u);
            let mut v = r2[x];
            v = fmadd(k2[4], m1, v);
            v = fmadd(k2[5], m2, v);
            v = fmadd(k2[6], b0, v);
            v = fmadd(k2[7], b1, v);
            v = fmadd(k2[8], b2, v);
            r2[x] = u + v;
            let mut u = k3[0] * t0;
            u = fmadd(k3[1], t1, u);
            u = fmadd(k3[2], t2, u);
            u = fmadd(k3[3], m0, u);
            let mut v = r3[x];
            v = fmadd(k3[4], m1, v);
            v = fmadd(k3[5], m2, v);
            v = fmadd(k3[6], b0, v);
            v = fmadd(k3[7], b1, v);
            v = fmadd(k3[8], b2, v);
            r3[x] = u + v;
        }
    }
}

#[inline]
fn flip9(w9: &[f64]) -> [f64; 9] {
    [
        w9[8], w9[7], w9[6], w9[5], w9[4], w9[3], w9[2], w9[1], w9[0],
    ]
}

// Weight gradients exploit the zero ring of the output-gradient plane: the
// reduction for every tap runs over one contiguous index range of the padded
// plane (rows 1..=h), since the ring contributes gz = 0 terms. That removes
// all per-row slicing from the hottest reduction.

/// Linear range of the padded plane covering rows 1..=h minus the first and
/// last cell, so every tap offset stays in bounds.
#[inline]
fn plane_span(h: usize, w: usize) -> (usize, usize) {
    let pw = padded_row(w);
    let start = pw + 1;
    let n = (h + 1) * pw - 1 - start;
    (start, n)
}

/// d(conv)/d(weight) for one (padded input, padded output-grad) channel pair.
fn pconv_wgrad(inp: &[f64], gz: &[f64], h: usize, w: usize, out9: &mut [f64]) {
    let pw = padded_row(w);
    let (s, n) = plane_span(h, w);
    let g_all = &gz[s..s + n];
    for ky in 0..3usize {
        let ibase = s + ky * pw - pw;
        let i0 = &inp[ibase - 1..ibase - 1 + n];
        let i1 = &inp[ibase..ibase + n];
        let i2 = &inp[ibase + 1..ibase + 1 + n];
        let mut l0 = [0.0f64; 4];
        let mut l1 = [0.0f64; 4];
        let mut l2 = [0.0f64; 4];
        let mut t = [0.0f64; 3];
        let mut x = 0;
        while x + 4 <= n {
            let g: [f64; 4] = g_all[x..x + 4].try_into().expect("chunk");
            let a: [f64; 4] = i0[x..x + 4].try_into().expect("chunk");
            let b: [f64; 4] = i1[x..x + 4].try_into().expect("chunk");
            let c: [f64; 4] = i2[x..x + 4].try_into().expect("chunk");
            for j in 0..4 {
                l0[j] = fmadd(g[j], a[j], l0[j]);
            }
            for j in 0..4 {
                l1[j] = fmadd(g[j], b[j], l1[j]);
            }
            for j in 0..4 {
                l2[j] = fmadd(g[j], c[j], l2[j]);
            }
            x += 4;
        }
        while x < n {
            let g = g_all[x];
            t[0] = fmadd(g, i0[x], t[0]);
            t[1] = fmadd(g, i1[x], t[1]);
            t[2] = fmadd(g, i2[x], t[2]);
            x += 1;
        }
        let red = |l: [f64; 4]| (l[0] + l[1]) + (l[2] + l[3]);
        out9[ky * 3] += red(l0) + t[0];
        out9[ky * 3 + 1] += red(l1) + t[1];
        out9[ky * 3 + 2] += red(l2) + t[2];
    }
}

/// d(conv)/d(weight) for four output channels against one input channel; the
/// three shifted input loads serve all four channels.
fn pconv_wgrad4(inp: &[f64], gz4: [&[f64]; 4], h: usize, w: usize, outs: &mut [[f64; 9]; 4]) {
    let pw = padded_row(w);
    let (s, n) = plane_span(h, w);
    let g0 = &gz4[0][s..s + n];
    let g1 = &gz4[1][s..s + n];
    let g2 = &gz4[2][s..s + n];
    let g3 = &gz4[3][s..s + n];
    for ky in 0..3usize {
        let ibase = s + ky * pw - pw;
        let i0 = &inp[ibase - 1..ibase - 1 + n];
        let i1 = &inp[ibase..ibase + n];
        let i2 = &inp[ibase + 1..ibase + 1 + n];
        // lanes[channel * 3 + tap]
        let mut lanes = [[0.0f64; 4]; 12];
        let mut x = 0;
        while x + 4 <= n {
            let a: [f64; 4] = i0[x..x + 4].try_into().expect("chunk");
            let b: [f64; 4] = i1[x..x + 4].try_into().expect("chunk");
            let c: [f64; 4] = i2[x..x + 4].try_into().expect("chunk");
            macro_rules! acc {
                ($g:ident, $o:expr) => {{
                    let g: [f64; 4] = $g[x..x + 4].try_into().expect("chunk");
                    for j in 0..4 {
                        lanes[$o][j] = fmadd(g[j], a[j], lanes[$o][j]);
                    }
                    for j in 0..4 {
                        lanes[$o + 1][j] = fmadd(g[j], b[j], lanes[$o + 1][j]);
                    }
                    for j in 0..4 {
                        lanes[$o + 2][j] = fmadd(g[j], c[j], lanes[$o + 2][j]);
                    }
                }};
            }
            acc!(g0, 0);
            acc!(g1, 3);
            acc!(g2, 6);
            acc!(g3, 9);
            x += 4;
        }
        while x < n {
            for (ci, g) in [g0, g1, g2, g3].iter().enumerate() {
                let gv = g[x];
                lanes[ci * 3][0] = fmadd(gv, i0[x], lanes[ci * 3][0]);
                lanes[ci * 3 + 1][0] = fmadd(gv, i1[x], lanes[ci * 3 + 1][0]);
                lanes[ci * 3 + 2][0] = fmadd(gv, i2[x], lanes[ci * 3 + 2][0]);
            }
            x += 1;
        }
        for c in 0..4 {
            for d in 0..3 {
                let l = lanes[c * 3 + d];
                outs[c][ky * 3 + d] += (l[0] + l[1]) + (l[2] + l[3]);
            }
        }
    }
}

/// Forward convolution for a whole layer on padded planes.
fn layer_forward(
    layer: &ConvLayer,
    input: &[f64],
    h: usize,
    w: usize,
    extra_bias: Option<&[f64]>,
) -> Vec<f64> {
    let pc = padded_channel(h, w);
    debug_assert_eq!(input.len(), layer.in_c * pc);
    let mut out = take_plane(layer.out_c * pc);
    for oc in 0..layer.out_c {
        let mut b = layer.bias[oc];
        if let Some(eb) = extra_bias {
            b += eb[oc];
        }
        if b != 0.0 {
            fill_interior(&mut out[oc * pc..(oc + 1) * pc], h, w, b);
        }
    }
    let w9 = |oc: usize, ic: usize| &layer.weight[(oc * layer.in_c + ic) * 9..][..9];
    let mut oc = 0;
    while oc + 4 <= layer.out_c {
        let mut y0 = 0;
        while y0 < h {
            let y1 = (y0 + STRIP_ROWS).min(h);
            for ic in 0..layer.in_c {
                pconv4(
                    &input[ic * pc..(ic + 1) * pc],
                    h,
                    w,
                    y0,
                    y1,
                    [w9(oc, ic), w9(oc + 1, ic), w9(oc + 2, ic), w9(oc + 3, ic)],
                    &mut out[oc * pc..(oc + 4) * pc],
                );
            }
            y0 = y1;
        }
        oc += 4;
    }
    while oc < layer.out_c {
        for ic in 0..layer.in_c {
            pconv1(
                &input[ic * pc..(ic + 1) * pc],
                w,
                0,
                h,
                w9(oc, ic),
                &mut out[oc * pc..(oc + 1) * pc],
            );
        }
        oc += 1;
    }
    out
}

/// Gradient with respect to the layer input; a convolution of the output
/// gradient with the flipped kernels, roles of in/out channels swapped.
fn layer_input_grad(layer: &ConvLayer, gz: &[f64], h: usize, w: usize) -> Vec<f64> {
    let pc = padded_channel(h, w);
    let mut ga = take_plane(layer.in_c * pc);
    let wflip = |oc: usize, ic: usize| flip9(&layer.weight[(oc * layer.in_c + ic) * 9..][..9]);
    let mut ic = 0;
    while ic + 4 <= layer.in_c {
        let mut y0 = 0;
        while y0 < h {
            let y1 = (y0 + STRIP_ROWS).min(h);
            for oc in 0..layer.out_c {
                let k = [
                    wflip(oc, ic),
                    wflip(oc, ic + 1),
                    wflip(oc, ic + 2),
                    wflip(oc, ic + 3),
                ];
                pconv4(
                    &gz[oc * pc..(oc + 1) * pc],
                    h,
                    w,
                    y0,
                    y1,
                    [&k[0], &k[1], &k[2], &k[3]],
                    &mut ga[ic * pc..(ic + 4) * pc],
                );
            }
            y0 = y1;
        }
        ic += 4;
    }
    while ic < layer.in_c {
        for oc in 0..layer.out_c {
            let k = wflip(oc, ic);
            pconv1(&gz[oc * pc..(oc + 1) * pc], w, 0, h, &k, &mut ga[ic * pc..(ic + 1) * pc]);
        }
        ic += 1;
    }
    ga
}

fn layer_param_grads(
    layer: &ConvLayer,
    input: &[f64],
    gz: &[f64],
    h: usize,
    w: usize,
    wgrad: &mut [f64],
    bgrad: &mut [f64],
) {
    let pc = padded_channel(h, w);
    for oc in 0..layer.out_c {
        bgrad[oc] += interior_sum(&gz[oc * pc..(oc + 1) * pc], h, w);
    }
    let mut oc = 0;
    while oc + 4 <= layer.out_c {
        let gz4 = [
            &gz[oc * pc..(oc + 1) * pc],
            &gz[(oc + 1) * pc..(oc + 2) * pc],
            &gz[(oc + 2) * pc..(oc + 3) * pc],
            &gz[(oc + 3) * pc..(oc + 4) * pc],
        ];
        for ic in 0..layer.in_c {
            let mut acc = [[0.0f64; 9]; 4];
            pconv_wgrad4(&input[ic * pc..(ic + 1) * pc], gz4, h, w, &mut acc);
            for (c, taps) in acc.iter().enumerate() {
                let g9 = &mut wgrad[((oc + c) * layer.in_c + ic) * 9..][..9];
                for (g, t) in g9.iter_mut().zip(taps) {
                    *g += t;
                }
            }
        }
        oc += 4;
    }
    while oc < layer.out_c {
        let gz_ch = &gz[oc * pc..(oc + 1) * pc];
        for ic in 0..layer.in_c {
            let g9 = &mut wgrad[(oc * layer.in_c + ic) * 9..][..9];
            pconv_wgrad(&input[ic * pc..(ic + 1) * pc], gz_ch, h, w, g9);
        }
        oc += 1;
    }
}

/// Activations saved by [`ConvDenoiser::forward_cached`] for the backward
/// pass; all planes are padded and return to the scratch pool on drop.
pub struct ForwardCache {
    h: usize,
    w: usize,
    emb: [f64; TIME_EMBED_DIM],
    /// inputs[i] feeds conv i; inputs[0] is noisy and condition concatenated.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of conv i (time bias already added for i = 0).
    preact: Vec<Vec<f64>>,
}

impl Drop for ForwardCache {
    fn drop(&mut self) {
        for buf in self.inputs.drain(..).chain(self.preact.drain(..)) {
            give_plane(buf);
        }
    }
}

impl ConvDenoiser {
    /// Glorot-uniform init, except the final layer which starts at zero.
    pub fn init(rng: &mut Stream) -> Self {
        let mut layers = Vec::with_capacity(CHANNELS.len() - 1);
        for i in 0..CHANNELS.len() - 1 {
            let (in_c, out_c) = (CHANNELS[i], CHANNELS[i + 1]);
            let mut layer = ConvLayer::zeros(in_c, out_c);
            if i != CHANNELS.len() - 2 {
                let limit = (6.0 / ((in_c * 9 + out_c * 9) as f64)).sqrt();
                for v in &mut layer.weight {
                    *v = (rng.next_f64() * 2.0 - 1.0) * limit;
                }
            }
            layers.push(layer);
        }
        let limit = (6.0 / (2.0 * TIME_EMBED_DIM as f64)).sqrt();
        let time_weight = (0..CHANNELS[1] * TIME_EMBED_DIM)
            .map(|_| (rng.next_f64() * 2.0 - 1.0) * limit)
            .collect();
        ConvDenoiser {
            layers,
            time_weight,
            time_bias: vec![0.0; CHANNELS[1]],
        }
    }

    /// All-zero parameters (gradient and moment containers).
    pub fn zeros() -> Self {
        ConvDenoiser {
            layers: (0..CHANNELS.len() - 1)
                .map(|i| ConvLayer::zeros(CHANNELS[i], CHANNELS[i + 1]))
                .collect(),
            time_weight: vec![0.0; CHANNELS[1] * TIME_EMBED_DIM],
            time_bias: vec![0.0; CHANNELS[1]],
        }
    }

    fn time_channel_bias(&self, emb: &[f64; TIME_EMBED_DIM]) -> Vec<f64> {
        (0..CHANNELS[1])
            .map(|c| {
                dot(
                    &self.time_weight[c * TIME_EMBED_DIM..][..TIME_EMBED_DIM],
                    emb,
                ) + self.time_bias[c]
            })
            .collect()
    }

    fn assemble_input(noisy: &Field, condition: &Field) -> Vec<f64> {
        let (h, w) = (noisy.height(), noisy.width());
        let pc = padded_channel(h, w);
        let mut a = take_plane(2 * pc);
        pad_into(noisy.data(), h, w, &mut a[..pc]);
        pad_into(condition.data(), h, w, &mut a[pc..]);
        a
    }

    pub fn forward(&self, noisy: &Field, condition: &Field, t: usize, t_total: usize) -> Field {
        assert!(
            noisy.same_shape(condition),
            "noisy and condition shapes differ"
        );
        let (h, w) = (noisy.height(), noisy.width());
        let emb = time_embedding(t, t_total);
        let tbias = self.time_channel_bias(&emb);
        let mut a = Self::assemble_input(noisy, condition);
        for (i, layer) in self.layers.iter().enumerate() {
            let extra = if i == 0 { Some(tbias.as_slice()) } else { None };
            let mut z = layer_forward(layer, &a, h, w, extra);
            if i + 1 < self.layers.len() {
                for v in &mut z {
                    *v = silu(*v);
                }
            }
            give_plane(std::mem::replace(&mut a, z));
        }
        let out = Field::from_vec(h, w, unpad_channel(&a, h, w)).expect("shape matches input");
        give_plane(a);
        out
    }

    pub fn forward_cached(
        &self,
        noisy: &Field,
        condition: &Field,
        t: usize,
        t_total: usize,
    ) -> (Field, ForwardCache) {
        assert!(
            noisy.same_shape(condition),
            "noisy and condition shapes differ"
        );
        let (h, w) = (noisy.height(), noisy.width());
        let emb = time_embedding(t, t_total);
        let tbias = self.time_channel_bias(&emb);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preact = Vec::with_capacity(self.layers.len());
        let mut a = Self::assemble_input(noisy, condition);
        for (i, layer) in self.layers.iter().enumerate() {
            let extra = if i == 0 { Some(tbias.as_slice()) } else { None };
            let z = layer_forward(layer, &a, h, w, extra);
            inputs.push(std::mem::take(&mut a));
            if i + 1 < self.layers.len() {
                let mut act = take_plane(z.len());
                for (o, &v) in act.iter_mut().zip(z.iter()) {
                    *o = silu(v);
                }
                a = act;
            }
            preact.push(z);
        }
        let out = Field::from_vec(h, w, unpad_channel(preact.last().expect("layers"), h, w))
            .expect("shape");
        (
            out,
            ForwardCache {
                h,
                w,
                emb,
                inputs,
                preact,
            },
        )
    }

    /// Exact reverse-mode gradients of the forward map. Returns parameter
    /// gradients plus the gradients with respect to the noisy input and the
    /// conditioning field.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &Field,
    ) -> (ConvDenoiser, Field, Field) {
        let (grads, input_grads) = self.backward_impl(cache, output_grad, true);
        let (noisy_grad, cond_grad) = input_grads.expect("input grads requested");
        (grads, noisy_grad, cond_grad)
    }

    /// Backward pass without the final propagation into the network input;
    /// the training loop needs only parameter gradients.
    pub fn backward_params(&self, cache: &ForwardCache, output_grad: &Field) -> ConvDenoiser {
        self.backward_impl(cache, output_grad, false).0
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        output_grad: &Field,
        want_input_grads: bool,
    ) -> (ConvDenoiser, Option<(Field, Field)>) {
        let (h, w) = (cache.h, cache.w);
        let pc = padded_channel(h, w);
        assert_eq!(output_grad.height(), h);
        assert_eq!(output_grad.width(), w);
        let mut grads = ConvDenoiser::zeros();
        let mut gz = take_plane(pc);
        pad_into(output_grad.data(), h, w, &mut gz);
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                // gz currently holds the gradient at the activation output;
                // the padding ring is zero on both factors.
                for (g, z) in gz.iter_mut().zip(cache.preact[i].iter()) {
                    *g *= dsilu(*z);
                }
            }
            let glayer = &mut grads.layers[i];
            layer_param_grads(
                &self.layers[i],
                &cache.inputs[i],
                &gz,
                h,
                w,
                &mut glayer.weight,
                &mut glayer.bias,
            );
            if i == 0 {
                // The time path adds per-channel biases to layer 0's output;
                // its gradient is the per-channel sum already in the bias slot.
                for c in 0..CHANNELS[1] {
                    let s = grads.layers[0].bias[c];
                    grads.time_bias[c] += s;
                    for d in 0..TIME_EMBED_DIM {
                        grads.time_weight[c * TIME_EMBED_DIM + d] += s * cache.emb[d];
                    }
                }
                if !want_input_grads {
                    give_plane(gz);
                    return (grads, None);
                }
            }
            let ga = layer_input_grad(&self.layers[i], &gz, h, w);
            give_plane(std::mem::replace(&mut gz, ga));
        }
        let noisy_grad = Field::from_vec(h, w, unpad_channel(&gz[..pc], h, w)).expect("shape");
        let cond_grad = Field::from_vec(h, w, unpad_channel(&gz[pc..], h, w)).expect("shape");
        give_plane(gz);
        (grads, Some((noisy_grad, cond_grad)))
    }

    /// Named parameter blocks in a fixed order, with tensor dims.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.weight"),
                vec![layer.out_c, layer.in_c, 3, 3],
                layer.weight.as_slice(),
            ));
            out.push((
                format!("layer{i}.bias"),
                vec![layer.out_c],
                layer.bias.as_slice(),
            ));
        }
        out.push((
            "time.weight".into(),
            vec![CHANNELS[1], TIME_EMBED_DIM],
            self.time_weight.as_slice(),
        ));
        out.push((
            "time.bias".into(),
            vec![CHANNELS[1]],
            self.time_bias.as_slice(),
        ));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.time_weight);
        out.push(&mut self.time_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn get_param(&self, mut index: usize) -> f64 {
        for (_, _, data) in self.blocks() {
            if index < data.len() {
                return data[index];
            }
            index -= data.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for data in self.blocks_mut() {
            if index < data.len() {
                data[index] = value;
                return;
            }
            index -= data.len();
        }
        panic!("parameter index out of range");
    }

    /// self += s * other, blockwise.
    pub fn add_scaled(&mut self, other: &ConvDenoiser, s: f64) {
        let other_blocks: Vec<Vec<f64>> =
            other.blocks().iter().map(|(_, _, d)| d.to_vec()).collect();
        for (mine, theirs) in self.blocks_mut().into_iter().zip(other_blocks) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += s * t;
            }
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.blocks()
            .into_iter()
            .map(|(name, dims, data)| {
                (
                    format!("{prefix}.{name}"),
                    Tensor::new(dims, data.to_vec()).expect("block dims consistent"),
                )
            })
            .collect()
    }

    pub fn from_named_tensors(
        prefix: &str,
        lookup: &dyn Fn(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut model = ConvDenoiser::zeros();
        let names: Vec<String> = model.blocks().iter().map(|(n, _, _)| n.clone()).collect();
        let dims: Vec<Vec<usize>> = model.blocks().iter().map(|(_, d, _)| d.clone()).collect();
        for ((name, dims), slot) in names.iter().zip(dims).zip(model.blocks_mut()) {
            let full = format!("{prefix}.{name}");
            let tensor =
                lookup(&full).ok_or_else(|| Error::Format(format!("missing tensor {full}")))?;
            if tensor.dims != dims {
                return Err(Error::Format(format!(
                    "tensor {full} has dims {:?}, want {:?}",
                    tensor.dims, dims
                )));
            }
            *slot = tensor.data;
        }
        Ok(model)
    }
}

impl NoisePredictor for ConvDenoiser {
    fn predict(&self, input: &DenoiserInput<'_>) -> Field {
        self.forward(input.noisy, input.condition, input.t, input.t_total)
    }
}
