//! Image-pair fidelity metrics and set-level distribution distances.
//!
//! Pairwise metrics treat inputs as [-1, 1] intensities and remap to [0, 1]
//! internally, so the PSNR/SSIM conventions (MAX = 1, standard constants)
//! apply unchanged.

mod features;
mod frechet;
mod mmd;

pub use features::{embed_fields, FeatureEmbedding, Featurizer};
pub use frechet::{frechet_distance, moments, MomentSummary};
pub use mmd::{kid, mmd2_biased, mmd2_unbiased, permutation_test, Kernel, PermutationTest};

use crate::field::Field;
use crate::{Error, Result};

/// PSNR is capped here once the MSE drops below 1e-10.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_shapes(a: &Field, b: &Field) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(
            a.height(),
            a.width(),
            b.height(),
            b.width(),
        ))
    }
}

/// Mean absolute difference.
pub fn l1(a: &Field, b: &Field) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

fn to_unit(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

/// Peak signal-to-noise ratio in dB on the [0, 1] remap, capped at 100 dB.
pub fn psnr(a: &Field, b: &Field) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = to_unit(*x) - to_unit(*y);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-0.5 * ((i as f64 - c) / SSIM_SIGMA).powi(2)).exp();
    }
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Valid-mode separable Gaussian filter: output is (h-10) x (w-10).
fn gaussian_filter_valid(f: &[Vec<f64>], h: usize, w: usize) -> Vec<Vec<f64>> {
    let k = ssim_kernel();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![vec![0.0; ow]; h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * f[y][x + i];
            }
            rows[y][x] = acc;
        }
    }
    let mut out = vec![vec![0.0; ow]; oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[y + i][x];
            }
            out[y][x] = acc;
        }
    }
    out
}

/// Mean structural similarity over sliding 11x11 Gaussian windows
/// (sigma 1.5), standard constants, valid-mode windows only.
pub fn ssim(a: &Field, b: &Field) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidRange(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let grid = |f: &Field, op: &dyn Fn(f64, f64) -> f64, g: &Field| -> Vec<Vec<f64>> {
        (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| op(to_unit(f.get(y, x)), to_unit(g.get(y, x))))
                    .collect()
            })
            .collect()
    };
    let ga = grid(a, &|x, _| x, b);
    let gb = grid(a, &|_, y| y, b);
    let gaa = grid(a, &|x, _| x * x, b);
    let gbb = grid(a, &|_, y| y * y, b);
    let gab = grid(a, &|x, y| x * y, b);

    let mu_a = gaussian_filter_valid(&ga, h, w);
    let mu_b = gaussian_filter_valid(&gb, h, w);
    let m_aa = gaussian_filter_valid(&gaa, h, w);
    let m_bb = gaussian_filter_valid(&gbb, h, w);
    let m_ab = gaussian_filter_valid(&gab, h, w);

    let (oh, ow) = (mu_a.len(), mu_a[0].len());
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (ma, mb) = (mu_a[y][x], mu_b[y][x]);
            let va = m_aa[y][x] - ma * ma;
            let vb = m_bb[y][x] - mb * mb;
            let cov = m_ab[y][x] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (oh * ow) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn identical_images() {
        let mut rng = Stream::new(1);
        let f = Field::gaussian(16, 16, &mut rng).clamp(-1.0, 1.0);
        assert_eq!(l1(&f, &f).unwrap(), 0.0);
        assert_eq!(psnr(&f, &f).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&f, &f).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_forced_value() {
        // MSE 0.01 on the unit remap: offset of 0.2 in [-1,1] space is 0.1
        // in [0,1] space.
        let a = Field::zeros(10, 10);
        let b = Field::constant(10, 10, 0.2);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn l1_symmetric_and_value() {
        let a = Field::zeros(4, 4);
        let b = Field::constant(4, 4, -0.5);
        assert_eq!(l1(&a, &b).unwrap(), 0.5);
        assert_eq!(l1(&a, &b).unwrap(), l1(&b, &a).unwrap());
    }

    /// Brute-force SSIM: explicit per-window weighted moments.
    fn ssim_reference(a: &Field, b: &Field) -> f64 {
        let k = ssim_kernel();
        let (h, w) = (a.height(), a.width());
        let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
        let mut total = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = k[dy] * k[dx];
                        let va = to_unit(a.get(y + dy, x + dx));
                        let vb = to_unit(b.get(y + dy, x + dx));
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total / (oh * ow) as f64
    }

    #[test]
    fn ssim_matches_naive_reference() {
        let mut rng = Stream::new(7);
        for trial in 0..5 {
            let a = Field::gaussian(20, 18, &mut rng).clamp(-1.0, 1.0);
            let b = a
                .zip_map(&Field::gaussian(20, 18, &mut rng), |x, n| x + 0.2 * n)
                .unwrap()
                .clamp(-1.0, 1.0);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_reference(&a, &b);
            assert!((fast - slow).abs() < 1e-10, "trial {trial}: {fast} vs {slow}");
            assert!(
                (ssim(&b, &a).unwrap() - fast).abs() < 1e-12,
                "ssim not symmetric"
            );
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Field::zeros(12, 12);
        let b = Field::zeros(12, 13);
        assert!(l1(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }
}
