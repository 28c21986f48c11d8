//! Procedural stand-in for the imaging data: healthy brain-like phantoms,
//! randomized lesion masks, and lesion embedding that turns a healthy image
//! into a pseudo-pathological one with known ground truth.

use serde::{Deserialize, Serialize};

use crate::field::{avg_pool_same, BinaryMask, Field};
use crate::rng::Stream;
use crate::{Error, Result};

/// Closed interval used for randomized geometry and intensities.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn sample(&self, rng: &mut Stream) -> f64 {
        self.lo + (self.hi - self.lo) * rng.next_f64()
    }
}

/// Geometry and texture of the healthy phantom; intensities live in [-1, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub size: usize,
    /// Outer (skull) ellipse semi-axes as fractions of the image size.
    pub outer_a: Range,
    pub outer_b: Range,
    /// Center jitter in pixels.
    pub center_jitter: f64,
    /// Width of the bright cortical band in pixels.
    pub cortex_width: Range,
    pub cortex_intensity: Range,
    pub tissue_intensity: Range,
    /// Ventricle semi-axes as fractions of the outer axes.
    pub ventricle_scale: Range,
    pub ventricle_intensity: Range,
    /// Amplitude of the smoothed texture noise added inside the brain.
    pub texture_amplitude: f64,
    /// Gaussian smoothing sigma in pixels applied to the ring structure.
    pub smoothing: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 48,
            outer_a: Range::new(0.34, 0.40),
            outer_b: Range::new(0.36, 0.42),
            center_jitter: 1.5,
            cortex_width: Range::new(2.0, 3.5),
            cortex_intensity: Range::new(0.55, 0.8),
            tissue_intensity: Range::new(0.05, 0.3),
            ventricle_scale: Range::new(0.14, 0.24),
            ventricle_intensity: Range::new(-0.65, -0.35),
            texture_amplitude: 0.05,
            smoothing: 0.8,
        }
    }
}

impl PhantomSpec {
    /// Geometry must fit inside the image with a 2 px margin.
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::InvalidRange(format!(
                "phantom size {} too small",
                self.size
            )));
        }
        let half = self.size as f64 / 2.0;
        let max_axis = self.outer_a.hi.max(self.outer_b.hi) * self.size as f64;
        if max_axis + self.center_jitter + 2.0 > half {
            return Err(Error::InvalidRange(format!(
                "outer ellipse (max semi-axis {max_axis:.1} px) does not fit a {} px image with 2 px margin",
                self.size
            )));
        }
        Ok(())
    }
}

/// Lesion intensity regimes: darker than tissue, brighter, or random per case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityMode {
    Hypo,
    Hyper,
    Mixed,
}

/// Randomized pseudo-lesion parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionSpec {
    /// Inclusive range of blob counts; [0, 0] yields empty masks.
    pub blob_count: (usize, usize),
    /// Blob radius in pixels.
    pub blob_scale: Range,
    pub intensity_mode: IntensityMode,
    /// Magnitude of the intensity shift inside the lesion.
    pub intensity_shift: Range,
    /// Feathering width of the lesion boundary in pixels.
    pub boundary_softness: Range,
    /// Cap on lesion area as a fraction of the brain region.
    pub max_area_frac: f64,
    /// Shape irregularity: weight of the smoothed noise in the blob boundary.
    pub irregularity: f64,
}

impl Default for LesionSpec {
    fn default() -> Self {
        LesionSpec {
            blob_count: (1, 3),
            blob_scale: Range::new(2.5, 7.0),
            intensity_mode: IntensityMode::Hypo,
            intensity_shift: Range::new(0.5, 0.9),
            boundary_softness: Range::new(0.5, 1.5),
            max_area_frac: 0.35,
            irregularity: 0.4,
        }
    }
}

/// Separable Gaussian blur with reflective borders, truncated at 3 sigma.
fn gaussian_blur(f: &Field, sigma: f64) -> Field {
    if sigma <= 0.0 {
        return f.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for d in -radius..=radius {
        kernel.push((-0.5 * (d as f64 / sigma).powi(2)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let (h, w) = (f.height(), f.width());
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut rows = Field::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - radius, w);
                acc += kv * f.get(y, sx);
            }
            rows.set(y, x, acc);
        }
    }
    let mut out = Field::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - radius, h);
                acc += kv * rows.get(sy, x);
            }
            out.set(y, x, acc);
        }
    }
    out
}

struct Geometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cortex_w: f64,
}

fn sample_geometry(spec: &PhantomSpec, rng: &mut Stream) -> Geometry {
    let n = spec.size as f64;
    Geometry {
        cx: n / 2.0 + (rng.next_f64() * 2.0 - 1.0) * spec.center_jitter,
        cy: n / 2.0 + (rng.next_f64() * 2.0 - 1.0) * spec.center_jitter,
        a: spec.outer_a.sample(rng) * n,
        b: spec.outer_b.sample(rng) * n,
        cortex_w: spec.cortex_width.sample(rng),
    }
}

/// Elliptical radius of a pixel: 1.0 on the outer boundary.
fn ell_radius(geo: &Geometry, y: usize, x: usize) -> f64 {
    let dx = (x as f64 - geo.cx) / geo.a;
    let dy = (y as f64 - geo.cy) / geo.b;
    (dx * dx + dy * dy).sqrt()
}

/// A smooth multi-ring elliptical phantom: background -1, bright cortical
/// band, mid-intensity interior tissue, two darker ventricle blobs, plus
/// low-amplitude smoothed texture inside the brain.
pub fn generate_healthy(spec: &PhantomSpec, rng: &mut Stream) -> Field {
    generate_healthy_with_interior(spec, rng).0
}

/// Same as [`generate_healthy`], also returning the brain-interior mask that
/// lesion placement is confined to.
pub fn generate_healthy_with_interior(spec: &PhantomSpec, rng: &mut Stream) -> (Field, BinaryMask) {
    spec.validate().expect("phantom spec validated upstream");
    let n = spec.size;
    let geo = sample_geometry(spec, rng);
    let cortex_int = spec.cortex_intensity.sample(rng);
    let tissue_int = spec.tissue_intensity.sample(rng);
    let vent_int = spec.ventricle_intensity.sample(rng);
    let vent_scale = spec.ventricle_scale.sample(rng);
    let vent_sep = 0.28 + 0.08 * rng.next_f64();

    // Inner boundary of the cortical band in elliptical units.
    let r_in = 1.0 - geo.cortex_w / geo.a.min(geo.b);
    let mut rings = Field::zeros(n, n);
    let mut interior = BinaryMask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            let r = ell_radius(&geo, y, x);
            let v = if r > 1.0 {
                -1.0
            } else if r > r_in {
                cortex_int
            } else {
                // Two mirrored ventricles offset horizontally from center.
                let vx1 = geo.cx - vent_sep * geo.a * 0.8;
                let vx2 = geo.cx + vent_sep * geo.a * 0.8;
                let va = vent_scale * geo.a;
                let vb = vent_scale * geo.b * 1.4;
                let in_vent = |vx: f64| {
                    let dx = (x as f64 - vx) / va;
                    let dy = (y as f64 - geo.cy) / vb;
                    dx * dx + dy * dy < 1.0
                };
                if in_vent(vx1) || in_vent(vx2) {
                    vent_int
                } else {
                    tissue_int
                }
            };
            rings.set(y, x, v);
            interior.set(y, x, r < r_in * 0.92);
        }
    }
    let mut img = gaussian_blur(&rings, spec.smoothing);
    if spec.texture_amplitude > 0.0 {
        let noise = gaussian_blur(&Field::gaussian(n, n, rng), 1.2);
        for y in 0..n {
            for x in 0..n {
                if ell_radius(&geo, y, x) < 1.0 {
                    let v = img.get(y, x) + spec.texture_amplitude * noise.get(y, x);
                    img.set(y, x, v);
                }
            }
        }
    } else {
        // Keep the draw count identical so downstream draws line up
        // whether or not texture is enabled.
        let _ = Field::gaussian(n, n, rng);
    }
    (img.clamp(-1.0, 1.0), interior)
}

/// Union of irregular blobs confined to the brain interior, binary, possibly
/// empty. Blob shapes come from thresholding an anisotropic radial field
/// perturbed by smoothed noise.
pub fn generate_lesion_mask(
    spec: &LesionSpec,
    brain_region: &BinaryMask,
    rng: &mut Stream,
) -> BinaryMask {
    let (h, w) = (brain_region.height(), brain_region.width());
    let mut mask = BinaryMask::empty(h, w);
    let span = spec.blob_count.1.saturating_sub(spec.blob_count.0);
    let count = spec.blob_count.0 + rng.next_below(span as u64 + 1) as usize;
    if count == 0 || brain_region.area() == 0 {
        return mask;
    }
    // Candidate centers: interior pixels.
    let candidates: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| brain_region.get(y, x))
        .collect();
    let mut blob_areas: Vec<(BinaryMask, usize)> = Vec::new();
    for _ in 0..count {
        let (cy, cx) = candidates[rng.next_below(candidates.len() as u64) as usize];
        let scale = spec.blob_scale.sample(rng);
        let ax = 0.7 + 0.7 * rng.next_f64();
        let ay = 0.7 + 0.7 * rng.next_f64();
        let noise = gaussian_blur(&Field::gaussian(h, w, rng), scale * 0.5);
        let mut blob = BinaryMask::empty(h, w);
        let reach = (scale * 2.5).ceil() as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let y = cy as isize + dy;
                let x = cx as isize + dx;
                if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                if !brain_region.get(y, x) {
                    continue;
                }
                let d = ((dx as f64 / (scale * ax)).powi(2) + (dy as f64 / (scale * ay)).powi(2))
                    .sqrt();
                if d + spec.irregularity * noise.get(y, x) < 1.0 {
                    blob.set(y, x, true);
                }
            }
        }
        let area = blob.area();
        if area > 0 {
            blob_areas.push((blob, area));
        }
    }
    // Union, dropping whole blobs once the area cap would be exceeded.
    let cap = (spec.max_area_frac * brain_region.area() as f64) as usize;
    let mut running = 0usize;
    for (blob, area) in blob_areas {
        if running + area > cap && running > 0 {
            break;
        }
        running += area;
        for y in 0..h {
            for x in 0..w {
                if blob.get(y, x) {
                    mask.set(y, x, true);
                }
            }
        }
        if running > cap {
            break;
        }
    }
    mask
}

/// Feathered lesion support: 1 inside the mask, falling linearly to 0 at
/// `softness` pixels from it (Euclidean distance), exactly 0 beyond.
pub fn soft_support(mask: &BinaryMask, softness: f64) -> Field {
    let (h, w) = (mask.height(), mask.width());
    let mut soft = Field::zeros(h, w);
    if mask.is_empty_mask() {
        return soft;
    }
    let reach = softness.ceil() as isize;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                soft.set(y, x, 1.0);
                continue;
            }
            if softness <= 0.0 {
                continue;
            }
            let mut best = f64::INFINITY;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let sy = y as isize + dy;
                    let sx = x as isize + dx;
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        continue;
                    }
                    if mask.get(sy as usize, sx as usize) {
                        let d = ((dy * dy + dx * dx) as f64).sqrt();
                        if d < best {
                            best = d;
                        }
                    }
                }
            }
            if best < softness {
                soft.set(y, x, 1.0 - best / softness);
            }
        }
    }
    soft
}

/// Embeds a lesion: `out = clamp(healthy + soft(mask) * shift * texture)`,
/// touching only pixels with nonzero soft support so everything else stays
/// bit-identical to the healthy input.
pub fn embed_lesion(
    healthy: &Field,
    mask: &BinaryMask,
    spec: &LesionSpec,
    rng: &mut Stream,
) -> Result<Field> {
    if !mask.same_shape_as_field(healthy) {
        return Err(Error::ShapeMismatch(
            mask.height(),
            mask.width(),
            healthy.height(),
            healthy.width(),
        ));
    }
    let softness = spec.boundary_softness.sample(rng);
    let magnitude = spec.intensity_shift.sample(rng);
    let sign = match spec.intensity_mode {
        IntensityMode::Hypo => -1.0,
        IntensityMode::Hyper => 1.0,
        IntensityMode::Mixed => {
            if rng.next_f64() < 0.5 {
                -1.0
            } else {
                1.0
            }
        }
    };
    let texture = gaussian_blur(&Field::gaussian(healthy.height(), healthy.width(), rng), 1.5);
    let soft = soft_support(mask, softness);
    let mut out = healthy.clone();
    for y in 0..healthy.height() {
        for x in 0..healthy.width() {
            let s = soft.get(y, x);
            if s > 0.0 {
                let tex = 1.0 + 0.3 * texture.get(y, x);
                let v = healthy.get(y, x) + s * sign * magnitude * tex;
                out.set(y, x, v.clamp(-1.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// The soft lesion map used by lesion-consistency guidance.
pub fn pooled_lesion_map(mask: &BinaryMask, window: usize) -> Result<Field> {
    avg_pool_same(&mask.to_field01(), window)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_deterministic_and_in_range() {
        let spec = PhantomSpec::default();
        let a = generate_healthy(&spec, &mut Stream::new(9));
        let b = generate_healthy(&spec, &mut Stream::new(9));
        assert_eq!(a, b);
        assert!(a.min_value() >= -1.0 && a.max_value() <= 1.0);
        // Brain interior should be brighter than the -1 background.
        assert!(a.get(24, 24) > -0.5);
        assert_eq!(a.get(0, 0), -1.0);
    }

    #[test]
    fn zero_texture_gives_piecewise_rings() {
        let spec = PhantomSpec {
            texture_amplitude: 0.0,
            smoothing: 0.0,
            ..PhantomSpec::default()
        };
        let img = generate_healthy(&spec, &mut Stream::new(4));
        // With no texture and no smoothing every value is one of the bands.
        let mut distinct: Vec<f64> = img.data().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert!(
            distinct.len() <= 4,
            "expected at most 4 bands, got {}",
            distinct.len()
        );
    }

    #[test]
    fn phantoms_diverse_across_seeds() {
        let spec = PhantomSpec::default();
        let imgs: Vec<Field> = (0..60)
            .map(|s| generate_healthy(&spec, &mut Stream::new(1000 + s)))
            .collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                let l1: f64 = imgs[i]
                    .data()
                    .iter()
                    .zip(imgs[j].data())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(l1 > 0.0, "phantoms {i} and {j} identical");
            }
        }
    }

    #[test]
    fn empty_blob_range_gives_empty_mask() {
        let spec = LesionSpec {
            blob_count: (0, 0),
            ..LesionSpec::default()
        };
        let region = BinaryMask::from_fn(32, 32, |y, x| {
            (y as i32 - 16).pow(2) + (x as i32 - 16).pow(2) < 100
        });
        let mask = generate_lesion_mask(&spec, &region, &mut Stream::new(1));
        assert!(mask.is_empty_mask());
    }

    #[test]
    fn lesions_confined_to_region_and_capped() {
        let spec = LesionSpec::default();
        let region = BinaryMask::from_fn(48, 48, |y, x| {
            (y as i32 - 24).pow(2) + (x as i32 - 24).pow(2) < 280
        });
        for seed in 0..50 {
            let mask = generate_lesion_mask(&spec, &region, &mut Stream::new(seed));
            for y in 0..48 {
                for x in 0..48 {
                    if mask.get(y, x) {
                        assert!(region.get(y, x), "lesion outside brain at seed {seed}");
                    }
                }
            }
            assert!(mask.area() as f64 <= spec.max_area_frac * region.area() as f64 + 1.0);
        }
    }

    #[test]
    fn lesion_areas_span_a_wide_range() {
        let spec = LesionSpec::default();
        let region = BinaryMask::from_fn(48, 48, |y, x| {
            (y as i32 - 24).pow(2) + (x as i32 - 24).pow(2) < 280
        });
        let fracs: Vec<f64> = (0..500)
            .map(|seed| {
                let mask = generate_lesion_mask(&spec, &region, &mut Stream::new(40_000 + seed));
                mask.area() as f64 / region.area() as f64
            })
            .collect();
        let lo = fracs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = fracs.iter().cloned().fold(0.0f64, f64::max);
        assert!(lo <= 0.01, "smallest lesion fraction {lo}");
        assert!(hi >= 0.25, "largest lesion fraction {hi}");
    }

    #[test]
    fn embed_empty_mask_is_identity() {
        let spec = LesionSpec::default();
        let healthy = generate_healthy(&PhantomSpec::default(), &mut Stream::new(3));
        let out = embed_lesion(
            &healthy,
            &BinaryMask::empty(48, 48),
            &spec,
            &mut Stream::new(5),
        )
        .unwrap();
        assert_eq!(out, healthy);
    }

    #[test]
    fn embed_localized_outside_soft_support() {
        let pspec = PhantomSpec::default();
        let lspec = LesionSpec::default();
        let mut rng = Stream::new(11);
        let (healthy, interior) = generate_healthy_with_interior(&pspec, &mut rng);
        let mask = generate_lesion_mask(&lspec, &interior, &mut rng);
        assert!(!mask.is_empty_mask());
        let mut embed_rng = rng.clone();
        let out = embed_lesion(&healthy, &mask, &lspec, &mut embed_rng).unwrap();
        // Soft support at the widest possible feather bounds the change set.
        let soft = soft_support(&mask, lspec.boundary_softness.hi);
        let mut changed_outside = 0;
        for y in 0..48 {
            for x in 0..48 {
                if soft.get(y, x) == 0.0 && out.get(y, x) != healthy.get(y, x) {
                    changed_outside += 1;
                }
            }
        }
        assert_eq!(changed_outside, 0);
        // And the lesion itself must visibly change the image.
        let mut changed_inside = 0;
        for y in 0..48 {
            for x in 0..48 {
                if mask.get(y, x) && out.get(y, x) != healthy.get(y, x) {
                    changed_inside += 1;
                }
            }
        }
        assert!(changed_inside > 0);
    }

    #[test]
    fn full_mask_shift_formula() {
        // Hard mask (zero softness) and a fixed regime: masked pixels move by
        // sign*magnitude*texture, clamped; everything else untouched.
        let spec = LesionSpec {
            intensity_mode: IntensityMode::Hyper,
            intensity_shift: Range::new(0.5, 0.5),
            boundary_softness: Range::new(0.0, 0.0),
            ..LesionSpec::default()
        };
        let healthy = Field::constant(16, 16, 0.0);
        let mask =
            BinaryMask::from_fn(16, 16, |y, x| (4..12).contains(&y) && (4..12).contains(&x));
        let mut rng = Stream::new(21);
        let out = embed_lesion(&healthy, &mask, &spec, &mut rng).unwrap();
        // Replay the draws embed_lesion makes, in order.
        let mut replay = Stream::new(21);
        let _softness = spec.boundary_softness.sample(&mut replay);
        let _magnitude = spec.intensity_shift.sample(&mut replay);
        let texture = gaussian_blur(&Field::gaussian(16, 16, &mut replay), 1.5);
        for y in 0..16 {
            for x in 0..16 {
                if mask.get(y, x) {
                    let expect = (0.5 * (1.0 + 0.3 * texture.get(y, x))).clamp(-1.0, 1.0);
                    assert!((out.get(y, x) - expect).abs() < 1e-12);
                } else {
                    assert_eq!(out.get(y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn soft_support_profile() {
        let mask = BinaryMask::from_fn(9, 9, |y, x| y == 4 && x == 4);
        let soft = soft_support(&mask, 2.0);
        assert_eq!(soft.get(4, 4), 1.0);
        assert!((soft.get(4, 5) - 0.5).abs() < 1e-12);
        assert_eq!(soft.get(4, 7), 0.0);
        // Diagonal neighbor at distance sqrt(2).
        assert!((soft.get(5, 5) - (1.0 - std::f64::consts::SQRT_2 / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn pooled_lesion_map_matches_pool() {
        let mask = BinaryMask::from_fn(9, 9, |y, x| y == 4 && x == 4);
        let pooled = pooled_lesion_map(&mask, 3).unwrap();
        assert!((pooled.get(4, 4) - 1.0 / 9.0).abs() < 1e-15);
    }
}
