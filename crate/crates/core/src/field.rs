//! Dense 2D grids and the elementwise/windowed kernels built on them.
//!
//! `Field` is the carrier for everything spatial: images, masks relaxed to
//! diffusion space, noises, estimates, and guidance weights. All kernels are
//! pure; identical inputs give bit-identical outputs.

use crate::rng::Stream;
use crate::{Error, Result};

/// A row-major grid of `f64` intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(height: usize, width: usize) -> Self {
        Field {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Field {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidRange(format!(
                "data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Field {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Field {
            height,
            width,
            data,
        }
    }

    /// i.i.d. standard-normal field drawn from `rng`.
    pub fn gaussian(height: usize, width: usize, rng: &mut Stream) -> Self {
        let mut f = Field::zeros(height, width);
        rng.fill_gaussian(&mut f.data);
        f
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, other: &Field) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check_shape(other)?;
        Ok(Field {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Field {
        self.map(|v| v * s)
    }

    pub fn exp(&self) -> Field {
        self.map(f64::exp)
    }

    pub fn abs(&self) -> Field {
        self.map(f64::abs)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Field {
        self.map(|v| v.clamp(lo, hi))
    }

    /// a*self + b*other.
    pub fn axpby(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Threshold into a binary mask (`value > threshold` -> 1).
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| u8::from(v > threshold))
                .collect(),
        }
    }
}

/// A {0,1}-valued grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.area() == 0
    }

    /// Mask as a {0,1}-valued field.
    pub fn to_field01(&self) -> Field {
        Field {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// Mask in diffusion space: lesion pixels +1, background -1.
    pub fn to_diffusion_field(&self) -> Field {
        Field {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| if v != 0 { 1.0 } else { -1.0 })
                .collect(),
        }
    }

    pub fn same_shape_as_field(&self, f: &Field) -> bool {
        self.height == f.height() && self.width == f.width()
    }
}

/// Average pooling with output size equal to input size. Windows are
/// zero-padded at the borders and always divided by `window^2`, so for a
/// [0,1] input the output stays in [0,1] and tapers toward the borders.
pub fn avg_pool_same(input: &Field, window: usize) -> Result<Field> {
    let (h, w) = (input.height(), input.width());
    if window % 2 == 0 || window == 0 || window > h.min(w) {
        return Err(Error::InvalidWindow {
            window,
            height: h,
            width: w,
        });
    }
    let r = window / 2;
    // Integral image, (h+1) x (w+1).
    let iw = w + 1;
    let mut integral = vec![0.0f64; (h + 1) * iw];
    for y in 0..h {
        let mut row_sum = 0.0;
        for x in 0..w {
            row_sum += input.get(y, x);
            integral[(y + 1) * iw + (x + 1)] = integral[y * iw + (x + 1)] + row_sum;
        }
    }
    let divisor = (window * window) as f64;
    let mut out = Field::zeros(h, w);
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let sum = integral[y1 * iw + x1] - integral[y0 * iw + x1] - integral[y1 * iw + x0]
                + integral[y0 * iw + x0];
            out.set(y, x, sum / divisor);
        }
    }
    Ok(out)
}
