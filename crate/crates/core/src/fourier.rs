//! Centered orthonormal 2D Fourier transforms and the multi-coil
//! acquisition operators.
//!
//! Images are stored row-major. "Centered" means the zero frequency of a
//! transformed grid sits at `(height / 2, width / 2)`, and both directions
//! are scaled by `1 / sqrt(height * width)` so that the forward and inverse
//! transforms are unitary and adjoint to each other.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

/// A `height x width` grid of complex samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

/// A `height x width` grid of real samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Per-coil k-space (or per-coil image) data. All coils share one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoilKSpace {
    pub coils: Vec<ComplexImage>,
}

/// Complex coil sensitivity maps `S_i`.
///
/// When `normalized` is set, `sum_i |S_i(p)|^2 = 1` at every pixel with
/// nonzero support.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSensitivities {
    pub maps: Vec<ComplexImage>,
    pub normalized: bool,
}

impl ComplexImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} samples for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_real(img: &RealImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn abs(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|z| z.norm()).collect(),
        }
    }
}

impl RealImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} samples for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl MultiCoilKSpace {
    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coils.first().map(|c| c.shape()).unwrap_or((0, 0))
    }

    pub fn zeros(n_coils: usize, height: usize, width: usize) -> Self {
        Self {
            coils: vec![ComplexImage::zeros(height, width); n_coils],
        }
    }

    /// Checks the coil count and that every coil has one common shape.
    pub fn validate(&self) -> Result<()> {
        let shape = match self.coils.first() {
            Some(c) => c.shape(),
            None => return Err(Error::Dimension("k-space has no coils".into())),
        };
        if self.coils.iter().any(|c| c.shape() != shape) {
            return Err(Error::Dimension("coils differ in shape".into()));
        }
        Ok(())
    }
}

impl CoilSensitivities {
    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.maps.first().map(|c| c.shape()).unwrap_or((0, 0))
    }

    /// Rescales the maps so that `sum_i |S_i|^2 = 1` wherever the sum
    /// exceeds `eps`; pixels below it are set to zero in every coil.
    pub fn normalize(&mut self, eps: f64) {
        let (h, w) = self.shape();
        for p in 0..h * w {
            let energy: f64 = self.maps.iter().map(|m| m.data[p].norm_sqr()).sum();
            let rss = energy.sqrt();
            for m in &mut self.maps {
                m.data[p] = if rss > eps {
                    m.data[p] / rss
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
        }
        self.normalized = true;
    }
}

/// `sum conj(a) * b`, the complex inner product used by the adjoint tests.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

/// Centered, orthonormal 2D transform on a raw row-major buffer.
///
/// Implements `fftshift(F(ifftshift(x))) / sqrt(hw)` without separate shift
/// passes: the input shift is folded into the gather and the output shift
/// into the scatter.
pub(crate) fn transform2c(
    input: &[Complex64],
    height: usize,
    width: usize,
    direction: FftDirection,
) -> Vec<Complex64> {
    debug_assert_eq!(input.len(), height * width);
    if height == 0 || width == 0 {
        return Vec::new();
    }
    let row_fft = plan(width, direction);
    let col_fft = plan(height, direction);
    let (h2, w2) = (height / 2, width / 2);
    // ifftshift: out[i] = in[(i + n/2) % n]
    let mut buf = vec![Complex64::new(0.0, 0.0); height * width];
    for r in 0..height {
        let src_r = (r + h2) % height;
        let src = &input[src_r * width..(src_r + 1) * width];
        let dst = &mut buf[r * width..(r + 1) * width];
        dst[..width - w2].copy_from_slice(&src[w2..]);
        dst[width - w2..].copy_from_slice(&src[..w2]);
    }
    let scratch_len = row_fft
        .get_inplace_scratch_len()
        .max(col_fft.get_inplace_scratch_len());
    let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
    row_fft.process_with_scratch(&mut buf, &mut scratch);

    let mut out = vec![Complex64::new(0.0, 0.0); height * width];
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    let scale = 1.0 / ((height * width) as f64).sqrt();
    // fftshift: out[(i + n/2) % n] = in[i]
    for c in 0..width {
        for r in 0..height {
            column[r] = buf[r * width + c];
        }
        col_fft.process_with_scratch(&mut column, &mut scratch);
        let oc = (c + w2) % width;
        for (r, v) in column.iter().enumerate() {
            let or = (r + h2) % height;
            out[or * width + oc] = v * scale;
        }
    }
    out
}

fn check_finite(img: &ComplexImage, what: &str) -> Result<()> {
    if img.data.len() != img.height * img.width {
        return Err(Error::Dimension(format!(
            "{what}: buffer length does not match shape"
        )));
    }
    if !img.is_finite() {
        return Err(Error::InvalidInput(format!("{what}: non-finite sample")));
    }
    Ok(())
}

/// Centered orthonormal forward transform (image to k-space).
pub fn fft2c(img: &ComplexImage) -> Result<ComplexImage> {
    check_finite(img, "fft2c")?;
    Ok(ComplexImage {
        height: img.height,
        width: img.width,
        data: transform2c(&img.data, img.height, img.width, FftDirection::Forward),
    })
}

/// Centered orthonormal inverse transform (k-space to image).
pub fn ifft2c(k: &ComplexImage) -> Result<ComplexImage> {
    check_finite(k, "ifft2c")?;
    Ok(ComplexImage {
        height: k.height,
        width: k.width,
        data: transform2c(&k.data, k.height, k.width, FftDirection::Inverse),
    })
}

fn check_sens_shape(shape: (usize, usize), sens: &CoilSensitivities) -> Result<()> {
    if sens.maps.is_empty() {
        return Err(Error::Dimension("no sensitivity maps".into()));
    }
    if sens.maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::Dimension(format!(
            "sensitivity maps do not match image shape {}x{}",
            shape.0, shape.1
        )));
    }
    Ok(())
}

/// Per-coil images `S_i * x`.
pub fn expand(x: &ComplexImage, sens: &CoilSensitivities) -> Result<Vec<ComplexImage>> {
    check_sens_shape(x.shape(), sens)?;
    Ok(sens
        .maps
        .iter()
        .map(|s| ComplexImage {
            height: x.height,
            width: x.width,
            data: s.data.iter().zip(&x.data).map(|(a, b)| a * b).collect(),
        })
        .collect())
}

/// Coil combination `sum_i conj(S_i) * x_i`, the adjoint of [`expand`].
pub fn reduce(coil_imgs: &[ComplexImage], sens: &CoilSensitivities) -> Result<ComplexImage> {
    let first = coil_imgs
        .first()
        .ok_or_else(|| Error::Dimension("no coil images".into()))?;
    check_sens_shape(first.shape(), sens)?;
    if coil_imgs.len() != sens.n_coils() {
        return Err(Error::Dimension(format!(
            "{} coil images for {} sensitivity maps",
            coil_imgs.len(),
            sens.n_coils()
        )));
    }
    if coil_imgs.iter().any(|c| c.shape() != first.shape()) {
        return Err(Error::Dimension("coil images differ in shape".into()));
    }
    let mut out = ComplexImage::zeros(first.height, first.width);
    for (img, s) in coil_imgs.iter().zip(&sens.maps) {
        for ((o, a), b) in out.data.iter_mut().zip(&s.data).zip(&img.data) {
            *o += a.conj() * b;
        }
    }
    Ok(out)
}

/// Simulated acquisition `k_i = F(S_i x) + noise`, with i.i.d. Gaussian
/// noise of standard deviation `noise_std` on each real and imaginary part.
pub fn acquire(
    x: &ComplexImage,
    sens: &CoilSensitivities,
    noise_std: f64,
    seed: u64,
) -> Result<MultiCoilKSpace> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::config(
            "noise_std",
            format!("must be >= 0, got {noise_std}"),
        ));
    }
    check_finite(x, "acquire")?;
    let coil_imgs = expand(x, sens)?;
    let mut coils = coil_imgs.iter().map(fft2c).collect::<Result<Vec<_>>>()?;
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std).expect("validated std");
        for coil in &mut coils {
            for z in &mut coil.data {
                let re = normal.sample(&mut rng);
                let im = normal.sample(&mut rng);
                *z += Complex64::new(re, im);
            }
        }
    }
    Ok(MultiCoilKSpace { coils })
}

/// Root-sum-of-squares coil combination.
pub fn rss(coil_imgs: &[ComplexImage]) -> Result<RealImage> {
    let first = coil_imgs
        .first()
        .ok_or_else(|| Error::Dimension("rss of an empty coil list".into()))?;
    if coil_imgs.iter().any(|c| c.shape() != first.shape()) {
        return Err(Error::Dimension("coil images differ in shape".into()));
    }
    let mut energy = vec![0.0; first.data.len()];
    for img in coil_imgs {
        for (e, z) in energy.iter_mut().zip(&img.data) {
            *e += z.norm_sqr();
        }
    }
    Ok(RealImage {
        height: first.height,
        width: first.width,
        data: energy.into_iter().map(f64::sqrt).collect(),
    })
}

/// Inverse-transforms every coil.
pub fn coil_images(k: &MultiCoilKSpace) -> Result<Vec<ComplexImage>> {
    k.coils.iter().map(ifft2c).collect()
}

/// RSS of the inverse transform of (possibly masked) k-space; the
/// zero-filled reconstruction when the input is undersampled.
pub fn zero_filled(k: &MultiCoilKSpace) -> Result<RealImage> {
    rss(&coil_images(k)?)
}
