//! Unrolled k-space reconstruction network.
//!
//! Each cascade applies
//!
//! ```text
//! k_{m+1} = k_m - eta_m * M (k_m - k_tilde) + F E CNN(R F^-1 k_m)
//! ```
//!
//! where `F` is the centered orthonormal transform, `E`/`R` the coil
//! expand/reduce operators and `CNN` a small zero-padded convolution stack
//! on the real/imaginary planes of the coil-combined image. The output is the
//! RSS of the final cascade's coil images.
//!
//! Gradients are computed by hand in reverse mode. Complex quantities carry
//! gradients as `dL/dRe + i dL/dIm`, so a complex-linear map `A` propagates
//! gradients through its adjoint `A^H`.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftDirection;

use crate::binio::{self, Cursor};
use crate::error::{Error, Result};
use crate::fourier::{
    self, transform2c, CoilSensitivities, ComplexImage, MultiCoilKSpace, RealImage,
};
use crate::mask::SamplingMask;

/// Division guard for RSS normalization and the RSS backward pass.
pub const EPS_DIV: f64 = 1e-12;

const WEIGHTS_MAGIC: &[u8; 4] = b"NPBW";
const WEIGHTS_VERSION: u16 = 1;

/// Network shape. `layers` counts convolutions per cascade; every layer but
/// the last is followed by a ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub cascades: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            cascades: 3,
            channels: 8,
            layers: 3,
            kernel: 3,
        }
    }
}

/// Image planes fed to and produced by the CNN (real, imaginary).
pub const IO_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    c_in: usize,
    c_out: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 || self.layers < 1 || self.kernel < 1 {
            return Err(Error::config(
                "channels",
                "channels, layers and kernel must all be >= 1",
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("kernel", "kernel size must be odd"));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<LayerShape> {
        (0..self.layers)
            .map(|l| LayerShape {
                c_in: if l == 0 { IO_CHANNELS } else { self.channels },
                c_out: if l + 1 == self.layers {
                    IO_CHANNELS
                } else {
                    self.channels
                },
            })
            .collect()
    }

    /// Parameters of one cascade: its data-consistency weight followed by
    /// each layer's weights and biases.
    pub fn cascade_len(&self) -> usize {
        1 + self
            .layer_shapes()
            .iter()
            .map(|s| s.c_out * s.c_in * self.kernel * self.kernel + s.c_out)
            .sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.cascades * self.cascade_len()
    }

    /// Named segments of the flat parameter vector, in storage order.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut offset = 0;
        let kk = self.kernel * self.kernel;
        for m in 0..self.cascades {
            out.push(Segment {
                cascade: m,
                kind: SegmentKind::DcWeight,
                offset,
                len: 1,
            });
            offset += 1;
            for (l, s) in self.layer_shapes().into_iter().enumerate() {
                let wlen = s.c_out * s.c_in * kk;
                out.push(Segment {
                    cascade: m,
                    kind: SegmentKind::ConvWeight(l),
                    offset,
                    len: wlen,
                });
                offset += wlen;
                out.push(Segment {
                    cascade: m,
                    kind: SegmentKind::ConvBias(l),
                    offset,
                    len: s.c_out,
                });
                offset += s.c_out;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    DcWeight,
    ConvWeight(usize),
    ConvBias(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub cascade: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn name(&self) -> String {
        match self.kind {
            SegmentKind::DcWeight => format!("cascade{}.dc_weight", self.cascade),
            SegmentKind::ConvWeight(l) => format!("cascade{}.conv{}.weight", self.cascade, l),
            SegmentKind::ConvBias(l) => format!("cascade{}.conv{}.bias", self.cascade, l),
        }
    }
}

/// Flat parameter vector plus the architecture that gives it structure.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: ArchConfig,
    pub values: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: ArchConfig) -> Self {
        Self {
            arch,
            values: vec![0.0; arch.param_count()],
        }
    }

    fn cascade(&self, m: usize) -> &[f64] {
        let len = self.arch.cascade_len();
        &self.values[m * len..(m + 1) * len]
    }

    pub fn dc_weight(&self, m: usize) -> f64 {
        self.cascade(m)[0]
    }

    pub fn set_dc_weight(&mut self, m: usize, eta: f64) {
        let len = self.arch.cascade_len();
        self.values[m * len] = eta;
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.values.len() != self.arch.param_count() {
            return Err(Error::Invariant(format!(
                "{} parameters for an architecture of {}",
                self.values.len(),
                self.arch.param_count()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(())
    }

    /// `NPBW` checkpoint bytes: magic, u16 version, u32 cascades, channels,
    /// layers, kernel, u64 parameter count, f64 values. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(30 + 8 * self.values.len());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let a = self.arch;
        for v in [a.cascades, a.channels, a.layers, a.kernel] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take("magic", 4)? != WEIGHTS_MAGIC {
            return Err(Error::format("magic", "not an NPBW checkpoint"));
        }
        let version = cur.u16("version")?;
        if version != WEIGHTS_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let arch = ArchConfig {
            cascades: cur.u32("cascades")? as usize,
            channels: cur.u32("channels")? as usize,
            layers: cur.u32("layers")? as usize,
            kernel: cur.u32("kernel")? as usize,
        };
        arch.validate()
            .map_err(|e| Error::format("arch", e.to_string()))?;
        let n = cur.u64("param_count")? as usize;
        if n != arch.param_count() {
            return Err(Error::format(
                "param_count",
                format!("{n} values, architecture needs {}", arch.param_count()),
            ));
        }
        let values = (0..n)
            .map(|_| cur.f64("values"))
            .collect::<Result<Vec<_>>>()?;
        cur.finish("values")?;
        Ok(Self { arch, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }
}

/// Uniform fan-in initialization: weights in `+-1/sqrt(c_in k^2)`, zero
/// biases, unit data-consistency weights.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<NetworkParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros(*arch);
    let shapes = arch.layer_shapes();
    for seg in arch.segments() {
        let slot = &mut params.values[seg.offset..seg.offset + seg.len];
        match seg.kind {
            SegmentKind::DcWeight => slot[0] = 1.0,
            SegmentKind::ConvWeight(l) => {
                let bound = 1.0 / ((shapes[l].c_in * arch.kernel * arch.kernel) as f64).sqrt();
                slot.iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
            }
            SegmentKind::ConvBias(_) => {}
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Convolution stack

/// Valid output range `[lo, hi)` along an axis of length `n` for a tap at
/// offset `d` (input index = output index + d).
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// `out[o] += sum_c w[o][c] (*) inp[c]`, zero-padded cross-correlation.
#[allow(clippy::too_many_arguments)]
fn conv_forward_acc(
    inp: &[f64],
    weights: &[f64],
    out: &mut [f64],
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for o in 0..c_out {
        let out_plane = &mut out[o * hw..(o + 1) * hw];
        for c in 0..c_in {
            let in_plane = &inp[c * hw..(c + 1) * hw];
            for i in 0..k {
                let dy = i as isize - p;
                let (y0, y1) = tap_range(h, dy);
                for j in 0..k {
                    let wt = weights[((o * c_in + c) * k + i) * k + j];
                    if wt == 0.0 {
                        continue;
                    }
                    let dx = j as isize - p;
                    let (x0, x1) = tap_range(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &in_plane[sy * w + (x0 as isize + dx) as usize
                            ..sy * w + (x1 as isize + dx) as usize];
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv_forward_acc`]: accumulates into `grad_in` and
/// `grad_w` given `grad_out`.
#[allow(clippy::too_many_arguments)]
fn conv_backward_acc(
    inp: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_w: &mut [f64],
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for o in 0..c_out {
        let g_plane = &grad_out[o * hw..(o + 1) * hw];
        for c in 0..c_in {
            let in_plane = &inp[c * hw..(c + 1) * hw];
            for i in 0..k {
                let dy = i as isize - p;
                let (y0, y1) = tap_range(h, dy);
                for j in 0..k {
                    let dx = j as isize - p;
                    let (x0, x1) = tap_range(w, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &in_plane[sy * w + (x0 as isize + dx) as usize
                            ..sy * w + (x1 as isize + dx) as usize];
                        let g = &g_plane[y * w + x0..y * w + x1];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad_w[((o * c_in + c) * k + i) * k + j] += acc;
                }
            }
        }
    }
    if let Some(grad_in) = grad_in {
        for c in 0..c_in {
            let gi_plane = &mut grad_in[c * hw..(c + 1) * hw];
            for o in 0..c_out {
                let g_plane = &grad_out[o * hw..(o + 1) * hw];
                for i in 0..k {
                    let dy = i as isize - p;
                    let (y0, y1) = tap_range(h, dy);
                    for j in 0..k {
                        let wt = weights[((o * c_in + c) * k + i) * k + j];
                        if wt == 0.0 {
                            continue;
                        }
                        let dx = j as isize - p;
                        let (x0, x1) = tap_range(w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let dst = &mut gi_plane[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            let g = &g_plane[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(g) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Activations kept by [`cnn_apply`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnCache {
    /// Input of every layer; entries after the first are post-ReLU.
    inputs: Vec<Vec<f64>>,
    height: usize,
    width: usize,
}

/// Applies the convolution stack of one cascade.
///
/// `segment` is the cascade's parameter slice without its leading
/// data-consistency weight; `input` holds two `height x width` planes.
pub fn cnn_apply(
    arch: &ArchConfig,
    segment: &[f64],
    input: &[f64],
    height: usize,
    width: usize,
) -> Result<(Vec<f64>, CnnCache)> {
    let hw = height * width;
    if input.len() != IO_CHANNELS * hw {
        return Err(Error::Dimension(format!(
            "CNN input has {} values, expected {} planes of {height}x{width}",
            input.len(),
            IO_CHANNELS
        )));
    }
    if segment.len() + 1 != arch.cascade_len() {
        return Err(Error::Dimension(
            "CNN parameter segment has the wrong length".into(),
        ));
    }
    let k = arch.kernel;
    let shapes = arch.layer_shapes();
    let mut inputs = Vec::with_capacity(shapes.len());
    let mut current = input.to_vec();
    let mut offset = 0;
    for (l, s) in shapes.iter().enumerate() {
        let wlen = s.c_out * s.c_in * k * k;
        let weights = &segment[offset..offset + wlen];
        let bias = &segment[offset + wlen..offset + wlen + s.c_out];
        offset += wlen + s.c_out;
        let mut out = vec![0.0; s.c_out * hw];
        for (o, b) in bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *b);
        }
        conv_forward_acc(
            &current, weights, &mut out, s.c_in, s.c_out, k, height, width,
        );
        if l + 1 < shapes.len() {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        inputs.push(std::mem::replace(&mut current, out));
    }
    Ok((
        current,
        CnnCache {
            inputs,
            height,
            width,
        },
    ))
}

/// Backward pass of [`cnn_apply`]. Returns the input gradient and the
/// gradient of `segment`.
pub fn cnn_backward(
    arch: &ArchConfig,
    segment: &[f64],
    cache: &CnnCache,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (cache.height, cache.width);
    let hw = h * w;
    if grad_out.len() != IO_CHANNELS * hw {
        return Err(Error::Dimension(
            "CNN output gradient has the wrong size".into(),
        ));
    }
    let k = arch.kernel;
    let shapes = arch.layer_shapes();
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for s in &shapes {
        offsets.push(offset);
        offset += s.c_out * s.c_in * k * k + s.c_out;
    }
    let mut grad_seg = vec![0.0; segment.len()];
    let mut grad = grad_out.to_vec();
    for l in (0..shapes.len()).rev() {
        let s = shapes[l];
        let wlen = s.c_out * s.c_in * k * k;
        let off = offsets[l];
        for o in 0..s.c_out {
            grad_seg[off + wlen + o] += grad[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        let mut grad_in = vec![0.0; s.c_in * hw];
        conv_backward_acc(
            &cache.inputs[l],
            &segment[off..off + wlen],
            &grad,
            Some(&mut grad_in),
            &mut grad_seg[off..off + wlen],
            s.c_in,
            s.c_out,
            k,
            h,
            w,
        );
        if l > 0 {
            // layer input is a post-ReLU activation
            for (g, a) in grad_in.iter_mut().zip(&cache.inputs[l]) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        grad = grad_in;
    }
    Ok((grad, grad_seg))
}

// ---------------------------------------------------------------------------
// Sensitivity estimation

/// Where cascades take their coil sensitivities from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivitySource {
    /// Estimated from the fully sampled k-space center of the input.
    Estimated,
    /// The ground-truth maps stored with the slice.
    True,
}

/// The fully sampled calibration region around the k-space center, as a
/// row-major indicator.
fn calibration_region(mask: &SamplingMask) -> Result<Vec<bool>> {
    let (h, w) = (mask.height, mask.width);
    let (cy, cx) = (h / 2, w / 2);
    let mut region = vec![false; h * w];
    if mask.is_column_constant() {
        if !mask.is_sampled(0, cx) {
            return Err(Error::config("mask", "center column is not sampled"));
        }
        let mut lo = cx;
        while lo > 0 && mask.is_sampled(0, lo - 1) {
            lo -= 1;
        }
        let mut hi = cx + 1;
        while hi < w && mask.is_sampled(0, hi) {
            hi += 1;
        }
        for r in 0..h {
            region[r * w + lo..r * w + hi]
                .iter_mut()
                .for_each(|v| *v = true);
        }
        return Ok(region);
    }
    // largest fully sampled centered square
    let mut half = 0;
    loop {
        let next = half + 1;
        if cy < next || cx < next || cy + next >= h || cx + next >= w {
            break;
        }
        let full =
            (cy - next..=cy + next).all(|r| (cx - next..=cx + next).all(|c| mask.is_sampled(r, c)));
        if !full {
            break;
        }
        half = next;
    }
    if half == 0 {
        return Err(Error::config(
            "mask",
            "no fully sampled calibration block at the k-space center",
        ));
    }
    for r in cy - half..=cy + half {
        for c in cx - half..=cx + half {
            region[r * w + c] = true;
        }
    }
    Ok(region)
}

/// Estimates normalized maps from the calibration region: each coil's
/// low-resolution image divided by their RSS (zero where the RSS falls below
/// [`EPS_DIV`]).
pub fn estimate_sensitivities(
    masked_k: &MultiCoilKSpace,
    mask: &SamplingMask,
) -> Result<CoilSensitivities> {
    masked_k.validate()?;
    if masked_k.shape() != (mask.height, mask.width) {
        return Err(Error::Dimension("k-space and mask shapes differ".into()));
    }
    let region = calibration_region(mask)?;
    let maps = masked_k
        .coils
        .iter()
        .map(|coil| {
            let low: Vec<Complex64> = coil
                .data
                .iter()
                .zip(&region)
                .map(|(z, &keep)| if keep { *z } else { Complex64::new(0.0, 0.0) })
                .collect();
            ComplexImage {
                height: coil.height,
                width: coil.width,
                data: transform2c(&low, coil.height, coil.width, FftDirection::Inverse),
            }
        })
        .collect();
    let mut sens = CoilSensitivities {
        maps,
        normalized: false,
    };
    sens.normalize(EPS_DIV);
    Ok(sens)
}

// ---------------------------------------------------------------------------
// Cascades

type Coils = Vec<Vec<Complex64>>;

fn ifft_coils(k: &Coils, h: usize, w: usize) -> Coils {
    k.iter()
        .map(|c| transform2c(c, h, w, FftDirection::Inverse))
        .collect()
}

fn fft_coils(x: &Coils, h: usize, w: usize) -> Coils {
    x.iter()
        .map(|c| transform2c(c, h, w, FftDirection::Forward))
        .collect()
}

/// `sum_i conj(S_i) x_i`
fn reduce_raw(coils: &Coils, sens: &CoilSensitivities) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); coils[0].len()];
    for (x, s) in coils.iter().zip(&sens.maps) {
        for ((o, a), b) in out.iter_mut().zip(&s.data).zip(x) {
            *o += a.conj() * b;
        }
    }
    out
}

fn expand_raw(x: &[Complex64], sens: &CoilSensitivities) -> Coils {
    sens.maps
        .iter()
        .map(|s| s.data.iter().zip(x).map(|(a, b)| a * b).collect())
        .collect()
}

fn to_planes(x: &[Complex64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; 2 * n];
    for (i, z) in x.iter().enumerate() {
        out[i] = z.re;
        out[n + i] = z.im;
    }
    out
}

fn from_planes(p: &[f64]) -> Vec<Complex64> {
    let n = p.len() / 2;
    (0..n).map(|i| Complex64::new(p[i], p[n + i])).collect()
}

/// Cached state of one cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeCache {
    k_in: Coils,
    cnn: CnnCache,
}

fn check_inputs(
    k: &MultiCoilKSpace,
    k_tilde: &MultiCoilKSpace,
    mask: &SamplingMask,
    sens: &CoilSensitivities,
) -> Result<()> {
    k.validate()?;
    k_tilde.validate()?;
    let shape = k.shape();
    if k_tilde.shape() != shape || k_tilde.n_coils() != k.n_coils() {
        return Err(Error::Dimension(
            "cascade input and measured k-space differ".into(),
        ));
    }
    if (mask.height, mask.width) != shape {
        return Err(Error::Dimension("mask shape differs from k-space".into()));
    }
    if sens.n_coils() != k.n_coils() || sens.maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::Dimension(
            "sensitivities do not match k-space".into(),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cascade_raw(
    k: &Coils,
    k_tilde: &Coils,
    mask: &[f64],
    sens: &CoilSensitivities,
    arch: &ArchConfig,
    cascade_params: &[f64],
    h: usize,
    w: usize,
) -> Result<(Coils, CascadeCache)> {
    let eta = cascade_params[0];
    let x = reduce_raw(&ifft_coils(k, h, w), sens);
    let (y, cnn) = cnn_apply(arch, &cascade_params[1..], &to_planes(&x), h, w)?;
    let g = fft_coils(&expand_raw(&from_planes(&y), sens), h, w);
    let next = k
        .iter()
        .zip(k_tilde)
        .zip(&g)
        .map(|((kc, kt), gc)| {
            kc.iter()
                .zip(kt)
                .zip(mask)
                .zip(gc)
                .map(|(((a, b), m), gv)| a - (a - b) * (eta * m) + gv)
                .collect()
        })
        .collect();
    Ok((
        next,
        CascadeCache {
            k_in: k.clone(),
            cnn,
        },
    ))
}

/// One cascade: data-consistency step plus the image-space refinement.
pub fn cascade_forward(
    k: &MultiCoilKSpace,
    k_tilde: &MultiCoilKSpace,
    mask: &SamplingMask,
    sens: &CoilSensitivities,
    arch: &ArchConfig,
    cascade_params: &[f64],
) -> Result<(MultiCoilKSpace, CascadeCache)> {
    check_inputs(k, k_tilde, mask, sens)?;
    if cascade_params.len() != arch.cascade_len() {
        return Err(Error::Dimension(
            "cascade parameter slice has the wrong length".into(),
        ));
    }
    let (h, w) = k.shape();
    let raw = |m: &MultiCoilKSpace| -> Coils { m.coils.iter().map(|c| c.data.clone()).collect() };
    let (next, cache) = cascade_raw(
        &raw(k),
        &raw(k_tilde),
        &mask.weights(),
        sens,
        arch,
        cascade_params,
        h,
        w,
    )?;
    Ok((coils_to_kspace(next, h, w), cache))
}

fn coils_to_kspace(c: Coils, h: usize, w: usize) -> MultiCoilKSpace {
    MultiCoilKSpace {
        coils: c
            .into_iter()
            .map(|data| ComplexImage {
                height: h,
                width: w,
                data,
            })
            .collect(),
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    params: NetworkParams,
    height: usize,
    width: usize,
    k_tilde: Coils,
    mask: Vec<f64>,
    sens: CoilSensitivities,
    cascades: Vec<CascadeCache>,
    final_coils: Coils,
    recon: RealImage,
}

impl ForwardTape {
    pub fn recon(&self) -> &RealImage {
        &self.recon
    }

    /// Sign pattern of every hidden ReLU activation, in cascade order.
    /// Finite-difference checks use it to detect steps that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.cascades
            .iter()
            .flat_map(|c| c.cnn.inputs[1..].iter().flatten().map(|v| *v > 0.0))
            .collect()
    }

    /// The k-space after the last cascade.
    pub fn final_kspace(&self) -> MultiCoilKSpace {
        coils_to_kspace(
            fft_coils(&self.final_coils, self.height, self.width),
            self.height,
            self.width,
        )
    }
}

/// Runs all cascades from the masked k-space and returns the RSS
/// reconstruction with its tape.
pub fn forward(
    masked_k: &MultiCoilKSpace,
    mask: &SamplingMask,
    sens: &CoilSensitivities,
    params: &NetworkParams,
) -> Result<(RealImage, ForwardTape)> {
    params.validate()?;
    check_inputs(masked_k, masked_k, mask, sens)?;
    let (h, w) = masked_k.shape();
    let arch = params.arch;
    let k_tilde: Coils = masked_k.coils.iter().map(|c| c.data.clone()).collect();
    let mask_w = mask.weights();
    let mut k = k_tilde.clone();
    let mut caches = Vec::with_capacity(arch.cascades);
    for m in 0..arch.cascades {
        let (next, cache) =
            cascade_raw(&k, &k_tilde, &mask_w, sens, &arch, params.cascade(m), h, w)?;
        caches.push(cache);
        k = next;
    }
    let final_coils = ifft_coils(&k, h, w);
    let mut recon = RealImage::zeros(h, w);
    for c in &final_coils {
        for (r, z) in recon.data.iter_mut().zip(c) {
            *r += z.norm_sqr();
        }
    }
    recon.data.iter_mut().for_each(|v| *v = v.sqrt());
    if recon.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite reconstruction".into()));
    }
    let tape = ForwardTape {
        params: params.clone(),
        height: h,
        width: w,
        k_tilde,
        mask: mask_w,
        sens: sens.clone(),
        cascades: caches,
        final_coils,
        recon: recon.clone(),
    };
    Ok((recon, tape))
}

/// Reconstruction only, discarding the tape.
pub fn predict(
    masked_k: &MultiCoilKSpace,
    mask: &SamplingMask,
    sens: &CoilSensitivities,
    params: &NetworkParams,
) -> Result<RealImage> {
    forward(masked_k, mask, sens, params).map(|(r, _)| r)
}

/// Gradient of `<grad_recon, recon>` with respect to every parameter.
pub fn backward(
    tape: &ForwardTape,
    params: &NetworkParams,
    grad_recon: &RealImage,
) -> Result<Vec<f64>> {
    if *params != tape.params {
        return Err(Error::Invariant(
            "parameters differ from those of the forward call".into(),
        ));
    }
    let (h, w) = (tape.height, tape.width);
    if grad_recon.shape() != (h, w) || grad_recon.data.len() != h * w {
        return Err(Error::Dimension(
            "reconstruction gradient has the wrong shape".into(),
        ));
    }
    let arch = params.arch;
    let mut grad = vec![0.0; params.values.len()];

    // RSS: d r / d c_i = c_i / r
    let g_coils: Coils = tape
        .final_coils
        .iter()
        .map(|c| {
            c.iter()
                .zip(&tape.recon.data)
                .zip(&grad_recon.data)
                .map(|((z, &r), &g)| {
                    if r > EPS_DIV {
                        z * (g / r)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
                .collect()
        })
        .collect();
    let mut g_k = fft_coils(&g_coils, h, w);

    let clen = arch.cascade_len();
    for m in (0..arch.cascades).rev() {
        let cache = &tape.cascades[m];
        let cparams = params.cascade(m);
        let eta = cparams[0];

        let mut d_eta = 0.0;
        for ((gk, kin), kt) in g_k.iter().zip(&cache.k_in).zip(&tape.k_tilde) {
            for (((g, a), b), mw) in gk.iter().zip(kin).zip(kt).zip(&tape.mask) {
                if *mw != 0.0 {
                    d_eta -= (g.conj() * (a - b) * mw).re;
                }
            }
        }
        grad[m * clen] = d_eta;

        let g_y = reduce_raw(&ifft_coils(&g_k, h, w), &tape.sens);
        let (g_x, g_seg) = cnn_backward(&arch, &cparams[1..], &cache.cnn, &to_planes(&g_y))?;
        grad[m * clen + 1..(m + 1) * clen].copy_from_slice(&g_seg);
        let g_from_cnn = fft_coils(&expand_raw(&from_planes(&g_x), &tape.sens), h, w);

        for (gk, gc) in g_k.iter_mut().zip(&g_from_cnn) {
            for ((g, mw), extra) in gk.iter_mut().zip(&tape.mask).zip(gc) {
                *g = *g - *g * (eta * mw) + extra;
            }
        }
    }
    Ok(grad)
}

/// Picks the sensitivity maps used for a reconstruction.
pub fn sensitivities_for(
    source: SensitivitySource,
    masked_k: &MultiCoilKSpace,
    mask: &SamplingMask,
    true_maps: Option<&CoilSensitivities>,
) -> Result<CoilSensitivities> {
    match source {
        SensitivitySource::Estimated => estimate_sensitivities(masked_k, mask),
        SensitivitySource::True => true_maps.cloned().ok_or_else(|| {
            Error::InvalidInput("true sensitivity maps requested but not available".into())
        }),
    }
}

/// Zero-filled RSS reconstruction of masked k-space.
pub fn zero_filled(masked_k: &MultiCoilKSpace) -> Result<RealImage> {
    fourier::zero_filled(masked_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::random_cartesian;
    use crate::phantom::{DataConfig, PhantomFamily, ReconSlice};

    fn random_kspace(nc: usize, h: usize, w: usize, seed: u64) -> MultiCoilKSpace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiCoilKSpace {
            coils: (0..nc)
                .map(|_| ComplexImage {
                    height: h,
                    width: w,
                    data: (0..h * w)
                        .map(|_| {
                            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn zero_cnn(arch: ArchConfig, eta: f64) -> NetworkParams {
        let mut p = NetworkParams::zeros(arch);
        for m in 0..arch.cascades {
            p.set_dc_weight(m, eta);
        }
        p
    }

    #[test]
    fn parameter_count_matches_architecture_arithmetic() {
        let arch = ArchConfig {
            cascades: 1,
            channels: 8,
            layers: 3,
            kernel: 3,
        };
        // (3*3*2*8 + 8) + (3*3*8*8 + 8) + (3*3*8*2 + 2) + 1
        assert_eq!(arch.param_count(), 152 + 584 + 146 + 1);
        let segs = arch.segments();
        assert_eq!(segs.len(), 7);
        assert_eq!(segs.iter().map(|s| s.len).sum::<usize>(), 883);
        assert_eq!(segs[1].name(), "cascade0.conv0.weight");
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = ArchConfig::default();
        let a = init_params(&arch, 4).unwrap();
        assert_eq!(a, init_params(&arch, 4).unwrap());
        assert_ne!(a, init_params(&arch, 5).unwrap());
        for seg in arch.segments() {
            let vals = &a.values[seg.offset..seg.offset + seg.len];
            match seg.kind {
                SegmentKind::DcWeight => assert_eq!(vals, [1.0]),
                SegmentKind::ConvBias(_) => assert!(vals.iter().all(|&v| v == 0.0)),
                SegmentKind::ConvWeight(l) => {
                    let fan_in = if l == 0 { 2 } else { 8 } * 9;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    assert!(vals.iter().all(|v| v.abs() <= bound));
                }
            }
        }
    }

    #[test]
    fn cnn_zero_params_give_zero_output() {
        let arch = ArchConfig::default();
        let seg = vec![0.0; arch.cascade_len() - 1];
        let input: Vec<f64> = (0..2 * 36).map(|i| i as f64).collect();
        let (out, _) = cnn_apply(&arch, &seg, &input, 6, 6).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_single_identity_layer() {
        let arch = ArchConfig {
            cascades: 1,
            channels: 4,
            layers: 1,
            kernel: 1,
        };
        // weights [o][c]: identity on 2 channels, zero bias
        let seg = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let input: Vec<f64> = (0..2 * 20).map(|i| (i as f64).sin()).collect();
        let (out, _) = cnn_apply(&arch, &seg, &input, 4, 5).unwrap();
        assert_eq!(out, input);
        assert!(matches!(
            cnn_apply(&arch, &seg, &input[1..], 4, 5),
            Err(Error::Dimension(_))
        ));
    }

    /// Naive direct convolution over explicitly padded inputs.
    fn cnn_oracle(arch: &ArchConfig, seg: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = arch.kernel as isize;
        let p = k / 2;
        let mut cur = input.to_vec();
        let mut off = 0;
        for (l, s) in arch.layer_shapes().iter().enumerate() {
            let wlen = s.c_out * s.c_in * (k * k) as usize;
            let mut out = vec![0.0; s.c_out * h * w];
            for o in 0..s.c_out {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = seg[off + wlen + o];
                        for c in 0..s.c_in {
                            for i in 0..k {
                                for j in 0..k {
                                    let (sy, sx) = (y + i - p, x + j - p);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wt = seg[off
                                        + ((o * s.c_in + c) * k as usize + i as usize)
                                            * k as usize
                                        + j as usize];
                                    acc += wt * cur[c * h * w + sy as usize * w + sx as usize];
                                }
                            }
                        }
                        out[o * h * w + y as usize * w + x as usize] = acc;
                    }
                }
            }
            if l + 1 < arch.layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            off += wlen + s.c_out;
            cur = out;
        }
        cur
    }

    #[test]
    fn cnn_matches_direct_convolution_oracle() {
        let arch = ArchConfig {
            cascades: 1,
            channels: 5,
            layers: 3,
            kernel: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seg: Vec<f64> = (0..arch.cascade_len() - 1)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let (h, w) = (7, 9);
        let input: Vec<f64> = (0..2 * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (out, _) = cnn_apply(&arch, &seg, &input, h, w).unwrap();
        let expected = cnn_oracle(&arch, &seg, &input, h, w);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cnn_cascade_is_masked_replacement() {
        let arch = ArchConfig {
            cascades: 1,
            ..ArchConfig::default()
        };
        let (nc, h, w) = (2, 8, 10);
        let k = random_kspace(nc, h, w, 1);
        let kt = random_kspace(nc, h, w, 2);
        let sens = crate::phantom::gen_sensitivities(h, w, nc, 0).unwrap();
        let p = zero_cnn(arch, 1.0);

        let full = SamplingMask::full(h, w);
        let (out, _) = cascade_forward(&k, &kt, &full, &sens, &arch, p.cascade(0)).unwrap();
        assert_eq!(out, kt);

        let mask = random_cartesian(h, w, 2, 0.2, 9).unwrap();
        let (out, _) = cascade_forward(&k, &kt, &mask, &sens, &arch, p.cascade(0)).unwrap();
        for c in 0..nc {
            for i in 0..h * w {
                let expected = if mask.pattern[i] {
                    kt.coils[c].data[i]
                } else {
                    k.coils[c].data[i]
                };
                assert_eq!(out.coils[c].data[i], expected);
            }
        }

        let p0 = zero_cnn(arch, 0.0);
        let (out, _) = cascade_forward(&k, &kt, &mask, &sens, &arch, p0.cascade(0)).unwrap();
        assert_eq!(out, k);
    }

    fn slice() -> ReconSlice {
        let cfg = DataConfig {
            height: 24,
            width: 24,
            n_coils: 3,
            n_ellipses: 5,
            ..DataConfig::default()
        };
        ReconSlice::simulate("t", PhantomFamily::Ellipses, &cfg, 77).unwrap()
    }

    #[test]
    fn zero_cascades_give_zero_filled_recon() {
        let s = slice();
        let mask = random_cartesian(24, 24, 4, 0.125, 1).unwrap();
        let masked = crate::mask::apply_mask(&s.kspace, &mask).unwrap();
        let arch = ArchConfig {
            cascades: 0,
            ..ArchConfig::default()
        };
        let recon = predict(&masked, &mask, &s.sens, &NetworkParams::zeros(arch)).unwrap();
        assert_eq!(recon, zero_filled(&masked).unwrap());
    }

    #[test]
    fn full_mask_zero_cnn_recovers_ground_truth() {
        let s = slice();
        let mask = SamplingMask::full(24, 24);
        let arch = ArchConfig::default();
        let (recon, _) = forward(&s.kspace, &mask, &s.sens, &zero_cnn(arch, 1.0)).unwrap();
        let truth = fourier::zero_filled(&s.kspace).unwrap();
        for (a, b) in recon.data.iter().zip(&truth.data) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(recon.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_cnn_keeps_sampled_cells_after_every_cascade() {
        let s = slice();
        let mask = random_cartesian(24, 24, 4, 0.125, 3).unwrap();
        let masked = crate::mask::apply_mask(&s.kspace, &mask).unwrap();
        let arch = ArchConfig::default();
        let p = zero_cnn(arch, 1.0);
        let mut k = masked.clone();
        for m in 0..arch.cascades {
            let (next, _) =
                cascade_forward(&k, &masked, &mask, &s.sens, &arch, p.cascade(m)).unwrap();
            for (a, b) in next.coils.iter().zip(&masked.coils) {
                for i in 0..24 * 24 {
                    if mask.pattern[i] {
                        assert_eq!(a.data[i], b.data[i]);
                    }
                }
            }
            k = next;
        }
    }

    #[test]
    fn forward_is_deterministic_and_backward_of_zero_is_zero() {
        let s = slice();
        let mask = random_cartesian(24, 24, 4, 0.125, 3).unwrap();
        let masked = crate::mask::apply_mask(&s.kspace, &mask).unwrap();
        let sens = estimate_sensitivities(&masked, &mask).unwrap();
        let p = init_params(&ArchConfig::default(), 1).unwrap();
        let (r1, t1) = forward(&masked, &mask, &sens, &p).unwrap();
        let (r2, t2) = forward(&masked, &mask, &sens, &p).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(t1, t2);
        let g = backward(&t1, &p, &RealImage::zeros(24, 24)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let other = init_params(&ArchConfig::default(), 2).unwrap();
        assert!(matches!(
            backward(&t1, &other, &RealImage::zeros(24, 24)),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn dc_weight_gradient_vanishes_when_input_is_consistent() {
        // The first cascade starts from k0 = k_tilde, so its DC term is zero.
        let (nc, h, w) = (2, 6, 6);
        let arch = ArchConfig {
            cascades: 1,
            ..ArchConfig::default()
        };
        let kt = random_kspace(nc, h, w, 5);
        let mask = SamplingMask::full(h, w);
        let sens = crate::phantom::gen_sensitivities(h, w, nc, 1).unwrap();
        let p = zero_cnn(arch, 0.3);
        let (_, tape) = forward(&kt, &mask, &sens, &p).unwrap();
        let g = backward(
            &tape,
            &p,
            &RealImage::from_vec(h, w, vec![1.0; h * w]).unwrap(),
        )
        .unwrap();
        assert_eq!(g[0], 0.0);
    }

    fn fd_check(arch: ArchConfig, h: usize, w: usize, nc: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = random_kspace(nc, h, w, seed);
        let mask = random_cartesian(h, w, 2, 0.25, seed).unwrap();
        let masked = crate::mask::apply_mask(&full, &mask).unwrap();
        let sens = crate::phantom::gen_sensitivities(h, w, nc, seed).unwrap();
        let mut p = init_params(&arch, seed).unwrap();
        for m in 0..arch.cascades {
            p.set_dc_weight(m, rng.random_range(0.3..1.2));
        }
        for seg in arch.segments() {
            if let SegmentKind::ConvBias(_) = seg.kind {
                for v in &mut p.values[seg.offset..seg.offset + seg.len] {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let weights = RealImage::from_vec(
            h,
            w,
            (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let loss = |p: &NetworkParams| -> f64 {
            let r = predict(&masked, &mask, &sens, p).unwrap();
            r.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
        };
        let relu_pattern =
            |p: &NetworkParams| forward(&masked, &mask, &sens, p).unwrap().1.relu_pattern();
        let (_, tape) = forward(&masked, &mask, &sens, &p).unwrap();
        let grad = backward(&tape, &p, &weights).unwrap();
        let step = 1e-5;
        for seg in arch.segments() {
            let picks: Vec<usize> = if seg.len <= 20 {
                (0..seg.len).collect()
            } else {
                (0..20).map(|_| rng.random_range(0..seg.len)).collect()
            };
            for i in picks {
                let idx = seg.offset + i;
                // A central difference straddling a ReLU kink measures the
                // average of two one-sided slopes; shrink the step until
                // both evaluations share one activation pattern.
                let mut h_step = step;
                let fd = loop {
                    let mut pp = p.clone();
                    pp.values[idx] += h_step;
                    let mut pm = p.clone();
                    pm.values[idx] -= h_step;
                    if relu_pattern(&pp) == relu_pattern(&pm) {
                        break (loss(&pp) - loss(&pm)) / (2.0 * h_step);
                    }
                    h_step /= 4.0;
                    assert!(h_step > 1e-9, "no kink-free step for {}", seg.name());
                };
                let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-7);
                assert!(
                    rel < 1e-4,
                    "{} [{i}]: fd {fd} vs analytic {}",
                    seg.name(),
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(
            ArchConfig {
                cascades: 2,
                channels: 4,
                layers: 3,
                kernel: 3,
            },
            12,
            10,
            2,
            21,
        );
    }

    #[test]
    fn estimated_maps_are_normalized() {
        let s = slice();
        let mask = random_cartesian(24, 24, 4, 0.125, 2).unwrap();
        let masked = crate::mask::apply_mask(&s.kspace, &mask).unwrap();
        let est = estimate_sensitivities(&masked, &mask).unwrap();
        for p in 0..24 * 24 {
            let e: f64 = est.maps.iter().map(|m| m.data[p].norm_sqr()).sum();
            assert!(e == 0.0 || (e - 1.0).abs() < 1e-6);
        }
        let mut no_center = mask.clone();
        for r in 0..24 {
            no_center.pattern[r * 24 + 12] = false;
        }
        assert!(matches!(
            estimate_sensitivities(&masked, &no_center),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn fully_sampled_estimate_matches_true_maps() {
        let s = slice();
        let full = SamplingMask::full(24, 24);
        let est = estimate_sensitivities(&s.kspace, &full).unwrap();
        let support: Vec<usize> = (0..24 * 24)
            .filter(|&p| s.target.data[p] > 1e-3 * s.target.max())
            .collect();
        // Maps are only defined up to a common per-pixel phase; remove it
        // before comparing coil by coil.
        let aligned: Vec<Vec<Complex64>> = est
            .maps
            .iter()
            .map(|m| {
                support
                    .iter()
                    .map(|&p| {
                        let c: Complex64 = est
                            .maps
                            .iter()
                            .zip(&s.sens.maps)
                            .map(|(e, t)| t.data[p].conj() * e.data[p])
                            .sum();
                        m.data[p] * (c.conj() / c.norm().max(1e-300))
                    })
                    .collect()
            })
            .collect();
        for (a, t) in aligned.iter().zip(&s.sens.maps) {
            let t: Vec<Complex64> = support.iter().map(|&p| t.data[p]).collect();
            let dot: Complex64 = a.iter().zip(&t).map(|(x, y)| x * y.conj()).sum();
            let na = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let nt = t.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let cos = dot.norm() / (na * nt);
            assert!(cos > 0.95, "cosine similarity {cos}");
        }
    }

    #[test]
    fn psnr_improves_as_acceleration_shrinks() {
        // Nested equispaced masks (shared center block, offset 0), zero CNN:
        // the output is the zero-filled image of ever larger sample sets.
        let cfg = DataConfig {
            height: 32,
            width: 32,
            n_coils: 4,
            ..DataConfig::default()
        };
        let arch = ArchConfig {
            cascades: 2,
            ..ArchConfig::default()
        };
        let mut params = NetworkParams::zeros(arch);
        params.set_dc_weight(0, 1.0);
        params.set_dc_weight(1, 1.0);
        for i in 0..10 {
            let s = ReconSlice::simulate(format!("m{i}"), PhantomFamily::Ellipses, &cfg, 500 + i)
                .unwrap();
            let dr = s.target.max();
            let mut masks: Vec<SamplingMask> = [8, 4, 2]
                .iter()
                .map(|&r| crate::mask::equispaced_with_offset(32, 32, r, 0.125, 0, 0).unwrap())
                .collect();
            masks.push(SamplingMask::full(32, 32));
            let mut last = f64::NEG_INFINITY;
            for m in &masks {
                let masked = crate::mask::apply_mask(&s.kspace, m).unwrap();
                let sens = estimate_sensitivities(&masked, m).unwrap();
                let out = predict(&masked, m, &sens, &params).unwrap();
                let db = match crate::metrics::psnr(&out, &s.target, dr).unwrap() {
                    crate::metrics::Psnr::Finite(v) => v,
                    crate::metrics::Psnr::Infinite => f64::INFINITY,
                };
                assert!(
                    db > last,
                    "slice {i}: R {} gives {db} dB after {last} dB",
                    m.nominal_r
                );
                last = db;
            }
            assert!(
                last > 80.0,
                "full sampling should reproduce the target, got {last} dB"
            );
        }
    }

    #[test]
    fn checkpoint_bytes_roundtrip() {
        let p = init_params(&ArchConfig::default(), 8).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(NetworkParams::from_bytes(&bytes).unwrap(), p);
        assert!(NetworkParams::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(
            NetworkParams::from_bytes(&bad),
            Err(Error::Format { .. })
        ));
    }
}
