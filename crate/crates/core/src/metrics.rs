//! Image quality metrics: SSIM with its exact gradient (the training
//! loss is `1 - SSIM`), PSNR, MSE and NMSE.
//!
//! SSIM uses a uniform square window over all fully contained positions,
//! with sample (unbiased) covariances inside each window. With
//! `N = win * win` pixels per window and `cn = N / (N - 1)`:
//!
//! ```text
//! S_w = (2 mu_a mu_b + C1)(2 s_ab + C2) / ((mu_a^2 + mu_b^2 + C1)(s_a^2 + s_b^2 + C2))
//! s_ab = cn (E[ab] - mu_a mu_b),  C1 = (k1 L)^2,  C2 = (k2 L)^2
//! ```
//!
//! and the image score is the mean of `S_w` over windows.

use crate::error::{Error, Result};
use crate::fourier::RealImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl SsimConfig {
    /// 7x7 window, `k1 = 0.01`, `k2 = 0.03`.
    pub fn new(data_range: f64) -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.data_range > 0.0) || !self.data_range.is_finite() {
            return Err(Error::config(
                "data_range",
                format!("must be > 0, got {}", self.data_range),
            ));
        }
        if self.window.is_multiple_of(2) || self.window < 3 {
            return Err(Error::config("window", "window size must be odd and >= 3"));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::config("k1", "stability constants must be positive"));
        }
        Ok(())
    }
}

fn check_pair(a: &RealImage, b: &RealImage) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.data.len() != a.height * a.width || b.data.len() != b.height * b.width {
        return Err(Error::Dimension(
            "buffer length does not match shape".into(),
        ));
    }
    Ok(())
}

/// Sums over every fully contained `k x k` window; output is
/// `(h - k + 1) x (w - k + 1)`.
fn box_sum(img: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &img[r * w..(r + 1) * w];
        let dst = &mut rows[r * ow..(r + 1) * ow];
        for (c, d) in dst.iter_mut().enumerate() {
            *d = src[c..c + k].iter().sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        let dst = &mut out[r * ow..(r + 1) * ow];
        for dr in 0..k {
            let src = &rows[(r + dr) * ow..(r + dr + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Adjoint of [`box_sum`]: scatters each window value back over the pixels
/// it covers.
fn box_sum_adjoint(map: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..oh {
        let src = &map[r * ow..(r + 1) * ow];
        for dr in 0..k {
            let dst = &mut rows[(r + dr) * ow..(r + dr + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let src = &rows[r * ow..(r + 1) * ow];
        let dst = &mut out[r * w..(r + 1) * w];
        for (c, &s) in src.iter().enumerate() {
            for d in &mut dst[c..c + k] {
                *d += s;
            }
        }
    }
    out
}

struct WindowStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

fn window_stats(a: &RealImage, b: &RealImage, k: usize) -> WindowStats {
    let (h, w) = a.shape();
    let n = (k * k) as f64;
    let mean =
        |v: Vec<f64>| -> Vec<f64> { box_sum(&v, h, w, k).into_iter().map(|s| s / n).collect() };
    WindowStats {
        mu_a: mean(a.data.clone()),
        mu_b: mean(b.data.clone()),
        e_aa: mean(a.data.iter().map(|x| x * x).collect()),
        e_bb: mean(b.data.iter().map(|x| x * x).collect()),
        e_ab: mean(a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect()),
    }
}

fn prepare(a: &RealImage, b: &RealImage, cfg: &SsimConfig) -> Result<()> {
    check_pair(a, b)?;
    cfg.validate()?;
    if a.height < cfg.window || a.width < cfg.window {
        return Err(Error::Dimension(format!(
            "{}x{} image is smaller than the {}x{} window",
            a.height, a.width, cfg.window, cfg.window
        )));
    }
    Ok(())
}

/// Mean structural similarity of `a` against `b`.
pub fn ssim(a: &RealImage, b: &RealImage, cfg: &SsimConfig) -> Result<f64> {
    prepare(a, b, cfg)?;
    let k = cfg.window;
    let n = (k * k) as f64;
    let cn = n / (n - 1.0);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let st = window_stats(a, b, k);
    let total: f64 = (0..st.mu_a.len())
        .map(|i| {
            let (ma, mb) = (st.mu_a[i], st.mu_b[i]);
            let va = cn * (st.e_aa[i] - ma * ma);
            let vb = cn * (st.e_bb[i] - mb * mb);
            let cov = cn * (st.e_ab[i] - ma * mb);
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / st.mu_a.len() as f64)
}

/// `1 - ssim(a, b)` and its gradient with respect to every pixel of `a`.
pub fn ssim_loss_grad(a: &RealImage, b: &RealImage, cfg: &SsimConfig) -> Result<(f64, RealImage)> {
    prepare(a, b, cfg)?;
    let (h, w) = a.shape();
    let k = cfg.window;
    let n = (k * k) as f64;
    let cn = n / (n - 1.0);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let st = window_stats(a, b, k);
    let nw = st.mu_a.len();

    let mut g_mu = vec![0.0; nw];
    let mut g_aa = vec![0.0; nw];
    let mut g_ab = vec![0.0; nw];
    let mut total = 0.0;
    for i in 0..nw {
        let (ma, mb) = (st.mu_a[i], st.mu_b[i]);
        let va = cn * (st.e_aa[i] - ma * ma);
        let vb = cn * (st.e_bb[i] - mb * mb);
        let cov = cn * (st.e_ab[i] - ma * mb);
        let a1 = 2.0 * ma * mb + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = va + vb + c2;
        let d = b1 * b2;
        let s = a1 * a2 / d;
        total += s;
        g_mu[i] =
            (2.0 * mb * a2 - 2.0 * cn * mb * a1) / d - s * (2.0 * ma / b1 - 2.0 * cn * ma / b2);
        g_aa[i] = -s * cn / b2;
        g_ab[i] = 2.0 * cn * a1 / d;
    }
    let mean_ssim = total / nw as f64;

    let g_mu = box_sum_adjoint(&g_mu, h, w, k);
    let g_aa = box_sum_adjoint(&g_aa, h, w, k);
    let g_ab = box_sum_adjoint(&g_ab, h, w, k);
    let scale = -1.0 / (nw as f64 * n);
    let grad = (0..h * w)
        .map(|p| scale * (g_mu[p] + 2.0 * a.data[p] * g_aa[p] + b.data[p] * g_ab[p]))
        .collect();
    Ok((1.0 - mean_ssim, RealImage::from_vec(h, w, grad)?))
}

/// Mean squared pixel difference.
pub fn mse(a: &RealImage, b: &RealImage) -> Result<f64> {
    check_pair(a, b)?;
    if a.data.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64)
}

/// Peak signal-to-noise ratio. Identical images have no finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn psnr(a: &RealImage, b: &RealImage, data_range: f64) -> Result<Psnr> {
    if !(data_range > 0.0) {
        return Err(Error::config(
            "data_range",
            format!("must be > 0, got {data_range}"),
        ));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(10.0 * (data_range * data_range / m).log10()))
}

/// `||a - b||^2 / ||b||^2`, with `b` the ground truth.
pub fn nmse(a: &RealImage, b: &RealImage) -> Result<f64> {
    check_pair(a, b)?;
    let denom: f64 = b.data.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::InvalidInput(
            "ground truth is identically zero".into(),
        ));
    }
    let num: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> RealImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealImage::from_vec(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn constant(h: usize, w: usize, v: f64) -> RealImage {
        RealImage::from_vec(h, w, vec![v; h * w]).unwrap()
    }

    /// Direct per-window SSIM, written without box filters.
    fn ssim_oracle(a: &RealImage, b: &RealImage, dr: f64) -> f64 {
        let k = 7;
        let n = 49.0;
        let (c1, c2) = ((0.01 * dr) * (0.01f64 * dr), (0.03 * dr) * (0.03 * dr));
        let mut total = 0.0;
        let mut count = 0.0;
        for r in 0..=a.height - k {
            for c in 0..=a.width - k {
                let px: Vec<(f64, f64)> = (0..k)
                    .flat_map(|i| (0..k).map(move |j| (r + i, c + j)))
                    .map(|(i, j)| (a.at(i, j), b.at(i, j)))
                    .collect();
                let ma = px.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = px.iter().map(|p| p.1).sum::<f64>() / n;
                let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / (n - 1.0);
                let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / (n - 1.0);
                let cov = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / (n - 1.0);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let a = random(12, 15, 1);
        let b = random(12, 15, 2);
        let got = ssim(&a, &b, &SsimConfig::new(1.0)).unwrap();
        assert!((got - ssim_oracle(&a, &b, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let cfg = SsimConfig::new(1.0);
        for seed in 0..10 {
            let a = random(16, 16, seed);
            let b = random(16, 16, seed + 100);
            assert_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0);
            let ab = ssim(&a, &b, &cfg).unwrap();
            let ba = ssim(&b, &a, &cfg).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_of_two_constants_is_closed_form() {
        let dr = 2.5;
        let cfg = SsimConfig::new(dr);
        let got = ssim(&constant(9, 9, 0.0), &constant(9, 9, dr), &cfg).unwrap();
        let c1 = (0.01 * dr) * (0.01 * dr);
        assert!((got - c1 / (dr * dr + c1)).abs() < 1e-15);
    }

    #[test]
    fn ssim_errors() {
        let a = random(8, 8, 0);
        assert!(matches!(
            ssim(&a, &random(8, 9, 0), &SsimConfig::new(1.0)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            ssim(&a, &a, &SsimConfig::new(0.0)),
            Err(Error::Config { .. })
        ));
        assert!(ssim(&random(5, 8, 0), &random(5, 8, 1), &SsimConfig::new(1.0)).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let a = random(16, 16, 3);
        let b = random(16, 16, 4);
        let cfg = SsimConfig::new(1.0);
        let (loss, grad) = ssim_loss_grad(&a, &b, &cfg).unwrap();
        assert!((loss - (1.0 - ssim(&a, &b, &cfg).unwrap())).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        for _ in 0..30 {
            let p = rng.random_range(0..256);
            let mut ap = a.clone();
            ap.data[p] += h;
            let mut am = a.clone();
            am.data[p] -= h;
            let lp = 1.0 - ssim(&ap, &b, &cfg).unwrap();
            let lm = 1.0 - ssim(&am, &b, &cfg).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad.data[p]).abs() / fd.abs().max(grad.data[p].abs()).max(1e-8);
            assert!(rel < 1e-4, "pixel {p}: fd {fd} vs {}", grad.data[p]);
        }
    }

    #[test]
    fn loss_is_stationary_at_identity() {
        let a = constant(16, 16, 0.4);
        let (loss, grad) = ssim_loss_grad(&a, &a, &SsimConfig::new(1.0)).unwrap();
        assert_eq!(loss, 0.0);
        let total: f64 = grad.data.iter().sum();
        assert!(total.abs() < 1e-6 * 256.0);

        let r = random(16, 16, 8);
        let (loss, _) = ssim_loss_grad(&r, &r, &SsimConfig::new(1.0)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn psnr_examples() {
        let a = constant(4, 4, 0.0);
        let b = constant(4, 4, 0.1);
        match psnr(&a, &b, 1.0).unwrap() {
            Psnr::Finite(v) => assert!((v - 20.0).abs() < 1e-9),
            Psnr::Infinite => panic!(),
        }
        let c = constant(4, 4, 1.0);
        assert!(psnr(&a, &c, 1.0).unwrap().db().unwrap().abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Psnr::Infinite);
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let b = random(16, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws: Vec<f64> = (0..256)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let mut last = f64::INFINITY;
        for level in 1..=10 {
            let std = 0.01 * level as f64;
            let a = RealImage::from_vec(
                16,
                16,
                b.data
                    .iter()
                    .zip(&draws)
                    .map(|(v, n)| v + std * n)
                    .collect(),
            )
            .unwrap();
            let db = psnr(&a, &b, 1.0).unwrap().db().unwrap();
            assert!(db < last, "std {std}: {db} dB after {last} dB");
            last = db;
        }
    }

    #[test]
    fn nmse_examples() {
        let b = random(6, 6, 1);
        assert_eq!(nmse(&b, &b).unwrap(), 0.0);
        let twice = RealImage::from_vec(6, 6, b.data.iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!((nmse(&twice, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((nmse(&constant(6, 6, 0.0), &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            nmse(&b, &constant(6, 6, 0.0)),
            Err(Error::InvalidInput(_))
        ));
    }
}
