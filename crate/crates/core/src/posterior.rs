//! Ensemble inference and uncertainty analysis.
//!
//! Every checkpoint of a [`PosteriorEnsemble`] reconstructs the same masked
//! input. The pixel-wise mean of those samples is the reconstruction; their
//! sample standard deviation (n - 1 denominator) is the uncertainty map, and
//! its spatial mean the scalar uncertainty of a slice.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::fourier::CoilSensitivities;
use crate::fourier::{MultiCoilKSpace, RealImage};
use crate::mask::{apply_mask, MaskKind, MaskSpec, SamplingMask};
use crate::metrics::{mse, psnr, ssim, Psnr, SsimConfig};
use crate::mix_seed;
use crate::net::{self, ArchConfig, NetworkParams, SensitivitySource};
use crate::phantom::ReconSlice;

/// A parameter checkpoint and the epoch it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: NetworkParams,
}

/// Post-burn-in checkpoints, ordered by epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosteriorEnsemble {
    pub members: Vec<Checkpoint>,
}

impl PosteriorEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.members.iter().map(|c| c.epoch).collect()
    }

    /// The shared architecture. Mixed architectures are a format error.
    pub fn arch(&self) -> Result<ArchConfig> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::InvalidInput("empty ensemble".into()))?
            .params
            .arch;
        if let Some(c) = self.members.iter().find(|c| c.params.arch != first) {
            return Err(Error::format(
                "arch",
                format!(
                    "checkpoint of epoch {} has a different architecture",
                    c.epoch
                ),
            ));
        }
        Ok(first)
    }

    /// `n` copies of one parameter set, for degenerate-ensemble checks.
    pub fn replicate(params: &NetworkParams, n: usize) -> Self {
        Self {
            members: (0..n)
                .map(|epoch| Checkpoint {
                    epoch,
                    params: params.clone(),
                })
                .collect(),
        }
    }
}

/// One reconstruction per checkpoint, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub samples: Vec<RealImage>,
}

impl PosteriorSamples {
    pub fn new(samples: Vec<RealImage>) -> Result<Self> {
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.shape() != first.shape()) {
                return Err(Error::Dimension("samples differ in shape".into()));
            }
            if samples
                .iter()
                .any(|s| s.data.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::InvalidInput("non-finite sample".into()));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn ensemble_predict(
    ensemble: &PosteriorEnsemble,
    masked_k: &MultiCoilKSpace,
    mask: &SamplingMask,
    sens: &CoilSensitivities,
) -> Result<PosteriorSamples> {
    ensemble.arch()?;
    let samples = ensemble
        .members
        .iter()
        .map(|c| net::predict(masked_k, mask, sens, &c.params))
        .collect::<Result<Vec<_>>>()?;
    PosteriorSamples::new(samples)
}

pub fn posterior_mean(s: &PosteriorSamples) -> Result<RealImage> {
    let first = s
        .samples
        .first()
        .ok_or_else(|| Error::InvalidInput("no posterior samples".into()))?;
    let n = s.len() as f64;
    let mut out = RealImage::zeros(first.height, first.width);
    for img in &s.samples {
        for (o, v) in out.data.iter_mut().zip(&img.data) {
            *o += v;
        }
    }
    out.data.iter_mut().for_each(|v| *v /= n);
    // A constant pixel must come back exactly, which the rounded sum above
    // does not guarantee.
    for (p, o) in out.data.iter_mut().enumerate() {
        let v0 = first.data[p];
        if s.samples.iter().all(|img| img.data[p] == v0) {
            *o = v0;
        }
    }
    Ok(out)
}

/// Pixel-wise sample standard deviation, computed in two passes.
pub fn posterior_std(s: &PosteriorSamples) -> Result<RealImage> {
    if s.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "standard deviation needs at least 2 samples, got {}",
            s.len()
        )));
    }
    let mean = posterior_mean(s)?;
    let mut out = RealImage::zeros(mean.height, mean.width);
    for img in &s.samples {
        for ((o, v), m) in out.data.iter_mut().zip(&img.data).zip(&mean.data) {
            *o += (v - m) * (v - m);
        }
    }
    let denom = (s.len() - 1) as f64;
    out.data.iter_mut().for_each(|v| *v = (*v / denom).sqrt());
    Ok(out)
}

/// Spatial mean of an uncertainty map.
pub fn uncertainty_scalar(map: &RealImage) -> f64 {
    if map.data.is_empty() {
        return 0.0;
    }
    map.data.iter().sum::<f64>() / map.data.len() as f64
}

/// Product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!(
            "{} vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidInput(
            "correlation needs at least 3 pairs".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidInput("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Posterior mean and uncertainty for one masked slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub mean: RealImage,
    pub std: RealImage,
    pub uncertainty: f64,
}

pub fn reconstruct(
    ensemble: &PosteriorEnsemble,
    masked_k: &MultiCoilKSpace,
    mask: &SamplingMask,
    sens: &CoilSensitivities,
) -> Result<Reconstruction> {
    let samples = ensemble_predict(ensemble, masked_k, mask, sens)?;
    let mean = posterior_mean(&samples)?;
    let std = if samples.len() >= 2 {
        posterior_std(&samples)?
    } else {
        RealImage::zeros(mean.height, mean.width)
    };
    let uncertainty = uncertainty_scalar(&std);
    Ok(Reconstruction {
        mean,
        std,
        uncertainty,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyRecord {
    pub slice_id: String,
    /// Distribution-shift group, e.g. the phantom family.
    pub group: String,
    pub mask_kind: MaskKind,
    /// Acceleration for Cartesian masks, spoke count for radial ones.
    pub r: usize,
    pub uncertainty: f64,
    pub mse: f64,
    pub psnr: Psnr,
    pub ssim: f64,
}

/// Median and quartiles (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl GroupStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    /// Pearson(log uncertainty, log MSE) over the reference group, or the
    /// reason it could not be computed.
    pub pearson_log: std::result::Result<f64, String>,
    pub pearson_raw: std::result::Result<f64, String>,
    /// Reference-group records left out of the log correlation because
    /// their uncertainty or MSE is zero.
    pub excluded: usize,
    /// Mean uncertainty per (group, mask label).
    pub groups: BTreeMap<(String, String), GroupStats>,
    pub reference_group: String,
}

impl ReportSummary {
    /// Mean uncertainty of `group` under the mask labelled `label`.
    pub fn mean_uncertainty(&self, group: &str, label: &str) -> Option<f64> {
        self.groups
            .get(&(group.to_string(), label.to_string()))
            .map(|s| s.mean)
    }

    /// Flat `key=value` text.
    pub fn to_text(&self) -> String {
        fn corr(r: &std::result::Result<f64, String>) -> String {
            match r {
                Ok(v) => format!("{v}"),
                Err(e) => format!("nan  # {e}"),
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "reference_group={}", self.reference_group);
        let _ = writeln!(out, "pearson_log={}", corr(&self.pearson_log));
        let _ = writeln!(out, "pearson_raw={}", corr(&self.pearson_raw));
        let _ = writeln!(out, "excluded={}", self.excluded);
        for ((group, label), s) in &self.groups {
            if *group == self.reference_group {
                let key = match label.strip_prefix("random_") {
                    Some(r) => format!("R{r}"),
                    None => label.clone(),
                };
                let _ = writeln!(out, "mean_uncertainty_{key}={}", s.mean);
            }
        }
        for ((group, label), s) in &self.groups {
            let p = format!("group_{group}_{label}");
            let _ = writeln!(out, "{p}_n={}", s.n);
            let _ = writeln!(out, "{p}_mean={}", s.mean);
            let _ = writeln!(out, "{p}_q1={}", s.q1);
            let _ = writeln!(out, "{p}_median={}", s.median);
            let _ = writeln!(out, "{p}_q3={}", s.q3);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub records: Vec<UncertaintyRecord>,
    pub summary: ReportSummary,
}

pub const REPORT_HEADER: &str = "slice_id,mask_kind,R,uncertainty,mse,psnr_db,ssim";

impl UncertaintyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{},{}",
                r.slice_id,
                r.mask_kind.name(),
                r.r,
                r.uncertainty,
                r.mse,
                r.psnr,
                r.ssim
            );
        }
        out
    }
}

/// A named set of slices evaluated together.
#[derive(Debug, Clone)]
pub struct SliceGroup {
    pub name: String,
    pub slices: Vec<ReconSlice>,
}

/// Reconstructs every slice of every group under every mask spec and
/// collects metrics and scalar uncertainties. Correlations are computed on
/// the first group, treated as in-distribution.
///
/// Masks are seeded from `(seed, spec index, slice index)`, so all groups
/// see the same mask sequence.
pub fn uncertainty_report(
    ensemble: &PosteriorEnsemble,
    groups: &[SliceGroup],
    specs: &[MaskSpec],
    sens_source: SensitivitySource,
    seed: u64,
) -> Result<UncertaintyReport> {
    let reference = groups
        .first()
        .ok_or_else(|| Error::InvalidInput("no slice groups".into()))?;
    if reference.slices.len() < 3 {
        return Err(Error::InvalidInput(
            "need at least 3 slices per mask spec".into(),
        ));
    }
    let mut records = Vec::new();
    for group in groups {
        for (si, spec) in specs.iter().enumerate() {
            for (i, slice) in group.slices.iter().enumerate() {
                let mask = spec.draw(
                    slice.height(),
                    slice.width(),
                    mix_seed(mix_seed(seed, si as u64), i as u64),
                )?;
                let masked = apply_mask(&slice.kspace, &mask)?;
                let sens = net::sensitivities_for(sens_source, &masked, &mask, Some(&slice.sens))?;
                let rec = reconstruct(ensemble, &masked, &mask, &sens)?;
                let dr = slice.target.max();
                records.push(UncertaintyRecord {
                    slice_id: slice.id.clone(),
                    group: group.name.clone(),
                    mask_kind: spec.kind,
                    r: spec.r,
                    uncertainty: rec.uncertainty,
                    mse: mse(&rec.mean, &slice.target)?,
                    psnr: psnr(&rec.mean, &slice.target, dr)?,
                    ssim: ssim(&rec.mean, &slice.target, &SsimConfig::new(dr))?,
                });
            }
        }
    }
    let summary = summarize(&records, &reference.name, specs);
    Ok(UncertaintyReport { records, summary })
}

fn summarize(records: &[UncertaintyRecord], reference: &str, specs: &[MaskSpec]) -> ReportSummary {
    let refs: Vec<&UncertaintyRecord> = records.iter().filter(|r| r.group == reference).collect();
    let raw_u: Vec<f64> = refs.iter().map(|r| r.uncertainty).collect();
    let raw_e: Vec<f64> = refs.iter().map(|r| r.mse).collect();
    let logged: Vec<(f64, f64)> = refs
        .iter()
        .filter(|r| r.uncertainty > 0.0 && r.mse > 0.0)
        .map(|r| (r.uncertainty.ln(), r.mse.ln()))
        .collect();
    let excluded = refs.len() - logged.len();
    let (lu, le): (Vec<f64>, Vec<f64>) = logged.into_iter().unzip();
    let pearson_log = pearson(&lu, &le).map_err(|e| e.to_string());
    let pearson_raw = pearson(&raw_u, &raw_e).map_err(|e| e.to_string());

    let mut groups = BTreeMap::new();
    let mut names: Vec<&str> = records.iter().map(|r| r.group.as_str()).collect();
    names.dedup();
    for name in names {
        for spec in specs {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.group == name && r.mask_kind == spec.kind && r.r == spec.r)
                .map(|r| r.uncertainty)
                .collect();
            if let Some(s) = GroupStats::from_values(&vals) {
                groups.insert((name.to_string(), spec.label()), s);
            }
        }
    }
    ReportSummary {
        pearson_log,
        pearson_raw,
        excluded,
        groups,
        reference_group: reference.to_string(),
    }
}

/// Writes a 16-bit binary PGM with values scaled linearly so the image
/// maximum maps to 65535, plus a `<path>.scale` sidecar holding that
/// maximum. Returns the scale.
pub fn write_pgm16(img: &RealImage, path: &Path) -> Result<f64> {
    if img.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(
            "PGM export needs finite non-negative values".into(),
        ));
    }
    let scale = img.max().max(0.0);
    let mut bytes = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for v in &img.data {
        let q = if scale > 0.0 {
            (v / scale * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    binio::write_atomic(path, &bytes)?;
    let mut sidecar = path.as_os_str().to_os_string();
    sidecar.push(".scale");
    binio::write_atomic(
        Path::new(&sidecar),
        format!("# pixel value = raw / 65535 * scale\nscale={scale:e}\n").as_bytes(),
    )?;
    Ok(scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use crate::phantom::{generate_slices, DataConfig, PhantomFamily};
    use proptest::prelude::*;

    fn samples_of(values: &[&[f64]]) -> PosteriorSamples {
        let w = values[0].len();
        PosteriorSamples::new(
            values
                .iter()
                .map(|v| RealImage::from_vec(1, w, v.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mean_and_std_of_one_two_three() {
        let s = samples_of(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(posterior_mean(&s).unwrap().data, vec![2.0]);
        assert_eq!(posterior_std(&s).unwrap().data, vec![1.0]);
    }

    #[test]
    fn std_needs_two_samples_and_mean_needs_one() {
        let s = samples_of(&[&[1.0, 2.0]]);
        assert!(matches!(posterior_std(&s), Err(Error::InvalidInput(_))));
        assert!(matches!(
            posterior_mean(&PosteriorSamples::new(vec![]).unwrap()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn identical_samples_give_exact_mean_and_zero_std() {
        let v = [0.1, 0.7, 1.0 / 3.0, 2.9];
        let s = samples_of(&[&v, &v, &v, &v, &v, &v, &v]);
        assert_eq!(posterior_mean(&s).unwrap().data, v.to_vec());
        assert!(posterior_std(&s).unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uncertainty_scalar_examples() {
        assert_eq!(uncertainty_scalar(&RealImage::zeros(3, 3)), 0.0);
        let c = RealImage::from_vec(2, 2, vec![0.25; 4]).unwrap();
        assert_eq!(uncertainty_scalar(&c), 0.25);
        let half = RealImage::from_vec(1, 4, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(uncertainty_scalar(&half), 0.5);
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[0.0, 1.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn group_stats_quartiles() {
        let s = GroupStats::from_values(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3, s.mean), (2.0, 3.0, 4.0, 3.0));
        assert!(GroupStats::from_values(&[]).is_none());
    }

    fn two_pass_std(vals: &[f64]) -> f64 {
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    proptest! {
        #[test]
        fn statistics_match_oracles_and_ignore_order(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..10),
            rot in 0usize..10,
            c in 0.1f64..10.0,
        ) {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let s = samples_of(&refs);
            let mean = posterior_mean(&s).unwrap();
            let std = posterior_std(&s).unwrap();
            for p in 0..6 {
                let col: Vec<f64> = rows.iter().map(|r| r[p]).collect();
                let m = col.iter().sum::<f64>() / col.len() as f64;
                if col.iter().all(|&v| v == col[0]) {
                    prop_assert_eq!(mean.data[p], col[0]);
                } else {
                    prop_assert_eq!(mean.data[p], m);
                }
                prop_assert!((std.data[p] - two_pass_std(&col)).abs() < 1e-12);
                prop_assert!(std.data[p] >= 0.0);
            }

            let mut rotated = rows.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let rrefs: Vec<&[f64]> = rotated.iter().map(|r| r.as_slice()).collect();
            let s2 = samples_of(&rrefs);
            let m2 = posterior_mean(&s2).unwrap();
            let sd2 = posterior_std(&s2).unwrap();
            for p in 0..6 {
                prop_assert!((m2.data[p] - mean.data[p]).abs() < 1e-12);
                prop_assert!((sd2.data[p] - std.data[p]).abs() < 1e-12);
            }

            // power-of-two scaling is exact in floating point
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * 4.0).collect()).collect();
            let srefs: Vec<&[f64]> = scaled.iter().map(|r| r.as_slice()).collect();
            let s3 = samples_of(&srefs);
            prop_assert_eq!(posterior_mean(&s3).unwrap().data, mean.data.iter().map(|v| v * 4.0).collect::<Vec<_>>());
            let sd3 = posterior_std(&s3).unwrap();
            for p in 0..6 {
                prop_assert!((sd3.data[p] - 4.0 * std.data[p]).abs() < 1e-12);
                let scaled_c: Vec<f64> = rows.iter().map(|r| r[p] * c).collect();
                prop_assert!((two_pass_std(&scaled_c) - c * std.data[p]).abs() < 1e-9 * c.max(1.0));
            }
        }
    }

    fn tiny_setup() -> (PosteriorEnsemble, Vec<ReconSlice>) {
        let cfg = DataConfig {
            height: 16,
            width: 16,
            n_coils: 2,
            n_ellipses: 3,
            ..DataConfig::default()
        };
        let slices = generate_slices(&cfg, PhantomFamily::Ellipses, 4, 3, "s").unwrap();
        let arch = ArchConfig {
            cascades: 1,
            channels: 4,
            layers: 2,
            kernel: 3,
        };
        let members = (0..3)
            .map(|e| Checkpoint {
                epoch: e,
                params: init_params(&arch, e as u64).unwrap(),
            })
            .collect();
        (PosteriorEnsemble { members }, slices)
    }

    #[test]
    fn ensemble_predict_orders_and_duplicates() {
        let (ens, slices) = tiny_setup();
        let s = &slices[0];
        let mask = MaskSpec::random(4).draw(16, 16, 1).unwrap();
        let masked = apply_mask(&s.kspace, &mask).unwrap();
        let out = ensemble_predict(&ens, &masked, &mask, &s.sens).unwrap();
        assert_eq!(out.len(), 3);
        for (img, c) in out.samples.iter().zip(&ens.members) {
            assert_eq!(
                *img,
                net::predict(&masked, &mask, &s.sens, &c.params).unwrap()
            );
        }
        let dup = PosteriorEnsemble::replicate(&ens.members[1].params, 4);
        let out = ensemble_predict(&dup, &masked, &mask, &s.sens).unwrap();
        assert!(out.samples.iter().all(|x| *x == out.samples[0]));
        let rec = reconstruct(&dup, &masked, &mask, &s.sens).unwrap();
        assert_eq!(rec.mean, out.samples[0]);
        assert_eq!(rec.uncertainty, 0.0);
    }

    #[test]
    fn mixed_architectures_are_a_format_error() {
        let (mut ens, _) = tiny_setup();
        ens.members[2].params = init_params(&ArchConfig::default(), 0).unwrap();
        assert!(matches!(ens.arch(), Err(Error::Format { .. })));
    }

    #[test]
    fn degenerate_report_records_a_diagnostic() {
        let (ens, slices) = tiny_setup();
        let dup = PosteriorEnsemble::replicate(&ens.members[0].params, 3);
        let groups = [SliceGroup {
            name: "ellipses".into(),
            slices,
        }];
        let rep = uncertainty_report(
            &dup,
            &groups,
            &[MaskSpec::random(2), MaskSpec::random(4)],
            SensitivitySource::True,
            5,
        )
        .unwrap();
        assert_eq!(rep.records.len(), 8);
        assert!(rep.records.iter().all(|r| r.uncertainty == 0.0));
        assert!(rep.summary.pearson_log.is_err());
        assert!(rep.summary.pearson_raw.is_err());
        assert_eq!(rep.summary.excluded, 8);
        assert_eq!(
            rep.summary.mean_uncertainty("ellipses", "random_4"),
            Some(0.0)
        );
        let text = rep.summary.to_text();
        assert!(text.contains("mean_uncertainty_R2=0"));
        assert!(text.contains("pearson_log=nan"));
        let csv = rep.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn pgm_export() {
        let dir = tempfile::tempdir().unwrap();
        let img = RealImage::from_vec(2, 3, vec![0.0, 0.5, 1.0, 2.0, 0.25, 0.0]).unwrap();
        let path = dir.path().join("m.pgm");
        assert_eq!(write_pgm16(&img, &path).unwrap(), 2.0);
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        let px: Vec<u16> = bytes[header.len()..]
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(px, vec![0, 16384, 32768, 65535, 8192, 0]);
        let side = std::fs::read_to_string(dir.path().join("m.pgm.scale")).unwrap();
        assert!(side.contains("scale=2e0"));
    }
}
