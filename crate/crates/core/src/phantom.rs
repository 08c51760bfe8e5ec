//! Synthetic multi-coil slices: random ellipse (or rectangle) phantoms with
//! smooth phase, Gaussian-bump coil sensitivities, the `NPBR` slice file
//! format and dataset manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Cursor};
use crate::error::{Error, Result};
use crate::fourier::{self, CoilSensitivities, ComplexImage, MultiCoilKSpace, RealImage};
use crate::mix_seed;

const SLICE_MAGIC: &[u8; 4] = b"NPBR";
const SLICE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhantomFamily {
    Ellipses,
    Rectangles,
}

impl PhantomFamily {
    pub fn name(self) -> &'static str {
        match self {
            PhantomFamily::Ellipses => "ellipses",
            PhantomFamily::Rectangles => "rectangles",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "ellipses" => Some(PhantomFamily::Ellipses),
            "rectangles" => Some(PhantomFamily::Rectangles),
            _ => None,
        }
    }
}

/// One uniform-intensity region in normalized coordinates, where the image
/// spans `[-1, 1]` along both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub center: (f64, f64),
    /// Semi-axes (ellipse) or half-sides (rectangle), before rotation.
    pub half_extent: (f64, f64),
    pub angle: f64,
    pub intensity: f64,
}

impl Region {
    /// Coordinates of `(u, v)` in the region's rotated frame.
    fn local(&self, u: f64, v: f64) -> (f64, f64) {
        let (du, dv) = (u - self.center.0, v - self.center.1);
        let (s, c) = self.angle.sin_cos();
        (c * du + s * dv, -s * du + c * dv)
    }

    pub fn contains(&self, family: PhantomFamily, u: f64, v: f64) -> bool {
        let (x, y) = self.local(u, v);
        let (a, b) = self.half_extent;
        match family {
            PhantomFamily::Ellipses => (x / a).powi(2) + (y / b).powi(2) <= 1.0,
            PhantomFamily::Rectangles => x.abs() <= a && y.abs() <= b,
        }
    }
}

/// Normalized coordinate of pixel center `i` on an axis of length `n`.
#[inline]
pub fn pixel_coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Full parameterization of a random phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub family: PhantomFamily,
    pub regions: Vec<Region>,
    /// Phase polynomial coefficients for `1, u, v, uv, u^2, v^2`.
    pub phase: [f64; 6],
}

impl PhantomSpec {
    /// Draws a phantom: a large body region followed by `n_regions - 1`
    /// smaller inclusions with positive or negative contrast.
    pub fn random(family: PhantomFamily, n_regions: usize, seed: u64) -> Result<Self> {
        if n_regions < 1 {
            return Err(Error::config("n_ellipses", "need at least one region"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut regions = Vec::with_capacity(n_regions);
        // Rectangles get the area of the ellipse they replace, so the two
        // families differ in shape only.
        let scale = match family {
            PhantomFamily::Ellipses => 1.0,
            PhantomFamily::Rectangles => std::f64::consts::PI.sqrt() / 2.0,
        };
        regions.push(Region {
            center: (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            half_extent: (
                scale * rng.random_range(0.6..0.85),
                scale * rng.random_range(0.6..0.85),
            ),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: rng.random_range(0.5..0.8),
        });
        for _ in 1..n_regions {
            regions.push(Region {
                center: (rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45)),
                half_extent: (
                    scale * rng.random_range(0.08..0.3),
                    scale * rng.random_range(0.08..0.3),
                ),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                intensity: rng.random_range(-0.3..0.4),
            });
        }
        let mut phase = [0.0; 6];
        phase[0] = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        for c in &mut phase[1..] {
            *c = rng.random_range(-0.4..0.4);
        }
        Ok(Self {
            family,
            regions,
            phase,
        })
    }

    /// Sum of region indicators times intensities, clipped to `[0, 1]`.
    pub fn magnitude(&self, height: usize, width: usize) -> RealImage {
        let mut img = RealImage::zeros(height, width);
        for r in 0..height {
            let v = pixel_coord(r, height);
            for c in 0..width {
                let u = pixel_coord(c, width);
                let sum: f64 = self
                    .regions
                    .iter()
                    .filter(|reg| reg.contains(self.family, u, v))
                    .map(|reg| reg.intensity)
                    .sum();
                img.data[r * width + c] = sum.clamp(0.0, 1.0);
            }
        }
        img
    }

    pub fn phase_at(&self, u: f64, v: f64) -> f64 {
        let p = &self.phase;
        p[0] + p[1] * u + p[2] * v + p[3] * u * v + p[4] * u * u + p[5] * v * v
    }

    pub fn render(&self, height: usize, width: usize) -> ComplexImage {
        let mag = self.magnitude(height, width);
        let mut out = ComplexImage::zeros(height, width);
        for r in 0..height {
            let v = pixel_coord(r, height);
            for c in 0..width {
                let u = pixel_coord(c, width);
                out.data[r * width + c] =
                    Complex64::from_polar(mag.data[r * width + c], self.phase_at(u, v));
            }
        }
        out
    }
}

fn check_geometry(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::config(
            "height",
            format!("degenerate image shape {height}x{width}"),
        ));
    }
    Ok(())
}

/// Random ellipse phantom with smooth phase.
pub fn gen_phantom(
    height: usize,
    width: usize,
    n_ellipses: usize,
    seed: u64,
) -> Result<ComplexImage> {
    gen_phantom_family(PhantomFamily::Ellipses, height, width, n_ellipses, seed)
}

pub fn gen_phantom_family(
    family: PhantomFamily,
    height: usize,
    width: usize,
    n_regions: usize,
    seed: u64,
) -> Result<ComplexImage> {
    check_geometry(height, width)?;
    Ok(PhantomSpec::random(family, n_regions, seed)?.render(height, width))
}

/// Border angle of coil `i` out of `n_coils`, in radians.
pub fn coil_angle(i: usize, n_coils: usize) -> f64 {
    2.0 * std::f64::consts::PI * i as f64 / n_coils as f64
}

/// Coil sensitivities: one Gaussian bump per coil centered on the image
/// border at angle `2 pi i / n_coils`, each with a random linear phase,
/// jointly normalized so `sum_i |S_i|^2 = 1` at every pixel.
pub fn gen_sensitivities(
    height: usize,
    width: usize,
    n_coils: usize,
    seed: u64,
) -> Result<CoilSensitivities> {
    check_geometry(height, width)?;
    if n_coils < 1 {
        return Err(Error::config("coils", "need at least one coil"));
    }
    let sigma: f64 = 0.9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(n_coils);
    for i in 0..n_coils {
        let (s, c) = coil_angle(i, n_coils).sin_cos();
        let scale = c.abs().max(s.abs());
        let (cu, cv) = (c / scale, s / scale);
        let ph = [
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ];
        let mut map = ComplexImage::zeros(height, width);
        for r in 0..height {
            let v = pixel_coord(r, height);
            for col in 0..width {
                let u = pixel_coord(col, width);
                let d2 = (u - cu).powi(2) + (v - cv).powi(2);
                let mag = (-d2 / (2.0 * sigma * sigma)).exp();
                map.data[r * width + col] =
                    Complex64::from_polar(mag, ph[0] + ph[1] * u + ph[2] * v);
            }
        }
        maps.push(map);
    }
    let mut sens = CoilSensitivities {
        maps,
        normalized: false,
    };
    sens.normalize(0.0);
    Ok(sens)
}

/// A fully sampled training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconSlice {
    pub id: String,
    pub kspace: MultiCoilKSpace,
    pub sens: CoilSensitivities,
    /// Ground-truth RSS magnitude of the fully sampled k-space.
    pub target: RealImage,
}

fn round_f32(z: Complex64) -> Complex64 {
    Complex64::new(z.re as f32 as f64, z.im as f32 as f64)
}

impl ReconSlice {
    pub fn height(&self) -> usize {
        self.target.height
    }

    pub fn width(&self) -> usize {
        self.target.width
    }

    /// Simulates a slice. K-space and maps are rounded to single precision
    /// before the target is computed, so the stored file reproduces the
    /// in-memory slice exactly.
    pub fn simulate(
        id: impl Into<String>,
        family: PhantomFamily,
        geometry: &DataConfig,
        seed: u64,
    ) -> Result<Self> {
        let (h, w) = (geometry.height, geometry.width);
        let x = gen_phantom_family(family, h, w, geometry.n_ellipses, mix_seed(seed, 1))?;
        let mut sens = gen_sensitivities(h, w, geometry.n_coils, mix_seed(seed, 2))?;
        let mut kspace = fourier::acquire(&x, &sens, geometry.noise_std, mix_seed(seed, 3))?;
        for img in kspace.coils.iter_mut().chain(sens.maps.iter_mut()) {
            img.data.iter_mut().for_each(|z| *z = round_f32(*z));
        }
        let mut target = fourier::zero_filled(&kspace)?;
        target.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        Ok(Self {
            id: id.into(),
            kspace,
            sens,
            target,
        })
    }

    /// Serializes to the `NPBR` layout: magic, u16 version, u32 height,
    /// width and coil count, complex64 k-space (coil-major, row-major),
    /// complex64 sensitivities, float32 target. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let nc = self.kspace.n_coils();
        let mut out = Vec::with_capacity(18 + nc * h * w * 16 + h * w * 4);
        out.extend_from_slice(SLICE_MAGIC);
        out.extend_from_slice(&SLICE_VERSION.to_le_bytes());
        for v in [h, w, nc] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for img in self.kspace.coils.iter().chain(&self.sens.maps) {
            for z in &img.data {
                out.extend_from_slice(&(z.re as f32).to_le_bytes());
                out.extend_from_slice(&(z.im as f32).to_le_bytes());
            }
        }
        for v in &self.target.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take("magic", 4)? != SLICE_MAGIC {
            return Err(Error::format("magic", "not an NPBR slice file"));
        }
        let version = cur.u16("version")?;
        if version != SLICE_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let h = cur.u32("height")? as usize;
        let w = cur.u32("width")? as usize;
        let nc = cur.u32("n_coils")? as usize;
        if nc == 0 {
            return Err(Error::format("n_coils", "zero coils"));
        }
        let payload = h
            .checked_mul(w)
            .and_then(|hw| hw.checked_mul(nc))
            .and_then(|n| n.checked_mul(16))
            .and_then(|n| n.checked_add(h * w * 4))
            .ok_or_else(|| Error::format("height", "dimensions overflow"))?;
        if bytes.len() - 18 < payload {
            return Err(Error::format(
                "payload",
                format!(
                    "truncated: expected {payload} bytes after header, found {}",
                    bytes.len() - 18
                ),
            ));
        }
        let mut read_images = |field: &str| -> Result<Vec<ComplexImage>> {
            (0..nc)
                .map(|_| {
                    let data = (0..h * w)
                        .map(|_| {
                            let re = cur.f32(field)? as f64;
                            let im = cur.f32(field)? as f64;
                            Ok(Complex64::new(re, im))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ComplexImage::from_vec(h, w, data)
                })
                .collect()
        };
        let coils = read_images("kspace")?;
        let maps = read_images("sensitivities")?;
        let target = (0..h * w)
            .map(|_| Ok(cur.f32("target")? as f64))
            .collect::<Result<Vec<_>>>()?;
        cur.finish("payload")?;
        Ok(Self {
            id: id.into(),
            kspace: MultiCoilKSpace { coils },
            sens: CoilSensitivities {
                maps,
                normalized: true,
            },
            target: RealImage::from_vec(h, w, target)?,
        })
    }
}

pub fn save_slice(slice: &ReconSlice, path: &Path) -> Result<()> {
    binio::write_atomic(path, &slice.to_bytes())
}

/// Loads a slice; its id is the file stem.
pub fn load_slice(path: &Path) -> Result<ReconSlice> {
    let bytes = binio::read_file(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ReconSlice::from_bytes(id, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometry and split sizes of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub n_coils: usize,
    pub n_ellipses: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub family: PhantomFamily,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_coils: 4,
            n_ellipses: 8,
            noise_std: 0.0,
            seed: 0,
            n_train: 200,
            n_val: 10,
            n_test: 20,
            family: PhantomFamily::Ellipses,
        }
    }
}

impl DataConfig {
    pub fn n_slices(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    fn header_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("coils", self.n_coils.to_string()),
            ("n_ellipses", self.n_ellipses.to_string()),
            ("noise_std", format!("{:?}", self.noise_std)),
            ("seed", self.seed.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("family", self.family.name().to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::format(key, format!("cannot parse `{v}`")))
        }
        match key {
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "coils" => self.n_coils = num(key, value)?,
            "n_ellipses" => self.n_ellipses = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_val" => self.n_val = num(key, value)?,
            "n_test" => self.n_test = num(key, value)?,
            "family" => {
                self.family = PhantomFamily::from_name(value)
                    .ok_or_else(|| Error::format(key, format!("unknown family `{value}`")))?
            }
            _ => return Err(Error::format(key, "unknown manifest header key")),
        }
        Ok(())
    }
}

/// Slice ids with split labels, plus the configuration that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub config: DataConfig,
    pub entries: Vec<(String, Split)>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.config.header_pairs() {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        for (id, split) in &self.entries {
            out.push_str(&format!("{id}\t{split}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = DataConfig::default();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    config.set(k.trim(), v.trim())?;
                }
                continue;
            }
            let (id, split) = line.split_once('\t').ok_or_else(|| {
                Error::format(
                    "manifest",
                    format!("line {}: expected `id<TAB>split`", lineno + 1),
                )
            })?;
            let split = Split::from_name(split).ok_or_else(|| {
                Error::format(
                    "manifest",
                    format!("line {}: unknown split `{split}`", lineno + 1),
                )
            })?;
            entries.push((id.to_string(), split));
        }
        Ok(Self { config, entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn slice_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.npbr"))
    }

    /// Loads every slice of one split, in manifest order.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<ReconSlice>> {
        self.ids(split)
            .map(|id| load_slice(&Self::slice_path(dir, id)))
            .collect()
    }
}

/// Generates `count` in-memory slices with ids `<prefix>_<nnnn>`.
pub fn generate_slices(
    config: &DataConfig,
    family: PhantomFamily,
    count: usize,
    seed: u64,
    prefix: &str,
) -> Result<Vec<ReconSlice>> {
    (0..count)
        .map(|i| {
            ReconSlice::simulate(
                format!("{prefix}_{i:04}"),
                family,
                config,
                mix_seed(seed, i as u64),
            )
        })
        .collect()
}

/// Generates all slices into `output_dir` and writes the manifest.
/// Splits are assigned by a seeded permutation of the slice indices.
pub fn build_dataset(config: &DataConfig, output_dir: &Path) -> Result<DatasetManifest> {
    check_geometry(config.height, config.width)?;
    if config.n_coils < 1 {
        return Err(Error::config("coils", "need at least one coil"));
    }
    if config.n_slices() == 0 {
        return Err(Error::config("n_train", "dataset would be empty"));
    }
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let n = config.n_slices();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
        config.seed,
        0x5111,
    )));
    let mut split_of = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        split_of[idx] = if rank < config.n_train {
            Split::Train
        } else if rank < config.n_train + config.n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut entries = Vec::with_capacity(n);
    for (i, split) in split_of.into_iter().enumerate() {
        let id = format!("slice_{i:04}");
        let slice =
            ReconSlice::simulate(&id, config.family, config, mix_seed(config.seed, i as u64))?;
        save_slice(&slice, &DatasetManifest::slice_path(output_dir, &id))?;
        entries.push((id, split));
    }
    let manifest = DatasetManifest {
        config: config.clone(),
        entries,
    };
    binio::write_atomic(
        &output_dir.join(MANIFEST_FILE),
        manifest.to_text().as_bytes(),
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DataConfig {
        DataConfig {
            height: 24,
            width: 20,
            n_coils: 3,
            n_ellipses: 4,
            n_train: 8,
            n_val: 1,
            n_test: 1,
            seed: 5,
            ..DataConfig::default()
        }
    }

    #[test]
    fn phantom_magnitude_is_clipped_and_deterministic() {
        for seed in 0..20 {
            let x = gen_phantom(32, 32, 6, seed).unwrap();
            assert!(x.data.iter().all(|z| z.norm() <= 1.0 + 1e-12));
            assert_eq!(x, gen_phantom(32, 32, 6, seed).unwrap());
        }
        assert!(gen_phantom(1, 32, 6, 0).is_err());
        assert!(gen_phantom(32, 32, 0, 0).is_err());
    }

    #[test]
    fn families_share_region_areas() {
        let e = PhantomSpec::random(PhantomFamily::Ellipses, 6, 4).unwrap();
        let r = PhantomSpec::random(PhantomFamily::Rectangles, 6, 4).unwrap();
        for (a, b) in e.regions.iter().zip(&r.regions) {
            let ellipse = std::f64::consts::PI * a.half_extent.0 * a.half_extent.1;
            let rect = 4.0 * b.half_extent.0 * b.half_extent.1;
            assert!((ellipse - rect).abs() < 1e-12);
            assert_eq!(
                (a.center, a.angle, a.intensity),
                (b.center, b.angle, b.intensity)
            );
        }
    }

    #[test]
    fn single_ellipse_matches_its_equation() {
        let spec = PhantomSpec::random(PhantomFamily::Ellipses, 1, 17).unwrap();
        let reg = spec.regions[0];
        let img = gen_phantom(40, 36, 1, 17).unwrap();
        for r in 0..40 {
            for c in 0..36 {
                let (u, v) = (pixel_coord(c, 36), pixel_coord(r, 40));
                let (du, dv) = (u - reg.center.0, v - reg.center.1);
                let x = reg.angle.cos() * du + reg.angle.sin() * dv;
                let y = -reg.angle.sin() * du + reg.angle.cos() * dv;
                let inside = x * x / (reg.half_extent.0 * reg.half_extent.0)
                    + y * y / (reg.half_extent.1 * reg.half_extent.1)
                    <= 1.0;
                let expected = if inside { reg.intensity } else { 0.0 };
                assert!((img.at(r, c).norm() - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sensitivities_are_normalized() {
        for nc in [1, 2, 4, 7] {
            let s = gen_sensitivities(16, 20, nc, 3).unwrap();
            assert!(s.normalized);
            for p in 0..16 * 20 {
                let e: f64 = s.maps.iter().map(|m| m.data[p].norm_sqr()).sum();
                assert!((e - 1.0).abs() < 1e-6);
            }
            if nc == 1 {
                assert!(s.maps[0]
                    .data
                    .iter()
                    .all(|z| (z.norm() - 1.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn coil_peaks_sit_at_their_border_angles() {
        let nc = 4;
        let (h, w) = (48, 48);
        let s = gen_sensitivities(h, w, nc, 8).unwrap();
        for (i, map) in s.maps.iter().enumerate() {
            let (p, _) = map
                .data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
                .unwrap();
            let (r, c) = (p / w, p % w);
            let angle = pixel_coord(r, h).atan2(pixel_coord(c, w));
            let expected = coil_angle(i, nc);
            let diff = (angle - expected + 3.0 * std::f64::consts::PI)
                .rem_euclid(2.0 * std::f64::consts::PI)
                - std::f64::consts::PI;
            assert!(
                diff.abs() < std::f64::consts::PI / nc as f64,
                "coil {i}: {angle} vs {expected}"
            );
        }
    }

    #[test]
    fn dc_matches_weighted_sum() {
        let cfg = small_config();
        let x = gen_phantom(cfg.height, cfg.width, 4, 2).unwrap();
        let s = gen_sensitivities(cfg.height, cfg.width, 3, 2).unwrap();
        let k = fourier::acquire(&x, &s, 0.0, 0).unwrap();
        let norm = 1.0 / ((cfg.height * cfg.width) as f64).sqrt();
        for (coil, map) in k.coils.iter().zip(&s.maps) {
            let expected: Complex64 = map
                .data
                .iter()
                .zip(&x.data)
                .map(|(a, b)| a * b)
                .sum::<Complex64>()
                * norm;
            let dc = coil.at(cfg.height / 2, cfg.width / 2);
            assert!((dc - expected).norm() < 1e-8);
        }
    }

    #[test]
    fn slice_target_is_rss_of_kspace() {
        let cfg = small_config();
        let slice = ReconSlice::simulate("a", PhantomFamily::Ellipses, &cfg, 4).unwrap();
        let rss = fourier::zero_filled(&slice.kspace).unwrap();
        for (a, b) in rss.data.iter().zip(&slice.target.data) {
            // target is stored in single precision
            assert!((a - b).abs() < 1e-6);
        }
        assert!(slice
            .target
            .data
            .iter()
            .all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
    }

    #[test]
    fn slice_bytes_roundtrip_and_errors() {
        let cfg = small_config();
        let slice = ReconSlice::simulate("s", PhantomFamily::Rectangles, &cfg, 9).unwrap();
        let bytes = slice.to_bytes();
        let back = ReconSlice::from_bytes("s", &bytes).unwrap();
        assert_eq!(back, slice);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(
            matches!(ReconSlice::from_bytes("s", &bad), Err(Error::Format { field, .. }) if field == "magic")
        );
        assert!(matches!(
            ReconSlice::from_bytes("s", &bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        assert!(ReconSlice::from_bytes("s", &bytes[..10]).is_err());
        let mut huge = bytes.clone();
        huge[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            ReconSlice::from_bytes("s", &huge),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn dataset_splits_and_determinism() {
        let cfg = small_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = build_dataset(&cfg, a.path()).unwrap();
        assert_eq!(m.ids(Split::Train).count(), 8);
        assert_eq!(m.ids(Split::Val).count(), 1);
        assert_eq!(m.ids(Split::Test).count(), 1);
        build_dataset(&cfg, b.path()).unwrap();
        for (id, _) in &m.entries {
            let pa = fs::read(DatasetManifest::slice_path(a.path(), id)).unwrap();
            let pb = fs::read(DatasetManifest::slice_path(b.path(), id)).unwrap();
            assert_eq!(pa, pb);
        }
        let reread = DatasetManifest::load(a.path()).unwrap();
        assert_eq!(reread, m);
        for slice in reread.load_split(a.path(), Split::Train).unwrap() {
            let rss = fourier::zero_filled(&slice.kspace).unwrap();
            for (x, y) in rss.data.iter().zip(&slice.target.data) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
