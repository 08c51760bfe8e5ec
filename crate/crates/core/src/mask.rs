//! Undersampling masks: random and equispaced Cartesian line masks and a
//! golden-angle pseudo-radial mask.
//!
//! Cartesian masks select whole k-space columns: the pattern is constant
//! along each column, so a mask is fully described by a column indicator.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fourier::MultiCoilKSpace;

/// Angular increment between successive radial spokes, in degrees.
pub const GOLDEN_ANGLE_DEG: f64 = 111.246;

const MASK_MAGIC: &[u8; 4] = b"NPBM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    RandomCartesian,
    EquispacedCartesian,
    Radial,
}

impl MaskKind {
    pub fn is_cartesian(self) -> bool {
        !matches!(self, MaskKind::Radial)
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::RandomCartesian => "random",
            MaskKind::EquispacedCartesian => "equispaced",
            MaskKind::Radial => "radial",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "random" => Some(MaskKind::RandomCartesian),
            "equispaced" => Some(MaskKind::EquispacedCartesian),
            "radial" => Some(MaskKind::Radial),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            MaskKind::RandomCartesian => 0,
            MaskKind::EquispacedCartesian => 1,
            MaskKind::Radial => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MaskKind::RandomCartesian),
            1 => Some(MaskKind::EquispacedCartesian),
            2 => Some(MaskKind::Radial),
            _ => None,
        }
    }
}

/// A binary k-space sampling pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub height: usize,
    pub width: usize,
    pub kind: MaskKind,
    /// Requested acceleration (number of spokes for radial masks is kept
    /// in the pattern itself; this is the nominal rate the caller asked for).
    pub nominal_r: f64,
    pub seed: u64,
    /// Row-major, `height * width` cells.
    pub pattern: Vec<bool>,
}

/// Default center fraction for a Cartesian acceleration rate.
///
/// Follows the usual `center_fraction * R ~= 0.32` schedule for R = 4, 8
/// and 0.03 at R = 12.
pub fn default_center_fraction(r: usize) -> f64 {
    match r {
        0..=2 => 0.16,
        3 => 0.11,
        4 => 0.08,
        5..=8 => 0.04,
        _ => 0.03,
    }
}

fn center_block(width: usize, center_fraction: f64) -> Result<(usize, usize)> {
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::config(
            "center_fraction",
            format!("must lie in (0, 1), got {center_fraction}"),
        ));
    }
    let c = ((width as f64 * center_fraction).round() as usize).max(1);
    if c >= width {
        return Err(Error::config(
            "center_fraction",
            format!("center block of {c} columns fills the whole width {width}"),
        ));
    }
    let start = width / 2 - c / 2;
    Ok((start, c))
}

fn from_columns(
    height: usize,
    width: usize,
    kind: MaskKind,
    nominal_r: f64,
    seed: u64,
    columns: &[bool],
) -> SamplingMask {
    let mut pattern = Vec::with_capacity(height * width);
    for _ in 0..height {
        pattern.extend_from_slice(columns);
    }
    SamplingMask {
        height,
        width,
        kind,
        nominal_r,
        seed,
        pattern,
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width < 2 {
        return Err(Error::config(
            "width",
            format!("degenerate mask shape {height}x{width}"),
        ));
    }
    Ok(())
}

/// Equispaced Cartesian mask: a contiguous center block plus every `r`-th
/// column starting at a seeded offset in `[0, r)`.
pub fn equispaced_cartesian(
    height: usize,
    width: usize,
    r: usize,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if r < 2 {
        return Err(Error::config(
            "R",
            format!("acceleration must be >= 2, got {r}"),
        ));
    }
    let offset = ChaCha8Rng::seed_from_u64(seed).random_range(0..r);
    equispaced_with_offset(height, width, r, center_fraction, offset, seed)
}

/// [`equispaced_cartesian`] with an explicit stride offset.
pub fn equispaced_with_offset(
    height: usize,
    width: usize,
    r: usize,
    center_fraction: f64,
    offset: usize,
    seed: u64,
) -> Result<SamplingMask> {
    check_dims(height, width)?;
    if r < 2 {
        return Err(Error::config(
            "R",
            format!("acceleration must be >= 2, got {r}"),
        ));
    }
    let (start, c) = center_block(width, center_fraction)?;
    let mut columns = vec![false; width];
    columns[start..start + c].iter_mut().for_each(|v| *v = true);
    for col in (offset % r..width).step_by(r) {
        columns[col] = true;
    }
    Ok(from_columns(
        height,
        width,
        MaskKind::EquispacedCartesian,
        r as f64,
        seed,
        &columns,
    ))
}

/// Random Cartesian mask: a contiguous center block plus i.i.d. Bernoulli
/// columns with probability chosen so the expected number of sampled
/// columns is `width / r`.
pub fn random_cartesian(
    height: usize,
    width: usize,
    r: usize,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    check_dims(height, width)?;
    if r < 2 {
        return Err(Error::config(
            "R",
            format!("acceleration must be >= 2, got {r}"),
        ));
    }
    let (start, c) = center_block(width, center_fraction)?;
    let p = (width as f64 / r as f64 - c as f64) / (width - c) as f64;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(
            "center_fraction",
            format!("outer sampling probability {p:.4} outside [0, 1]: center block larger than width/R"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = vec![false; width];
    for (col, v) in columns.iter_mut().enumerate() {
        // one draw per column keeps the stream aligned regardless of c
        let u: f64 = rng.random();
        *v = (start..start + c).contains(&col) || u < p;
    }
    Ok(from_columns(
        height,
        width,
        MaskKind::RandomCartesian,
        r as f64,
        seed,
        &columns,
    ))
}

/// Pseudo-radial mask: `n_lines` spokes through the grid center, rotated by
/// the golden angle, each rasterized by nearest-cell sampling at half-pixel
/// steps. The seed only rotates the whole spoke set for `seed > 0`.
pub fn radial_mask(height: usize, width: usize, n_lines: usize, seed: u64) -> Result<SamplingMask> {
    if n_lines < 1 {
        return Err(Error::config("lines", "need at least one spoke"));
    }
    if height == 0 || width == 0 {
        return Err(Error::config(
            "width",
            format!("degenerate mask shape {height}x{width}"),
        ));
    }
    let mut pattern = vec![false; height * width];
    let (cy, cx) = ((height / 2) as f64, (width / 2) as f64);
    let reach = ((height * height + width * width) as f64).sqrt() / 2.0 + 1.0;
    let steps = (2.0 * reach).ceil() as i64;
    let base = if seed == 0 {
        0.0
    } else {
        ChaCha8Rng::seed_from_u64(seed).random_range(0.0..180.0)
    };
    for j in 0..n_lines {
        let angle = (base + j as f64 * GOLDEN_ANGLE_DEG).to_radians();
        let (dy, dx) = (angle.sin(), angle.cos());
        for s in -steps..=steps {
            let t = s as f64 * 0.5;
            let y = (cy + t * dy).round();
            let x = (cx + t * dx).round();
            if y >= 0.0 && x >= 0.0 && (y as usize) < height && (x as usize) < width {
                pattern[y as usize * width + x as usize] = true;
            }
        }
    }
    let sampled = pattern.iter().filter(|&&v| v).count();
    Ok(SamplingMask {
        height,
        width,
        kind: MaskKind::Radial,
        nominal_r: (height * width) as f64 / sampled as f64,
        seed,
        pattern,
    })
}

impl SamplingMask {
    /// A fully sampled mask (acceleration 1).
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            kind: MaskKind::EquispacedCartesian,
            nominal_r: 1.0,
            seed: 0,
            pattern: vec![true; height * width],
        }
    }

    #[inline]
    pub fn is_sampled(&self, row: usize, col: usize) -> bool {
        self.pattern[row * self.width + col]
    }

    pub fn sampled_count(&self) -> usize {
        self.pattern.iter().filter(|&&v| v).count()
    }

    /// Column indicator; meaningful for Cartesian masks.
    pub fn columns(&self) -> Vec<bool> {
        (0..self.width)
            .map(|c| (0..self.height).all(|r| self.is_sampled(r, c)))
            .collect()
    }

    /// Whether every row carries the same pattern.
    pub fn is_column_constant(&self) -> bool {
        let first = &self.pattern[..self.width];
        self.pattern.chunks(self.width).all(|row| row == first)
    }

    /// Sampling mask as 0/1 weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        self.pattern
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect()
    }

    /// Writes the binary mask file: magic, u32 height, u32 width, u8 kind,
    /// f64 nominal R, u64 seed, then the row-major pattern bit-packed
    /// least-significant bit first. Little-endian throughout.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&[self.kind.code()])?;
        w.write_all(&self.nominal_r.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut packed = vec![0u8; self.pattern.len().div_ceil(8)];
        for (i, &v) in self.pattern.iter().enumerate() {
            if v {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::format("mask", e.to_string()))?;
        let mut cur = crate::binio::Cursor::new(&buf);
        let magic = cur.take("magic", 4)?;
        if magic != MASK_MAGIC {
            return Err(Error::format("magic", "not an NPBM mask file"));
        }
        let height = cur.u32("height")? as usize;
        let width = cur.u32("width")? as usize;
        let kind = MaskKind::from_code(cur.u8("kind")?)
            .ok_or_else(|| Error::format("kind", "unknown mask kind code"))?;
        let nominal_r = cur.f64("nominal_R")?;
        let seed = cur.u64("seed")?;
        let cells = height
            .checked_mul(width)
            .ok_or_else(|| Error::format("height", "mask dimensions overflow"))?;
        let packed = cur.take("pattern", cells.div_ceil(8))?;
        cur.finish("pattern")?;
        let pattern = (0..cells)
            .map(|i| packed[i / 8] & (1 << (i % 8)) != 0)
            .collect();
        let mask = SamplingMask {
            height,
            width,
            kind,
            nominal_r,
            seed,
            pattern,
        };
        if mask.sampled_count() == 0 {
            return Err(Error::format("pattern", "mask samples no location"));
        }
        Ok(mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("writing to memory");
        crate::binio::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Zeroes unsampled k-space locations in every coil.
pub fn apply_mask(k: &MultiCoilKSpace, mask: &SamplingMask) -> Result<MultiCoilKSpace> {
    k.validate()?;
    if k.shape() != (mask.height, mask.width) {
        return Err(Error::Dimension(format!(
            "k-space {:?} vs mask {}x{}",
            k.shape(),
            mask.height,
            mask.width
        )));
    }
    let mut out = k.clone();
    for coil in &mut out.coils {
        for (z, &keep) in coil.data.iter_mut().zip(&mask.pattern) {
            if !keep {
                *z = num_complex::Complex64::new(0.0, 0.0);
            }
        }
    }
    Ok(out)
}

/// Total locations divided by sampled locations.
pub fn measured_acceleration(mask: &SamplingMask) -> Result<f64> {
    let n = mask.sampled_count();
    if n == 0 {
        return Err(Error::InvalidInput("mask samples no location".into()));
    }
    Ok((mask.height * mask.width) as f64 / n as f64)
}

/// A serializable description of how to draw a mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Acceleration for Cartesian kinds; number of spokes for radial.
    pub r: usize,
    /// `None` selects [`default_center_fraction`].
    pub center_fraction: Option<f64>,
}

impl MaskSpec {
    pub fn random(r: usize) -> Self {
        Self {
            kind: MaskKind::RandomCartesian,
            r,
            center_fraction: None,
        }
    }

    pub fn radial(lines: usize) -> Self {
        Self {
            kind: MaskKind::Radial,
            r: lines,
            center_fraction: None,
        }
    }

    pub fn draw(&self, height: usize, width: usize, seed: u64) -> Result<SamplingMask> {
        let cf = self
            .center_fraction
            .unwrap_or_else(|| default_center_fraction(self.r));
        match self.kind {
            MaskKind::RandomCartesian => random_cartesian(height, width, self.r, cf, seed),
            MaskKind::EquispacedCartesian => equispaced_cartesian(height, width, self.r, cf, seed),
            MaskKind::Radial => radial_mask(height, width, self.r, seed),
        }
    }

    /// Label used in reports: the acceleration for Cartesian masks, the
    /// spoke count for radial ones.
    pub fn label(&self) -> String {
        format!("{}_{}", self.kind.name(), self.r)
    }
}
