//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Every key is known in advance;
//! unknown keys, unparsable values and violated constraints are config
//! errors naming the key (and the line, for file input). Precedence, lowest
//! first: defaults, `NPBREC_SEED`, the file, then command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::{MaskKind, MaskSpec};
use crate::net::{ArchConfig, SensitivitySource};
use crate::phantom::{DataConfig, PhantomFamily};
use crate::sgld::{AdamConfig, MaskPolicy, NoiseSchedule, SgldConfig};

pub const SEED_ENV: &str = "NPBREC_SEED";
pub const RESOLVED_FILE: &str = "config.resolved";

/// Noise scale: tied to the learning rate, or fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseScale {
    Lr,
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseRule {
    Constant,
    Decay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub height: usize,
    pub width: usize,
    pub coils: usize,
    pub n_ellipses: usize,
    pub acq_noise_std: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub family: PhantomFamily,

    pub cascades: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub noise_rule: NoiseRule,
    pub noise_std: NoiseScale,
    pub noise_decay: f64,
    pub epochs: usize,
    pub window: usize,

    pub mask_kind: MaskKind,
    pub train_r: usize,
    pub center_fraction: Option<f64>,
    pub eval_r: Vec<usize>,
    pub radial_lines: usize,
    pub use_true_maps: bool,

    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DataConfig::default();
        let a = ArchConfig::default();
        let adam = AdamConfig::default();
        Self {
            height: d.height,
            width: d.width,
            coils: d.n_coils,
            n_ellipses: d.n_ellipses,
            acq_noise_std: d.noise_std,
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            family: d.family,
            cascades: a.cascades,
            channels: a.channels,
            layers: a.layers,
            kernel: a.kernel,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            noise_rule: NoiseRule::Constant,
            noise_std: NoiseScale::Lr,
            noise_decay: 0.55,
            epochs: 40,
            window: 9,
            mask_kind: MaskKind::RandomCartesian,
            train_r: 4,
            center_fraction: None,
            eval_r: vec![2, 4, 8],
            radial_lines: 16,
            use_true_maps: false,
            seed: 0,
            data_dir: None,
            out_dir: None,
        }
    }
}

/// Comment lines written above keys whose default departs from the
/// reference full-scale setup.
const FULL_SCALE_NOTES: &[(&str, &str)] = &[
    ("height", "320x320 fastMRI slices"),
    ("width", "320x320 fastMRI slices"),
    ("coils", "15-20 receive coils"),
    ("n_train", "tens of thousands of training slices"),
    ("cascades", "T=8 cascaded layers"),
    ("channels", "U-Net regularizer"),
    ("layers", "U-Net regularizer"),
    (
        "use_true_maps",
        "sensitivity maps estimated by a second U-Net",
    ),
];

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// All keys with their current values, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("coils", self.coils.to_string()),
            ("n_ellipses", self.n_ellipses.to_string()),
            ("acq_noise_std", format!("{:?}", self.acq_noise_std)),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("family", self.family.name().to_string()),
            ("cascades", self.cascades.to_string()),
            ("channels", self.channels.to_string()),
            ("layers", self.layers.to_string()),
            ("kernel", self.kernel.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            (
                "noise_rule",
                match self.noise_rule {
                    NoiseRule::Constant => "constant".into(),
                    NoiseRule::Decay => "decay".into(),
                },
            ),
            (
                "noise_std",
                match self.noise_std {
                    NoiseScale::Lr => "lr".into(),
                    NoiseScale::Value(v) => format!("{v:?}"),
                },
            ),
            ("noise_decay", format!("{:?}", self.noise_decay)),
            ("epochs", self.epochs.to_string()),
            ("window", self.window.to_string()),
            ("mask_kind", self.mask_kind.name().to_string()),
            ("train_r", self.train_r.to_string()),
            (
                "center_fraction",
                self.center_fraction
                    .map(|v| format!("{v:?}"))
                    .unwrap_or_else(|| "auto".into()),
            ),
            (
                "eval_r",
                self.eval_r
                    .iter()
                    .map(|r| r.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("radial_lines", self.radial_lines.to_string()),
            ("use_true_maps", self.use_true_maps.to_string()),
            ("seed", self.seed.to_string()),
            ("data_dir", path_text(&self.data_dir)),
            ("out_dir", path_text(&self.out_dir)),
        ]
    }

    fn set_raw(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "height" => self.height = parse_num(v)?,
            "width" => self.width = parse_num(v)?,
            "coils" => self.coils = parse_num(v)?,
            "n_ellipses" => self.n_ellipses = parse_num(v)?,
            "acq_noise_std" => self.acq_noise_std = parse_num(v)?,
            "n_train" => self.n_train = parse_num(v)?,
            "n_val" => self.n_val = parse_num(v)?,
            "n_test" => self.n_test = parse_num(v)?,
            "family" => {
                self.family = PhantomFamily::from_name(v).ok_or(format!("unknown family `{v}`"))?
            }
            "cascades" => self.cascades = parse_num(v)?,
            "channels" => self.channels = parse_num(v)?,
            "layers" => self.layers = parse_num(v)?,
            "kernel" => self.kernel = parse_num(v)?,
            "lr" => self.lr = parse_num(v)?,
            "beta1" => self.beta1 = parse_num(v)?,
            "beta2" => self.beta2 = parse_num(v)?,
            "adam_eps" => self.adam_eps = parse_num(v)?,
            "noise_rule" => {
                self.noise_rule = match v {
                    "constant" => NoiseRule::Constant,
                    "decay" => NoiseRule::Decay,
                    _ => return Err(format!("expected constant or decay, got `{v}`")),
                }
            }
            "noise_std" => {
                self.noise_std = if v == "lr" {
                    NoiseScale::Lr
                } else {
                    NoiseScale::Value(parse_num(v)?)
                }
            }
            "noise_decay" => self.noise_decay = parse_num(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "window" => self.window = parse_num(v)?,
            "mask_kind" => {
                self.mask_kind = MaskKind::from_name(v).ok_or(format!("unknown mask kind `{v}`"))?
            }
            "train_r" => self.train_r = parse_num(v)?,
            "center_fraction" => {
                self.center_fraction = if v == "auto" {
                    None
                } else {
                    Some(parse_num(v)?)
                }
            }
            "eval_r" => self.eval_r = parse_list(v)?,
            "radial_lines" => self.radial_lines = parse_num(v)?,
            "use_true_maps" => self.use_true_maps = parse_bool(v)?,
            "seed" => self.seed = parse_num(v)?,
            "data_dir" => self.data_dir = parse_path(v),
            "out_dir" => self.out_dir = parse_path(v),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key, value.trim())
            .map_err(|message| Error::config(key, message))
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: line.to_string(),
                    line: Some(n + 1),
                    message: "expected `key = value`".into(),
                });
            };
            let key = key.trim();
            self.set_raw(key, value.trim())
                .map_err(|message| Error::Config {
                    key: key.to_string(),
                    line: Some(n + 1),
                    message,
                })?;
        }
        Ok(())
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.height < 8 {
            return fail("height", "must be >= 8");
        }
        if self.width < 8 {
            return fail("width", "must be >= 8");
        }
        if self.coils < 1 {
            return fail("coils", "must be >= 1");
        }
        if !(self.acq_noise_std >= 0.0) {
            return fail("acq_noise_std", "must be >= 0");
        }
        if self.n_train == 0 {
            return fail("n_train", "must be >= 1");
        }
        self.arch().validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("lr", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return fail("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return fail("beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps", "must be > 0");
        }
        if let NoiseScale::Value(v) = self.noise_std {
            if !(v >= 0.0) || !v.is_finite() {
                return fail("noise_std", "must be >= 0");
            }
        }
        if !(self.noise_decay >= 0.0) {
            return fail("noise_decay", "must be >= 0");
        }
        if self.epochs < 1 {
            return fail("epochs", "must be >= 1");
        }
        if self.window < 1 || self.window > self.epochs {
            return fail("window", "must lie in [1, epochs]");
        }
        if self.mask_kind.is_cartesian() && self.train_r < 2 {
            return fail("train_r", "must be >= 2");
        }
        if let Some(cf) = self.center_fraction {
            if !(cf > 0.0 && cf < 1.0) {
                return fail("center_fraction", "must lie in (0, 1)");
            }
        }
        if self.eval_r.is_empty() || self.eval_r.iter().any(|&r| r < 2) {
            return fail("eval_r", "needs one or more accelerations >= 2");
        }
        Ok(())
    }

    /// Resolves a configuration from an optional file, the seed environment
    /// variable and `key=value` overrides.
    pub fn resolve(
        file: Option<&Path>,
        env_seed: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("cannot parse `{s}`")))?;
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved configuration as reparsable text, with a `# paper:`
    /// line above every key whose desk-scale default departs from the
    /// full-scale setup.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# npbrec resolved configuration\n");
        for (key, value) in self.entries() {
            for (k, note) in FULL_SCALE_NOTES {
                if *k == key {
                    let _ = writeln!(out, "# paper: {note}");
                }
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            height: self.height,
            width: self.width,
            n_coils: self.coils,
            n_ellipses: self.n_ellipses,
            noise_std: self.acq_noise_std,
            seed: self.seed,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            family: self.family,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            cascades: self.cascades,
            channels: self.channels,
            layers: self.layers,
            kernel: self.kernel,
        }
    }

    pub fn sgld(&self) -> SgldConfig {
        let s0 = match self.noise_std {
            NoiseScale::Lr => self.lr,
            NoiseScale::Value(v) => v,
        };
        SgldConfig {
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            noise: match self.noise_rule {
                NoiseRule::Constant => NoiseSchedule::Constant(s0),
                NoiseRule::Decay => NoiseSchedule::Decay {
                    s0,
                    gamma: self.noise_decay,
                },
            },
            epochs: self.epochs,
            burn_in: self.epochs.saturating_sub(self.window),
            seed: self.seed,
        }
    }

    pub fn sensitivity_source(&self) -> SensitivitySource {
        if self.use_true_maps {
            SensitivitySource::True
        } else {
            SensitivitySource::Estimated
        }
    }

    pub fn mask_policy(&self) -> MaskPolicy {
        MaskPolicy {
            spec: MaskSpec {
                kind: self.mask_kind,
                r: if self.mask_kind == MaskKind::Radial {
                    self.radial_lines
                } else {
                    self.train_r
                },
                center_fraction: self.center_fraction,
            },
            sensitivities: self.sensitivity_source(),
        }
    }

    /// Evaluation masks: the configured kind at every `eval_r`.
    pub fn eval_specs(&self) -> Vec<MaskSpec> {
        let kind = if self.mask_kind == MaskKind::Radial {
            MaskKind::RandomCartesian
        } else {
            self.mask_kind
        };
        self.eval_r
            .iter()
            .map(|&r| MaskSpec {
                kind,
                r,
                center_fraction: self.center_fraction,
            })
            .collect()
    }
}
