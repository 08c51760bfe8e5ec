//! Adam on Gaussian-perturbed gradients (stochastic gradient Langevin
//! dynamics) and the post-burn-in checkpoint window.
//!
//! Each optimizer step draws a fresh mask for one training slice, computes
//! the `1 - SSIM` loss gradient, adds `N(0, s^2)` noise to every component
//! and applies a bias-corrected Adam update. At the end of each epoch
//! `e >= t_b` the parameters are pushed into a window of capacity
//! `epochs - t_b`; the window is the posterior ensemble.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio;
use crate::error::{Error, Result};
use crate::mask::{apply_mask, MaskSpec};
use crate::metrics::{ssim_loss_grad, SsimConfig};
use crate::mix_seed;
use crate::net::{self, ArchConfig, NetworkParams, SensitivitySource};
use crate::phantom::ReconSlice;
use crate::posterior::{Checkpoint, PosteriorEnsemble};

pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            epoch: 0,
            message: format!("non-finite gradient component {i}"),
        });
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Running totals of the injected noise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseStats {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl NoiseStats {
    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Sample standard deviation.
    pub fn std(&self) -> f64 {
        let n = self.count as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0))
            .max(0.0)
            .sqrt()
    }
}

/// Adds i.i.d. `N(0, s^2)` noise to `grad` in place. `s = 0` leaves the
/// gradient untouched and draws nothing.
pub fn inject_noise_in_place(
    grad: &mut [f64],
    s: f64,
    rng: &mut impl Rng,
    stats: &mut NoiseStats,
) -> Result<()> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::config(
            "noise_std",
            format!("must be finite and >= 0, got {s}"),
        ));
    }
    if s == 0.0 {
        return Ok(());
    }
    for g in grad.iter_mut() {
        let z: f64 = rng.sample::<f64, _>(StandardNormal) * s;
        *g += z;
        stats.count += 1;
        stats.sum += z;
        stats.sum_sq += z * z;
    }
    Ok(())
}

pub fn inject_noise(grad: &[f64], s: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut out = grad.to_vec();
    inject_noise_in_place(&mut out, s, rng, &mut NoiseStats::default())?;
    Ok(out)
}

/// Noise scale as a function of the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSchedule {
    Constant(f64),
    /// `s0 * (1 + epoch)^-gamma`
    Decay {
        s0: f64,
        gamma: f64,
    },
}

impl NoiseSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            NoiseSchedule::Constant(s) => s,
            NoiseSchedule::Decay { s0, gamma } => s0 * (1.0 + epoch as f64).powf(-gamma),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSchedule::Constant(s) => s >= 0.0 && s.is_finite(),
            NoiseSchedule::Decay { s0, gamma } => {
                s0 >= 0.0 && s0.is_finite() && gamma >= 0.0 && gamma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "noise_std",
                "noise scale must be finite and >= 0",
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgldConfig {
    pub adam: AdamConfig,
    pub noise: NoiseSchedule,
    pub epochs: usize,
    /// First epoch whose end-of-epoch parameters are kept.
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            noise: NoiseSchedule::Constant(DEFAULT_LR),
            epochs: 40,
            burn_in: 31,
            seed: 0,
        }
    }
}

impl SgldConfig {
    pub fn window(&self) -> usize {
        self.epochs.saturating_sub(self.burn_in)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.burn_in >= self.epochs {
            return Err(Error::config(
                "window",
                "burn-in must leave at least one checkpoint",
            ));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        self.noise.validate()
    }
}

/// Seeds of the independent random streams of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeeds {
    pub init: u64,
    pub mask: u64,
    pub noise: u64,
    pub shuffle: u64,
}

impl StreamSeeds {
    pub fn derive(seed: u64) -> Self {
        Self {
            init: mix_seed(seed, 0x1417),
            mask: mix_seed(seed, 0x3a5c),
            noise: mix_seed(seed, 0x401e),
            shuffle: mix_seed(seed, 0x5bf1),
        }
    }

    /// Seed of the mask drawn at global optimizer step `step`.
    pub fn step_mask(&self, step: u64) -> u64 {
        mix_seed(self.mask, step)
    }

    /// Visiting order of `n` training slices in `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            self.shuffle,
            epoch as u64,
        )));
        order
    }
}

/// How each training input is formed from a slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    pub spec: MaskSpec,
    pub sensitivities: SensitivitySource,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            spec: MaskSpec::random(4),
            sensitivities: SensitivitySource::Estimated,
        }
    }
}

/// Ring buffer of the most recent post-burn-in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointWindow {
    capacity: usize,
    burn_in: usize,
    items: VecDeque<Checkpoint>,
}

impl CheckpointWindow {
    pub fn new(capacity: usize, burn_in: usize) -> Self {
        Self {
            capacity,
            burn_in,
            items: VecDeque::with_capacity(capacity),
        }
    }

    /// Keeps the checkpoint if `epoch >= burn_in`; returns whether it did.
    pub fn push(&mut self, epoch: usize, params: &NetworkParams) -> bool {
        if epoch < self.burn_in || self.capacity == 0 {
            return false;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(Checkpoint {
            epoch,
            params: params.clone(),
        });
        true
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn into_ensemble(self) -> PosteriorEnsemble {
        PosteriorEnsemble {
            members: self.items.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub noise_std: f64,
    pub checkpointed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub noise: NoiseStats,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,noise_std,checkpointed\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{}",
                r.epoch, r.mean_loss, r.noise_std, r.checkpointed
            );
        }
        out
    }
}

/// Loss and parameter gradient of one training example under `mask_seed`.
pub fn example_gradient(
    slice: &ReconSlice,
    params: &NetworkParams,
    policy: &MaskPolicy,
    mask_seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mask = policy.spec.draw(slice.height(), slice.width(), mask_seed)?;
    let masked = apply_mask(&slice.kspace, &mask)?;
    let sens = net::sensitivities_for(policy.sensitivities, &masked, &mask, Some(&slice.sens))?;
    let (recon, tape) = net::forward(&masked, &mask, &sens, params)?;
    let (loss, grad_img) =
        ssim_loss_grad(&recon, &slice.target, &SsimConfig::new(slice.target.max()))?;
    let grad = net::backward(&tape, params, &grad_img)?;
    Ok((loss, grad))
}

/// Trains from a seeded initialization and returns the checkpoint window.
pub fn train(
    slices: &[ReconSlice],
    arch: &ArchConfig,
    cfg: &SgldConfig,
    policy: &MaskPolicy,
) -> Result<(PosteriorEnsemble, TrainingLog)> {
    train_observed(slices, arch, cfg, policy, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    slices: &[ReconSlice],
    arch: &ArchConfig,
    cfg: &SgldConfig,
    policy: &MaskPolicy,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(PosteriorEnsemble, TrainingLog)> {
    cfg.validate()?;
    if slices.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let seeds = StreamSeeds::derive(cfg.seed);
    let mut params = net::init_params(arch, seeds.init)?;
    let mut adam = AdamState::new(params.values.len(), cfg.adam);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds.noise);
    let mut window = CheckpointWindow::new(cfg.window(), cfg.burn_in);
    let mut log = TrainingLog::default();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let s = cfg.noise.at(epoch);
        let mut loss_sum = 0.0;
        for idx in seeds.epoch_order(slices.len(), epoch) {
            let (loss, mut grad) =
                example_gradient(&slices[idx], &params, policy, seeds.step_mask(step))
                    .map_err(|e| with_epoch(e, epoch))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("loss is {loss} on slice {}", slices[idx].id),
                });
            }
            loss_sum += loss;
            inject_noise_in_place(&mut grad, s, &mut noise_rng, &mut log.noise)?;
            adam_step(&mut adam, &mut params.values, &grad).map_err(|e| with_epoch(e, epoch))?;
            if params.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    message: "non-finite parameters".into(),
                });
            }
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / slices.len() as f64,
            noise_std: s,
            checkpointed: window.push(epoch, &params),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok((window.into_ensemble(), log))
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { message, .. } => Error::Divergence { epoch, message },
        Error::InvalidInput(message) => Error::Divergence { epoch, message },
        other => other,
    }
}

pub const INDEX_FILE: &str = "index.txt";

fn checkpoint_file(epoch: usize) -> String {
    format!("epoch_{epoch}.npbw")
}

/// Writes `epoch_<n>.npbw` per member and an index listing the epochs in
/// ascending order.
pub fn save_ensemble(e: &PosteriorEnsemble, dir: &Path) -> Result<()> {
    e.arch()?;
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let mut members: Vec<&Checkpoint> = e.members.iter().collect();
    members.sort_by_key(|c| c.epoch);
    let mut index = String::from("# epoch file\n");
    for c in members {
        let name = checkpoint_file(c.epoch);
        c.params.save(&dir.join(&name))?;
        let _ = writeln!(index, "{} {}", c.epoch, name);
    }
    binio::write_atomic(&dir.join(INDEX_FILE), index.as_bytes())
}

pub fn load_ensemble(dir: &Path) -> Result<PosteriorEnsemble> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut members = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(epoch), Some(file), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(
                INDEX_FILE,
                format!("line {}: expected `epoch file`", n + 1),
            ));
        };
        let epoch: usize = epoch.parse().map_err(|_| {
            Error::format(INDEX_FILE, format!("line {}: bad epoch `{epoch}`", n + 1))
        })?;
        if members
            .last()
            .is_some_and(|c: &Checkpoint| c.epoch >= epoch)
        {
            return Err(Error::format(
                INDEX_FILE,
                "epochs are not strictly ascending",
            ));
        }
        let path = dir.join(file);
        let params = NetworkParams::load(&path).map_err(|e| match e {
            Error::Io { path, source } => {
                Error::format(file, format!("cannot read {}: {source}", path.display()))
            }
            other => other,
        })?;
        members.push(Checkpoint { epoch, params });
    }
    let e = PosteriorEnsemble { members };
    if e.is_empty() {
        return Err(Error::format(
            INDEX_FILE,
            "ensemble index lists no checkpoints",
        ));
    }
    e.arch()?;
    Ok(e)
}
