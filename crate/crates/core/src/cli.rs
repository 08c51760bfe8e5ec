//! The `npbrec` command-line runner.
//!
//! Every subcommand writing a directory also writes the resolved
//! configuration (`config.resolved`) and a `status` file into it; commands
//! writing a single file put the status next to it as `<file>.status`.
//! Exit codes: 0 ok, 2 configuration or usage, 3 data/format, 4 divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::binio;
use crate::config::{RunConfig, RESOLVED_FILE, SEED_ENV};
use crate::error::{Error, Result};
use crate::mask::{self, apply_mask, MaskKind, MaskSpec, SamplingMask};
use crate::metrics::{nmse, psnr, ssim, SsimConfig};
use crate::mix_seed;
use crate::net;
use crate::phantom::{generate_slices, load_slice, DatasetManifest, PhantomFamily, Split};
use crate::posterior::{self, uncertainty_report, write_pgm16, SliceGroup};
use crate::sgld;

#[derive(Debug, Parser)]
#[command(
    name = "npbrec",
    version,
    about = "Bayesian undersampled MRI reconstruction with SGLD checkpoint ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed (falls back to NPBREC_SEED, then the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a synthetic multi-coil dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an undersampling mask file.
    GenMask {
        #[arg(long)]
        kind: String,
        /// Acceleration (Cartesian kinds).
        #[arg(long = "R", default_value_t = 4)]
        r: usize,
        #[arg(long)]
        width: usize,
        /// Defaults to the width.
        #[arg(long)]
        height: Option<usize>,
        /// Spoke count (radial).
        #[arg(long)]
        lines: Option<usize>,
        #[arg(long)]
        center_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and save the post-burn-in checkpoint window.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Posterior mean and std maps of one slice under one mask.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        slice: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-slice metrics of one split at the training acceleration.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Uncertainty against error, acceleration and distribution shift.
    UncertaintyReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated accelerations; defaults to `eval_r`.
        #[arg(long = "R")]
        r: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let (name, status_path) = status_target(&cli.command);
    let result = run(cli.command);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    if let Some(path) = status_path {
        let mut text = format!("command={name}\nexit_code={code}\n");
        match &result {
            Ok(()) => text.push_str("status=ok\n"),
            Err(e) => {
                let _ = writeln!(
                    text,
                    "status=error\nerror={}",
                    e.to_string().replace('\n', " ")
                );
            }
        }
        if path
            .parent()
            .is_some_and(|p| p.as_os_str().is_empty() || p.is_dir())
        {
            let _ = binio::write_atomic(&path, text.as_bytes());
        }
    }
    code
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn status_target(cmd: &Command) -> (&'static str, Option<PathBuf>) {
    match cmd {
        Command::GenData { out, .. } => ("gen-data", Some(out.join("status"))),
        Command::GenMask { out, .. } => ("gen-mask", Some(sibling(out, ".status"))),
        Command::Train { out, .. } => ("train", Some(out.join("status"))),
        Command::Reconstruct { out, .. } => ("reconstruct", Some(out.join("status"))),
        Command::Evaluate { out, .. } => ("evaluate", Some(sibling(out, ".status"))),
        Command::UncertaintyReport { out, .. } => ("uncertainty-report", Some(out.join("status"))),
    }
}

fn resolve(args: &ConfigArgs, extra: &[(String, String)]) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.clone(), "expected KEY=VALUE"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.extend_from_slice(extra);
    let env = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(args.config.as_deref(), env.as_deref(), &overrides)
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    binio::write_atomic(&dir.join(RESOLVED_FILE), cfg.to_text().as_bytes())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::format(
            what,
            format!("{} does not exist", path.display()),
        ))
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => {
            let cfg = resolve(&cfg, &[])?;
            make_dir(&out)?;
            echo_config(&cfg, &out)?;
            let manifest = crate::phantom::build_dataset(&cfg.data_config(), &out)?;
            eprintln!(
                "wrote {} slices to {}",
                manifest.entries.len(),
                out.display()
            );
            Ok(())
        }
        Command::GenMask {
            kind,
            r,
            width,
            height,
            lines,
            center_fraction,
            seed,
            out,
        } => {
            let kind = MaskKind::from_name(&kind)
                .ok_or_else(|| Error::config("kind", format!("unknown mask kind `{kind}`")))?;
            let height = height.unwrap_or(width);
            let spec = match kind {
                MaskKind::Radial => MaskSpec::radial(
                    lines.ok_or_else(|| Error::config("lines", "radial masks need --lines"))?,
                ),
                _ => MaskSpec {
                    kind,
                    r,
                    center_fraction,
                },
            };
            let m = spec.draw(height, width, seed)?;
            m.save(&out)?;
            eprintln!(
                "wrote {} mask, measured acceleration {:.3}",
                kind.name(),
                mask::measured_acceleration(&m)?
            );
            Ok(())
        }
        Command::Train {
            cfg,
            data,
            out,
            epochs,
        } => {
            let extra: Vec<(String, String)> = epochs
                .map(|e| ("epochs".to_string(), e.to_string()))
                .into_iter()
                .collect();
            let cfg = resolve(&cfg, &extra)?;
            make_dir(&out)?;
            echo_config(&cfg, &out)?;
            require(&data, "data")?;
            let manifest = DatasetManifest::load(&data)?;
            let slices = manifest.load_split(&data, Split::Train)?;
            let (ensemble, log) =
                sgld::train_observed(&slices, &cfg.arch(), &cfg.sgld(), &cfg.mask_policy(), |r| {
                    eprintln!(
                        "epoch {:>3}  loss {:.5}{}",
                        r.epoch,
                        r.mean_loss,
                        if r.checkpointed { "  *" } else { "" }
                    );
                })?;
            sgld::save_ensemble(&ensemble, &out)?;
            binio::write_atomic(&out.join("training_log.csv"), log.to_csv().as_bytes())?;
            Ok(())
        }
        Command::Reconstruct {
            cfg,
            ensemble,
            slice,
            mask,
            out,
        } => {
            let cfg = resolve(&cfg, &[])?;
            make_dir(&out)?;
            echo_config(&cfg, &out)?;
            require(&ensemble, "ensemble")?;
            let ens = sgld::load_ensemble(&ensemble)?;
            let s = load_slice(&slice)?;
            let m = SamplingMask::load(&mask)?;
            let masked = apply_mask(&s.kspace, &m)?;
            let sens =
                net::sensitivities_for(cfg.sensitivity_source(), &masked, &m, Some(&s.sens))?;
            let rec = posterior::reconstruct(&ens, &masked, &m, &sens)?;
            write_pgm16(&rec.mean, &out.join("mean.pgm"))?;
            write_pgm16(&rec.std, &out.join("std.pgm"))?;
            let dr = s.target.max();
            let zf = net::zero_filled(&masked)?;
            let text = format!(
                "slice_id={}\nsamples={}\nuncertainty={:e}\npsnr_db={}\nssim={}\nzero_filled_psnr_db={}\n",
                s.id,
                ens.len(),
                rec.uncertainty,
                psnr(&rec.mean, &s.target, dr)?,
                ssim(&rec.mean, &s.target, &SsimConfig::new(dr))?,
                psnr(&zf, &s.target, dr)?,
            );
            binio::write_atomic(&out.join("summary.txt"), text.as_bytes())
        }
        Command::Evaluate {
            cfg,
            ensemble,
            data,
            split,
            out,
        } => {
            let cfg = resolve(&cfg, &[])?;
            let split = Split::from_name(&split)
                .ok_or_else(|| Error::config("split", format!("unknown split `{split}`")))?;
            require(&ensemble, "ensemble")?;
            let ens = sgld::load_ensemble(&ensemble)?;
            let manifest = DatasetManifest::load(&data)?;
            let slices = manifest.load_split(&data, split)?;
            let spec = cfg.mask_policy().spec;
            let mut csv = String::from(
                "slice_id,mask_kind,R,psnr_db,ssim,nmse,zero_filled_psnr_db,uncertainty\n",
            );
            for (i, s) in slices.iter().enumerate() {
                let m = spec.draw(
                    s.height(),
                    s.width(),
                    mix_seed(mix_seed(cfg.seed, 0xe7a1), i as u64),
                )?;
                let masked = apply_mask(&s.kspace, &m)?;
                let sens =
                    net::sensitivities_for(cfg.sensitivity_source(), &masked, &m, Some(&s.sens))?;
                let rec = posterior::reconstruct(&ens, &masked, &m, &sens)?;
                let dr = s.target.max();
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{:e},{},{:e}",
                    s.id,
                    spec.kind.name(),
                    spec.r,
                    psnr(&rec.mean, &s.target, dr)?,
                    ssim(&rec.mean, &s.target, &SsimConfig::new(dr))?,
                    nmse(&rec.mean, &s.target)?,
                    psnr(&net::zero_filled(&masked)?, &s.target, dr)?,
                    rec.uncertainty
                );
            }
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                make_dir(parent)?;
            }
            binio::write_atomic(&out, csv.as_bytes())
        }
        Command::UncertaintyReport {
            cfg,
            ensemble,
            data,
            r,
            out,
        } => {
            let extra: Vec<(String, String)> =
                r.map(|r| ("eval_r".to_string(), r)).into_iter().collect();
            let cfg = resolve(&cfg, &extra)?;
            make_dir(&out)?;
            echo_config(&cfg, &out)?;
            require(&ensemble, "ensemble")?;
            let ens = sgld::load_ensemble(&ensemble)?;
            let manifest = DatasetManifest::load(&data)?;
            let test = manifest.load_split(&data, Split::Test)?;
            let in_family = manifest.config.family;
            let shifted = match in_family {
                PhantomFamily::Ellipses => PhantomFamily::Rectangles,
                PhantomFamily::Rectangles => PhantomFamily::Ellipses,
            };
            let ood = generate_slices(
                &manifest.config,
                shifted,
                test.len(),
                mix_seed(manifest.config.seed, 0x00d5),
                shifted.name(),
            )?;
            let groups = [
                SliceGroup {
                    name: in_family.name().into(),
                    slices: test,
                },
                SliceGroup {
                    name: shifted.name().into(),
                    slices: ood,
                },
            ];
            let mut specs = cfg.eval_specs();
            if cfg.radial_lines > 0 {
                specs.push(MaskSpec::radial(cfg.radial_lines));
            }
            let report = uncertainty_report(
                &ens,
                &groups,
                &specs,
                cfg.sensitivity_source(),
                mix_seed(cfg.seed, 0x4e90),
            )?;
            binio::write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
            binio::write_atomic(
                &out.join("summary.txt"),
                report.summary.to_text().as_bytes(),
            )
        }
    }
}
