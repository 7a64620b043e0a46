//! Command-line front end. Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{self, RunConfig, SplitMode};
use crate::dataset::{self, Manifest};
use crate::neuralnet::Checkpoint;
use crate::physics::{self, Fluid, Regime, TestProtocol, VialGeometry};
use crate::pipeline::{self, RunManifest, Viscosities};
use crate::rheology;

#[derive(Parser, Debug)]
#[command(name = "vialflow", version, about = "Viscosity estimation from vial-inversion videos")]
struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dimensionless numbers and regime of a Newtonian fluid in the vial.
    #[command(allow_negative_numbers = true)]
    Physics {
        /// Viscosity, Pa·s.
        #[arg(long)]
        eta: f64,
        /// Density, kg/m³.
        #[arg(long)]
        rho: f64,
        /// Surface tension, N/m.
        #[arg(long, default_value_t = physics::DEFAULT_SURFACE_TENSION)]
        gamma: f64,
        /// Interior radius, m.
        #[arg(long)]
        radius: Option<f64>,
        /// Fill volume, m³.
        #[arg(long)]
        fill_volume: Option<f64>,
        /// Inversion time, s.
        #[arg(long)]
        t_flip: Option<f64>,
        /// Measured interface speed, m/s.
        #[arg(long)]
        u_measured: Option<f64>,
        /// Regime the measured speed belongs to.
        #[arg(long)]
        regime: Option<Regime>,
        /// Relaxation time, s (adds the Deborah number).
        #[arg(long)]
        tau: Option<f64>,
        /// Critical stress for shear thinning, Pa (adds the stress amplitude).
        #[arg(long)]
        sigma_crit: Option<f64>,
        /// Flow stress, Pa; defaults to the Taylor-drop stress.
        #[arg(long)]
        sigma_flow: Option<f64>,
    },
    /// Simulate, render and preprocess a synthetic dataset.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// logspace:LO:HI:N or a comma-separated list, Pa·s.
        #[arg(long)]
        viscosities: Option<String>,
        #[arg(long)]
        n_per_group: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Partition a manifest into train.tsv and test.tsv.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = ["aleatoric", "epistemic"])]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        holdout: Option<usize>,
        /// Output directory; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// desk or paper.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss history file; defaults to <out>.history.tsv.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Mean and standard deviation of the viscosity over the augmented ROIs of one sample.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Preprocessed tensor file.
        #[arg(long)]
        sample: PathBuf,
        /// Density, kg/m³.
        #[arg(long)]
        density: f64,
    },
    /// Residual report of a model on a test manifest.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Training manifest, checked for shared samples.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
}

type AnyResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn command() -> clap::Command {
    Cli::command().after_long_help(config::key_reference())
}

/// Parses `args` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return 2;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    match execute(cli.command, cfg, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> config::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    let pairs = cli
        .set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (0, k.trim(), v.trim()))
                .ok_or_else(|| config::ConfigError::Syntax {
                    line: 0,
                    msg: format!("--set expects KEY=VALUE, got '{s}'"),
                })
        })
        .collect::<config::Result<Vec<_>>>()?;
    cfg.apply(pairs)?;
    Ok(cfg)
}

fn execute(cmd: Command, mut cfg: RunConfig, out: &mut dyn Write) -> AnyResult<()> {
    match cmd {
        Command::Physics {
            eta,
            rho,
            gamma,
            radius,
            fill_volume,
            t_flip,
            u_measured,
            regime,
            tau,
            sigma_crit,
            sigma_flow,
        } => {
            let fluid = Fluid::with_interface(eta, rho, gamma, 0.0)?;
            let geom = VialGeometry::from_volumes(
                radius.unwrap_or(cfg.radius),
                cfg.vial_volume,
                fill_volume.unwrap_or(cfg.fill_volume),
            )?;
            let protocol = TestProtocol {
                t_flip: t_flip.unwrap_or(cfg.data.protocol.t_flip),
                ..cfg.data.protocol.clone()
            };
            protocol.validate()?;
            let r = physics::dimensionless_report(&fluid, &geom, &protocol)?;
            writeln!(out, "u_vg\t{:.4e}\tm/s", r.u_vg)?;
            writeln!(out, "Re_vg\t{:.4}", r.re_vg)?;
            writeln!(out, "Re_flip\t{:.4}", r.re_flip)?;
            writeln!(out, "Bo\t{:.4}", r.bo)?;
            writeln!(out, "sigma_taylor\t{:.4}\tPa", r.sigma_taylor)?;
            writeln!(out, "initial_regime\t{}", r.initial_regime)?;
            if let Some(u) = u_measured {
                let reg = regime.unwrap_or(r.initial_regime);
                writeln!(out, "Re_exp\t{:.4}", physics::reynolds_exp(&fluid, &geom, reg, u))?;
            }
            if let Some(tau) = tau {
                writeln!(out, "De\t{:.4}", rheology::deborah(tau, protocol.t_flip)?)?;
            }
            if let Some(sc) = sigma_crit {
                let sf = sigma_flow.unwrap_or(r.sigma_taylor);
                writeln!(out, "stress_amplitude\t{:.4}", rheology::stress_amplitude(sf, sc)?)?;
            }
        }
        Command::Simulate {
            out: dir,
            viscosities,
            n_per_group,
            seed,
            jobs,
        } => {
            if let Some(v) = viscosities {
                cfg.data.viscosities = Viscosities::parse(&v)?;
            }
            if let Some(n) = n_per_group {
                cfg.data.n_per_group = n;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let spec = cfg.generate_spec()?;
            let m = pipeline::generate_dataset(&spec, &dir, jobs)?;
            fs::write(dir.join("run_config.txt"), cfg.to_text())?;
            writeln!(out, "{} samples in {} groups -> {}", m.records.len(), m.groups().len(), dir.join("manifest.tsv").display())?;
        }
        Command::Split {
            manifest,
            mode,
            seed,
            holdout,
            out: dir,
        } => {
            let m = Manifest::read(&manifest)?;
            if let Some(mode) = mode {
                cfg.split.mode = if mode == "epistemic" { SplitMode::Epistemic } else { SplitMode::Aleatoric };
            }
            if let Some(s) = seed {
                cfg.split.seed = s;
            }
            if let Some(h) = holdout {
                cfg.split.holdout = h;
            }
            let (train, test) = match cfg.split.mode {
                SplitMode::Aleatoric => dataset::split_aleatoric_with(&m, cfg.split.seed, cfg.split.test_fraction)?,
                SplitMode::Epistemic => dataset::split_epistemic(&m, cfg.split.holdout)?,
            };
            let dir = dir.unwrap_or_else(|| m.root.clone());
            fs::create_dir_all(&dir)?;
            let (train, test) = (relocate(train, &dir)?, relocate(test, &dir)?);
            train.write(&dir.join("train.tsv"))?;
            test.write(&dir.join("test.tsv"))?;
            writeln!(
                out,
                "train {} samples / {} groups; test {} samples / {} groups",
                train.records.len(),
                train.groups().len(),
                test.records.len(),
                test.groups().len()
            )?;
        }
        Command::Train {
            manifest,
            out: ckpt_path,
            preset,
            seed,
            epochs,
            history,
        } => {
            if let Some(p) = preset {
                cfg.apply([(0, "train.preset", p.as_str())])?;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            cfg.validate()?;
            let m = Manifest::read(&manifest)?;
            let result = pipeline::train(&cfg.train, &cfg.arch, &m, &cfg.sampling)?;
            result.checkpoint.save(&ckpt_path)?;
            let hist = history.unwrap_or_else(|| with_suffix(&ckpt_path, ".history.tsv"));
            pipeline::write_history(&hist, &result.history)?;
            let mut run = RunManifest::default();
            run.set("train.seed", cfg.train.seed);
            run.set("manifest", manifest.display());
            run.set("best_epoch", result.best_epoch);
            run.set("epochs_run", result.history.len());
            fs::write(with_suffix(&ckpt_path, ".run.txt"), format!("{}{}", run.to_text(), cfg.to_text()))?;
            let best = &result.history[result.best_epoch];
            writeln!(
                out,
                "trained {} epochs; best epoch {} loss {:.6e} -> {}",
                result.history.len(),
                result.best_epoch,
                best.validation_loss.unwrap_or(best.train_loss),
                ckpt_path.display()
            )?;
        }
        Command::Infer { model, sample, density } => {
            let ck = Checkpoint::load(&model)?;
            let frames = dataset::read_tensor(&sample)?.to_frames();
            let inf = pipeline::infer(&ck.model, &frames, &cfg.sampling.base, &cfg.sampling.augment, density)?;
            writeln!(out, "{}\t{}", inf.mean, inf.std)?;
        }
        Command::Evaluate {
            model,
            manifest,
            train,
            out: dir,
        } => {
            let ck = Checkpoint::load(&model)?;
            let test = Manifest::read(&manifest)?;
            let train = train.map(|p| Manifest::read(&p)).transpose()?;
            let ev = pipeline::evaluate(&ck.model, &test, &cfg.sampling, train.as_ref())?;
            let mut run = RunManifest::default();
            run.set("model", model.display());
            run.set("model.train_seed", ck.seed);
            run.set("test_manifest", manifest.display());
            run.set("augment.seed", cfg.sampling.augment.seed);
            for (k, v) in &test.params {
                run.set(&format!("data.{k}"), v);
            }
            let s = pipeline::write_report(&dir, &ev, &run)?;
            write!(out, "{}", s.to_text())?;
        }
    }
    Ok(())
}

/// Rewrites tensor paths so the manifest resolves from `dir`.
fn relocate(mut m: Manifest, dir: &Path) -> AnyResult<Manifest> {
    let same = fs::canonicalize(&m.root).ok() == fs::canonicalize(dir).ok();
    if !same {
        let root = fs::canonicalize(&m.root)?;
        for r in &mut m.records {
            if r.tensor_path.is_relative() {
                r.tensor_path = root.join(&r.tensor_path);
            }
        }
    }
    m.root = dir.to_path_buf();
    Ok(m)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
