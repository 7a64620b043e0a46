//! Dataset synthesis, training, the augmented inference protocol, residual analysis and
//! report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{self, DatasetError, Manifest, SampleRecord, Tensor3};
use crate::flowsim::{self, FlowsimError, SimConfig};
use crate::imaging::{self, AugmentSpec, Frame, ImagingError, ProcessConfig, RenderConfig, RoiSequence, RoiSpec};
use crate::neuralnet::{self, adam_step, AdamState, ArchConfig, Checkpoint, Example, LossSpace, Model, NnError};
use crate::physics::{Fluid, PhysicsError, TestProtocol, VialGeometry};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Flowsim(#[from] FlowsimError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PipelineError::Invalid(msg.into()))
}

/// Independent 64-bit seed for item `(a, b)` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 32) ^ b);
    rng.next_u64()
}

// ---------------------------------------------------------------------------------------
// synthetic dataset

/// Group viscosities, either listed or log-spaced.
#[derive(Debug, Clone, PartialEq)]
pub enum Viscosities {
    List(Vec<f64>),
    Logspace { lo: f64, hi: f64, n: usize },
}

impl Viscosities {
    /// `logspace:LO:HI:N` or a comma-separated list, Pa·s.
    pub fn parse(s: &str) -> Result<Self> {
        let v = if let Some(rest) = s.strip_prefix("logspace:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return invalid(format!("expected logspace:LO:HI:N, got {s}"));
            }
            let num = |p: &str| p.trim().parse::<f64>().map_err(|e| PipelineError::Invalid(format!("{p}: {e}")));
            let n = parts[2]
                .trim()
                .parse::<usize>()
                .map_err(|e| PipelineError::Invalid(format!("{}: {e}", parts[2])))?;
            Viscosities::Logspace {
                lo: num(parts[0])?,
                hi: num(parts[1])?,
                n,
            }
        } else {
            let vals = s
                .split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|e| PipelineError::Invalid(format!("{p}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Viscosities::List(vals)
        };
        v.values()?;
        Ok(v)
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        let vals = match self {
            Viscosities::List(v) => v.clone(),
            Viscosities::Logspace { lo, hi, n } => {
                if !(*lo > 0.0 && *hi >= *lo) || *n == 0 {
                    return invalid("logspace needs 0 < lo <= hi and n >= 1");
                }
                let (a, b) = (lo.log10(), hi.log10());
                (0..*n)
                    .map(|i| {
                        if *n == 1 {
                            *lo
                        } else {
                            10f64.powf(a + (b - a) * i as f64 / (*n - 1) as f64)
                        }
                    })
                    .collect()
            }
        };
        if vals.is_empty() || vals.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return invalid("viscosities must be positive and finite");
        }
        Ok(vals)
    }
}

impl std::fmt::Display for Viscosities {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Viscosities::Logspace { lo, hi, n } => write!(f, "logspace:{lo:e}:{hi:e}:{n}"),
            Viscosities::List(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

/// Everything that determines a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSpec {
    pub viscosities: Viscosities,
    pub n_per_group: usize,
    pub seed: u64,
    /// kg/m³
    pub density: f64,
    /// N/m
    pub surface_tension: f64,
    pub geometry: VialGeometry,
    pub protocol: TestProtocol,
    pub sim: SimConfig,
    pub render: RenderConfig,
    pub process: ProcessConfig,
    /// Per-sample vertical placement of the vial is drawn from U[-p, p] rows.
    pub placement_jitter: f64,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        GenerateSpec {
            viscosities: Viscosities::Logspace { lo: 1e-2, hi: 1e3, n: 24 },
            n_per_group: 8,
            seed: 0,
            density: 1000.0,
            surface_tension: crate::physics::DEFAULT_SURFACE_TENSION,
            geometry: VialGeometry::default(),
            protocol: TestProtocol::default(),
            sim: SimConfig::default(),
            render: RenderConfig::default(),
            process: ProcessConfig::default(),
            placement_jitter: 1.0,
        }
    }
}

impl GenerateSpec {
    /// Canonical text of the physical and imaging settings shared by all samples.
    fn protocol_text(&self) -> String {
        format!(
            "{:?}|{:?}|{:?}|{:?}|{:?}|rho={:e}|gamma={:e}|placement={:e}",
            self.geometry,
            self.protocol,
            self.sim,
            RenderConfig {
                noise_seed: 0,
                offset_rows: 0.0,
                ..self.render
            },
            self.process,
            self.density,
            self.surface_tension,
            self.placement_jitter
        )
    }
}

/// Simulates, renders and preprocesses every sample, writes one tensor file per sample
/// under `out_dir/samples/` and the manifest to `out_dir/manifest.tsv`. `jobs` sets the
/// worker count; output does not depend on it.
pub fn generate_dataset(spec: &GenerateSpec, out_dir: &Path, jobs: usize) -> Result<Manifest> {
    if spec.n_per_group == 0 {
        return invalid("n_per_group must be >= 1");
    }
    if !(spec.placement_jitter >= 0.0) || spec.placement_jitter > spec.render.margin_rows as f64 {
        return invalid("placement jitter must lie in [0, margin rows]");
    }
    spec.render.validate()?;
    let etas = spec.viscosities.values()?;
    let sample_dir = out_dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(io_err(&sample_dir))?;
    let protocol_hash = dataset::fingerprint(&spec.protocol_text());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Invalid(e.to_string()))?;
    let per_group: Vec<Vec<SampleRecord>> = pool.install(|| {
        etas.par_iter()
            .enumerate()
            .map(|(g, &eta)| {
                let fluid = Fluid::with_interface(eta, spec.density, spec.surface_tension, 0.0)?;
                let traj = flowsim::simulate_with(&fluid, &spec.geometry, &spec.protocol, &spec.sim)?;
                let group_id = format!("g{g:03}");
                (0..spec.n_per_group)
                    .map(|k| {
                        let s = derive_seed(spec.seed, g as u64 + 1, k as u64);
                        let mut rng = ChaCha8Rng::seed_from_u64(s);
                        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                        let render = RenderConfig {
                            noise_seed: rng.next_u64(),
                            offset_rows: spec.placement_jitter * (2.0 * u - 1.0),
                            ..spec.render
                        };
                        let frames = imaging::preprocess(&imaging::render_video(&traj, &render), &spec.process);
                        let tensor = Tensor3::from_frames(&frames)?;
                        let sample_id = format!("{group_id}_s{k:02}");
                        let rel = PathBuf::from("samples").join(format!("{sample_id}.bin"));
                        dataset::write_tensor(&out_dir.join(&rel), &tensor)?;
                        Ok(SampleRecord {
                            sample_id,
                            true_viscosity: eta,
                            density: spec.density,
                            protocol_hash: protocol_hash.clone(),
                            tensor_path: rel,
                            group_id: group_id.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut manifest = Manifest::new(per_group.into_iter().flatten().collect(), out_dir.to_path_buf())?;
    let p = &mut manifest.params;
    p.insert("seed".into(), spec.seed.to_string());
    p.insert("viscosities".into(), spec.viscosities.to_string());
    p.insert("n_per_group".into(), spec.n_per_group.to_string());
    p.insert("density".into(), format!("{:e}", spec.density));
    p.insert("placement_jitter".into(), format!("{:e}", spec.placement_jitter));
    p.insert("protocol_hash".into(), protocol_hash);
    manifest.write(&out_dir.join("manifest.tsv"))?;
    info!("wrote {} samples in {} groups to {}", manifest.records.len(), etas.len(), out_dir.display());
    Ok(manifest)
}

// ---------------------------------------------------------------------------------------
// training

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without improvement of the monitored loss before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_space: LossSpace,
    /// Fraction of the training samples held back to monitor early stopping; 0 monitors
    /// the training loss.
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            max_epochs: 2000,
            patience: 1000,
            batch_size: 16,
            seed: 0,
            loss_space: LossSpace::Log10,
            validation_fraction: 0.0,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 40,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning rate must be > 0");
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return invalid("epochs, patience and batch size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return invalid("validation fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn echo(&self) -> String {
        format!(
            "learning_rate={:e}\nmax_epochs={}\npatience={}\nbatch_size={}\nseed={}\nloss_space={}\nvalidation_fraction={}\n",
            self.learning_rate,
            self.max_epochs,
            self.patience,
            self.batch_size,
            self.seed,
            self.loss_space.name(),
            self.validation_fraction
        )
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Base ROI and the jitter distribution used both for training crops and for the
/// inference augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sampling {
    pub base: RoiSpec,
    pub augment: AugmentSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest monitored loss.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct TrainSample {
    frames: Vec<Frame>,
    density: f64,
    target: f64,
}

fn load_samples(manifest: &Manifest, arch: &ArchConfig) -> Result<Vec<TrainSample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let tensor = manifest.load_tensor(r)?;
            if tensor.t != arch.frames {
                return invalid(format!(
                    "{} has {} frames, architecture expects {}",
                    r.sample_id, tensor.t, arch.frames
                ));
            }
            Ok(TrainSample {
                frames: tensor.to_frames(),
                density: r.density,
                target: r.true_viscosity.log10(),
            })
        })
        .collect()
}

fn crop(sample: &TrainSample, spec: &RoiSpec, target: f64) -> Result<Example> {
    let seq = imaging::extract_roi(&sample.frames, spec, sample.density)?;
    Ok(Example::from_sequence(&seq, target))
}

/// Mini-batch Adam on the training manifest. Each epoch draws a fresh jittered ROI for
/// every sample from `sampling.augment` (its `seed` is ignored in favour of the training
/// seed). The output bias starts at the mean target so early epochs fit shape rather
/// than offset.
pub fn train(cfg: &TrainConfig, arch: &ArchConfig, manifest: &Manifest, sampling: &Sampling) -> Result<TrainOutcome> {
    cfg.validate()?;
    if manifest.records.is_empty() {
        return invalid("empty training manifest");
    }
    check_sampling(arch, &sampling.augment)?;
    let all = load_samples(manifest, arch)?;

    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 1));
    order.shuffle(&mut split_rng);
    let n_val = (cfg.validation_fraction * all.len() as f64).round() as usize;
    if n_val >= all.len() {
        return invalid("validation fraction leaves no training samples");
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let val_set: Vec<Example> = val_idx
        .iter()
        .map(|&i| crop(&all[i], &sampling.base, all[i].target))
        .collect::<Result<_>>()?;

    let mut model = neuralnet::init_model(arch, cfg.seed)?;
    let mean_target = train_idx.iter().map(|&i| all[i].target).sum::<f64>() / train_idx.len() as f64;
    model.params.head_b2.data[0] = mean_target;
    let mut adam = AdamState::new(&model.params);
    let mut best = (f64::INFINITY, 0usize, model.params.clone(), adam.clone());
    let mut history = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 2));

    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let jitter = AugmentSpec {
            seed: derive_seed(cfg.seed, 1, epoch as u64),
            ..sampling.augment
        };
        let mut total = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let (dx, dy, rot) = imaging::augment_offsets(&jitter, i);
                    crop(&all[i], &sampling.base.shifted(dx, dy, rot), all[i].target)
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = neuralnet::loss_and_grad_in(&model, &batch, cfg.loss_space)?;
            adam_step(&mut model.params, &grads, &mut adam, cfg.learning_rate);
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train_idx.len() as f64;
        let validation_loss = if val_set.is_empty() {
            None
        } else {
            Some(neuralnet::batch_loss_in(&model, &val_set, cfg.loss_space)?)
        };
        if !train_loss.is_finite() {
            return invalid(format!("training diverged at epoch {epoch}"));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
        let monitored = validation_loss.unwrap_or(train_loss);
        debug!("epoch {epoch}: train {train_loss:.5e} monitored {monitored:.5e}");
        if monitored < best.0 {
            best = (monitored, epoch, model.params.clone(), adam.clone());
        } else if epoch - best.1 >= cfg.patience {
            info!("early stop at epoch {epoch}; best epoch {}", best.1);
            break;
        }
    }
    let (_, best_epoch, params, optimizer) = best;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: Model {
                arch: arch.clone(),
                params,
            },
            optimizer: Some(optimizer),
            config_echo: cfg.echo(),
            seed: cfg.seed,
        },
        history,
        best_epoch,
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch\ttrain_loss\tvalidation_loss\n");
    for h in history {
        let v = h.validation_loss.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{}\t{}\t{}", h.epoch, h.train_loss, v);
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || PipelineError::Invalid(format!("bad history line: {l}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                validation_loss: if f[2] == "-" {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| bad())?)
                },
            })
        })
        .collect()
}

/// The network input must match the ROI and the jitter bounds must be non-negative.
fn check_sampling(arch: &ArchConfig, aug: &AugmentSpec) -> Result<()> {
    if arch.height != imaging::ROI_HEIGHT || arch.width != imaging::ROI_WIDTH {
        return invalid(format!(
            "architecture input {}x{} differs from the ROI {}x{}",
            arch.height,
            arch.width,
            imaging::ROI_HEIGHT,
            imaging::ROI_WIDTH
        ));
    }
    if !(aug.max_shift >= 0.0 && aug.max_rotation >= 0.0) {
        return invalid("jitter bounds must be >= 0");
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------
// inference

/// Anything that maps an ROI sequence to a log₁₀ viscosity.
pub trait Predictor: Sync {
    fn predict_log10(&self, seq: &RoiSequence) -> Result<f64>;
}

impl Predictor for Model {
    fn predict_log10(&self, seq: &RoiSequence) -> Result<f64> {
        Ok(neuralnet::forward(self, seq)?.output)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Per-augmentation viscosity predictions, Pa·s.
    pub predictions: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `predictions`.
    pub std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    // Welford's update; identical inputs give an exact mean and zero spread.
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, &x) in v.iter().enumerate() {
        let d = x - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (x - mean);
    }
    (mean, (m2 / v.len() as f64).sqrt())
}

/// Queries the predictor on every augmentation of the (preprocessed) frames and
/// aggregates the predictions in viscosity space.
pub fn infer(
    predictor: &dyn Predictor,
    frames: &[Frame],
    base: &RoiSpec,
    aug: &AugmentSpec,
    density: f64,
) -> Result<Inference> {
    let seqs = imaging::augment(frames, base, aug, density)?;
    let predictions = seqs
        .iter()
        .map(|s| predictor.predict_log10(s).map(|y| 10f64.powf(y)))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&predictions);
    Ok(Inference { predictions, mean, std })
}

// ---------------------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRecord {
    pub sample_id: String,
    pub group_id: String,
    pub true_viscosity: f64,
    pub inferred_mean: f64,
    pub inferred_std: f64,
    pub relative_residual: f64,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub group_id: String,
    pub true_viscosity: f64,
    pub samples: usize,
    pub mean_inferred: f64,
    /// Population std of the per-sample mean predictions across the group's videos.
    pub across_sample_std: f64,
    pub mean_residual: f64,
    pub std_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<ResidualRecord>,
    pub groups: Vec<GroupSummary>,
    /// Rank correlation of true and inferred viscosity; `None` when either side is
    /// constant.
    pub spearman: Option<f64>,
}

impl Evaluation {
    pub fn median_abs_residual(&self) -> Option<f64> {
        median(self.records.iter().map(|r| r.relative_residual.abs()).collect())
    }

    pub fn median_abs_residual_above(&self, eta: f64) -> Option<f64> {
        median(
            self.records
                .iter()
                .filter(|r| r.true_viscosity > eta)
                .map(|r| r.relative_residual.abs())
                .collect(),
        )
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Runs [`infer`] on every test sample. When `train` is given, shared sample ids are
/// rejected before anything is read.
pub fn evaluate(
    predictor: &dyn Predictor,
    test: &Manifest,
    sampling: &Sampling,
    train: Option<&Manifest>,
) -> Result<Evaluation> {
    if test.records.is_empty() {
        return invalid("empty test manifest");
    }
    if let Some(tr) = train {
        dataset::check_disjoint(tr, test)?;
    }
    let records = test
        .records
        .par_iter()
        .map(|r| {
            let frames = test.load_tensor(r)?.to_frames();
            let inf = infer(predictor, &frames, &sampling.base, &sampling.augment, r.density)?;
            Ok(ResidualRecord {
                sample_id: r.sample_id.clone(),
                group_id: r.group_id.clone(),
                true_viscosity: r.true_viscosity,
                inferred_mean: inf.mean,
                inferred_std: inf.std,
                relative_residual: (inf.mean - r.true_viscosity) / r.true_viscosity,
                predictions: inf.predictions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(records))
}

/// Group summaries and rank correlation of a set of residual records.
pub fn summarize(records: Vec<ResidualRecord>) -> Evaluation {
    let mut by_group: BTreeMap<&str, Vec<&ResidualRecord>> = BTreeMap::new();
    for r in &records {
        by_group.entry(r.group_id.as_str()).or_default().push(r);
    }
    let groups = by_group
        .into_iter()
        .map(|(id, rs)| {
            let means: Vec<f64> = rs.iter().map(|r| r.inferred_mean).collect();
            let res: Vec<f64> = rs.iter().map(|r| r.relative_residual).collect();
            let (mean_inferred, across_sample_std) = mean_std(&means);
            let (mean_residual, std_residual) = mean_std(&res);
            GroupSummary {
                group_id: id.to_string(),
                true_viscosity: rs[0].true_viscosity,
                samples: rs.len(),
                mean_inferred,
                across_sample_std,
                mean_residual,
                std_residual,
            }
        })
        .collect();
    let t: Vec<f64> = records.iter().map(|r| r.true_viscosity).collect();
    let p: Vec<f64> = records.iter().map(|r| r.inferred_mean).collect();
    let spearman = spearman(&t, &p);
    Evaluation {
        records,
        groups,
        spearman,
    }
}

// ---------------------------------------------------------------------------------------
// reports

pub const RESIDUALS_FILE: &str = "residuals.tsv";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const GROUPS_FILE: &str = "groups.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

/// Viscosity above which the restricted median is reported, Pa·s.
pub const SUMMARY_ETA_CUTOFF: f64 = 0.1;

const RESIDUAL_COLUMNS: &str =
    "sample_id\tviscosity_group_id\ttrue_viscosity\tinferred_mean\tinferred_std\trelative_residual\tpredictions";

/// Key/value record of every seed and setting behind a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub entries: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for l in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| PipelineError::Invalid(format!("bad run manifest line: {l}")))?;
            entries.insert(k.to_string(), v.to_string());
        }
        Ok(RunManifest { entries })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub samples: usize,
    pub median_abs_residual: Option<f64>,
    pub median_abs_residual_above_cutoff: Option<f64>,
    pub spearman: Option<f64>,
}

impl Summary {
    pub fn of(eval: &Evaluation) -> Self {
        Summary {
            samples: eval.records.len(),
            median_abs_residual: eval.median_abs_residual(),
            median_abs_residual_above_cutoff: eval.median_abs_residual_above(SUMMARY_ETA_CUTOFF),
            spearman: eval.spearman,
        }
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into());
        format!(
            "samples={}\nmedian_abs_relative_residual={}\nmedian_abs_relative_residual_eta_gt_{}={}\nspearman={}\n",
            self.samples,
            opt(self.median_abs_residual),
            SUMMARY_ETA_CUTOFF,
            opt(self.median_abs_residual_above_cutoff),
            opt(self.spearman)
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m = RunManifest::parse(text)?.entries;
        let get = |k: &str| {
            m.get(k)
                .ok_or_else(|| PipelineError::Invalid(format!("summary lacks {k}")))
        };
        let opt = |k: &str| -> Result<Option<f64>> {
            let v = get(k)?;
            if v == "undefined" {
                return Ok(None);
            }
            v.parse().map(Some).map_err(|_| PipelineError::Invalid(format!("{k}: {v}")))
        };
        Ok(Summary {
            samples: get("samples")?
                .parse()
                .map_err(|_| PipelineError::Invalid("samples".into()))?,
            median_abs_residual: opt("median_abs_relative_residual")?,
            median_abs_residual_above_cutoff: opt(&format!("median_abs_relative_residual_eta_gt_{SUMMARY_ETA_CUTOFF}"))?,
            spearman: opt("spearman")?,
        })
    }
}

pub fn residuals_to_text(records: &[ResidualRecord]) -> String {
    let mut s = format!("{RESIDUAL_COLUMNS}\n");
    for r in records {
        let preds: Vec<String> = r.predictions.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.sample_id,
            r.group_id,
            r.true_viscosity,
            r.inferred_mean,
            r.inferred_std,
            r.relative_residual,
            preds.join(",")
        );
    }
    s
}

pub fn parse_residuals(text: &str) -> Result<Vec<ResidualRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESIDUAL_COLUMNS) {
        return invalid("residual table header mismatch");
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || PipelineError::Invalid(format!("bad residual line: {l}"));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(ResidualRecord {
                sample_id: f[0].to_string(),
                group_id: f[1].to_string(),
                true_viscosity: num(f[2])?,
                inferred_mean: num(f[3])?,
                inferred_std: num(f[4])?,
                relative_residual: num(f[5])?,
                predictions: if f[6].is_empty() {
                    Vec::new()
                } else {
                    f[6].split(',').map(num).collect::<Result<_>>()?
                },
            })
        })
        .collect()
}

/// Writes the residual table, plotting pairs, group summaries, the summary block and the
/// run manifest into `dir`.
pub fn write_report(dir: &Path, eval: &Evaluation, run: &RunManifest) -> Result<Summary> {
    if eval.records.is_empty() {
        return invalid("no records to report");
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(io_err(&p))
    };
    write(RESIDUALS_FILE, residuals_to_text(&eval.records))?;

    let mut pairs = String::from("true_viscosity\tinferred_mean\tinferred_std\n");
    for r in &eval.records {
        let _ = writeln!(pairs, "{}\t{}\t{}", r.true_viscosity, r.inferred_mean, r.inferred_std);
    }
    write(PAIRS_FILE, pairs)?;

    let mut groups = String::from(
        "viscosity_group_id\ttrue_viscosity\tsamples\tmean_inferred\tacross_sample_std\tmean_residual\tstd_residual\n",
    );
    for g in &eval.groups {
        let _ = writeln!(
            groups,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            g.group_id, g.true_viscosity, g.samples, g.mean_inferred, g.across_sample_std, g.mean_residual, g.std_residual
        );
    }
    write(GROUPS_FILE, groups)?;

    let summary = Summary::of(eval);
    write(SUMMARY_FILE, summary.to_text())?;
    write(RUN_MANIFEST_FILE, run.to_text())?;
    Ok(summary)
}
