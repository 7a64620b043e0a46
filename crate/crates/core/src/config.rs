//! Run configuration: `key = value` lines with `#` comments. Every key has a default;
//! unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::imaging::AugmentSpec;
use crate::neuralnet::{ArchConfig, LossSpace};
use crate::physics::{
    VialGeometry, DEFAULT_FILL_VOLUME, DEFAULT_RADIUS, DEFAULT_VIAL_VOLUME,
};
use crate::pipeline::{GenerateSpec, Sampling, TrainConfig, Viscosities};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown configuration key '{0}'")]
    UnknownKey(String),
    #[error("{key}: {msg}")]
    BadValue { key: String, msg: String },
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Aleatoric,
    Epistemic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub seed: u64,
    /// Groups held out in epistemic mode.
    pub holdout: usize,
    /// Per-group test fraction in aleatoric mode.
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::Aleatoric,
            seed: 0,
            holdout: 4,
            test_fraction: crate::dataset::DEFAULT_TEST_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dataset generation; its geometry is rebuilt from the three vial keys.
    pub data: GenerateSpec,
    pub radius: f64,
    pub vial_volume: f64,
    pub fill_volume: f64,
    pub sampling: Sampling,
    pub arch: ArchConfig,
    pub preset: String,
    pub train: TrainConfig,
    pub split: SplitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: GenerateSpec::default(),
            radius: DEFAULT_RADIUS,
            vial_volume: DEFAULT_VIAL_VOLUME,
            fill_volume: DEFAULT_FILL_VOLUME,
            sampling: Sampling::default(),
            arch: ArchConfig::default(),
            preset: "desk".into(),
            train: TrainConfig::desk(),
            split: SplitConfig::default(),
        }
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

impl Value for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if !v.is_finite() {
            return Err("must be finite".into());
        }
        Ok(v)
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err("expected true or false".into()),
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{p}: {e}"))).collect()
    }
    fn show(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl Value for LossSpace {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        LossSpace::parse(s).ok_or_else(|| "expected log10 or linear".into())
    }
    fn show(&self) -> String {
        self.name().into()
    }
}

impl Value for Viscosities {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Viscosities::parse(s).map_err(|e| e.to_string())
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for SplitMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "aleatoric" => Ok(SplitMode::Aleatoric),
            "epistemic" => Ok(SplitMode::Epistemic),
            _ => Err("expected aleatoric or epistemic".into()),
        }
    }
    fn show(&self) -> String {
        match self {
            SplitMode::Aleatoric => "aleatoric".into(),
            SplitMode::Epistemic => "epistemic".into(),
        }
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;

/// One documented configuration key.
pub struct Key {
    pub name: &'static str,
    pub unit: &'static str,
    pub help: &'static str,
    get: Getter,
    set: Setter,
}

macro_rules! key {
    ($name:literal, $unit:literal, $help:literal, $($f:ident).+) => {
        Key {
            name: $name,
            unit: $unit,
            help: $help,
            get: |c| Value::show(&c.$($f).+),
            set: |c, v| {
                c.$($f).+ = Value::parse_value(v)?;
                Ok(())
            },
        }
    };
}

/// Every accepted key, in documentation order.
pub fn keys() -> Vec<Key> {
    vec![
        key!("density", "kg/m^3", "fluid density of synthetic samples", data.density),
        key!("surface_tension", "N/m", "liquid-air surface tension", data.surface_tension),
        key!("radius", "m", "vial interior radius", radius),
        key!("vial_volume", "m^3", "nominal vial capacity", vial_volume),
        key!("fill_volume", "m^3", "liquid fill volume", fill_volume),
        key!("gravity", "m/s^2", "gravitational acceleration", data.protocol.g),
        key!("t_flip", "s", "duration of the inversion", data.protocol.t_flip),
        key!("t_obs", "s", "observation window after inversion", data.protocol.t_obs),
        key!("sim.c_taylor", "-", "Taylor-drop coefficient", data.sim.c_taylor),
        key!("sim.c_slump", "-", "slump coefficient during the flip", data.sim.c_slump),
        key!("sim.ramp_fraction", "-", "accelerating fraction of the flip", data.sim.ramp_fraction),
        key!("sim.front_thickness", "R", "advancing-front film thickness", data.sim.front_thickness),
        key!("sim.blend_power", "-", "exponent of the front length blend", data.sim.blend_power),
        key!("sim.wall_cells", "-", "cells in the wall film profile", data.sim.wall_cells),
        key!("sim.max_step", "s", "integration step", data.sim.max_step),
        key!("sim.min_t_eff", "s", "lower clamp on the film clock", data.sim.min_t_eff),
        key!("sim.drift_limit", "-", "volume drift that aborts a run", data.sim.drift_limit),
        key!("render.height", "px", "frame height per vial", data.render.height),
        key!("render.width", "px", "frame width per vial", data.render.width),
        key!("render.margin_rows", "px", "rows above and below the vial", data.render.margin_rows),
        key!("render.background", "-", "background intensity", data.render.background),
        key!("render.contrast", "-", "darkening of an opaque liquid path", data.render.contrast),
        key!("render.attenuation_length", "m", "Beer-Lambert length of the liquid", data.render.attenuation_length),
        key!("render.noise_sigma", "-", "Gaussian pixel noise", data.render.noise_sigma),
        key!("render.placement_jitter", "px", "per-sample vertical vial placement range", data.placement_jitter),
        key!("process.blur_sigma", "px", "Gaussian blur width", data.process.blur_sigma),
        key!("process.blur_first", "-", "blur before the gradient filter", data.process.blur_first),
        key!("data.viscosities", "Pa*s", "group viscosities: logspace:LO:HI:N or a list", data.viscosities),
        key!("data.n_per_group", "-", "samples per viscosity group", data.n_per_group),
        key!("data.seed", "-", "seed of render noise and placement", data.seed),
        key!("roi.origin_x", "px", "left edge of the base ROI", sampling.base.origin_x),
        key!("roi.origin_y", "px", "top edge of the base ROI", sampling.base.origin_y),
        key!("roi.rotation", "deg", "rotation of the base ROI", sampling.base.rotation),
        key!("augment.count", "-", "ROIs queried per video at inference", sampling.augment.count),
        key!("augment.max_shift", "px", "upper bound of the ROI shift", sampling.augment.max_shift),
        key!("augment.max_rotation", "deg", "upper bound of the ROI rotation", sampling.augment.max_rotation),
        key!("augment.seed", "-", "seed of the inference ROIs", sampling.augment.seed),
        key!("arch.frames", "-", "frames per sequence", arch.frames),
        key!("arch.conv_channels", "-", "channels of each conv layer", arch.conv_channels),
        key!("arch.kernel", "px", "conv kernel size", arch.kernel),
        key!("arch.pool", "px", "max-pool size", arch.pool),
        key!("arch.projection", "-", "per-frame feature width", arch.projection),
        key!("arch.hidden", "-", "recurrent hidden size per direction", arch.hidden),
        key!("arch.attention", "-", "attention projection width", arch.attention),
        key!("arch.density_width", "-", "density embedding width", arch.density_width),
        key!("arch.head_hidden", "-", "hidden width of the regression head", arch.head_hidden),
        Key {
            name: "train.preset",
            unit: "-",
            help: "desk or paper; applied before the other train keys",
            get: |c| c.preset.clone(),
            set: |c, v| {
                c.train = TrainConfig::preset(v).ok_or("expected desk or paper")?;
                c.preset = v.to_string();
                Ok(())
            },
        },
        key!("train.learning_rate", "-", "Adam step size", train.learning_rate),
        key!("train.max_epochs", "-", "epoch limit", train.max_epochs),
        key!("train.patience", "-", "epochs without improvement before stopping", train.patience),
        key!("train.batch_size", "-", "samples per Adam step", train.batch_size),
        key!("train.seed", "-", "seed of initialization, shuffling and crops", train.seed),
        key!("train.loss_space", "-", "log10 or linear viscosity error", train.loss_space),
        key!("train.validation_fraction", "-", "share held back for early stopping", train.validation_fraction),
        key!("split.mode", "-", "aleatoric or epistemic", split.mode),
        key!("split.seed", "-", "seed of the aleatoric partition", split.seed),
        key!("split.holdout", "-", "groups held out in epistemic mode", split.holdout),
        key!("split.test_fraction", "-", "per-group test share in aleatoric mode", split.test_fraction),
    ]
}

impl RunConfig {
    /// Applies `key=value` pairs; `train.preset` goes first wherever it appears.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (usize, &'a str, &'a str)>) -> Result<()> {
        let table = keys();
        let mut pairs: Vec<_> = pairs.into_iter().collect();
        pairs.sort_by_key(|&(_, k, _)| k != "train.preset");
        for (_, k, v) in pairs {
            let key = table
                .iter()
                .find(|d| d.name == k)
                .ok_or_else(|| ConfigError::UnknownKey(k.to_string()))?;
            (key.set)(self, v).map_err(|msg| ConfigError::BadValue {
                key: k.to_string(),
                msg,
            })?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got '{line}'"),
            })?;
            pairs.push((i + 1, k.trim(), v.trim()));
        }
        let mut c = RunConfig::default();
        c.apply(pairs)?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        keys().iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        keys().iter().map(|k| format!("{} = {}\n", k.name, (k.get)(self))).collect()
    }

    pub fn geometry(&self) -> Result<VialGeometry> {
        VialGeometry::from_volumes(self.radius, self.vial_volume, self.fill_volume).map_err(|e| ConfigError::BadValue {
            key: "radius/vial_volume/fill_volume".into(),
            msg: e.to_string(),
        })
    }

    /// Generation settings with the geometry filled in.
    pub fn generate_spec(&self) -> Result<GenerateSpec> {
        Ok(GenerateSpec {
            geometry: self.geometry()?,
            ..self.data.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(ConfigError::BadValue { key: key.into(), msg });
        self.geometry()?;
        if let Err(e) = self.data.protocol.validate() {
            return bad("t_flip/t_obs/gravity", e.to_string());
        }
        if let Err(e) = self.data.sim.validate() {
            return bad("sim.*", e.to_string());
        }
        if let Err(e) = self.data.render.validate() {
            return bad("render.*", e.to_string());
        }
        if let Err(e) = self.arch.validate() {
            return bad("arch.*", e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return bad("train.*", e.to_string());
        }
        if !(self.data.density > 0.0) {
            return bad("density", "must be > 0".into());
        }
        if self.sampling.augment.count == 0 {
            return bad("augment.count", "must be >= 1".into());
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return bad("split.test_fraction", "must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn augment(&self) -> AugmentSpec {
        self.sampling.augment
    }
}

/// Key reference for `--help`: name, unit, default and description.
pub fn key_reference() -> String {
    let d = RunConfig::default();
    let mut s = String::from("Configuration keys (key = value, '#' comments):\n");
    for k in keys() {
        let _ = writeln!(s, "  {:<28} [{}] default {}  {}", k.name, k.unit, (k.get)(&d), k.help);
    }
    s
}
