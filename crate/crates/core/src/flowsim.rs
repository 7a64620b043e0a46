//! Reduced-order forward model of an inverted vial.
//!
//! Lengths `x` run down the wall from the closed end of the inverted vial. The suspended
//! column occupies `[0, x0]`, a wall film `[x0, front]` and the bath `[L - b, L]`. A rising
//! air finger of depth `d` releases the column (`x0 = H - d`). The film keeps the
//! self-similar drainage shape `h = sqrt(ν (x - x0) / G)`, where the effective impulse `G`
//! plays the role of `g·t_eff`.

use std::f64::consts::PI;

use thiserror::Error;

use crate::imaging;
use crate::physics::{Fluid, PhysicsError, Regime, TestProtocol, VialGeometry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowsimError {
    #[error(transparent)]
    Input(#[from] PhysicsError),
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("step failure at t = {t:.4} s: {reason}")]
    StepFailure { t: f64, reason: String },
}

pub type Result<T> = std::result::Result<T, FlowsimError>;

/// Calibration and discretisation of the reduced-order model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Taylor-drop coefficient on the axial gravity component.
    pub c_taylor: f64,
    /// Slump coefficient on the transverse gravity component during the flip.
    pub c_slump: f64,
    /// Fraction of the flip spent accelerating (and again decelerating).
    pub ramp_fraction: f64,
    /// Maximum film thickness of the advancing front as a fraction of R.
    pub front_thickness: f64,
    /// Exponent of the smooth maximum blending the front length scales.
    pub blend_power: f64,
    pub wall_cells: usize,
    pub max_step: f64,
    /// Lower clamp on the film clock, s.
    pub min_t_eff: f64,
    /// Volume drift (fraction of the fill) that aborts the integration.
    pub drift_limit: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            c_taylor: 0.05,
            c_slump: 0.45,
            ramp_fraction: 0.2,
            front_thickness: 0.4,
            blend_power: 4.0,
            wall_cells: 128,
            max_step: 1e-3,
            min_t_eff: 0.01,
            drift_limit: 5e-3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowsimError::Config(m.to_string()));
        if !(self.c_taylor >= 0.0 && self.c_slump >= 0.0) {
            return bad("coefficients must be >= 0");
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 0.5) {
            return bad("ramp_fraction must lie in (0, 0.5]");
        }
        if !(self.front_thickness > 0.0 && self.front_thickness < 0.5) {
            return bad("front_thickness must lie in (0, 0.5)");
        }
        if !(self.blend_power >= 1.0) {
            return bad("blend_power must be >= 1");
        }
        if self.wall_cells < 4 {
            return bad("wall_cells must be >= 4");
        }
        if !(self.max_step > 0.0 && self.min_t_eff > 0.0 && self.drift_limit > 0.0) {
            return bad("max_step, min_t_eff and drift_limit must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    /// Time since full inversion, s.
    pub t: f64,
    pub regime: Regime,
    /// Penetration of the air finger into the column, m.
    pub bubble_depth: f64,
    /// Lowest wetted point of the film, m from the top.
    pub front_position: f64,
    /// Bottom of the suspended column (top of the film), m from the top.
    pub column_bottom: f64,
    pub bath_height: f64,
    /// Cell-averaged film thickness on `wall_cells` equal cells over the interior height, m.
    pub film_profile: Vec<f64>,
    /// Film clock `G/g` during drainage, s.
    pub t_eff: Option<f64>,
    pub column_volume: f64,
    pub film_volume: f64,
    pub bath_volume: f64,
}

impl FlowState {
    pub fn total_volume(&self) -> f64 {
        self.column_volume + self.film_volume + self.bath_volume
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub protocol: TestProtocol,
    pub fluid: Fluid,
    pub geom: VialGeometry,
    /// State at full inversion.
    pub initial: FlowState,
    /// One state per frame timestamp.
    pub states: Vec<FlowState>,
    /// State at the end of the observation window.
    pub terminal: FlowState,
    /// Time drainage began, if it did (may be negative: during the flip).
    pub drainage_onset: Option<f64>,
}

impl FlowTrajectory {
    fn knots(&self) -> impl Iterator<Item = &FlowState> {
        std::iter::once(&self.initial)
            .chain(self.states.iter())
            .chain(std::iter::once(&self.terminal))
    }
}

/// Tilt angle at time `t` (flip occupies `[-t_flip, 0]`). The angular velocity is a
/// trapezoid, so the angle is C¹ and symmetric about the midpoint of the flip.
pub fn flip_angle(protocol: &TestProtocol, t: f64) -> f64 {
    flip_angle_with(protocol, SimConfig::default().ramp_fraction, t)
}

pub fn flip_angle_with(protocol: &TestProtocol, ramp: f64, t: f64) -> f64 {
    let tf = protocol.t_flip;
    let s = t + tf;
    if s <= 0.0 {
        return 0.0;
    }
    if s >= tf {
        return protocol.theta_final;
    }
    let tr = ramp * tf;
    let w = protocol.theta_final / (tf - tr);
    if s < tr {
        0.5 * w * s * s / tr
    } else if s <= tf - tr {
        0.5 * w * tr + w * (s - tr)
    } else {
        let u = tf - s;
        protocol.theta_final - 0.5 * w * u * u / tr
    }
}

/// Axial (toward the opening) and transverse components of gravity at tilt `theta`.
fn gravity_components(g: f64, theta: f64) -> (f64, f64) {
    (g * (-theta.cos()).max(0.0), g * theta.sin().max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Front,
    Drainage,
}

/// Integration state: impulses of the two gravity components, the film impulse G and
/// the bath height.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Y {
    imp_ax: f64,
    imp_tr: f64,
    big_g: f64,
    bath: f64,
}

impl Y {
    fn axpy(&self, h: f64, k: &Y) -> Y {
        Y {
            imp_ax: self.imp_ax + h * k.imp_ax,
            imp_tr: self.imp_tr + h * k.imp_tr,
            big_g: self.big_g + h * k.big_g,
            bath: self.bath + h * k.bath,
        }
    }
}

struct Model<'a> {
    geom: &'a VialGeometry,
    protocol: &'a TestProtocol,
    cfg: &'a SimConfig,
    nu: f64,
    area: f64,
    perimeter: f64,
    length: f64,
    /// ρR²/η, the visco-gravity velocity per unit acceleration.
    mobility: f64,
}

struct Film {
    x0: f64,
    len: f64,
    big_g: f64,
    volume: f64,
}

impl<'a> Model<'a> {
    fn new(fluid: &'a Fluid, geom: &'a VialGeometry, protocol: &'a TestProtocol, cfg: &'a SimConfig) -> Self {
        let r = geom.radius;
        Model {
            geom,
            protocol,
            cfg,
            nu: fluid.kinematic_viscosity(),
            area: PI * r * r,
            perimeter: 2.0 * PI * r,
            length: geom.interior_height,
            mobility: fluid.rho * r * r / fluid.eta,
        }
    }

    fn gravity(&self, t: f64) -> (f64, f64) {
        gravity_components(self.protocol.g, flip_angle_with(self.protocol, self.cfg.ramp_fraction, t))
    }

    fn bubble_depth(&self, y: &Y) -> f64 {
        let d = self.mobility * (self.cfg.c_taylor * y.imp_ax + self.cfg.c_slump * y.imp_tr);
        d.min(self.geom.liquid_height)
    }

    fn bubble_rate(&self, y: &Y, g_ax: f64, g_tr: f64) -> f64 {
        if self.bubble_depth(y) >= self.geom.liquid_height {
            0.0
        } else {
            self.mobility * (self.cfg.c_taylor * g_ax + self.cfg.c_slump * g_tr)
        }
    }

    /// Film volume for a self-similar profile of length `len` and impulse `g`.
    fn film_volume(&self, len: f64, g: f64) -> f64 {
        2.0 / 3.0 * self.perimeter * (self.nu / g).sqrt() * len.powf(1.5)
    }

    /// Impulse that fits `volume` into length `len`.
    fn impulse_for(&self, len: f64, volume: f64) -> f64 {
        let s = 2.0 / 3.0 * self.perimeter * len.powf(1.5) / volume;
        self.nu * s * s
    }

    /// Film of the advancing front: all released liquid, spread over the larger (smoothly)
    /// of the length reachable by free drainage and the length at the thickness cap.
    fn front_film(&self, y: &Y) -> Film {
        let d = self.bubble_depth(y);
        let x0 = self.geom.liquid_height - d;
        let volume = self.area * d;
        if !(volume > 0.0) {
            return Film { x0, len: 0.0, big_g: 0.0, volume: 0.0 };
        }
        let r = self.geom.radius;
        let g_clock = y.imp_ax + self.protocol.g * self.cfg.min_t_eff;
        let l_cap = volume / (2.0 / 3.0 * self.perimeter * self.cfg.front_thickness * r);
        let l_clock = (volume / (2.0 / 3.0 * self.perimeter)).powf(2.0 / 3.0) * (g_clock / self.nu).cbrt();
        let p = self.cfg.blend_power;
        let len = (l_cap.powf(p) + l_clock.powf(p)).powf(1.0 / p);
        Film { x0, len, big_g: self.impulse_for(len, volume), volume }
    }

    fn drainage_film(&self, y: &Y) -> Film {
        let x0 = self.geom.liquid_height - self.bubble_depth(y);
        let len = self.length - y.bath - x0;
        Film { x0, len, big_g: y.big_g, volume: self.film_volume(len, y.big_g) }
    }

    fn rates(&self, mode: Mode, t: f64, y: &Y) -> std::result::Result<Y, String> {
        let (g_ax, g_tr) = self.gravity(t);
        let mut k = Y { imp_ax: g_ax, imp_tr: g_tr, big_g: 0.0, bath: 0.0 };
        if mode == Mode::Drainage {
            let film = self.drainage_film(y);
            if !(film.len > 0.0 && film.big_g > 0.0) {
                return Err(format!("degenerate film (length {:.3e}, G {:.3e})", film.len, film.big_g));
            }
            let h_w = (self.nu * film.len / film.big_g).sqrt();
            // Same flux as the bath rise velocity 2ρg h³/(3ηR) over the cross-section.
            let q = self.perimeter * g_ax * h_w.powi(3) / (3.0 * self.nu);
            let open = self.area - self.perimeter * h_w;
            if !(open > 0.0) {
                return Err(format!("film thickness {h_w:.3e} m fills the vial"));
            }
            let d_rate = self.bubble_rate(y, g_ax, g_tr);
            k.bath = q / open;
            k.big_g = 2.0 * film.big_g / film.volume * (q - open * d_rate);
        }
        Ok(k)
    }

    fn rk4(&self, mode: Mode, t: f64, y: &Y, h: f64) -> std::result::Result<Y, String> {
        let k1 = self.rates(mode, t, y)?;
        let k2 = self.rates(mode, t + 0.5 * h, &y.axpy(0.5 * h, &k1))?;
        let k3 = self.rates(mode, t + 0.5 * h, &y.axpy(0.5 * h, &k2))?;
        let k4 = self.rates(mode, t + h, &y.axpy(h, &k3))?;
        Ok(Y {
            imp_ax: y.imp_ax + h / 6.0 * (k1.imp_ax + 2.0 * k2.imp_ax + 2.0 * k3.imp_ax + k4.imp_ax),
            imp_tr: y.imp_tr + h / 6.0 * (k1.imp_tr + 2.0 * k2.imp_tr + 2.0 * k3.imp_tr + k4.imp_tr),
            big_g: y.big_g + h / 6.0 * (k1.big_g + 2.0 * k2.big_g + 2.0 * k3.big_g + k4.big_g),
            bath: y.bath + h / 6.0 * (k1.bath + 2.0 * k2.bath + 2.0 * k3.bath + k4.bath),
        })
    }

    /// Cell averages of the film thickness over `n` equal cells on `[0, L]`.
    fn profile(&self, film: &Film) -> Vec<f64> {
        let n = self.cfg.wall_cells;
        let dx = self.length / n as f64;
        let mut out = vec![0.0; n];
        if film.volume <= 0.0 || film.len <= 0.0 {
            return out;
        }
        let c = 2.0 / 3.0 * (self.nu / film.big_g).sqrt();
        let end = film.x0 + film.len;
        for (i, v) in out.iter_mut().enumerate() {
            let a = (i as f64 * dx).max(film.x0);
            let b = ((i + 1) as f64 * dx).min(end);
            if b > a {
                *v = c * ((b - film.x0).powf(1.5) - (a - film.x0).powf(1.5)) / dx;
            }
        }
        out
    }

    fn state(&self, mode: Mode, t: f64, y: &Y) -> FlowState {
        let d = self.bubble_depth(y);
        let film = match mode {
            Mode::Front => self.front_film(y),
            Mode::Drainage => self.drainage_film(y),
        };
        let film_profile = self.profile(&film);
        let dx = self.length / self.cfg.wall_cells as f64;
        let film_volume = self.perimeter * dx * film_profile.iter().sum::<f64>();
        let regime = match mode {
            Mode::Drainage => Regime::Drainage,
            Mode::Front if d < self.geom.liquid_height => Regime::TaylorDrop,
            Mode::Front => Regime::AdvancingFront,
        };
        FlowState {
            t,
            regime,
            bubble_depth: d,
            front_position: film.x0 + film.len,
            column_bottom: film.x0,
            bath_height: y.bath,
            film_profile,
            t_eff: (mode == Mode::Drainage).then(|| y.big_g / self.protocol.g),
            column_volume: self.area * film.x0,
            film_volume,
            bath_volume: self.area * y.bath,
        }
    }
}

pub fn simulate(fluid: &Fluid, geom: &VialGeometry, protocol: &TestProtocol) -> Result<FlowTrajectory> {
    simulate_with(fluid, geom, protocol, &SimConfig::default())
}

pub fn simulate_with(
    fluid: &Fluid,
    geom: &VialGeometry,
    protocol: &TestProtocol,
    cfg: &SimConfig,
) -> Result<FlowTrajectory> {
    fluid.validate()?;
    geom.validate()?;
    protocol.validate()?;
    cfg.validate()?;
    if !(fluid.rho > 0.0) {
        return Err(PhysicsError::InvalidFluid("simulation needs a positive density".into()).into());
    }
    let frames = imaging::frame_schedule(protocol)
        .map_err(|e| FlowsimError::Config(e.to_string()))?;
    let model = Model::new(fluid, geom, protocol, cfg);
    let v_fill = geom.fill_volume();

    let mut y = Y { imp_ax: 0.0, imp_tr: 0.0, big_g: 0.0, bath: 0.0 };
    let mut mode = Mode::Front;
    let mut t = -protocol.t_flip;
    let mut onset = None;

    let mut targets = vec![0.0];
    targets.extend(frames.iter().copied().filter(|&f| f > 0.0));
    if protocol.t_obs > *targets.last().unwrap() {
        targets.push(protocol.t_obs);
    }

    let mut recorded: Vec<FlowState> = Vec::with_capacity(targets.len());
    for &target in &targets {
        while t < target {
            let h = cfg.max_step.min(target - t);
            let fail = |reason: String| FlowsimError::StepFailure { t, reason };
            let next = model.rk4(mode, t, &y, h).map_err(fail)?;
            t = if target - t <= h { target } else { t + h };
            y = next;
            if mode == Mode::Front {
                let film = model.front_film(&y);
                if film.volume > 0.0 && film.x0 + film.len >= model.length {
                    mode = Mode::Drainage;
                    onset = Some(t);
                    y.bath = 0.0;
                    y.big_g = model.impulse_for(model.length - film.x0, film.volume);
                }
            }
            if mode == Mode::Drainage {
                let film = model.drainage_film(&y);
                let total = model.area * (film.x0 + y.bath) + film.volume;
                let drift = (total - v_fill).abs() / v_fill;
                if !(drift <= cfg.drift_limit) {
                    return Err(FlowsimError::StepFailure {
                        t,
                        reason: format!("volume drift {:.3}% exceeds limit", 100.0 * drift),
                    });
                }
            }
        }
        recorded.push(model.state(mode, t, &y));
    }

    let initial = recorded[0].clone();
    let states: Vec<FlowState> = frames
        .iter()
        .map(|&f| {
            if f == 0.0 {
                initial.clone()
            } else {
                let i = targets.iter().position(|&x| x == f).expect("frame is a target");
                recorded[i].clone()
            }
        })
        .collect();
    let terminal = recorded.last().cloned().expect("at least one target");
    Ok(FlowTrajectory {
        protocol: protocol.clone(),
        fluid: *fluid,
        geom: *geom,
        initial,
        states,
        terminal,
        drainage_onset: onset,
    })
}

/// Bath volume over the fill volume at time `t`, interpolated linearly between recorded
/// states and clamped to `[0, 1]`.
pub fn drained_fraction(traj: &FlowTrajectory, t: f64) -> f64 {
    let v_fill = traj.geom.fill_volume();
    let frac = |s: &FlowState| (s.bath_volume / v_fill).clamp(0.0, 1.0);
    let mut prev: Option<&FlowState> = None;
    for s in traj.knots() {
        if t <= s.t {
            return match prev {
                Some(p) if s.t > p.t => {
                    let w = (t - p.t) / (s.t - p.t);
                    frac(p) + w * (frac(s) - frac(p))
                }
                _ => frac(s),
            };
        }
        prev = Some(s);
    }
    frac(&traj.terminal)
}
