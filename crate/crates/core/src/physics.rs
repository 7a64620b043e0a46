//! Closed-form flow physics and dimensionless diagnostics of the inverted vial test.
//!
//! Every function here is a pure function of its arguments. Units are SI throughout:
//! viscosity in Pa·s, density in kg/m³, lengths in m, times in s, stresses in Pa.

use std::f64::consts::PI;
use std::fmt;

use log::warn;
use thiserror::Error;

/// Standard gravitational acceleration used by the default protocol, m/s².
pub const STANDARD_GRAVITY: f64 = 9.81;

/// Default interior radius of the vial, m.
pub const DEFAULT_RADIUS: f64 = 7.5e-3;

/// Default fill volume, m³ (2 mL).
pub const DEFAULT_FILL_VOLUME: f64 = 2.0e-6;

/// Default nominal vial capacity, m³ (8 mL).
pub const DEFAULT_VIAL_VOLUME: f64 = 8.0e-6;

/// Default surface tension, N/m.
pub const DEFAULT_SURFACE_TENSION: f64 = 0.04;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("invalid fluid: {0}")]
    InvalidFluid(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("wall coordinate z = {z} outside the film [0, {h}]")]
    OutsideFilm { z: f64, h: f64 },
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("axial position must be non-negative, got {0}")]
    NegativePosition(f64),
    #[error("surface tension must be positive for a Bond number")]
    ZeroSurfaceTension,
}

pub type Result<T> = std::result::Result<T, PhysicsError>;

/// Constitutive and interfacial properties of a test fluid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fluid {
    /// Dynamic viscosity, Pa·s.
    pub eta: f64,
    /// Density, kg/m³.
    pub rho: f64,
    /// Surface tension, N/m.
    pub gamma: f64,
    /// Contact angle, rad.
    pub beta: f64,
    /// Linear relaxation time, s.
    pub tau: Option<f64>,
}

impl Fluid {
    /// Newtonian fluid with default surface tension and zero contact angle.
    pub fn new(eta: f64, rho: f64) -> Result<Self> {
        Self::with_interface(eta, rho, DEFAULT_SURFACE_TENSION, 0.0)
    }

    pub fn with_interface(eta: f64, rho: f64, gamma: f64, beta: f64) -> Result<Self> {
        let fluid = Fluid {
            eta,
            rho,
            gamma,
            beta,
            tau: None,
        };
        fluid.validate()?;
        Ok(fluid)
    }

    pub fn with_relaxation_time(mut self, tau: f64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(PhysicsError::InvalidFluid(format!(
                "relaxation time must be >= 0, got {tau}"
            )));
        }
        self.tau = Some(tau);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(PhysicsError::InvalidFluid(format!(
                "viscosity must be > 0, got {}",
                self.eta
            )));
        }
        // Zero density is admitted so the trivial no-buoyancy limit stays expressible.
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(PhysicsError::InvalidFluid(format!(
                "density must be >= 0, got {}",
                self.rho
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(PhysicsError::InvalidFluid(format!(
                "surface tension must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(0.0..=PI).contains(&self.beta) {
            return Err(PhysicsError::InvalidFluid(format!(
                "contact angle must lie in [0, pi], got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Kinematic viscosity η/ρ, m²/s.
    pub fn kinematic_viscosity(&self) -> f64 {
        self.eta / self.rho
    }
}

/// Interior geometry of the vial and its liquid fill.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VialGeometry {
    /// Interior radius R, m.
    pub radius: f64,
    /// Interior height of the vial, m.
    pub interior_height: f64,
    /// Liquid column height H, m.
    pub liquid_height: f64,
}

impl VialGeometry {
    pub fn new(radius: f64, interior_height: f64, liquid_height: f64) -> Result<Self> {
        let geom = VialGeometry {
            radius,
            interior_height,
            liquid_height,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Geometry from a fill volume; the interior height is derived from the nominal
    /// vial capacity as a straight cylinder.
    pub fn from_volumes(radius: f64, vial_volume: f64, fill_volume: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(PhysicsError::InvalidGeometry(format!(
                "radius must be > 0, got {radius}"
            )));
        }
        let area = PI * radius * radius;
        Self::new(radius, vial_volume / area, fill_volume / area)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(PhysicsError::InvalidGeometry(format!(
                "radius must be > 0, got {}",
                self.radius
            )));
        }
        if !(self.liquid_height > 0.0 && self.liquid_height < self.interior_height) {
            return Err(PhysicsError::InvalidGeometry(format!(
                "liquid height {} must lie in (0, {})",
                self.liquid_height, self.interior_height
            )));
        }
        Ok(())
    }

    pub fn cross_section(&self) -> f64 {
        PI * self.radius * self.radius
    }

    pub fn fill_volume(&self) -> f64 {
        self.cross_section() * self.liquid_height
    }
}

impl Default for VialGeometry {
    fn default() -> Self {
        VialGeometry::from_volumes(DEFAULT_RADIUS, DEFAULT_VIAL_VOLUME, DEFAULT_FILL_VOLUME)
            .expect("default geometry is valid")
    }
}

/// Flip-and-observe protocol. The observation clock starts at full inversion; the flip
/// occupies `[-t_flip, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestProtocol {
    pub t_flip: f64,
    pub t_obs: f64,
    /// Tilt endpoint, rad.
    pub theta_final: f64,
    /// Explicit frame timestamps; `None` selects the default camera schedule.
    pub frame_schedule: Option<Vec<f64>>,
    /// Gravitational acceleration, m/s².
    pub g: f64,
}

impl TestProtocol {
    pub fn new(t_flip: f64, t_obs: f64) -> Result<Self> {
        let p = TestProtocol {
            t_flip,
            t_obs,
            ..TestProtocol::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_gravity(mut self, g: f64) -> Self {
        self.g = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_flip > 0.0 && self.t_flip.is_finite()) {
            return Err(PhysicsError::InvalidProtocol(format!(
                "t_flip must be > 0, got {}",
                self.t_flip
            )));
        }
        if !(self.t_obs > 0.0 && self.t_obs.is_finite()) {
            return Err(PhysicsError::InvalidProtocol(format!(
                "t_obs must be > 0, got {}",
                self.t_obs
            )));
        }
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(PhysicsError::InvalidProtocol(format!(
                "gravity must be >= 0, got {}",
                self.g
            )));
        }
        if let Some(ts) = &self.frame_schedule {
            if ts.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(PhysicsError::InvalidProtocol(
                    "frame timestamps must be strictly increasing".into(),
                ));
            }
            if ts.iter().any(|&t| t < 0.0 || t > self.t_obs) {
                return Err(PhysicsError::InvalidProtocol(format!(
                    "frame timestamps must lie in [0, {}]",
                    self.t_obs
                )));
            }
        }
        Ok(())
    }
}

impl Default for TestProtocol {
    fn default() -> Self {
        TestProtocol {
            t_flip: 2.0,
            t_obs: 60.0,
            theta_final: PI,
            frame_schedule: None,
            g: STANDARD_GRAVITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    TaylorDrop,
    AdvancingFront,
    Drainage,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::TaylorDrop => "TaylorDrop",
            Regime::AdvancingFront => "AdvancingFront",
            Regime::Drainage => "Drainage",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "taylordrop" | "taylor" => Ok(Regime::TaylorDrop),
            "advancingfront" | "front" => Ok(Regime::AdvancingFront),
            "drainage" => Ok(Regime::Drainage),
            other => Err(format!("unknown regime '{other}'")),
        }
    }
}

/// Viscosity thresholds separating the initial flow regimes, Pa·s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeThresholds {
    /// At or below this viscosity the vial enters observation draining.
    pub drainage_max: f64,
    /// At or below this viscosity (and above `drainage_max`) an advancing front is seen.
    pub front_max: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds {
            drainage_max: 1.0,
            front_max: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionlessReport {
    pub u_vg: f64,
    pub re_vg: f64,
    pub re_flip: f64,
    pub bo: f64,
    pub sigma_taylor: f64,
    pub initial_regime: Regime,
}

/// Buoyancy stress driving the rising air finger, Δρ·g·R with air density taken as zero.
pub fn taylor_stress(fluid: &Fluid, geom: &VialGeometry, g: f64) -> f64 {
    fluid.rho * g * geom.radius
}

fn check_in_film(z: f64, h: f64) -> Result<()> {
    if z < 0.0 || z > h || z.is_nan() {
        return Err(PhysicsError::OutsideFilm { z, h });
    }
    Ok(())
}

/// Parabolic velocity profile of a gravity-driven wall film of thickness `h` at wall
/// distance `z`.
pub fn film_velocity_profile(fluid: &Fluid, h: f64, z: f64, g: f64) -> Result<f64> {
    check_in_film(z, h)?;
    Ok(fluid.rho * g / fluid.eta * (h * z - 0.5 * z * z))
}

/// Shear stress ρg(h − z) inside the film.
pub fn film_shear_stress(fluid: &Fluid, h: f64, z: f64, g: f64) -> Result<f64> {
    check_in_film(z, h)?;
    Ok(fluid.rho * g * (h - z))
}

fn check_drainage_args(x: f64, t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(PhysicsError::NonPositiveTime(t));
    }
    if !(x >= 0.0) {
        return Err(PhysicsError::NegativePosition(x));
    }
    Ok(())
}

/// Drainage film thickness `sqrt(η·x / (g·t))` with η entering as the dynamic viscosity.
///
/// The expression is not dimensionally homogeneous; the simulator uses
/// [`kinematic_film_thickness`], which divides by ρ.
pub fn film_thickness(fluid: &Fluid, x: f64, t: f64, g: f64) -> Result<f64> {
    check_drainage_args(x, t)?;
    Ok((fluid.eta * x / (g * t)).sqrt())
}

/// Drainage film thickness `sqrt(ν·x / (g·t))` with ν = η/ρ, the similarity solution of
/// a gravity-driven film draining from the top of a wall.
pub fn kinematic_film_thickness(fluid: &Fluid, x: f64, t: f64, g: f64) -> Result<f64> {
    check_drainage_args(x, t)?;
    Ok((fluid.kinematic_viscosity() * x / (g * t)).sqrt())
}

/// Forcing stress in a draining film: the film shear stress evaluated on the film
/// thickness from [`film_thickness`].
pub fn drainage_stress(fluid: &Fluid, x: f64, z: f64, t: f64, g: f64) -> Result<f64> {
    let h = film_thickness(fluid, x, t, g)?;
    film_shear_stress(fluid, h, z, g)
}

/// Visco-gravity velocity ρgR²/η.
pub fn visco_gravity_velocity(fluid: &Fluid, geom: &VialGeometry, g: f64) -> f64 {
    fluid.rho * g * geom.radius * geom.radius / fluid.eta
}

/// Visco-gravity Reynolds number ρ(ρg)R³/η².
pub fn reynolds_vg(fluid: &Fluid, geom: &VialGeometry, g: f64) -> f64 {
    let r = geom.radius;
    fluid.rho * (fluid.rho * g) * r * r * r / (fluid.eta * fluid.eta)
}

/// Reynolds number of the flip motion, ρR²/(η·t_flip).
pub fn reynolds_flip(fluid: &Fluid, geom: &VialGeometry, protocol: &TestProtocol) -> f64 {
    let r = geom.radius;
    fluid.rho * r * r / (fluid.eta * protocol.t_flip)
}

/// Experimental Reynolds number ρUR/η. `u_measured` is the meniscus velocity for a Taylor
/// drop, the front velocity for an advancing front and the bath rise velocity during
/// drainage; the formula is the same for all three.
pub fn reynolds_exp(fluid: &Fluid, geom: &VialGeometry, _regime: Regime, u_measured: f64) -> f64 {
    fluid.rho * u_measured * geom.radius / fluid.eta
}

/// Bond number ρgR²/Γ.
pub fn bond_number(fluid: &Fluid, geom: &VialGeometry, g: f64) -> Result<f64> {
    if !(fluid.gamma > 0.0) {
        return Err(PhysicsError::ZeroSurfaceTension);
    }
    Ok(fluid.rho * g * geom.radius * geom.radius / fluid.gamma)
}

pub fn classify_initial_regime(fluid: &Fluid) -> Regime {
    classify_initial_regime_with(fluid, &RegimeThresholds::default())
}

pub fn classify_initial_regime_with(fluid: &Fluid, thresholds: &RegimeThresholds) -> Regime {
    if fluid.eta <= thresholds.drainage_max {
        Regime::Drainage
    } else if fluid.eta <= thresholds.front_max {
        Regime::AdvancingFront
    } else {
        Regime::TaylorDrop
    }
}

/// Rise velocity of the bath fed by a wall film of thickness `h`.
///
/// Mass balance `U·πR² = ū·2πR·h` with the depth-averaged film speed `ū = ρgh²/(3η)`
/// gives `2ρgh³/(3ηR)`. Films thicker than R/3 are outside the thin-film range and
/// only produce a warning.
pub fn bath_rise_velocity(fluid: &Fluid, geom: &VialGeometry, h: f64, g: f64) -> f64 {
    if h > geom.radius / 3.0 {
        warn!(
            "film thickness {h:.3e} m exceeds R/3 = {:.3e} m; thin-film estimate degrades",
            geom.radius / 3.0
        );
    }
    2.0 * fluid.rho * g * h * h * h / (3.0 * fluid.eta * geom.radius)
}

pub fn dimensionless_report(
    fluid: &Fluid,
    geom: &VialGeometry,
    protocol: &TestProtocol,
) -> Result<DimensionlessReport> {
    let g = protocol.g;
    Ok(DimensionlessReport {
        u_vg: visco_gravity_velocity(fluid, geom, g),
        re_vg: reynolds_vg(fluid, geom, g),
        re_flip: reynolds_flip(fluid, geom, protocol),
        bo: bond_number(fluid, geom, g)?,
        sigma_taylor: taylor_stress(fluid, geom, g),
        initial_regime: classify_initial_regime(fluid),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: f64 = 9.81;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    fn vial() -> VialGeometry {
        VialGeometry::new(7.5e-3, 0.045, 0.0113).unwrap()
    }

    #[test]
    fn taylor_stress_values() {
        let f = Fluid::new(1.0, 900.0).unwrap();
        assert!(rel(taylor_stress(&f, &vial(), G), 66.2175) < 1e-9);
        let zero = Fluid::new(1.0, 0.0).unwrap();
        assert_eq!(taylor_stress(&zero, &vial(), G), 0.0);
        let honey = Fluid::new(10.0, 1419.0).unwrap();
        assert!((taylor_stress(&honey, &vial(), G) - 104.4).abs() < 0.05);
    }

    #[test]
    fn film_velocity_values() {
        let f = Fluid::new(1.0, 900.0).unwrap();
        let h = 1e-3;
        assert_eq!(film_velocity_profile(&f, h, 0.0, G).unwrap(), 0.0);
        assert!(rel(film_velocity_profile(&f, h, h, G).unwrap(), 4.4145e-3) < 1e-4);
        assert!(rel(film_velocity_profile(&f, h, h / 2.0, G).unwrap(), 3.3109e-3) < 1e-4);
        assert!(film_velocity_profile(&f, h, 1.1 * h, G).is_err());
        assert!(film_velocity_profile(&f, h, -1e-9, G).is_err());
    }

    #[test]
    fn film_shear_values() {
        let f = Fluid::new(1.0, 900.0).unwrap();
        assert_eq!(film_shear_stress(&f, 1e-3, 1e-3, G).unwrap(), 0.0);
        assert!(rel(film_shear_stress(&f, 1e-3, 0.0, G).unwrap(), 8.829) < 1e-9);
        assert!(film_shear_stress(&f, 1e-3, 2e-3, G).is_err());
    }

    #[test]
    fn shear_stress_matches_velocity_gradient() {
        let f = Fluid::new(0.37, 1210.0).unwrap();
        let h = 8e-4;
        let step = h * 1e-6;
        for &z in &[0.1 * h, 0.3 * h, 0.5 * h, 0.9 * h] {
            let du = film_velocity_profile(&f, h, z + step, G).unwrap()
                - film_velocity_profile(&f, h, z - step, G).unwrap();
            let fd = f.eta * du / (2.0 * step);
            let exact = film_shear_stress(&f, h, z, G).unwrap();
            assert!(rel(fd, exact) <= 1e-6, "z={z}: {fd} vs {exact}");
        }
    }

    #[test]
    fn film_thickness_values() {
        let f = Fluid::new(0.01, 900.0).unwrap();
        assert!(rel(film_thickness(&f, 0.05, 10.0, G).unwrap(), 2.2575e-3) < 1e-4);
        assert_eq!(film_thickness(&f, 0.0, 10.0, G).unwrap(), 0.0);
        let f4 = Fluid::new(0.04, 900.0).unwrap();
        let ratio = film_thickness(&f4, 0.05, 10.0, G).unwrap()
            / film_thickness(&f, 0.05, 10.0, G).unwrap();
        assert!(rel(ratio, 2.0) < 1e-12);
        assert_eq!(
            film_thickness(&f, 0.05, 0.0, G),
            Err(PhysicsError::NonPositiveTime(0.0))
        );
        assert!(film_thickness(&f, 0.05, -1.0, G).is_err());
    }

    #[test]
    fn kinematic_thickness_divides_by_density() {
        let f = Fluid::new(0.01, 900.0).unwrap();
        let a = kinematic_film_thickness(&f, 0.05, 10.0, G).unwrap();
        let b = film_thickness(&f, 0.05, 10.0, G).unwrap();
        assert!(rel(a * 900f64.sqrt(), b) < 1e-12);
    }

    #[test]
    fn drainage_stress_values() {
        let f = Fluid::new(0.01, 900.0).unwrap();
        assert!(rel(drainage_stress(&f, 0.05, 0.0, 10.0, G).unwrap(), 19.93) < 1e-3);
        let h = film_thickness(&f, 0.05, 10.0, G).unwrap();
        assert_eq!(drainage_stress(&f, 0.05, h, 10.0, G).unwrap(), 0.0);
        assert!(drainage_stress(&f, 0.05, 1.01 * h, 10.0, G).is_err());
        let s10 = drainage_stress(&f, 0.05, 0.0, 10.0, G).unwrap();
        let s40 = drainage_stress(&f, 0.05, 0.0, 40.0, G).unwrap();
        assert!(rel(s40, s10 / 2.0) < 1e-12);
    }

    #[test]
    fn drainage_stress_is_composition() {
        let f = Fluid::new(0.3, 1250.0).unwrap();
        for &(x, t) in &[(0.01, 1.0), (0.03, 7.5), (0.04, 55.0)] {
            let h = film_thickness(&f, x, t, G).unwrap();
            for frac in [0.0, 0.25, 0.5, 1.0] {
                let z = frac * h;
                let a = drainage_stress(&f, x, z, t, G).unwrap();
                let b = film_shear_stress(&f, h, z, G).unwrap();
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn visco_gravity_values() {
        let g = vial();
        let f = Fluid::new(100.0, 900.0).unwrap();
        assert!(rel(visco_gravity_velocity(&f, &g, G), 4.9663e-3) < 1e-4);
        let f1 = Fluid::new(1.0, 900.0).unwrap();
        assert!(rel(visco_gravity_velocity(&f1, &g, G), 0.49663) < 1e-4);
        let f10 = Fluid::new(10.0, 900.0).unwrap();
        assert!(rel(visco_gravity_velocity(&f10, &g, G), visco_gravity_velocity(&f1, &g, G) / 10.0) < 1e-12);
    }

    #[test]
    fn reynolds_vg_values() {
        let g = vial();
        let f1 = Fluid::new(1.0, 900.0).unwrap();
        assert!(rel(reynolds_vg(&f1, &g, G), 3.3523) < 1e-4);
        let f10 = Fluid::new(10.0, 900.0).unwrap();
        assert!(rel(reynolds_vg(&f10, &g, G), reynolds_vg(&f1, &g, G) / 100.0) < 1e-12);
        let water = Fluid::new(1e-3, 900.0).unwrap();
        assert!(rel(reynolds_vg(&water, &g, G), 3.3523e6) < 1e-4);
        let lhs = reynolds_vg(&f10, &g, G);
        let rhs = f10.rho * g.radius / f10.eta * visco_gravity_velocity(&f10, &g, G);
        assert!(rel(lhs, rhs) <= 1e-12);
    }

    #[test]
    fn reynolds_flip_values() {
        let g = vial();
        let p2 = TestProtocol::new(2.0, 60.0).unwrap();
        let p05 = TestProtocol::new(0.5, 60.0).unwrap();
        let water = Fluid::new(1e-3, 900.0).unwrap();
        let one = Fluid::new(1.0, 900.0).unwrap();
        assert!(rel(reynolds_flip(&water, &g, &p2), 25.3125) < 1e-9);
        assert!(rel(reynolds_flip(&one, &g, &p2), 0.0253125) < 1e-9);
        assert!(rel(reynolds_flip(&water, &g, &p05), 101.25) < 1e-9);
    }

    #[test]
    fn reynolds_exp_values() {
        let g = vial();
        let f = Fluid::new(1.0, 900.0).unwrap();
        assert_eq!(reynolds_exp(&f, &g, Regime::TaylorDrop, 0.0), 0.0);
        assert!(rel(reynolds_exp(&f, &g, Regime::TaylorDrop, 5e-4), 3.375e-3) < 1e-12);
    }

    #[test]
    fn reynolds_exp_drainage_mass_balance() {
        // Substituting the bath rise velocity gives 2ρ²gh³/(3η²).
        let g = vial();
        let f = Fluid::new(0.05, 1100.0).unwrap();
        for &h in &[1e-5, 1e-4, 5e-4, 2e-3] {
            let u = bath_rise_velocity(&f, &g, h, G);
            let re = reynolds_exp(&f, &g, Regime::Drainage, u);
            let closed = 2.0 * f.rho * f.rho * G * h.powi(3) / (3.0 * f.eta * f.eta);
            assert!(rel(re, closed) < 1e-12);
        }
    }

    #[test]
    fn bond_values() {
        let g = vial();
        let f = Fluid::with_interface(1.0, 900.0, 0.05, 0.0).unwrap();
        assert!(rel(bond_number(&f, &g, G).unwrap(), 9.9326) < 1e-4);
        let f = Fluid::with_interface(1.0, 900.0, 0.03, 0.0).unwrap();
        assert!(rel(bond_number(&f, &g, G).unwrap(), 16.554) < 1e-4);
        let f = Fluid::with_interface(1.0, 900.0, 0.0, 0.0).unwrap();
        assert_eq!(bond_number(&f, &g, G), Err(PhysicsError::ZeroSurfaceTension));
        let mut prev = f64::INFINITY;
        for gamma in [0.01, 0.1, 1.0, 10.0, 1e3, 1e6] {
            let f = Fluid::with_interface(1.0, 900.0, gamma, 0.0).unwrap();
            let bo = bond_number(&f, &g, G).unwrap();
            assert!(bo < prev);
            prev = bo;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn regime_thresholds() {
        let rho = 1000.0;
        assert_eq!(classify_initial_regime(&Fluid::new(100.0, rho).unwrap()), Regime::TaylorDrop);
        assert_eq!(classify_initial_regime(&Fluid::new(5.0, rho).unwrap()), Regime::AdvancingFront);
        assert_eq!(classify_initial_regime(&Fluid::new(0.01, rho).unwrap()), Regime::Drainage);
        assert_eq!(classify_initial_regime(&Fluid::new(1.0, rho).unwrap()), Regime::Drainage);
        assert_eq!(classify_initial_regime(&Fluid::new(30.0, rho).unwrap()), Regime::AdvancingFront);
    }

    #[test]
    fn regime_is_monotone_step() {
        let mut last = Regime::Drainage;
        for i in 0..=500 {
            let eta = 10f64.powf(-3.0 + 7.0 * i as f64 / 500.0);
            let r = classify_initial_regime(&Fluid::new(eta, 1000.0).unwrap());
            // Drainage < AdvancingFront < TaylorDrop in the ordering along increasing η.
            let order = |r: Regime| match r {
                Regime::Drainage => 0,
                Regime::AdvancingFront => 1,
                Regime::TaylorDrop => 2,
            };
            assert!(order(r) >= order(last));
            last = r;
        }
    }

    #[test]
    fn bath_rise_values() {
        let g = vial();
        let f = Fluid::new(0.01, 900.0).unwrap();
        assert_eq!(bath_rise_velocity(&f, &g, 0.0, G), 0.0);
        // 2·900·9.81·(5e-4)³ / (3·0.01·7.5e-3)
        assert!(rel(bath_rise_velocity(&f, &g, 5e-4, G), 9.81e-3) < 1e-9);
        let ratio = bath_rise_velocity(&f, &g, 2e-4, G) / bath_rise_velocity(&f, &g, 1e-4, G);
        assert!(rel(ratio, 8.0) < 1e-12);
    }

    #[test]
    fn report_for_low_viscosity_silicone_oil() {
        let f = Fluid::new(7.280e-3, 866.1).unwrap();
        let p = TestProtocol::default();
        let r = dimensionless_report(&f, &VialGeometry::default(), &p).unwrap();
        assert_eq!(r.initial_regime, Regime::Drainage);
        let again = dimensionless_report(&f, &VialGeometry::default(), &p).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn report_for_viscous_fluid() {
        let f = Fluid::new(100.0, 1400.0).unwrap();
        let r = dimensionless_report(&f, &VialGeometry::default(), &TestProtocol::default()).unwrap();
        assert!(r.re_flip < r.re_vg);
        assert_eq!(r.initial_regime, Regime::TaylorDrop);
        for v in [r.u_vg, r.re_vg, r.re_flip, r.bo, r.sigma_taylor] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn report_propagates_zero_surface_tension() {
        let f = Fluid::with_interface(1.0, 1000.0, 0.0, 0.0).unwrap();
        assert!(dimensionless_report(&f, &VialGeometry::default(), &TestProtocol::default()).is_err());
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(Fluid::new(0.0, 1000.0).is_err());
        assert!(Fluid::new(1.0, -1.0).is_err());
        assert!(Fluid::with_interface(1.0, 1000.0, 0.04, 4.0).is_err());
        assert!(VialGeometry::new(7.5e-3, 0.01, 0.02).is_err());
        assert!(TestProtocol::new(0.0, 60.0).is_err());
    }

    #[test]
    fn default_geometry_matches_vial() {
        let g = VialGeometry::default();
        assert!(rel(g.fill_volume(), 2e-6) < 1e-12);
        assert!(rel(g.cross_section() * g.interior_height, 8e-6) < 1e-12);
    }

    mod scaling {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn formulas_scale_exactly_with_viscosity(
                log_eta in -3.0f64..3.0,
                rho in 700.0f64..1500.0,
                s in 0.1f64..10.0,
            ) {
                let eta = 10f64.powf(log_eta);
                let geom = VialGeometry::default();
                let p = TestProtocol::default();
                let a = Fluid::new(eta, rho).unwrap();
                let b = Fluid::new(eta * s, rho).unwrap();
                let h_a = film_thickness(&a, 0.02, 3.0, G).unwrap();
                let h_b = film_thickness(&b, 0.02, 3.0, G).unwrap();
                prop_assert!(rel(h_b, h_a * s.sqrt()) < 1e-12);
                prop_assert!(rel(visco_gravity_velocity(&b, &geom, G), visco_gravity_velocity(&a, &geom, G) / s) < 1e-12);
                prop_assert!(rel(reynolds_vg(&b, &geom, G), reynolds_vg(&a, &geom, G) / (s * s)) < 1e-12);
                prop_assert!(rel(reynolds_flip(&b, &geom, &p), reynolds_flip(&a, &geom, &p) / s) < 1e-12);
            }
        }
    }
}
