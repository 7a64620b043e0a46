//! Ellis-model rheology and non-Newtonian screening numbers.
//!
//! The Ellis model `η(σ) = η₀ / (1 + (kσ)^(a−1))` is fitted in log-viscosity space with a
//! damped Gauss-Newton (Levenberg-Marquardt) iteration using the analytic Jacobian.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RheologyError {
    #[error("invalid flow curve: {0}")]
    InvalidCurve(String),
    #[error("invalid LVE table: {0}")]
    InvalidTable(String),
    #[error("Ellis fit did not converge after {iterations} iterations (gradient {gradient:.3e})")]
    NonConvergence { iterations: usize, gradient: f64 },
    #[error("flat flow curve has no shear-thinning to fit")]
    DegenerateCurve,
    #[error("no relaxation time estimate: neither a terminal regime nor a G'/G'' crossover")]
    NoEstimate,
    #[error("{0} must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, RheologyError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllisParams {
    /// Zero-shear viscosity, Pa·s.
    pub eta0: f64,
    /// Inverse critical stress, 1/Pa.
    pub k: f64,
    /// Shear-thinning exponent (a = 1 is Newtonian).
    pub a: f64,
}

impl EllisParams {
    pub fn new(eta0: f64, k: f64, a: f64) -> Result<Self> {
        if !(eta0 > 0.0) {
            return Err(RheologyError::NonPositive("eta0", eta0));
        }
        if !(k >= 0.0) {
            return Err(RheologyError::InvalidCurve(format!("k must be >= 0, got {k}")));
        }
        if !(a >= 1.0) {
            return Err(RheologyError::InvalidCurve(format!("a must be >= 1, got {a}")));
        }
        Ok(EllisParams { eta0, k, a })
    }

    /// Critical stress 1/k; `None` for the Newtonian branch k = 0.
    pub fn sigma_crit(&self) -> Option<f64> {
        (self.k > 0.0).then(|| 1.0 / self.k)
    }
}

/// Ellis parameter sets of four polymer solutions: 2 wt% PIB in S6, 15 wt% PVP,
/// 25 wt% PVP and 1 wt% PEO, in that order.
pub const POLYMER_SOLUTIONS: [(&str, EllisParams); 4] = [
    ("2wt% PIB in S6", EllisParams { eta0: 0.24, k: 1.7e-9, a: 1.02 }),
    ("15wt% PVP", EllisParams { eta0: 1.4, k: 0.0019, a: 2.25 }),
    ("25wt% PVP", EllisParams { eta0: 24.1, k: 0.0021, a: 1.98 }),
    ("1wt% PEO", EllisParams { eta0: 13.9, k: 0.27, a: 3.0 }),
];

/// Steady-shear flow curve: (stress, viscosity) pairs with strictly increasing stress.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCurve {
    points: Vec<(f64, f64)>,
}

impl FlowCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(RheologyError::InvalidCurve("no points".into()));
        }
        for (i, &(s, e)) in points.iter().enumerate() {
            if !(s > 0.0 && e > 0.0 && s.is_finite() && e.is_finite()) {
                return Err(RheologyError::InvalidCurve(format!(
                    "point {i}: stress and viscosity must be positive"
                )));
            }
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(RheologyError::InvalidCurve(
                "stress must be strictly increasing".into(),
            ));
        }
        Ok(FlowCurve { points })
    }

    /// Noise-free curve from Ellis parameters at the given stresses.
    pub fn synthesize(params: &EllisParams, stresses: &[f64]) -> Result<Self> {
        Self::new(
            stresses
                .iter()
                .map(|&s| (s, ellis_viscosity(params, s)))
                .collect(),
        )
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let rows = parse_columns(text, 2)?;
        Self::new(rows.into_iter().map(|r| (r[0], r[1])).collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RheologyError::Io(e.to_string()))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LvePoint {
    /// Angular frequency, rad/s.
    pub omega: f64,
    /// Storage modulus, Pa.
    pub g_storage: f64,
    /// Loss modulus, Pa.
    pub g_loss: f64,
}

/// Linear viscoelastic frequency sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LveTable {
    points: Vec<LvePoint>,
}

impl LveTable {
    pub fn new(points: Vec<LvePoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.omega > 0.0 && p.g_storage >= 0.0 && p.g_loss >= 0.0) {
                return Err(RheologyError::InvalidTable(format!(
                    "point {i}: need omega > 0 and non-negative moduli"
                )));
            }
        }
        if points.windows(2).any(|w| !(w[1].omega > w[0].omega)) {
            return Err(RheologyError::InvalidTable(
                "omega must be strictly increasing".into(),
            ));
        }
        Ok(LveTable { points })
    }

    /// Single-mode Maxwell response with modulus `g` and relaxation time `tau`.
    pub fn maxwell(g: f64, tau: f64, omegas: &[f64]) -> Result<Self> {
        Self::new(
            omegas
                .iter()
                .map(|&w| {
                    let wt = w * tau;
                    let d = 1.0 + wt * wt;
                    LvePoint {
                        omega: w,
                        g_storage: g * wt * wt / d,
                        g_loss: g * wt / d,
                    }
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[LvePoint] {
        &self.points
    }

    pub fn parse(text: &str) -> Result<Self> {
        let rows = parse_columns(text, 3)?;
        Self::new(
            rows.into_iter()
                .map(|r| LvePoint {
                    omega: r[0],
                    g_storage: r[1],
                    g_loss: r[2],
                })
                .collect(),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RheologyError::Io(e.to_string()))?;
        Self::parse(&text)
    }
}

/// Numeric rows of a delimited text file. Fields may be separated by whitespace, commas,
/// tabs or semicolons; lines starting with '#' and blank lines are skipped.
fn parse_columns(text: &str, ncols: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != ncols {
            return Err(RheologyError::Parse {
                line: i + 1,
                msg: format!("expected {ncols} columns, found {}", fields.len()),
            });
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| RheologyError::Parse {
                    line: i + 1,
                    msg: format!("'{f}': {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn ellis_viscosity(p: &EllisParams, sigma: f64) -> f64 {
    if p.k == 0.0 || p.a == 1.0 {
        // (kσ)^0 = 1 for k > 0; the k = 0 branch is Newtonian.
        return if p.k == 0.0 { p.eta0 } else { p.eta0 / 2.0 };
    }
    p.eta0 / (1.0 + (p.k * sigma).powf(p.a - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllisFit {
    pub params: EllisParams,
    /// Euclidean norm of the log-viscosity residuals.
    pub residual_norm: f64,
    pub iterations: usize,
    /// True when the curve was flat and the Newtonian branch (k = 0, a = 1) was returned.
    pub newtonian: bool,
}

/// Solver settings for [`fit_ellis_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Convergence threshold on the infinity norm of the objective gradient.
    pub gradient_tol: f64,
    pub max_iterations: usize,
    /// Relative log-viscosity spread below which the curve counts as flat.
    pub flat_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            gradient_tol: 1e-8,
            max_iterations: 2000,
            flat_tol: 1e-9,
        }
    }
}

pub fn fit_ellis(curve: &FlowCurve) -> Result<EllisFit> {
    fit_ellis_with(curve, &FitOptions::default())
}

/// Parameters are (ln η₀, ln k, a − 1); `a − 1` is kept non-negative.
struct LogEllis<'a> {
    log_sigma: &'a [f64],
    log_eta: &'a [f64],
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl LogEllis<'_> {
    fn residuals(&self, p: &[f64; 3]) -> DVector<f64> {
        DVector::from_iterator(
            self.log_sigma.len(),
            self.log_sigma
                .iter()
                .zip(self.log_eta)
                .map(|(&s, &y)| p[0] - softplus(p[2] * (p[1] + s)) - y),
        )
    }

    fn jacobian(&self, p: &[f64; 3]) -> DMatrix<f64> {
        let n = self.log_sigma.len();
        let mut j = DMatrix::zeros(n, 3);
        for (i, &s) in self.log_sigma.iter().enumerate() {
            let w = logistic(p[2] * (p[1] + s));
            j[(i, 0)] = 1.0;
            j[(i, 1)] = -w * p[2];
            j[(i, 2)] = -w * (p[1] + s);
        }
        j
    }

    fn cost(&self, p: &[f64; 3]) -> f64 {
        0.5 * self.residuals(p).norm_squared()
    }

    /// Levenberg-Marquardt from `start`. The damped step solves the stacked system
    /// `[J; √λ·D] δ = −[r; 0]` by SVD so the normal equations are never formed.
    fn solve(&self, start: [f64; 3], opts: &FitOptions, max_iter: usize) -> ([f64; 3], f64, f64, usize) {
        let mut p = start;
        let mut cost = self.cost(&p);
        let mut lambda: f64 = 1e-3;
        let mut grad_norm = f64::INFINITY;
        let mut it = 0;
        while it < max_iter {
            it += 1;
            let r = self.residuals(&p);
            let j = self.jacobian(&p);
            let grad = j.transpose() * &r;
            grad_norm = grad.amax();
            if grad_norm <= opts.gradient_tol {
                break;
            }
            let n = r.len();
            let mut improved = false;
            for _ in 0..40 {
                let mut a = DMatrix::zeros(n + 3, 3);
                let mut b = DVector::zeros(n + 3);
                a.view_mut((0, 0), (n, 3)).copy_from(&j);
                for c in 0..3 {
                    let col_norm = j.column(c).norm().max(1e-12);
                    a[(n + c, c)] = lambda.sqrt() * col_norm;
                }
                b.rows_mut(0, n).copy_from(&(-&r));
                let svd = a.svd(true, true);
                let delta = match svd.solve(&b, 1e-15) {
                    Ok(d) => d,
                    Err(_) => break,
                };
                let mut trial = [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
                trial[2] = trial[2].max(0.0);
                let trial_cost = self.cost(&trial);
                if trial_cost < cost {
                    let step = (0..3).map(|c| (trial[c] - p[c]).abs()).fold(0.0, f64::max);
                    p = trial;
                    cost = trial_cost;
                    lambda = (lambda / 3.0).max(1e-15);
                    improved = true;
                    if step < 1e-15 {
                        it = max_iter;
                    }
                    break;
                }
                lambda *= 4.0;
                if lambda > 1e16 {
                    break;
                }
            }
            if !improved {
                // No descent direction left at machine precision.
                let r = self.residuals(&p);
                grad_norm = (self.jacobian(&p).transpose() * r).amax();
                break;
            }
        }
        (p, cost, grad_norm, it)
    }
}

pub fn fit_ellis_with(curve: &FlowCurve, opts: &FitOptions) -> Result<EllisFit> {
    if curve.len() < 4 {
        return Err(RheologyError::InvalidCurve(format!(
            "need at least 4 points to fit, got {}",
            curve.len()
        )));
    }
    let log_sigma: Vec<f64> = curve.points().iter().map(|p| p.0.ln()).collect();
    let log_eta: Vec<f64> = curve.points().iter().map(|p| p.1.ln()).collect();
    let mean = log_eta.iter().sum::<f64>() / log_eta.len() as f64;
    let spread = log_eta.iter().map(|y| (y - mean).abs()).fold(0.0, f64::max);
    if spread <= opts.flat_tol * mean.abs().max(1.0) {
        return Ok(EllisFit {
            params: EllisParams {
                eta0: mean.exp(),
                k: 0.0,
                a: 1.0,
            },
            residual_norm: log_eta.iter().map(|y| (y - mean).powi(2)).sum::<f64>().sqrt(),
            iterations: 0,
            newtonian: true,
        });
    }

    let model = LogEllis {
        log_sigma: &log_sigma,
        log_eta: &log_eta,
    };
    let y_max = log_eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s_lo = log_sigma[0];
    let s_hi = log_sigma[log_sigma.len() - 1];

    // Multi-start over exponent and critical-stress guesses spanning and bracketing the
    // data, then refine the best start to convergence.
    let mut best: Option<([f64; 3], f64)> = None;
    let exponents = [0.02, 0.1, 0.3, 0.6, 1.0, 1.5, 2.5];
    for &m in &exponents {
        for q in 0..=6 {
            let s_c = s_lo - 2.0 + (s_hi - s_lo + 4.0) * q as f64 / 6.0;
            let start = [y_max + 0.1, -s_c, m];
            let (p, cost, _, _) = model.solve(start, opts, 30);
            if best.map_or(true, |(_, c)| cost < c) {
                best = Some((p, cost));
            }
        }
    }
    let (start, _) = best.expect("at least one start");
    let (p, cost, grad, iterations) = model.solve(start, opts, opts.max_iterations);
    if grad > opts.gradient_tol && !(cost < 1e-28) {
        return Err(RheologyError::NonConvergence {
            iterations,
            gradient: grad,
        });
    }
    Ok(EllisFit {
        params: EllisParams {
            eta0: p[0].exp(),
            k: p[1].exp(),
            a: 1.0 + p[2],
        },
        residual_norm: (2.0 * cost).sqrt(),
        iterations,
        newtonian: false,
    })
}

/// Deborah number τ / t_flow.
pub fn deborah(tau: f64, t_flow: f64) -> Result<f64> {
    if !(t_flow > 0.0) {
        return Err(RheologyError::NonPositive("t_flow", t_flow));
    }
    if !(tau >= 0.0) {
        return Err(RheologyError::NonPositive("tau", tau));
    }
    Ok(tau / t_flow)
}

/// Dimensionless stress amplitude σ_flow / σ_crit.
pub fn stress_amplitude(sigma_flow: f64, sigma_crit: f64) -> Result<f64> {
    if !(sigma_crit > 0.0) {
        return Err(RheologyError::NonPositive("sigma_crit", sigma_crit));
    }
    Ok(sigma_flow / sigma_crit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelaxationMethod {
    /// Average of G′/(G″ω) over the terminal (low-frequency) points.
    Terminal,
    /// Inverse of the G′ = G″ crossover frequency.
    Crossover,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxationEstimate {
    pub tau: f64,
    pub method: RelaxationMethod,
}

/// Number of lowest-frequency terminal points averaged.
const TERMINAL_WINDOW: usize = 3;
/// Allowed relative deviation of the local slopes from terminal scaling (2 for G′, 1 for G″).
const TERMINAL_SLOPE_TOL: f64 = 0.2;

fn local_slopes(points: &[LvePoint], i: usize) -> Option<(f64, f64)> {
    let (a, b) = if i + 1 < points.len() { (i, i + 1) } else { (i - 1, i) };
    let (pa, pb) = (points[a], points[b]);
    if pa.g_storage <= 0.0 || pb.g_storage <= 0.0 || pa.g_loss <= 0.0 || pb.g_loss <= 0.0 {
        return None;
    }
    let dlw = (pb.omega / pa.omega).ln();
    Some((
        (pb.g_storage / pa.g_storage).ln() / dlw,
        (pb.g_loss / pa.g_loss).ln() / dlw,
    ))
}

/// Terminal-regime estimate, `None` when fewer than three low-frequency points are
/// viscous-dominated with terminal slopes.
pub fn terminal_relaxation_time(table: &LveTable) -> Option<f64> {
    let pts = table.points();
    if pts.len() < 3 {
        return None;
    }
    let mut taus = Vec::with_capacity(TERMINAL_WINDOW);
    for (i, p) in pts.iter().enumerate() {
        let terminal = p.g_loss > p.g_storage
            && local_slopes(pts, i).is_some_and(|(s1, s2)| {
                (s1 - 2.0).abs() <= TERMINAL_SLOPE_TOL * 2.0 && (s2 - 1.0).abs() <= TERMINAL_SLOPE_TOL
            });
        if terminal {
            taus.push(p.g_storage / (p.g_loss * p.omega));
            if taus.len() == TERMINAL_WINDOW {
                break;
            }
        } else if !taus.is_empty() {
            // The window must be contiguous from the lowest terminal frequency.
            break;
        }
    }
    (taus.len() == TERMINAL_WINDOW).then(|| taus.iter().sum::<f64>() / taus.len() as f64)
}

/// 1/ω_c with ω_c the first G′ = G″ crossover, located by linear interpolation of
/// ln(G′/G″) against ln ω.
pub fn crossover_relaxation_time(table: &LveTable) -> Option<f64> {
    let pts = table.points();
    let logs: Vec<Option<(f64, f64)>> = pts
        .iter()
        .map(|p| {
            (p.g_storage > 0.0 && p.g_loss > 0.0)
                .then(|| (p.omega.ln(), (p.g_storage / p.g_loss).ln()))
        })
        .collect();
    for w in logs.windows(2) {
        if let [Some((x0, d0)), Some((x1, d1))] = *w {
            if d0 == 0.0 {
                return Some((-x0).exp());
            }
            if d0.signum() != d1.signum() && d1 != 0.0 || d1 == 0.0 {
                let x = x0 - d0 * (x1 - x0) / (d1 - d0);
                return Some((-x).exp());
            }
        }
    }
    None
}

pub fn estimate_relaxation_time(table: &LveTable) -> Result<RelaxationEstimate> {
    if table.points().len() < 3 {
        return Err(RheologyError::InvalidTable("need at least 3 points".into()));
    }
    if let Some(tau) = terminal_relaxation_time(table) {
        return Ok(RelaxationEstimate {
            tau,
            method: RelaxationMethod::Terminal,
        });
    }
    crossover_relaxation_time(table)
        .map(|tau| RelaxationEstimate {
            tau,
            method: RelaxationMethod::Crossover,
        })
        .ok_or(RheologyError::NoEstimate)
}
