//! Synthetic camera and image processing: rasterisation of flow states, Gaussian blur,
//! Sobel magnitude, rotated ROI extraction and ROI jitter augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::flowsim::{FlowState, FlowTrajectory};
use crate::physics::{TestProtocol, VialGeometry};

pub const ROI_HEIGHT: usize = 104;
pub const ROI_WIDTH: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("invalid frame schedule: {0}")]
    Schedule(String),
    #[error("ROI footprint leaves the {height}x{width} frame (rows {y0:.2}..{y1:.2}, cols {x0:.2}..{x1:.2})")]
    OutOfBounds {
        height: usize,
        width: usize,
        y0: f64,
        y1: f64,
        x0: f64,
        x1: f64,
    },
    #[error("invalid image parameters: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Camera timestamps: 2 fps for the first 5 s, then 0.5 fps, truncated at `t_obs`.
/// An explicit schedule on the protocol is returned unchanged.
pub fn frame_schedule(protocol: &TestProtocol) -> Result<Vec<f64>> {
    if let Some(ts) = &protocol.frame_schedule {
        if ts.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ImagingError::Schedule("timestamps must be strictly increasing".into()));
        }
        return Ok(ts.clone());
    }
    if protocol.t_obs < 5.0 {
        return Err(ImagingError::Schedule(format!(
            "default schedule needs t_obs >= 5 s, got {}",
            protocol.t_obs
        )));
    }
    let fast = (1..=10).map(|k| 0.5 * k as f64);
    let slow = (1..=25).map(|k| 5.0 + 2.0 * k as f64);
    Ok(fast.chain(slow).filter(|&t| t <= protocol.t_obs).collect())
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Frame {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Frame { height, width, pixels }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    /// Pixel with half-sample symmetric reflection outside the frame.
    #[inline]
    fn get_reflect(&self, r: isize, c: isize) -> f64 {
        self.get(reflect(r, self.height), reflect(c, self.width))
    }

    fn bilinear(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (r0, c0) = (y0 as usize, x0 as usize);
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let top = self.get(r0, c0) * (1.0 - fx) + self.get(r0, c1) * fx;
        let bot = self.get(r1, c0) * (1.0 - fx) + self.get(r1, c1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Synthetic camera settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Rows above and below the vial interior.
    pub margin_rows: usize,
    /// Intensity of empty vial and surroundings.
    pub background: f64,
    /// Maximum darkening by an optically thick liquid path.
    pub contrast: f64,
    /// Attenuation length of the liquid, m.
    pub attenuation_length: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    /// Vertical shift of the vial in the frame, rows.
    pub offset_rows: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 120,
            width: 16,
            margin_rows: 4,
            background: 0.85,
            contrast: 0.6,
            attenuation_length: 2e-3,
            noise_sigma: 0.01,
            noise_seed: 0,
            offset_rows: 0.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < ROI_HEIGHT || self.width < ROI_WIDTH {
            return Err(ImagingError::Invalid(format!(
                "frame {}x{} is smaller than the ROI",
                self.height, self.width
            )));
        }
        if 2 * self.margin_rows >= self.height {
            return Err(ImagingError::Invalid("margins leave no vial rows".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.attenuation_length > 0.0) {
            return Err(ImagingError::Invalid("noise must be >= 0 and attenuation > 0".into()));
        }
        if !((0.0..=1.0).contains(&self.background) && (0.0..=self.background).contains(&self.contrast)) {
            return Err(ImagingError::Invalid("background and contrast must stay in [0, 1]".into()));
        }
        Ok(())
    }

    fn vial_rows(&self) -> f64 {
        (self.height - 2 * self.margin_rows) as f64
    }
}

/// Chord length through an annulus of outer radius `r` and thickness `h` at lateral
/// offset `y`.
fn annulus_chord(r: f64, h: f64, y: f64) -> f64 {
    let outer = (r * r - y * y).max(0.0).sqrt();
    let ri = (r - h).max(0.0);
    let inner = (ri * ri - y * y).max(0.0).sqrt();
    2.0 * (outer - inner)
}

/// Mean film thickness over `[a, b]` from the cell-averaged wall profile.
fn mean_film(profile: &[f64], length: f64, a: f64, b: f64) -> f64 {
    if b <= a || profile.is_empty() {
        return 0.0;
    }
    let n = profile.len();
    let dx = length / n as f64;
    let i0 = ((a / dx).floor().max(0.0) as usize).min(n - 1);
    let i1 = ((b / dx).ceil() as usize).min(n);
    let mut acc = 0.0;
    for (i, &h) in profile.iter().enumerate().take(i1).skip(i0) {
        let lo = (i as f64 * dx).max(a);
        let hi = ((i + 1) as f64 * dx).min(b);
        if hi > lo {
            acc += h * (hi - lo);
        }
    }
    acc / (b - a)
}

/// Draws the liquid silhouette seen through the vial by Beer-Lambert attenuation along
/// the line of sight. Column and bath are full cylinders, the film an annulus.
pub fn rasterize(state: &FlowState, geom: &VialGeometry, cfg: &RenderConfig) -> Frame {
    let r = geom.radius;
    let len = geom.interior_height;
    let rows_per_m = cfg.vial_rows() / len;
    let top = cfg.margin_rows as f64 + cfg.offset_rows;
    let shade = |path: f64| cfg.background - cfg.contrast * (1.0 - (-path / cfg.attenuation_length).exp());
    let col_y: Vec<f64> = (0..cfg.width)
        .map(|c| -r + (c as f64 + 0.5) * 2.0 * r / cfg.width as f64)
        .collect();
    let bath_top = len - state.bath_height;
    let mut frame = Frame::filled(cfg.height, cfg.width, cfg.background);
    for row in 0..cfg.height {
        // Wall interval covered by this row.
        let a = ((row as f64 - top) / rows_per_m).max(0.0);
        let b = ((row as f64 + 1.0 - top) / rows_per_m).min(len);
        if b <= a {
            continue;
        }
        let span = (row as f64 + 1.0 - top).min(cfg.vial_rows()) - (row as f64 - top).max(0.0);
        let frac = |lo: f64, hi: f64| ((hi.min(b) - lo.max(a)).max(0.0) * rows_per_m).min(1.0);
        let f_col = frac(0.0, state.column_bottom);
        let f_bath = frac(bath_top, len);
        let film_lo = state.column_bottom.max(a);
        let film_hi = bath_top.min(b);
        let f_film = frac(state.column_bottom, bath_top);
        let h = mean_film(&state.film_profile, len, film_lo, film_hi);
        for (c, &y) in col_y.iter().enumerate() {
            let full = shade(2.0 * (r * r - y * y).max(0.0).sqrt());
            let film = shade(annulus_chord(r, h, y));
            let empty = cfg.background * (span - f_col - f_bath - f_film).max(0.0);
            let inside = f_col * full + f_bath * full + f_film * film + empty;
            frame.pixels[row * cfg.width + c] = inside + cfg.background * (1.0 - span).max(0.0);
        }
    }
    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed ^ state.t.to_bits().rotate_left(17));
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for p in frame.pixels.iter_mut() {
            *p += normal.sample(&mut rng);
        }
    }
    for p in frame.pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    frame
}

/// One frame per recorded state of the trajectory.
pub fn render_video(traj: &FlowTrajectory, cfg: &RenderConfig) -> Vec<Frame> {
    traj.states.iter().map(|s| rasterize(s, &traj.geom, cfg)).collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian blur truncated at 3σ with symmetric padding.
pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as isize;
    let tmp = Frame::from_fn(frame.height, frame.width, |r, c| {
        k.iter()
            .enumerate()
            .map(|(i, w)| w * frame.get_reflect(r as isize, c as isize + i as isize - rad))
            .sum()
    });
    Frame::from_fn(frame.height, frame.width, |r, c| {
        k.iter()
            .enumerate()
            .map(|(i, w)| w * tmp.get_reflect(r as isize + i as isize - rad, c as isize))
            .sum()
    })
}

/// Largest Sobel magnitude reachable with intensities in [0, 1].
pub const SOBEL_MAX: f64 = 4.472_135_954_999_579;

/// Raw horizontal and vertical Sobel responses at a pixel.
pub fn sobel_components(frame: &Frame, r: usize, c: usize) -> (f64, f64) {
    let p = |dr: isize, dc: isize| frame.get_reflect(r as isize + dr, c as isize + dc);
    let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
    let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
    (gx, gy)
}

/// Sobel gradient magnitude divided by [`SOBEL_MAX`].
pub fn sobel_magnitude(frame: &Frame) -> Frame {
    Frame::from_fn(frame.height, frame.width, |r, c| {
        let (gx, gy) = sobel_components(frame, r, c);
        ((gx * gx + gy * gy).sqrt() / SOBEL_MAX).min(1.0)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessConfig {
    pub blur_sigma: f64,
    /// Apply the blur before the gradient (otherwise after).
    pub blur_first: bool,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        ProcessConfig {
            blur_sigma: 1.0,
            blur_first: true,
        }
    }
}

pub fn preprocess(frames: &[Frame], cfg: &ProcessConfig) -> Vec<Frame> {
    frames
        .iter()
        .map(|f| {
            if cfg.blur_first {
                sobel_magnitude(&gaussian_blur(f, cfg.blur_sigma))
            } else {
                gaussian_blur(&sobel_magnitude(f), cfg.blur_sigma)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSpec {
    /// Left edge, px.
    pub origin_x: f64,
    /// Top edge, px.
    pub origin_y: f64,
    /// Rotation about the ROI centre, degrees.
    pub rotation: f64,
}

impl Default for RoiSpec {
    fn default() -> Self {
        RoiSpec {
            origin_x: 1.0,
            origin_y: 12.0,
            rotation: 0.0,
        }
    }
}

impl RoiSpec {
    pub fn shifted(&self, dx: f64, dy: f64, rot: f64) -> RoiSpec {
        RoiSpec {
            origin_x: self.origin_x + dx,
            origin_y: self.origin_y + dy,
            rotation: self.rotation + rot,
        }
    }

    /// Sample position (row, column) in pixel-index coordinates of ROI pixel (i, j).
    fn sample_point(&self, i: usize, j: usize) -> (f64, f64) {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let u = j as f64 + 0.5 - ROI_WIDTH as f64 / 2.0;
        let v = i as f64 + 0.5 - ROI_HEIGHT as f64 / 2.0;
        let cx = self.origin_x + ROI_WIDTH as f64 / 2.0;
        let cy = self.origin_y + ROI_HEIGHT as f64 / 2.0;
        (cy + u * s + v * c - 0.5, cx + u * c - v * s - 0.5)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        let corners = [
            self.sample_point(0, 0),
            self.sample_point(0, ROI_WIDTH - 1),
            self.sample_point(ROI_HEIGHT - 1, 0),
            self.sample_point(ROI_HEIGHT - 1, ROI_WIDTH - 1),
        ];
        let y0 = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let y1 = corners.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let x0 = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let x1 = corners.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let eps = 1e-9;
        if y0 < -eps || x0 < -eps || y1 > (height - 1) as f64 + eps || x1 > (width - 1) as f64 + eps {
            return Err(ImagingError::OutOfBounds { height, width, y0, y1, x0, x1 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub count: usize,
    /// px
    pub max_shift: f64,
    /// degrees
    pub max_rotation: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            count: 10,
            max_shift: 3.0,
            max_rotation: 1.0,
            seed: 0,
        }
    }
}

/// Stack of `t` ROI crops (each 104×10, row-major) plus the fluid density.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSequence {
    pub t: usize,
    pub data: Vec<f32>,
    /// kg/m³
    pub density: f64,
}

impl RoiSequence {
    pub const FRAME_LEN: usize = ROI_HEIGHT * ROI_WIDTH;

    pub fn frame(&self, k: usize) -> &[f32] {
        &self.data[k * Self::FRAME_LEN..(k + 1) * Self::FRAME_LEN]
    }
}

pub fn extract_roi(frames: &[Frame], spec: &RoiSpec, density: f64) -> Result<RoiSequence> {
    let mut data = Vec::with_capacity(frames.len() * RoiSequence::FRAME_LEN);
    let mut points = Vec::with_capacity(RoiSequence::FRAME_LEN);
    for i in 0..ROI_HEIGHT {
        for j in 0..ROI_WIDTH {
            points.push(spec.sample_point(i, j));
        }
    }
    for f in frames {
        spec.check_bounds(f.height, f.width)?;
        data.extend(points.iter().map(|&(y, x)| f.bilinear(y.max(0.0), x.max(0.0)) as f32));
    }
    Ok(RoiSequence {
        t: frames.len(),
        data,
        density,
    })
}

/// Jitter offsets and rotation of augmentation `index`; independent of the other indices.
pub fn augment_offsets(aug: &AugmentSpec, index: usize) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(aug.seed);
    rng.set_stream(index as u64 + 1);
    let dx = rng.random::<f64>() * aug.max_shift;
    let dy = rng.random::<f64>() * aug.max_shift;
    let rot = rng.random::<f64>() * aug.max_rotation;
    (dx, dy, rot)
}

/// `count` jittered ROI sequences; the base ROI itself is not among them.
pub fn augment(frames: &[Frame], base: &RoiSpec, aug: &AugmentSpec, density: f64) -> Result<Vec<RoiSequence>> {
    if aug.count == 0 {
        return Err(ImagingError::Invalid("augmentation count must be >= 1".into()));
    }
    (0..aug.count)
        .map(|k| {
            let (dx, dy, rot) = augment_offsets(aug, k);
            extract_roi(frames, &base.shifted(dx, dy, rot), density)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowsim::simulate;
    use crate::physics::Fluid;

    fn quiet() -> RenderConfig {
        RenderConfig {
            noise_sigma: 0.0,
            ..RenderConfig::default()
        }
    }

    fn state_with(geom: &VialGeometry, column: f64, bath: f64) -> FlowState {
        let area = geom.cross_section();
        FlowState {
            t: 0.0,
            regime: crate::physics::Regime::Drainage,
            bubble_depth: 0.0,
            front_position: column,
            column_bottom: column,
            bath_height: bath,
            film_profile: vec![0.0; 128],
            t_eff: None,
            column_volume: area * column,
            film_volume: 0.0,
            bath_volume: area * bath,
        }
    }

    #[test]
    fn schedule_lengths() {
        let p = TestProtocol::default();
        let s = frame_schedule(&p).unwrap();
        assert_eq!(s.len(), 35);
        assert_eq!(s[0], 0.5);
        assert_eq!(s[9], 5.0);
        assert_eq!(s[34], 55.0);
        assert_eq!(frame_schedule(&TestProtocol::new(2.0, 10.0).unwrap()).unwrap().len(), 12);
        let explicit = TestProtocol {
            frame_schedule: Some(vec![0.0, 1.0, 3.0]),
            ..TestProtocol::default()
        };
        assert_eq!(frame_schedule(&explicit).unwrap(), vec![0.0, 1.0, 3.0]);
        let bad = TestProtocol {
            frame_schedule: Some(vec![1.0, 1.0]),
            ..TestProtocol::default()
        };
        assert!(frame_schedule(&bad).is_err());
        assert!(frame_schedule(&TestProtocol::new(2.0, 4.0).unwrap()).is_err());
    }

    #[test]
    fn empty_state_is_background() {
        let g = VialGeometry::default();
        let f = rasterize(&state_with(&g, 0.0, 0.0), &g, &quiet());
        assert_eq!((f.height, f.width), (120, 16));
        assert!(f.pixels.iter().all(|&p| (p - 0.85).abs() < 1e-12));
    }

    #[test]
    fn drained_state_fills_bottom_rows() {
        let g = VialGeometry::default();
        let cfg = quiet();
        let f = rasterize(&state_with(&g, 0.0, g.liquid_height), &g, &cfg);
        // H/L of the 112 vial rows sit at the bottom: 28 rows ending at row 116.
        let rows = g.liquid_height / g.interior_height * 112.0;
        assert!((rows - 28.0).abs() < 1e-9);
        for r in 0..120 {
            let dark = f.get(r, 8) < 0.5;
            assert_eq!(dark, (88..116).contains(&r), "row {r}: {}", f.get(r, 8));
        }
    }

    #[test]
    fn noise_is_seeded() {
        let g = VialGeometry::default();
        let s = state_with(&g, 0.005, 0.0);
        let cfg = RenderConfig::default();
        assert_eq!(rasterize(&s, &g, &cfg), rasterize(&s, &g, &cfg));
        let other = RenderConfig { noise_seed: 1, ..cfg };
        assert_ne!(rasterize(&s, &g, &cfg), rasterize(&s, &g, &other));
        assert!(rasterize(&s, &g, &cfg).pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn thicker_film_is_darker() {
        let g = VialGeometry::default();
        let mut thin = state_with(&g, 0.0, 0.0);
        thin.film_profile = vec![1e-4; 128];
        let mut thick = thin.clone();
        thick.film_profile = vec![4e-4; 128];
        let (a, b) = (rasterize(&thin, &g, &quiet()), rasterize(&thick, &g, &quiet()));
        assert!(b.get(60, 8) < a.get(60, 8));
        assert!(a.get(60, 8) < 0.85);
        // The annulus is seen edge-on near the wall.
        assert!(a.get(60, 0) < a.get(60, 8));
    }

    #[test]
    fn blur_basics() {
        let f = Frame::from_fn(20, 12, |r, c| ((r * 7 + c * 3) % 5) as f64 / 4.0);
        assert_eq!(gaussian_blur(&f, 0.0), f);
        let k = Frame::filled(20, 12, 0.4);
        assert!(gaussian_blur(&k, 1.0).pixels.iter().all(|&p| (p - 0.4).abs() < 1e-12));
        let mut imp = Frame::filled(21, 21, 0.0);
        imp.pixels[10 * 21 + 10] = 1.0;
        let b = gaussian_blur(&imp, 1.5);
        assert!((b.pixels.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let k1 = gaussian_kernel(1.5);
        assert_eq!(k1.len(), 11);
        for d in 0..5 {
            assert!((b.get(10, 10 + d) - k1[5] * k1[5 + d]).abs() < 1e-15);
        }
    }

    #[test]
    fn sobel_basics() {
        let k = Frame::filled(10, 10, 0.3);
        assert!(sobel_magnitude(&k).pixels.iter().all(|&p| p == 0.0));
        let step = Frame::from_fn(9, 9, |_, c| if c >= 5 { 1.0 } else { 0.0 });
        for r in 0..9 {
            assert_eq!(sobel_components(&step, r, 4), (4.0, 0.0));
            assert_eq!(sobel_components(&step, r, 5), (4.0, 0.0));
            assert_eq!(sobel_components(&step, r, 2), (0.0, 0.0));
        }
        let img = Frame::from_fn(9, 9, |r, c| ((r * 5 + c * c) % 7) as f64 / 6.0);
        let rot = Frame::from_fn(9, 9, |r, c| img.get(c, 8 - r));
        let (a, b) = (sobel_magnitude(&img), sobel_magnitude(&rot));
        for r in 1..8 {
            for c in 1..8 {
                assert!((b.get(r, c) - a.get(c, 8 - r)).abs() < 1e-12);
            }
        }
        // Corner pattern attaining the bound.
        let corner = Frame::from_fn(3, 3, |r, c| if c == 2 || (r == 2 && c == 1) { 1.0 } else { 0.0 });
        assert!((sobel_magnitude(&corner).get(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preprocess_is_per_frame() {
        let a = Frame::from_fn(20, 12, |r, c| ((r + c) % 3) as f64 / 2.0);
        let b = Frame::filled(20, 12, 0.5);
        let out = preprocess(&[a.clone(), b.clone()], &ProcessConfig::default());
        let rev = preprocess(&[b, a], &ProcessConfig::default());
        assert_eq!(out[0], rev[1]);
        assert!(out[1].pixels.iter().all(|&p| p.abs() < 1e-12));
        assert!(out[0].pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn blur_and_gradient_commute_with_translation() {
        let base = Frame::from_fn(40, 30, |r, c| ((r * 13 + c * 7) % 11) as f64 / 10.0);
        let shifted = Frame::from_fn(40, 30, |r, c| base.get(r.saturating_sub(2), c.saturating_sub(1)));
        let (pa, pb) = (
            preprocess(&[base], &ProcessConfig::default()),
            preprocess(&[shifted], &ProcessConfig::default()),
        );
        for r in 10..30 {
            for c in 8..22 {
                assert!((pa[0].get(r, c) - pb[0].get(r + 2, c + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn meniscus_edge_in_processed_frames() {
        let fl = Fluid::new(10.0, 1400.0).unwrap();
        let geom = VialGeometry::default();
        let tr = simulate(&fl, &geom, &TestProtocol::default()).unwrap();
        let cfg = quiet();
        let s = tr.states.last().unwrap();
        assert!(s.bath_height > 0.0);
        let frame = rasterize(s, &geom, &cfg);
        let edges = &preprocess(&[frame], &ProcessConfig::default())[0];
        let row = cfg.margin_rows as f64 + (geom.interior_height - s.bath_height) / geom.interior_height * 112.0;
        // Rows next to the vial ends carry the cap and base edges.
        let best = (12..108)
            .max_by(|&a, &b| edges.get(a, 8).partial_cmp(&edges.get(b, 8)).unwrap())
            .unwrap();
        assert!((best as f64 - row).abs() <= 1.5, "edge row {best}, meniscus {row}");
        assert!(edges.get(best, 8) > 0.02);
    }

    #[test]
    fn roi_identity_crop_and_shift() {
        let f = Frame::from_fn(120, 16, |r, c| (r * 16 + c) as f64 / 2000.0);
        let spec = RoiSpec::default();
        let seq = extract_roi(std::slice::from_ref(&f), &spec, 1000.0).unwrap();
        for i in 0..ROI_HEIGHT {
            for j in 0..ROI_WIDTH {
                assert_eq!(seq.frame(0)[i * ROI_WIDTH + j], f.get(12 + i, 1 + j) as f32);
            }
        }
        let moved = extract_roi(std::slice::from_ref(&f), &spec.shifted(1.0, 0.0, 0.0), 1000.0).unwrap();
        for i in 0..ROI_HEIGHT {
            for j in 0..ROI_WIDTH - 1 {
                assert_eq!(moved.frame(0)[i * ROI_WIDTH + j], seq.frame(0)[i * ROI_WIDTH + j + 1]);
            }
        }
        assert!(matches!(
            extract_roi(&[f], &spec.shifted(6.0, 0.0, 0.0), 1000.0),
            Err(ImagingError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn rotation_change_bounded_by_gradient() {
        let f = Frame::from_fn(120, 16, |r, c| 0.5 + 0.4 * ((r as f64 * 0.15).sin() * (c as f64 * 0.4).cos()));
        let spec = RoiSpec { origin_x: 3.0, origin_y: 8.0, rotation: 0.0 };
        let a = extract_roi(std::slice::from_ref(&f), &spec, 0.0).unwrap();
        let rotated = RoiSpec { rotation: 1.0, ..spec };
        let b = extract_roi(std::slice::from_ref(&f), &rotated, 0.0).unwrap();
        // Largest neighbour difference bounds the bilinear slope.
        let mut grad: f64 = 0.0;
        for r in 0..119 {
            for c in 0..15 {
                grad = grad.max((f.get(r + 1, c) - f.get(r, c)).abs()).max((f.get(r, c + 1) - f.get(r, c)).abs());
            }
        }
        for i in 0..ROI_HEIGHT {
            for j in 0..ROI_WIDTH {
                let (y0, x0) = spec.sample_point(i, j);
                let (y1, x1) = rotated.sample_point(i, j);
                let disp = (y1 - y0).abs() + (x1 - x0).abs();
                let d = (a.frame(0)[i * ROI_WIDTH + j] - b.frame(0)[i * ROI_WIDTH + j]).abs() as f64;
                assert!(d <= grad * disp + 1e-6);
            }
        }
    }

    #[test]
    fn augmentation_properties() {
        let f: Vec<Frame> = (0..3)
            .map(|k| Frame::from_fn(120, 16, |r, c| ((r * 3 + c * 5 + k) % 17) as f64 / 16.0))
            .collect();
        let base = RoiSpec::default();
        let aug = AugmentSpec { seed: 9, ..AugmentSpec::default() };
        let a = augment(&f, &base, &aug, 970.0).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, augment(&f, &base, &aug, 970.0).unwrap());
        assert!(a.iter().all(|s| s.t == 3 && s.density == 970.0));
        let crop = extract_roi(&f, &base, 970.0).unwrap();
        assert!(a.iter().all(|s| *s != crop));
        let still = AugmentSpec { max_shift: 0.0, max_rotation: 0.0, ..aug };
        assert!(augment(&f, &base, &still, 970.0).unwrap().iter().all(|s| *s == crop));
        for k in 0..200 {
            let (dx, dy, rot) = augment_offsets(&aug, k);
            assert!((0.0..=3.0).contains(&dx) && (0.0..=3.0).contains(&dy) && (0.0..=1.0).contains(&rot));
            base.shifted(dx, dy, rot).check_bounds(120, 16).unwrap();
            base.shifted(3.0, 3.0, 1.0).check_bounds(120, 16).unwrap();
        }
    }
}
