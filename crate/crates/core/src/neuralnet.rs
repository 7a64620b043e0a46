//! Sequence regressor: per-frame CNN, bidirectional LSTM, temporal attention pooling,
//! density embedding and a dense head. Forward and reverse passes are written out by hand
//! in f64; convolutions run as im2col products.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{RoiSequence, ROI_HEIGHT, ROI_WIDTH};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("inconsistent architecture: {0}")]
    ShapeInconsistency(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient check failed for {name}: relative error {error:.3e} > {tolerance:.1e}")]
    GradCheckFailure { name: String, error: f64, tolerance: f64 },
    #[error("bad checkpoint magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    /// Width of the per-frame projection fed to the recurrent layer.
    pub projection: usize,
    /// Hidden size per direction.
    pub hidden: usize,
    pub attention: usize,
    pub density_width: usize,
    pub head_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            frames: 35,
            height: ROI_HEIGHT,
            width: ROI_WIDTH,
            conv_channels: vec![8, 16],
            kernel: 3,
            pool: 2,
            projection: 32,
            hidden: 32,
            attention: 32,
            density_width: 8,
            head_hidden: 32,
        }
    }
}

impl ArchConfig {
    /// Spatial size after each conv + pool stage.
    fn stage_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.height, self.width)];
        for _ in &self.conv_channels {
            let (h, w) = *dims.last().unwrap();
            dims.push((h / self.pool, w / self.pool));
        }
        dims
    }

    pub fn feature_len(&self) -> usize {
        let (h, w) = *self.stage_dims().last().unwrap();
        h * w * self.conv_channels.last().copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.frames,
            self.height,
            self.width,
            self.kernel,
            self.pool,
            self.projection,
            self.hidden,
            self.attention,
            self.density_width,
            self.head_hidden,
        ];
        if widths.contains(&0) || self.conv_channels.contains(&0) {
            return Err(NnError::ShapeInconsistency("zero-width layer".into()));
        }
        if self.conv_channels.is_empty() {
            return Err(NnError::ShapeInconsistency("need at least one conv layer".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(NnError::ShapeInconsistency("kernel size must be odd".into()));
        }
        if self.stage_dims().iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(NnError::ShapeInconsistency(format!(
                "{}x{} input vanishes after {} pooling stages",
                self.height,
                self.width,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// [out, k, k, in]
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    /// [4H, D], gate order input, forget, cell, output.
    pub wx: Tensor,
    /// [4H, H]
    pub wh: Tensor,
    pub b: Tensor,
}

/// Every trainable tensor of the network. Gradients and optimizer moments use the same
/// type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv: Vec<ConvLayer>,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub att_w: Tensor,
    pub att_b: Tensor,
    pub att_v: Tensor,
    pub dens_w: Tensor,
    pub dens_b: Tensor,
    pub head_w1: Tensor,
    pub head_b1: Tensor,
    pub head_w2: Tensor,
    pub head_b2: Tensor,
}

impl Params {
    fn zeros(arch: &ArchConfig) -> Self {
        let k = arch.kernel;
        let mut conv = Vec::new();
        let mut cin = 1;
        for &c in &arch.conv_channels {
            conv.push(ConvLayer {
                w: Tensor::zeros(&[c, k, k, cin]),
                b: Tensor::zeros(&[c]),
            });
            cin = c;
        }
        let (p, h, a) = (arch.projection, arch.hidden, arch.attention);
        let cell = || LstmCell {
            wx: Tensor::zeros(&[4 * h, p]),
            wh: Tensor::zeros(&[4 * h, h]),
            b: Tensor::zeros(&[4 * h]),
        };
        Params {
            conv,
            proj_w: Tensor::zeros(&[p, arch.feature_len()]),
            proj_b: Tensor::zeros(&[p]),
            fwd: cell(),
            bwd: cell(),
            att_w: Tensor::zeros(&[a, 2 * h]),
            att_b: Tensor::zeros(&[a]),
            att_v: Tensor::zeros(&[a]),
            dens_w: Tensor::zeros(&[arch.density_width, 1]),
            dens_b: Tensor::zeros(&[arch.density_width]),
            head_w1: Tensor::zeros(&[arch.head_hidden, 2 * h + arch.density_width]),
            head_b1: Tensor::zeros(&[arch.head_hidden]),
            head_w2: Tensor::zeros(&[1, arch.head_hidden]),
            head_b2: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            v.push((format!("conv{i}.w"), &c.w));
            v.push((format!("conv{i}.b"), &c.b));
        }
        v.push(("proj.w".into(), &self.proj_w));
        v.push(("proj.b".into(), &self.proj_b));
        for (n, c) in [("lstm_fwd", &self.fwd), ("lstm_bwd", &self.bwd)] {
            v.push((format!("{n}.wx"), &c.wx));
            v.push((format!("{n}.wh"), &c.wh));
            v.push((format!("{n}.b"), &c.b));
        }
        v.push(("att.w".into(), &self.att_w));
        v.push(("att.b".into(), &self.att_b));
        v.push(("att.v".into(), &self.att_v));
        v.push(("dens.w".into(), &self.dens_w));
        v.push(("dens.b".into(), &self.dens_b));
        v.push(("head.w1".into(), &self.head_w1));
        v.push(("head.b1".into(), &self.head_b1));
        v.push(("head.w2".into(), &self.head_w2));
        v.push(("head.b2".into(), &self.head_b2));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.conv.iter_mut().enumerate() {
            v.push((format!("conv{i}.w"), &mut c.w));
            v.push((format!("conv{i}.b"), &mut c.b));
        }
        v.push(("proj.w".into(), &mut self.proj_w));
        v.push(("proj.b".into(), &mut self.proj_b));
        for (n, c) in [("lstm_fwd", &mut self.fwd), ("lstm_bwd", &mut self.bwd)] {
            v.push((format!("{n}.wx"), &mut c.wx));
            v.push((format!("{n}.wh"), &mut c.wh));
            v.push((format!("{n}.b"), &mut c.b));
        }
        v.push(("att.w".into(), &mut self.att_w));
        v.push(("att.b".into(), &mut self.att_b));
        v.push(("att.v".into(), &mut self.att_v));
        v.push(("dens.w".into(), &mut self.dens_w));
        v.push(("dens.b".into(), &mut self.dens_b));
        v.push(("head.w1".into(), &mut self.head_w1));
        v.push(("head.b1".into(), &mut self.head_b1));
        v.push(("head.w2".into(), &mut self.head_w2));
        v.push(("head.b2".into(), &mut self.head_b2));
        v
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.named_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: Params,
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut params = Params::zeros(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k2 = arch.kernel * arch.kernel;
    for (name, t) in params.named_mut() {
        if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
            continue;
        }
        let (fan_in, fan_out) = match t.shape.as_slice() {
            [o, _, _, i] => (i * k2, o * k2),
            [o, i] => (*i, *o),
            [n] => (*n, 1),
            _ => unreachable!("parameter ranks are 1, 2 or 4"),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for x in t.data.iter_mut() {
            *x = rng.random_range(-limit..limit);
        }
    }
    Ok(Model {
        arch: arch.clone(),
        params,
    })
}

// ---------------------------------------------------------------------------------------
// dense kernels

/// `c = a·b + beta·c` for row-major `a` (m×k) and `b` given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices that cover the strided extents of m×k, k×n and m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------------------
// forward

struct ConvCache {
    /// im2col matrix, (T·h·w) × (k·k·cin)
    cols: Vec<f64>,
    /// post-tanh activations before pooling, T×h×w×cout
    act: Vec<f64>,
    /// flat index into `act` of each pooled maximum
    argmax: Vec<u32>,
    h: usize,
    w: usize,
    cin: usize,
}

struct LstmCache {
    /// activated gates per time step, T×4H (indexed by time, not step)
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
pub struct Cache {
    convs: Vec<ConvCache>,
    feats: Vec<f64>,
    proj: Vec<f64>,
    lstm: [LstmCache; 2],
    /// concatenated recurrent outputs, T×2H
    hcat: Vec<f64>,
    att_u: Vec<f64>,
    alpha: Vec<f64>,
    context: Vec<f64>,
    dens_in: f64,
    dens: Vec<f64>,
    head_in: Vec<f64>,
    head_hidden: Vec<f64>,
}

impl Cache {
    pub fn attention(&self) -> &[f64] {
        &self.alpha
    }

    /// Attention-weighted summary of the recurrent outputs.
    pub fn context(&self) -> &[f64] {
        &self.context
    }
}

/// Output of a forward pass.
pub struct Forward {
    /// Predicted log₁₀ viscosity.
    pub output: f64,
    pub cache: Cache,
}

impl Forward {
    pub fn attention(&self) -> &[f64] {
        &self.cache.alpha
    }
}

fn im2col(x: &[f64], t: usize, h: usize, w: usize, cin: usize, k: usize) -> Vec<f64> {
    let kk = k * k * cin;
    let r = (k / 2) as isize;
    let mut cols = vec![0.0; t * h * w * kk];
    for f in 0..t {
        for y in 0..h {
            for xx in 0..w {
                let row = ((f * h + y) * w + xx) * kk;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((f * h + sy as usize) * w + sx as usize) * cin;
                        let dst = row + (ky * k + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(dcols: &[f64], dx: &mut [f64], t: usize, h: usize, w: usize, cin: usize, k: usize) {
    let kk = k * k * cin;
    let r = (k / 2) as isize;
    for f in 0..t {
        for y in 0..h {
            for xx in 0..w {
                let row = ((f * h + y) * w + xx) * kk;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = row + (ky * k + kx) * cin;
                        let dst = ((f * h + sy as usize) * w + sx as usize) * cin;
                        for c in 0..cin {
                            dx[dst + c] += dcols[src + c];
                        }
                    }
                }
            }
        }
    }
}

fn lstm_forward(cell: &LstmCell, x: &[f64], t: usize, d: usize, hsz: usize, reverse: bool) -> LstmCache {
    let g4 = 4 * hsz;
    let mut pre = vec![0.0; t * g4];
    for r in 0..t {
        pre[r * g4..(r + 1) * g4].copy_from_slice(&cell.b.data);
    }
    // pre = x · wxᵀ + b
    gemm(t, d, g4, x, (d as isize, 1), &cell.wx.data, (1, d as isize), 1.0, &mut pre);
    let mut gates = vec![0.0; t * g4];
    let mut cs = vec![0.0; t * hsz];
    let mut hs = vec![0.0; t * hsz];
    let mut h_prev = vec![0.0; hsz];
    let mut c_prev = vec![0.0; hsz];
    for step in 0..t {
        let ti = if reverse { t - 1 - step } else { step };
        let a = &mut pre[ti * g4..(ti + 1) * g4];
        for (j, aj) in a.iter_mut().enumerate() {
            let row = &cell.wh.data[j * hsz..(j + 1) * hsz];
            *aj += row.iter().zip(&h_prev).map(|(w, h)| w * h).sum::<f64>();
        }
        let g = &mut gates[ti * g4..(ti + 1) * g4];
        for j in 0..hsz {
            let i_g = sigmoid(a[j]);
            let f_g = sigmoid(a[hsz + j]);
            let c_g = a[2 * hsz + j].tanh();
            let o_g = sigmoid(a[3 * hsz + j]);
            g[j] = i_g;
            g[hsz + j] = f_g;
            g[2 * hsz + j] = c_g;
            g[3 * hsz + j] = o_g;
            let c = f_g * c_prev[j] + i_g * c_g;
            cs[ti * hsz + j] = c;
            hs[ti * hsz + j] = o_g * c.tanh();
        }
        h_prev.copy_from_slice(&hs[ti * hsz..(ti + 1) * hsz]);
        c_prev.copy_from_slice(&cs[ti * hsz..(ti + 1) * hsz]);
    }
    LstmCache { gates, c: cs, h: hs }
}

/// Density is fed in units of 1000 kg/m³.
pub const DENSITY_SCALE: f64 = 1000.0;

pub fn forward(model: &Model, seq: &RoiSequence) -> Result<Forward> {
    let a = &model.arch;
    if seq.t != a.frames || seq.data.len() != a.frames * a.height * a.width {
        return Err(NnError::ShapeMismatch(format!(
            "sequence of {} frames ({} values), model expects {}x{}x{}",
            seq.t,
            seq.data.len(),
            a.frames,
            a.height,
            a.width
        )));
    }
    let x: Vec<f64> = seq.data.iter().map(|&v| v as f64).collect();
    Ok(forward_values(model, &x, seq.density))
}

/// Forward pass on a `frames × height × width` input already in f64.
pub fn forward_values(model: &Model, input: &[f64], density: f64) -> Forward {
    let a = &model.arch;
    let p = &model.params;
    let t = a.frames;
    let k = a.kernel;
    let dims = a.stage_dims();

    let mut x = input.to_vec();
    let mut cin = 1;
    let mut convs = Vec::with_capacity(p.conv.len());
    for (l, layer) in p.conv.iter().enumerate() {
        let (h, w) = dims[l];
        let cout = a.conv_channels[l];
        let cols = im2col(&x, t, h, w, cin, k);
        let m = t * h * w;
        let kk = k * k * cin;
        let mut act = vec![0.0; m * cout];
        for r in 0..m {
            act[r * cout..(r + 1) * cout].copy_from_slice(&layer.b.data);
        }
        gemm(m, kk, cout, &cols, (kk as isize, 1), &layer.w.data, (1, kk as isize), 1.0, &mut act);
        act.iter_mut().for_each(|v| *v = v.tanh());
        let (ph, pw) = dims[l + 1];
        let s = a.pool;
        let mut pooled = vec![0.0; t * ph * pw * cout];
        let mut argmax = vec![0u32; pooled.len()];
        for f in 0..t {
            for py in 0..ph {
                for px in 0..pw {
                    for c in 0..cout {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for dy in 0..s {
                            for dx in 0..s {
                                let idx = ((f * h + py * s + dy) * w + px * s + dx) * cout + c;
                                if act[idx] > best {
                                    best = act[idx];
                                    bi = idx;
                                }
                            }
                        }
                        let o = ((f * ph + py) * pw + px) * cout + c;
                        pooled[o] = best;
                        argmax[o] = bi as u32;
                    }
                }
            }
        }
        convs.push(ConvCache { cols, act, argmax, h, w, cin });
        x = pooled;
        cin = cout;
    }

    let fl = a.feature_len();
    let feats = x;
    let pw_ = a.projection;
    let mut proj = vec![0.0; t * pw_];
    for r in 0..t {
        proj[r * pw_..(r + 1) * pw_].copy_from_slice(&p.proj_b.data);
    }
    gemm(t, fl, pw_, &feats, (fl as isize, 1), &p.proj_w.data, (1, fl as isize), 1.0, &mut proj);
    proj.iter_mut().for_each(|v| *v = v.tanh());

    let hs = a.hidden;
    let lf = lstm_forward(&p.fwd, &proj, t, pw_, hs, false);
    let lb = lstm_forward(&p.bwd, &proj, t, pw_, hs, true);
    let h2 = 2 * hs;
    let mut hcat = vec![0.0; t * h2];
    for r in 0..t {
        hcat[r * h2..r * h2 + hs].copy_from_slice(&lf.h[r * hs..(r + 1) * hs]);
        hcat[r * h2 + hs..(r + 1) * h2].copy_from_slice(&lb.h[r * hs..(r + 1) * hs]);
    }

    let na = a.attention;
    let mut att_u = vec![0.0; t * na];
    for r in 0..t {
        att_u[r * na..(r + 1) * na].copy_from_slice(&p.att_b.data);
    }
    gemm(t, h2, na, &hcat, (h2 as isize, 1), &p.att_w.data, (1, h2 as isize), 1.0, &mut att_u);
    att_u.iter_mut().for_each(|v| *v = v.tanh());
    let scores: Vec<f64> = (0..t)
        .map(|r| att_u[r * na..(r + 1) * na].iter().zip(&p.att_v.data).map(|(u, v)| u * v).sum())
        .collect();
    let smax = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut alpha: Vec<f64> = scores.iter().map(|s| (s - smax).exp()).collect();
    let z: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|v| *v /= z);
    let mut context = vec![0.0; h2];
    for r in 0..t {
        for j in 0..h2 {
            context[j] += alpha[r] * hcat[r * h2 + j];
        }
    }

    let dens_in = density / DENSITY_SCALE;
    let dens: Vec<f64> = (0..a.density_width)
        .map(|j| (p.dens_w.data[j] * dens_in + p.dens_b.data[j]).tanh())
        .collect();
    let mut head_in = context.clone();
    head_in.extend_from_slice(&dens);
    let ni = head_in.len();
    let head_hidden: Vec<f64> = (0..a.head_hidden)
        .map(|j| {
            let row = &p.head_w1.data[j * ni..(j + 1) * ni];
            (row.iter().zip(&head_in).map(|(w, x)| w * x).sum::<f64>() + p.head_b1.data[j]).tanh()
        })
        .collect();
    let output = p.head_w2.data.iter().zip(&head_hidden).map(|(w, h)| w * h).sum::<f64>() + p.head_b2.data[0];

    Forward {
        output,
        cache: Cache {
            convs,
            feats,
            proj,
            lstm: [lf, lb],
            hcat,
            att_u,
            alpha,
            context,
            dens_in,
            dens,
            head_in,
            head_hidden,
        },
    }
}

// ---------------------------------------------------------------------------------------
// backward

#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    cell: &LstmCell,
    grad: &mut LstmCell,
    cache: &LstmCache,
    x: &[f64],
    dh_out: &[f64],
    dx: &mut [f64],
    t: usize,
    d: usize,
    hsz: usize,
    reverse: bool,
) {
    let g4 = 4 * hsz;
    let mut dpre = vec![0.0; t * g4];
    let mut dh_next = vec![0.0; hsz];
    let mut dc_next = vec![0.0; hsz];
    let zeros = vec![0.0; hsz];
    for step in (0..t).rev() {
        let ti = if reverse { t - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if reverse {
            Some(ti + 1)
        } else {
            Some(ti - 1)
        };
        let (h_prev, c_prev) = match prev {
            Some(pi) => (&cache.h[pi * hsz..(pi + 1) * hsz], &cache.c[pi * hsz..(pi + 1) * hsz]),
            None => (&zeros[..], &zeros[..]),
        };
        let g = &cache.gates[ti * g4..(ti + 1) * g4];
        let da = &mut dpre[ti * g4..(ti + 1) * g4];
        for j in 0..hsz {
            let (ig, fg, cg, og) = (g[j], g[hsz + j], g[2 * hsz + j], g[3 * hsz + j]);
            let c = cache.c[ti * hsz + j];
            let tc = c.tanh();
            let dh = dh_out[ti * hsz + j] + dh_next[j];
            let dc = dh * og * (1.0 - tc * tc) + dc_next[j];
            da[j] = dc * cg * ig * (1.0 - ig);
            da[hsz + j] = dc * c_prev[j] * fg * (1.0 - fg);
            da[2 * hsz + j] = dc * ig * (1.0 - cg * cg);
            da[3 * hsz + j] = dh * tc * og * (1.0 - og);
            dc_next[j] = dc * fg;
        }
        // dWh += da ⊗ h_prev ; dh_prev = Whᵀ da
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for (r, &dar) in da.iter().enumerate() {
            if dar == 0.0 {
                continue;
            }
            let gw = &mut grad.wh.data[r * hsz..(r + 1) * hsz];
            let w = &cell.wh.data[r * hsz..(r + 1) * hsz];
            for j in 0..hsz {
                gw[j] += dar * h_prev[j];
                dh_next[j] += dar * w[j];
            }
        }
    }
    for r in 0..t {
        for j in 0..g4 {
            grad.b.data[j] += dpre[r * g4 + j];
        }
    }
    // dWx += dpreᵀ · x ; dx += dpre · Wx
    gemm(g4, t, d, &dpre, (1, g4 as isize), x, (d as isize, 1), 1.0, &mut grad.wx.data);
    gemm(t, g4, d, &dpre, (g4 as isize, 1), &cell.wx.data, (d as isize, 1), 1.0, dx);
}

/// Accumulates `d_output · ∂output/∂θ` into `grads`.
pub fn backward(model: &Model, cache: &Cache, d_output: f64, grads: &mut Params) {
    let a = &model.arch;
    let p = &model.params;
    let t = a.frames;
    let k = a.kernel;

    // head
    let nh = a.head_hidden;
    let ni = cache.head_in.len();
    grads.head_b2.data[0] += d_output;
    let mut dz1 = vec![0.0; nh];
    for j in 0..nh {
        grads.head_w2.data[j] += d_output * cache.head_hidden[j];
        let hj = cache.head_hidden[j];
        dz1[j] = d_output * p.head_w2.data[j] * (1.0 - hj * hj);
    }
    let mut d_in = vec![0.0; ni];
    for j in 0..nh {
        grads.head_b1.data[j] += dz1[j];
        let row = &p.head_w1.data[j * ni..(j + 1) * ni];
        let grow = &mut grads.head_w1.data[j * ni..(j + 1) * ni];
        for i in 0..ni {
            grow[i] += dz1[j] * cache.head_in[i];
            d_in[i] += dz1[j] * row[i];
        }
    }

    // density embedding
    let h2 = 2 * a.hidden;
    for j in 0..a.density_width {
        let e = cache.dens[j];
        let dz = d_in[h2 + j] * (1.0 - e * e);
        grads.dens_w.data[j] += dz * cache.dens_in;
        grads.dens_b.data[j] += dz;
    }

    // attention pooling
    let dctx = &d_in[..h2];
    let na = a.attention;
    let mut dhcat = vec![0.0; t * h2];
    let mut dalpha = vec![0.0; t];
    for r in 0..t {
        let hr = &cache.hcat[r * h2..(r + 1) * h2];
        dalpha[r] = hr.iter().zip(dctx).map(|(h, d)| h * d).sum();
        for j in 0..h2 {
            dhcat[r * h2 + j] = cache.alpha[r] * dctx[j];
        }
    }
    let mean: f64 = cache.alpha.iter().zip(&dalpha).map(|(al, d)| al * d).sum();
    let mut dz_att = vec![0.0; t * na];
    for r in 0..t {
        let ds = cache.alpha[r] * (dalpha[r] - mean);
        for j in 0..na {
            let u = cache.att_u[r * na + j];
            grads.att_v.data[j] += ds * u;
            dz_att[r * na + j] = ds * p.att_v.data[j] * (1.0 - u * u);
        }
    }
    for r in 0..t {
        for j in 0..na {
            grads.att_b.data[j] += dz_att[r * na + j];
        }
    }
    gemm(na, t, h2, &dz_att, (1, na as isize), &cache.hcat, (h2 as isize, 1), 1.0, &mut grads.att_w.data);
    gemm(t, na, h2, &dz_att, (na as isize, 1), &p.att_w.data, (h2 as isize, 1), 1.0, &mut dhcat);

    // recurrent layer
    let hs = a.hidden;
    let pw_ = a.projection;
    let mut dh_f = vec![0.0; t * hs];
    let mut dh_b = vec![0.0; t * hs];
    for r in 0..t {
        dh_f[r * hs..(r + 1) * hs].copy_from_slice(&dhcat[r * h2..r * h2 + hs]);
        dh_b[r * hs..(r + 1) * hs].copy_from_slice(&dhcat[r * h2 + hs..(r + 1) * h2]);
    }
    let mut dproj = vec![0.0; t * pw_];
    lstm_backward(&p.fwd, &mut grads.fwd, &cache.lstm[0], &cache.proj, &dh_f, &mut dproj, t, pw_, hs, false);
    lstm_backward(&p.bwd, &mut grads.bwd, &cache.lstm[1], &cache.proj, &dh_b, &mut dproj, t, pw_, hs, true);

    // projection
    let fl = a.feature_len();
    for (d, &y) in dproj.iter_mut().zip(&cache.proj) {
        *d *= 1.0 - y * y;
    }
    for r in 0..t {
        for j in 0..pw_ {
            grads.proj_b.data[j] += dproj[r * pw_ + j];
        }
    }
    gemm(pw_, t, fl, &dproj, (1, pw_ as isize), &cache.feats, (fl as isize, 1), 1.0, &mut grads.proj_w.data);
    let mut dx = vec![0.0; t * fl];
    gemm(t, pw_, fl, &dproj, (pw_ as isize, 1), &p.proj_w.data, (fl as isize, 1), 0.0, &mut dx);

    // conv stack, last layer first
    for l in (0..p.conv.len()).rev() {
        let cc = &cache.convs[l];
        let cout = a.conv_channels[l];
        let m = t * cc.h * cc.w;
        let kk = k * k * cc.cin;
        let mut dact = vec![0.0; m * cout];
        for (o, &src) in cc.argmax.iter().enumerate() {
            dact[src as usize] += dx[o];
        }
        for (d, &y) in dact.iter_mut().zip(&cc.act) {
            *d *= 1.0 - y * y;
        }
        let gl = &mut grads.conv[l];
        for r in 0..m {
            for c in 0..cout {
                gl.b.data[c] += dact[r * cout + c];
            }
        }
        gemm(cout, m, kk, &dact, (1, cout as isize), &cc.cols, (kk as isize, 1), 1.0, &mut gl.w.data);
        if l > 0 {
            let mut dcols = vec![0.0; m * kk];
            gemm(m, cout, kk, &dact, (cout as isize, 1), &p.conv[l].w.data, (kk as isize, 1), 0.0, &mut dcols);
            let mut dprev = vec![0.0; m * cc.cin];
            col2im(&dcols, &mut dprev, t, cc.h, cc.w, cc.cin, k);
            dx = dprev;
        }
    }
}

/// Mean squared error of predictions against targets.
pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NnError::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// One training example: input values (frames × height × width), density and target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub density: f64,
    pub target: f64,
}

impl Example {
    pub fn from_sequence(seq: &RoiSequence, target: f64) -> Self {
        Example {
            input: seq.data.iter().map(|&v| v as f64).collect(),
            density: seq.density,
            target,
        }
    }
}

/// Space the squared error is measured in. The network always predicts log₁₀ η.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossSpace {
    #[default]
    Log10,
    /// Error on η itself; targets are still given as log₁₀ η.
    Linear,
}

impl LossSpace {
    pub fn name(self) -> &'static str {
        match self {
            LossSpace::Log10 => "log10",
            LossSpace::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "log10" => Some(LossSpace::Log10),
            "linear" => Some(LossSpace::Linear),
            _ => None,
        }
    }

    /// Residual and its derivative with respect to the network output.
    fn residual(self, output: f64, target: f64) -> (f64, f64) {
        match self {
            LossSpace::Log10 => (output - target, 1.0),
            LossSpace::Linear => {
                let y = 10f64.powf(output);
                (y - 10f64.powf(target), y * std::f64::consts::LN_10)
            }
        }
    }
}

/// Loss and gradients of the batch MSE in log₁₀ space.
pub fn loss_and_grad(model: &Model, batch: &[Example]) -> Result<(f64, Params)> {
    loss_and_grad_in(model, batch, LossSpace::Log10)
}

/// Loss and gradients of the batch MSE. Samples run independently (in parallel when
/// threads are available) and their gradients are summed in batch order, so the result
/// does not depend on scheduling.
pub fn loss_and_grad_in(model: &Model, batch: &[Example], space: LossSpace) -> Result<(f64, Params)> {
    let a = &model.arch;
    let n = a.frames * a.height * a.width;
    if batch.is_empty() {
        return Err(NnError::ShapeMismatch("empty batch".into()));
    }
    if let Some(e) = batch.iter().find(|e| e.input.len() != n) {
        return Err(NnError::ShapeMismatch(format!("example with {} values, expected {n}", e.input.len())));
    }
    let scale = 2.0 / batch.len() as f64;
    let per: Vec<(f64, Params)> = batch
        .par_iter()
        .map(|e| {
            let fw = forward_values(model, &e.input, e.density);
            let (r, dr) = space.residual(fw.output, e.target);
            let mut g = model.params.zeros_like();
            backward(model, &fw.cache, scale * r * dr, &mut g);
            (r * r, g)
        })
        .collect();
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss / batch.len() as f64, total))
}

pub fn batch_loss(model: &Model, batch: &[Example]) -> Result<f64> {
    batch_loss_in(model, batch, LossSpace::Log10)
}

pub fn batch_loss_in(model: &Model, batch: &[Example], space: LossSpace) -> Result<f64> {
    if batch.is_empty() {
        return Err(NnError::ShapeMismatch("empty batch".into()));
    }
    let sq: f64 = batch
        .iter()
        .map(|e| {
            let (r, _) = space.residual(forward_values(model, &e.input, e.density).output, e.target);
            r * r
        })
        .sum();
    Ok(sq / batch.len() as f64)
}

// ---------------------------------------------------------------------------------------
// optimizer

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let iter = params
        .named_mut()
        .into_iter()
        .zip(grads.named())
        .zip(state.m.named_mut())
        .zip(state.v.named_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in iter {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = m.data[i] / bc1;
            let vh = v.data[i] / bc2;
            p.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

// ---------------------------------------------------------------------------------------
// gradient check

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// (tensor name, largest relative error over its entries)
    pub tensors: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> (&str, f64) {
        self.tensors
            .iter()
            .map(|(n, e)| (n.as_str(), *e))
            .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }
}

/// Compares every analytic gradient entry with a central difference of step `h`.
/// Errors are measured per tensor in the max norm, `max|a − n| / max(max|a|, max|n|)`, so
/// entries whose gradient sits at the cancellation noise of the difference quotient do not
/// dominate.
pub fn grad_check(model: &Model, batch: &[Example], h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(model, batch)?;
    compare_gradients(model, batch, &grads, h, tolerance)
}

fn compare_gradients(model: &Model, batch: &[Example], grads: &Params, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        let analytic = grads.named()[ti].1.data.clone();
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (i, &an) in analytic.iter().enumerate() {
            let orig = model.params.named()[ti].1.data[i];
            probe.params.named_mut()[ti].1.data[i] = orig + h;
            let lp = batch_loss(&probe, batch)?;
            probe.params.named_mut()[ti].1.data[i] = orig - h;
            let lm = batch_loss(&probe, batch)?;
            probe.params.named_mut()[ti].1.data[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            diff = diff.max((an - num).abs());
            scale = scale.max(an.abs()).max(num.abs());
        }
        let worst = if scale > 0.0 { diff / scale } else { 0.0 };
        if worst > tolerance {
            return Err(NnError::GradCheckFailure {
                name: name.clone(),
                error: worst,
                tolerance,
            });
        }
        tensors.push((name.clone(), worst));
    }
    Ok(GradCheckReport { tensors })
}

// ---------------------------------------------------------------------------------------
// checkpoints

/// Everything saved with a model: parameters, optional optimizer state, the training
/// configuration as text and the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub config_echo: String,
    pub seed: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn params(&mut self, p: &Params) {
        let named = p.named();
        self.u32(named.len() as u32);
        for (name, t) in named {
            self.str(&name);
            self.u32(t.shape.len() as u32);
            for &d in &t.shape {
                self.u32(d as u32);
            }
            for v in &t.data {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.b.len() {
            return Err(NnError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| NnError::Corrupt(e.to_string()))
    }
    fn params_into(&mut self, p: &mut Params) -> Result<()> {
        let n = self.u32()? as usize;
        let mut named = p.named_mut();
        if n != named.len() {
            return Err(NnError::Corrupt(format!("{n} tensors, architecture has {}", named.len())));
        }
        for (name, t) in named.iter_mut() {
            let got = self.str()?;
            if got != *name {
                return Err(NnError::Corrupt(format!("expected tensor {name}, found {got}")));
            }
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != t.shape {
                return Err(NnError::Corrupt(format!("{name}: shape {shape:?}, expected {:?}", t.shape)));
            }
            for v in t.data.iter_mut() {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

fn arch_fields(a: &ArchConfig) -> Vec<u32> {
    let mut v = vec![
        a.frames, a.height, a.width, a.kernel, a.pool, a.projection, a.hidden, a.attention, a.density_width,
        a.head_hidden,
    ];
    v.push(a.conv_channels.len());
    v.extend(&a.conv_channels);
    v.into_iter().map(|x| x as u32).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let af = arch_fields(&self.model.arch);
        w.u32(af.len() as u32);
        af.into_iter().for_each(|x| w.u32(x));
        w.u64(self.seed);
        w.str(&self.config_echo);
        w.params(&self.model.params);
        match &self.optimizer {
            Some(s) => {
                w.u32(1);
                w.u64(s.step);
                w.params(&s.m);
                w.params(&s.v);
            }
            None => w.u32(0),
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(NnError::BadMagic(path.to_path_buf()));
        }
        let mut r = Reader { b: bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::VersionMismatch(version));
        }
        let n = r.u32()? as usize;
        if !(11..=64).contains(&n) {
            return Err(NnError::Corrupt(format!("{n} architecture fields")));
        }
        let f = (0..n).map(|_| r.u32().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
        if f[10] + 11 != n {
            return Err(NnError::Corrupt("architecture field count".into()));
        }
        let arch = ArchConfig {
            frames: f[0],
            height: f[1],
            width: f[2],
            kernel: f[3],
            pool: f[4],
            projection: f[5],
            hidden: f[6],
            attention: f[7],
            density_width: f[8],
            head_hidden: f[9],
            conv_channels: f[11..].to_vec(),
        };
        arch.validate().map_err(|e| NnError::Corrupt(e.to_string()))?;
        let seed = r.u64()?;
        let config_echo = r.str()?;
        let mut params = Params::zeros(&arch);
        r.params_into(&mut params)?;
        let optimizer = match r.u32()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut m = params.zeros_like();
                let mut v = params.zeros_like();
                r.params_into(&mut m)?;
                r.params_into(&mut v)?;
                Some(AdamState { step, m, v })
            }
            x => return Err(NnError::Corrupt(format!("optimizer flag {x}"))),
        };
        if r.pos != bytes.len() {
            return Err(NnError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint {
            model: Model { arch, params },
            optimizer,
            config_echo,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| NnError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| NnError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}
