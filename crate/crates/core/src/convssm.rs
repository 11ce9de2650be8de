//! Convolutional state-space recurrence over a sequence of feature maps:
//!
//! ```text
//! X_k = A * X_{k-1} + B * U_k
//! Y_k = C * X_k     + D * U_k
//! ```
//!
//! where `*` is a stride-1, same-padded convolution and `A` is restricted to
//! a 1×1 (pointwise) kernel. With a pointwise `A` each step is an affine map
//! `X ↦ M·X + b_k` acting channel-wise at every pixel, so the time axis can be
//! evaluated with an associative prefix scan over `(M, b)` pairs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::prefix;
use crate::tape::{Tape, Var};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Learnable kernels. `a: [P, P, 1, 1]`, `b: [P, U, k, k]`,
/// `c: [Y, P, k, k]`, `d: [Y, U, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSsmParameters {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

/// Hidden state `X: [P, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvState {
    pub x: Tensor,
}

impl ConvState {
    pub fn zeros(p: usize, h: usize, w: usize) -> Self {
        ConvState {
            x: Tensor::zeros(&[p, h, w]),
        }
    }
}

impl ConvSsmParameters {
    pub fn new(a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Result<Self> {
        let p = ConvSsmParameters { a, b, c, d };
        p.validate()?;
        Ok(p)
    }

    /// Diagonal decaying state spectrum `exp(-(n + 1/2))`, `n = 0..P`; the
    /// other kernels uniform in `±1/√fan_in`.
    pub fn init_hippo<R: Rng + ?Sized>(
        p: usize,
        u: usize,
        y: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        assert!(p >= 1 && k % 2 == 1, "P >= 1 and odd kernel size required");
        let a = Tensor::from_fn(&[p, p, 1, 1], |i| {
            let (r, c) = (i / p, i % p);
            if r == c {
                (-(r as f64 + 0.5)).exp()
            } else {
                0.0
            }
        });
        let bound = |fan: usize| 1.0 / ((fan * k * k) as f64).sqrt();
        ConvSsmParameters {
            a,
            b: Tensor::uniform(&[p, u, k, k], bound(u), rng),
            c: Tensor::uniform(&[y, p, k, k], bound(p), rng),
            d: Tensor::uniform(&[y, u, k, k], bound(u), rng),
        }
    }

    pub fn state_channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn input_channels(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn output_channels(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.b.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.a.shape().first().copied().unwrap_or(0);
        if self.a.shape() != [p, p, 1, 1] {
            return Err(Error::dim(
                "convssm",
                "A",
                "[P, P, 1, 1]",
                format!("{:?}", self.a.shape()),
            ));
        }
        let bs = self.b.shape();
        if bs.len() != 4 || bs[0] != p || bs[2] != bs[3] || bs[2] % 2 == 0 {
            return Err(Error::dim(
                "convssm",
                "B",
                "[P, U, k, k], k odd",
                format!("{bs:?}"),
            ));
        }
        let (u, k) = (bs[1], bs[2]);
        let cs = self.c.shape();
        if cs.len() != 4 || cs[1] != p || cs[2] != k || cs[3] != k {
            return Err(Error::dim(
                "convssm",
                "C",
                format!("[Y, {p}, {k}, {k}]"),
                format!("{cs:?}"),
            ));
        }
        let y = cs[0];
        if self.d.shape() != [y, u, k, k] {
            return Err(Error::dim(
                "convssm",
                "D",
                format!("[{y}, {u}, {k}, {k}]"),
                format!("{:?}", self.d.shape()),
            ));
        }
        Ok(())
    }

    /// The `P×P` matrix view of the pointwise state kernel, row-major.
    pub fn state_matrix(&self) -> &[f64] {
        self.a.data()
    }

    /// Spectral radius of the state matrix, via Gelfand's formula on a
    /// repeatedly squared power.
    pub fn spectral_radius(&self) -> f64 {
        let p = self.state_channels();
        let mut m = self.a.data().to_vec();
        let mut log_scale = 0.0;
        let mut power = 1.0;
        for _ in 0..40 {
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            m.iter_mut().for_each(|v| *v /= norm);
            log_scale = 2.0 * (log_scale + norm.ln());
            m = matmul(&m, &m, p);
            power *= 2.0;
        }
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        ((log_scale + norm.ln()) / power).exp()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len() + self.c.len() + self.d.len()
    }
}

fn same_geom(cin: usize, cout: usize, k: usize, h: usize, w: usize) -> ConvGeom {
    ConvGeom {
        batch: 1,
        cin,
        h,
        w,
        cout,
        kh: k,
        kw: k,
        stride: 1,
        padding: k / 2,
        groups: 1,
    }
}

fn conv_same(x: &[f64], kernel: &Tensor, h: usize, w: usize) -> Vec<f64> {
    let ks = kernel.shape();
    kernels::conv2d_forward(
        x,
        kernel.data(),
        None,
        &same_geom(ks[1], ks[0], ks[2], h, w),
    )
}

fn check_frame(op: &'static str, p: &ConvSsmParameters, u: &[usize]) -> Result<(usize, usize)> {
    p.validate()?;
    if u.len() != 3 {
        return Err(Error::dim(op, "rank(U_k)", 3, u.len()));
    }
    if u[0] != p.input_channels() {
        return Err(Error::dim(op, "U", p.input_channels(), u[0]));
    }
    Ok((u[1], u[2]))
}

/// One recurrence step on plain tensors. `u: [U, H, W]`.
pub fn convssm_step(
    prev: &ConvState,
    u: &Tensor,
    p: &ConvSsmParameters,
) -> Result<(ConvState, Tensor)> {
    let (h, w) = check_frame("convssm_step", p, u.shape())?;
    let ps = p.state_channels();
    if prev.x.shape() != [ps, h, w] {
        return Err(Error::dim(
            "convssm_step",
            "X",
            format!("[{ps}, {h}, {w}]"),
            format!("{:?}", prev.x.shape()),
        ));
    }
    let mut x = conv_same(prev.x.data(), &p.a, h, w);
    for (a, b) in x.iter_mut().zip(conv_same(u.data(), &p.b, h, w)) {
        *a += b;
    }
    let y = output_map(&x, u.data(), p, h, w);
    Ok((
        ConvState {
            x: Tensor::from_parts(vec![ps, h, w], x),
        },
        Tensor::from_parts(vec![p.output_channels(), h, w], y),
    ))
}

fn output_map(x: &[f64], u: &[f64], p: &ConvSsmParameters, h: usize, w: usize) -> Vec<f64> {
    let mut y = conv_same(x, &p.c, h, w);
    for (a, b) in y.iter_mut().zip(conv_same(u, &p.d, h, w)) {
        *a += b;
    }
    y
}

fn check_sequence(
    op: &'static str,
    u: &Tensor,
    x0: &ConvState,
    p: &ConvSsmParameters,
) -> Result<(usize, usize, usize)> {
    let s = u.shape();
    if s.len() != 4 {
        return Err(Error::dim(op, "rank(U)", 4, s.len()));
    }
    let (h, w) = check_frame(op, p, &s[1..])?;
    let ps = p.state_channels();
    if x0.x.shape() != [ps, h, w] {
        return Err(Error::dim(
            op,
            "X_0",
            format!("[{ps}, {h}, {w}]"),
            format!("{:?}", x0.x.shape()),
        ));
    }
    Ok((s[0], h, w))
}

fn frame(u: &Tensor, k: usize) -> Tensor {
    let s = u.shape();
    let n = s[1] * s[2] * s[3];
    Tensor::from_parts(s[1..].to_vec(), u.data()[k * n..(k + 1) * n].to_vec())
}

/// Runs [`convssm_step`] over `u: [L, U, H, W]` in order.
pub fn scan_sequential(
    u: &Tensor,
    x0: &ConvState,
    p: &ConvSsmParameters,
) -> Result<(Tensor, ConvState)> {
    let (l, h, w) = check_sequence("convssm_scan_sequential", u, x0, p)?;
    let mut state = x0.clone();
    let mut ys = Vec::with_capacity(l * p.output_channels() * h * w);
    for k in 0..l {
        let (next, y) = convssm_step(&state, &frame(u, k), p)?;
        ys.extend_from_slice(y.data());
        state = next;
    }
    Ok((
        Tensor::from_parts(vec![l, p.output_channels(), h, w], ys),
        state,
    ))
}

/// Affine step `X ↦ M·X + b` with `M: [P, P]` and `b: [P, H·W]`.
#[derive(Clone, Debug)]
struct Affine {
    m: Vec<f64>,
    b: Vec<f64>,
}

fn matmul(a: &[f64], b: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        for k in 0..p {
            let aik = a[i * p + k];
            for j in 0..p {
                out[i * p + j] += aik * b[k * p + j];
            }
        }
    }
    out
}

/// `M · field` for a channel-major field `[P, n]`.
fn mix(m: &[f64], field: &[f64], p: usize) -> Vec<f64> {
    let n = field.len() / p;
    let mut out = vec![0.0; field.len()];
    for i in 0..p {
        let dst = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let mik = m[i * p + k];
            for (o, f) in dst.iter_mut().zip(&field[k * n..(k + 1) * n]) {
                *o += mik * f;
            }
        }
    }
    out
}

/// Same outputs as [`scan_sequential`], computed as a Blelloch prefix scan
/// over the composed affine steps.
pub fn scan_parallel(
    u: &Tensor,
    x0: &ConvState,
    p: &ConvSsmParameters,
) -> Result<(Tensor, ConvState)> {
    let (l, h, w) = check_sequence("convssm_scan_parallel", u, x0, p)?;
    let ps = p.state_channels();
    let hw = h * w;
    let frames: Vec<Tensor> = (0..l).map(|k| frame(u, k)).collect();
    let m = p.a.data().to_vec();
    let steps: Vec<Affine> = crate::parallel::map_collect(&frames, |f| Affine {
        m: m.clone(),
        b: conv_same(f.data(), &p.b, h, w),
    });
    let identity = Affine {
        m: (0..ps * ps)
            .map(|i| if i / ps == i % ps { 1.0 } else { 0.0 })
            .collect(),
        b: vec![0.0; ps * hw],
    };
    // (M₂, b₂) ∘ (M₁, b₁) = (M₂M₁, M₂b₁ + b₂)
    let prefixes = prefix::inclusive_scan(&steps, &identity, |first, then| {
        let mut b = mix(&then.m, &first.b, ps);
        for (x, y) in b.iter_mut().zip(&then.b) {
            *x += y;
        }
        Affine {
            m: matmul(&then.m, &first.m, ps),
            b,
        }
    });
    let a_shape = [ps, ps, 1, 1];
    let outputs: Vec<(Vec<f64>, Vec<f64>)> = crate::parallel::map_range(l, |k| {
        let pre = &prefixes[k];
        let kernel = Tensor::from_parts(a_shape.to_vec(), pre.m.clone());
        let mut x = conv_same(x0.x.data(), &kernel, h, w);
        for (a, b) in x.iter_mut().zip(&pre.b) {
            *a += b;
        }
        let y = output_map(&x, frames[k].data(), p, h, w);
        (x, y)
    });
    let mut ys = Vec::with_capacity(l * p.output_channels() * hw);
    for (_, y) in &outputs {
        ys.extend_from_slice(y);
    }
    let last = outputs.into_iter().last().map(|(x, _)| x).expect("L >= 1");
    Ok((
        Tensor::from_parts(vec![l, p.output_channels(), h, w], ys),
        ConvState {
            x: Tensor::from_parts(vec![ps, h, w], last),
        },
    ))
}

/// Multiply counts of one full sequential scan, by kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSsmFlops {
    /// `A * X`: `L·H·W·P²`
    pub state: u64,
    /// `B * U`: `L·H·W·P·U·k²`
    pub input: u64,
    /// `C * X`: `L·H·W·Y·P·k²`
    pub readout: u64,
    /// `D * U`: `L·H·W·Y·U·k²`
    pub feedthrough: u64,
}

impl ConvSsmFlops {
    pub fn total(&self) -> u64 {
        self.state + self.input + self.readout + self.feedthrough
    }
}

pub fn convssm_flop_terms(p: &ConvSsmParameters, h: usize, w: usize, l: usize) -> ConvSsmFlops {
    ConvSsmFlops::from_dims(
        p.state_channels(),
        p.input_channels(),
        p.output_channels(),
        p.kernel_size(),
        h * w * l,
    )
}

impl ConvSsmFlops {
    /// Counts for state `P`, input `U`, output `Y` channels, kernel `k` and
    /// `sites = L·H·W` grid-steps.
    pub fn from_dims(p: usize, u: usize, y: usize, k: usize, sites: usize) -> Self {
        let (p, u, y, kk, s) = (p as u64, u as u64, y as u64, (k * k) as u64, sites as u64);
        ConvSsmFlops {
            state: s * p * p,
            input: s * p * u * kk,
            readout: s * y * p * kk,
            feedthrough: s * y * u * kk,
        }
    }
}

/// Total multiply count of a length-`l` scan on an `h×w` grid.
pub fn convssm_flops(p: &ConvSsmParameters, h: usize, w: usize, l: usize) -> u64 {
    convssm_flop_terms(p, h, w, l).total()
}

/// ConvSSM kernels as values on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvSsmVars<'t> {
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub c: Var<'t>,
    pub d: Var<'t>,
}

impl ConvSsmParameters {
    pub fn bind<'t>(&self, tape: &'t Tape) -> ConvSsmVars<'t> {
        ConvSsmVars {
            a: tape.leaf(self.a.clone()),
            b: tape.leaf(self.b.clone()),
            c: tape.leaf(self.c.clone()),
            d: tape.leaf(self.d.clone()),
        }
    }
}

/// Differentiable step on `[1, P, H, W]` / `[1, U, H, W]` maps.
pub fn step_var<'t>(
    x_prev: Var<'t>,
    u: Var<'t>,
    p: &ConvSsmVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let k = p.b.shape()[2];
    let pad = k / 2;
    let x = x_prev
        .conv2d(p.a, None, 1, 0, 1)?
        .add(u.conv2d(p.b, None, 1, pad, 1)?)?;
    let y = x
        .conv2d(p.c, None, 1, pad, 1)?
        .add(u.conv2d(p.d, None, 1, pad, 1)?)?;
    Ok((x, y))
}

/// Differentiable sequential scan. Returns the per-step outputs and the
/// final state.
pub fn scan_var<'t>(
    inputs: &[Var<'t>],
    x0: Var<'t>,
    p: &ConvSsmVars<'t>,
) -> Result<(Vec<Var<'t>>, Var<'t>)> {
    if inputs.is_empty() {
        return Err(Error::contract("convssm scan needs L >= 1"));
    }
    let mut x = x0;
    let mut ys = Vec::with_capacity(inputs.len());
    for &u in inputs {
        let (nx, y) = step_var(x, u, p)?;
        ys.push(y);
        x = nx;
    }
    Ok((ys, x))
}
