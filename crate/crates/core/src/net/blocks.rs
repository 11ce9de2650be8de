//! Building blocks of the segmentation network. Token maps are laid out
//! channel-last, `[h, w, c]`; convolutions see them as `[1, c, h, w]`.

use rand_chacha::ChaCha8Rng;

use crate::convssm::ConvSsmVars;
use crate::error::{Error, Result};
use crate::net::params::{Bound, ParamId, ParamStore};
use crate::ssm::{self, S6Parameters, S6Vars};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Parameter factory: names, shapes and seeded initial values.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init { store, rng }
    }

    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let t = Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), self.rng);
        self.store.add(name, t)
    }

    fn tensor(&mut self, name: String, t: Tensor) -> ParamId {
        self.store.add(name, t)
    }
}

pub fn to_nchw<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    x.permute(&[2, 0, 1])?.reshape(&[1, s[2], s[0], s[1]])
}

pub fn to_hwc<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[s[1], s[2], s[3]])?.permute(&[1, 2, 0])
}

fn hwc(x: &Var<'_>, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim(op, "rank", 3, s.len())),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = init.uniform(format!("{name}.w"), &[dout, din], din);
        let b = bias.then(|| init.tensor(format!("{name}.b"), Tensor::zeros(&[dout])));
        Linear { w, b, din, dout }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: init.tensor(format!("{name}.g"), Tensor::ones(&[c])),
            beta: init.tensor(format!("{name}.b"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Strided-convolution patchify (`4×4`, stride 4) followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub norm: LayerNorm,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, cin: usize, c: usize) -> Self {
        let patch = 4;
        PatchEmbed {
            conv_w: init.uniform(
                "embed.conv.w".into(),
                &[c, cin, patch, patch],
                cin * patch * patch,
            ),
            conv_b: init.tensor("embed.conv.b".into(), Tensor::zeros(&[c])),
            norm: LayerNorm::new(init, "embed.norm", c),
            patch,
        }
    }

    /// `[Cin, H, W] -> [H/4, W/4, C]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let s = image.shape();
        let x = image.reshape(&[1, s[0], s[1], s[2]])?;
        let x = x.conv2d(
            p.var(self.conv_w),
            Some(p.var(self.conv_b)),
            self.patch,
            0,
            1,
        )?;
        self.norm.forward(p, to_hwc(x)?)
    }
}

/// Concatenates each 2×2 neighbourhood in the order (0,0), (0,1), (1,0),
/// (1,1): `[h, w, c] -> [h/2, w/2, 4c]`.
pub fn space_to_depth<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let (h, w, c) = hwc(&x, "patch_merge")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "patch_merge needs even extents, got {h}x{w}"
        )));
    }
    x.reshape(&[h / 2, 2, w / 2, 2, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[h / 2, w / 2, 4 * c])
}

/// Inverse of [`space_to_depth`] (pixel shuffle): `[h, w, 4c] -> [2h, 2w, c]`.
pub fn depth_to_space<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let (h, w, c4) = hwc(&x, "patch_expand")?;
    if c4 % 4 != 0 {
        return Err(Error::contract(format!(
            "pixel shuffle needs channels divisible by 4, got {c4}"
        )));
    }
    let c = c4 / 4;
    x.reshape(&[h, w, 2, 2, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[2 * h, 2 * w, c])
}

/// 2× downsampling: neighbourhood concat, norm, linear `4c -> 2c`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl PatchMerge {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(init, &format!("{name}.norm"), 4 * c),
            proj: Linear::new(init, &format!("{name}.proj"), 4 * c, 2 * c, false),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.proj
            .forward(p, self.norm.forward(p, space_to_depth(x)?)?)
    }
}

/// 2× upsampling: linear `c -> 2c`, then pixel shuffle to `[2h, 2w, c/2]`.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub proj: Linear,
}

impl PatchExpand {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Self {
        assert!(c % 2 == 0, "patch_expand needs even channels, got {c}");
        PatchExpand {
            proj: Linear::new(init, &format!("{name}.proj"), c, 2 * c, false),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, _, c) = hwc(&x, "patch_expand")?;
        if c % 2 != 0 {
            return Err(Error::contract(format!(
                "patch_expand needs even channels, got {c}"
            )));
        }
        depth_to_space(self.proj.forward(p, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct S6Ids {
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub x_proj: ParamId,
    pub dt_weight: ParamId,
    pub dt_bias: ParamId,
}

impl S6Ids {
    fn new(init: &mut Init<'_>, name: &str, channels: usize, state: usize) -> Self {
        let s = S6Parameters::init(channels, state, ssm::default_rank(channels), init.rng);
        S6Ids {
            a_log: init.tensor(format!("{name}.a_log"), s.a_log),
            d_skip: init.tensor(format!("{name}.d_skip"), s.d_skip),
            x_proj: init.tensor(format!("{name}.x_proj"), s.x_proj),
            dt_weight: init.tensor(format!("{name}.dt_w"), s.dt_weight),
            dt_bias: init.tensor(format!("{name}.dt_b"), s.dt_bias),
        }
    }

    pub fn vars<'t>(&self, p: &Bound<'t>) -> S6Vars<'t> {
        S6Vars {
            a_log: p.var(self.a_log),
            d_skip: p.var(self.d_skip),
            x_proj: p.var(self.x_proj),
            dt_weight: p.var(self.dt_weight),
            dt_bias: p.var(self.dt_bias),
        }
    }
}

/// Residual visual state-space block.
///
/// `u = LN(x)`; main path `LN(SS2D(SiLU(DWConv3(W_in u))))`; gate
/// `SiLU(W_gate u)`; output `x + W_out(main ⊙ gate)`.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub norm: LayerNorm,
    pub in_main: Linear,
    pub in_gate: Linear,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    /// One entry per scan direction; all four equal when shared.
    pub scans: Vec<S6Ids>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
    pub channels: usize,
}

impl VssBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c: usize,
        state: usize,
        share_scans: bool,
        zero_out: bool,
    ) -> Self {
        let e = 2 * c;
        let norm = LayerNorm::new(init, &format!("{name}.norm"), c);
        let in_main = Linear::new(init, &format!("{name}.in_main"), c, e, true);
        let in_gate = Linear::new(init, &format!("{name}.in_gate"), c, e, true);
        let dw_w = init.uniform(format!("{name}.dw.w"), &[e, 1, 3, 3], 9);
        let dw_b = init.tensor(format!("{name}.dw.b"), Tensor::zeros(&[e]));
        let scans = if share_scans {
            vec![S6Ids::new(init, &format!("{name}.scan"), e, state)]
        } else {
            (1..=4)
                .map(|v| S6Ids::new(init, &format!("{name}.scan{v}"), e, state))
                .collect()
        };
        let out_norm = LayerNorm::new(init, &format!("{name}.out_norm"), e);
        let out_proj = Linear::new(init, &format!("{name}.out_proj"), e, c, true);
        if zero_out {
            init.store.get_mut(out_proj.w).data_mut().fill(0.0);
        }
        VssBlock {
            norm,
            in_main,
            in_gate,
            dw_w,
            dw_b,
            scans,
            out_norm,
            out_proj,
            channels: c,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, _, c) = hwc(&x, "vss_block")?;
        if c != self.channels {
            return Err(Error::dim("vss_block", "channels", self.channels, c));
        }
        let e = 2 * c;
        let u = self.norm.forward(p, x)?;
        let main = to_nchw(self.in_main.forward(p, u)?)?;
        let main = main.conv2d(p.var(self.dw_w), Some(p.var(self.dw_b)), 1, 1, e)?;
        let main = to_hwc(main)?.silu();
        let vars: Vec<S6Vars<'t>> = self.scans.iter().map(|s| s.vars(p)).collect();
        let pick = |i: usize| &vars[i.min(vars.len() - 1)];
        let main = ssm::ss2d(main, [pick(0), pick(1), pick(2), pick(3)])?;
        let main = self.out_norm.forward(p, main)?;
        let gate = self.in_gate.forward(p, u)?.silu();
        x.add(self.out_proj.forward(p, main.mul(gate)?)?)
    }
}

/// ConvSSM over one fused feature map `U`, channels `c -> P -> c`. The
/// state is primed with `X_0 = B*U`, then advanced `steps` times with `U`
/// as the input at every step; `Y = C*X_L + D*U` is added residually.
#[derive(Clone, Debug)]
pub struct ConvSsmBlock {
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d: ParamId,
    pub state: usize,
    pub kernel: usize,
    pub steps: usize,
}

impl ConvSsmBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c: usize,
        state: usize,
        kernel: usize,
        steps: usize,
    ) -> Self {
        let p = crate::convssm::ConvSsmParameters::init_hippo(state, c, c, kernel, init.rng);
        ConvSsmBlock {
            a: init.tensor(format!("{name}.A"), p.a),
            b: init.tensor(format!("{name}.B"), p.b),
            c: init.tensor(format!("{name}.C"), p.c),
            d: init.tensor(format!("{name}.D"), p.d),
            state,
            kernel,
            steps,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        hwc(&x, "convssm_block")?;
        let vars = ConvSsmVars {
            a: p.var(self.a),
            b: p.var(self.b),
            c: p.var(self.c),
            d: p.var(self.d),
        };
        let u = to_nchw(x)?;
        let x0 = u.conv2d(vars.b, None, 1, self.kernel / 2, 1)?;
        let inputs = vec![u; self.steps];
        let (ys, _) = crate::convssm::scan_var(&inputs, x0, &vars)?;
        x.add(to_hwc(*ys.last().expect("steps >= 1"))?)
    }
}
