//! Property suites shared by the `verify` command and the test targets.
//! Each check compares against an oracle written independently of the code
//! under test and reports the measured deviation.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::convssm::{self, ConvSsmParameters, ConvSsmVars, ConvState};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheck};
use crate::loss::{self, ClassWeights};
use crate::mask::Mask;
use crate::metrics::ConfusionMatrix;
use crate::net::{
    Bound, ConvSsmBlock, Init, ParamStore, PatchExpand, PatchMerge, VssBlock, LN_EPS,
};
use crate::prefix;
use crate::ssm::{self, S6Parameters, S6Vars, ScanDirection};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error bound of every finite-difference check.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Central-difference step; small-gradient scan parameters are dominated by
/// rounding below this.
pub const GRAD_STEP: f64 = 1e-4;
/// Absolute bound for scan equivalences.
pub const SCAN_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Scan,
    Loss,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Suite::Grad),
            "scan" => Ok(Suite::Scan),
            "loss" => Ok(Suite::Loss),
            "all" => Ok(Suite::All),
            _ => Err(Error::Format(format!(
                "unknown suite `{s}` (grad, scan, loss, all)"
            ))),
        }
    }
}

/// Outcome of one property.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn below(name: &str, value: f64, bound: f64) -> Self {
        Check {
            name: name.to_string(),
            passed: value < bound,
            detail: format!("{value:.3e} < {bound:.0e}"),
        }
    }

    fn holds(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::holds(name, false, format!("error: {e}")))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} ({})", self.name, self.detail)
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Grad => grad_suite(),
        Suite::Scan => scan_suite(),
        Suite::Loss => loss_suite(),
        Suite::All => [grad_suite(), scan_suite(), loss_suite()].concat(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn random_mask(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> Mask {
    Mask::new(
        h,
        w,
        (0..h * w).map(|_| rng.gen_range(0..k) as u8).collect(),
    )
    .expect("sized")
}

/// Random probabilities `[K, H, W]` via an explicit softmax.
fn random_probs(k: usize, h: usize, w: usize, spread: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let hw = h * w;
    let logits: Vec<f64> = (0..k * hw)
        .map(|_| rng.gen_range(-spread..spread))
        .collect();
    let mut p = vec![0.0; k * hw];
    for i in 0..hw {
        let z: f64 = (0..k).map(|c| logits[c * hw + i].exp()).sum();
        for c in 0..k {
            p[c * hw + i] = logits[c * hw + i].exp() / z;
        }
    }
    Tensor::new([k, h, w], p).expect("sized")
}

// ---------------------------------------------------------------- gradients

/// Reduces any output to a scalar with fixed pseudo-random weights so that
/// every output coordinate contributes.
fn project<'t>(tape: &'t Tape, v: Var<'t>) -> Result<Var<'t>> {
    let shape = v.shape();
    let mut r = rng(0x7072_6f6a);
    let w = random(&shape, -1.0, 1.0, &mut r);
    Ok(v.mul(tape.constant(w))?.sum())
}

fn grad_check<F>(name: &str, inputs: Vec<Tensor>, max_coords: Option<usize>, f: F) -> Check
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let opts = GradCheck {
        max_coords,
        step: GRAD_STEP,
    };
    Check::from_result(
        name,
        gradcheck::max_rel_error(&inputs, f, opts).map(|e| Check::below(name, e, GRAD_TOLERANCE)),
    )
}

fn s6_inputs(d: usize, n: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let p = S6Parameters::init(d, n, ssm::default_rank(d), r);
    // move the step sizes away from the tiny initial range so the scan mixes
    let dt_bias = random(&[d], -1.0, 0.5, r);
    vec![p.a_log, p.d_skip, p.x_proj, p.dt_weight, dt_bias]
}

fn s6_vars<'t>(v: &[Var<'t>]) -> S6Vars<'t> {
    S6Vars {
        a_log: v[0],
        d_skip: v[1],
        x_proj: v[2],
        dt_weight: v[3],
        dt_bias: v[4],
    }
}

fn store_inputs(store: &ParamStore, x: Tensor, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    // randomize every tensor so zero-initialized biases are exercised too
    let mut inputs = vec![x];
    for t in store.tensors() {
        inputs.push(t.zip_map(&random(t.shape(), -0.3, 0.3, r), |a, b| a + b));
    }
    inputs
}

pub fn grad_suite() -> Vec<Check> {
    let mut r = rng(0x6772_6164);
    let mut out = Vec::new();
    let x34 = random(&[3, 4], -1.5, 1.5, &mut r);
    let y34 = random(&[3, 4], -1.5, 1.5, &mut r);
    let pos = random(&[3, 4], 0.3, 2.0, &mut r);

    out.push(grad_check(
        "add",
        vec![x34.clone(), y34.clone()],
        None,
        |t, v| project(t, v[0].add(v[1])?),
    ));
    out.push(grad_check(
        "sub",
        vec![x34.clone(), y34.clone()],
        None,
        |t, v| project(t, v[0].sub(v[1])?),
    ));
    out.push(grad_check(
        "mul",
        vec![x34.clone(), y34.clone()],
        None,
        |t, v| project(t, v[0].mul(v[1])?),
    ));
    out.push(grad_check("scale", vec![x34.clone()], None, |t, v| {
        project(t, v[0].scale(-1.7).add_scalar(0.3))
    }));
    out.push(grad_check("exp", vec![x34.clone()], None, |t, v| {
        project(t, v[0].exp())
    }));
    out.push(grad_check("log", vec![pos], None, |t, v| {
        project(t, v[0].log())
    }));
    out.push(grad_check("sigmoid", vec![x34.clone()], None, |t, v| {
        project(t, v[0].sigmoid())
    }));
    out.push(grad_check("silu", vec![x34.clone()], None, |t, v| {
        project(t, v[0].silu())
    }));
    out.push(grad_check("softplus", vec![x34.clone()], None, |t, v| {
        project(t, v[0].softplus())
    }));
    out.push(grad_check("sum", vec![x34.clone()], None, |_, v| {
        Ok(v[0].exp().sum())
    }));
    out.push(grad_check("mean", vec![x34.clone()], None, |_, v| {
        Ok(v[0].exp().mean())
    }));
    out.push(grad_check("reshape", vec![x34.clone()], None, |t, v| {
        project(t, v[0].reshape(&[2, 6])?)
    }));
    let x234 = random(&[2, 3, 4], -1.0, 1.0, &mut r);
    out.push(grad_check("permute", vec![x234.clone()], None, |t, v| {
        project(t, v[0].permute(&[2, 0, 1])?)
    }));
    out.push(grad_check("narrow", vec![x234.clone()], None, |t, v| {
        project(t, v[0].narrow(2, 1, 2)?)
    }));
    out.push(grad_check(
        "gather_rows",
        vec![x34.clone()],
        None,
        |t, v| project(t, v[0].gather_rows(Rc::new(vec![2, 0, 2, 1]))?),
    ));
    out.push(grad_check(
        "linear",
        vec![
            x34.clone(),
            random(&[5, 4], -1.0, 1.0, &mut r),
            random(&[5], -1.0, 1.0, &mut r),
        ],
        None,
        |t, v| project(t, v[0].linear(v[1], Some(v[2]))?),
    ));
    let img = random(&[1, 4, 6, 5], -1.0, 1.0, &mut r);
    out.push(grad_check(
        "conv2d",
        vec![
            img.clone(),
            random(&[3, 4, 3, 3], -0.5, 0.5, &mut r),
            random(&[3], -0.5, 0.5, &mut r),
        ],
        None,
        |t, v| project(t, v[0].conv2d(v[1], Some(v[2]), 1, 1, 1)?),
    ));
    out.push(grad_check(
        "conv2d strided",
        vec![img.clone(), random(&[2, 4, 2, 2], -0.5, 0.5, &mut r)],
        None,
        |t, v| project(t, v[0].conv2d(v[1], None, 2, 0, 1)?),
    ));
    out.push(grad_check(
        "conv2d depthwise",
        vec![
            img,
            random(&[4, 1, 3, 3], -0.5, 0.5, &mut r),
            random(&[4], -0.5, 0.5, &mut r),
        ],
        None,
        |t, v| project(t, v[0].conv2d(v[1], Some(v[2]), 1, 1, 4)?),
    ));
    out.push(grad_check(
        "layer_norm",
        vec![
            x234.clone(),
            random(&[4], 0.5, 1.5, &mut r),
            random(&[4], -0.5, 0.5, &mut r),
        ],
        None,
        |t, v| project(t, v[0].layer_norm(v[1], v[2], LN_EPS)?),
    ));
    out.push(grad_check("softmax", vec![x234.clone()], None, |t, v| {
        project(t, v[0].softmax(0)?)
    }));
    let (l, d, n) = (7, 3, 4);
    out.push(grad_check(
        "selective_scan primitive",
        vec![
            random(&[l, d], -1.0, 1.0, &mut r),
            random(&[l, d], 0.05, 0.8, &mut r),
            random(&[d, n], -2.0, -0.2, &mut r),
            random(&[l, n], -1.0, 1.0, &mut r),
            random(&[l, n], -1.0, 1.0, &mut r),
            random(&[d], -1.0, 1.0, &mut r),
        ],
        None,
        |t, v| project(t, v[0].selective_scan(v[1], v[2], v[3], v[4], v[5])?),
    ));

    let mut s6 = vec![random(&[l, d], -1.0, 1.0, &mut r)];
    s6.extend(s6_inputs(d, n, &mut r));
    out.push(grad_check(
        "selective_scan (S6 projections)",
        s6,
        None,
        |t, v| project(t, ssm::selective_scan(v[0], &s6_vars(&v[1..]))?),
    ));

    let mut ss = vec![random(&[3, 4, 4], -1.0, 1.0, &mut r)];
    for _ in 0..4 {
        ss.extend(s6_inputs(4, 2, &mut r));
    }
    out.push(grad_check("ss2d", ss, Some(24), |t, v| {
        let p: Vec<S6Vars<'_>> = (0..4).map(|i| s6_vars(&v[1 + 5 * i..])).collect();
        project(t, ssm::ss2d(v[0], [&p[0], &p[1], &p[2], &p[3]])?)
    }));

    let (pc, uc, yc, k) = (3, 2, 2, 3);
    out.push(grad_check(
        "convssm step",
        vec![
            random(&[1, pc, 4, 5], -1.0, 1.0, &mut r),
            random(&[1, uc, 4, 5], -1.0, 1.0, &mut r),
            random(&[pc, pc, 1, 1], -0.5, 0.5, &mut r),
            random(&[pc, uc, k, k], -0.5, 0.5, &mut r),
            random(&[yc, pc, k, k], -0.5, 0.5, &mut r),
            random(&[yc, uc, k, k], -0.5, 0.5, &mut r),
        ],
        None,
        |t, v| {
            let p = ConvSsmVars {
                a: v[2],
                b: v[3],
                c: v[4],
                d: v[5],
            };
            let (x, y) = convssm::step_var(v[0], v[1], &p)?;
            project(t, x)?.add(project(t, y)?)
        },
    ));

    let mut store = ParamStore::new();
    let mut init_rng = rng(11);
    let block = VssBlock::new(
        &mut Init::new(&mut store, &mut init_rng),
        "b",
        4,
        2,
        false,
        false,
    );
    let inputs = store_inputs(&store, random(&[4, 4, 4], -1.0, 1.0, &mut r), &mut r);
    out.push(grad_check("vss_block", inputs, Some(16), move |t, v| {
        project(t, block.forward(&Bound::from_vars(v[1..].to_vec()), v[0])?)
    }));

    let mut store = ParamStore::new();
    let block = ConvSsmBlock::new(&mut Init::new(&mut store, &mut init_rng), "c", 3, 2, 3, 2);
    let inputs = store_inputs(&store, random(&[4, 4, 3], -1.0, 1.0, &mut r), &mut r);
    out.push(grad_check(
        "convssm block (L=2)",
        inputs,
        Some(24),
        move |t, v| project(t, block.forward(&Bound::from_vars(v[1..].to_vec()), v[0])?),
    ));

    let mut store = ParamStore::new();
    let merge = PatchMerge::new(&mut Init::new(&mut store, &mut init_rng), "m", 4);
    let inputs = store_inputs(&store, random(&[4, 6, 4], -1.0, 1.0, &mut r), &mut r);
    out.push(grad_check("patch_merge", inputs, None, move |t, v| {
        project(t, merge.forward(&Bound::from_vars(v[1..].to_vec()), v[0])?)
    }));

    let mut store = ParamStore::new();
    let expand = PatchExpand::new(&mut Init::new(&mut store, &mut init_rng), "e", 4);
    let inputs = store_inputs(&store, random(&[3, 2, 4], -1.0, 1.0, &mut r), &mut r);
    out.push(grad_check("patch_expand", inputs, None, move |t, v| {
        project(t, expand.forward(&Bound::from_vars(v[1..].to_vec()), v[0])?)
    }));

    let (k, h, w) = (4, 3, 5);
    let target = random_mask(h, w, k, &mut r);
    let alpha =
        ClassWeights::new((0..k).map(|_| r.gen_range(0.2..2.0)).collect()).expect("positive");
    let logits = random(&[k, h, w], -2.0, 2.0, &mut r);
    let (t1, a1) = (target.clone(), alpha.clone());
    out.push(grad_check(
        "focal loss",
        vec![logits.clone()],
        None,
        move |_, v| loss::focal_loss(v[0].softmax(0)?, &t1, &a1, 2.0),
    ));
    let t2 = target.clone();
    out.push(grad_check(
        "jaccard loss",
        vec![logits.clone()],
        None,
        move |_, v| loss::jaccard_loss(v[0].softmax(0)?, &t2),
    ));
    out.push(grad_check(
        "hybrid loss",
        vec![logits],
        None,
        move |_, v| loss::hybrid_loss(v[0].softmax(0)?, &target, &alpha, 2.0),
    ));
    out
}

// -------------------------------------------------------------------- scans

fn random_convssm(r: &mut ChaCha8Rng) -> (ConvSsmParameters, Tensor, ConvState) {
    let p = r.gen_range(1..=4);
    let u = r.gen_range(1..=4);
    let y = r.gen_range(1..=4);
    let k = if r.gen_bool(0.5) { 1 } else { 3 };
    let (h, w, l) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=64));
    // infinity norm of A below 0.9 keeps long sequences bounded
    let bound = 0.9 / p as f64;
    let params = ConvSsmParameters::new(
        random(&[p, p, 1, 1], -bound, bound, r),
        random(&[p, u, k, k], -0.5, 0.5, r),
        random(&[y, p, k, k], -0.5, 0.5, r),
        random(&[y, u, k, k], -0.5, 0.5, r),
    )
    .expect("consistent shapes");
    let seq = random(&[l, u, h, w], -1.0, 1.0, r);
    let x0 = ConvState {
        x: random(&[p, h, w], -1.0, 1.0, r),
    };
    (params, seq, x0)
}

/// Maximum deviation between the parallel and sequential ConvSSM scans over
/// `cases` random configurations.
pub fn convssm_scan_deviation(cases: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (p, u, x0) = random_convssm(&mut r);
        let (ys, xs) = convssm::scan_sequential(&u, &x0, &p)?;
        let (yp, xp) = convssm::scan_parallel(&u, &x0, &p)?;
        worst = worst
            .max(ys.max_abs_diff(&yp))
            .max(xs.x.max_abs_diff(&xp.x));
    }
    Ok(worst)
}

/// Step-by-step S6 recurrence written from the parameter tensors alone.
pub fn selective_scan_reference(seq: &Tensor, p: &S6Parameters) -> Tensor {
    let (l, d) = (seq.shape()[0], seq.shape()[1]);
    let (n, rank) = (p.state_dim(), p.rank());
    let x = seq.data();
    let mut h = vec![vec![0.0; n]; d];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let tok = &x[t * d..(t + 1) * d];
        let proj: Vec<f64> = (0..rank + 2 * n)
            .map(|j| (0..d).map(|i| p.x_proj.at(&[j, i]) * tok[i]).sum())
            .collect();
        for ch in 0..d {
            let pre: f64 = p.dt_bias.at(&[ch])
                + (0..rank)
                    .map(|q| p.dt_weight.at(&[ch, q]) * proj[q])
                    .sum::<f64>();
            let dt = (1.0 + pre.exp()).ln();
            let mut acc = 0.0;
            for s in 0..n {
                let a = -p.a_log.at(&[ch, s]).exp();
                let (b, c) = (proj[rank + s], proj[rank + n + s]);
                h[ch][s] = (dt * a).exp() * h[ch][s] + dt * b * tok[ch];
                acc += c * h[ch][s];
            }
            y[t * d + ch] = acc + p.d_skip.at(&[ch]) * tok[ch];
        }
    }
    Tensor::new([l, d], y).expect("sized")
}

/// Maximum deviation of `selective_scan` from the reference over `cases`
/// random instances with `L ≤ 32`, `D ≤ 4`, `N ≤ 8`.
pub fn selective_scan_deviation(cases: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (l, d, n) = (r.gen_range(1..=32), r.gen_range(1..=4), r.gen_range(1..=8));
        let mut p = S6Parameters::init(d, n, r.gen_range(1..=3), &mut r);
        p.dt_bias = random(&[d], -3.0, 1.0, &mut r);
        p.d_skip = random(&[d], -1.0, 1.0, &mut r);
        let seq = random(&[l, d], -1.0, 1.0, &mut r);
        let got = ssm::selective_scan_tensor(&seq, &p)?;
        worst = worst.max(got.max_abs_diff(&selective_scan_reference(&seq, &p)));
    }
    Ok(worst)
}

/// Expand/fold round trips are exact and `ss2d` with identity scans is `4·Z`.
pub fn ss2d_structure(seed: u64) -> Result<(bool, bool)> {
    let mut r = rng(seed);
    let mut round_trip = true;
    let mut identity = true;
    for _ in 0..20 {
        let (h, w, d) = (r.gen_range(1..=7), r.gen_range(1..=7), r.gen_range(1..=4));
        let z = random(&[h, w, d], -3.0, 3.0, &mut r);
        for dir in ScanDirection::ALL {
            let seq = ssm::expand(&z, dir)?;
            round_trip &= ssm::fold(&seq)? == z;
            let tape = Tape::new();
            let folded = ssm::fold_var(ssm::expand_var(tape.constant(z.clone()), dir)?, dir, h, w)?;
            round_trip &= *folded.value() == z;
        }
        let tape = Tape::new();
        let out = ssm::ss2d_with(tape.constant(z.clone()), |_, s| Ok(s))?;
        identity &= *out.value() == z.map(|v| 4.0 * v);
    }
    Ok((round_trip, identity))
}

/// For every direction, perturbing the token at sequence position `t`
/// leaves outputs at positions before `t` bit-identical and changes the
/// output at `t`.
pub fn ss2d_causality(seed: u64) -> Result<bool> {
    let mut r = rng(seed);
    let (h, w, d) = (3, 4, 2);
    let p = S6Parameters::init(d, 3, 1, &mut r);
    let z = random(&[h, w, d], -1.0, 1.0, &mut r);
    let run = |z: &Tensor, dir: ScanDirection| -> Result<Tensor> {
        let seq = ssm::expand(z, dir)?;
        ssm::selective_scan_tensor(&seq.data, &p)
    };
    let mut ok = true;
    for dir in ScanDirection::ALL {
        let order = dir.order(h, w);
        let base = run(&z, dir)?;
        for t in 0..h * w {
            let mut zp = z.clone();
            zp.data_mut()[order[t] * d] += 0.5;
            let pert = run(&zp, dir)?;
            ok &= base.data()[..t * d] == pert.data()[..t * d];
            ok &= base.data()[t * d..(t + 1) * d] != pert.data()[t * d..(t + 1) * d];
        }
    }
    Ok(ok)
}

fn prefix_scan_exact(seed: u64) -> bool {
    let mut r = rng(seed);
    let mut ok = true;
    for _ in 0..50 {
        let n = r.gen_range(0..100);
        let items: Vec<[i64; 4]> = (0..n)
            .map(|_| {
                [
                    r.gen_range(-2..3),
                    r.gen_range(-2..3),
                    r.gen_range(-2..3),
                    r.gen_range(-2..3),
                ]
            })
            .collect();
        // 2×2 integer matrix products: associative, not commutative, exact
        let op = |a: &[i64; 4], b: &[i64; 4]| {
            [
                b[0] * a[0] + b[1] * a[2],
                b[0] * a[1] + b[1] * a[3],
                b[2] * a[0] + b[3] * a[2],
                b[2] * a[1] + b[3] * a[3],
            ]
            .map(|v| v.rem_euclid(1_000_003))
        };
        let got = prefix::inclusive_scan(&items, &[1, 0, 0, 1], op);
        let mut acc = [1, 0, 0, 1];
        for (i, x) in items.iter().enumerate() {
            acc = op(&acc, x);
            ok &= got[i] == acc;
        }
    }
    ok
}

pub fn scan_suite() -> Vec<Check> {
    let mut out = vec![
        Check::from_result(
            "convssm parallel vs sequential (200 configs)",
            convssm_scan_deviation(200, 0x7363_616e).map(|e| {
                Check::below(
                    "convssm parallel vs sequential (200 configs)",
                    e,
                    SCAN_TOLERANCE,
                )
            }),
        ),
        Check::from_result(
            "selective scan vs step recurrence (100 instances)",
            selective_scan_deviation(100, 0x5336).map(|e| {
                Check::below(
                    "selective scan vs step recurrence (100 instances)",
                    e,
                    SCAN_TOLERANCE,
                )
            }),
        ),
    ];
    out.push(Check::from_result(
        "ss2d expand/fold and identity",
        ss2d_structure(3).map(|(rt, id)| {
            Check::holds(
                "ss2d expand/fold and identity",
                rt && id,
                format!("round trip exact: {rt}, identity gives 4Z: {id}"),
            )
        }),
    ));
    out.push(Check::from_result(
        "ss2d per-direction causality",
        ss2d_causality(4).map(|ok| {
            Check::holds(
                "ss2d per-direction causality",
                ok,
                "single-token perturbation",
            )
        }),
    ));
    out.push(Check::holds(
        "blelloch prefix scan",
        prefix_scan_exact(5),
        "non-commutative integer products",
    ));
    out
}

// --------------------------------------------------------------------- loss

fn value(f: impl for<'t> FnOnce(&'t Tape) -> Result<Var<'t>>) -> Result<f64> {
    let tape = Tape::new();
    Ok(f(&tape)?.value().item())
}

fn focal_value(p: &Tensor, m: &Mask, a: &ClassWeights, g: f64) -> Result<f64> {
    value(|t| loss::focal_loss(t.constant(p.clone()), m, a, g))
}

fn jaccard_value(p: &Tensor, m: &Mask) -> Result<f64> {
    value(|t| loss::jaccard_loss(t.constant(p.clone()), m))
}

/// Largest gap between focal loss with `γ = 0, α = 1` and a direct mean
/// cross-entropy.
pub fn focal_ce_gap(cases: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (k, h, w) = (r.gen_range(2..=6), r.gen_range(1..=6), r.gen_range(1..=6));
        let p = random_probs(k, h, w, 3.0, &mut r);
        let m = random_mask(h, w, k, &mut r);
        let hw = h * w;
        let ce = m
            .labels()
            .iter()
            .enumerate()
            .map(|(i, &t)| -p.data()[t as usize * hw + i].ln())
            .sum::<f64>()
            / hw as f64;
        worst = worst.max((focal_value(&p, &m, &ClassWeights::uniform(k), 0.0)? - ce).abs());
    }
    Ok(worst)
}

fn one_hot(m: &Mask, k: usize) -> Tensor {
    let hw = m.len();
    Tensor::from_fn(&[k, m.height(), m.width()], |i| {
        f64::from(m.labels()[i % hw] as usize == i / hw)
    })
}

/// Largest hybrid loss over random perfect one-hot predictions.
pub fn perfect_prediction_loss(cases: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (k, h, w) = (r.gen_range(2..=6), r.gen_range(1..=8), r.gen_range(1..=8));
        let m = random_mask(h, w, k, &mut r);
        let a = ClassWeights::new((0..k).map(|_| r.gen_range(0.1..3.0)).collect())?;
        worst = worst.max(loss::hybrid_loss_value(&one_hot(&m, k), &m, &a, 2.0)?);
    }
    Ok(worst)
}

/// Range of the Jaccard loss over random instances.
pub fn jaccard_range(cases: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = rng(seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..cases {
        let (k, h, w) = (r.gen_range(2..=6), r.gen_range(1..=6), r.gen_range(1..=6));
        let spread = [0.1, 2.0, 30.0][i % 3];
        let p = random_probs(k, h, w, spread, &mut r);
        let v = jaccard_value(&p, &random_mask(h, w, k, &mut r))?;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Focal loss of a single binary pixel with `p_t = 0.5`, `γ = 2`, `α = 1`.
pub fn focal_half_probability() -> Result<f64> {
    let p = Tensor::new([2, 1, 1], vec![0.5, 0.5])?;
    focal_value(&p, &Mask::filled(1, 1, 0), &ClassWeights::uniform(2), 2.0)
}

fn brute_force_metrics(seed: u64) -> Result<bool> {
    let mut r = rng(seed);
    let mut ok = true;
    for _ in 0..100 {
        let k = r.gen_range(2..=5);
        let (truth, pred) = (random_mask(8, 8, k, &mut r), random_mask(8, 8, k, &mut r));
        let cm = ConfusionMatrix::from_masks(&pred, &truth, k)?;
        let rep = cm.report();
        let (t, p) = (truth.labels(), pred.labels());
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let tp = t.iter().zip(p).filter(|&(&a, &b)| a == c && b == c).count() as f64;
            let fp = t.iter().zip(p).filter(|&(&a, &b)| a != c && b == c).count() as f64;
            let fn_ = t.iter().zip(p).filter(|&(&a, &b)| a == c && b != c).count() as f64;
            let present = t.contains(&c);
            if present {
                ious.push(tp / (tp + fp + fn_));
            }
            let m = &rep.per_class[c as usize];
            if tp + fp + fn_ > 0.0 {
                ok &= m.iou == Some(tp / (tp + fp + fn_));
                ok &= m.f1 == Some(2.0 * tp / (2.0 * tp + fp + fn_));
            }
            ok &= m.fp_rate == if tp + fp > 0.0 { fp / (tp + fp) } else { 0.0 };
        }
        let correct = t.iter().zip(p).filter(|(a, b)| a == b).count() as f64;
        ok &= rep.oa == correct / 64.0;
        ok &= rep.overall_fp == (64.0 - correct) / 64.0;
        ok &= rep.miou == ious.iter().sum::<f64>() / ious.len() as f64;
    }
    Ok(ok)
}

pub fn loss_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let name = "focal(gamma=0, alpha=1) equals cross-entropy";
    out.push(Check::from_result(
        name,
        focal_ce_gap(200, 1).map(|e| Check::below(name, e, 1e-12)),
    ));
    let name = "perfect prediction hybrid loss";
    out.push(Check::from_result(
        name,
        perfect_prediction_loss(100, 2).map(|e| Check::below(name, e, 1e-5)),
    ));
    let name = "jaccard loss within [0, 1] (1000 instances)";
    out.push(Check::from_result(
        name,
        jaccard_range(1000, 3).map(|(lo, hi)| {
            Check::holds(
                name,
                lo >= 0.0 && hi <= 1.0,
                format!("range [{lo:.4}, {hi:.4}]"),
            )
        }),
    ));
    let name = "focal p_t=0.5 gamma=2 closed form";
    out.push(Check::from_result(
        name,
        focal_half_probability()
            .map(|v| Check::below(name, (v - 0.25 * std::f64::consts::LN_2).abs(), 1e-9)),
    ));
    out.push(Check::from_result(
        "loss examples and invariances",
        loss_invariances(),
    ));
    let name = "metrics match a per-pixel tally (100 masks)";
    out.push(Check::from_result(
        name,
        brute_force_metrics(4).map(|ok| Check::holds(name, ok, "exact")),
    ));
    out
}

fn loss_invariances() -> Result<Check> {
    let mut r = rng(9);
    let mut failures = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    let half = Tensor::new([2, 1, 1], vec![0.5, 0.5])?;
    let j = jaccard_value(&half, &Mask::filled(1, 1, 0))?;
    expect(
        (j - (1.0 - (0.5 + loss::JACCARD_EPS) / (1.0 + loss::JACCARD_EPS))).abs() < 1e-15,
        "uniform jaccard",
    );
    let m = random_mask(4, 4, 3, &mut r);
    let wrong = Mask::new(4, 4, m.labels().iter().map(|&l| (l + 1) % 3).collect())?;
    expect(
        jaccard_value(&one_hot(&wrong, 3), &m)? > 1.0 - 1e-5,
        "disjoint jaccard",
    );

    for g in [0.0, 1.0, 2.0, 5.0] {
        let mut prev = f64::INFINITY;
        for i in 1..=99 {
            let pt = i as f64 / 100.0;
            let p = Tensor::new([2, 1, 1], vec![pt, 1.0 - pt])?;
            let v = focal_value(&p, &Mask::filled(1, 1, 0), &ClassWeights::uniform(2), g)?;
            expect(v <= prev, "focal monotone in p_t");
            prev = v;
        }
    }

    let (k, h, w) = (4, 5, 3);
    let p = random_probs(k, h, w, 2.0, &mut r);
    let m = random_mask(h, w, k, &mut r);
    let a = ClassWeights::new(vec![0.5, 1.0, 2.0, 3.0])?;
    let hybrid = loss::hybrid_loss_value(&p, &m, &a, 2.0)?;
    let split = focal_value(&p, &m, &a, 2.0)? + jaccard_value(&p, &m)?;
    expect((hybrid - split).abs() < 1e-12, "hybrid = focal + jaccard");

    let perm = [2usize, 0, 3, 1];
    let hw = h * w;
    let pp = Tensor::from_fn(&[k, h, w], |i| p.data()[perm[i / hw] * hw + i % hw]);
    let inv = crate::tensor::kernels::inverse_permutation(&perm);
    let mp = Mask::new(
        h,
        w,
        m.labels().iter().map(|&l| inv[l as usize] as u8).collect(),
    )?;
    let ap = ClassWeights::new(perm.iter().map(|&c| a.as_slice()[c]).collect())?;
    expect(
        (loss::hybrid_loss_value(&pp, &mp, &ap, 2.0)? - hybrid).abs() < 1e-12,
        "class permutation",
    );

    let scaled = ClassWeights::new(a.as_slice().iter().map(|x| 2.5 * x).collect())?;
    expect(
        (focal_value(&p, &m, &scaled, 2.0)? - 2.5 * focal_value(&p, &m, &a, 2.0)?).abs() < 1e-12,
        "alpha scaling",
    );

    // two pixels, equal p_t, different classes: gradient ratio follows α
    let two = Tensor::new([2, 1, 2], vec![0.3, 0.7, 0.7, 0.3])?;
    let tm = Mask::new(1, 2, vec![1, 0])?;
    let aw = ClassWeights::new(vec![0.4, 3.6])?;
    let tape = Tape::new();
    let v = tape.leaf(two);
    loss::focal_loss(v, &tm, &aw, 2.0)?.backward()?;
    let g = tape.grad(v).expect("reached");
    let ratio = g.data()[2] / g.data()[1];
    expect((ratio - 9.0).abs() < 1e-12, "minority gradient ratio");

    Ok(Check::holds(
        "loss examples and invariances",
        failures.is_empty(),
        if failures.is_empty() {
            "all hold".to_string()
        } else {
            failures.join(", ")
        },
    ))
}
