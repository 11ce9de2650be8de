//! Selective scan (S6) and the four-direction 2D scan built on it.
//!
//! A feature map `Z: [H, W, D]` is unfolded into four token sequences
//! (row-major, column-major, and their reversals), each sequence goes through
//! its own selective scan, and the results are folded back and summed.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    RowForward,
    ColForward,
    RowBackward,
    ColBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::ColForward,
        ScanDirection::RowBackward,
        ScanDirection::ColBackward,
    ];

    /// 1-based index in the order listed in [`ScanDirection::ALL`].
    pub fn index(self) -> usize {
        match self {
            ScanDirection::RowForward => 1,
            ScanDirection::ColForward => 2,
            ScanDirection::RowBackward => 3,
            ScanDirection::ColBackward => 4,
        }
    }

    /// Row-major grid offsets in the order this direction visits them.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row: Vec<usize> = (0..h * w).collect();
        let col: Vec<usize> = (0..w)
            .flat_map(|x| (0..h).map(move |y| y * w + x))
            .collect();
        match self {
            ScanDirection::RowForward => row,
            ScanDirection::ColForward => col,
            ScanDirection::RowBackward => row.into_iter().rev().collect(),
            ScanDirection::ColBackward => col.into_iter().rev().collect(),
        }
    }
}

/// A grid flattened into a token sequence along one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalSequence {
    /// `[H·W, D]`
    pub data: Tensor,
    pub direction: ScanDirection,
    pub height: usize,
    pub width: usize,
}

fn grid_dims(z: &[usize]) -> Result<(usize, usize, usize)> {
    match *z {
        [h, w, d] => Ok((h, w, d)),
        _ => Err(Error::dim("expand", "rank", 3, z.len())),
    }
}

fn permute_rows(src: &[f64], width: usize, index: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    for &i in index {
        out.extend_from_slice(&src[i * width..][..width]);
    }
    out
}

/// Unfolds `z: [H, W, D]` along `direction`.
pub fn expand(z: &Tensor, direction: ScanDirection) -> Result<DirectionalSequence> {
    let (h, w, d) = grid_dims(z.shape())?;
    let order = direction.order(h, w);
    let data = Tensor::new([h * w, d], permute_rows(z.data(), d, &order))?;
    Ok(DirectionalSequence {
        data,
        direction,
        height: h,
        width: w,
    })
}

/// Inverse of [`expand`].
pub fn fold(seq: &DirectionalSequence) -> Result<Tensor> {
    let (h, w) = (seq.height, seq.width);
    let shape = seq.data.shape();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::dim("fold", 0, h * w, format!("{shape:?}")));
    }
    let d = shape[1];
    let inv = crate::tensor::kernels::inverse_permutation(&seq.direction.order(h, w));
    Tensor::new([h, w, d], permute_rows(seq.data.data(), d, &inv))
}

/// Differentiable [`expand`]: `[H, W, D] -> [H·W, D]`.
pub fn expand_var<'t>(z: Var<'t>, direction: ScanDirection) -> Result<Var<'t>> {
    let (h, w, d) = grid_dims(&z.shape())?;
    z.reshape(&[h * w, d])?
        .gather_rows(Rc::new(direction.order(h, w)))
}

/// Differentiable [`fold`]: `[H·W, D] -> [H, W, D]`.
pub fn fold_var<'t>(seq: Var<'t>, direction: ScanDirection, h: usize, w: usize) -> Result<Var<'t>> {
    let shape = seq.shape();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::dim("fold", 0, h * w, format!("{shape:?}")));
    }
    let inv = crate::tensor::kernels::inverse_permutation(&direction.order(h, w));
    seq.gather_rows(Rc::new(inv))?.reshape(&[h, w, shape[1]])
}

/// Learnable tensors of one selective scan over `D` channels with state
/// size `N` and step-size projection rank `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct S6Parameters {
    /// `[D, N]`, stores `ln(-A)`.
    pub a_log: Tensor,
    /// `[D]`
    pub d_skip: Tensor,
    /// `[R + 2N, D]`, token -> (Δ low-rank, B, C).
    pub x_proj: Tensor,
    /// `[D, R]`
    pub dt_weight: Tensor,
    /// `[D]`
    pub dt_bias: Tensor,
}

pub fn default_rank(channels: usize) -> usize {
    (channels / 4).max(1)
}

impl S6Parameters {
    pub fn init<R: Rng + ?Sized>(channels: usize, state: usize, rank: usize, rng: &mut R) -> Self {
        let a_log = Tensor::from_fn(&[channels, state], |i| ((i % state) as f64 + 1.0).ln());
        // initial step sizes log-uniform in [1e-3, 1e-1], stored pre-softplus
        let dt_bias = Tensor::from_fn(&[channels], |_| {
            let dt: f64 = (rng.gen_range((1e-3f64).ln()..(1e-1f64).ln())).exp();
            inverse_softplus(dt)
        });
        S6Parameters {
            a_log,
            d_skip: Tensor::ones(&[channels]),
            x_proj: Tensor::uniform(
                &[rank + 2 * state, channels],
                1.0 / (channels as f64).sqrt(),
                rng,
            ),
            dt_weight: Tensor::uniform(&[channels, rank], 1.0 / (rank as f64).sqrt(), rng),
            dt_bias,
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.dt_weight.shape()[1]
    }

    /// Records the tensors as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> S6Vars<'t> {
        S6Vars {
            a_log: tape.leaf(self.a_log.clone()),
            d_skip: tape.leaf(self.d_skip.clone()),
            x_proj: tape.leaf(self.x_proj.clone()),
            dt_weight: tape.leaf(self.dt_weight.clone()),
            dt_bias: tape.leaf(self.dt_bias.clone()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.a_log.len()
            + self.d_skip.len()
            + self.x_proj.len()
            + self.dt_weight.len()
            + self.dt_bias.len()
    }
}

/// S6 parameters as values on a tape.
#[derive(Clone, Copy, Debug)]
pub struct S6Vars<'t> {
    pub a_log: Var<'t>,
    pub d_skip: Var<'t>,
    pub x_proj: Var<'t>,
    pub dt_weight: Var<'t>,
    pub dt_bias: Var<'t>,
}

/// Input-dependent quantities of one scan.
pub struct ScanInputs<'t> {
    /// `[L, D]`, positive.
    pub delta: Var<'t>,
    /// `[D, N]`, negative.
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub c: Var<'t>,
}

/// Projects a token sequence `[L, D]` to the step sizes and the
/// input/output state maps.
pub fn scan_inputs<'t>(seq: Var<'t>, p: &S6Vars<'t>) -> Result<ScanInputs<'t>> {
    let rank = p.dt_weight.shape()[1];
    let n = p.a_log.shape()[1];
    let proj = seq.linear(p.x_proj, None)?;
    let dt_low = proj.narrow(1, 0, rank)?;
    let b = proj.narrow(1, rank, n)?;
    let c = proj.narrow(1, rank + n, n)?;
    let delta = dt_low.linear(p.dt_weight, Some(p.dt_bias))?.softplus();
    let a = p.a_log.exp().neg();
    Ok(ScanInputs { delta, a, b, c })
}

/// `[L, D] -> [L, D]` selective scan with input-dependent Δ, B, C.
pub fn selective_scan<'t>(seq: Var<'t>, p: &S6Vars<'t>) -> Result<Var<'t>> {
    let s = scan_inputs(seq, p)?;
    seq.selective_scan(s.delta, s.a, s.b, s.c, p.d_skip)
}

/// Tape-free convenience wrapper around [`selective_scan`].
pub fn selective_scan_tensor(seq: &Tensor, p: &S6Parameters) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(seq.clone());
    let vars = S6Vars {
        a_log: tape.constant(p.a_log.clone()),
        d_skip: tape.constant(p.d_skip.clone()),
        x_proj: tape.constant(p.x_proj.clone()),
        dt_weight: tape.constant(p.dt_weight.clone()),
        dt_bias: tape.constant(p.dt_bias.clone()),
    };
    let y = selective_scan(x, &vars)?.value();
    Ok((*y).clone())
}

/// Expands `z: [H, W, D]` in every direction, applies `scan` to each
/// sequence, folds back and sums the four maps.
pub fn ss2d_with<'t, F>(z: Var<'t>, mut scan: F) -> Result<Var<'t>>
where
    F: FnMut(ScanDirection, Var<'t>) -> Result<Var<'t>>,
{
    let (h, w, _) = grid_dims(&z.shape())?;
    let mut acc: Option<Var<'t>> = None;
    for dir in ScanDirection::ALL {
        let y = scan(dir, expand_var(z, dir)?)?;
        let folded = fold_var(y, dir, h, w)?;
        acc = Some(match acc {
            Some(a) => a.add(folded)?,
            None => folded,
        });
    }
    Ok(acc.expect("four directions"))
}

/// Four-direction selective scan, one parameter set per direction.
pub fn ss2d<'t>(z: Var<'t>, params: [&S6Vars<'t>; 4]) -> Result<Var<'t>> {
    ss2d_with(z, |dir, seq| selective_scan(seq, params[dir.index() - 1]))
}

/// Numerically safe inverse of softplus, used for step-size biases.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Tensor {
        Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn expand_orders() {
        let z = grid();
        let get = |d| expand(&z, d).unwrap().data.into_data();
        assert_eq!(get(ScanDirection::RowForward), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(get(ScanDirection::ColForward), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(get(ScanDirection::RowBackward), vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(get(ScanDirection::ColBackward), vec![4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn fold_examples() {
        let seq = |data: Vec<f64>, direction| DirectionalSequence {
            data: Tensor::new([4, 1], data).unwrap(),
            direction,
            height: 2,
            width: 2,
        };
        assert_eq!(
            fold(&seq(vec![1.0, 2.0, 3.0, 4.0], ScanDirection::RowForward)).unwrap(),
            grid()
        );
        assert_eq!(
            fold(&seq(vec![4.0, 3.0, 2.0, 1.0], ScanDirection::RowBackward)).unwrap(),
            grid()
        );
    }

    #[test]
    fn fold_rejects_length_mismatch() {
        let s = DirectionalSequence {
            data: Tensor::zeros(&[5, 1]),
            direction: ScanDirection::RowForward,
            height: 2,
            width: 2,
        };
        assert!(fold(&s).is_err());
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::uniform(&[3, 5, 2], 1.0, &mut rng);
        for d in ScanDirection::ALL {
            assert_eq!(fold(&expand(&z, d).unwrap()).unwrap(), z);
        }
    }

    #[test]
    fn direction_indices() {
        let idx: Vec<usize> = ScanDirection::ALL.iter().map(|d| d.index()).collect();
        assert_eq!(idx, vec![1, 2, 3, 4]);
    }

    #[test]
    fn memoryless_scan_is_identity() {
        let tape = Tape::new();
        let l = 5;
        let x = tape.constant(Tensor::from_fn(&[l, 1], |i| i as f64 - 1.5));
        let delta = tape.constant(Tensor::ones(&[l, 1]));
        let a = tape.constant(Tensor::full(&[1, 1], -1e300));
        let b = tape.constant(Tensor::ones(&[l, 1]));
        let c = tape.constant(Tensor::ones(&[l, 1]));
        let skip = tape.constant(Tensor::zeros(&[1]));
        let y = x.selective_scan(delta, a, b, c, skip).unwrap().value();
        assert_eq!(y.data(), x.value().data());
    }

    #[test]
    fn undamped_scan_accumulates() {
        let tape = Tape::new();
        let (l, n) = (6, 3);
        let x = tape.constant(Tensor::from_fn(&[l, 1], |i| (i * i) as f64));
        let delta = tape.constant(Tensor::ones(&[l, 1]));
        let a = tape.constant(Tensor::zeros(&[1, n]));
        let b = tape.constant(Tensor::ones(&[l, n]));
        let c = tape.constant(Tensor::from_fn(
            &[l, n],
            |i| if i % n == 0 { 1.0 } else { 0.0 },
        ));
        let skip = tape.constant(Tensor::zeros(&[1]));
        let y = x.selective_scan(delta, a, b, c, skip).unwrap().value();
        let mut run = 0.0;
        for t in 0..l {
            run += (t * t) as f64;
            assert_eq!(y.data()[t], run);
        }
    }

    #[test]
    fn scan_rejects_non_finite() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 1], vec![f64::NAN]).unwrap());
        let one = |s: &[usize]| tape.constant(Tensor::ones(s));
        let err = x
            .selective_scan(
                one(&[1, 1]),
                one(&[1, 1]),
                one(&[1, 1]),
                one(&[1, 1]),
                one(&[1]),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn init_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = S6Parameters::init(8, 4, 2, &mut rng);
        assert_eq!(p.a_log.at(&[5, 2]), 3f64.ln());
        let s = selective_scan_tensor(&Tensor::uniform(&[7, 8], 1.0, &mut rng), &p).unwrap();
        assert!(s.all_finite());
        for &b in p.dt_bias.data() {
            let dt = softplus(b);
            assert!((1e-3..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        assert!((inverse_softplus(softplus(0.37)) - 0.37).abs() < 1e-12);
    }
}
