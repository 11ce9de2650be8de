//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Options for [`check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Probe at most this many coordinates per input (chosen with a fixed
    /// seed); `None` probes all of them.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_coords: None,
        }
    }
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over
/// the probed coordinates of one input.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub rel_error: f64,
    pub probed: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.len() != 1 {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar `f` at `inputs` with
/// central differences.
pub fn check<F>(inputs: &[Tensor], f: F, opts: GradCheck) -> Result<Vec<InputReport>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    f(&tape, &vars)?.backward()?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => {
                let mut c = sample(&mut rng, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for &c in &coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[c] = orig - opts.step;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[c] = orig;
            let num = (fp - fm) / (2.0 * opts.step);
            let an = analytic[i].data()[c];
            diff += (an - num) * (an - num);
            na += an * an;
            nn += num * num;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel_error = if denom < 1e-12 {
            diff.sqrt()
        } else {
            diff.sqrt() / denom
        };
        reports.push(InputReport {
            index: i,
            rel_error,
            probed: coords.len(),
        });
    }
    Ok(reports)
}

/// Largest relative error across all inputs.
pub fn max_rel_error<F>(inputs: &[Tensor], f: F, opts: GradCheck) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(check(inputs, f, opts)?
        .iter()
        .fold(0.0, |m, r| m.max(r.rel_error)))
}
