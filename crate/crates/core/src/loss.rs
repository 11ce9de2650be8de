//! Focal + soft-Jaccard hybrid segmentation loss.
//!
//! Both terms take class probabilities `[K, H, W]` (softmax over axis 0) and
//! an integer target mask. They are recorded as single primitives with
//! hand-written adjoints.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower clamp applied to `p_t` inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Smoothing added to intersection and union in the Jaccard term.
pub const JACCARD_EPS: f64 = 1e-6;

/// Per-class focal weights `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::contract(format!(
                "class weights must be finite and non-negative: {alpha:?}"
            )));
        }
        if !alpha.iter().any(|&a| a > 0.0) {
            return Err(Error::contract(
                "at least one class weight must be positive",
            ));
        }
        Ok(ClassWeights(alpha))
    }

    pub fn uniform(classes: usize) -> Self {
        ClassWeights(vec![1.0; classes])
    }

    /// `α_c ∝ 1 / freq_c` over the classes that occur, rescaled to mean 1
    /// across those classes. Classes that never occur get weight 0.
    pub fn inverse_frequency<'a>(
        masks: impl IntoIterator<Item = &'a Mask>,
        classes: usize,
    ) -> Result<Self> {
        let mut counts = vec![0u64; classes];
        for m in masks {
            m.check_classes(classes)?;
            for (c, n) in counts.iter_mut().zip(m.histogram(classes)) {
                *c += n;
            }
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::contract(
                "inverse-frequency weights need at least one labelled pixel",
            ));
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|&n| if n == 0 { 0.0 } else { total as f64 / n as f64 })
            .collect();
        let present = counts.iter().filter(|&&n| n > 0).count() as f64;
        let mean = raw.iter().sum::<f64>() / present;
        ClassWeights::new(raw.into_iter().map(|a| a / mean).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_probs(op: &'static str, probs: &Tensor, target: &Mask) -> Result<(usize, usize)> {
    let s = probs.shape();
    if s.len() != 3 {
        return Err(Error::dim(op, "rank(probs)", 3, s.len()));
    }
    if s[1] != target.height() || s[2] != target.width() {
        return Err(Error::dim(
            op,
            "H,W",
            format!("{}x{}", target.height(), target.width()),
            format!("{}x{}", s[1], s[2]),
        ));
    }
    target.check_classes(s[0])?;
    let d = probs.data();
    if let Some(p) = d.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::contract(format!(
            "{op}: probability {p} outside [0, 1]"
        )));
    }
    let hw = s[1] * s[2];
    for i in 0..hw {
        let sum: f64 = (0..s[0]).map(|c| d[c * hw + i]).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "{op}: probabilities at pixel {i} sum to {sum}"
            )));
        }
    }
    Ok((s[0], hw))
}

/// `mean_i −α_t (1 − p_t)^γ ln p_t` with `t` the true class of pixel `i`.
pub fn focal_loss<'t>(
    probs: Var<'t>,
    target: &Mask,
    alpha: &ClassWeights,
    gamma: f64,
) -> Result<Var<'t>> {
    let p = probs.value();
    let (k, hw) = check_probs("focal_loss", &p, target)?;
    if alpha.len() != k {
        return Err(Error::dim("focal_loss", "alpha", k, alpha.len()));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::contract(format!(
            "focal gamma must be >= 0, got {gamma}"
        )));
    }
    let labels: Vec<usize> = target.labels().iter().map(|&l| l as usize).collect();
    let a = alpha.as_slice().to_vec();
    let mut total = 0.0;
    for (i, &t) in labels.iter().enumerate() {
        let pt = p.data()[t * hw + i];
        total += -a[t] * (1.0 - pt).powf(gamma) * pt.max(LOG_CLAMP).ln();
    }
    let n = hw as f64;
    let shape = p.shape().to_vec();
    Ok(probs.tape().custom(
        &[probs],
        Tensor::scalar(total / n),
        Box::new(move |g, _| {
            let scale = g.item() / n;
            let mut d = Tensor::zeros(&shape);
            for (i, &t) in labels.iter().enumerate() {
                let idx = t * hw + i;
                let pt = p.data()[idx];
                let log_p = pt.max(LOG_CLAMP).ln();
                let modulating = if gamma == 0.0 || pt >= 1.0 {
                    0.0
                } else {
                    -gamma * (1.0 - pt).powf(gamma - 1.0) * log_p
                };
                let log_term = if pt >= LOG_CLAMP {
                    (1.0 - pt).powf(gamma) / pt
                } else {
                    0.0
                };
                d.data_mut()[idx] = -a[t] * (modulating + log_term) * scale;
            }
            vec![Some(d)]
        }),
    ))
}

/// Classes counted by the Jaccard term: present in the target, or the
/// arg-max prediction at some pixel (first index wins ties).
fn jaccard_classes(p: &Tensor, target: &Mask, k: usize, hw: usize) -> Vec<bool> {
    let mut active = vec![false; k];
    for &l in target.labels() {
        active[l as usize] = true;
    }
    let d = p.data();
    for i in 0..hw {
        let mut best = 0;
        for c in 1..k {
            if d[c * hw + i] > d[best * hw + i] {
                best = c;
            }
        }
        active[best] = true;
    }
    active
}

/// `1 − mean_c (I_c + ε) / (U_c + ε)` with soft intersection
/// `I_c = Σ p_c y_c` and union `U_c = Σ p_c + Σ y_c − I_c`.
pub fn jaccard_loss<'t>(probs: Var<'t>, target: &Mask) -> Result<Var<'t>> {
    let p = probs.value();
    let (k, hw) = check_probs("jaccard_loss", &p, target)?;
    let active = jaccard_classes(&p, target, k, hw);
    let labels: Vec<usize> = target.labels().iter().map(|&l| l as usize).collect();
    let mut inter = vec![0.0; k];
    let mut mass = vec![0.0; k];
    let mut truth = vec![0.0; k];
    for c in 0..k {
        mass[c] = p.data()[c * hw..(c + 1) * hw].iter().sum();
    }
    for (i, &t) in labels.iter().enumerate() {
        inter[t] += p.data()[t * hw + i];
        truth[t] += 1.0;
    }
    let union: Vec<f64> = (0..k).map(|c| mass[c] + truth[c] - inter[c]).collect();
    let count = active.iter().filter(|&&a| a).count() as f64;
    let mean_ratio = (0..k)
        .filter(|&c| active[c])
        .map(|c| (inter[c] + JACCARD_EPS) / (union[c] + JACCARD_EPS))
        .sum::<f64>()
        / count;
    let shape = p.shape().to_vec();
    Ok(probs.tape().custom(
        &[probs],
        Tensor::scalar(1.0 - mean_ratio),
        Box::new(move |g, _| {
            let mut d = Tensor::zeros(&shape);
            let gd = g.item();
            for c in (0..k).filter(|&c| active[c]) {
                let u = union[c] + JACCARD_EPS;
                let i_ = inter[c] + JACCARD_EPS;
                // ∂ratio/∂p = (y·u − i·(1 − y)) / u²
                let off = -i_ / (u * u);
                let on = 1.0 / u;
                let row = &mut d.data_mut()[c * hw..(c + 1) * hw];
                for (px, v) in row.iter_mut().enumerate() {
                    let dr = if labels[px] == c { on } else { off };
                    *v = -gd * dr / count;
                }
            }
            vec![Some(d)]
        }),
    ))
}

/// Focal term plus Jaccard term.
pub fn hybrid_loss<'t>(
    probs: Var<'t>,
    target: &Mask,
    alpha: &ClassWeights,
    gamma: f64,
) -> Result<Var<'t>> {
    focal_loss(probs, target, alpha, gamma)?.add(jaccard_loss(probs, target)?)
}

/// Mean categorical cross-entropy `mean_i −ln p_t`.
pub fn cross_entropy<'t>(probs: Var<'t>, target: &Mask) -> Result<Var<'t>> {
    let k = probs.shape().first().copied().unwrap_or(0);
    focal_loss(probs, target, &ClassWeights::uniform(k), 0.0)
}

/// Which objective a training run minimizes on each head.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Hybrid { alpha: ClassWeights, gamma: f64 },
    CrossEntropy,
}

impl Objective {
    pub fn apply<'t>(&self, probs: Var<'t>, target: &Mask) -> Result<Var<'t>> {
        match self {
            Objective::Hybrid { alpha, gamma } => hybrid_loss(probs, target, alpha, *gamma),
            Objective::CrossEntropy => cross_entropy(probs, target),
        }
    }
}

/// Evaluates the hybrid loss on plain probabilities.
pub fn hybrid_loss_value(
    probs: &Tensor,
    target: &Mask,
    alpha: &ClassWeights,
    gamma: f64,
) -> Result<f64> {
    let tape = Tape::new();
    Ok(
        hybrid_loss(tape.constant(probs.clone()), target, alpha, gamma)?
            .value()
            .item(),
    )
}
