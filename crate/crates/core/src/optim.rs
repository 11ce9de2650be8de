//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::net::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            step: 0,
            m: zeros(),
            v: zeros(),
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.tensors())
    }

    /// One update in place: `p ← p·(1 − lr·wd)`, then the bias-corrected
    /// Adam step. A non-finite gradient aborts before anything is touched.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[&str],
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::dim("adamw", "parameters", self.m.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).copied().unwrap_or("?");
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(
                    "adamw",
                    name,
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * wd;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + (1.0 - b1) * gj;
                vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
                let mhat = md[j] / c1;
                let vhat = vd[j] / c2;
                pd[j] = pd[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Updates every tensor of `store`.
    pub fn step_store(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        self.step(store.tensors_mut(), grads, &names, lr, wd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_only() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[Tensor::scalar(0.0)], &["w"], 0.01, 1e-4)
            .unwrap();
        assert!((p[0].item() - 0.999999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.2] {
            let mut p = vec![Tensor::scalar(0.5)];
            let mut opt = AdamW::new(&p);
            opt.step(&mut p, &[Tensor::scalar(g)], &["w"], 0.01, 0.0)
                .unwrap();
            let delta = p[0].item() - 0.5;
            assert!((delta.abs() - 0.01).abs() < 1e-8);
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn rejects_non_finite_gradient_by_name() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut opt = AdamW::new(&p);
        let err = opt
            .step(
                &mut p,
                &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)],
                &["a", "enc.w"],
                0.1,
                0.0,
            )
            .unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(opt.step, 0);
    }
}
