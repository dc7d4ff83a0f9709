use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Step-wise learning-rate decay by `gamma` at each milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Option<Tensor<S>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            sq += g
                .data()
                .iter()
                .map(|x| x.as_f64() * x.as_f64())
                .sum::<f64>();
        }
        let clip = match self.grad_clip {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let step = S::lit(lr / bc1);
        let (inv_bc2, eps, clip) = (S::lit(1.0 / bc2), S::lit(self.eps), S::lit(clip));
        for (i, (pid, g)) in store
            .ids()
            .zip(grads)
            .collect::<Vec<_>>()
            .into_iter()
            .enumerate()
        {
            let Some(g) = g else { continue };
            let p = store.get_mut(pid);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj * clip;
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                *w -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
