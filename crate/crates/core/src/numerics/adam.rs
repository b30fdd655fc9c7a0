use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

/// Adam with bias correction. The learning rate is supplied per step so the
/// trainers own their schedules.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor<f64>>,
    v: BTreeMap<String, Tensor<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<f64>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<f64>> {
        self.v.get(name)
    }

    /// One update over every parameter that has an entry in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.numel() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let shape = p.shape().to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g).enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                let next = *w as f64 - lr * mhat / (vhat.sqrt() + self.eps);
                if !next.is_finite() {
                    return Err(Error::NonFinite { op: "adam_step" });
                }
                *w = next as f32;
            }
        }
        Ok(())
    }
}
