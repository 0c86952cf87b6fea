use serde::{Deserialize, Serialize};

use super::{Param, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Param<T>]) -> Self {
        AdamState {
            config,
            first: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears the gradients.
    /// All gradients are validated before anything is modified.
    pub fn step(&mut self, params: &mut [Param<T>]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.first) {
            match &p.grad {
                None => return Err(Error::MissingGradient(p.name.clone())),
                Some(g) if g.shape() != m.shape() => {
                    return Err(Error::dim(format!(
                        "gradient for `{}` has shape {:?}, parameter {:?}",
                        p.name,
                        g.shape(),
                        m.shape()
                    )))
                }
                Some(g) => g.check_finite(&format!("gradient of `{}`", p.name))?,
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.take().expect("validated above");
            let w = p.value.data_mut();
            for (((wi, mi), vi), &gi) in w
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *wi = *wi - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.value.check_finite(&format!("adam update of `{}`", p.name))?;
        }
        Ok(())
    }
}
