use serde::{Deserialize, Serialize};

use super::{Mode, Real, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics for one batch-norm layer. The affine parameters are
/// owned by the model's parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    running: Option<(Vec<T>, Vec<T>)>,
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            running: None,
        }
    }

    pub fn running(&self) -> Option<(&[T], &[T])> {
        self.running.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_running(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        if mean.len() != self.channels || var.len() != self.channels {
            return Err(Error::dim("running statistics do not match channel count"));
        }
        self.running = Some((mean, var));
        Ok(())
    }

    /// Normalizes `x`. Train mode returns the batch statistics so the
    /// caller can fold them into the running averages with [`update`].
    ///
    /// [`update`]: BatchNorm::update
    pub fn forward<'t>(
        &self,
        x: Var<'t, T>,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mode: Mode,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        let eps = T::of(self.eps);
        match mode {
            Mode::Train => {
                let shape = x.shape();
                let count = shape.iter().product::<usize>() / shape.get(1).copied().unwrap_or(1);
                let (y, mean, var) = x.batch_norm_train(gamma, beta, eps)?;
                Ok((y, Some(BatchStats { mean, var, count })))
            }
            Mode::Eval => {
                let (mean, var) = self.running().ok_or(Error::UninitializedRunningStats)?;
                Ok((x.batch_norm_eval(gamma, beta, mean, var, eps)?, None))
            }
        }
    }

    /// `running = momentum · running + (1 − momentum) · batch`, with the
    /// unbiased batch variance. The first update adopts the batch values.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let unbias = if stats.count > 1 {
            T::of(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        let var: Vec<T> = stats.var.iter().map(|&v| v * unbias).collect();
        match &mut self.running {
            None => self.running = Some((stats.mean.clone(), var)),
            Some((rm, rv)) => {
                let mom = T::of(self.momentum);
                let rest = T::one() - mom;
                for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                    *r = mom * *r + rest * b;
                }
                for (r, &b) in rv.iter_mut().zip(&var) {
                    *r = mom * *r + rest * b;
                }
            }
        }
    }
}
