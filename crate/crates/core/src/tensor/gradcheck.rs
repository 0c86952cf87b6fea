//! Finite-difference gradient oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// A differentiable function of several inputs, built on a fresh tape.
pub type Forward = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Uniform entries in `[-1, 1)`.
pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Loss = Σ out ⊙ probe, so every output element contributes.
fn probe_loss(inputs: &[Tensor<f64>], f: &Forward, probe_seed: u64) -> Result<(f64, Vec<Tensor<f64>>)> {
    let tape = Tape::<f64>::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = tape.constant(random(&out.shape(), &mut rng))?;
    let loss = out.mul(probe)?.sum()?;
    let value = loss.value().data()[0];
    let grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, g))
}

/// Max elementwise relative error between analytic and central-difference
/// gradients (denominators floored at 1e-4). Each element is differenced
/// at steps 1e-5 and 1e-6 and the better agreement kept: a ReLU or
/// max-pool kink inside the wider stencil spoils only that step, while a
/// wrong backward disagrees at both.
pub fn grad_check(inputs: Vec<Tensor<f64>>, f: &Forward) -> Result<f64> {
    let (_, analytic) = probe_loss(&inputs, f, 99)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let a = analytic[k].data()[i];
            let mut best = f64::INFINITY;
            for h in [1e-5, 1e-6] {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (probe_loss(&plus, f, 99)?.0 - probe_loss(&minus, f, 99)?.0) / (2.0 * h);
                best = best.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
                if best < 1e-7 {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}
