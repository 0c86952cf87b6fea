//! Capsule primitives: the squash nonlinearity, routing by agreement,
//! fully connected capsule layers, capsule lengths as class probabilities,
//! and the weighted binary cross-entropy losses used by both stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Clamp applied to capsule lengths before taking logarithms.
pub const LENGTH_EPS: f64 = 1e-7;

/// Capsule activations, `[n, d]` or batched `[B, n, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleTensor<T> {
    values: Tensor<T>,
}

impl<T: Real> CapsuleTensor<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        match values.shape().len() {
            2 | 3 => Ok(CapsuleTensor { values }),
            _ => Err(Error::dim(format!(
                "capsules must be [n, d] or [B, n, d], got {:?}",
                values.shape()
            ))),
        }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn capsules(&self) -> usize {
        let s = self.values.shape();
        s[s.len() - 2]
    }

    pub fn dim(&self) -> usize {
        *self.values.shape().last().expect("rank checked")
    }

    /// Euclidean norm of every capsule, flattened over the batch.
    pub fn norms(&self) -> Vec<T> {
        self.values
            .data()
            .chunks(self.dim())
            .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingConfig {
    pub iterations: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig { iterations: 3 }
    }
}

impl RoutingConfig {
    pub fn new(iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::invalid("routing needs at least one iteration"));
        }
        Ok(RoutingConfig { iterations })
    }
}

fn squash_in_place<T: Real>(v: &mut [T]) {
    let n2: T = v.iter().map(|&x| x * x).sum();
    if n2 == T::zero() {
        return;
    }
    let factor = n2.sqrt() / (T::one() + n2);
    for x in v {
        *x = *x * factor;
    }
}

/// `v = (|s|² / (1 + |s|²)) · s / |s|` per capsule; zero maps to zero.
pub fn squash<T: Real>(s: &CapsuleTensor<T>) -> CapsuleTensor<T> {
    let mut out = s.values.clone();
    let d = s.dim();
    for chunk in out.data_mut().chunks_mut(d) {
        squash_in_place(chunk);
    }
    CapsuleTensor { values: out }
}

/// Outcome of routing by agreement on one batch.
#[derive(Clone, Debug)]
pub struct Routing<T> {
    /// `[B, n_out, d]` squashed outputs of the final iteration.
    pub outputs: Tensor<T>,
    /// `[B, n_in, n_out]` couplings used in the final iteration.
    pub couplings: Tensor<T>,
    /// Couplings after every softmax, one entry per iteration.
    pub history: Vec<Tensor<T>>,
}

fn predictions_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n_in, n_out, d] => Ok((1, n_in, n_out, d)),
        [b, n_in, n_out, d] => Ok((b, n_in, n_out, d)),
        _ => Err(Error::dim(format!(
            "predictions must be [n_in, n_out, d] or [B, n_in, n_out, d], got {shape:?}"
        ))),
    }
}

/// Iterative routing by agreement over prediction vectors
/// `[n_in, n_out, d]` (or batched `[B, n_in, n_out, d]`).
pub fn route<T: Real>(predictions: &Tensor<T>, cfg: RoutingConfig) -> Result<Routing<T>> {
    let (batch, n_in, n_out, d) = predictions_dims(predictions.shape())?;
    if cfg.iterations == 0 {
        return Err(Error::invalid("routing needs at least one iteration"));
    }
    let u = predictions.data();
    let mut logits = vec![T::zero(); batch * n_in * n_out];
    let mut couplings = vec![T::zero(); batch * n_in * n_out];
    let mut outputs = vec![T::zero(); batch * n_out * d];
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        for (lrow, crow) in logits.chunks(n_out).zip(couplings.chunks_mut(n_out)) {
            softmax(lrow, crow);
        }
        history.push(Tensor::new(vec![batch, n_in, n_out], couplings.clone())?);
        outputs.iter_mut().for_each(|x| *x = T::zero());
        for b in 0..batch {
            for i in 0..n_in {
                for j in 0..n_out {
                    let c = couplings[(b * n_in + i) * n_out + j];
                    let src = &u[((b * n_in + i) * n_out + j) * d..][..d];
                    let dst = &mut outputs[(b * n_out + j) * d..][..d];
                    for (o, &p) in dst.iter_mut().zip(src) {
                        *o = *o + c * p;
                    }
                }
            }
        }
        for cap in outputs.chunks_mut(d) {
            squash_in_place(cap);
        }
        if iter + 1 == cfg.iterations {
            break;
        }
        for b in 0..batch {
            for i in 0..n_in {
                for j in 0..n_out {
                    let pred = &u[((b * n_in + i) * n_out + j) * d..][..d];
                    let v = &outputs[(b * n_out + j) * d..][..d];
                    let agreement: T = pred.iter().zip(v).map(|(&a, &b)| a * b).sum();
                    let l = &mut logits[(b * n_in + i) * n_out + j];
                    *l = *l + agreement;
                }
            }
        }
    }
    let out_shape = if predictions.shape().len() == 3 {
        vec![n_out, d]
    } else {
        vec![batch, n_out, d]
    };
    Ok(Routing {
        outputs: Tensor::new(out_shape, outputs)?,
        couplings: Tensor::new(vec![batch, n_in, n_out], couplings)?,
        history,
    })
}

fn softmax<T: Real>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Routing by agreement returning the output capsules only.
pub fn routing_by_agreement<T: Real>(
    predictions: &Tensor<T>,
    cfg: RoutingConfig,
) -> Result<CapsuleTensor<T>> {
    CapsuleTensor::new(route(predictions, cfg)?.outputs)
}

/// Value-level capsule layer: `û_ij = W_ij · u_i`, then routing.
pub fn capsule_layer<T: Real>(
    input: &CapsuleTensor<T>,
    weights: &Tensor<T>,
    cfg: RoutingConfig,
) -> Result<CapsuleTensor<T>> {
    let unbatched = input.values.shape().len() == 2;
    let u = if unbatched {
        let s = input.values.shape();
        input.values.clone().reshape(&[1, s[0], s[1]])?
    } else {
        input.values.clone()
    };
    let predictions = predict_values(&u, weights)?;
    let mut out = route(&predictions, cfg)?.outputs;
    if unbatched {
        let s = out.shape().to_vec();
        out = out.reshape(&s[1..])?;
    }
    CapsuleTensor::new(out)
}

/// Per-capsule Euclidean lengths; not normalized across classes.
pub fn class_probabilities<T: Real>(caps: &CapsuleTensor<T>) -> Vec<T> {
    caps.norms()
}

struct PredictDims {
    batch: usize,
    n_in: usize,
    n_out: usize,
    d_out: usize,
    d_in: usize,
}

fn predict_dims(u: &[usize], w: &[usize]) -> Result<PredictDims> {
    match (u, w) {
        (&[batch, n_in, d_in], &[wn_in, n_out, d_out, wd_in]) if n_in == wn_in && d_in == wd_in => {
            Ok(PredictDims {
                batch,
                n_in,
                n_out,
                d_out,
                d_in,
            })
        }
        _ => Err(Error::dim(format!(
            "capsule input {u:?} incompatible with weights {w:?}"
        ))),
    }
}

fn predict_values<T: Real>(u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = predict_dims(u.shape(), w.shape())?;
    let PredictDims {
        batch,
        n_in,
        n_out,
        d_out,
        d_in,
    } = dims;
    let (u, w) = (u.data(), w.data());
    let mut out = vec![T::zero(); batch * n_in * n_out * d_out];
    for b in 0..batch {
        for i in 0..n_in {
            let ui = &u[(b * n_in + i) * d_in..][..d_in];
            for j in 0..n_out {
                let wij = &w[(i * n_out + j) * d_out * d_in..][..d_out * d_in];
                let dst = &mut out[((b * n_in + i) * n_out + j) * d_out..][..d_out];
                for (k, o) in dst.iter_mut().enumerate() {
                    *o = wij[k * d_in..(k + 1) * d_in]
                        .iter()
                        .zip(ui)
                        .map(|(&a, &x)| a * x)
                        .sum();
                }
            }
        }
    }
    Tensor::new(vec![batch, n_in, n_out, d_out], out)
}

impl<'t, T: Real> Var<'t, T> {
    /// Per-capsule squash over the last axis.
    pub fn squash(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::dim("squash on rank-0 value"))?;
        let out = {
            let mut v = self.value().clone();
            for chunk in v.data_mut().chunks_mut(d) {
                squash_in_place(chunk);
            }
            v
        };
        self.tape().push(
            "squash",
            out,
            &[self],
            Box::new(move |g, xs, _| {
                let s = xs[0].data();
                let mut gs = vec![T::zero(); s.len()];
                for ((sc, gc), out) in s.chunks(d).zip(g.data().chunks(d)).zip(gs.chunks_mut(d)) {
                    let n2: T = sc.iter().map(|&x| x * x).sum();
                    if n2 == T::zero() {
                        continue;
                    }
                    let n = n2.sqrt();
                    let one = T::one();
                    let f = n / (one + n2);
                    let df_over_n = (one - n2) / ((one + n2) * (one + n2)) / n;
                    let gdot: T = sc.iter().zip(gc).map(|(&a, &b)| a * b).sum();
                    for ((o, &si), &gi) in out.iter_mut().zip(sc).zip(gc) {
                        *o = f * gi + df_over_n * gdot * si;
                    }
                }
                vec![Some(Tensor::new(xs[0].shape().to_vec(), gs).expect("shape"))]
            }),
        )
    }

    /// Capsule predictions `û[b, i, j] = W[i, j] · u[b, i]` from
    /// `u: [B, n_in, d_in]` and `W: [n_in, n_out, d_out, d_in]`.
    pub fn capsule_predict(self, weights: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = predict_values(&self.value(), &weights.value())?;
        let PredictDims {
            batch,
            n_in,
            n_out,
            d_out,
            d_in,
        } = predict_dims(&self.shape(), &weights.shape())?;
        self.tape().push(
            "capsule_predict",
            out,
            &[self, weights],
            Box::new(move |g, xs, _| {
                let (u, w, g) = (xs[0].data(), xs[1].data(), g.data());
                let mut gu = vec![T::zero(); u.len()];
                let mut gw = vec![T::zero(); w.len()];
                for b in 0..batch {
                    for i in 0..n_in {
                        let ui = &u[(b * n_in + i) * d_in..][..d_in];
                        for j in 0..n_out {
                            let wbase = (i * n_out + j) * d_out * d_in;
                            let gij = &g[((b * n_in + i) * n_out + j) * d_out..][..d_out];
                            for (k, &gk) in gij.iter().enumerate() {
                                let row = wbase + k * d_in;
                                for l in 0..d_in {
                                    gw[row + l] = gw[row + l] + gk * ui[l];
                                    let gi = &mut gu[(b * n_in + i) * d_in + l];
                                    *gi = *gi + gk * w[row + l];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(xs[0].shape().to_vec(), gu).expect("u shape")),
                    Some(Tensor::new(xs[1].shape().to_vec(), gw).expect("w shape")),
                ]
            }),
        )
    }

    /// `s[b, j] = Σ_i c[b, i, j] · û[b, i, j]` with constant couplings.
    pub fn coupled_sum(self, couplings: &Tensor<T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (batch, n_in, n_out, d) = match *shape.as_slice() {
            [b, i, j, d] => (b, i, j, d),
            _ => return Err(Error::dim(format!("coupled_sum on {shape:?}"))),
        };
        if couplings.shape() != [batch, n_in, n_out] {
            return Err(Error::dim(format!(
                "couplings {:?} for predictions {shape:?}",
                couplings.shape()
            )));
        }
        let c = couplings.data().to_vec();
        let out = {
            let u = self.value();
            let u = u.data();
            let mut s = vec![T::zero(); batch * n_out * d];
            for b in 0..batch {
                for i in 0..n_in {
                    for j in 0..n_out {
                        let cij = c[(b * n_in + i) * n_out + j];
                        let src = &u[((b * n_in + i) * n_out + j) * d..][..d];
                        let dst = &mut s[(b * n_out + j) * d..][..d];
                        for (o, &p) in dst.iter_mut().zip(src) {
                            *o = *o + cij * p;
                        }
                    }
                }
            }
            Tensor::new(vec![batch, n_out, d], s)?
        };
        self.tape().push(
            "coupled_sum",
            out,
            &[self],
            Box::new(move |g, xs, _| {
                let g = g.data();
                let mut gu = vec![T::zero(); xs[0].len()];
                for b in 0..batch {
                    for i in 0..n_in {
                        for j in 0..n_out {
                            let cij = c[(b * n_in + i) * n_out + j];
                            let src = &g[(b * n_out + j) * d..][..d];
                            let dst = &mut gu[((b * n_in + i) * n_out + j) * d..][..d];
                            for (o, &gv) in dst.iter_mut().zip(src) {
                                *o = cij * gv;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(xs[0].shape().to_vec(), gu).expect("shape"))]
            }),
        )
    }

    /// Differentiable capsule layer on `[B, n_in, d_in]`. Couplings are
    /// found by routing on the current prediction values and held constant
    /// for differentiation; gradients flow through the final weighted sum
    /// and squash.
    pub fn capsule_layer(self, weights: Var<'t, T>, cfg: RoutingConfig) -> Result<Var<'t, T>> {
        let predictions = self.capsule_predict(weights)?;
        let routing = route(&predictions.value(), cfg)?;
        predictions.coupled_sum(&routing.couplings)?.squash()
    }

    /// Capsule lengths over the last axis.
    pub fn capsule_lengths(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::dim("lengths on rank-0 value"))?;
        let out_shape = if shape.len() > 1 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let out = Tensor::new(
            out_shape,
            self.value()
                .data()
                .chunks(d)
                .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
                .collect(),
        )?;
        self.tape().push(
            "capsule_lengths",
            out,
            &[self],
            Box::new(move |g, xs, out| {
                let v = xs[0].data();
                let mut gv = vec![T::zero(); v.len()];
                for (k, ((vc, gc), &len)) in v
                    .chunks(d)
                    .zip(gv.chunks_mut(d))
                    .zip(out.data())
                    .enumerate()
                {
                    if len == T::zero() {
                        continue;
                    }
                    let scale = g.data()[k] / len;
                    for (o, &x) in gc.iter_mut().zip(vc) {
                        *o = scale * x;
                    }
                }
                vec![Some(Tensor::new(xs[0].shape().to_vec(), gv).expect("shape"))]
            }),
        )
    }

    /// Batch-mean of per-element weighted binary cross-entropy between
    /// lengths `[B, K]` and 0/1 targets, with lengths clamped to
    /// `[eps, 1 - eps]`. Clamped elements pass no gradient.
    pub fn weighted_bce(self, targets: &Tensor<T>, weights: &Tensor<T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if targets.shape() != shape.as_slice() || weights.shape() != shape.as_slice() {
            return Err(Error::dim(format!(
                "weighted_bce: lengths {shape:?}, targets {:?}, weights {:?}",
                targets.shape(),
                weights.shape()
            )));
        }
        let batch = T::of_usize(if shape.len() > 1 { shape[0] } else { 1 });
        let (y, w) = (targets.data().to_vec(), weights.data().to_vec());
        let loss = {
            let l = self.value();
            let total: T = l
                .data()
                .iter()
                .zip(&y)
                .zip(&w)
                .map(|((&li, &yi), &wi)| wi * bce(li, yi))
                .sum();
            total / batch
        };
        self.tape().push(
            "weighted_bce",
            Tensor::scalar(loss),
            &[self],
            Box::new(move |g, xs, _| {
                let eps = T::of(LENGTH_EPS);
                let scale = g.data()[0] / batch;
                let gl = Tensor::from_fn(xs[0].shape(), |i| {
                    let li = xs[0].data()[i];
                    if li <= eps || li >= T::one() - eps {
                        return T::zero();
                    }
                    let yi = y[i];
                    scale * w[i] * (-yi / li + (T::one() - yi) / (T::one() - li))
                });
                vec![Some(gl)]
            }),
        )
    }
}

fn bce<T: Real>(length: T, target: T) -> T {
    let eps = T::of(LENGTH_EPS);
    let l = length.max(eps).min(T::one() - eps);
    -(target * l.ln() + (T::one() - target) * (T::one() - l).ln())
}

/// Stage-1 loss weights: the negative-class term is scaled by
/// `N_pos / (N_neg + N_pos)` and the positive-class term by
/// `N_neg / (N_neg + N_pos)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub negative: f64,
    pub positive: f64,
}

impl LossWeights {
    pub fn from_counts(n_negative: usize, n_positive: usize) -> Result<Self> {
        let total = n_negative + n_positive;
        if total == 0 {
            return Err(Error::invalid("loss weights need at least one sample"));
        }
        Ok(LossWeights {
            negative: n_positive as f64 / total as f64,
            positive: n_negative as f64 / total as f64,
        })
    }
}

/// Stage-2 per-class weights in (COVID-19, CAP, Normal) order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; 3]);

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights([1.0, 5.0, 5.0])
    }
}

/// `w_neg · loss_neg + w_pos · loss_pos` for one slice, where the term for
/// the sample's own class is the binary cross-entropy over both capsule
/// lengths (capsule 0 = no infection, capsule 1 = infection).
pub fn weighted_binary_ce(lengths: [f64; 2], target: usize, weights: &LossWeights) -> f64 {
    let onehot = if target == 1 { [0.0, 1.0] } else { [1.0, 0.0] };
    let base: f64 = lengths.iter().zip(onehot).map(|(&l, y)| bce(l, y)).sum();
    if target == 1 {
        weights.positive * base
    } else {
        weights.negative * base
    }
}

/// `Σ_c weight_c · BCE(length_c, target_c)` over the three class capsules.
pub fn multiclass_weighted_bce(lengths: [f64; 3], one_hot: [f64; 3], weights: &ClassWeights) -> f64 {
    (0..3)
        .map(|c| weights.0[c] * bce(lengths[c], one_hot[c]))
        .sum()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tape;
    use crate::testutil::{grad_check, random};

    fn caps(shape: &[usize], v: &[f64]) -> CapsuleTensor<f64> {
        CapsuleTensor::new(Tensor::from_f64(shape, v).unwrap()).unwrap()
    }

    #[test]
    fn squash_reference_points() {
        let zero = squash(&caps(&[1, 3], &[0.0, 0.0, 0.0]));
        assert_eq!(zero.values().data(), &[0.0, 0.0, 0.0]);

        let unit = squash(&caps(&[1, 2], &[0.6, 0.8]));
        let v = unit.values().data();
        assert!((unit.norms()[0] - 0.5).abs() < 1e-12);
        assert!((v[0] / v[1] - 0.75).abs() < 1e-12);

        let big = squash(&caps(&[1, 2], &[6.0, 8.0]));
        assert!((big.norms()[0] - 100.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn single_iteration_couplings_are_uniform() {
        let preds = Tensor::from_fn(&[3, 4, 2], |i| (i as f64 * 0.37).sin());
        let r = route(&preds, RoutingConfig::new(1).unwrap()).unwrap();
        assert!(r.couplings.data().iter().all(|&c| (c - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_input_routes_to_squashed_predictions() {
        let preds = Tensor::from_fn(&[1, 3, 4], |i| (i as f64 * 0.91).cos());
        for iters in 1..5 {
            let out = routing_by_agreement(&preds, RoutingConfig::new(iters).unwrap()).unwrap();
            // with one input, every coupling row is a softmax over outputs but
            // each output sums only its own prediction, scaled by c_1j
            let r = route(&preds, RoutingConfig::new(iters).unwrap()).unwrap();
            for j in 0..3 {
                let c = r.couplings.data()[j];
                let scaled: Vec<f64> = preds.data()[j * 4..(j + 1) * 4].iter().map(|x| x * c).collect();
                let want = squash(&caps(&[1, 4], &scaled));
                for (a, b) in out.values().data()[j * 4..(j + 1) * 4].iter().zip(want.values().data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn agreeing_inputs_concentrate_coupling() {
        // Output 0: both inputs predict the same vector. Output 1: they disagree.
        let preds = Tensor::<f64>::from_f64(
            &[2, 2, 2],
            &[1.0, 0.5, 1.0, 0.0, 1.0, 0.5, -1.0, 0.0],
        )
        .unwrap();
        let r = route(&preds, RoutingConfig::default()).unwrap();
        let c = r.couplings.data();
        assert!(c[0] > c[1], "input 0 couplings {:?}", &c[0..2]);
        assert!(c[2] > c[3], "input 1 couplings {:?}", &c[2..4]);
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(RoutingConfig::new(0).is_err());
    }

    #[test]
    fn capsule_layer_identity_and_zero_weights() {
        let u = caps(&[1, 3], &[0.3, -1.2, 2.0]);
        let mut eye = vec![0.0; 9];
        for k in 0..3 {
            eye[k * 3 + k] = 1.0;
        }
        let w = Tensor::from_f64(&[1, 1, 3, 3], &eye).unwrap();
        let out = capsule_layer(&u, &w, RoutingConfig::default()).unwrap();
        assert_eq!(out.values(), squash(&u).values());

        let u = caps(&[4, 3], &[0.7; 12]);
        let zero = Tensor::zeros(&[4, 2, 5, 3]);
        let out = capsule_layer(&u, &zero, RoutingConfig::default()).unwrap();
        assert!(out.values().data().iter().all(|&v| v == 0.0));
        assert_eq!(out.values().shape(), &[2, 5]);
    }

    #[test]
    fn capsule_layer_shape_mismatch() {
        let u = caps(&[4, 3], &[0.1; 12]);
        let w = Tensor::<f64>::zeros(&[4, 2, 5, 2]);
        assert!(matches!(
            capsule_layer(&u, &w, RoutingConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn class_probabilities_are_raw_lengths() {
        assert_eq!(class_probabilities(&caps(&[2, 2], &[0.0; 4])), vec![0.0, 0.0]);
        let p = class_probabilities(&caps(&[3, 2], &[0.0, 0.9, 0.0, 0.0, 0.0, 0.0]));
        assert!((p[0] - 0.9).abs() < 1e-15 && p[1] == 0.0 && p[2] == 0.0);
    }

    #[test]
    fn stage_one_weights_from_dataset_counts() {
        let w = LossWeights::from_counts(18416, 4993).unwrap();
        assert!((w.negative - 4993.0 / 23409.0).abs() < 1e-15);
        assert!((w.negative - 0.21330).abs() < 1e-5);
        assert!((w.positive - 0.78670).abs() < 1e-5);
        let eq = LossWeights::from_counts(40, 40).unwrap();
        assert_eq!((eq.negative, eq.positive), (0.5, 0.5));
    }

    #[test]
    fn perfect_positive_prediction_has_vanishing_loss() {
        let w = LossWeights::from_counts(3, 1).unwrap();
        let loss = weighted_binary_ce([LENGTH_EPS, 1.0 - LENGTH_EPS], 1, &w);
        assert!(loss < 1e-6, "{loss}");
        assert!(weighted_binary_ce([0.4, 0.6], 1, &w) > loss);
    }

    #[test]
    fn multiclass_reference_values() {
        let cw = ClassWeights::default();
        let loss = multiclass_weighted_bce([0.5, 0.5, 0.5], [1.0, 0.0, 0.0], &cw);
        assert!((loss - 11.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 7.6246).abs() < 1e-4);

        let exact = multiclass_weighted_bce([1.0, 0.0, 0.0], [1.0, 0.0, 0.0], &cw);
        assert!(exact < 11.0 * 2.0 * LENGTH_EPS);

        let a = multiclass_weighted_bce([0.7, 0.2, 0.4], [1.0, 0.0, 0.0], &cw);
        let b = multiclass_weighted_bce([0.7, 0.4, 0.2], [1.0, 0.0, 0.0], &cw);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn squash_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random(&[3, 5, 4], &mut rng).map(|v| v * 2.0);
        let err = grad_check(vec![s], &|_, v| v[0].squash());
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn capsule_layer_gradient_single_iteration() {
        // One iteration: couplings are uniform and independent of the inputs,
        // so the stop-gradient path is the exact gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = random(&[2, 4, 4], &mut rng);
        let w = random(&[4, 2, 4, 4], &mut rng);
        let cfg = RoutingConfig::new(1).unwrap();
        let err = grad_check(vec![u, w], &move |_, v| v[0].capsule_layer(v[1], cfg));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn capsule_layer_gradient_with_frozen_couplings() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = random(&[2, 4, 4], &mut rng);
        let w = random(&[4, 2, 4, 4], &mut rng);
        let cfg = RoutingConfig::default();
        let frozen = {
            let tape = Tape::<f64>::new();
            let uv = tape.constant(u.clone()).unwrap();
            let wv = tape.constant(w.clone()).unwrap();
            let preds = uv.capsule_predict(wv).unwrap();
            let c = route(&preds.value(), cfg).unwrap().couplings;
            c
        };
        // the analytic path of capsule_layer at the base point
        let analytic = {
            let tape = Tape::<f64>::new();
            let uv = tape.param(u.clone()).unwrap();
            let wv = tape.param(w.clone()).unwrap();
            let a = uv.capsule_layer(wv, cfg).unwrap().sum().unwrap();
            let b = uv.capsule_predict(wv).unwrap().coupled_sum(&frozen).unwrap().squash().unwrap().sum().unwrap();
            let pair = (a.value().data()[0], b.value().data()[0]);
            pair
        };
        assert_eq!(analytic.0, analytic.1);
        let held = frozen.clone();
        let err = grad_check(vec![u.clone(), w.clone()], &move |_, v| {
            v[0].capsule_predict(v[1])?.coupled_sum(&held)?.squash()
        });
        assert!(err < 1e-4, "{err}");
        let err_layer = grad_check_at_base(u, w, cfg, &frozen);
        assert!(err_layer < 1e-4, "{err_layer}");
    }

    /// Compares capsule_layer's analytic gradient against finite differences
    /// of the same computation with couplings held at their base values.
    fn grad_check_at_base(u: Tensor<f64>, w: Tensor<f64>, cfg: RoutingConfig, frozen: &Tensor<f64>) -> f64 {
        let tape = Tape::<f64>::new();
        let uv = tape.param(u.clone()).unwrap();
        let wv = tape.param(w.clone()).unwrap();
        let loss = uv.capsule_layer(wv, cfg).unwrap().capsule_lengths().unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = [grads.get(uv).unwrap().clone(), grads.get(wv).unwrap().clone()];
        let eval = |u: &Tensor<f64>, w: &Tensor<f64>| {
            let tape = Tape::<f64>::new();
            let uv = tape.constant(u.clone()).unwrap();
            let wv = tape.constant(w.clone()).unwrap();
            let v = uv.capsule_predict(wv).unwrap().coupled_sum(frozen).unwrap().squash().unwrap();
            let l = v.capsule_lengths().unwrap().sum().unwrap();
            let out = l.value().data()[0];
            out
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for which in 0..2 {
            let base = if which == 0 { &u } else { &w };
            for i in 0..base.len() {
                let mut p = base.clone();
                p.data_mut()[i] += h;
                let mut m = base.clone();
                m.data_mut()[i] -= h;
                let num = if which == 0 {
                    (eval(&p, &w) - eval(&m, &w)) / (2.0 * h)
                } else {
                    (eval(&u, &p) - eval(&u, &m)) / (2.0 * h)
                };
                let a = analytic[which].data()[i];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-4));
            }
        }
        worst
    }

    #[test]
    fn lengths_and_bce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random(&[4, 3, 5], &mut rng);
        let targets = Tensor::from_fn(&[4, 3], |i| if i % 3 == i / 3 % 3 { 1.0 } else { 0.0 });
        let weights = Tensor::from_fn(&[4, 3], |i| [1.0, 5.0, 5.0][i % 3]);
        let err = grad_check(vec![s], &move |_, v| {
            v[0].squash()?.capsule_lengths()?.weighted_bce(&targets, &weights)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn tape_loss_matches_value_level_loss() {
        let tape = Tape::<f64>::new();
        let lengths = tape
            .constant(Tensor::from_f64(&[2, 3], &[0.5, 0.5, 0.5, 0.9, 0.2, 0.1]).unwrap())
            .unwrap();
        let targets = Tensor::from_f64(&[2, 3], &[1., 0., 0., 0., 1., 0.]).unwrap();
        let weights = Tensor::from_fn(&[2, 3], |i| [1.0, 5.0, 5.0][i % 3]);
        let loss = lengths.weighted_bce(&targets, &weights).unwrap().value().data()[0];
        let cw = ClassWeights::default();
        let want = (multiclass_weighted_bce([0.5, 0.5, 0.5], [1., 0., 0.], &cw)
            + multiclass_weighted_bce([0.9, 0.2, 0.1], [0., 1., 0.], &cw))
            / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn second_iteration_couplings_follow_first_pass_agreement() {
        // Independent recomputation: after one update the logits are the
        // agreements with the uniformly coupled outputs.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let (n_in, n_out, d) = (rng.gen_range(1..6), rng.gen_range(2..5), rng.gen_range(2..6));
            let u = random(&[n_in, n_out, d], &mut rng);
            let c = route(&u, RoutingConfig::new(2).unwrap()).unwrap().couplings;
            let first = routing_by_agreement(&u, RoutingConfig::new(1).unwrap()).unwrap();
            let v = first.values().data();
            for i in 0..n_in {
                let agree: Vec<f64> = (0..n_out)
                    .map(|j| (0..d).map(|k| u.data()[(i * n_out + j) * d + k] * v[j * d + k]).sum())
                    .collect();
                for a in 0..n_out {
                    for b in 0..n_out {
                        if agree[a] > agree[b] + 1e-12 {
                            assert!(c.data()[i * n_out + a] > c.data()[i * n_out + b]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn scaling_predictions_can_reorder_couplings() {
        // Squash saturates at different rates for outputs of different norm,
        // so rescaling every prediction can flip which output an input
        // couples to most strongly.
        let u = Tensor::<f64>::from_f64(
            &[2, 2, 2],
            &[-0.1, -1.2, -0.6, -0.5, -0.7, 0.6, -0.1, -0.6],
        )
        .unwrap();
        let coupling = |scale: f64| {
            let r = route(&u.map(|x| x * scale), RoutingConfig::default()).unwrap();
            (r.couplings.data()[0], r.couplings.data()[1])
        };
        let (a, b) = coupling(1.0);
        assert!(a < b, "{a} {b}");
        let (a, b) = coupling(10.0);
        assert!(a > b, "{a} {b}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn squash_norm_bound_and_direction(v in prop::collection::vec(-50.0f64..50.0, 1..9)) {
            let d = v.len();
            let s = caps(&[1, d], &v);
            let out = squash(&s);
            let n_in = s.norms()[0];
            let n_out = out.norms()[0];
            prop_assert!((0.0..1.0).contains(&n_out));
            if n_in > 0.0 {
                let cos: f64 = v.iter().zip(out.values().data()).map(|(a, b)| a * b).sum::<f64>()
                    / (n_in * n_out);
                prop_assert!((cos - 1.0).abs() < 1e-9);
                prop_assert!((n_out - n_in * n_in / (1.0 + n_in * n_in)).abs() < 1e-12);
            }
        }

        #[test]
        fn squash_norm_strictly_increasing(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let na = squash(&caps(&[1, 2], &[a * 0.6, a * 0.8])).norms()[0];
            let nb = squash(&caps(&[1, 2], &[b * 0.6, b * 0.8])).norms()[0];
            prop_assert_eq!(a < b, na < nb);
        }

        #[test]
        fn routing_couplings_are_distributions(
            n_in in 1usize..6, n_out in 1usize..5, d in 1usize..6, iters in 1usize..5, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random(&[n_in, n_out, d], &mut rng).map(|x| x * 3.0);
            let r = route(&u, RoutingConfig::new(iters).unwrap()).unwrap();
            prop_assert_eq!(r.history.len(), iters);
            for c in &r.history {
                for row in c.data().chunks(n_out) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|&x| x > 0.0));
                }
            }
        }

        #[test]
        fn loss_weights_sum_and_swap(n1 in 0usize..100_000, n2 in 0usize..100_000) {
            prop_assume!(n1 + n2 > 0);
            let w = LossWeights::from_counts(n1, n2).unwrap();
            let s = LossWeights::from_counts(n2, n1).unwrap();
            prop_assert!((w.negative + w.positive - 1.0).abs() < 1e-12);
            prop_assert_eq!(w.negative, s.positive);
            prop_assert_eq!(w.positive, s.negative);
        }

        #[test]
        fn losses_are_nonnegative(l in prop::array::uniform3(0.0f64..1.0), t in 0usize..3, p in 0.0f64..1.0) {
            let mut onehot = [0.0; 3];
            onehot[t] = 1.0;
            prop_assert!(multiclass_weighted_bce(l, onehot, &ClassWeights::default()) >= 0.0);
            let w = LossWeights::from_counts(3, 7).unwrap();
            prop_assert!(weighted_binary_ce([1.0 - p, p], t % 2, &w) >= 0.0);
        }
    }
}
