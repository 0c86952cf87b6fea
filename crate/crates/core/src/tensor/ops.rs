use rand::Rng;

use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of a pooling pass, kept for inspection in tests.
pub struct PoolOutput<'t, T> {
    pub output: Var<'t, T>,
    /// Flat input index chosen for each output element.
    pub argmax: Vec<usize>,
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn nchw(op: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!("{op}: expected [N, C, H, W], got {shape:?}"))),
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let n_cols = self.col_cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                img[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let n_cols = self.col_cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            let idx = (ci * self.h + iy as usize) * self.w + ix as usize;
                            img[idx] = img[idx] + src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape("add", &a, &b)?;
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
            )?
        };
        self.tape().push(
            "add",
            out,
            &[self, other],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    /// Skip-connection sum. Spatial extents must agree; channel mismatches
    /// are resolved by the caller with a 1×1 projection convolution.
    pub fn residual_add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() == 4 && sb.len() == 4 && (sa[0] != sb[0] || sa[2..] != sb[2..]) {
            return Err(Error::dim(format!(
                "residual_add: incompatible spatial dims {sa:?} vs {sb:?}"
            )));
        }
        if sa != sb {
            return Err(Error::dim(format!(
                "residual_add: shapes {sa:?} and {sb:?} need a projection"
            )));
        }
        self.add(other)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape("mul", &a, &b)?;
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
            )?
        };
        self.tape().push(
            "mul",
            out,
            &[self, other],
            Box::new(|g, xs, _| {
                let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * xs[1].data()[i]);
                let gb = Tensor::from_fn(g.shape(), |i| g.data()[i] * xs[0].data()[i]);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn scale(self, factor: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v * factor);
        self.tape().push(
            "scale",
            out,
            &[self],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * factor))]),
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape().push(
            "sum",
            out,
            &[self],
            Box::new(|g, xs, _| vec![Some(Tensor::full(xs[0].shape(), g.data()[0]))]),
        )
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v.max(T::zero()));
        self.tape().push(
            "relu",
            out,
            &[self],
            Box::new(|g, xs, _| {
                let x = xs[0].data();
                vec![Some(Tensor::from_fn(g.shape(), |i| {
                    if x[i] > T::zero() {
                        g.data()[i]
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().clone().reshape(shape)?;
        self.tape().push(
            "reshape",
            out,
            &[self],
            Box::new(|g, xs, _| vec![Some(g.clone().reshape(xs[0].shape()).expect("same size"))]),
        )
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[F, C, kh, kw]` kernel.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        let (xs, ks) = (self.shape(), kernel.shape());
        let (n, c, h, w) = nchw("conv2d input", &xs)?;
        let (f, kc, kh, kw) = nchw("conv2d kernel", &ks)?;
        if kc != c || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: input {xs:?} incompatible with kernel {ks:?} (padding {padding})"
            )));
        }
        let geo = ConvGeometry {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
        let mut cols = vec![T::zero(); n * rows * cols_n];
        let mut out = vec![T::zero(); n * f * cols_n];
        {
            let x = self.value();
            let k = kernel.value();
            for b in 0..n {
                let col = &mut cols[b * rows * cols_n..(b + 1) * rows * cols_n];
                geo.im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], col);
                T::gemm(
                    f,
                    rows,
                    cols_n,
                    k.data(),
                    false,
                    col,
                    false,
                    &mut out[b * f * cols_n..(b + 1) * f * cols_n],
                    false,
                );
            }
        }
        let out = Tensor::new(vec![n, f, geo.oh, geo.ow], out)?;
        self.tape().push(
            "conv2d",
            out,
            &[self, kernel],
            Box::new(move |g, inputs, _| {
                let k = inputs[1];
                let mut gk = vec![T::zero(); k.len()];
                let mut gx = vec![T::zero(); n * c * h * w];
                let mut gcol = vec![T::zero(); rows * cols_n];
                for b in 0..n {
                    let gb = &g.data()[b * f * cols_n..(b + 1) * f * cols_n];
                    let col = &cols[b * rows * cols_n..(b + 1) * rows * cols_n];
                    T::gemm(f, cols_n, rows, gb, false, col, true, &mut gk, true);
                    T::gemm(rows, f, cols_n, k.data(), true, gb, false, &mut gcol, false);
                    geo.col2im(&gcol, &mut gx[b * c * h * w..(b + 1) * c * h * w]);
                }
                vec![
                    Some(Tensor::new(inputs[0].shape().to_vec(), gx).expect("input shape")),
                    Some(Tensor::new(k.shape().to_vec(), gk).expect("kernel shape")),
                ]
            }),
        )
    }

    /// Adds a per-channel bias `[C]` to `[N, C, H, W]`.
    pub fn add_channel_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (n, c, h, w) = nchw("add_channel_bias", &self.shape())?;
        if bias.shape() != [c] {
            return Err(Error::dim(format!(
                "add_channel_bias: bias {:?} for {c} channels",
                bias.shape()
            )));
        }
        let hw = h * w;
        let out = {
            let x = self.value();
            let bv = bias.value();
            Tensor::from_fn(x.shape(), |i| x.data()[i] + bv.data()[(i / hw) % c])
        };
        self.tape().push(
            "add_channel_bias",
            out,
            &[self, bias],
            Box::new(move |g, _, _| {
                let mut gb = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        gb[ch] = gb[ch] + g.data()[base..base + hw].iter().copied().sum::<T>();
                    }
                }
                vec![Some(g.clone()), Some(Tensor::new(vec![c], gb).expect("bias"))]
            }),
        )
    }

    /// Max pooling over square windows. Ties route the gradient to the
    /// first maximal element in row-major window order.
    pub fn maxpool2d(self, window: usize, stride: usize) -> Result<PoolOutput<'t, T>> {
        let xs = self.shape();
        let (n, c, h, w) = nchw("maxpool2d", &xs)?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("maxpool2d: window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::dim(format!(
                "maxpool2d: window {window} larger than input {xs:?}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        {
            let x = self.value();
            let x = x.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + oy * stride * w + ox * stride;
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let routes = argmax.clone();
        let output = self.tape().push(
            "maxpool2d",
            Tensor::new(vec![n, c, oh, ow], out)?,
            &[self],
            Box::new(move |g, inputs, _| {
                let mut gx = Tensor::zeros(inputs[0].shape());
                let d = gx.data_mut();
                for (&src, &gv) in routes.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                vec![Some(gx)]
            }),
        )?;
        Ok(PoolOutput { output, argmax })
    }

    /// Batch normalization with batch statistics over `N, H, W`. Returns
    /// the normalized output together with the per-channel batch mean and
    /// (biased) variance.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = nchw("batch_norm", &self.shape())?;
        check_affine(c, &gamma.shape(), &beta.shape())?;
        let hw = h * w;
        let m = T::of_usize(n * hw);
        let (mean, var, xhat) = {
            let x = self.value();
            let x = x.data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    s = s + x[base..base + hw].iter().copied().sum::<T>();
                }
                mean[ch] = s / m;
                let mut v = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    v = v + x[base..base + hw]
                        .iter()
                        .map(|&xi| (xi - mean[ch]) * (xi - mean[ch]))
                        .sum::<T>();
                }
                var[ch] = v / m;
            }
            let xhat: Vec<T> = (0..x.len())
                .map(|i| {
                    let ch = (i / hw) % c;
                    (x[i] - mean[ch]) / (var[ch] + eps).sqrt()
                })
                .collect();
            (mean, var, xhat)
        };
        let out = {
            let gv = gamma.value();
            let bv = beta.value();
            Tensor::new(
                vec![n, c, h, w],
                xhat.iter()
                    .enumerate()
                    .map(|(i, &xh)| {
                        let ch = (i / hw) % c;
                        gv.data()[ch] * xh + bv.data()[ch]
                    })
                    .collect(),
            )?
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.tape().push(
            "batch_norm",
            out,
            &[self, gamma, beta],
            Box::new(move |g, inputs, _| {
                let gamma = inputs[1].data();
                let g = g.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (&gi, &xh)) in g.iter().zip(&xhat).enumerate() {
                    let ch = (i / hw) % c;
                    sum_g[ch] = sum_g[ch] + gi;
                    sum_gx[ch] = sum_gx[ch] + gi * xh;
                }
                let gx: Vec<T> = (0..g.len())
                    .map(|i| {
                        let ch = (i / hw) % c;
                        gamma[ch] * inv_std[ch] / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                    })
                    .collect();
                vec![
                    Some(Tensor::new(inputs[0].shape().to_vec(), gx).expect("input shape")),
                    Some(Tensor::new(vec![c], sum_gx).expect("gamma")),
                    Some(Tensor::new(vec![c], sum_g).expect("beta")),
                ]
            }),
        )?;
        Ok((y, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<'t, T>> {
        let (_, c, h, w) = nchw("batch_norm", &self.shape())?;
        check_affine(c, &gamma.shape(), &beta.shape())?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm: running statistics do not match channels"));
        }
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let out = {
            let x = self.value();
            let gv = gamma.value();
            let bv = beta.value();
            Tensor::from_fn(x.shape(), |i| {
                let ch = (i / hw) % c;
                gv.data()[ch] * (x.data()[i] - mean[ch]) * inv_std[ch] + bv.data()[ch]
            })
        };
        self.tape().push(
            "batch_norm_eval",
            out,
            &[self, gamma, beta],
            Box::new(move |g, inputs, _| {
                let (x, gamma) = (inputs[0].data(), inputs[1].data());
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                let gx = Tensor::from_fn(g.shape(), |i| {
                    let ch = (i / hw) % c;
                    gg[ch] = gg[ch] + g.data()[i] * (x[i] - mean[ch]) * inv_std[ch];
                    gb[ch] = gb[ch] + g.data()[i];
                    g.data()[i] * gamma[ch] * inv_std[ch]
                });
                vec![
                    Some(gx),
                    Some(Tensor::new(vec![c], gg).expect("gamma")),
                    Some(Tensor::new(vec![c], gb).expect("beta")),
                ]
            }),
        )
    }

    /// Inverted dropout. Eval mode and `rate == 0` are the identity and
    /// draw nothing from `rng`.
    pub fn dropout(self, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(self);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value().len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = {
            let x = self.value();
            Tensor::from_fn(x.shape(), |i| x.data()[i] * mask[i])
        };
        self.tape().push(
            "dropout",
            out,
            &[self],
            Box::new(move |g, _, _| vec![Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * mask[i]))]),
        )
    }
}

fn check_affine(c: usize, gamma: &[usize], beta: &[usize]) -> Result<()> {
    if gamma != [c] || beta != [c] {
        return Err(Error::dim(format!(
            "batch_norm: gamma {gamma:?} / beta {beta:?} do not match {c} channels"
        )));
    }
    Ok(())
}
