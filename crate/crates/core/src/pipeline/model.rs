use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::capsule::RoutingConfig;
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, BatchStats, Mode, Param, Real, Tape, Tensor, Var};

/// Convolution and capsule sizes of one classifier stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSizes {
    pub channels: [usize; 4],
    pub strides: [usize; 4],
    pub kernel: usize,
    pub pool: usize,
    pub primary_dim: usize,
    /// `[count, dim]` of each hidden capsule layer.
    pub hidden_capsules: Vec<[usize; 2]>,
    pub class_dim: usize,
}

impl LayerSizes {
    pub fn stage1() -> Self {
        LayerSizes {
            channels: [16, 16, 32, 32],
            strides: [2, 1, 2, 1],
            kernel: 3,
            pool: 2,
            primary_dim: 8,
            hidden_capsules: vec![[16, 8], [8, 12]],
            class_dim: 16,
        }
    }

    /// Half the channels and capsules of stage 1.
    pub fn stage2() -> Self {
        LayerSizes {
            channels: [8, 8, 16, 16],
            hidden_capsules: vec![[8, 8], [4, 12]],
            ..Self::stage1()
        }
    }
}

/// Full description of a classifier. The layer order is fixed: four
/// convolutions with residual adds after the second and fourth, batch
/// norm, max-pool, dropout, primary capsules, hidden capsule layers and
/// the class capsules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_size: usize,
    pub classes: usize,
    pub dropout: f64,
    pub routing_iterations: usize,
    pub layers: LayerSizes,
}

impl Architecture {
    pub fn new(layers: LayerSizes, classes: usize, input_size: usize, dropout: f64, routing_iterations: usize) -> Self {
        Architecture {
            input_size,
            classes,
            dropout,
            routing_iterations,
            layers,
        }
    }

    fn conv_out(size: usize, kernel: usize, stride: usize) -> Option<usize> {
        let padded = size + 2 * (kernel / 2);
        (padded >= kernel).then(|| (padded - kernel) / stride + 1)
    }

    /// Spatial extent entering the pool, and after it.
    fn spatial(&self) -> Result<(usize, usize)> {
        let mut s = self.input_size;
        for (i, &stride) in self.layers.strides.iter().enumerate() {
            if stride == 0 {
                return Err(Error::Config(format!("conv{} stride must be positive", i + 1)));
            }
            s = Self::conv_out(s, self.layers.kernel, stride).ok_or_else(|| {
                Error::Config(format!("input_size {} too small for conv{}", self.input_size, i + 1))
            })?;
        }
        if self.layers.pool == 0 || s < self.layers.pool || s % self.layers.pool != 0 {
            return Err(Error::Config(format!(
                "input_size {} gives a {s}x{s} feature map that a {p}x{p} pool does not tile",
                self.input_size,
                p = self.layers.pool
            )));
        }
        Ok((s, s / self.layers.pool))
    }

    pub fn primary_capsules(&self) -> Result<usize> {
        let (_, s) = self.spatial()?;
        let values = self.layers.channels[3] * s * s;
        if self.layers.primary_dim == 0 || values % self.layers.primary_dim != 0 {
            return Err(Error::Config(format!(
                "{values} pooled features do not split into capsules of dim {}",
                self.layers.primary_dim
            )));
        }
        Ok(values / self.layers.primary_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.kernel % 2 == 0 {
            return Err(Error::Config("kernel must be odd".into()));
        }
        if self.layers.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.layers.strides[1] != 1 || self.layers.strides[3] != 1 {
            return Err(Error::Config(
                "conv2 and conv4 feed residual adds and must use stride 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.classes < 2 || self.layers.class_dim == 0 {
            return Err(Error::Config("need at least two class capsules".into()));
        }
        if self.layers.hidden_capsules.iter().any(|l| l.contains(&0)) {
            return Err(Error::Config("hidden capsule layers must be non-empty".into()));
        }
        RoutingConfig::new(self.routing_iterations).map_err(|e| Error::Config(e.to_string()))?;
        self.primary_capsules()?;
        Ok(())
    }

    /// `[n_in, d_in]` → `[n_out, d_out]` for every capsule layer.
    fn capsule_layers(&self) -> Result<Vec<([usize; 2], [usize; 2])>> {
        let mut prev = [self.primary_capsules()?, self.layers.primary_dim];
        let mut layers = Vec::new();
        for &next in self.layers.hidden_capsules.iter().chain(std::iter::once(&[self.classes, self.layers.class_dim])) {
            layers.push((prev, next));
            prev = next;
        }
        Ok(layers)
    }

    fn needs_projection(&self, layer: usize) -> bool {
        self.layers.channels[layer - 1] != self.layers.channels[layer]
    }
}

/// A capsule-network classifier with its parameters and batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsNet<T> {
    pub arch: Architecture,
    pub params: Vec<Param<T>>,
    pub bn: BatchNorm<T>,
}

/// Output of a forward pass: class-capsule lengths `[B, classes]` and, in
/// training mode, the batch-norm statistics to fold in after the step.
pub struct Forward<'t, T> {
    pub lengths: Var<'t, T>,
    pub stats: Option<BatchStats<T>>,
}

impl<T: Real> CapsNet<T> {
    /// Deterministic initialization from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let k = arch.layers.kernel;
        let mut c_in = 1;
        for (i, &c_out) in arch.layers.channels.iter().enumerate() {
            let bound = (6.0 / (c_in * k * k) as f64).sqrt();
            params.push(Param::new(
                format!("conv{}.weight", i + 1),
                Tensor::from_fn(&[c_out, c_in, k, k], |_| T::of(rng.gen_range(-bound..bound))),
            ));
            params.push(Param::new(format!("conv{}.bias", i + 1), Tensor::zeros(&[c_out])));
            c_in = c_out;
        }
        for layer in [1, 3] {
            if arch.needs_projection(layer) {
                let (c_in, c_out) = (arch.layers.channels[layer - 1], arch.layers.channels[layer]);
                let bound = (6.0 / c_in as f64).sqrt();
                params.push(Param::new(
                    format!("proj{}.weight", layer + 1),
                    Tensor::from_fn(&[c_out, c_in, 1, 1], |_| T::of(rng.gen_range(-bound..bound))),
                ));
            }
        }
        let c = arch.layers.channels[3];
        params.push(Param::new("bn.gamma", Tensor::ones(&[c])));
        params.push(Param::new("bn.beta", Tensor::zeros(&[c])));
        for (i, ([n_in, d_in], [n_out, d_out])) in arch.capsule_layers()?.into_iter().enumerate() {
            let std = n_out as f64 / ((n_in * d_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Defect(e.to_string()))?;
            params.push(Param::new(
                format!("caps{}.weight", i + 1),
                Tensor::from_fn(&[n_in, n_out, d_out, d_in], |_| T::of(normal.sample(&mut rng))),
            ));
        }
        Ok(CapsNet {
            bn: BatchNorm::new(c),
            arch,
            params,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Defect(format!("model has no parameter `{name}`")))
    }

    /// Forward pass on images `[B, 1, S, S]` with the parameters bound as
    /// `vars` (in `self.params` order).
    pub fn forward<'t>(
        &self,
        vars: &[Var<'t, T>],
        x: Var<'t, T>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Forward<'t, T>> {
        let arch = &self.arch;
        let shape = x.shape();
        let s = arch.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::dim(format!("expected images [B, 1, {s}, {s}], got {shape:?}")));
        }
        let var = |name: &str| self.index(name).map(|i| vars[i]);
        let pad = arch.layers.kernel / 2;
        let conv = |h: Var<'t, T>, i: usize| -> Result<Var<'t, T>> {
            h.conv2d(var(&format!("conv{i}.weight"))?, arch.layers.strides[i - 1], pad)?
                .add_channel_bias(var(&format!("conv{i}.bias"))?)?
                .relu()
        };
        let skip = |h: Var<'t, T>, layer: usize| -> Result<Var<'t, T>> {
            if arch.needs_projection(layer - 1) {
                h.conv2d(var(&format!("proj{layer}.weight"))?, 1, 0)
            } else {
                Ok(h)
            }
        };
        let h1 = conv(x, 1)?;
        let h2 = conv(h1, 2)?.residual_add(skip(h1, 2)?)?;
        let h3 = conv(h2, 3)?;
        let h4 = conv(h3, 4)?.residual_add(skip(h3, 4)?)?;
        let (h, stats) = self.bn.forward(h4, var("bn.gamma")?, var("bn.beta")?, mode)?;
        let h = h.maxpool2d(arch.layers.pool, arch.layers.pool)?.output;
        let h = h.dropout(arch.dropout, mode, rng)?;
        let batch = shape[0];
        let mut caps = h
            .reshape(&[batch, arch.primary_capsules()?, arch.layers.primary_dim])?
            .squash()?;
        let routing = RoutingConfig::new(arch.routing_iterations)?;
        for i in 1..=arch.layers.hidden_capsules.len() + 1 {
            caps = caps.capsule_layer(var(&format!("caps{i}.weight"))?, routing)?;
        }
        Ok(Forward {
            lengths: caps.capsule_lengths()?,
            stats,
        })
    }

    /// Class-capsule lengths for each image in `images` (flattened
    /// `S × S` slices), evaluated in batches with frozen statistics.
    pub fn predict(&self, images: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 32;
        let s = self.arch.input_size;
        let mut out = Vec::with_capacity(images.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in images.chunks(CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * s * s);
            for img in chunk {
                if img.len() != s * s {
                    return Err(Error::dim(format!(
                        "image has {} pixels, model expects {s}x{s}",
                        img.len()
                    )));
                }
                data.extend(img.iter().map(|&v| T::of(v as f64)));
            }
            let tape = Tape::new();
            let vars: Vec<_> = self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect::<Result<_>>()?;
            let x = tape.constant(Tensor::new(vec![chunk.len(), 1, s, s], data)?)?;
            let fwd = self.forward(&vars, x, Mode::Eval, &mut rng)?;
            let lengths = fwd.lengths.value();
            out.extend(
                lengths
                    .data()
                    .chunks(self.arch.classes)
                    .map(|c| c.iter().map(|v| v.as_f64()).collect()),
            );
        }
        Ok(out)
    }

    /// Same model with every value converted to `U`.
    pub fn cast<U: Real>(&self) -> Result<CapsNet<U>> {
        let mut bn = BatchNorm::new(self.bn.channels);
        if let Some((m, v)) = self.bn.running() {
            bn.set_running(
                m.iter().map(|x| U::of(x.as_f64())).collect(),
                v.iter().map(|x| U::of(x.as_f64())).collect(),
            )?;
        }
        Ok(CapsNet {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.value.cast()))
                .collect(),
            bn,
        })
    }
}
