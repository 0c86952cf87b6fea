use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::CapsNet;
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Mode, Tape, Tensor};

/// Flattened single-channel slices with integer labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSlices {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSlices {
    pub fn new(size: usize) -> Self {
        LabeledSlices {
            size,
            ..Default::default()
        }
    }

    pub fn push(&mut self, image: &[f32], label: usize) -> Result<()> {
        if image.len() != self.size * self.size {
            return Err(Error::dim(format!(
                "slice has {} pixels, expected {}x{}",
                image.len(),
                self.size,
                self.size
            )));
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn extend(&mut self, other: &LabeledSlices) -> Result<()> {
        if other.size != self.size && !other.is_empty() {
            return Err(Error::dim(format!("slice size {} vs {}", other.size, self.size)));
        }
        self.pixels.extend_from_slice(&other.pixels);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> Vec<&[f32]> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// How the per-capsule BCE terms are weighted.
#[derive(Clone, Debug, PartialEq)]
pub enum LossWeighting {
    /// Every capsule term of a sample is scaled by the weight of the
    /// sample's class.
    BySampleClass(Vec<f64>),
    /// Capsule `c`'s term is scaled by weight `c`.
    ByCapsule(Vec<f64>),
}

impl LossWeighting {
    fn row(&self, label: usize, classes: usize) -> Vec<f32> {
        match self {
            LossWeighting::BySampleClass(w) => vec![w[label] as f32; classes],
            LossWeighting::ByCapsule(w) => w.iter().map(|&v| v as f32).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epoch_loss: Vec<f64>,
}

/// Minibatch Adam on the weighted capsule BCE. Deterministic in `seed`;
/// zero epochs leave the model untouched.
pub fn fit(
    model: &mut CapsNet<f32>,
    data: &LabeledSlices,
    weighting: &LossWeighting,
    settings: TrainSettings,
    seed: u64,
) -> Result<History> {
    let classes = model.classes();
    let s = model.arch.input_size;
    if data.size != s {
        return Err(Error::dim(format!("slices are {0}x{0}, model expects {s}x{s}", data.size)));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let mut history = History::default();
    if settings.epochs == 0 || data.is_empty() {
        return Ok(history);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adam_cfg = AdamConfig {
        lr: settings.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let b = batch.len();
            let mut x = Vec::with_capacity(b * s * s);
            let mut targets = Vec::with_capacity(b * classes);
            let mut weights = Vec::with_capacity(b * classes);
            for &i in batch {
                x.extend_from_slice(data.image(i));
                let label = data.labels[i];
                targets.extend((0..classes).map(|c| if c == label { 1.0f32 } else { 0.0 }));
                weights.extend(weighting.row(label, classes));
            }
            let targets = Tensor::new(vec![b, classes], targets)?;
            let weights = Tensor::new(vec![b, classes], weights)?;
            let tape = Tape::new();
            let vars = tape.bind_params(&model.params)?;
            let input = tape.constant(Tensor::new(vec![b, 1, s, s], x)?)?;
            let fwd = model.forward(&vars, input, Mode::Train, &mut rng)?;
            let loss = fwd.lengths.weighted_bce(&targets, &weights)?;
            total += loss.value().data()[0] as f64 * b as f64;
            let mut grads = tape.backward(loss)?;
            grads.accumulate_into(&mut model.params, &vars);
            adam.step(&mut model.params)?;
            if let Some(stats) = fwd.stats {
                model.bn.update(&stats);
            }
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {} loss {mean:.5}", epoch + 1);
        history.epoch_loss.push(mean);
    }
    Ok(history)
}
