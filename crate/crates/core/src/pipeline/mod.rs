//! Two-stage slice classifier: stage 1 finds slices with infection, the
//! normal filter clears scans with too few of them, stage 2 labels the
//! remaining slices and a vote turns them into a patient prediction.

mod model;
mod train;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::capsule::{ClassWeights, LossWeights};
use crate::data::{Class, SetId, VolumetricScan};
use crate::error::{Error, Result};

pub use model::{Architecture, CapsNet, Forward, LayerSizes};
pub use train::{fit, History, LabeledSlices, LossWeighting, TrainSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// A scan is Normal when its infected fraction is strictly below this.
    pub normal_threshold: f64,
    /// Stage-1 positive-capsule length at or above which a slice counts as
    /// infected.
    pub infection_cutoff: f64,
    pub epochs: usize,
    /// Stage-2 epochs when they differ from `epochs`.
    pub stage2_epochs: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub routing_iterations: usize,
    pub input_size: usize,
    pub stage1: LayerSizes,
    pub stage2: LayerSizes,
    pub class_weights: ClassWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            normal_threshold: 0.03,
            infection_cutoff: 0.5,
            epochs: 100,
            stage2_epochs: None,
            lr: 1e-4,
            batch_size: 16,
            dropout_rate: 0.3,
            routing_iterations: 3,
            input_size: 64,
            stage1: LayerSizes::stage1(),
            stage2: LayerSizes::stage2(),
            class_weights: ClassWeights::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.normal_threshold > 0.0 && self.normal_threshold < 1.0) {
            return Err(Error::Config(format!(
                "normal_threshold {} must lie in (0, 1)",
                self.normal_threshold
            )));
        }
        if !(self.infection_cutoff > 0.0 && self.infection_cutoff < 1.0) {
            return Err(Error::Config(format!(
                "infection_cutoff {} must lie in (0, 1)",
                self.infection_cutoff
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        self.stage1_arch().validate()?;
        self.stage2_arch().validate()
    }

    pub fn stage1_arch(&self) -> Architecture {
        Architecture::new(
            self.stage1.clone(),
            2,
            self.input_size,
            self.dropout_rate,
            self.routing_iterations,
        )
    }

    pub fn stage2_arch(&self) -> Architecture {
        Architecture::new(
            self.stage2.clone(),
            3,
            self.input_size,
            self.dropout_rate,
            self.routing_iterations,
        )
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }

    pub fn stage2_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.stage2_epochs.unwrap_or(self.epochs),
            ..self.train_settings()
        }
    }
}

pub fn build_stage1(cfg: &PipelineConfig, seed: u64) -> Result<CapsNet<f32>> {
    CapsNet::new(cfg.stage1_arch(), seed)
}

pub fn build_stage2(cfg: &PipelineConfig, seed: u64) -> Result<CapsNet<f32>> {
    CapsNet::new(cfg.stage2_arch(), seed)
}

/// Every slice of every scan, labeled 1 when the generator marked it
/// infected. Scans must already be preprocessed to `size`.
pub fn stage1_slices(scans: &[VolumetricScan], size: usize) -> Result<LabeledSlices> {
    let mut out = LabeledSlices::new(size);
    for scan in scans {
        for z in 0..scan.n_slices {
            out.push(scan.slice(z), scan.slice_label(z) as usize)?;
        }
    }
    Ok(out)
}

/// Trains stage 1 with loss weights computed from this set's class counts.
pub fn train_stage1(
    model: &mut CapsNet<f32>,
    slices: &LabeledSlices,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<History> {
    let weights = stage1_loss_weights(slices)?;
    fit(
        model,
        slices,
        &LossWeighting::BySampleClass(vec![weights.negative, weights.positive]),
        cfg.train_settings(),
        seed,
    )
}

pub fn stage1_loss_weights(slices: &LabeledSlices) -> Result<LossWeights> {
    let counts = slices.class_counts(2);
    if counts.contains(&0) {
        return Err(Error::invalid(format!(
            "stage 1 needs both slice classes, got {} negative and {} positive",
            counts[0], counts[1]
        )));
    }
    LossWeights::from_counts(counts[0], counts[1])
}

/// Stage-1 selections of `scans`, each labeled with its patient class.
pub fn stage2_slices(
    stage1: &CapsNet<f32>,
    scans: &[VolumetricScan],
    cfg: &PipelineConfig,
) -> Result<LabeledSlices> {
    let mut out = LabeledSlices::new(cfg.input_size);
    for scan in scans {
        let pass = run_stage1(stage1, scan, cfg)?;
        for &z in &pass.selected {
            out.push(scan.slice(z), scan.meta.true_class.index())?;
        }
    }
    Ok(out)
}

pub fn train_stage2(
    model: &mut CapsNet<f32>,
    slices: &LabeledSlices,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<History> {
    if slices.is_empty() {
        return Err(Error::invalid("stage 2 has no training slices"));
    }
    let counts = slices.class_counts(3);
    for c in Class::ALL {
        if counts[c.index()] == 0 {
            // a sharp stage 1 can leave no Normal slices at all
            log::warn!("stage 2 training set has no {c} slices");
        }
    }
    fit(
        model,
        slices,
        &LossWeighting::ByCapsule(cfg.class_weights.0.to_vec()),
        cfg.stage2_settings(),
        seed,
    )
}

/// Stage-1 view of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Pass {
    /// Positive-capsule length per slice.
    pub infection_probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub infected_fraction: f64,
}

pub fn run_stage1(stage1: &CapsNet<f32>, scan: &VolumetricScan, cfg: &PipelineConfig) -> Result<Stage1Pass> {
    let images: Vec<&[f32]> = (0..scan.n_slices).map(|z| scan.slice(z)).collect();
    let probs: Vec<f64> = stage1.predict(&images)?.into_iter().map(|l| l[1]).collect();
    let (selected, infected_fraction) = select_by_cutoff(&probs, cfg.infection_cutoff);
    Ok(Stage1Pass {
        infection_probs: probs,
        selected,
        infected_fraction,
    })
}

/// Slices whose positive-capsule length is at least `cutoff`, and their
/// share of the scan.
pub fn select_by_cutoff(probs: &[f64], cutoff: f64) -> (Vec<usize>, f64) {
    let selected: Vec<usize> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= cutoff)
        .map(|(i, _)| i)
        .collect();
    let fraction = if probs.is_empty() {
        0.0
    } else {
        selected.len() as f64 / probs.len() as f64
    };
    (selected, fraction)
}

/// `(selected slices, infected fraction)` for a preprocessed scan.
pub fn select_infected_slices(
    stage1: &CapsNet<f32>,
    scan: &VolumetricScan,
    cfg: &PipelineConfig,
) -> Result<(Vec<usize>, f64)> {
    let pass = run_stage1(stage1, scan, cfg)?;
    Ok((pass.selected, pass.infected_fraction))
}

/// True when the scan should be called Normal without stage 2.
pub fn normal_filter(infected_fraction: f64, threshold: f64) -> bool {
    infected_fraction < threshold
}

/// Index of the largest value; ties go to the lowest index, which in
/// class order prefers COVID-19 over CAP over Normal.
pub fn argmax_with_ties(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Share of voting slices per class. `None` when no slice voted.
pub fn patient_probability(counts: [usize; 3]) -> Option<[f64; 3]> {
    let total: usize = counts.iter().sum();
    (total > 0).then(|| counts.map(|n| n as f64 / total as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePrediction {
    pub slice_index: usize,
    pub infection_prob: f64,
    pub class_lengths: Option<[f64; 3]>,
    pub class_argmax: Option<Class>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub scan_id: String,
    pub set_id: SetId,
    pub true_class: Class,
    pub counts: [usize; 3],
    #[serde(rename = "P")]
    pub prob: [f64; 3],
    pub label: Class,
    pub normal_filtered: bool,
    pub infected_fraction: f64,
}

/// One line of the prediction log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPrediction {
    pub patient: PatientPrediction,
    pub slices: Vec<SlicePrediction>,
}

/// Combines a stage-1 pass with stage-2 lengths for the selected slices
/// (`stage2_lengths[k]` belongs to `pass.selected[k]`).
pub fn assemble_prediction(
    scan: &VolumetricScan,
    pass: &Stage1Pass,
    stage2_lengths: &[[f64; 3]],
    cfg: &PipelineConfig,
) -> Result<ScanPrediction> {
    if stage2_lengths.len() != pass.selected.len() {
        return Err(Error::Defect(format!(
            "{} stage-2 outputs for {} selected slices",
            stage2_lengths.len(),
            pass.selected.len()
        )));
    }
    let mut slices: Vec<SlicePrediction> = pass
        .infection_probs
        .iter()
        .enumerate()
        .map(|(i, &p)| SlicePrediction {
            slice_index: i,
            infection_prob: p,
            class_lengths: None,
            class_argmax: None,
        })
        .collect();
    let mut votes = [0usize; 3];
    for (&z, lengths) in pass.selected.iter().zip(stage2_lengths) {
        let class = Class::from_index(argmax_with_ties(lengths)).expect("three classes");
        slices[z].class_lengths = Some(*lengths);
        slices[z].class_argmax = Some(class);
        votes[class.index()] += 1;
    }
    let filtered = normal_filter(pass.infected_fraction, cfg.normal_threshold);
    let (counts, prob) = if filtered {
        ([0; 3], [0.0, 0.0, 1.0])
    } else {
        let prob = patient_probability(votes).ok_or_else(|| {
            Error::Defect(format!(
                "{}: stage 2 reached with no selected slices",
                scan.meta.scan_id
            ))
        })?;
        (votes, prob)
    };
    let label = Class::from_index(argmax_with_ties(&prob)).expect("three classes");
    Ok(ScanPrediction {
        patient: PatientPrediction {
            scan_id: scan.meta.scan_id.clone(),
            set_id: scan.meta.set_id,
            true_class: scan.meta.true_class,
            counts,
            prob,
            label,
            normal_filtered: filtered,
            infected_fraction: pass.infected_fraction,
        },
        slices,
    })
}

/// Stage-2 lengths for the given slices of a scan.
pub fn stage2_lengths(stage2: &CapsNet<f32>, scan: &VolumetricScan, slices: &[usize]) -> Result<Vec<[f64; 3]>> {
    let images: Vec<&[f32]> = slices.iter().map(|&z| scan.slice(z)).collect();
    if images.is_empty() {
        return Ok(Vec::new());
    }
    Ok(stage2
        .predict(&images)?
        .into_iter()
        .map(|l| [l[0], l[1], l[2]])
        .collect())
}

/// Full two-stage prediction for one preprocessed scan.
pub fn classify_patient(
    stage1: &CapsNet<f32>,
    stage2: &CapsNet<f32>,
    scan: &VolumetricScan,
    cfg: &PipelineConfig,
) -> Result<ScanPrediction> {
    let pass = run_stage1(stage1, scan, cfg)?;
    let lengths = stage2_lengths(stage2, scan, &pass.selected)?;
    assemble_prediction(scan, &pass, &lengths, cfg)
}

/// Binary slice-level metrics. Sensitivity or specificity is `None` when
/// the corresponding class is absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn binary_metrics(predicted: &[bool], actual: &[bool]) -> Result<BinaryMetrics> {
    if predicted.is_empty() || predicted.len() != actual.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty predictions and labels, got {} and {}",
            predicted.len(),
            actual.len()
        )));
    }
    let mut m = [[0usize; 2]; 2];
    for (&p, &a) in predicted.iter().zip(actual) {
        m[a as usize][p as usize] += 1;
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(BinaryMetrics {
        accuracy: (m[0][0] + m[1][1]) as f64 / predicted.len() as f64,
        sensitivity: ratio(m[1][1], m[1][0] + m[1][1]),
        specificity: ratio(m[0][0], m[0][0] + m[0][1]),
    })
}

/// Stage-1 slice metrics at the configured cutoff.
pub fn evaluate_stage1(
    stage1: &CapsNet<f32>,
    slices: &LabeledSlices,
    cfg: &PipelineConfig,
) -> Result<BinaryMetrics> {
    if slices.is_empty() {
        return Err(Error::invalid("no slices to evaluate"));
    }
    let predicted: Vec<bool> = stage1
        .predict(&slices.images())?
        .iter()
        .map(|l| l[1] >= cfg.infection_cutoff)
        .collect();
    let actual: Vec<bool> = slices.labels.iter().map(|&l| l == 1).collect();
    binary_metrics(&predicted, &actual)
}

/// Newline-delimited JSON, one scan per line.
pub fn write_predictions(out: &mut impl Write, predictions: &[ScanPrediction]) -> Result<()> {
    for p in predictions {
        serde_json::to_writer(&mut *out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io("prediction log", e))?;
    }
    Ok(())
}

pub fn read_predictions(input: impl BufRead) -> Result<Vec<ScanPrediction>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("prediction log", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::from(e).context(format!("prediction log line {}", i + 1)))?,
        );
    }
    Ok(out)
}
