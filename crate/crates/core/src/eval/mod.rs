//! Evaluation statistics, reports and model checkpoints.

mod checkpoint;
mod metrics;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, load_checkpoint, parameter_digest, read_checkpoint, save_checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use metrics::{accuracy_and_sensitivity, onevsrest_auc, roc_curve, roc_micro_auc, ConfusionTable, Summary};
pub use stats::{exact_binomial_ci, mcnemar_exact};

use crate::data::Class;
use crate::error::{Error, Result};
use crate::pipeline::PatientPrediction;

pub const CONFIDENCE_LEVEL: f64 = 0.95;

/// A ratio with its exact 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: u64,
    pub trials: u64,
    pub estimate: f64,
    pub ci: [f64; 2],
}

impl Proportion {
    pub fn new(successes: u64, trials: u64) -> Result<Self> {
        let (lo, hi) = exact_binomial_ci(successes, trials, CONFIDENCE_LEVEL)?;
        let estimate = successes as f64 / trials as f64;
        // bisection lands within 1e-12 of the bound; keep the ordering exact
        Ok(Proportion {
            successes,
            trials,
            estimate,
            ci: [lo.min(estimate), hi.max(estimate)],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetEval {
    pub set: String,
    pub confusion: ConfusionTable,
    pub accuracy: Proportion,
    /// Indexed by class; `None` where the set has no true cases.
    pub sensitivity: [Option<Proportion>; 3],
    /// `None` when only one true class is present.
    pub micro_auc: Option<f64>,
    pub onevsrest_auc: [Option<f64>; 3],
    pub roc: Vec<[f64; 2]>,
}

/// Discordant counts between a baseline and the evaluated model on the
/// same scans: `b` baseline right and model wrong, `c` the reverse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub set: String,
    pub b: u64,
    pub c: u64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub sets: Vec<SetEval>,
    pub total: SetEval,
    pub comparisons: Vec<Comparison>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate_set(name: &str, predictions: &[&PatientPrediction]) -> Result<SetEval> {
    if predictions.is_empty() {
        return Err(Error::invalid(format!("no predictions for {name}")));
    }
    let confusion = ConfusionTable::from_pairs(predictions.iter().map(|p| (p.true_class, p.label)));
    let summary = accuracy_and_sensitivity(&confusion)?;
    debug_assert_eq!(summary.accuracy, confusion.correct() as f64 / confusion.total() as f64);
    let mut sensitivity = [None; 3];
    for c in Class::ALL {
        let row = confusion.row_total(c);
        if row > 0 {
            sensitivity[c.index()] = Some(Proportion::new(confusion.0[c.index()][c.index()], row)?);
        }
    }
    let probs: Vec<[f64; 3]> = predictions.iter().map(|p| p.prob).collect();
    let labels: Vec<Class> = predictions.iter().map(|p| p.true_class).collect();
    let present: BTreeSet<Class> = labels.iter().copied().collect();
    let (micro_auc, roc, onevsrest) = if present.len() >= 2 {
        let (auc, roc) = roc_micro_auc(&probs, &labels)?;
        let mut ovr = [None; 3];
        for &c in &present {
            ovr[c.index()] = Some(onevsrest_auc(&probs, &labels, c)?);
        }
        (Some(auc), roc, ovr)
    } else {
        (None, Vec::new(), [None; 3])
    };
    Ok(SetEval {
        set: name.to_string(),
        confusion,
        accuracy: Proportion::new(confusion.correct(), confusion.total())?,
        sensitivity,
        micro_auc,
        onevsrest_auc: onevsrest,
        roc,
    })
}

/// Per-set and pooled evaluation of one model's patient predictions.
pub fn evaluate(model: &str, predictions: &[PatientPrediction]) -> Result<EvalReport> {
    let mut by_set: BTreeMap<_, Vec<&PatientPrediction>> = BTreeMap::new();
    for p in predictions {
        by_set.entry(p.set_id).or_default().push(p);
    }
    let sets = by_set
        .iter()
        .map(|(set, preds)| evaluate_set(set.name(), preds))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&PatientPrediction> = predictions.iter().collect();
    Ok(EvalReport {
        model: model.to_string(),
        sets,
        total: evaluate_set("TOTAL", &all)?,
        comparisons: Vec::new(),
    })
}

/// McNemar comparison on the scans both runs predicted, matched by id.
pub fn compare(
    baseline: &str,
    set: &str,
    baseline_predictions: &[PatientPrediction],
    predictions: &[PatientPrediction],
) -> Result<Comparison> {
    let base: BTreeMap<&str, &PatientPrediction> =
        baseline_predictions.iter().map(|p| (p.scan_id.as_str(), p)).collect();
    if base.len() != predictions.len() {
        return Err(Error::invalid(format!(
            "baseline has {} scans, model has {}",
            base.len(),
            predictions.len()
        )));
    }
    let (mut b, mut c) = (0, 0);
    for p in predictions {
        let q = base
            .get(p.scan_id.as_str())
            .ok_or_else(|| Error::invalid(format!("scan {} missing from baseline {baseline}", p.scan_id)))?;
        if q.true_class != p.true_class {
            return Err(Error::invalid(format!("scan {} has conflicting true classes", p.scan_id)));
        }
        match (q.label == q.true_class, p.label == p.true_class) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(Comparison {
        baseline: baseline.to_string(),
        set: set.to_string(),
        b,
        c,
        p_value: mcnemar_exact(b, c),
    })
}
