use serde::{Deserialize, Serialize};

use crate::data::Class;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted, both in (COVID-19, CAP,
/// Normal) order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTable(pub [[u64; 3]; 3]);

impl ConfusionTable {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Class, Class)>) -> Self {
        let mut t = [[0; 3]; 3];
        for (truth, predicted) in pairs {
            t[truth.index()][predicted.index()] += 1;
        }
        ConfusionTable(t)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..3).map(|i| self.0[i][i]).sum()
    }

    pub fn row_total(&self, class: Class) -> u64 {
        self.0[class.index()].iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    /// `None` for a class without true cases.
    pub sensitivity: [Option<f64>; 3],
}

pub fn accuracy_and_sensitivity(table: &ConfusionTable) -> Result<Summary> {
    let total = table.total();
    if total == 0 {
        return Err(Error::invalid("empty confusion table"));
    }
    let sensitivity = Class::ALL.map(|c| {
        let row = table.row_total(c);
        (row > 0).then(|| table.0[c.index()][c.index()] as f64 / row as f64)
    });
    Ok(Summary {
        accuracy: table.correct() as f64 / total as f64,
        sensitivity,
    })
}

/// ROC points `(fpr, tpr)` from a threshold sweep over the distinct
/// scores, high to low, and the trapezoid area under them. Equal scores
/// form a single step.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<(f64, Vec<[f64; 2]>)> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("ROC needs both positive and negative cases"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![[0.0, 0.0]];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let [x0, y0] = *points.last().expect("non-empty");
        let point = [fp as f64 / n_neg as f64, tp as f64 / n_pos as f64];
        area += (point[0] - x0) * (point[1] + y0) / 2.0;
        points.push(point);
    }
    Ok((area, points))
}

fn check_labels(probs: &[[f64; 3]], labels: &[Class]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::invalid("probabilities and labels differ in length"));
    }
    let mut seen = [false; 3];
    for l in labels {
        seen[l.index()] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::invalid("AUC needs at least two distinct true classes"));
    }
    Ok(())
}

/// Micro-averaged AUC: every `(scan, class)` pair is pooled into one
/// ranking with score `P_class` and label `class == truth`.
pub fn roc_micro_auc(probs: &[[f64; 3]], labels: &[Class]) -> Result<(f64, Vec<[f64; 2]>)> {
    check_labels(probs, labels)?;
    let mut scores = Vec::with_capacity(probs.len() * 3);
    let mut positive = Vec::with_capacity(probs.len() * 3);
    for (p, &truth) in probs.iter().zip(labels) {
        for c in Class::ALL {
            scores.push(p[c.index()]);
            positive.push(c == truth);
        }
    }
    roc_curve(&scores, &positive)
}

/// One class against the rest.
pub fn onevsrest_auc(probs: &[[f64; 3]], labels: &[Class], class: Class) -> Result<f64> {
    check_labels(probs, labels)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[class.index()]).collect();
    let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    Ok(roc_curve(&scores, &positive)?.0)
}
