//! Self-training on unlabeled test sets: confident predictions become
//! pseudo-labeled stage-2 training slices, one enhanced model is trained
//! per test set, and a scan from set `S` is scored by averaging the models
//! enhanced on the other sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Class, SetId, VolumetricScan};
use crate::error::{Error, Result};
use crate::pipeline::{
    argmax_with_ties, assemble_prediction, fit, run_stage1, stage2_lengths, CapsNet,
    LabeledSlices, LossWeighting, PatientPrediction, PipelineConfig, ScanPrediction, TrainSettings,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancementConfig {
    /// Inclusive confidence threshold for patients and slices.
    pub tau: f64,
    /// Stage-2 retraining epochs, starting from the benchmark weights.
    pub epochs: usize,
    /// Test sets that receive an enhanced model.
    pub sets: Vec<SetId>,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        EnhancementConfig {
            tau: 0.8,
            epochs: 100,
            sets: vec![SetId::Test1, SetId::Test2, SetId::Test3],
        }
    }
}

impl EnhancementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} must lie in (0, 1]", self.tau)));
        }
        if self.sets.contains(&SetId::Train) {
            return Err(Error::Config("the train set cannot be enhanced on".into()));
        }
        Ok(())
    }
}

/// One pseudo-labeled slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidentEntry {
    pub pixels: Vec<f32>,
    pub label: Class,
    pub scan_id: String,
    pub slice_index: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidentSet {
    pub source_set_id: SetId,
    pub entries: Vec<ConfidentEntry>,
    pub patient_count: usize,
    pub slice_counts: [usize; 3],
}

impl ConfidentSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_slices(&self, size: usize) -> Result<LabeledSlices> {
        let mut out = LabeledSlices::new(size);
        for e in &self.entries {
            out.push(&e.pixels, e.label.index())?;
        }
        Ok(out)
    }
}

/// Scans whose largest patient probability reaches `tau`. Normal-filtered
/// scans are left to [`normal_slice_rule`].
pub fn select_confident_patients(predictions: &[PatientPrediction], tau: f64) -> BTreeSet<String> {
    predictions
        .iter()
        .filter(|p| !p.normal_filtered)
        .filter(|p| p.prob.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= tau)
        .map(|p| p.scan_id.clone())
        .collect()
}

/// `(slice index, length)` of slices whose stage-2 vote agrees with the
/// patient label and whose length for that class reaches `tau`.
pub fn select_confident_slices(prediction: &ScanPrediction, label: Class, tau: f64) -> Vec<(usize, f64)> {
    prediction
        .slices
        .iter()
        .filter_map(|s| {
            let lengths = s.class_lengths?;
            let length = lengths[label.index()];
            (s.class_argmax == Some(label) && length >= tau).then_some((s.slice_index, length))
        })
        .collect()
}

/// Slices of a normal-filtered scan that stage 1 nevertheless called
/// infected with probability at least `tau`; they become Normal examples.
pub fn normal_slice_rule(prediction: &ScanPrediction, tau: f64) -> Result<Vec<(usize, f64)>> {
    if !prediction.patient.normal_filtered {
        return Err(Error::invalid(format!(
            "{} was not normal-filtered",
            prediction.patient.scan_id
        )));
    }
    Ok(prediction
        .slices
        .iter()
        .filter(|s| s.infection_prob >= tau)
        .map(|s| (s.slice_index, s.infection_prob))
        .collect())
}

/// Applies both confidence rules to one test set's predictions.
pub fn extract_confident(
    set_id: SetId,
    scans: &[VolumetricScan],
    predictions: &[ScanPrediction],
    tau: f64,
) -> Result<ConfidentSet> {
    let by_id: BTreeMap<&str, &VolumetricScan> = scans.iter().map(|s| (s.meta.scan_id.as_str(), s)).collect();
    let patients: Vec<PatientPrediction> = predictions.iter().map(|p| p.patient.clone()).collect();
    let gate = select_confident_patients(&patients, tau);
    let mut out = ConfidentSet {
        source_set_id: set_id,
        entries: Vec::new(),
        patient_count: 0,
        slice_counts: [0; 3],
    };
    for pred in predictions {
        let id = pred.patient.scan_id.as_str();
        let scan = by_id
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no scan for prediction {id}")))?;
        let (label, picked) = if pred.patient.normal_filtered {
            (Class::Normal, normal_slice_rule(pred, tau)?)
        } else if gate.contains(id) {
            let label = pred.patient.label;
            (label, select_confident_slices(pred, label, tau))
        } else {
            continue;
        };
        if pred.patient.normal_filtered && picked.is_empty() {
            continue;
        }
        out.patient_count += 1;
        for (z, probability) in picked {
            out.slice_counts[label.index()] += 1;
            out.entries.push(ConfidentEntry {
                pixels: scan.slice(z).to_vec(),
                label,
                scan_id: id.to_string(),
                slice_index: z,
                probability,
            });
        }
    }
    Ok(out)
}

/// Continues training the benchmark stage 2 on `train ∪ confident`. An
/// empty confident set returns the benchmark unchanged with the flag set.
pub fn retrain_enhanced(
    benchmark: &CapsNet<f32>,
    train: &LabeledSlices,
    confident: &ConfidentSet,
    cfg: &PipelineConfig,
    epochs: usize,
    seed: u64,
) -> Result<(CapsNet<f32>, bool)> {
    if confident.is_empty() {
        log::warn!(
            "no confident slices from {}; keeping the benchmark",
            confident.source_set_id
        );
        return Ok((benchmark.clone(), true));
    }
    let mut data = train.clone();
    data.extend(&confident.to_slices(cfg.input_size)?)?;
    let mut model = benchmark.clone();
    fit(
        &mut model,
        &data,
        &LossWeighting::ByCapsule(cfg.class_weights.0.to_vec()),
        TrainSettings {
            epochs,
            ..cfg.train_settings()
        },
        seed,
    )?;
    Ok((model, false))
}

/// Shared stage 1, the benchmark stage 2 and one enhanced stage 2 per set.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedEnsemble {
    pub stage1: CapsNet<f32>,
    pub benchmark: CapsNet<f32>,
    pub members: BTreeMap<SetId, CapsNet<f32>>,
}

/// Ensemble output for one scan: summed member counts, mean probability
/// and the members consulted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub patient: PatientPrediction,
    pub members: Vec<SetId>,
}

impl EnhancedEnsemble {
    /// Members used for a scan from `target`: every enhanced model except
    /// the one enhanced on `target`. With no enhanced models at all the
    /// benchmark stands in (reported as an empty member list).
    pub fn members_for(&self, target: SetId) -> Result<Vec<SetId>> {
        if self.members.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<SetId> = self.members.keys().copied().filter(|&s| s != target).collect();
        if ids.is_empty() {
            return Err(Error::invalid(format!(
                "excluding {target} leaves no enhanced model to average"
            )));
        }
        Ok(ids)
    }

    pub fn predict(&self, scan: &VolumetricScan, target: SetId, cfg: &PipelineConfig) -> Result<EnsemblePrediction> {
        let ids = self.members_for(target)?;
        let models: Vec<&CapsNet<f32>> = if ids.is_empty() {
            vec![&self.benchmark]
        } else {
            ids.iter().map(|id| &self.members[id]).collect()
        };
        let pass = run_stage1(&self.stage1, scan, cfg)?;
        let mut member_preds = Vec::with_capacity(models.len());
        for model in models {
            let lengths = stage2_lengths(model, scan, &pass.selected)?;
            member_preds.push(assemble_prediction(scan, &pass, &lengths, cfg)?.patient);
        }
        // stage 1 is shared, so every member saw the same filter decision
        Ok(EnsemblePrediction {
            patient: mean_prediction(&member_preds)?,
            members: ids,
        })
    }
}

/// Arithmetic mean of member probability vectors; counts are summed and
/// the label follows the pipeline tie rule.
pub fn mean_prediction(members: &[PatientPrediction]) -> Result<PatientPrediction> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("no member predictions to average"))?;
    let mut prob = [0.0; 3];
    let mut counts = [0; 3];
    for m in members {
        for c in 0..3 {
            prob[c] += m.prob[c];
            counts[c] += m.counts[c];
        }
    }
    let n = members.len() as f64;
    let prob = prob.map(|p| p / n);
    Ok(PatientPrediction {
        counts,
        prob,
        label: Class::from_index(argmax_with_ties(&prob)).expect("three classes"),
        ..first.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub set_id: SetId,
    pub confident_patients: usize,
    /// Pseudo-labeled slices per class (COVID-19, CAP, Normal).
    pub confident_slices: [usize; 3],
    /// True when nothing was confident and the benchmark was kept.
    pub kept_benchmark: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tau: f64,
    pub seed: u64,
    pub sets: Vec<SetReport>,
    pub members: Vec<SetId>,
}

/// Runs the benchmark on each unlabeled set, harvests confident slices,
/// retrains stage 2 per set and assembles the ensemble.
pub fn enhancement_round(
    stage1: &CapsNet<f32>,
    benchmark: &CapsNet<f32>,
    train: &LabeledSlices,
    test_sets: &[(SetId, Vec<VolumetricScan>)],
    cfg: &PipelineConfig,
    ecfg: &EnhancementConfig,
    seed: u64,
) -> Result<(EnhancedEnsemble, RunReport)> {
    ecfg.validate()?;
    let mut members = BTreeMap::new();
    let mut reports = Vec::new();
    for (k, (set_id, scans)) in test_sets.iter().enumerate() {
        let run = || -> Result<(CapsNet<f32>, SetReport)> {
            let predictions = scans
                .iter()
                .map(|s| crate::pipeline::classify_patient(stage1, benchmark, s, cfg))
                .collect::<Result<Vec<_>>>()?;
            let confident = extract_confident(*set_id, scans, &predictions, ecfg.tau)?;
            let member_seed = crate::data::derive_seed(seed, &[k as u64, *set_id as u64]);
            let (model, kept) = retrain_enhanced(benchmark, train, &confident, cfg, ecfg.epochs, member_seed)?;
            log::info!(
                "{set_id}: {} confident patients, slices {:?}",
                confident.patient_count,
                confident.slice_counts
            );
            Ok((
                model,
                SetReport {
                    set_id: *set_id,
                    confident_patients: confident.patient_count,
                    confident_slices: confident.slice_counts,
                    kept_benchmark: kept,
                },
            ))
        };
        let (model, report) = run().map_err(|e| e.context(format!("enhancing on {set_id}")))?;
        members.insert(*set_id, model);
        reports.push(report);
    }
    let report = RunReport {
        tau: ecfg.tau,
        seed,
        sets: reports,
        members: members.keys().copied().collect(),
    };
    Ok((
        EnhancedEnsemble {
            stage1: stage1.clone(),
            benchmark: benchmark.clone(),
            members,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{LayerSizes, SlicePrediction};

    fn patient(id: &str, counts: [usize; 3], filtered: bool) -> PatientPrediction {
        let (prob, counts) = if filtered {
            ([0.0, 0.0, 1.0], [0; 3])
        } else {
            (crate::pipeline::patient_probability(counts).unwrap(), counts)
        };
        PatientPrediction {
            scan_id: id.into(),
            set_id: SetId::Test2,
            true_class: Class::Covid19,
            counts,
            prob,
            label: Class::from_index(argmax_with_ties(&prob)).unwrap(),
            normal_filtered: filtered,
            infected_fraction: 0.5,
        }
    }

    #[test]
    fn patient_gate_is_inclusive() {
        let preds = [
            patient("a", [9, 1, 0], false),
            patient("b", [7, 3, 0], false),
            patient("c", [8, 2, 0], false),
            patient("d", [0, 0, 0], true),
        ];
        let picked = select_confident_patients(&preds, 0.8);
        assert_eq!(picked.into_iter().collect::<Vec<_>>(), ["a", "c"]);
    }

    fn slice(i: usize, infection: f64, lengths: Option<[f64; 3]>) -> SlicePrediction {
        SlicePrediction {
            slice_index: i,
            infection_prob: infection,
            class_lengths: lengths,
            class_argmax: lengths.map(|l| Class::from_index(argmax_with_ties(&l)).unwrap()),
        }
    }

    #[test]
    fn slice_gate_requires_length_and_agreement() {
        let pred = ScanPrediction {
            patient: patient("a", [2, 1, 0], false),
            slices: vec![
                slice(0, 0.9, Some([0.95, 0.1, 0.05])),
                slice(1, 0.9, Some([0.6, 0.3, 0.1])),
                slice(2, 0.9, Some([0.85, 0.9, 0.1])),
                slice(3, 0.1, None),
            ],
        };
        assert_eq!(select_confident_slices(&pred, Class::Covid19, 0.8), vec![(0, 0.95)]);
    }

    #[test]
    fn normal_rule_uses_stage1_probability() {
        let filtered = ScanPrediction {
            patient: patient("n", [0; 3], true),
            slices: vec![slice(0, 0.9, Some([0.9, 0.0, 0.0])), slice(1, 0.7, None), slice(2, 0.1, None)],
        };
        assert_eq!(normal_slice_rule(&filtered, 0.8).unwrap(), vec![(0, 0.9)]);
        let unfiltered = ScanPrediction {
            patient: patient("x", [3, 0, 0], false),
            slices: vec![],
        };
        assert!(normal_slice_rule(&unfiltered, 0.8).is_err());
    }

    #[test]
    fn mean_of_members() {
        let a = PatientPrediction {
            prob: [1.0, 0.0, 0.0],
            ..patient("s", [4, 0, 0], false)
        };
        let b = PatientPrediction {
            prob: [0.6, 0.4, 0.0],
            ..patient("s", [3, 2, 0], false)
        };
        let m = mean_prediction(&[a.clone(), b]).unwrap();
        assert!((m.prob[0] - 0.8).abs() < 1e-15 && (m.prob[1] - 0.2).abs() < 1e-15);
        assert_eq!(m.label, Class::Covid19);
        assert_eq!(m.counts, [7, 2, 0]);
        assert_eq!(mean_prediction(&[a.clone(), a.clone()]).unwrap().prob, a.prob);
        assert!(mean_prediction(&[]).is_err());
    }

    fn tiny_cfg() -> PipelineConfig {
        let layers = LayerSizes {
            channels: [2, 2, 2, 2],
            strides: [1, 1, 2, 1],
            kernel: 3,
            pool: 2,
            primary_dim: 4,
            hidden_capsules: vec![[2, 4]],
            class_dim: 4,
        };
        PipelineConfig {
            input_size: 8,
            stage1: layers.clone(),
            stage2: layers,
            epochs: 1,
            lr: 1e-2,
            ..PipelineConfig::default()
        }
    }

    fn ensemble(sets: &[SetId]) -> EnhancedEnsemble {
        let cfg = tiny_cfg();
        let b = crate::pipeline::build_stage2(&cfg, 0).unwrap();
        EnhancedEnsemble {
            stage1: crate::pipeline::build_stage1(&cfg, 0).unwrap(),
            benchmark: b.clone(),
            members: sets.iter().map(|&s| (s, b.clone())).collect(),
        }
    }

    #[test]
    fn members_exclude_the_target_set() {
        let e = ensemble(&[SetId::Test1, SetId::Test2, SetId::Test3]);
        assert_eq!(e.members_for(SetId::Test1).unwrap(), [SetId::Test2, SetId::Test3]);
        assert_eq!(
            e.members_for(SetId::Test4).unwrap(),
            [SetId::Test1, SetId::Test2, SetId::Test3]
        );
        assert!(ensemble(&[SetId::Test2]).members_for(SetId::Test2).is_err());
        assert!(ensemble(&[]).members_for(SetId::Test2).unwrap().is_empty());
    }

    #[test]
    fn empty_confident_set_keeps_benchmark() {
        let cfg = tiny_cfg();
        let bench = crate::pipeline::build_stage2(&cfg, 3).unwrap();
        let empty = ConfidentSet {
            source_set_id: SetId::Test1,
            entries: vec![],
            patient_count: 0,
            slice_counts: [0; 3],
        };
        let (model, kept) = retrain_enhanced(&bench, &LabeledSlices::new(8), &empty, &cfg, 3, 0).unwrap();
        assert!(kept);
        assert_eq!(model, bench);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(EnhancementConfig::default().validate().is_ok());
        let bad = EnhancementConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"tau": 0.8, "bogus": 1}"#;
        assert!(serde_json::from_str::<EnhancementConfig>(json).is_err());
    }
}
