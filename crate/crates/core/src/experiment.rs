//! End-to-end experiment: corpus, benchmark pipeline, enhancement round,
//! ensemble evaluation and the artifacts each step leaves on disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, generate_corpus, preprocess, split_train_validation, Class, CorpusSpec, ScanGenerator, SetId,
    SyntheticMasks, VolumetricScan,
};
use crate::enhancement::{enhancement_round, EnhancedEnsemble, EnhancementConfig, EnsemblePrediction, RunReport};
use crate::error::{Error, Result};
use crate::eval::{
    compare, config_hash, evaluate, evaluate_set, parameter_digest, read_checkpoint, save_checkpoint,
    CheckpointMeta, EvalReport, SetEval,
};
use crate::pipeline::{
    build_stage1, build_stage2, classify_patient, stage1_slices, stage2_slices, train_stage1, train_stage2, CapsNet,
    LabeledSlices, PatientPrediction, PipelineConfig, ScanPrediction,
};

/// Scans whose true infected fraction is at least this must never be
/// filtered as Normal.
pub const CLEARLY_INFECTED: f64 = 0.07;

/// Sets whose acquisition differs from the train set.
pub const SHIFTED_SETS: [SetId; 3] = [SetId::Test1, SetId::Test2, SetId::Test4];

const CORPUS_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const STAGE1_INIT: u64 = 3;
const STAGE1_FIT: u64 = 4;
const STAGE2_INIT: u64 = 5;
const STAGE2_FIT: u64 = 6;
const ENHANCE_STREAM: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Every other seed is derived from this one.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub generator: ScanGenerator,
    /// Share of each train class held out for validation.
    pub validation_fraction: f64,
    pub pipeline: PipelineConfig,
    pub enhancement: EnhancementConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus: CorpusSpec::default(),
            generator: ScanGenerator::default(),
            validation_fraction: 0.3,
            pipeline: PipelineConfig::default(),
            enhancement: EnhancementConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Short schedule that fits a laptop: a few stage-1 epochs, a longer
    /// stage-2 schedule and a larger step size than the 100-epoch default.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.pipeline.epochs = 5;
        cfg.pipeline.stage2_epochs = Some(30);
        cfg.pipeline.lr = 1e-3;
        cfg.enhancement.epochs = 10;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction {} must lie in (0, 1)",
                self.validation_fraction
            )));
        }
        if self.generator.size < self.pipeline.input_size {
            log::warn!(
                "generator size {} is below the network input {}; slices will be upsampled",
                self.generator.size,
                self.pipeline.input_size
            );
        }
        for profile in self.corpus.profiles.values() {
            profile.validate()?;
        }
        self.pipeline.validate()?;
        self.enhancement.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn stream(&self, stream: u64) -> u64 {
        derive_seed(self.seed, &[stream])
    }
}

/// Unprocessed corpus as the generator emits it.
pub fn generate_raw(cfg: &ExperimentConfig) -> Result<Vec<VolumetricScan>> {
    generate_corpus(&cfg.corpus, cfg.stream(CORPUS_STREAM), &cfg.generator)
}

pub fn preprocess_all(scans: &[VolumetricScan], input_size: usize) -> Result<Vec<VolumetricScan>> {
    scans
        .iter()
        .map(|s| preprocess(s, &SyntheticMasks, input_size).map_err(|e| e.context(s.meta.scan_id.clone())))
        .collect()
}

/// Preprocessed scans grouped by role.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<VolumetricScan>,
    pub validation: Vec<VolumetricScan>,
    pub tests: BTreeMap<SetId, Vec<VolumetricScan>>,
}

/// Splits preprocessed TRAIN scans into train and validation halves.
pub fn split(cfg: &ExperimentConfig, train: &[VolumetricScan]) -> Result<(Vec<VolumetricScan>, Vec<VolumetricScan>)> {
    split_train_validation(train, cfg.validation_fraction, cfg.stream(SPLIT_STREAM))
}

pub fn prepare(cfg: &ExperimentConfig, raw: &[VolumetricScan]) -> Result<Corpus> {
    let scans = preprocess_all(raw, cfg.pipeline.input_size)?;
    let mut tests: BTreeMap<SetId, Vec<VolumetricScan>> = BTreeMap::new();
    let mut train = Vec::new();
    for scan in scans {
        if scan.meta.set_id == SetId::Train {
            train.push(scan);
        } else {
            tests.entry(scan.meta.set_id).or_default().push(scan);
        }
    }
    let (train, validation) = split(cfg, &train)?;
    Ok(Corpus {
        train,
        validation,
        tests,
    })
}

pub fn fit_stage1(cfg: &ExperimentConfig, train: &[VolumetricScan]) -> Result<CapsNet<f32>> {
    let p = &cfg.pipeline;
    let slices = stage1_slices(train, p.input_size)?;
    let mut model = build_stage1(p, cfg.stream(STAGE1_INIT))?;
    let history = train_stage1(&mut model, &slices, p, cfg.stream(STAGE1_FIT))?;
    log::info!("stage 1: {} slices, epoch losses {:?}", slices.len(), history.epoch_loss);
    Ok(model)
}

/// Trains the benchmark stage 2 on stage-1 selections of `train` and
/// returns the slices it saw, which enhancement reuses.
pub fn fit_stage2(
    cfg: &ExperimentConfig,
    stage1: &CapsNet<f32>,
    train: &[VolumetricScan],
) -> Result<(CapsNet<f32>, LabeledSlices)> {
    let p = &cfg.pipeline;
    let slices = stage2_slices(stage1, train, p)?;
    let mut model = build_stage2(p, cfg.stream(STAGE2_INIT))?;
    let history = train_stage2(&mut model, &slices, p, cfg.stream(STAGE2_FIT))?;
    log::info!(
        "stage 2: slices per class {:?}, epoch losses {:?}",
        slices.class_counts(3),
        history.epoch_loss
    );
    Ok((model, slices))
}

pub fn stage_meta(cfg: &ExperimentConfig, stage: u8) -> Result<CheckpointMeta> {
    let (seed, epochs) = match stage {
        1 => (cfg.stream(STAGE1_FIT), cfg.pipeline.epochs),
        2 => (cfg.stream(STAGE2_FIT), cfg.pipeline.stage2_settings().epochs),
        _ => return Err(Error::invalid(format!("no stage {stage}"))),
    };
    Ok(CheckpointMeta {
        seed,
        epochs,
        config_hash: cfg.hash()?,
    })
}

pub fn predict_scans(
    stage1: &CapsNet<f32>,
    stage2: &CapsNet<f32>,
    scans: &[VolumetricScan],
    cfg: &PipelineConfig,
) -> Result<Vec<ScanPrediction>> {
    scans
        .iter()
        .map(|s| classify_patient(stage1, stage2, s, cfg).map_err(|e| e.context(s.meta.scan_id.clone())))
        .collect()
}

/// Ensemble predictions for `scans`, each scored without the member
/// enhanced on the scan's own set.
pub fn predict_ensemble(
    ensemble: &EnhancedEnsemble,
    scans: &[VolumetricScan],
    cfg: &PipelineConfig,
) -> Result<Vec<EnsemblePrediction>> {
    scans
        .iter()
        .map(|s| {
            let p = ensemble.predict(s, s.meta.set_id, cfg)?;
            if p.members.contains(&s.meta.set_id) {
                return Err(Error::Defect(format!("{} was scored by its own set's model", s.meta.scan_id)));
            }
            Ok(p)
        })
        .collect()
}

/// Enhancement round over the configured sets found in `tests`. Fails if
/// stage 1 changes along the way.
pub fn enhance(
    cfg: &ExperimentConfig,
    stage1: &CapsNet<f32>,
    benchmark: &CapsNet<f32>,
    train_slices: &LabeledSlices,
    tests: &BTreeMap<SetId, Vec<VolumetricScan>>,
) -> Result<(EnhancedEnsemble, RunReport)> {
    let unlabeled: Vec<(SetId, Vec<VolumetricScan>)> = cfg
        .enhancement
        .sets
        .iter()
        .filter_map(|s| tests.get(s).map(|v| (*s, v.clone())))
        .collect();
    let digest = parameter_digest(stage1);
    let out = enhancement_round(
        stage1,
        benchmark,
        train_slices,
        &unlabeled,
        &cfg.pipeline,
        &cfg.enhancement,
        cfg.stream(ENHANCE_STREAM),
    )?;
    if parameter_digest(&out.0.stage1) != digest {
        return Err(Error::Defect("stage 1 changed during enhancement".into()));
    }
    Ok(out)
}

/// How the normal filter treated Normal scans and clearly infected scans.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub normal: usize,
    pub normal_filtered: usize,
    /// Infectious scans with a true infected fraction of at least 7%.
    pub infected: usize,
    pub infected_filtered: usize,
}

pub fn filter_stats(predictions: &[PatientPrediction], scans: &[VolumetricScan]) -> Result<FilterStats> {
    let by_id: BTreeMap<&str, &VolumetricScan> = scans.iter().map(|s| (s.meta.scan_id.as_str(), s)).collect();
    let mut stats = FilterStats::default();
    for p in predictions {
        let scan = by_id
            .get(p.scan_id.as_str())
            .ok_or_else(|| Error::invalid(format!("no scan for prediction {}", p.scan_id)))?;
        if scan.meta.true_class == Class::Normal {
            stats.normal += 1;
            stats.normal_filtered += p.normal_filtered as usize;
        } else if scan.infected_fraction() >= CLEARLY_INFECTED {
            stats.infected += 1;
            stats.infected_filtered += p.normal_filtered as usize;
        }
    }
    Ok(stats)
}

/// Correct patients of benchmark and ensemble on the same shifted scans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Efficacy {
    pub scans: usize,
    pub benchmark_correct: usize,
    pub ensemble_correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub config_hash: String,
    /// Validation split and TEST3, both drawn like the train set.
    pub heldout: SetEval,
    pub heldout_filter: FilterStats,
    pub shifted: Efficacy,
    pub stage1_digest: String,
}

pub struct Outcome {
    pub summary: Summary,
    pub stage1: CapsNet<f32>,
    pub stage2: CapsNet<f32>,
    pub ensemble: EnhancedEnsemble,
    pub run_report: RunReport,
    pub benchmark_log: Vec<ScanPrediction>,
    pub ensemble_log: Vec<EnsemblePrediction>,
    pub benchmark_report: EvalReport,
    pub ensemble_report: EvalReport,
}

fn correct(p: &PatientPrediction) -> bool {
    p.label == p.true_class
}

/// Runs the whole experiment and, with `out`, writes every artifact there.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.validate()?;
    let started = Instant::now();
    let corpus = prepare(cfg, &generate_raw(cfg)?)?;
    log::info!(
        "corpus: {} train, {} validation, test sets {:?} ({:.1?})",
        corpus.train.len(),
        corpus.validation.len(),
        corpus.tests.iter().map(|(k, v)| (k.name(), v.len())).collect::<Vec<_>>(),
        started.elapsed()
    );

    let stage1 = fit_stage1(cfg, &corpus.train)?;
    let (stage2, stage2_train) = fit_stage2(cfg, &stage1, &corpus.train)?;
    log::info!("benchmark trained ({:.1?})", started.elapsed());
    let digest = parameter_digest(&stage1);

    let p = &cfg.pipeline;
    let validation_log = predict_scans(&stage1, &stage2, &corpus.validation, p)?;
    let mut benchmark_log = Vec::new();
    for scans in corpus.tests.values() {
        benchmark_log.extend(predict_scans(&stage1, &stage2, scans, p)?);
    }

    let (ensemble, run_report) = enhance(cfg, &stage1, &stage2, &stage2_train, &corpus.tests)?;
    if parameter_digest(&stage1) != digest {
        return Err(Error::Defect("stage 1 changed during enhancement".into()));
    }
    log::info!("enhancement round done ({:.1?})", started.elapsed());

    let mut ensemble_log = Vec::new();
    for scans in corpus.tests.values() {
        ensemble_log.extend(predict_ensemble(&ensemble, scans, p)?);
    }

    let bench_patients: Vec<PatientPrediction> = benchmark_log.iter().map(|s| s.patient.clone()).collect();
    let ens_patients: Vec<PatientPrediction> = ensemble_log.iter().map(|s| s.patient.clone()).collect();
    let benchmark_report = evaluate("benchmark", &bench_patients)?;
    let mut ensemble_report = evaluate("ensemble", &ens_patients)?;
    for set in corpus.tests.keys() {
        let pick = |v: &[PatientPrediction]| v.iter().filter(|p| p.set_id == *set).cloned().collect::<Vec<_>>();
        ensemble_report.comparisons.push(compare(
            "benchmark",
            set.name(),
            &pick(&bench_patients),
            &pick(&ens_patients),
        )?);
    }
    ensemble_report
        .comparisons
        .push(compare("benchmark", "TOTAL", &bench_patients, &ens_patients)?);

    let heldout_scans: Vec<VolumetricScan> = corpus
        .validation
        .iter()
        .chain(corpus.tests.get(&SetId::Test3).into_iter().flatten())
        .cloned()
        .collect();
    let heldout_patients: Vec<&PatientPrediction> = validation_log
        .iter()
        .map(|s| &s.patient)
        .chain(bench_patients.iter().filter(|p| p.set_id == SetId::Test3))
        .collect();
    let heldout = evaluate_set("HELDOUT", &heldout_patients)?;
    let heldout_filter = filter_stats(
        &heldout_patients.iter().map(|p| (*p).clone()).collect::<Vec<_>>(),
        &heldout_scans,
    )?;

    let shifted = |v: &[PatientPrediction]| {
        v.iter()
            .filter(|p| SHIFTED_SETS.contains(&p.set_id))
            .map(|p| correct(p) as usize)
            .sum::<usize>()
    };
    let summary = Summary {
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        heldout,
        heldout_filter,
        shifted: Efficacy {
            scans: bench_patients.iter().filter(|p| SHIFTED_SETS.contains(&p.set_id)).count(),
            benchmark_correct: shifted(&bench_patients),
            ensemble_correct: shifted(&ens_patients),
        },
        stage1_digest: digest,
    };
    log::info!(
        "held-out accuracy {}/{}, shifted benchmark {} ensemble {} of {} ({:.1?})",
        summary.heldout.accuracy.successes,
        summary.heldout.accuracy.trials,
        summary.shifted.benchmark_correct,
        summary.shifted.ensemble_correct,
        summary.shifted.scans,
        started.elapsed()
    );

    let outcome = Outcome {
        summary,
        stage1,
        stage2,
        ensemble,
        run_report,
        benchmark_log,
        ensemble_log,
        benchmark_report,
        ensemble_report,
    };
    if let Some(dir) = out {
        write_outcome(cfg, &outcome, dir)?;
    }
    Ok(outcome)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).context(path.display().to_string()))
}

/// Writes one JSON value per line.
pub fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Patient records of a benchmark or ensemble prediction log.
pub fn read_patients(path: &Path) -> Result<Vec<PatientPrediction>> {
    #[derive(Deserialize)]
    struct Line {
        patient: PatientPrediction,
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line)
            .map_err(|e| Error::from(e).context(format!("{} line {}", path.display(), i + 1)))?;
        out.push(parsed.patient);
    }
    Ok(out)
}

pub const STAGE1_FILE: &str = "stage1.ckpt";
pub const STAGE2_FILE: &str = "stage2.ckpt";
const MEMBERS_DIR: &str = "members";
const RUN_REPORT_FILE: &str = "run_report.json";
const CONFIG_FILE: &str = "config.json";

pub fn member_path(dir: &Path, set: SetId) -> PathBuf {
    dir.join(MEMBERS_DIR).join(format!("{}.ckpt", set.dir_name()))
}

/// Ensemble directory: both benchmark stages, one checkpoint per enhanced
/// member, the run report and the configuration it was built under.
pub fn save_ensemble(cfg: &ExperimentConfig, ensemble: &EnhancedEnsemble, report: &RunReport, dir: &Path) -> Result<()> {
    save_checkpoint(&ensemble.stage1, &stage_meta(cfg, 1)?, &dir.join(STAGE1_FILE))?;
    save_checkpoint(&ensemble.benchmark, &stage_meta(cfg, 2)?, &dir.join(STAGE2_FILE))?;
    let hash = cfg.hash()?;
    for (k, (set, model)) in ensemble.members.iter().enumerate() {
        let meta = CheckpointMeta {
            seed: derive_seed(cfg.stream(ENHANCE_STREAM), &[k as u64, *set as u64]),
            epochs: cfg.enhancement.epochs,
            config_hash: hash.clone(),
        };
        save_checkpoint(model, &meta, &member_path(dir, *set))?;
    }
    write_json(&dir.join(RUN_REPORT_FILE), report)?;
    write_json(&dir.join(CONFIG_FILE), cfg)
}

pub fn load_ensemble(dir: &Path) -> Result<(ExperimentConfig, EnhancedEnsemble, RunReport)> {
    let cfg: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
    let report: RunReport = read_json(&dir.join(RUN_REPORT_FILE))?;
    let (stage1, _) = read_checkpoint(&dir.join(STAGE1_FILE))?;
    let (benchmark, _) = read_checkpoint(&dir.join(STAGE2_FILE))?;
    let mut members = BTreeMap::new();
    for &set in &report.members {
        members.insert(set, read_checkpoint(&member_path(dir, set))?.0);
    }
    Ok((
        cfg,
        EnhancedEnsemble {
            stage1,
            benchmark,
            members,
        },
        report,
    ))
}

/// Artifact layout of a full run under `dir`.
pub fn write_outcome(cfg: &ExperimentConfig, outcome: &Outcome, dir: &Path) -> Result<()> {
    save_checkpoint(&outcome.stage1, &stage_meta(cfg, 1)?, &dir.join(STAGE1_FILE))?;
    save_checkpoint(&outcome.stage2, &stage_meta(cfg, 2)?, &dir.join(STAGE2_FILE))?;
    save_ensemble(cfg, &outcome.ensemble, &outcome.run_report, &dir.join("ensemble"))?;
    write_ndjson(&dir.join("predictions").join("benchmark.ndjson"), &outcome.benchmark_log)?;
    write_ndjson(&dir.join("predictions").join("ensemble.ndjson"), &outcome.ensemble_log)?;
    write_json(&dir.join("reports").join("benchmark.json"), &outcome.benchmark_report)?;
    write_json(&dir.join("reports").join("ensemble.json"), &outcome.ensemble_report)?;
    write_json(&dir.join("summary.json"), &outcome.summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"seed": 3}"#).is_ok());
        assert!(ExperimentConfig::from_json(r#"{"seeed": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"pipeline": {"lr": 0.01, "nope": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"validation_fraction": 1.5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"enhancement": {"tau": 0}}"#).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_ne!(ExperimentConfig::default().hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn streams_are_distinct() {
        let cfg = ExperimentConfig::default();
        let seeds: std::collections::BTreeSet<u64> = (1..=7).map(|s| cfg.stream(s)).collect();
        assert_eq!(seeds.len(), 7);
    }

    #[test]
    fn prepare_splits_train_and_groups_tests() {
        let mut cfg = ExperimentConfig::default();
        cfg.generator.size = 24;
        cfg.pipeline.input_size = 16;
        cfg.corpus.counts = BTreeMap::from([(SetId::Train, [4, 3, 3]), (SetId::Test2, [1, 1, 1])]);
        let c = prepare(&cfg, &generate_raw(&cfg).unwrap()).unwrap();
        assert_eq!(c.train.len() + c.validation.len(), 10);
        assert_eq!(c.validation.len(), 1 + 1 + 1);
        assert_eq!(c.tests[&SetId::Test2].len(), 3);
        assert!(c.train.iter().all(|s| s.height == 16 && s.width == 16));
    }

    fn patient(id: &str, filtered: bool) -> PatientPrediction {
        PatientPrediction {
            scan_id: id.into(),
            set_id: SetId::Test3,
            true_class: Class::Normal,
            counts: [0; 3],
            prob: [0.0, 0.0, 1.0],
            label: Class::Normal,
            normal_filtered: filtered,
            infected_fraction: 0.0,
        }
    }

    #[test]
    fn filter_stats_split_normals_from_clear_infections() {
        let g = ScanGenerator { size: 24 };
        let profile = crate::data::ShiftProfile::TRAIN;
        let scans = vec![
            g.generate_scan(Class::Normal, SetId::Test3, &profile, 1, "n").unwrap(),
            g.generate_scan(Class::Covid19, SetId::Test3, &profile, 2, "c").unwrap(),
        ];
        assert!(scans[1].infected_fraction() >= CLEARLY_INFECTED);
        let stats = filter_stats(&[patient("n", true), patient("c", true)], &scans).unwrap();
        assert_eq!(
            stats,
            FilterStats {
                normal: 1,
                normal_filtered: 1,
                infected: 1,
                infected_filtered: 1
            }
        );
        assert!(filter_stats(&[patient("x", false)], &scans).is_err());
    }
}
