use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use capsule_triage::data::{list_scan_dirs, load_scan, load_set, save_scan, SetId, VolumetricScan};
use capsule_triage::eval::{compare, evaluate, load_checkpoint, save_checkpoint, EvalReport};
use capsule_triage::experiment::{
    self, fit_stage1, fit_stage2, load_ensemble, predict_ensemble, predict_scans, preprocess_all, read_json,
    read_patients, save_ensemble, split, stage_meta, write_json, write_ndjson, ExperimentConfig, STAGE1_FILE,
    STAGE2_FILE,
};
use capsule_triage::pipeline::{stage2_slices, PatientPrediction};

/// Two-stage capsule-network triage of synthetic CT scans.
#[derive(Parser)]
#[command(name = "capsule-triage", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Without it the desk preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, one directory per set.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 or stage 2 of the benchmark pipeline.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Corpus root written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory; stage 2 reads stage1.ckpt from here.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the benchmark pipeline and write a prediction log.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Directory holding stage1.ckpt and stage2.ckpt.
        #[arg(long)]
        bench: PathBuf,
        /// A set directory or a corpus root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-train one stage-2 model per unlabeled test set.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bench: PathBuf,
        /// Test set directories.
        #[arg(long, num_args = 1.., required = true)]
        tests: Vec<PathBuf>,
        /// Corpus root holding the train set; defaults to the parent of
        /// the first test directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one test set with the leave-one-out ensemble.
    Evaluate {
        #[arg(long)]
        ens: PathBuf,
        #[arg(long)]
        target: SetId,
        /// Corpus root or the target's set directory; defaults to the
        /// directories the ensemble was enhanced on.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Also write the ensemble prediction log here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build an evaluation report from a prediction log.
    Report {
        /// Prediction log (benchmark or ensemble).
        #[arg(long)]
        data: PathBuf,
        /// Baseline prediction log for McNemar comparisons.
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Full experiment: corpus, benchmark, enhancement and reports.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

const SOURCES_FILE: &str = "sources.json";

fn config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Scans directly under `dir`, or under each of its set subdirectories.
fn load_scans(dir: &Path) -> Result<Vec<VolumetricScan>> {
    let direct = list_scan_dirs(dir)?;
    if !direct.is_empty() {
        return direct.iter().map(|d| Ok(load_scan(d)?)).collect();
    }
    let mut out = Vec::new();
    for set in SetId::ALL {
        if dir.join(set.dir_name()).is_dir() {
            out.extend(load_set(dir, set)?);
        }
    }
    if out.is_empty() {
        bail!("no scans under {}", dir.display());
    }
    Ok(out)
}

fn train_split(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<VolumetricScan>> {
    let raw = load_set(root, SetId::Train).with_context(|| format!("loading train set from {}", root.display()))?;
    let scans = preprocess_all(&raw, cfg.pipeline.input_size)?;
    Ok(split(cfg, &scans)?.0)
}

fn load_stage(cfg: &ExperimentConfig, dir: &Path, file: &str) -> Result<capsule_triage::pipeline::CapsNet<f32>> {
    Ok(load_checkpoint(&dir.join(file), &cfg.hash()?)?.0)
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = config(common)?;
    let scans = experiment::generate_raw(&cfg)?;
    for scan in &scans {
        save_scan(scan, &out.join(scan.meta.set_id.dir_name()))?;
    }
    write_json(&out.join("corpus.json"), &cfg)?;
    log::info!("wrote {} scans to {}", scans.len(), out.display());
    Ok(())
}

fn train(common: &Common, stage: u8, data: &Path, out: &Path) -> Result<()> {
    let cfg = config(common)?;
    let train = train_split(&cfg, data)?;
    let (model, file) = if stage == 1 {
        (fit_stage1(&cfg, &train)?, STAGE1_FILE)
    } else {
        let stage1 = load_stage(&cfg, out, STAGE1_FILE).context("stage 2 needs a stage-1 checkpoint in --out")?;
        (fit_stage2(&cfg, &stage1, &train)?.0, STAGE2_FILE)
    };
    save_checkpoint(&model, &stage_meta(&cfg, stage)?, &out.join(file))?;
    log::info!("wrote {}", out.join(file).display());
    Ok(())
}

fn infer(common: &Common, bench: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = config(common)?;
    let stage1 = load_stage(&cfg, bench, STAGE1_FILE)?;
    let stage2 = load_stage(&cfg, bench, STAGE2_FILE)?;
    let scans = preprocess_all(&load_scans(data)?, cfg.pipeline.input_size)?;
    let predictions = predict_scans(&stage1, &stage2, &scans, &cfg.pipeline)?;
    write_ndjson(out, &predictions)?;
    Ok(())
}

fn enhance(common: &Common, bench: &Path, tests: &[PathBuf], data: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = config(common)?;
    let root = match data {
        Some(d) => d.to_path_buf(),
        None => tests[0].parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let stage1 = load_stage(&cfg, bench, STAGE1_FILE)?;
    let stage2 = load_stage(&cfg, bench, STAGE2_FILE)?;
    let train_slices = stage2_slices(&stage1, &train_split(&cfg, &root)?, &cfg.pipeline)?;

    let mut sets: BTreeMap<SetId, (PathBuf, Vec<VolumetricScan>)> = BTreeMap::new();
    for dir in tests {
        let scans = preprocess_all(&load_scans(dir)?, cfg.pipeline.input_size)?;
        let set = scans[0].meta.set_id;
        if scans.iter().any(|s| s.meta.set_id != set) {
            bail!("{} mixes scans from several sets", dir.display());
        }
        if sets.insert(set, (dir.clone(), scans)).is_some() {
            bail!("{set} given twice");
        }
    }
    let tests: BTreeMap<SetId, Vec<VolumetricScan>> = sets.iter().map(|(k, (_, v))| (*k, v.clone())).collect();
    let (ensemble, report) = experiment::enhance(&cfg, &stage1, &stage2, &train_slices, &tests)?;
    save_ensemble(&cfg, &ensemble, &report, out)?;
    let sources: BTreeMap<SetId, PathBuf> = sets.into_iter().map(|(k, (p, _))| (k, p)).collect();
    write_json(&out.join(SOURCES_FILE), &sources)?;
    Ok(())
}

fn target_scans(ens: &Path, target: SetId, data: Option<&Path>) -> Result<Vec<VolumetricScan>> {
    let dir = match data {
        Some(d) if d.join(target.dir_name()).is_dir() => d.join(target.dir_name()),
        Some(d) => d.to_path_buf(),
        None => {
            let sources: BTreeMap<SetId, PathBuf> = read_json(&ens.join(SOURCES_FILE))?;
            match sources.get(&target) {
                Some(p) => p.clone(),
                None => bail!("{target} was not among the ensemble's test sets; pass --data"),
            }
        }
    };
    let scans: Vec<VolumetricScan> = load_scans(&dir)?
        .into_iter()
        .filter(|s| s.meta.set_id == target)
        .collect();
    if scans.is_empty() {
        bail!("no {target} scans under {}", dir.display());
    }
    Ok(scans)
}

fn evaluate_cmd(ens: &Path, target: SetId, data: Option<&Path>, report: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, ensemble, _) = load_ensemble(ens)?;
    let scans = preprocess_all(&target_scans(ens, target, data)?, cfg.pipeline.input_size)?;
    let ens_log = predict_ensemble(&ensemble, &scans, &cfg.pipeline)?;
    let bench_log = predict_scans(&ensemble.stage1, &ensemble.benchmark, &scans, &cfg.pipeline)?;
    let ens_patients: Vec<PatientPrediction> = ens_log.iter().map(|p| p.patient.clone()).collect();
    let bench_patients: Vec<PatientPrediction> = bench_log.iter().map(|p| p.patient.clone()).collect();
    let mut r = evaluate("ensemble", &ens_patients)?;
    r.comparisons
        .push(compare("benchmark", target.name(), &bench_patients, &ens_patients)?);
    write_report(report, &r)?;
    if let Some(out) = out {
        write_ndjson(out, &ens_log)?;
    }
    Ok(())
}

fn report_cmd(data: &Path, bench: Option<&Path>, report: &Path) -> Result<()> {
    let patients = read_patients(data)?;
    let name = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut r = evaluate(&name, &patients)?;
    if let Some(bench) = bench {
        let base = read_patients(bench)?;
        for set in r.sets.iter().map(|s| s.set.clone()).collect::<Vec<_>>() {
            let pick = |v: &[PatientPrediction]| {
                v.iter()
                    .filter(|p| p.set_id.name() == set)
                    .cloned()
                    .collect::<Vec<_>>()
            };
            r.comparisons.push(compare("baseline", &set, &pick(&base), &pick(&patients))?);
        }
        r.comparisons.push(compare("baseline", "TOTAL", &base, &patients)?);
    }
    write_report(report, &r)
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = report.to_json()?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common, out } => gen_data(common, out),
        Command::Train {
            common,
            stage,
            data,
            out,
        } => train(common, *stage, data, out),
        Command::Infer {
            common,
            bench,
            data,
            out,
        } => infer(common, bench, data, out),
        Command::Enhance {
            common,
            bench,
            tests,
            data,
            out,
        } => enhance(common, bench, tests, data.as_deref(), out),
        Command::Evaluate {
            ens,
            target,
            data,
            report,
            out,
        } => evaluate_cmd(ens, *target, data.as_deref(), report, out.as_deref()),
        Command::Report { data, bench, report } => report_cmd(data, bench.as_deref(), report),
        Command::Run { common, out } => {
            let cfg = config(common)?;
            experiment::run(&cfg, Some(out))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already print their causes
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.ends_with(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
