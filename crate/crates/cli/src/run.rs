//! Subcommand execution. Every run writes its outputs and a manifest into
//! its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use robustlab::analysis::{self, LpNorm, Report};
use robustlab::attacks::{evaluate_robust_accuracy, AttackSpec};
use robustlab::datasets::Dataset;
use robustlab::models::ModelError;
use robustlab::spatial::enumerate_grid;
use robustlab::theory::verify_theorem;
use robustlab::trades::{self, TrainOptions};
use robustlab::{Image, Model};
use serde::Serialize;

use crate::config::{resolve_output, AnalyzeConfig, AttackConfig, ModelEntry, TheoryConfig, TrainConfig};
use crate::error::CliError;
use crate::manifest::{sha256_file, Manifest};

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Train(TrainConfig),
    Attack(AttackConfig),
    Theory(TheoryConfig),
    Analyze(AnalyzeConfig),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Attack(_) => "attack",
            Command::Theory(_) => "theory",
            Command::Analyze(_) => "analyze",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Command::Train(c) => c.seed,
            Command::Attack(c) => c.seed,
            Command::Theory(c) => c.seed,
            Command::Analyze(c) => c.seed,
        }
    }

    pub fn output_dir(&self) -> &Path {
        match self {
            Command::Train(c) => &c.output_dir,
            Command::Attack(c) => &c.output_dir,
            Command::Theory(c) => &c.output_dir,
            Command::Analyze(c) => &c.output_dir,
        }
    }

    pub fn set_output_dir(&mut self, dir: PathBuf) {
        match self {
            Command::Train(c) => c.output_dir = dir,
            Command::Attack(c) => c.output_dir = dir,
            Command::Theory(c) => c.output_dir = dir,
            Command::Analyze(c) => c.output_dir = dir,
        }
    }

    fn resolve_data(&mut self) {
        match self {
            Command::Train(c) => c.data.resolve(),
            Command::Attack(c) => c.data.resolve(),
            Command::Analyze(c) => c.data.resolve(),
            Command::Theory(_) => {}
        }
    }

    pub fn config_json(&self) -> serde_json::Value {
        let v = match self {
            Command::Train(c) => serde_json::to_value(c),
            Command::Attack(c) => serde_json::to_value(c),
            Command::Theory(c) => serde_json::to_value(c),
            Command::Analyze(c) => serde_json::to_value(c),
        };
        v.expect("configs serialize")
    }

    pub fn from_json(command: &str, config: serde_json::Value) -> Result<Self, CliError> {
        let bad = |e: serde_json::Error| CliError::Config(format!("manifest config: {e}"));
        Ok(match command {
            "train" => Command::Train(serde_json::from_value(config).map_err(bad)?),
            "attack" => Command::Attack(serde_json::from_value(config).map_err(bad)?),
            "theory" => Command::Theory(serde_json::from_value(config).map_err(bad)?),
            "analyze" => Command::Analyze(serde_json::from_value(config).map_err(bad)?),
            other => return Err(CliError::Config(format!("manifest names unknown command {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            Command::Train(c) => c.validate(),
            Command::Attack(c) => c.validate(),
            Command::Theory(c) => c.validate(),
            Command::Analyze(c) => c.budget.validate().map_err(|e| CliError::Config(e.to_string())),
        }
    }
}

/// Validates, runs and writes the manifest; returns the run directory and
/// the manifest.
pub fn execute(mut cmd: Command) -> Result<(PathBuf, Manifest), CliError> {
    cmd.validate()?;
    cmd.resolve_data();
    let out = resolve_output(cmd.output_dir());
    fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let files = match &cmd {
        Command::Train(c) => run_train(c, &out)?,
        Command::Attack(c) => run_attack(c, &out)?,
        Command::Theory(c) => run_theory(c, &out)?,
        Command::Analyze(c) => run_analyze(c, &out)?,
    };
    let manifest = Manifest::new(cmd.name(), cmd.seed(), cmd.config_json(), &out, &files)?;
    manifest.write(&out)?;
    Ok((out, manifest))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub path: String,
    pub expected: String,
    pub actual: Option<String>,
}

impl ReplayCheck {
    pub fn matches(&self) -> bool {
        self.actual.as_deref() == Some(self.expected.as_str())
    }
}

/// Re-executes a manifest in a scratch directory and compares every
/// recorded output hash.
pub fn replay(manifest_path: &Path) -> Result<Vec<ReplayCheck>, CliError> {
    let manifest = Manifest::read(manifest_path)?;
    let mut cmd = Command::from_json(&manifest.command, manifest.config.clone())?;
    let scratch = tempfile::tempdir().map_err(CliError::io(std::env::temp_dir()))?;
    cmd.set_output_dir(scratch.path().to_path_buf());
    let (dir, _) = execute(cmd)?;
    let checks = manifest
        .outputs
        .iter()
        .map(|o| ReplayCheck {
            path: o.path.clone(),
            expected: o.sha256.clone(),
            actual: sha256_file(&dir.join(&o.path)).ok(),
        })
        .collect();
    Ok(checks)
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_error(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn run_train(cfg: &TrainConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let train = cfg.data.load_train()?;
    let eval = cfg.data.load_eval()?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(CliError::io(&ckpt_dir))?;
    eprintln!(
        "training {} ({}, beta {}) on {} examples, evaluating on {}",
        cfg.variant.label(),
        cfg.architecture,
        cfg.beta,
        train.len(),
        eval.len()
    );
    let mut report = |s: &trades::EpochStats| {
        eprintln!(
            "epoch {:>3}  lr {:.5}  natural {:.4}  robust {:.4}  eval acc {:.4}",
            s.epoch, s.learning_rate, s.natural_loss, s.robust_loss, s.eval_accuracy
        )
    };
    let (model, history) = trades::train(
        &cfg.trades(),
        &train,
        &eval,
        TrainOptions {
            architecture: cfg.architecture,
            checkpoint_dir: Some(&ckpt_dir),
            on_epoch: Some(&mut report),
        },
    )?;
    model.save(&out.join("model.rlck"))?;
    let hist = out.join("history.csv");
    history.write_csv(&hist).map_err(CliError::io(&hist))?;
    let mut files = vec!["model.rlck".to_string(), "history.csv".to_string()];
    files.extend((0..history.epochs.len()).map(|e| format!("checkpoints/epoch_{e:03}.rlck")));
    Ok(files)
}

/// Loads a checkpoint and checks it against its declared architecture and
/// the dataset's image shape.
pub fn load_model(entry: &ModelEntry, data: &Dataset) -> Result<Model, CliError> {
    if !entry.checkpoint.exists() {
        return Err(CliError::Data(format!(
            "checkpoint for {:?} not found at {}",
            entry.name,
            entry.checkpoint.display()
        )));
    }
    let model = Model::load(&entry.checkpoint)?;
    if let Some(declared) = entry.architecture {
        if declared != model.architecture() {
            return Err(CliError::from(ModelError::ArchitectureMismatch {
                expected: declared,
                found: model.architecture(),
            }));
        }
    }
    if model.input_shape() != data.shape() || model.classes().max(2) != data.classes().max(2) {
        return Err(CliError::Config(format!(
            "checkpoint {} ({} with input {:?}, {} classes) does not fit dataset {} ({:?}, {} classes)",
            entry.checkpoint.display(),
            model.architecture(),
            model.input_shape().dims(),
            model.classes(),
            data.name(),
            data.shape().dims(),
            data.classes()
        )));
    }
    Ok(model)
}

fn file_stub(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

pub fn run_attack(cfg: &AttackConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let data = cfg.data.load_eval()?;
    let models = cfg
        .models
        .iter()
        .map(|m| load_model(m, &data))
        .collect::<Result<Vec<_>, _>>()?;
    let mut specs = cfg.attack_specs();
    specs.push(AttackSpec::Natural);
    let mut files = vec!["report.csv".to_string(), "report.txt".to_string()];
    let mut cells = Vec::new();
    for (i, (entry, model)) in cfg.models.iter().zip(&models).enumerate() {
        let mut row = Vec::new();
        let mut records = Vec::new();
        for spec in &specs {
            let outcome = evaluate_robust_accuracy(model, &data, spec, cfg.seed)?;
            eprintln!("{:<16} {:<10} {:6.2}%", entry.name, outcome.attack_name, 100.0 * outcome.accuracy);
            row.push(100.0 * outcome.accuracy);
            records.extend(outcome.records);
        }
        cells.push(row);
        if cfg.per_example {
            let name = format!("per_example_{i}_{}.csv", file_stub(&entry.name));
            write_rows(&out.join(&name), &records)?;
            files.push(name);
        }
    }
    let report = Report::from_cells(
        cfg.models.iter().map(|m| m.name.clone()).collect(),
        specs.iter().map(|s| s.name()).collect(),
        cells,
    );
    let csv_path = out.join("report.csv");
    fs::write(&csv_path, report.to_csv()).map_err(CliError::io(&csv_path))?;
    let txt_path = out.join("report.txt");
    let text = report.to_text();
    print!("{text}");
    fs::write(&txt_path, text).map_err(CliError::io(&txt_path))?;
    Ok(files)
}

pub fn run_theory(cfg: &TheoryConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let rows = verify_theorem(&cfg.d_list, &cfg.p_list, cfg.n_mc, cfg.seed)?;
    for r in rows.iter().filter(|r| r.alpha_variant == robustlab::theory::AlphaVariant::Paper) {
        println!(
            "d={:<5} N={:<4} p={:<4} mc={:.4}±{:.4} paper={:.4} corrected={:.4} gate={:.4}",
            r.d, r.n, r.p, r.mc_estimate, r.mc_stderr, r.cf_paper, r.cf_corrected, r.theorem_gate
        );
    }
    write_rows(&out.join("theory.csv"), &rows)?;
    Ok(vec!["theory.csv".into()])
}

#[derive(Debug, Serialize)]
struct LpSummary {
    pairs: usize,
    min_linf: f64,
    epsilon: f64,
    min_linf_exceeds_epsilon: bool,
}

pub fn run_analyze(cfg: &AnalyzeConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let data = cfg.data.load_eval()?;
    let mut files = Vec::new();
    if let Some(lp) = &cfg.lp {
        let grid = enumerate_grid(&cfg.budget, (lp.grid[0], lp.grid[1], lp.grid[2])).map_err(|e| CliError::Config(e.to_string()))?;
        let study = analysis::lp_distance_histogram(&data, &grid, lp.bins).map_err(|e| CliError::Config(e.to_string()))?;
        for h in &study.histograms {
            let name = format!("hist_p{}.csv", h.norm.tag());
            let path = out.join(&name);
            h.write_csv(&path).map_err(csv_error(&path))?;
            files.push(name);
        }
        let summary = LpSummary {
            pairs: study.pairs,
            min_linf: study.min_linf,
            epsilon: cfg.budget.epsilon,
            min_linf_exceeds_epsilon: study.min_linf > cfg.budget.epsilon,
        };
        println!(
            "{} image/transform pairs, minimum l-inf distance {:.4} (epsilon {})",
            summary.pairs, summary.min_linf, summary.epsilon
        );
        let path = out.join("lp_summary.json");
        fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").map_err(CliError::io(&path))?;
        files.push("lp_summary.json".into());
        debug_assert!(LpNorm::ALL.len() == study.histograms.len());
    }
    if let Some(job) = &cfg.stability {
        let grid = enumerate_grid(&cfg.budget, (job.grid[0], job.grid[1], job.grid[2])).map_err(|e| CliError::Config(e.to_string()))?;
        let n = job.n_images.min(data.len());
        let images: Vec<Image> = (0..n).map(|i| data.image(i)).collect();
        let labels = &data.labels()[..n];
        let mut points = Vec::new();
        for entry in &job.models {
            let model = load_model(entry, &data)?;
            for &mode in &job.modes {
                points.extend(analysis::logit_stability_curve(
                    &model,
                    &entry.name,
                    &images,
                    labels,
                    &grid,
                    mode,
                    cfg.budget.epsilon as f32,
                    &job.pgd,
                    cfg.seed,
                )?);
            }
        }
        let path = out.join("stability.csv");
        analysis::write_stability_csv(&path, &points).map_err(csv_error(&path))?;
        files.push("stability.csv".into());
    }
    if files.is_empty() {
        return Err(CliError::Config("analyze needs an [lp] or [stability] section".into()));
    }
    Ok(files)
}
