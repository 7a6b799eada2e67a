//! Config schemas for every subcommand and the layered loader
//! (defaults < preset < file < `--set` / flags).

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use robustlab::analysis::StabilityMode;
use robustlab::attacks::{AttackSpec, PgdConfig, RtSearch};
use robustlab::datasets::{self, Dataset, Split};
use robustlab::trades::{InnerConfig, OptimizerConfig, TradesConfig, Variant};
use robustlab::{Architecture, ImageShape, ThreatBudget};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::presets;

pub const DATA_ROOT_ENV: &str = "ROBUSTLAB_DATA_ROOT";
pub const OUTPUT_ROOT_ENV: &str = "ROBUSTLAB_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    /// Procedural shapes, 3×32×32.
    Mini,
    /// Procedural shapes, 1×28×28.
    MiniMnist,
}

impl DatasetKind {
    fn dir_name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Mini | DatasetKind::MiniMnist => "mini",
        }
    }

    pub fn default_budget(&self) -> ThreatBudget {
        match self {
            DatasetKind::Mnist | DatasetKind::MiniMnist => ThreatBudget::mnist(),
            DatasetKind::Cifar10 | DatasetKind::Mini => ThreatBudget::cifar10(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding the raw files; relative paths resolve against
    /// `ROBUSTLAB_DATA_ROOT` when it is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_subset: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
}

impl DataConfig {
    pub fn mnist_desk() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            root: None,
            train_subset: Some(10_000),
            eval_subset: Some(1_000),
            subset_seed: 0,
        }
    }

    /// Resolved directory of the raw files.
    pub fn resolved_root(&self) -> PathBuf {
        let env_root = env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        match (&self.root, env_root) {
            (Some(p), _) if p.is_absolute() => p.clone(),
            (Some(p), Some(base)) => base.join(p),
            (Some(p), None) => p.clone(),
            (None, Some(base)) => base.join(self.dataset.dir_name()),
            (None, None) => PathBuf::from("data").join(self.dataset.dir_name()),
        }
    }

    /// Pins the data root so a manifest replays against the same files.
    pub fn resolve(&mut self) {
        if !matches!(self.dataset, DatasetKind::Mini | DatasetKind::MiniMnist) {
            let root = self.resolved_root();
            self.root = Some(fs::canonicalize(&root).unwrap_or(root));
        }
    }

    fn load_split(&self, split: Split, mini_seed: u64, n_mini: Option<usize>) -> Result<Dataset, CliError> {
        let root = self.resolved_root();
        let missing = |what: &str| {
            CliError::Data(format!(
                "{what} not found under {} (set data.root or {DATA_ROOT_ENV}; see scripts/fetch_data.sh)",
                root.display()
            ))
        };
        Ok(match self.dataset {
            DatasetKind::Mnist => {
                let (img, _) = datasets::mnist_file_names(split);
                if !root.join(img).exists() {
                    return Err(missing(img));
                }
                datasets::load_mnist(&root, split)?
            }
            DatasetKind::Cifar10 => {
                let first = datasets::cifar10_file_names(split).remove(0);
                if !root.join(&first).exists() {
                    return Err(missing(&first));
                }
                datasets::load_cifar10(&root, split)?
            }
            DatasetKind::Mini => {
                datasets::mini_images_n(ImageShape::CIFAR10, n_mini.unwrap_or(datasets::MINI_IMAGE_COUNT), mini_seed)
            }
            DatasetKind::MiniMnist => {
                datasets::mini_images_n(ImageShape::MNIST, n_mini.unwrap_or(datasets::MINI_IMAGE_COUNT), mini_seed)
            }
        })
    }

    fn maybe_subset(&self, data: Dataset, n: Option<usize>, tag: u64) -> Result<Dataset, CliError> {
        match n {
            Some(n) if n < data.len() => Ok(data.subset(n, self.subset_seed ^ tag)?),
            _ => Ok(data),
        }
    }

    pub fn load_train(&self) -> Result<Dataset, CliError> {
        let data = self.load_split(Split::Train, self.subset_seed, self.train_subset)?;
        self.maybe_subset(data, self.train_subset, 0)
    }

    pub fn load_eval(&self) -> Result<Dataset, CliError> {
        let data = self.load_split(Split::Test, self.subset_seed.wrapping_add(1), self.eval_subset)?;
        self.maybe_subset(data, self.eval_subset, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub architecture: Architecture,
    pub variant: Variant,
    pub beta: f32,
    pub budget: ThreatBudget,
    #[serde(default)]
    pub inner: InnerConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/train"),
            data: DataConfig::mnist_desk(),
            architecture: Architecture::SmallCnn,
            variant: Variant::Linf,
            beta: 6.0,
            budget: ThreatBudget::mnist(),
            inner: InnerConfig::default(),
            optimizer: OptimizerConfig {
                milestones: vec![8],
                ..OptimizerConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn trades(&self) -> TradesConfig {
        TradesConfig {
            variant: self.variant,
            beta: self.beta,
            budget: self.budget,
            inner: self.inner,
            optimizer: self.optimizer.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.trades().validate().map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub checkpoint: PathBuf,
    /// Declared architecture, checked against the checkpoint header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Composition,
    Union,
    Linf,
    Rt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub models: Vec<ModelEntry>,
    pub suite: Vec<AttackKind>,
    pub budget: ThreatBudget,
    pub pgd: PgdConfig,
    pub rt_search: RtSearch,
    #[serde(default = "yes")]
    pub per_example: bool,
}

fn yes() -> bool {
    true
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/attack"),
            data: DataConfig {
                train_subset: None,
                ..DataConfig::mnist_desk()
            },
            models: vec![],
            suite: vec![AttackKind::Composition, AttackKind::Union, AttackKind::Linf, AttackKind::Rt],
            budget: ThreatBudget::mnist(),
            pgd: PgdConfig::mnist(),
            rt_search: RtSearch::STANDARD_GRID,
            per_example: true,
        }
    }
}

impl AttackConfig {
    pub fn attack_specs(&self) -> Vec<AttackSpec> {
        let (budget, pgd, search) = (self.budget, self.pgd, self.rt_search);
        self.suite
            .iter()
            .map(|k| match k {
                AttackKind::Composition => AttackSpec::Composition { budget, pgd, search },
                AttackKind::Union => AttackSpec::Union { budget, pgd, search },
                AttackKind::Linf => AttackSpec::Pgd { budget, pgd },
                AttackKind::Rt => AttackSpec::Rt { budget, search },
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.models.is_empty() {
            return Err(CliError::Config("attack needs at least one entry in `models`".into()));
        }
        self.budget.validate().map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub d_list: Vec<usize>,
    pub p_list: Vec<f64>,
    pub n_mc: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/theory"),
            d_list: vec![24, 48, 200, 512, 1024],
            p_list: vec![0.5, 0.7, 0.9, 1.0],
            n_mc: 100_000,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(d) = self.d_list.iter().find(|&&d| d % 8 != 0 || d < 24) {
            return Err(CliError::Config(format!(
                "d = {d} is invalid: the sweep uses N = d/8 and needs d >= 24 divisible by 8"
            )));
        }
        if let Some(p) = self.p_list.iter().find(|p| !(0.5..=1.0).contains(*p)) {
            return Err(CliError::Config(format!("p = {p} lies outside [0.5, 1]")));
        }
        if self.n_mc == 0 {
            return Err(CliError::Config("n_mc must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityJob {
    pub models: Vec<ModelEntry>,
    pub n_images: usize,
    pub grid: [usize; 3],
    pub modes: Vec<StabilityMode>,
    pub pgd: PgdConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpJob {
    pub grid: [usize; 3],
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub budget: ThreatBudget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityJob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp: Option<LpJob>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/analyze"),
            data: DataConfig {
                dataset: DatasetKind::Mini,
                root: None,
                train_subset: None,
                eval_subset: None,
                subset_seed: 0,
            },
            budget: ThreatBudget::cifar10(),
            stability: None,
            lp: Some(LpJob {
                grid: [12, 5, 5],
                bins: 50,
            }),
        }
    }
}

/// Flag-level overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// Tables holding an externally tagged enum; a new variant replaces the old
/// one instead of merging with it.
const ENUM_TABLES: [&str; 1] = ["rt_search"];

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() && !ENUM_TABLES.contains(&k.as_str()) => {
                        merge(existing, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {key}: {part} is not a table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| CliError::Config(format!("--set {key}: parent is not a table")))?;
    let leaf = parts[parts.len() - 1];
    if parts.len() >= 2 && ENUM_TABLES.contains(&parts[parts.len() - 2]) && !table.contains_key(leaf) {
        table.clear();
    }
    table.insert(leaf.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Builds a config from defaults, an optional preset, an optional file and
/// flag overrides, then checks it against the schema.
pub fn load<T>(defaults: T, command: &str, ov: &Overrides) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let mut value = toml::Value::try_from(&defaults).map_err(|e| CliError::Config(format!("defaults: {e}")))?;
    if let Some(name) = &ov.preset {
        let preset = presets::lookup(command, name)?;
        merge(&mut value, preset);
    }
    if let Some(path) = &ov.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(file));
    }
    for s in &ov.sets {
        set_path(&mut value, s)?;
    }
    if let Some(seed) = ov.seed {
        set_path(&mut value, &format!("seed = {seed}"))?;
    }
    if let Some(dir) = &ov.output_dir {
        value
            .as_table_mut()
            .expect("configs are tables")
            .insert("output_dir".into(), toml::Value::String(dir.display().to_string()));
    }
    value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

/// Output directory after applying `ROBUSTLAB_OUTPUT_ROOT` to relative paths.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match env::var_os(OUTPUT_ROOT_ENV) {
        Some(base) if dir.is_relative() => PathBuf::from(base).join(dir),
        _ => dir.to_path_buf(),
    }
}
