//! Named config fragments selectable with `--preset`.
//!
//! Training presets are named `<dataset>-<variant>-beta<β>` (for example
//! `mnist-linf-beta6`) plus `<dataset>-natural`; they pin the dataset, the
//! budget and the trade-off weight.

use robustlab::trades::Variant;
use robustlab::ThreatBudget;

use crate::error::CliError;

const ROBUST_VARIANTS: [Variant; 5] = [Variant::Linf, Variant::Rt, Variant::Union, Variant::Composition, Variant::All];
const BETAS: [u32; 3] = [1, 3, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub command: &'static str,
    pub name: String,
    /// Row label used in result tables (training presets only).
    pub label: Option<&'static str>,
    pub body: String,
}

fn budget_toml(b: ThreatBudget) -> String {
    format!(
        "[budget]\nepsilon = {}\ntheta_max = {}\ndx_max = {}\ndy_max = {}\n",
        b.epsilon, b.theta_max, b.dx_max, b.dy_max
    )
}

fn dataset_block(dataset: &str) -> (String, ThreatBudget, usize) {
    match dataset {
        "mnist" => (
            "[data]\ndataset = \"mnist\"\ntrain_subset = 10000\neval_subset = 1000\n".into(),
            ThreatBudget::mnist(),
            40,
        ),
        _ => (
            "[data]\ndataset = \"cifar10\"\ntrain_subset = 10000\neval_subset = 1000\n".into(),
            ThreatBudget::cifar10(),
            20,
        ),
    }
}

pub fn all() -> Vec<Preset> {
    let mut out = Vec::new();
    for dataset in ["mnist", "cifar10"] {
        let (data, budget, steps) = dataset_block(dataset);
        let common = format!("architecture = \"small_cnn\"\n{}{data}", budget_toml(budget));
        out.push(Preset {
            command: "train",
            name: format!("{dataset}-natural"),
            label: Some(Variant::Natural.label()),
            body: format!("variant = \"natural\"\nbeta = 1.0\n{common}"),
        });
        for v in ROBUST_VARIANTS {
            for b in BETAS {
                out.push(Preset {
                    command: "train",
                    name: format!("{dataset}-{}-beta{b}", v.as_str()),
                    label: Some(v.label()),
                    body: format!("variant = \"{}\"\nbeta = {b}.0\n{common}", v.as_str()),
                });
            }
        }
        let suffix = if dataset == "mnist" { String::new() } else { format!("-{dataset}") };
        out.push(Preset {
            command: "attack",
            name: format!("full{suffix}"),
            label: None,
            body: format!(
                "suite = [\"composition\", \"union\", \"linf\", \"rt\"]\n[pgd]\nsteps = {steps}\n[rt_search.grid]\ntheta = 12\ndx = 5\ndy = 5\n{}[data]\ndataset = \"{dataset}\"\neval_subset = 1000\n",
                budget_toml(budget)
            ),
        });
    }
    out.push(Preset {
        command: "theory",
        name: "default".into(),
        label: None,
        body: "d_list = [24, 48, 200, 512, 1024]\np_list = [0.5, 0.7, 0.9, 1.0]\nn_mc = 100000\n".into(),
    });
    out.push(Preset {
        command: "theory",
        name: "grid".into(),
        label: None,
        body: "d_list = [24, 48, 200, 1024]\np_list = [0.5, 0.7, 0.9, 1.0]\nn_mc = 100000\n".into(),
    });
    out.push(Preset {
        command: "analyze",
        name: "lp-cifar10".into(),
        label: None,
        body: format!(
            "[data]\ndataset = \"cifar10\"\n{}[lp]\ngrid = [12, 5, 5]\nbins = 50\n",
            budget_toml(ThreatBudget::cifar10())
        ),
    });
    out.push(Preset {
        command: "analyze",
        name: "lp-mini".into(),
        label: None,
        body: format!(
            "[data]\ndataset = \"mini\"\n{}[lp]\ngrid = [12, 5, 5]\nbins = 50\n",
            budget_toml(ThreatBudget::cifar10())
        ),
    });
    out
}

pub fn find(command: &str, name: &str) -> Option<Preset> {
    all().into_iter().find(|p| p.command == command && p.name == name)
}

pub fn lookup(command: &str, name: &str) -> Result<toml::Value, CliError> {
    let preset = find(command, name).ok_or_else(|| {
        let known: Vec<String> = all().into_iter().filter(|p| p.command == command).map(|p| p.name).collect();
        CliError::Config(format!("unknown {command} preset {name:?}; known: {}", known.join(", ")))
    })?;
    let table: toml::Table = toml::from_str(&preset.body).expect("built-in presets are valid TOML");
    Ok(toml::Value::Table(table))
}
