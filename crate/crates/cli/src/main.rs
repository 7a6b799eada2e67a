use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robustlab_cli::config::{self, AnalyzeConfig, AttackConfig, Overrides, TheoryConfig, TrainConfig};
use robustlab_cli::presets;
use robustlab_cli::run::{self, Command};
use robustlab_cli::CliError;

#[derive(Parser)]
#[command(name = "robustlab", version, about = "Adversarial robustness experiments under l-inf, RT and composed threat models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Dotted-key override such as `optimizer.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model with a TRADES variant.
    Train(Common),
    /// Evaluate checkpoints under an attack suite.
    Attack(Common),
    /// Synthetic-setting sweep: Monte Carlo against both closed forms.
    Theory(Common),
    /// ℓp-distance and logit-stability studies.
    Analyze(Common),
    /// Re-run a manifest and compare output checksums.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List built-in presets.
    Presets,
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        config: c.config.clone(),
        preset: c.preset.clone(),
        sets: c.sets.clone(),
        seed: c.seed,
        output_dir: c.output_dir.clone(),
    }
}

fn threads(n: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    Ok(())
}

fn real_main(cli: Cli) -> Result<(), CliError> {
    let cmd = match &cli.command {
        Cmd::Train(c) => {
            threads(c.threads)?;
            Command::Train(config::load(TrainConfig::default(), "train", &overrides(c))?)
        }
        Cmd::Attack(c) => {
            threads(c.threads)?;
            Command::Attack(config::load(AttackConfig::default(), "attack", &overrides(c))?)
        }
        Cmd::Theory(c) => {
            threads(c.threads)?;
            Command::Theory(config::load(TheoryConfig::default(), "theory", &overrides(c))?)
        }
        Cmd::Analyze(c) => {
            threads(c.threads)?;
            Command::Analyze(config::load(AnalyzeConfig::default(), "analyze", &overrides(c))?)
        }
        Cmd::Replay { manifest, threads: t } => {
            threads(*t)?;
            let checks = run::replay(manifest)?;
            let mut bad = Vec::new();
            for c in &checks {
                let status = if c.matches() { "ok" } else { "MISMATCH" };
                println!("{status:<8} {}", c.path);
                if !c.matches() {
                    bad.push(c.path.clone());
                }
            }
            if !bad.is_empty() {
                return Err(CliError::ReplayMismatch(bad.join(", ")));
            }
            println!("replay reproduced {} outputs", checks.len());
            return Ok(());
        }
        Cmd::Presets => {
            for p in presets::all() {
                match p.label {
                    Some(label) => println!("{:<8} {:<28} {label}", p.command, p.name),
                    None => println!("{:<8} {}", p.command, p.name),
                }
            }
            return Ok(());
        }
    };
    let (dir, _) = run::execute(cmd)?;
    println!("outputs written to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
