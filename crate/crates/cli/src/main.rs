use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use covshift::harness::{self, report, run_csv_mode, CampaignConfig, CsvConfig, Registry, Stage, StageReport};

/// Patch-test campaign runner for constrained density-ratio estimation.
///
/// Exit status: 0 when every registered criterion passes, 1 when any does
/// not, 2 on errors.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage.
    Run {
        #[arg(long)]
        stage: Stage,
        /// Campaign config (TOML); pre-registered defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "artifacts")]
        out: PathBuf,
    },
    /// Run an inclusive range of stages in order, e.g. `S0:S7`.
    Sweep {
        #[arg(long, default_value = "S0:S7")]
        stages: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "artifacts")]
        out: PathBuf,
    },
    /// Summarize the artifacts of a directory.
    Report {
        #[arg(long, default_value = "artifacts")]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Fit on a two-sample CSV pair (no oracle, no criteria).
    Csv {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "artifacts")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

fn campaign(path: Option<&Path>) -> Result<(CampaignConfig, Registry)> {
    let config = match path {
        Some(p) => CampaignConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => CampaignConfig::default(),
    };
    let registry = harness::load_registry(&config)?;
    Ok((config, registry))
}

fn verdict(reports: &[StageReport]) -> ExitCode {
    if reports.iter().all(StageReport::all_pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { stage, config, out } => {
            let (config, registry) = campaign(config.as_deref())?;
            let r = harness::run_stage(stage, &config, &registry, &out)?;
            print!("{}", report::render_text(std::slice::from_ref(&r)));
            Ok(verdict(&[r]))
        }
        Command::Sweep { stages, config, out } => {
            let stages = Stage::parse_range(&stages)?;
            let (config, registry) = campaign(config.as_deref())?;
            let mut reports = Vec::new();
            for s in stages {
                let t = std::time::Instant::now();
                reports.push(harness::run_stage(s, &config, &registry, &out)?);
                eprintln!("{s} done in {:.1?}", t.elapsed());
            }
            print!("{}", report::render_text(&reports));
            Ok(verdict(&reports))
        }
        Command::Report { dir, format } => {
            let reports = report::collect(&dir)?;
            anyhow::ensure!(!reports.is_empty(), "no artifacts in {}", dir.display());
            match format {
                Format::Text => print!("{}", report::render_text(&reports)),
                Format::Csv => print!("{}", report::render_csv(&reports)?),
            }
            Ok(verdict(&reports))
        }
        Command::Csv { source, target, config, out } => {
            let config = match config {
                Some(p) => CsvConfig::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => CsvConfig::default(),
            };
            let registry = Registry::default_registry();
            let (r, path) = run_csv_mode(&source, &target, &config, &registry, &out)?;
            println!("{}", serde_json::to_string_pretty(&r.diagnostics)?);
            eprintln!("wrote {}", path.display());
            Ok(verdict(&[r]))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
