//! `lcs`: scenario-driven runner for the LCS geometry pipelines.
//!
//! One scenario per invocation; the report is a single JSON object on
//! stdout. Exit codes: 0 all checks pass, 1 a check failed, 2 the
//! configuration was invalid.

mod pipelines;
mod scenario;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use lcs_geom::CheckResult;

use pipelines::TolSet;
use scenario::{load_scenario, Pipeline, Scenario};

#[derive(Debug, Parser)]
#[command(name = "lcs", about = "Scenario runner for LCS geometry pipelines", version)]
struct Cli {
    /// Multiply every applied tolerance by this factor.
    #[arg(long, global = true, default_value_t = 1.0)]
    tolerance_scale: f64,

    /// Override the scenario's RK4 step count (positive multiple of 4).
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Write per-seed plot data as a CSV file beside the scenario.
    #[arg(long, global = true)]
    emit_data: bool,

    /// Override the scenario's RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate an LCS structure on random domain samples.
    CheckLcs { scenario: PathBuf },
    /// Run the Darboux pipeline on a tube cover, with gluing if overlaps
    /// are declared.
    Darboux { scenario: PathBuf },
    /// Build the homotopy one-form and integrate the Moser flow.
    MoserFlow { scenario: PathBuf },
    /// Check the cotangent local model and its rescalings.
    Cotangent { scenario: PathBuf },
    /// Run the full pipeline for a Lagrangian submanifold.
    Weinstein { scenario: PathBuf },
    /// List the scenario files in a directory.
    ListScenarios {
        #[arg(default_value = "scenarios")]
        dir: PathBuf,
    },
}

/// The one JSON object a run emits.
#[derive(Serialize)]
struct RunReport<'a> {
    scenario: &'a str,
    pipeline: &'a str,
    seed: u64,
    samples: usize,
    steps: usize,
    tolerances: &'a BTreeMap<String, f64>,
    checks: &'a [CheckResult],
    metrics: &'a BTreeMap<String, f64>,
    pass: bool,
}

fn main() {
    std::process::exit(run_main());
}

fn run_main() -> i32 {
    let cli = Cli::parse();
    let (path, expected) = match &cli.command {
        Command::ListScenarios { dir } => return list_scenarios(dir),
        Command::CheckLcs { scenario } => (scenario, Pipeline::CheckLcs),
        Command::Darboux { scenario } => (scenario, Pipeline::Darboux),
        Command::MoserFlow { scenario } => (scenario, Pipeline::MoserFlow),
        Command::Cotangent { scenario } => (scenario, Pipeline::Cotangent),
        Command::Weinstein { scenario } => (scenario, Pipeline::Weinstein),
    };
    match run_scenario(&cli, path, expected) {
        Ok(pass) => {
            if pass {
                0
            } else {
                1
            }
        }
        Err(err) => {
            eprintln!("configuration error: {err:#}");
            2
        }
    }
}

fn run_scenario(cli: &Cli, path: &Path, expected: Pipeline) -> anyhow::Result<bool> {
    let scenario = load_scenario(path)?;
    if scenario.file.pipeline != expected {
        anyhow::bail!(
            "pipeline: scenario declares `{}`, invoked as `{}`",
            scenario.file.pipeline.name(),
            expected.name()
        );
    }
    if !cli.tolerance_scale.is_finite() || cli.tolerance_scale <= 0.0 {
        anyhow::bail!("--tolerance-scale: must be a positive finite number");
    }
    let steps = cli.steps.unwrap_or(scenario.file.steps);
    if steps == 0 || steps % 4 != 0 {
        anyhow::bail!("--steps: must be a positive multiple of 4");
    }
    let seed = cli.seed.unwrap_or(scenario.file.seed);
    let tols = TolSet::build(&scenario, cli.tolerance_scale)?;

    let (report, rows) = pipelines::run(&scenario, &tols, steps, seed)?;
    let out = RunReport {
        scenario: &report.scenario,
        pipeline: &report.pipeline,
        seed,
        samples: report.samples,
        steps,
        tolerances: tols.map(),
        checks: &report.checks,
        metrics: &report.metrics,
        pass: report.pass,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("report serializes")
    );
    if cli.emit_data {
        let csv_path = path.with_extension("csv");
        pipelines::write_csv(&rows, scenario.file.dimension, &csv_path)?;
    }
    Ok(report.pass)
}

/// Prints one line per scenario file: name, pipeline and dimension, or
/// the load error. Only an unreadable directory is fatal.
fn list_scenarios(dir: &Path) -> i32 {
    let entries = match std::fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(err) => {
            eprintln!("configuration error: cannot read {}: {err}", dir.display());
            return 2;
        }
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "toml").unwrap_or(false))
        .collect();
    paths.sort();
    for p in paths {
        match load_scenario(&p) {
            Ok(Scenario { file, .. }) => println!(
                "{}\t{}\tdim {}\t{}",
                file.name,
                file.pipeline.name(),
                file.dimension,
                p.display()
            ),
            Err(err) => println!("{}\tinvalid: {err:#}", p.display()),
        }
    }
    0
}
