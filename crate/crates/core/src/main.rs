use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use gbpandas::capacity::capacity_membership;
use gbpandas::config::ExperimentConfig;
use gbpandas::experiment::{run_experiment, sweep_report, write_outputs, RunOptions};
use gbpandas::stochastic::RateVector;
use gbpandas::topology::TaskType;

#[derive(Parser)]
#[command(
    name = "gbpandas",
    about = "Affinity-scheduling simulator: GB-PANDAS and baselines, capacity LP, sweep reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Added to every seed in the config.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Concurrent cells.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Solve the capacity LP for a rate vector and print the witness.
    Capacity {
        /// Config file providing the topology and service sections.
        #[arg(long)]
        config: PathBuf,
        /// Rate-vector file: {"entries": [{"locals": [1,3,5], "rate": 0.5}]}.
        #[arg(long)]
        rates: PathBuf,
    },
    /// Rebuild sweep curves and onsets from an existing results.csv.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
struct RateFile {
    entries: Vec<RateEntry>,
}

#[derive(Deserialize)]
struct RateEntry {
    locals: Vec<usize>,
    rate: f64,
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

fn cmd_run(
    config: PathBuf,
    out: Option<PathBuf>,
    seed_offset: u64,
    parallel: usize,
) -> Result<ExitCode> {
    let cfg = load_config(&config)?;
    let validated = match cfg.validate() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(1));
        }
    };
    let out_dir = out
        .or_else(|| validated.config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let opts = RunOptions { seed_offset, parallel: parallel.max(1) };
    let output = run_experiment(&validated, &opts)?;
    write_outputs(&out_dir, &output)?;

    let report = sweep_report(&output.rows);
    println!("wrote {} rows to {}", output.rows.len(), out_dir.join("results.csv").display());
    for (policy, onset) in &report.onsets {
        match onset {
            Some(rho) => println!("{policy}: instability onset at rho = {rho}"),
            None => println!("{policy}: no instability onset in sweep"),
        }
    }
    if !output.failures.is_empty() {
        eprintln!("{} cell(s) failed; see diagnostics.json", output.failures.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_capacity(config: PathBuf, rates: PathBuf) -> Result<ExitCode> {
    let cfg = load_config(&config)?;
    let validated = match cfg.validate() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(1));
        }
    };
    let text =
        fs::read_to_string(&rates).with_context(|| format!("reading {}", rates.display()))?;
    let file: RateFile = serde_json::from_str(&text).context("parsing rate-vector file")?;
    let mut pairs = Vec::new();
    for entry in file.entries {
        let ty = TaskType::new(entry.locals)?;
        if !entry.rate.is_finite() || entry.rate < 0.0 {
            bail!("rate {} for {ty} must be finite and nonnegative", entry.rate);
        }
        pairs.push((ty, entry.rate));
    }
    let vector = RateVector::from_pairs(pairs);
    let result = capacity_membership(&validated.topology, validated.service.means(), &vector)?;

    let witness: Vec<serde_json::Value> = result
        .witness
        .entries()
        .iter()
        .map(|(ty, row)| {
            serde_json::json!({
                "locals": ty.locals(),
                "shares": row,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "rho_star": result.rho_star,
        "feasible": result.feasible,
        "delta": result.delta,
        "witness": witness,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(results: PathBuf, out: PathBuf) -> Result<ExitCode> {
    let text =
        fs::read_to_string(&results).with_context(|| format!("reading {}", results.display()))?;
    let rows = match gbpandas::experiment::parse_results_csv(&text) {
        Ok(rows) => rows,
        Err(e) => {
            eprintln!("invalid results file: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    let output = gbpandas::experiment::ExperimentOutput {
        rows,
        diagnostics: Vec::new(),
        failures: Vec::new(),
        trace_lines: Vec::new(),
    };
    write_outputs(&out, &output)?;
    let report = sweep_report(&output.rows);
    for (policy, onset) in &report.onsets {
        match onset {
            Some(rho) => println!("{policy}: instability onset at rho = {rho}"),
            None => println!("{policy}: no instability onset in sweep"),
        }
    }
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed_offset, parallel } => {
            cmd_run(config, out, seed_offset, parallel)
        }
        Command::Capacity { config, rates } => cmd_capacity(config, rates),
        Command::Report { results, out } => cmd_report(results, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
