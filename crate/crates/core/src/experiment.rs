//! Experiment runner: load sweeps normalized by the capacity LP, multi-seed
//! replication, CSV/JSON outputs.
//!
//! Every float in results.csv is serialized with 9 significant digits and
//! rows are sorted by (policy, rho, seed), so identical configs and seeds
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{DiagnosticsReport, RunObserver};
use crate::capacity::{capacity_membership, CapacityError};
use crate::config::{SweepSection, ValidatedConfig};
use crate::engine::Engine;
use crate::policies::policy_by_name;
use crate::stochastic::{
    replication_rng, ArrivalModel, RateVector, StochasticError, ARRIVAL_STREAM, SERVICE_STREAM,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("capacity normalization failed: {0}")]
    Capacity(#[from] CapacityError),
    #[error("arrival model rejected the swept rate: {0}")]
    Arrivals(#[from] StochasticError),
    #[error("the popularity shape has zero capacity; cannot normalize the sweep")]
    ZeroCapacity,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One row of results.csv; schema and column order are fixed.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub policy: String,
    pub rho: f64,
    pub total_rate: f64,
    pub seed: u64,
    pub mean_completion: f64,
    pub p95: u64,
    pub p99: u64,
    pub time_avg_queue: f64,
    pub unstable: bool,
    pub max_orthogonality_residual: f64,
    pub max_recursion_residual: f64,
    pub completed: u64,
    pub stranded: u64,
}

pub const CSV_HEADER: &str = "policy,rho,total_rate,seed,mean_completion,p95,p99,\
time_avg_queue,unstable,max_orthogonality_residual,max_recursion_residual,completed,stranded";

/// 9 significant digits, locale-independent.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

impl ResultRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.policy,
            fmt_float(self.rho),
            fmt_float(self.total_rate),
            self.seed,
            fmt_float(self.mean_completion),
            self.p95,
            self.p99,
            fmt_float(self.time_avg_queue),
            self.unstable,
            fmt_float(self.max_orthogonality_residual),
            fmt_float(self.max_recursion_residual),
            self.completed,
            self.stranded,
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    if header != CSV_HEADER {
        return Err(format!("unexpected header: {header}"));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(format!("line {}: {} fields", idx + 2, fields.len()));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", idx + 2));
        let parse_u = |s: &str| s.parse::<u64>().map_err(|e| format!("line {}: {e}", idx + 2));
        rows.push(ResultRow {
            policy: fields[0].to_string(),
            rho: parse_f(fields[1])?,
            total_rate: parse_f(fields[2])?,
            seed: parse_u(fields[3])?,
            mean_completion: parse_f(fields[4])?,
            p95: parse_u(fields[5])?,
            p99: parse_u(fields[6])?,
            time_avg_queue: parse_f(fields[7])?,
            unstable: fields[8] == "true",
            max_orthogonality_residual: parse_f(fields[9])?,
            max_recursion_residual: parse_f(fields[10])?,
            completed: parse_u(fields[11])?,
            stranded: parse_u(fields[12])?,
        });
    }
    Ok(rows)
}

/// Per-cell diagnostics as they land in diagnostics.json.
#[derive(Debug, Clone, Serialize)]
pub struct CellDiagnostics {
    pub policy: String,
    pub rho: f64,
    pub total_rate: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub report: DiagnosticsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellFailure {
    pub policy: String,
    pub rho: f64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub diagnostics: Vec<CellDiagnostics>,
    pub failures: Vec<CellFailure>,
    /// JSONL trace lines, present when tracing was enabled.
    pub trace_lines: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub seed_offset: u64,
    pub parallel: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { seed_offset: 0, parallel: 1 }
    }
}

#[derive(Debug, Clone, Copy)]
struct GridPoint {
    rho: f64,
    total_rate: f64,
}

#[derive(Debug, Clone)]
struct CellSpec {
    policy: String,
    point: GridPoint,
    seed: u64,
}

/// The popularity weights as a unit-total rate vector.
fn shape_rates(v: &ValidatedConfig) -> RateVector {
    let weights = v.config.arrival.popularity.weights(v.catalog.len());
    RateVector::from_pairs(
        v.catalog.types().iter().cloned().zip(weights),
    )
}

/// rho* of the unit-total popularity shape; sweeps scale off this by LP
/// homogeneity.
pub fn shape_capacity(v: &ValidatedConfig) -> Result<f64, ExperimentError> {
    let shape = shape_rates(v);
    let result = capacity_membership(&v.topology, v.service.means(), &shape)?;
    if result.rho_star <= 0.0 {
        return Err(ExperimentError::ZeroCapacity);
    }
    Ok(result.rho_star)
}

fn build_grid(v: &ValidatedConfig) -> Result<Vec<GridPoint>, ExperimentError> {
    let rho_unit = shape_capacity(v)?;
    let points = match &v.config.sweep {
        SweepSection::CapacityFraction { rho } => rho
            .iter()
            .map(|&target| GridPoint { rho: target, total_rate: target / rho_unit })
            .collect(),
        SweepSection::TotalRate { rates } => rates
            .iter()
            .map(|&rate| GridPoint { rho: rate * rho_unit, total_rate: rate })
            .collect(),
    };
    Ok(points)
}

struct CellOutput {
    row: ResultRow,
    diagnostics: CellDiagnostics,
    trace_lines: Vec<String>,
}

fn run_cell(v: &ValidatedConfig, spec: &CellSpec) -> Result<CellOutput, String> {
    let arrivals = ArrivalModel::for_catalog(
        &v.catalog,
        &v.config.arrival.popularity,
        spec.point.total_rate,
        v.config.arrival.cap,
    )
    .map_err(|e| e.to_string())?;
    let policy = policy_by_name(&spec.policy, v.config.fcfs_scan_depth)
        .ok_or_else(|| format!("unknown policy {}", spec.policy))?;
    let mut engine = Engine::new(v.catalog.clone(), v.service.clone(), v.config.trace);
    let mut observer = RunObserver::new(&engine, v.warmup as usize);
    let mut arrival_rng = replication_rng(spec.seed, ARRIVAL_STREAM);
    let mut sim_rng = replication_rng(spec.seed, SERVICE_STREAM);

    let mut trace_lines = Vec::new();
    for _ in 0..v.config.horizon {
        let slot_arrivals = arrivals.sample_arrivals(&mut arrival_rng);
        let outcome =
            engine.step(policy.as_ref(), &slot_arrivals, &mut sim_rng).map_err(|e| e.to_string())?;
        observer.observe(&engine, &outcome);
        if v.config.trace {
            for event in engine.take_trace() {
                let locals = event
                    .type_id
                    .map(|ty| v.catalog.task_type(ty).locals().to_vec());
                let record = serde_json::json!({
                    "policy": spec.policy,
                    "rho": spec.point.rho,
                    "seed": spec.seed,
                    "t": event.t,
                    "event": event.event,
                    "task_id": event.task_id,
                    "type": locals,
                    "server": event.server,
                    "level": event.level,
                });
                trace_lines.push(record.to_string());
            }
        }
    }

    let report = observer.finish(&engine).map_err(|e| e.to_string())?;
    let row = ResultRow {
        policy: spec.policy.clone(),
        rho: spec.point.rho,
        total_rate: spec.point.total_rate,
        seed: spec.seed,
        mean_completion: report.metrics.mean_completion,
        p95: report.metrics.p95_completion,
        p99: report.metrics.p99_completion,
        time_avg_queue: report.metrics.time_avg_total_queue,
        unstable: report.metrics.unstable,
        max_orthogonality_residual: report.diagnostics.max_orthogonality_residual,
        max_recursion_residual: report.diagnostics.max_recursion_residual,
        completed: report.metrics.completed_count,
        stranded: report.metrics.stranded_count,
    };
    let diagnostics = CellDiagnostics {
        policy: spec.policy.clone(),
        rho: spec.point.rho,
        total_rate: spec.point.total_rate,
        seed: spec.seed,
        report: report.diagnostics,
    };
    Ok(CellOutput { row, diagnostics, trace_lines })
}

/// Runs every (policy, load, seed) cell. Panicking or erroring cells are
/// recorded as failures; the rest of the run continues.
pub fn run_experiment(
    v: &ValidatedConfig,
    opts: &RunOptions,
) -> Result<ExperimentOutput, ExperimentError> {
    let grid = build_grid(v)?;
    let mut cells = Vec::new();
    for policy in &v.config.policies {
        for point in &grid {
            for seed in &v.config.seeds {
                cells.push(CellSpec {
                    policy: policy.clone(),
                    point: *point,
                    seed: seed + opts.seed_offset,
                });
            }
        }
    }

    let execute = |spec: &CellSpec| -> Result<CellOutput, String> {
        catch_unwind(AssertUnwindSafe(|| run_cell(v, spec))).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            Err(format!("cell panicked: {msg}"))
        })
    };

    let outcomes: Vec<(CellSpec, Result<CellOutput, String>)> = if opts.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            cells.par_iter().map(|spec| (spec.clone(), execute(spec))).collect()
        })
    } else {
        cells.iter().map(|spec| (spec.clone(), execute(spec))).collect()
    };

    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    let mut failures = Vec::new();
    let mut trace_lines = Vec::new();
    for (spec, outcome) in outcomes {
        match outcome {
            Ok(cell) => {
                rows.push(cell.row);
                diagnostics.push(cell.diagnostics);
                trace_lines.extend(cell.trace_lines);
            }
            Err(message) => failures.push(CellFailure {
                policy: spec.policy,
                rho: spec.point.rho,
                seed: spec.seed,
                message,
            }),
        }
    }

    let sort_key = |r: &ResultRow| (r.policy.clone(), r.rho.to_bits(), r.seed);
    rows.sort_by_key(sort_key);
    diagnostics.sort_by_key(|d| (d.policy.clone(), d.rho.to_bits(), d.seed));
    failures.sort_by_key(|f| (f.policy.clone(), f.rho.to_bits(), f.seed));
    Ok(ExperimentOutput { rows, diagnostics, failures, trace_lines })
}

/// One point of a per-policy sweep curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub rho: f64,
    pub total_rate: f64,
    pub seeds: usize,
    pub mean_completion_avg: f64,
    /// Standard error across seeds; 0 when fewer than 2 seeds.
    pub mean_completion_stderr: f64,
    pub unstable_seeds: usize,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
    /// Smallest swept rho judged unstable by every seed; None when no load
    /// in the sweep was.
    pub onsets: BTreeMap<String, Option<f64>>,
    pub warnings: Vec<String>,
}

pub fn sweep_report(rows: &[ResultRow]) -> SweepReport {
    let mut grouped: BTreeMap<String, BTreeMap<u64, Vec<&ResultRow>>> = BTreeMap::new();
    for row in rows {
        grouped
            .entry(row.policy.clone())
            .or_default()
            .entry(row.rho.to_bits())
            .or_default()
            .push(row);
    }
    let expected_seeds =
        grouped.values().flat_map(|by_rho| by_rho.values().map(Vec::len)).max().unwrap_or(0);

    let mut curves = BTreeMap::new();
    let mut onsets = BTreeMap::new();
    let mut warnings = Vec::new();
    for (policy, by_rho) in &grouped {
        let mut points = Vec::new();
        let mut onset: Option<f64> = None;
        for cell_rows in by_rho.values() {
            let rho = cell_rows[0].rho;
            let n = cell_rows.len();
            if n < expected_seeds {
                warnings.push(format!(
                    "{policy} at rho {}: {n} of {expected_seeds} seeds present",
                    fmt_float(rho)
                ));
            }
            let means: Vec<f64> = cell_rows.iter().map(|r| r.mean_completion).collect();
            let avg = means.iter().sum::<f64>() / n as f64;
            let stderr = if n >= 2 {
                let var =
                    means.iter().map(|m| (m - avg) * (m - avg)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            let unstable_seeds = cell_rows.iter().filter(|r| r.unstable).count();
            if unstable_seeds == n && onset.is_none() {
                onset = Some(rho);
            }
            points.push(CurvePoint {
                rho,
                total_rate: cell_rows[0].total_rate,
                seeds: n,
                mean_completion_avg: avg,
                mean_completion_stderr: stderr,
                unstable_seeds,
            });
        }
        curves.insert(policy.clone(), points);
        onsets.insert(policy.clone(), onset);
    }
    SweepReport { curves, onsets, warnings }
}

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(
        "rho,total_rate,seeds,mean_completion_avg,mean_completion_stderr,unstable_seeds\n",
    );
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_float(p.rho),
            fmt_float(p.total_rate),
            p.seeds,
            fmt_float(p.mean_completion_avg),
            fmt_float(p.mean_completion_stderr),
            p.unstable_seeds,
        ));
    }
    out
}

/// Writes results.csv, curves/<policy>.csv, diagnostics.json and, when
/// tracing is on, trace.jsonl under `dir`.
pub fn write_outputs(dir: &Path, output: &ExperimentOutput) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results_csv(&output.rows))?;

    let report = sweep_report(&output.rows);
    let curves_dir = dir.join("curves");
    fs::create_dir_all(&curves_dir)?;
    for (policy, points) in &report.curves {
        fs::write(curves_dir.join(format!("{policy}.csv")), curve_csv(points))?;
    }

    #[derive(Serialize)]
    struct DiagnosticsFile<'a> {
        onsets: &'a BTreeMap<String, Option<f64>>,
        warnings: &'a [String],
        failures: &'a [CellFailure],
        cells: &'a [CellDiagnostics],
    }
    let diag = DiagnosticsFile {
        onsets: &report.onsets,
        warnings: &report.warnings,
        failures: &output.failures,
        cells: &output.diagnostics,
    };
    let mut json = serde_json::to_string_pretty(&diag).expect("serializable");
    json.push('\n');
    fs::write(dir.join("diagnostics.json"), json)?;

    if !output.trace_lines.is_empty() {
        let mut file = fs::File::create(dir.join("trace.jsonl"))?;
        for line in &output.trace_lines {
            writeln!(file, "{line}")?;
        }
    }
    Ok(())
}
