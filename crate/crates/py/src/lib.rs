//! Python bindings: the cluster topology, the capacity LP, service-time
//! sampling and the experiment runner, exposed as the `gbpandas_py` module.
//!
//! Build with `cargo build -p gbpandas-py --release`, then rename/copy
//! `libgbpandas_py.so` to `gbpandas_py.so` somewhere on `sys.path` (see
//! python/smoke_test.py).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gbpandas::capacity;
use gbpandas::config::ExperimentConfig;
use gbpandas::experiment::{results_csv, run_experiment, RunOptions};
use gbpandas::stochastic::{
    replication_rng, RateVector, ServiceFamily, ServiceModel, SERVICE_STREAM,
};
use gbpandas::topology::{ClusterTopology, TaskType};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Balanced-tree cluster layout with 1-based server indices.
#[pyclass(name = "Topology")]
struct PyTopology {
    inner: ClusterTopology,
}

#[pymethods]
impl PyTopology {
    /// Topology(branching, levels=None): levels defaults to len(branching)+1.
    #[new]
    #[pyo3(signature = (branching, levels=None))]
    fn new(branching: Vec<usize>, levels: Option<usize>) -> PyResult<Self> {
        let levels = levels.unwrap_or(branching.len() + 1);
        Ok(Self { inner: ClusterTopology::new(branching, levels).map_err(value_err)? })
    }

    #[getter]
    fn servers(&self) -> usize {
        self.inner.servers()
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.levels()
    }

    /// Locality level of `server` for the task type with these replica
    /// servers (1 = data on disk).
    fn level(&self, locals: Vec<usize>, server: usize) -> PyResult<usize> {
        let ty = TaskType::new(locals).map_err(value_err)?;
        self.inner.level(&ty, server).map_err(value_err)
    }

    /// All servers at exactly level n for the given replica set.
    fn local_set(&self, locals: Vec<usize>, n: usize) -> PyResult<Vec<usize>> {
        let ty = TaskType::new(locals).map_err(value_err)?;
        self.inner.local_set(&ty, n).map_err(value_err)
    }

    /// All C(M, d) task types in lexicographic order.
    fn enumerate_types(&self, d: usize) -> PyResult<Vec<Vec<usize>>> {
        let types = self.inner.enumerate_types(d).map_err(value_err)?;
        Ok(types.into_iter().map(|ty| ty.locals().to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Topology(branching={:?}, levels={}, servers={})",
            self.inner.branching(),
            self.inner.levels(),
            self.inner.servers()
        )
    }
}

/// Solve the capacity LP: minimize the maximum server load over all splits
/// of the given per-type rates. `entries` is a list of (locals, rate) pairs.
/// Returns {"rho_star", "feasible", "delta", "witness"} where the witness
/// maps each type to its per-server shares.
#[pyfunction]
fn capacity_membership(
    py: Python<'_>,
    topology: &PyTopology,
    means: Vec<f64>,
    entries: Vec<(Vec<usize>, f64)>,
) -> PyResult<Py<PyDict>> {
    let mut pairs = Vec::with_capacity(entries.len());
    for (locals, rate) in entries {
        pairs.push((TaskType::new(locals).map_err(value_err)?, rate));
    }
    let rates = RateVector::from_pairs(pairs);
    let result = capacity::capacity_membership(&topology.inner, &means, &rates)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;

    let witness: Vec<(Vec<usize>, Vec<f64>)> = result
        .witness
        .entries()
        .iter()
        .map(|(ty, row)| (ty.locals().to_vec(), row.clone()))
        .collect();
    let dict = PyDict::new(py);
    dict.set_item("rho_star", result.rho_star)?;
    dict.set_item("feasible", result.feasible)?;
    dict.set_item("delta", result.delta)?;
    dict.set_item("witness", witness)?;
    Ok(dict.into())
}

/// Draw `draws` integer service times at locality level `level` from the
/// given family ("geometric" or "lognormal") with per-level means.
#[pyfunction]
fn sample_service(
    family: &str,
    means: Vec<f64>,
    level: usize,
    draws: u64,
    seed: u64,
) -> PyResult<Vec<u64>> {
    let family = match family {
        "geometric" => ServiceFamily::Geometric,
        "lognormal" => ServiceFamily::Lognormal,
        other => return Err(value_err(format!("unknown family {other:?}"))),
    };
    let model = ServiceModel::new(family, means).map_err(value_err)?;
    if level == 0 || level > model.levels() {
        return Err(value_err(format!("level {level} out of range")));
    }
    let mut rng = replication_rng(seed, SERVICE_STREAM);
    Ok((0..draws).map(|_| model.sample_service(level, &mut rng)).collect())
}

/// Actual per-level mean service times (1/alpha_n) of the integer-slot
/// samples; above the configured means for the log-normal family.
#[pyfunction]
fn effective_means(family: &str, means: Vec<f64>) -> PyResult<Vec<f64>> {
    let family = match family {
        "geometric" => ServiceFamily::Geometric,
        "lognormal" => ServiceFamily::Lognormal,
        other => return Err(value_err(format!("unknown family {other:?}"))),
    };
    Ok(ServiceModel::new(family, means).map_err(value_err)?.means().to_vec())
}

/// Run the experiment described by a config JSON string and return the
/// results.csv content. Same cells, seeds and formatting as the CLI.
#[pyfunction]
#[pyo3(signature = (config_json, seed_offset=0, parallel=1))]
fn run_experiment_csv(
    py: Python<'_>,
    config_json: &str,
    seed_offset: u64,
    parallel: usize,
) -> PyResult<String> {
    let config = ExperimentConfig::from_json(config_json).map_err(value_err)?;
    let validated = config.validate().map_err(value_err)?;
    let opts = RunOptions { seed_offset, parallel: parallel.max(1) };
    let output = py
        .detach(|| run_experiment(&validated, &opts))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    if !output.failures.is_empty() {
        return Err(PyRuntimeError::new_err(format!(
            "{} cell(s) failed: {}",
            output.failures.len(),
            output.failures[0].message
        )));
    }
    Ok(results_csv(&output.rows))
}

#[pymodule]
fn gbpandas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTopology>()?;
    m.add_function(wrap_pyfunction!(capacity_membership, m)?)?;
    m.add_function(wrap_pyfunction!(sample_service, m)?)?;
    m.add_function(wrap_pyfunction!(effective_means, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_csv, m)?)?;
    m.add("POLICY_NAMES", gbpandas::policies::POLICY_NAMES.to_vec())?;
    Ok(())
}
