//! Capacity-region computation: the LP membership test, decomposition
//! witnesses in both the coarse (per type, server) and refined (per type,
//! replica, server) forms, and a brute-force grid oracle for desk-scale
//! validation of the LP.
//!
//! A rate vector is supportable iff it admits a decomposition whose
//! per-server load (service means weighted by locality level) stays below 1.
//! `capacity_membership` minimizes the maximum server load rho over all
//! decompositions; membership is rho* < 1.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::simplex::{self, SimplexError, StandardForm};
use crate::stochastic::RateVector;
use crate::topology::{ClusterTopology, TaskType, TopologyError};

#[derive(Debug, Error)]
pub enum CapacityError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("solver failed: {0}")]
    Solver(#[from] SimplexError),
    #[error("rates must be finite and nonnegative ({0})")]
    BadRate(String),
    #[error("service means cover {means} levels but the topology has {levels}")]
    MeansMismatch { means: usize, levels: usize },
    #[error("brute force refused: decision dimension {dims} exceeds {limit}")]
    OracleTooLarge { dims: usize, limit: usize },
    #[error("grid step must be positive, got {0}")]
    BadGridStep(f64),
}

/// Rates split per (type, destination server): entry `rates[ty][m - 1]` is
/// the share of type `ty` processed by server m.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    servers: usize,
    entries: BTreeMap<TaskType, Vec<f64>>,
}

impl Decomposition {
    pub fn new(servers: usize, entries: BTreeMap<TaskType, Vec<f64>>) -> Self {
        Self { servers, entries }
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn entries(&self) -> &BTreeMap<TaskType, Vec<f64>> {
        &self.entries
    }

    pub fn rate(&self, ty: &TaskType, server: usize) -> f64 {
        self.entries.get(ty).map_or(0.0, |row| row[server - 1])
    }

    /// Total rate of each type across servers.
    pub fn type_totals(&self) -> BTreeMap<TaskType, f64> {
        self.entries
            .iter()
            .map(|(ty, row)| (ty.clone(), row.iter().sum()))
            .collect()
    }

    /// Per-server load: sum over types of rate times the service mean at the
    /// type's locality level for that server.
    pub fn server_loads(
        &self,
        topo: &ClusterTopology,
        means: &[f64],
    ) -> Result<Vec<f64>, CapacityError> {
        check_means(topo, means)?;
        let mut loads = vec![0.0; self.servers];
        for (ty, row) in &self.entries {
            for m in 1..=self.servers {
                let level = topo.level(ty, m)?;
                loads[m - 1] += row[m - 1] * means[level - 1];
            }
        }
        Ok(loads)
    }

    /// Checks nonnegativity and that per-type totals match `rates`.
    pub fn validate(&self, rates: &RateVector, tol: f64) -> Result<(), CapacityError> {
        for (ty, row) in &self.entries {
            if row.len() != self.servers {
                return Err(CapacityError::BadRate(format!("row length for {ty}")));
            }
            if row.iter().any(|&x| x < -tol || !x.is_finite()) {
                return Err(CapacityError::BadRate(format!("negative share for {ty}")));
            }
            let total: f64 = row.iter().sum();
            if (total - rates.get(ty)).abs() > tol {
                return Err(CapacityError::BadRate(format!(
                    "type {ty} decomposes to {total}, expected {}",
                    rates.get(ty)
                )));
            }
        }
        Ok(())
    }
}

/// The refined witness of the capacity set's equivalent form: rates split per
/// (type, replica index, server). `entries[ty][i][m - 1]` is the share of
/// type `ty` that is 1-local to its i-th replica server and processed by m.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDecomposition {
    servers: usize,
    entries: BTreeMap<TaskType, Vec<Vec<f64>>>,
}

impl RefinedDecomposition {
    pub fn new(servers: usize, entries: BTreeMap<TaskType, Vec<Vec<f64>>>) -> Self {
        Self { servers, entries }
    }

    pub fn entries(&self) -> &BTreeMap<TaskType, Vec<Vec<f64>>> {
        &self.entries
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    /// Per-server loads, grouping the replica components of each (type,
    /// server) cell with an exact sum so they match the coarse form bit for
    /// bit.
    pub fn server_loads(
        &self,
        topo: &ClusterTopology,
        means: &[f64],
    ) -> Result<Vec<f64>, CapacityError> {
        check_means(topo, means)?;
        let mut loads = vec![0.0; self.servers];
        let mut parts = Vec::new();
        for (ty, split) in &self.entries {
            for m in 1..=self.servers {
                parts.clear();
                parts.extend(split.iter().map(|per_server| per_server[m - 1]));
                let level = topo.level(ty, m)?;
                loads[m - 1] += exact_sum(&parts) * means[level - 1];
            }
        }
        Ok(loads)
    }

    /// Checks nonnegativity and that the replica components of each type sum
    /// to its rate.
    pub fn validate(&self, rates: &RateVector, tol: f64) -> Result<(), CapacityError> {
        for (ty, split) in &self.entries {
            if split.len() != ty.replicas() {
                return Err(CapacityError::BadRate(format!("replica rows for {ty}")));
            }
            let mut total = 0.0;
            for row in split {
                if row.len() != self.servers {
                    return Err(CapacityError::BadRate(format!("row length for {ty}")));
                }
                if row.iter().any(|&x| x < -tol || !x.is_finite()) {
                    return Err(CapacityError::BadRate(format!("negative share for {ty}")));
                }
                total += row.iter().sum::<f64>();
            }
            if (total - rates.get(ty)).abs() > tol {
                return Err(CapacityError::BadRate(format!(
                    "type {ty} refines to {total}, expected {}",
                    rates.get(ty)
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of a membership test.
#[derive(Debug, Clone)]
pub struct CapacityResult {
    /// Minimal achievable maximum server load.
    pub rho_star: f64,
    /// rho* < 1 (with a small guard against float noise).
    pub feasible: bool,
    /// Load margin 1/rho* - 1; None when rho* = 0.
    pub delta: Option<f64>,
    pub witness: Decomposition,
}

const FEASIBILITY_GUARD: f64 = 1e-9;

fn check_means(topo: &ClusterTopology, means: &[f64]) -> Result<(), CapacityError> {
    if means.len() != topo.levels() {
        return Err(CapacityError::MeansMismatch { means: means.len(), levels: topo.levels() });
    }
    Ok(())
}

fn capacity_result(rho: f64, witness: Decomposition) -> CapacityResult {
    let rho_star = if rho.abs() < 1e-12 { 0.0 } else { rho };
    CapacityResult {
        rho_star,
        feasible: rho_star < 1.0 - FEASIBILITY_GUARD,
        delta: (rho_star > 0.0).then(|| 1.0 / rho_star - 1.0),
        witness,
    }
}

fn positive_rates(rates: &RateVector) -> Result<Vec<(TaskType, f64)>, CapacityError> {
    let mut out = Vec::new();
    for (ty, rate) in rates.iter() {
        if !rate.is_finite() || rate < 0.0 {
            return Err(CapacityError::BadRate(format!("{ty} -> {rate}")));
        }
        if rate > 0.0 {
            out.push((ty.clone(), rate));
        }
    }
    Ok(out)
}

/// Solves  min rho  s.t.  sum_m x[ty][m] = rate(ty),  per-server load <= rho,
/// x >= 0, and returns the optimum with an optimal decomposition.
pub fn capacity_membership(
    topo: &ClusterTopology,
    means: &[f64],
    rates: &RateVector,
) -> Result<CapacityResult, CapacityError> {
    check_means(topo, means)?;
    let active = positive_rates(rates)?;
    let m_count = topo.servers();
    if active.is_empty() {
        let witness = Decomposition::new(m_count, BTreeMap::new());
        return Ok(capacity_result(0.0, witness));
    }

    let t_count = active.len();
    // Columns: x[t * M + (m-1)], then rho, then M slacks.
    let rho_col = t_count * m_count;
    let ncols = rho_col + 1 + m_count;
    let nrows = t_count + m_count;
    let mut rows = Vec::with_capacity(nrows);
    let mut rhs = Vec::with_capacity(nrows);

    for (t, (_, rate)) in active.iter().enumerate() {
        let mut row = vec![0.0; ncols];
        for m in 0..m_count {
            row[t * m_count + m] = 1.0;
        }
        rows.push(row);
        rhs.push(*rate);
    }
    for m in 1..=m_count {
        let mut row = vec![0.0; ncols];
        for (t, (ty, _)) in active.iter().enumerate() {
            let level = topo.level(ty, m)?;
            row[t * m_count + (m - 1)] = means[level - 1];
        }
        row[rho_col] = -1.0;
        row[rho_col + 1 + (m - 1)] = 1.0;
        rows.push(row);
        rhs.push(0.0);
    }

    let mut objective = vec![0.0; ncols];
    objective[rho_col] = 1.0;
    let solution = simplex::solve(&StandardForm { ncols, rows, rhs, objective })?;

    let mut entries = BTreeMap::new();
    for (t, (ty, _)) in active.iter().enumerate() {
        let row: Vec<f64> =
            (0..m_count).map(|m| solution.x[t * m_count + m]).collect();
        entries.insert(ty.clone(), row);
    }
    Ok(capacity_result(solution.objective, Decomposition::new(m_count, entries)))
}

/// Splits `x` into `d` nonnegative parts, each within one ulp of x/d, whose
/// exact real sum is within half an ulp of `x` — so [`exact_sum`] recovers
/// `x` exactly.
fn split_exact(x: f64, d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![x];
    }
    let a = x / d as f64;
    let (p_hi, p_lo) = two_prod(a, (d - 1) as f64);
    let (s, e) = two_sum(x, -p_hi);
    let last = s + (e - p_lo);
    let mut parts = vec![a; d - 1];
    parts.push(last);
    parts
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let ap = s - b;
    let bp = s - ap;
    (s, (a - ap) + (b - bp))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, f64::mul_add(a, b, -p))
}

/// Sum with a double-double accumulator, rounded once at the end.
fn exact_sum(xs: &[f64]) -> f64 {
    let mut hi = 0.0;
    let mut lo = 0.0;
    for &x in xs {
        let (s, e) = two_sum(hi, x);
        hi = s;
        lo += e;
    }
    hi + lo
}

/// Splits each (type, server) share evenly over the type's replica servers,
/// witnessing membership in the refined capacity set. Loads are unchanged;
/// [`coarsen_decomposition`] inverts it exactly.
pub fn refine_decomposition(dec: &Decomposition) -> RefinedDecomposition {
    let servers = dec.servers();
    let mut entries = BTreeMap::new();
    for (ty, row) in dec.entries() {
        let d = ty.replicas();
        let mut split = vec![vec![0.0; servers]; d];
        for (m_idx, &share) in row.iter().enumerate() {
            for (i, part) in split_exact(share, d).into_iter().enumerate() {
                split[i][m_idx] = part;
            }
        }
        entries.insert(ty.clone(), split);
    }
    RefinedDecomposition::new(servers, entries)
}

/// Sums the replica components of each (type, server) cell back into the
/// coarse form.
pub fn coarsen_decomposition(refined: &RefinedDecomposition) -> Decomposition {
    let servers = refined.servers();
    let mut entries = BTreeMap::new();
    let mut parts = Vec::new();
    for (ty, split) in refined.entries() {
        let mut row = vec![0.0; servers];
        for (m_idx, slot) in row.iter_mut().enumerate() {
            parts.clear();
            parts.extend(split.iter().map(|per_server| per_server[m_idx]));
            *slot = exact_sum(&parts);
        }
        entries.insert(ty.clone(), row);
    }
    Decomposition::new(servers, entries)
}

const ORACLE_DIM_LIMIT: usize = 6;

/// Worst-case gap between the grid optimum and the true optimum for
/// [`brute_force_membership`].
pub fn oracle_bound(
    topo: &ClusterTopology,
    means: &[f64],
    rates: &RateVector,
    grid_step: f64,
) -> f64 {
    let mu_max = means.iter().cloned().fold(0.0, f64::max);
    grid_step * rates.total() * mu_max * topo.servers() as f64
}

/// Exhaustive search over per-type splits on a fraction grid of step
/// `grid_step`. Refuses instances with more than 6 decision dimensions;
/// the result is within [`oracle_bound`] of the true optimum.
pub fn brute_force_membership(
    topo: &ClusterTopology,
    means: &[f64],
    rates: &RateVector,
    grid_step: f64,
) -> Result<CapacityResult, CapacityError> {
    check_means(topo, means)?;
    if !(grid_step > 0.0) {
        return Err(CapacityError::BadGridStep(grid_step));
    }
    let active = positive_rates(rates)?;
    let m_count = topo.servers();
    let dims = active.len() * m_count;
    if dims > ORACLE_DIM_LIMIT {
        return Err(CapacityError::OracleTooLarge { dims, limit: ORACLE_DIM_LIMIT });
    }
    if active.is_empty() {
        return Ok(capacity_result(0.0, Decomposition::new(m_count, BTreeMap::new())));
    }

    let k = (1.0 / grid_step).round().max(1.0) as u32;
    // Service mean per (type index, server index).
    let mut mu: Vec<Vec<f64>> = Vec::with_capacity(active.len());
    for (ty, _) in &active {
        let mut row = Vec::with_capacity(m_count);
        for m in 1..=m_count {
            row.push(means[topo.level(ty, m)? - 1]);
        }
        mu.push(row);
    }

    struct Search<'a> {
        active: &'a [(TaskType, f64)],
        mu: &'a [Vec<f64>],
        k: u32,
        m_count: usize,
        loads: Vec<f64>,
        assignment: Vec<Vec<u32>>,
        best: f64,
        best_assignment: Vec<Vec<u32>>,
    }

    impl Search<'_> {
        fn run(&mut self, t: usize) {
            if t == self.active.len() {
                let rho = self.loads.iter().cloned().fold(0.0, f64::max);
                if rho < self.best {
                    self.best = rho;
                    self.best_assignment = self.assignment.clone();
                }
                return;
            }
            self.place(t, 0, self.k);
        }

        /// Distribute `remaining` grid units of type `t` over servers m..M.
        fn place(&mut self, t: usize, m: usize, remaining: u32) {
            // Prune: a partial max load already beats nothing.
            if self.loads.iter().cloned().fold(0.0, f64::max) >= self.best {
                return;
            }
            if m == self.m_count - 1 {
                let add = self.contribution(t, m, remaining);
                self.loads[m] += add;
                self.assignment[t][m] = remaining;
                self.run(t + 1);
                self.loads[m] -= add;
                self.assignment[t][m] = 0;
                return;
            }
            for units in 0..=remaining {
                let add = self.contribution(t, m, units);
                self.loads[m] += add;
                self.assignment[t][m] = units;
                self.place(t, m + 1, remaining - units);
                self.loads[m] -= add;
                self.assignment[t][m] = 0;
            }
        }

        fn contribution(&self, t: usize, m: usize, units: u32) -> f64 {
            let rate = self.active[t].1;
            rate * (units as f64 / self.k as f64) * self.mu[t][m]
        }
    }

    let mut search = Search {
        active: &active,
        mu: &mu,
        k,
        m_count,
        loads: vec![0.0; m_count],
        assignment: vec![vec![0; m_count]; active.len()],
        best: f64::INFINITY,
        best_assignment: Vec::new(),
    };
    search.run(0);

    let mut entries = BTreeMap::new();
    for (t, (ty, rate)) in active.iter().enumerate() {
        let row: Vec<f64> = (0..m_count)
            .map(|m| rate * (search.best_assignment[t][m] as f64 / k as f64))
            .collect();
        entries.insert(ty.clone(), row);
    }
    Ok(capacity_result(search.best, Decomposition::new(m_count, entries)))
}
