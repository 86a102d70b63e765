//! Metrics and proof-derived diagnostics: completion-time statistics,
//! stability detection, the Lyapunov function V = ||W||^2 + ||Psi||_1 with
//! windowed drift estimates, and the orthogonality / workload-recursion /
//! renewal-rate monitors.
//!
//! Invariant residuals report maxima over the run, never means, so a single
//! violated slot cannot be averaged away.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{pseudo_quantities, Engine, SlotLedger, SlotOutcome};
use crate::stochastic::ServiceModel;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("series of length {len} too short for window {window}")]
    WindowTooLong { window: usize, len: usize },
    #[error("series of length {len} does not cover the warmup of {warmup} slots")]
    WarmupTooLong { warmup: usize, len: usize },
    #[error("series is empty")]
    EmptySeries,
}

/// Sum of squared workloads plus total elapsed service.
pub fn lyapunov(workloads: &[f64], psi: &[u64]) -> f64 {
    let w2: f64 = workloads.iter().map(|w| w * w).sum();
    let p: u64 = psi.iter().sum();
    w2 + p as f64
}

/// V(t + T) - V(t) for every t with both endpoints in the series.
pub fn drift_estimate(series: &[f64], window: usize) -> Result<Vec<f64>, AnalysisError> {
    if window == 0 || window >= series.len() {
        return Err(AnalysisError::WindowTooLong { window, len: series.len() });
    }
    Ok((0..series.len() - window).map(|t| series[t + window] - series[t]).collect())
}

/// Mean drift over the start slots whose state size exceeds `threshold`
/// (drift conditions only bind outside a finite set of small states).
/// None when no slot qualifies.
pub fn restricted_mean_drift(drifts: &[f64], state_sizes: &[f64], threshold: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, d) in drifts.iter().enumerate() {
        if state_sizes[t] > threshold {
            sum += d;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Ordinary least-squares slope of a series against slot index.
pub fn least_squares_slope(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    if series.len() < 2 {
        return 0.0;
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = series.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, y) in series.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, Copy)]
pub struct StabilityParams {
    /// Queue-growth slope (tasks per slot) above which a run is divergent.
    pub slope_threshold: f64,
    /// The final queue must also exceed this multiple of the early average,
    /// so a large-but-flat queue with slope noise is not flagged.
    pub growth_factor: f64,
}

impl Default for StabilityParams {
    fn default() -> Self {
        Self { slope_threshold: 0.01, growth_factor: 2.0 }
    }
}

/// Judges a total-queue-length series: unstable iff the least-squares slope
/// over the second half of the post-warmup series exceeds the threshold and
/// the final queue shows real growth over the first post-warmup quarter.
pub fn stability_verdict(
    series: &[f64],
    warmup: usize,
    params: StabilityParams,
) -> Result<Verdict, AnalysisError> {
    if series.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    if warmup >= series.len() {
        return Err(AnalysisError::WarmupTooLong { warmup, len: series.len() });
    }
    let post = &series[warmup..];
    let second_half = &post[post.len() / 2..];
    let slope = least_squares_slope(second_half);
    let quarter = &post[..(post.len() / 4).max(1)];
    let early_avg = quarter.iter().sum::<f64>() / quarter.len() as f64;
    let final_queue = *post.last().expect("nonempty");
    let grew = final_queue > params.growth_factor * early_avg.max(1.0);
    if slope > params.slope_threshold && grew {
        Ok(Verdict::Unstable)
    } else {
        Ok(Verdict::Stable)
    }
}

/// Time-average of the mean-weighted *actual* service of server m over the
/// given ledgers: sum_n S_m^n / alpha_n per slot with the unused-service
/// ticks removed. Approaches 1 on a saturated server.
pub fn renewal_rate_check(ledgers: &[SlotLedger], service: &ServiceModel, m: usize) -> f64 {
    if ledgers.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for ledger in ledgers {
        let pq = pseudo_quantities(ledger, service);
        sum += pq.service[m - 1] - pq.unused[m - 1];
    }
    sum / ledgers.len() as f64
}

/// Completion-time and queue statistics for a finished run.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub mean_completion: f64,
    pub p95_completion: u64,
    pub p99_completion: u64,
    pub time_avg_total_queue: f64,
    pub time_avg_workload: Vec<f64>,
    pub unstable: bool,
    pub completed_count: u64,
    pub arrived_count: u64,
    /// Tasks still in the system when the horizon ended.
    pub stranded_count: u64,
}

/// Proof-derived diagnostics accumulated over a run. Residuals are maxima.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    /// max |<W(t), U~(t)>| over the run; exactly 0 when the unused-service
    /// accounting is correct.
    pub max_orthogonality_residual: f64,
    /// max |W(t+1) - (W(t) + A(t) - S(t) + U~(t))| over servers and slots.
    pub max_recursion_residual: f64,
    /// Psi never grew by more than one per slot.
    pub psi_dynamics_ok: bool,
    /// arrived = queued + in service + global + completed, every slot.
    pub conservation_ok: bool,
    /// U_m(t) = max(0, S_m^N - A_m^N - Q_m^N) held as an identity every slot.
    pub unused_identity_ok: bool,
    /// Every completed task spent at least its drawn duration in the system.
    pub service_accounting_ok: bool,
    /// Per-server time-average of actual mean-weighted service.
    pub pseudo_service_avg: Vec<f64>,
    /// Mean windowed Lyapunov drift restricted to large states; None when
    /// the run never left the small-state set.
    pub restricted_drift: Option<f64>,
    pub drift_window: usize,
}

/// Everything a replication produces besides its result row.
#[derive(Debug)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub diagnostics: DiagnosticsReport,
    pub lyapunov_series: Vec<f64>,
    pub queue_series: Vec<f64>,
}

/// Per-slot observer wired between `Engine::step` calls; checks the exact
/// identities online so arbitrarily long runs use constant memory for the
/// residuals (series are kept for the stability and drift summaries).
pub struct RunObserver {
    means: Vec<f64>,
    levels: usize,
    servers: usize,
    warmup: usize,
    drift_window: usize,
    stability: StabilityParams,

    prev_workloads: Vec<f64>,
    prev_psi: Vec<u64>,
    prev_queue_last: Vec<i64>,

    max_orth: f64,
    max_recursion: f64,
    psi_ok: bool,
    unused_ok: bool,
    conservation_ok: bool,
    service_accounting_ok: bool,
    pseudo_service_real: Vec<f64>,

    lyapunov_series: Vec<f64>,
    queue_series: Vec<f64>,
    size_series: Vec<f64>,
    workload_sums: Vec<f64>,
    post_warmup_slots: u64,

    completions: BTreeMap<u64, u64>,
    completion_sum: u128,
    completed: u64,
    slots: u64,
}

impl RunObserver {
    pub fn new(engine: &Engine, warmup: usize) -> Self {
        let servers = engine.servers();
        Self {
            means: engine.service_model().means().to_vec(),
            levels: engine.levels(),
            servers,
            warmup,
            drift_window: 100,
            stability: StabilityParams::default(),
            prev_workloads: engine.workloads(),
            prev_psi: (1..=servers).map(|m| engine.psi(m)).collect(),
            prev_queue_last: (1..=servers)
                .map(|m| engine.state().queue_len(m, engine.levels()) as i64)
                .collect(),
            max_orth: 0.0,
            max_recursion: 0.0,
            psi_ok: true,
            unused_ok: true,
            conservation_ok: true,
            service_accounting_ok: true,
            pseudo_service_real: vec![0.0; servers],
            lyapunov_series: Vec::new(),
            queue_series: Vec::new(),
            size_series: Vec::new(),
            workload_sums: vec![0.0; servers],
            post_warmup_slots: 0,
            completions: BTreeMap::new(),
            completion_sum: 0,
            completed: 0,
            slots: 0,
        }
    }

    pub fn with_stability(mut self, params: StabilityParams) -> Self {
        self.stability = params;
        self
    }

    pub fn observe(&mut self, engine: &Engine, outcome: &SlotOutcome) {
        let ledger = &outcome.ledger;
        let mut orth = 0.0;
        for m in 1..=self.servers {
            let mut arrival = 0.0;
            let mut service = 0.0;
            for n in 1..=self.levels {
                let mu = self.means[n - 1];
                arrival += ledger.arrivals_at(m, n) as f64 * mu;
                service += ledger.service_at(m, n) as f64 * mu;
            }
            let unused = ledger.unused_at(m) as f64 * self.means[self.levels - 1];

            let w_end = ledger.workload_end(m);
            orth += w_end * unused;
            let predicted = self.prev_workloads[m - 1] + arrival - service + unused;
            let residual = (w_end - predicted).abs();
            if residual > self.max_recursion {
                self.max_recursion = residual;
            }
            self.pseudo_service_real[m - 1] += service - unused;

            let psi = engine.psi(m);
            if psi > self.prev_psi[m - 1] + 1 {
                self.psi_ok = false;
            }
            self.prev_psi[m - 1] = psi;

            let s_last = ledger.service_at(m, self.levels) as i64;
            let a_last = ledger.arrivals_at(m, self.levels) as i64;
            let expected_u = (s_last - a_last - self.prev_queue_last[m - 1]).max(0);
            if ledger.unused_at(m) as i64 != expected_u {
                self.unused_ok = false;
            }
            self.prev_queue_last[m - 1] = engine.state().queue_len(m, self.levels) as i64;
            self.prev_workloads[m - 1] = w_end;
        }
        if orth.abs() > self.max_orth {
            self.max_orth = orth.abs();
        }

        if !engine.conservation_holds() {
            self.conservation_ok = false;
        }
        for task in &outcome.completed {
            let duration = task.completion_slot.expect("completed") - task.arrival_slot;
            if duration < task.service_slots.expect("served") {
                self.service_accounting_ok = false;
            }
            *self.completions.entry(duration).or_insert(0) += 1;
            self.completion_sum += duration as u128;
            self.completed += 1;
        }

        let psi_vals: Vec<u64> = (1..=self.servers).map(|m| engine.psi(m)).collect();
        self.lyapunov_series.push(lyapunov(ledger.workloads_end(), &psi_vals));
        self.queue_series.push(engine.in_system() as f64);
        self.size_series.push(engine.state_size() as f64);
        if self.slots >= self.warmup as u64 {
            for m in 1..=self.servers {
                self.workload_sums[m - 1] += ledger.workload_end(m);
            }
            self.post_warmup_slots += 1;
        }
        self.slots += 1;
    }

    fn percentile(&self, q: f64) -> u64 {
        if self.completed == 0 {
            return 0;
        }
        let rank = ((q * self.completed as f64).ceil() as u64).clamp(1, self.completed);
        let mut seen = 0;
        for (&duration, &count) in &self.completions {
            seen += count;
            if seen >= rank {
                return duration;
            }
        }
        *self.completions.keys().last().expect("nonempty")
    }

    pub fn finish(self, engine: &Engine) -> Result<RunReport, AnalysisError> {
        let verdict = stability_verdict(&self.queue_series, self.warmup, self.stability)?;
        let mean_completion = if self.completed > 0 {
            self.completion_sum as f64 / self.completed as f64
        } else {
            f64::NAN
        };
        let post = &self.queue_series[self.warmup.min(self.queue_series.len() - 1)..];
        let time_avg_total_queue = post.iter().sum::<f64>() / post.len() as f64;
        let time_avg_workload = if self.post_warmup_slots > 0 {
            self.workload_sums.iter().map(|s| s / self.post_warmup_slots as f64).collect()
        } else {
            vec![0.0; self.servers]
        };

        let restricted_drift = if self.lyapunov_series.len() > self.drift_window {
            let drifts = drift_estimate(&self.lyapunov_series, self.drift_window)?;
            let threshold = (2 * self.servers) as f64;
            restricted_mean_drift(&drifts, &self.size_series, threshold)
        } else {
            None
        };

        let metrics = RunMetrics {
            mean_completion,
            p95_completion: self.percentile(0.95),
            p99_completion: self.percentile(0.99),
            time_avg_total_queue,
            time_avg_workload,
            unstable: verdict == Verdict::Unstable,
            completed_count: self.completed,
            arrived_count: engine.arrived(),
            stranded_count: engine.arrived() - self.completed,
        };
        let slots = self.slots.max(1) as f64;
        let diagnostics = DiagnosticsReport {
            max_orthogonality_residual: self.max_orth,
            max_recursion_residual: self.max_recursion,
            psi_dynamics_ok: self.psi_ok,
            conservation_ok: self.conservation_ok,
            unused_identity_ok: self.unused_ok,
            service_accounting_ok: self.service_accounting_ok,
            pseudo_service_avg: self.pseudo_service_real.iter().map(|s| s / slots).collect(),
            restricted_drift,
            drift_window: self.drift_window,
        };
        Ok(RunReport {
            metrics,
            diagnostics,
            lyapunov_series: self.lyapunov_series,
            queue_series: self.queue_series,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::engine::{Engine, RouteView, ScheduleView};
    use crate::policies::{GbPandas, Policy, RouteTarget, ScheduleDecision};
    use crate::stochastic::{replication_rng, ServiceFamily, SimRng};
    use crate::topology::{ClusterTopology, TypeCatalog, TypeId};

    #[test]
    fn lyapunov_hand_cases() {
        assert_eq!(lyapunov(&[0.0, 0.0], &[0, 0]), 0.0);
        // One queued 1-local task with mu_1 = 1, service just started.
        assert_eq!(lyapunov(&[1.0], &[0]), 1.0);
        // Strictly larger after adding work to a queue.
        assert!(lyapunov(&[3.0, 2.0], &[1, 0]) < lyapunov(&[4.0, 2.0], &[1, 0]));
    }

    #[test]
    fn drift_of_constant_series_is_zero() {
        let v = vec![5.0; 40];
        let drifts = drift_estimate(&v, 7).unwrap();
        assert!(drifts.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn drift_of_increasing_series_is_positive() {
        let v: Vec<f64> = (0..50).map(|t| t as f64 * 1.5).collect();
        let drifts = drift_estimate(&v, 10).unwrap();
        assert!(drifts.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn drift_window_must_fit() {
        let v = vec![1.0; 5];
        assert_eq!(drift_estimate(&v, 5), Err(AnalysisError::WindowTooLong { window: 5, len: 5 }));
    }

    #[test]
    fn zero_series_is_stable() {
        let v = vec![0.0; 1000];
        assert_eq!(
            stability_verdict(&v, 100, StabilityParams::default()).unwrap(),
            Verdict::Stable
        );
    }

    #[test]
    fn linear_growth_is_unstable() {
        let v: Vec<f64> = (0..10_000).map(|t| 0.05 * t as f64).collect();
        assert_eq!(
            stability_verdict(&v, 1000, StabilityParams::default()).unwrap(),
            Verdict::Unstable
        );
    }

    #[test]
    fn slow_growth_below_slope_threshold_is_stable() {
        let v: Vec<f64> = (0..10_000).map(|t| 0.001 * t as f64).collect();
        assert_eq!(
            stability_verdict(&v, 1000, StabilityParams::default()).unwrap(),
            Verdict::Stable
        );
    }

    #[test]
    fn warmup_must_fit_series() {
        let v = vec![0.0; 10];
        assert!(matches!(
            stability_verdict(&v, 10, StabilityParams::default()),
            Err(AnalysisError::WarmupTooLong { .. })
        ));
    }

    #[test]
    fn slope_estimator_recovers_line() {
        let v: Vec<f64> = (0..100).map(|t| 3.0 + 0.25 * t as f64).collect();
        assert!((least_squares_slope(&v) - 0.25).abs() < 1e-12);
    }

    struct Saturate;
    impl Policy for Saturate {
        fn name(&self) -> &'static str {
            "saturate"
        }
        fn route(&self, _v: &RouteView, _ty: TypeId, _r: &mut SimRng) -> RouteTarget {
            RouteTarget::Server(1)
        }
        fn schedule(&self, v: &ScheduleView, m: usize, _r: &mut SimRng) -> ScheduleDecision {
            (1..=v.levels())
                .find(|&n| v.waiting_len(m, n) > 0)
                .map_or(ScheduleDecision::Idle, |level| ScheduleDecision::Own { level })
        }
    }

    /// Deterministic unit service on a saturated server: one completion per
    /// slot at weight 1, so the renewal average is exactly 1.
    #[test]
    fn renewal_rate_unit_service_is_exactly_one() {
        let topo = ClusterTopology::new(vec![1], 1).unwrap();
        let catalog = Arc::new(TypeCatalog::all_types(&topo, 1).unwrap());
        let service = ServiceModel::new(ServiceFamily::Geometric, vec![1.0]).unwrap();
        let mut engine = Engine::new(catalog, service.clone(), false);
        let mut rng = replication_rng(3, 2);
        let mut ledgers = Vec::new();
        for t in 0..500u64 {
            // Two arrivals per slot keep the queue from draining.
            let out = engine.step(&Saturate, &[0, 0], &mut rng).unwrap();
            if t >= 2 {
                ledgers.push(out.ledger);
            }
        }
        let avg = renewal_rate_check(&ledgers, &service, 1);
        assert_eq!(avg, 1.0);
    }

    #[test]
    fn renewal_rate_idle_server_is_zero() {
        let topo = ClusterTopology::new(vec![1], 1).unwrap();
        let catalog = Arc::new(TypeCatalog::all_types(&topo, 1).unwrap());
        let service = ServiceModel::new(ServiceFamily::Geometric, vec![1.0]).unwrap();
        let mut engine = Engine::new(catalog, service.clone(), false);
        let mut rng = replication_rng(4, 2);
        let ledgers: Vec<_> =
            (0..200).map(|_| engine.step(&GbPandas, &[], &mut rng).unwrap().ledger).collect();
        assert_eq!(renewal_rate_check(&ledgers, &service, 1), 0.0);
    }

    #[test]
    fn observer_tracks_exact_identities_on_a_short_run() {
        use rand::Rng;
        let topo = ClusterTopology::balanced(vec![2, 2]).unwrap();
        let catalog = Arc::new(TypeCatalog::all_types(&topo, 2).unwrap());
        let service = ServiceModel::new(ServiceFamily::Lognormal, vec![1.0, 1.5, 2.5]).unwrap();
        let mut engine = Engine::new(catalog, service, false);
        let mut obs = RunObserver::new(&engine, 50);
        let mut arr_rng = replication_rng(8, 1);
        let mut rng = replication_rng(8, 2);
        for _ in 0..600 {
            let k = arr_rng.random_range(0..4usize);
            let arrivals: Vec<usize> =
                (0..k).map(|_| arr_rng.random_range(0..engine.catalog().len())).collect();
            let out = engine.step(&GbPandas, &arrivals, &mut rng).unwrap();
            obs.observe(&engine, &out);
        }
        let report = obs.finish(&engine).unwrap();
        assert_eq!(report.diagnostics.max_orthogonality_residual, 0.0);
        assert!(report.diagnostics.max_recursion_residual <= 1e-9);
        assert!(report.diagnostics.psi_dynamics_ok);
        assert!(report.diagnostics.conservation_ok);
        assert!(report.diagnostics.unused_identity_ok);
        assert!(report.diagnostics.service_accounting_ok);
        assert!(report.metrics.p95_completion <= report.metrics.p99_completion);
        assert!(report.metrics.mean_completion >= 1.0);
        assert_eq!(
            report.metrics.arrived_count,
            report.metrics.completed_count + report.metrics.stranded_count
        );
    }
}
