//! The four load-balancing policies behind one routing + scheduling
//! contract: GB-PANDAS (weighted-workload routing, prioritized scheduling)
//! and the three baselines it is compared against.
//!
//! Policies are stateless and read the engine through views; all
//! nondeterminism is the tie-break RNG.

use rand::Rng;

use crate::engine::{RouteView, ScheduleView};
use crate::stochastic::SimRng;
use crate::topology::TypeId;

/// Where an arriving task goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteTarget {
    /// Enqueue at the tail of the sub-queue of this server (1-based) at the
    /// task's locality level there.
    Server(usize),
    /// Append to the shared FIFO; a server is picked at schedule time.
    GlobalQueue,
}

/// What an idle server does this slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleDecision {
    Idle,
    /// Serve the head of the server's own sub-queue at this level.
    Own { level: usize },
    /// Serve the head of another server's sub-queue (helping).
    Pull { server: usize, level: usize },
    /// Take this task from the global FIFO.
    Global { task_id: u64 },
}

pub trait Policy: Send + Sync {
    fn name(&self) -> &'static str;
    fn route(&self, view: &RouteView, ty: TypeId, rng: &mut SimRng) -> RouteTarget;
    fn schedule(&self, view: &ScheduleView, m: usize, rng: &mut SimRng) -> ScheduleDecision;
}

pub const POLICY_NAMES: [&str; 4] = ["gb-pandas", "jsq-maxweight", "jsq-priority", "fcfs"];

/// Instantiates a policy by its config name.
pub fn policy_by_name(name: &str, fcfs_scan_depth: Option<usize>) -> Option<Box<dyn Policy>> {
    match name {
        "gb-pandas" => Some(Box::new(GbPandas)),
        "jsq-maxweight" => Some(Box::new(JsqMaxWeight)),
        "jsq-priority" => Some(Box::new(JsqPriority)),
        "fcfs" => Some(Box::new(Fcfs { scan_depth: fcfs_scan_depth })),
        _ => None,
    }
}

/// Smallest key wins; exact ties are broken uniformly at random.
fn arg_best_random<I>(candidates: I, rng: &mut SimRng) -> Option<usize>
where
    I: Iterator<Item = (usize, f64)>,
{
    let mut best = f64::INFINITY;
    let mut ties: Vec<usize> = Vec::new();
    for (idx, value) in candidates {
        if value < best {
            best = value;
            ties.clear();
            ties.push(idx);
        } else if value == best {
            ties.push(idx);
        }
    }
    match ties.len() {
        0 => None,
        1 => Some(ties[0]),
        k => Some(ties[rng.random_range(0..k)]),
    }
}

/// Weighted-workload routing, prioritized scheduling.
pub struct GbPandas;

impl Policy for GbPandas {
    fn name(&self) -> &'static str {
        "gb-pandas"
    }

    /// argmin over servers of W_m / alpha_n where n is the task's level at m.
    /// Ties prefer the lowest level (a zero-workload 1-local server beats a
    /// zero-workload remote one), then uniform random.
    fn route(&self, view: &RouteView, ty: TypeId, rng: &mut SimRng) -> RouteTarget {
        let weighted = (1..=view.servers()).map(|m| {
            let level = view.level_of(ty, m);
            (m, (view.workload(m) * view.mean_at_level(level), level))
        });
        let mut best = (f64::INFINITY, usize::MAX);
        let mut ties: Vec<usize> = Vec::new();
        for (m, key) in weighted {
            if key < best {
                best = key;
                ties.clear();
                ties.push(m);
            } else if key == best {
                ties.push(m);
            }
        }
        let pick = match ties.len() {
            1 => ties[0],
            k => ties[rng.random_range(0..k)],
        };
        RouteTarget::Server(pick)
    }

    /// Serve the lowest nonempty level; never pulls from other servers.
    fn schedule(&self, view: &ScheduleView, m: usize, _rng: &mut SimRng) -> ScheduleDecision {
        for n in 1..=view.levels() {
            if view.waiting_len(m, n) > 0 {
                return ScheduleDecision::Own { level: n };
            }
        }
        ScheduleDecision::Idle
    }
}

/// Join the shortest total queue among the task's 1-local servers; idle
/// servers run MaxWeight over every queue with a waiting head, weighting a
/// queue by its total length times the rate at which this server would
/// process its head task.
pub struct JsqMaxWeight;

impl Policy for JsqMaxWeight {
    fn name(&self) -> &'static str {
        "jsq-maxweight"
    }

    fn route(&self, view: &RouteView, ty: TypeId, rng: &mut SimRng) -> RouteTarget {
        let candidates =
            view.locals_of(ty).iter().map(|&m| (m, view.total_queue(m) as f64));
        RouteTarget::Server(arg_best_random(candidates, rng).expect("types have local servers"))
    }

    fn schedule(&self, view: &ScheduleView, m: usize, rng: &mut SimRng) -> ScheduleDecision {
        let weights = (1..=view.servers()).filter_map(|k| {
            view.server_head(k).map(|(level, head_ty, _)| {
                let serve_mean = view.mean_at_level(view.level_of(head_ty, m));
                // Negated so the argmin helper picks the max weight.
                ((k, level), -(view.total_queue(k) as f64 / serve_mean))
            })
        });
        // Pack (server, level) into one index for the tie-break helper.
        let levels = view.levels();
        let packed = weights.map(|((k, level), w)| ((k - 1) * levels + (level - 1), w));
        match arg_best_random(packed, rng) {
            Some(code) => {
                ScheduleDecision::Pull { server: code / levels + 1, level: code % levels + 1 }
            }
            None => ScheduleDecision::Idle,
        }
    }
}

/// Join the shortest total queue among 1-local servers; an idle server works
/// its own queue in arrival order first, then helps the longest queue in the
/// system.
pub struct JsqPriority;

impl Policy for JsqPriority {
    fn name(&self) -> &'static str {
        "jsq-priority"
    }

    fn route(&self, view: &RouteView, ty: TypeId, rng: &mut SimRng) -> RouteTarget {
        let candidates =
            view.locals_of(ty).iter().map(|&m| (m, view.total_queue(m) as f64));
        RouteTarget::Server(arg_best_random(candidates, rng).expect("types have local servers"))
    }

    fn schedule(&self, view: &ScheduleView, m: usize, rng: &mut SimRng) -> ScheduleDecision {
        if let Some((level, _, _)) = view.server_head(m) {
            return ScheduleDecision::Own { level };
        }
        let candidates = (1..=view.servers()).filter_map(|k| {
            view.server_head(k)
                .map(|(level, _, _)| ((k, level), -(view.total_queue(k) as f64)))
        });
        let levels = view.levels();
        let packed = candidates.map(|((k, level), w)| ((k - 1) * levels + (level - 1), w));
        match arg_best_random(packed, rng) {
            Some(code) => {
                ScheduleDecision::Pull { server: code / levels + 1, level: code % levels + 1 }
            }
            None => ScheduleDecision::Idle,
        }
    }
}

/// One global FIFO. An idle server scans it from the head and takes the
/// first task 1-local to it; if the first `scan_depth` tasks (whole queue
/// when None) hold none, it takes the head task at whatever level it has.
pub struct Fcfs {
    pub scan_depth: Option<usize>,
}

impl Policy for Fcfs {
    fn name(&self) -> &'static str {
        "fcfs"
    }

    fn route(&self, _view: &RouteView, _ty: TypeId, _rng: &mut SimRng) -> RouteTarget {
        RouteTarget::GlobalQueue
    }

    fn schedule(&self, view: &ScheduleView, m: usize, _rng: &mut SimRng) -> ScheduleDecision {
        let Some(head) = view.global_head() else {
            return ScheduleDecision::Idle;
        };
        let local = match self.scan_depth {
            None => view.global_first_local(m),
            Some(depth) => view
                .global_iter()
                .take(depth)
                .find(|&(_, ty)| view.level_of(ty, m) == 1)
                .map(|(id, _)| id),
        };
        ScheduleDecision::Global { task_id: local.unwrap_or(head) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::engine::Engine;
    use crate::stochastic::{replication_rng, ServiceFamily, ServiceModel, SimRng};
    use crate::topology::{ClusterTopology, TaskType, TypeCatalog};

    fn rng() -> SimRng {
        replication_rng(23, 2)
    }

    /// Catalog for a flat M-server, 2-level cluster with the given types.
    fn flat_catalog(m: usize, locals: &[&[usize]]) -> TypeCatalog {
        let topo = ClusterTopology::balanced(vec![m]).unwrap();
        let types = locals.iter().map(|l| TaskType::new(l.to_vec()).unwrap()).collect();
        TypeCatalog::new(&topo, types).unwrap()
    }

    #[test]
    fn gb_pandas_routes_to_minimum_weighted_workload() {
        // M = 3, N = 2, mu = (1, 2), type local to server 1 only,
        // W = (4, 1, 10): weighted = (4, 2, 20) so server 2 wins.
        let catalog = flat_catalog(3, &[&[1]]);
        let means = vec![1.0, 2.0];
        let view = RouteView::new(vec![4.0, 1.0, 10.0], vec![0, 0, 0], &catalog, &means);
        assert_eq!(GbPandas.route(&view, 0, &mut rng()), RouteTarget::Server(2));
    }

    #[test]
    fn gb_pandas_prefers_idle_local_server() {
        let catalog = flat_catalog(3, &[&[2]]);
        let means = vec![1.0, 2.0];
        let view = RouteView::new(vec![3.0, 0.0, 1.0], vec![0, 0, 0], &catalog, &means);
        assert_eq!(GbPandas.route(&view, 0, &mut rng()), RouteTarget::Server(2));
    }

    #[test]
    fn gb_pandas_zero_ties_resolve_to_the_local_server() {
        // Servers 1 and 3 both idle (weighted workload 0); the task is
        // 1-local to server 3 only, which must win the tie.
        let catalog = flat_catalog(3, &[&[3]]);
        let means = vec![1.0, 4.0];
        let view = RouteView::new(vec![0.0, 5.0, 0.0], vec![0, 0, 0], &catalog, &means);
        let mut r = rng();
        for _ in 0..50 {
            assert_eq!(GbPandas.route(&view, 0, &mut r), RouteTarget::Server(3));
        }
    }

    #[test]
    fn gb_pandas_ties_are_uniform() {
        let catalog = flat_catalog(3, &[&[1, 2, 3]]);
        let means = vec![1.0, 2.0];
        let view = RouteView::new(vec![2.0, 2.0, 2.0], vec![0, 0, 0], &catalog, &means);
        let mut rng = rng();
        let trials = 100_000;
        let mut counts = [0u32; 3];
        for _ in 0..trials {
            match GbPandas.route(&view, 0, &mut rng) {
                RouteTarget::Server(m) => counts[m - 1] += 1,
                RouteTarget::GlobalQueue => unreachable!(),
            }
        }
        // Uniform over 3: p = 1/3, sd = sqrt(p (1-p) / n) per frequency.
        let expected = trials as f64 / 3.0;
        let sd = (trials as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sd, "counts {counts:?}");
        }
    }

    #[test]
    fn gb_pandas_never_routes_above_the_minimum_weighted_workload() {
        let catalog = flat_catalog(4, &[&[1, 2], &[2, 3], &[1, 4]]);
        let means = vec![1.0, 3.0];
        let mut rng = rng();
        use rand::Rng;
        for _ in 0..2000 {
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..5.0f64)).collect();
            let view = RouteView::new(w.clone(), vec![0; 4], &catalog, &means);
            for ty in 0..catalog.len() {
                let weighted = |m: usize| w[m - 1] * means[catalog.level_of(ty, m) - 1];
                let min = (1..=4).map(weighted).fold(f64::INFINITY, f64::min);
                match GbPandas.route(&view, ty, &mut rng) {
                    RouteTarget::Server(m) => {
                        assert!(weighted(m) <= min, "routed to {m} above W* for type {ty}")
                    }
                    RouteTarget::GlobalQueue => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn routing_argmin_invariant_under_scaling() {
        let catalog = flat_catalog(4, &[&[1, 3]]);
        let means = vec![1.0, 2.5];
        let w = vec![4.0, 1.5, 3.0, 9.0];
        for c in [0.5, 2.0, 17.0] {
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            let base = RouteView::new(w.clone(), vec![0; 4], &catalog, &means);
            let view = RouteView::new(scaled, vec![0; 4], &catalog, &means);
            assert_eq!(
                GbPandas.route(&base, 0, &mut rng()),
                GbPandas.route(&view, 0, &mut rng())
            );
        }
    }

    #[test]
    fn jsq_route_joins_shortest_local_queue() {
        // Locals {1, 2, 3}, totals (5, 2, 7, 0): server 2 wins, server 4's
        // zero is ignored.
        let catalog = flat_catalog(4, &[&[1, 2, 3]]);
        let means = vec![1.0, 2.0];
        let view = RouteView::new(vec![0.0; 4], vec![5, 2, 7, 0], &catalog, &means);
        assert_eq!(JsqMaxWeight.route(&view, 0, &mut rng()), RouteTarget::Server(2));
        assert_eq!(JsqPriority.route(&view, 0, &mut rng()), RouteTarget::Server(2));
    }

    /// Engine loaded through a scripted routing policy so schedule decisions
    /// can be probed against a real state.
    struct ScriptRoute(Vec<usize>);
    impl Policy for ScriptRoute {
        fn name(&self) -> &'static str {
            "script"
        }
        fn route(&self, view: &RouteView, _ty: TypeId, _rng: &mut SimRng) -> RouteTarget {
            let _ = view;
            RouteTarget::Server(self.0[0])
        }
        fn schedule(&self, _v: &ScheduleView, _m: usize, _r: &mut SimRng) -> ScheduleDecision {
            ScheduleDecision::Idle
        }
    }

    fn engine_with_queues(
        catalog: TypeCatalog,
        means: Vec<f64>,
        placements: &[(usize, TypeId, usize)], // (count, type, server)
    ) -> Engine {
        let service = ServiceModel::new(ServiceFamily::Geometric, means).unwrap();
        let mut engine = Engine::new(Arc::new(catalog), service, false);
        let mut r = rng();
        for &(count, ty, server) in placements {
            let policy = ScriptRoute(vec![server]);
            let arrivals = vec![ty; count];
            engine.step(&policy, &arrivals, &mut r).unwrap();
        }
        engine
    }

    #[test]
    fn jsq_maxweight_schedule_weighs_length_by_rate() {
        // Two queues: server 1 holds 10 tasks that server 3 would serve at
        // level 2 (mu = 4), server 2 holds 4 tasks 1-local to server 3.
        // Weights 10/4 = 2.5 vs 4/1 = 4: serve the short local queue.
        let catalog = flat_catalog(3, &[&[1], &[2, 3]]);
        let means = vec![1.0, 4.0];
        let engine =
            engine_with_queues(catalog, means, &[(10, 0, 1), (4, 1, 2)]);
        let decision = JsqMaxWeight.schedule(&engine.schedule_view(), 3, &mut rng());
        assert_eq!(decision, ScheduleDecision::Pull { server: 2, level: 1 });
    }

    #[test]
    fn jsq_maxweight_serves_own_queue_when_alone() {
        let catalog = flat_catalog(3, &[&[1]]);
        let engine = engine_with_queues(catalog, vec![1.0, 4.0], &[(3, 0, 1)]);
        // Server 1 is mid-service on the head task after the setup step; its
        // queue still has waiting tasks which it must keep serving.
        let decision = JsqMaxWeight.schedule(&engine.schedule_view(), 1, &mut rng());
        assert_eq!(decision, ScheduleDecision::Pull { server: 1, level: 1 });
    }

    #[test]
    fn jsq_priority_own_queue_first_then_longest() {
        let catalog = flat_catalog(3, &[&[1], &[2]]);
        let engine = engine_with_queues(catalog, vec![1.0, 4.0], &[(9, 0, 1), (2, 1, 2)]);
        // Server 2's own queue is nonempty: serve it.
        assert_eq!(
            JsqPriority.schedule(&engine.schedule_view(), 2, &mut rng()),
            ScheduleDecision::Own { level: 1 }
        );
        // Server 3 has nothing of its own: help the longest queue (server 1).
        assert_eq!(
            JsqPriority.schedule(&engine.schedule_view(), 3, &mut rng()),
            ScheduleDecision::Pull { server: 1, level: 1 }
        );
    }

    #[test]
    fn all_policies_idle_on_empty_system() {
        let catalog = flat_catalog(3, &[&[1]]);
        let service = ServiceModel::new(ServiceFamily::Geometric, vec![1.0, 2.0]).unwrap();
        let engine = Engine::new(Arc::new(catalog), service, false);
        let view = engine.schedule_view();
        let mut r = rng();
        assert_eq!(GbPandas.schedule(&view, 1, &mut r), ScheduleDecision::Idle);
        assert_eq!(JsqMaxWeight.schedule(&view, 1, &mut r), ScheduleDecision::Idle);
        assert_eq!(JsqPriority.schedule(&view, 1, &mut r), ScheduleDecision::Idle);
        assert_eq!(Fcfs { scan_depth: None }.schedule(&view, 1, &mut r), ScheduleDecision::Idle);
    }

    #[test]
    fn gb_pandas_schedule_picks_smallest_nonempty_level() {
        // Queue (0, 3, 1, 0) at server 1 -> level 2; (1, 0, 0, 9) -> level 1.
        let topo = ClusterTopology::balanced(vec![2, 2, 3]).unwrap();
        let catalog = TypeCatalog::all_types(&topo, 3).unwrap();
        let find = |level: usize| {
            (0..catalog.len()).find(|&ty| catalog.level_of(ty, 1) == level).unwrap()
        };
        let (l1, l2, l3, l4) = (find(1), find(2), find(3), find(4));
        let means = vec![1.0, 2.0, 3.0, 4.0];

        let engine = engine_with_queues(
            catalog.clone(),
            means.clone(),
            &[(3, l2, 1), (1, l3, 1)],
        );
        // The first routed level-2 task is already in service (the server
        // started it on arrival); waiting state is (0, 2, 1, 0).
        assert_eq!(
            GbPandas.schedule(&engine.schedule_view(), 1, &mut rng()),
            ScheduleDecision::Own { level: 2 }
        );

        let engine = engine_with_queues(catalog, means, &[(9, l4, 1), (2, l1, 1)]);
        assert_eq!(
            GbPandas.schedule(&engine.schedule_view(), 1, &mut rng()),
            ScheduleDecision::Own { level: 1 }
        );
    }

    #[test]
    fn fcfs_takes_first_local_else_head() {
        // Global queue: [type remote to 3, type local to 3]: server 3 takes
        // the second task; server 2 (remote to both) takes the head.
        let catalog = flat_catalog(3, &[&[1], &[3]]);
        let service = ServiceModel::new(ServiceFamily::Geometric, vec![1.0, 2.0]).unwrap();
        let mut engine = Engine::new(Arc::new(catalog), service, false);
        let fcfs = Fcfs { scan_depth: None };
        let mut r = rng();
        // Route both tasks into the global queue but keep servers idle by
        // scheduling nothing this slot: use a blocked variant.
        struct RouteOnly;
        impl Policy for RouteOnly {
            fn name(&self) -> &'static str {
                "route-only"
            }
            fn route(&self, _v: &RouteView, _ty: TypeId, _r: &mut SimRng) -> RouteTarget {
                RouteTarget::GlobalQueue
            }
            fn schedule(&self, _v: &ScheduleView, _m: usize, _r: &mut SimRng) -> ScheduleDecision {
                ScheduleDecision::Idle
            }
        }
        engine.step(&RouteOnly, &[0, 1], &mut r).unwrap();
        let view = engine.schedule_view();
        let ids: Vec<u64> = view.global_iter().map(|(id, _)| id).collect();
        assert_eq!(
            fcfs.schedule(&view, 3, &mut r),
            ScheduleDecision::Global { task_id: ids[1] }
        );
        assert_eq!(
            fcfs.schedule(&view, 2, &mut r),
            ScheduleDecision::Global { task_id: ids[0] }
        );
        // With a scan depth of 1, server 3 no longer sees its local task.
        let shallow = Fcfs { scan_depth: Some(1) };
        assert_eq!(
            shallow.schedule(&view, 3, &mut r),
            ScheduleDecision::Global { task_id: ids[0] }
        );
    }

    #[test]
    fn policy_lookup_by_name() {
        for name in POLICY_NAMES {
            assert_eq!(policy_by_name(name, None).unwrap().name(), name);
        }
        assert!(policy_by_name("round-robin", None).is_none());
    }
}
