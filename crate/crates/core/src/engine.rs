//! The discrete-time state machine: sub-queues, per-server working status,
//! slot-by-slot dynamics, and the per-slot ledger the diagnostics consume.
//!
//! Slot phase order (fixed, and load-bearing for the ledger identities):
//!
//! 1. arrivals are routed one at a time against a start-of-slot snapshot of
//!    the workloads, each enqueued at the tail of its sub-queue (or pushed to
//!    the global FIFO for policies that defer assignment);
//! 2. in-service tasks tick down; a task reaching zero departs and its server
//!    becomes idle;
//! 3. idle servers are offered work in server order, each seeing the live
//!    queue state; a started task draws its full service duration up front;
//!    a server left idle with no task attributed to it anywhere books one
//!    slot of unused service at level N;
//! 4. elapsed-service counters increment for busy servers and the slot ends.
//!
//! A task counts toward its sub-queue from the moment it is attributed
//! (routdeed, or assigned from the global FIFO) until it *completes*, so the
//! in-service task is part of the queue length and of the workload. With that
//! convention the recursion Q(t+1) = Q(t) + A(t) - S(t) (+ U at level N)
//! holds exactly per slot, and unused service can only be booked when every
//! sub-queue of the server is empty.

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::policies::{Policy, RouteTarget, ScheduleDecision};
use crate::stochastic::{ServiceModel, SimRng};
use crate::topology::{TypeCatalog, TypeId};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("policy {policy} violated its contract: {detail}")]
    PolicyViolation { policy: String, detail: String },
}

/// One task's life record.
#[derive(Debug, Clone, Serialize)]
pub struct Task {
    pub id: u64,
    pub type_id: TypeId,
    pub arrival_slot: u64,
    /// Server the task was attributed to (1-based). Set at routing, or at
    /// assignment for global-queue policies.
    pub routed_server: Option<usize>,
    /// Locality level of the task at its routed server.
    pub routed_level: Option<usize>,
    /// Full duration drawn at service start.
    pub service_slots: Option<u64>,
    pub completion_slot: Option<u64>,
}

/// Scheduling decision eta_m: the sub-queue level being served, or idle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulingChoice {
    Idle,
    Level(usize),
}

/// Working status f_m: -1 when idle, else the level of the in-service task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkingStatus {
    Idle,
    Serving(usize),
}

#[derive(Debug)]
struct InService {
    task: Task,
    /// Level at which the *serving* server processes the task.
    serve_level: usize,
    /// Sub-queue (server, level) the task stays attributed to.
    attr_server: usize,
    attr_level: usize,
    remaining: u64,
}

#[derive(Debug)]
struct ServerState {
    eta: SchedulingChoice,
    f: WorkingStatus,
    psi: u64,
    in_service: Option<InService>,
}

impl ServerState {
    fn idle() -> Self {
        Self { eta: SchedulingChoice::Idle, f: WorkingStatus::Idle, psi: 0, in_service: None }
    }

    fn busy(&self) -> bool {
        self.in_service.is_some()
    }
}

/// FIFO pool for policies that defer server assignment. Tasks are keyed by
/// id (ids are arrival-ordered), with per-server indexes of 1-local tasks so
/// a locality-first scan is O(1) amortized.
#[derive(Debug, Default)]
struct GlobalQueue {
    tasks: BTreeMap<u64, Task>,
    /// Per server (index m-1): ids of queued tasks 1-local to that server,
    /// in arrival order. Stale ids are skipped lazily.
    local_index: RefCell<Vec<VecDeque<u64>>>,
}

impl GlobalQueue {
    fn with_servers(servers: usize) -> Self {
        Self { tasks: BTreeMap::new(), local_index: RefCell::new(vec![VecDeque::new(); servers]) }
    }

    fn len(&self) -> usize {
        self.tasks.len()
    }

    fn push(&mut self, task: Task, catalog: &TypeCatalog) {
        let mut index = self.local_index.borrow_mut();
        for &local in catalog.task_type(task.type_id).locals() {
            index[local - 1].push_back(task.id);
        }
        self.tasks.insert(task.id, task);
    }

    fn head_id(&self) -> Option<u64> {
        self.tasks.keys().next().copied()
    }

    /// Earliest queued task 1-local to server m, over the whole queue.
    fn first_local(&self, m: usize) -> Option<u64> {
        let mut index = self.local_index.borrow_mut();
        let deque = &mut index[m - 1];
        while let Some(&id) = deque.front() {
            if self.tasks.contains_key(&id) {
                return Some(id);
            }
            deque.pop_front();
        }
        None
    }

    fn iter_in_order(&self) -> impl Iterator<Item = (&u64, &Task)> {
        self.tasks.iter()
    }

    fn take(&mut self, id: u64) -> Option<Task> {
        self.tasks.remove(&id)
    }
}

/// The Markov state Z(t) = (sub-queues, eta, Psi, f) plus the bookkeeping the
/// policies need (global FIFO, task counters).
#[derive(Debug)]
pub struct SimState {
    t: u64,
    servers: Vec<ServerState>,
    /// Waiting tasks per (server, level): queues[m-1][n-1].
    queues: Vec<Vec<VecDeque<Task>>>,
    /// In-service tasks still attributed per (server, level), flattened.
    in_service_attr: Vec<u32>,
    global: GlobalQueue,
    next_task_id: u64,
    arrived: u64,
    completed: u64,
}

impl SimState {
    fn new(servers: usize, levels: usize) -> Self {
        Self {
            t: 0,
            servers: (0..servers).map(|_| ServerState::idle()).collect(),
            queues: vec![vec![VecDeque::new(); levels]; servers],
            in_service_attr: vec![0; servers * levels],
            global: GlobalQueue::with_servers(servers),
            next_task_id: 0,
            arrived: 0,
            completed: 0,
        }
    }

    fn levels(&self) -> usize {
        self.queues[0].len()
    }

    fn attr_idx(&self, m: usize, n: usize) -> usize {
        (m - 1) * self.levels() + (n - 1)
    }

    /// Q_m^n: waiting plus attributed in-service tasks.
    pub fn queue_len(&self, m: usize, n: usize) -> usize {
        self.queues[m - 1][n - 1].len() + self.in_service_attr[self.attr_idx(m, n)] as usize
    }

    pub fn waiting_len(&self, m: usize, n: usize) -> usize {
        self.queues[m - 1][n - 1].len()
    }

    pub fn attributed_total(&self, m: usize) -> usize {
        (1..=self.levels()).map(|n| self.queue_len(m, n)).sum()
    }
}

/// Per-slot counts: everything the proof-derived diagnostics need.
///
/// `service` includes one unused-service tick at level N for every slot a
/// server idles with all of its sub-queues empty; `unused` records those
/// ticks separately so actual completions are recoverable.
#[derive(Debug, Clone, Serialize)]
pub struct SlotLedger {
    pub t: u64,
    servers: usize,
    levels: usize,
    arrivals: Vec<u32>,
    service: Vec<u32>,
    unused: Vec<u32>,
    /// Workload of each server at the end of the slot.
    workload_end: Vec<f64>,
}

impl SlotLedger {
    fn zeroed(t: u64, servers: usize, levels: usize) -> Self {
        Self {
            t,
            servers,
            levels,
            arrivals: vec![0; servers * levels],
            service: vec![0; servers * levels],
            unused: vec![0; servers],
            workload_end: vec![0.0; servers],
        }
    }

    fn idx(&self, m: usize, n: usize) -> usize {
        (m - 1) * self.levels + (n - 1)
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// A_m^n: tasks attributed to sub-queue (m, n) this slot.
    pub fn arrivals_at(&self, m: usize, n: usize) -> u32 {
        self.arrivals[self.idx(m, n)]
    }

    /// S_m^n: departures from sub-queue (m, n) this slot, including the
    /// unused-service tick at n = N.
    pub fn service_at(&self, m: usize, n: usize) -> u32 {
        self.service[self.idx(m, n)]
    }

    /// U_m: 1 iff server m idled this slot with every sub-queue empty.
    pub fn unused_at(&self, m: usize) -> u32 {
        self.unused[m - 1]
    }

    pub fn workload_end(&self, m: usize) -> f64 {
        self.workload_end[m - 1]
    }

    pub fn workloads_end(&self) -> &[f64] {
        &self.workload_end
    }
}

/// The mean-weighted (pseudo) per-server processes driving the workload
/// recursion: W(t+1) = W(t) + A(t) - S(t) + U(t).
#[derive(Debug, Clone)]
pub struct PseudoQuantities {
    pub arrival: Vec<f64>,
    pub service: Vec<f64>,
    pub unused: Vec<f64>,
}

/// A_m = sum_n A_m^n / alpha_n, S_m = sum_n S_m^n / alpha_n,
/// U~_m = U_m / alpha_N.
pub fn pseudo_quantities(ledger: &SlotLedger, service: &ServiceModel) -> PseudoQuantities {
    let levels = ledger.levels();
    let mut arrival = vec![0.0; ledger.servers()];
    let mut svc = vec![0.0; ledger.servers()];
    let mut unused = vec![0.0; ledger.servers()];
    for m in 1..=ledger.servers() {
        for n in 1..=levels {
            let mu = service.mean(n);
            arrival[m - 1] += ledger.arrivals_at(m, n) as f64 * mu;
            svc[m - 1] += ledger.service_at(m, n) as f64 * mu;
        }
        unused[m - 1] = ledger.unused_at(m) as f64 * service.mean(levels);
    }
    PseudoQuantities { arrival, service: svc, unused }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Arrive,
    Route,
    Start,
    Complete,
    IdleUnused,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEvent {
    pub t: u64,
    pub event: TraceKind,
    pub task_id: Option<u64>,
    pub type_id: Option<TypeId>,
    pub server: Option<usize>,
    pub level: Option<usize>,
}

/// What one slot produced.
#[derive(Debug)]
pub struct SlotOutcome {
    pub ledger: SlotLedger,
    pub completed: Vec<Task>,
}

/// Read-only snapshot handed to routing decisions: workloads and queue
/// totals as of the start of the slot, so every arrival in a slot is routed
/// against the same state.
pub struct RouteView<'a> {
    workloads: Vec<f64>,
    totals: Vec<u32>,
    catalog: &'a TypeCatalog,
    means: &'a [f64],
}

impl<'a> RouteView<'a> {
    pub fn new(
        workloads: Vec<f64>,
        totals: Vec<u32>,
        catalog: &'a TypeCatalog,
        means: &'a [f64],
    ) -> Self {
        Self { workloads, totals, catalog, means }
    }

    pub fn servers(&self) -> usize {
        self.workloads.len()
    }

    pub fn workload(&self, m: usize) -> f64 {
        self.workloads[m - 1]
    }

    pub fn total_queue(&self, m: usize) -> u32 {
        self.totals[m - 1]
    }

    pub fn level_of(&self, ty: TypeId, m: usize) -> usize {
        self.catalog.level_of(ty, m)
    }

    pub fn locals_of(&self, ty: TypeId) -> &[usize] {
        self.catalog.task_type(ty).locals()
    }

    /// Mean service time 1/alpha_n at level n.
    pub fn mean_at_level(&self, n: usize) -> f64 {
        self.means[n - 1]
    }
}

/// Live read-only view for scheduling decisions.
pub struct ScheduleView<'a> {
    state: &'a SimState,
    catalog: &'a TypeCatalog,
    means: &'a [f64],
}

impl<'a> ScheduleView<'a> {
    pub fn servers(&self) -> usize {
        self.state.servers.len()
    }

    pub fn levels(&self) -> usize {
        self.state.levels()
    }

    pub fn waiting_len(&self, m: usize, n: usize) -> usize {
        self.state.waiting_len(m, n)
    }

    /// Q_m^n including the attributed in-service task.
    pub fn queue_len(&self, m: usize, n: usize) -> usize {
        self.state.queue_len(m, n)
    }

    pub fn total_queue(&self, m: usize) -> usize {
        self.state.attributed_total(m)
    }

    /// Earliest waiting task across the sub-queues of server m:
    /// (level, type, task id).
    pub fn server_head(&self, m: usize) -> Option<(usize, TypeId, u64)> {
        let mut best: Option<(usize, TypeId, u64)> = None;
        for n in 1..=self.levels() {
            if let Some(task) = self.state.queues[m - 1][n - 1].front() {
                if best.is_none_or(|(_, _, id)| task.id < id) {
                    best = Some((n, task.type_id, task.id));
                }
            }
        }
        best
    }

    pub fn level_of(&self, ty: TypeId, m: usize) -> usize {
        self.catalog.level_of(ty, m)
    }

    /// Mean service time 1/alpha_n at level n.
    pub fn mean_at_level(&self, n: usize) -> f64 {
        self.means[n - 1]
    }

    pub fn global_len(&self) -> usize {
        self.state.global.len()
    }

    pub fn global_head(&self) -> Option<u64> {
        self.state.global.head_id()
    }

    /// Earliest global task 1-local to m (full scan).
    pub fn global_first_local(&self, m: usize) -> Option<u64> {
        self.state.global.first_local(m)
    }

    /// Global tasks in arrival order: (id, type).
    pub fn global_iter(&self) -> impl Iterator<Item = (u64, TypeId)> + '_ {
        self.state.global.iter_in_order().map(|(&id, task)| (id, task.type_id))
    }
}

/// One replication's simulator. Owns the state; policies are passed per step
/// so the same engine type serves every algorithm.
pub struct Engine {
    catalog: Arc<TypeCatalog>,
    service: ServiceModel,
    state: SimState,
    trace_enabled: bool,
    trace: Vec<TraceEvent>,
}

impl Engine {
    pub fn new(catalog: Arc<TypeCatalog>, service: ServiceModel, trace_enabled: bool) -> Self {
        assert_eq!(
            service.levels(),
            catalog.level_count(),
            "service means must cover the topology's levels"
        );
        let state = SimState::new(catalog.servers(), catalog.level_count());
        Self { catalog, service, state, trace_enabled, trace: Vec::new() }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn t(&self) -> u64 {
        self.state.t
    }

    pub fn servers(&self) -> usize {
        self.state.servers.len()
    }

    pub fn levels(&self) -> usize {
        self.state.levels()
    }

    pub fn catalog(&self) -> &TypeCatalog {
        &self.catalog
    }

    pub fn service_model(&self) -> &ServiceModel {
        &self.service
    }

    pub fn psi(&self, m: usize) -> u64 {
        self.state.servers[m - 1].psi
    }

    pub fn eta(&self, m: usize) -> SchedulingChoice {
        self.state.servers[m - 1].eta
    }

    pub fn working_status(&self, m: usize) -> WorkingStatus {
        self.state.servers[m - 1].f
    }

    pub fn arrived(&self) -> u64 {
        self.state.arrived
    }

    pub fn completed_count(&self) -> u64 {
        self.state.completed
    }

    pub fn in_system(&self) -> u64 {
        self.state.arrived - self.state.completed
    }

    pub fn global_len(&self) -> usize {
        self.state.global.len()
    }

    pub fn waiting_total(&self) -> usize {
        self.state.queues.iter().flatten().map(VecDeque::len).sum()
    }

    pub fn in_service_total(&self) -> usize {
        self.state.servers.iter().filter(|s| s.busy()).count()
    }

    /// Tasks arrived = tasks waiting + in service + in the global pool +
    /// completed, every slot.
    pub fn conservation_holds(&self) -> bool {
        self.state.arrived
            == self.waiting_total() as u64
                + self.in_service_total() as u64
                + self.state.global.len() as u64
                + self.state.completed
    }

    /// W_m: expected slots for server m to drain its attributed sub-queues.
    pub fn workload(&self, m: usize) -> f64 {
        (1..=self.levels())
            .map(|n| self.state.queue_len(m, n) as f64 * self.service.mean(n))
            .sum()
    }

    pub fn workloads(&self) -> Vec<f64> {
        (1..=self.servers()).map(|m| self.workload(m)).collect()
    }

    /// ||Q||_1 + ||Psi||_1, the state-size measure for drift restriction.
    pub fn state_size(&self) -> u64 {
        let psi: u64 = self.state.servers.iter().map(|s| s.psi).sum();
        self.in_system() + psi
    }

    pub fn schedule_view(&self) -> ScheduleView<'_> {
        ScheduleView { state: &self.state, catalog: &self.catalog, means: self.service.means() }
    }

    pub fn route_view(&self) -> RouteView<'_> {
        let totals = (1..=self.servers())
            .map(|m| self.state.attributed_total(m) as u32)
            .collect();
        RouteView {
            workloads: self.workloads(),
            totals,
            catalog: &self.catalog,
            means: self.service.means(),
        }
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    fn emit(
        &mut self,
        event: TraceKind,
        task_id: Option<u64>,
        type_id: Option<TypeId>,
        server: Option<usize>,
        level: Option<usize>,
    ) {
        if self.trace_enabled {
            self.trace.push(TraceEvent { t: self.state.t, event, task_id, type_id, server, level });
        }
    }

    fn violation(&self, policy: &dyn Policy, detail: String) -> EngineError {
        EngineError::PolicyViolation { policy: policy.name().to_string(), detail }
    }

    /// Advances one slot. `arrivals` is the multiset of types arriving at the
    /// beginning of the slot; `rng` drives tie-breaks and service draws.
    pub fn step(
        &mut self,
        policy: &dyn Policy,
        arrivals: &[TypeId],
        rng: &mut SimRng,
    ) -> Result<SlotOutcome, EngineError> {
        let (m_count, n_count) = (self.servers(), self.levels());
        let mut ledger = SlotLedger::zeroed(self.state.t, m_count, n_count);
        let mut completed = Vec::new();

        // Phase 1: routing against the start-of-slot snapshot.
        let snapshot = self.route_view();
        let decisions: Vec<RouteTarget> =
            arrivals.iter().map(|&ty| policy.route(&snapshot, ty, rng)).collect();
        drop(snapshot);
        for (&ty, target) in arrivals.iter().zip(decisions) {
            let task = Task {
                id: self.state.next_task_id,
                type_id: ty,
                arrival_slot: self.state.t,
                routed_server: None,
                routed_level: None,
                service_slots: None,
                completion_slot: None,
            };
            self.state.next_task_id += 1;
            self.state.arrived += 1;
            self.emit(TraceKind::Arrive, Some(task.id), Some(ty), None, None);
            match target {
                RouteTarget::Server(m) => {
                    if m == 0 || m > m_count {
                        return Err(self.violation(
                            policy,
                            format!("routed to server {m} of {m_count}"),
                        ));
                    }
                    let n = self.catalog.level_of(ty, m);
                    let mut task = task;
                    task.routed_server = Some(m);
                    task.routed_level = Some(n);
                    self.emit(TraceKind::Route, Some(task.id), Some(ty), Some(m), Some(n));
                    self.state.queues[m - 1][n - 1].push_back(task);
                    ledger.arrivals[(m - 1) * n_count + (n - 1)] += 1;
                }
                RouteTarget::GlobalQueue => {
                    self.state.global.push(task, &self.catalog);
                }
            }
        }

        // Phase 2: completions.
        let t_now = self.state.t;
        for m in 1..=m_count {
            let finished = {
                let server = &mut self.state.servers[m - 1];
                match &mut server.in_service {
                    Some(in_service) => {
                        in_service.remaining -= 1;
                        if in_service.remaining == 0 {
                            let done = server.in_service.take().expect("checked above");
                            server.f = WorkingStatus::Idle;
                            server.eta = SchedulingChoice::Idle;
                            server.psi = 0;
                            Some(done)
                        } else {
                            None
                        }
                    }
                    None => None,
                }
            };
            let Some(InService { mut task, serve_level, attr_server, attr_level, .. }) = finished
            else {
                continue;
            };
            task.completion_slot = Some(t_now);
            let idx = (attr_server - 1) * n_count + (attr_level - 1);
            self.state.in_service_attr[idx] -= 1;
            ledger.service[idx] += 1;
            self.state.completed += 1;
            self.emit(
                TraceKind::Complete,
                Some(task.id),
                Some(task.type_id),
                Some(m),
                Some(serve_level),
            );
            completed.push(task);
        }

        // Phase 3: scheduling, fixed server order, live views.
        for m in 1..=m_count {
            if self.state.servers[m - 1].busy() {
                continue;
            }
            let decision = {
                let view = ScheduleView {
                    state: &self.state,
                    catalog: &self.catalog,
                    means: self.service.means(),
                };
                policy.schedule(&view, m, rng)
            };
            match decision {
                ScheduleDecision::Idle => {
                    if self.state.attributed_total(m) == 0 {
                        ledger.unused[m - 1] = 1;
                        ledger.service[(m - 1) * n_count + (n_count - 1)] += 1;
                        self.emit(TraceKind::IdleUnused, None, None, Some(m), Some(n_count));
                    }
                }
                ScheduleDecision::Own { level } => {
                    self.start_from_queue(policy, m, m, level, rng)?;
                }
                ScheduleDecision::Pull { server, level } => {
                    if server == 0 || server > m_count {
                        return Err(self.violation(
                            policy,
                            format!("pull from server {server} of {m_count}"),
                        ));
                    }
                    self.start_from_queue(policy, m, server, level, rng)?;
                }
                ScheduleDecision::Global { task_id } => {
                    let Some(mut task) = self.state.global.take(task_id) else {
                        return Err(self.violation(
                            policy,
                            format!("global task {task_id} does not exist"),
                        ));
                    };
                    let n = self.catalog.level_of(task.type_id, m);
                    task.routed_server = Some(m);
                    task.routed_level = Some(n);
                    ledger.arrivals[(m - 1) * n_count + (n - 1)] += 1;
                    self.emit(TraceKind::Route, Some(task.id), Some(task.type_id), Some(m), Some(n));
                    self.begin_service(m, task, n, (m, n), rng);
                }
            }
        }

        // Phase 4: elapsed-service counters tick for busy servers.
        for server in &mut self.state.servers {
            if server.busy() {
                server.psi += 1;
            }
        }
        self.state.t += 1;
        for m in 1..=m_count {
            ledger.workload_end[m - 1] = self.workload(m);
        }
        Ok(SlotOutcome { ledger, completed })
    }

    fn start_from_queue(
        &mut self,
        policy: &dyn Policy,
        m: usize,
        from_server: usize,
        level: usize,
        rng: &mut SimRng,
    ) -> Result<(), EngineError> {
        if level == 0 || level > self.levels() {
            return Err(self.violation(policy, format!("sub-queue level {level} out of range")));
        }
        let Some(task) = self.state.queues[from_server - 1][level - 1].pop_front() else {
            return Err(self.violation(
                policy,
                format!("selected empty sub-queue ({from_server}, {level}) for server {m}"),
            ));
        };
        let serve_level = self.catalog.level_of(task.type_id, m);
        self.begin_service(m, task, serve_level, (from_server, level), rng);
        Ok(())
    }

    fn begin_service(
        &mut self,
        m: usize,
        mut task: Task,
        serve_level: usize,
        attribution: (usize, usize),
        rng: &mut SimRng,
    ) {
        let duration = self.service.sample_service(serve_level, rng);
        task.service_slots = Some(duration);
        let idx = self.state.attr_idx(attribution.0, attribution.1);
        self.state.in_service_attr[idx] += 1;
        self.emit(TraceKind::Start, Some(task.id), Some(task.type_id), Some(m), Some(serve_level));
        let server = &mut self.state.servers[m - 1];
        server.psi = 0;
        server.f = WorkingStatus::Serving(serve_level);
        server.eta = SchedulingChoice::Level(serve_level);
        server.in_service = Some(InService {
            task,
            serve_level,
            attr_server: attribution.0,
            attr_level: attribution.1,
            remaining: duration,
        });
    }
}
