//! The simulation engine. One event loop drives the platform, the
//! provisioner, the schedulers, data movement and failure handling.
//!
//! After every event the engine "pumps": newly ready tasks are queued,
//! schedulers hand out work, the provisioner is consulted, idle blocks are
//! released and the finish condition is checked.

mod data;
mod faults;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::datamgr::{BroadcastTree, DataError, DataPolicy, LocationDirectory, TreeEdge};
use crate::dispatch::{dispatch_group, rank_workers, scheduler_for_node, DispatchError, DispatchMode, DispatchPolicy, Placement, SchedulerState};
use crate::graph::{Convergence, DataKind, GraphError, IterationResult, QueueOrder, TaskGraph, TaskState};
use crate::ids::{BlockId, DataId, NodeId, SchedulerId, TaskId, TemplateId, WorkerId};
use crate::kernel::{EventId, EventKind, Fired, Kernel, KernelError, RngStream, Trace};
use crate::metrics::{MetricsError, RunReport};
use crate::platform::{Platform, PlatformError, PlatformSpec, Pool, Route};
use crate::provision::{release_idle, BlockIdleness, Demand, ProvisionError, ProvisionMode, ProvisionPolicy, Provisioner};
use crate::resilience::{Checkpoint, FailureSpec, ResilienceError, ResiliencePolicy};

pub use faults::recover;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Provision(#[from] ProvisionError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Resilience(#[from] ResilienceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("task {0} needs more nodes than the machine has")]
    TooWide(TaskId),
    #[error("no such failure target: {0}")]
    UnknownScope(String),
    #[error("migration is disabled")]
    MigrationDisabled,
    #[error("task {0} is not computing")]
    NotRunning(TaskId),
    #[error("node {0} has no idle core")]
    DestinationBusy(NodeId),
    #[error("internal engine error: {0}")]
    Internal(String),
}

type Res<T = ()> = Result<T, EngineError>;

/// Everything a run needs besides the task graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub platform: PlatformSpec,
    pub provision: ProvisionPolicy,
    pub dispatch: DispatchPolicy,
    pub data: DataPolicy,
    pub resilience: ResiliencePolicy,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(platform: PlatformSpec, provision: ProvisionPolicy) -> Self {
        Self {
            platform,
            provision,
            dispatch: DispatchPolicy::default(),
            data: DataPolicy::default(),
            resilience: ResiliencePolicy::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Res {
        self.platform.validate()?;
        self.provision.validate(self.platform.node_count)?;
        self.dispatch.validate()?;
        self.data.validate()?;
        self.resilience.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Running,
    /// Every task reached a terminal state and all data movement drained.
    Finished,
    /// Stopped by a strategic failure with no chop configured.
    Halted,
    /// Nothing left to process but work remains (e.g. no usable nodes).
    Stalled,
}

#[derive(Clone, Debug)]
enum Ev {
    Start,
    Grant { nodes: u32 },
    Arrive { attempt: u64 },
    PushArrive { task: TaskId, worker: WorkerId },
    LookupDone { attempt: u64 },
    TaskEnd { attempt: u64 },
    KillCap { attempt: u64 },
    PruneSignal { attempt: u64 },
    XferPhase { id: u64 },
    XferEnd { id: u64 },
    PoolWake { pool: Pool },
    Wake { sched: usize },
    IdleCheck,
    Flush,
    Failure { index: usize },
    RateTick { index: usize },
    Reboot { node: NodeId },
    Checkpoint,
    /// No-op used to bring the clock up to a requested time.
    Tick,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Idle,
    Busy(u64),
}

#[derive(Clone, Debug)]
struct Worker {
    node: NodeId,
    sched: usize,
    slot: Slot,
    idle_since: f64,
    backlog: VecDeque<TaskId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Arriving,
    Lookup,
    Staging,
    Running,
    Writing,
    Signalling,
}

#[derive(Clone, Debug)]
struct Attempt {
    task: TaskId,
    workers: Vec<WorkerId>,
    node: NodeId,
    nodes: Vec<NodeId>,
    phase: Phase,
    waiting: BTreeSet<DataId>,
    pinned: Vec<DataId>,
    started: f64,
    progress: f64,
    pending_writes: usize,
    events: Vec<EventId>,
    writes: BTreeSet<u64>,
    reduction: Option<u64>,
}

impl Attempt {
    fn running(&self) -> bool {
        matches!(self.phase, Phase::Running | Phase::Writing)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Queued {
    Sched(usize),
    Gang,
    Backlog(WorkerId),
}

/// Data arriving at a node: a concrete transfer, or a broadcast that has not
/// reached the node yet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Inbound {
    Xfer(u64),
    Broadcast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Purpose {
    Deliver { node: NodeId, broadcast: bool },
    Relay,
    Write { attempt: u64, ifs_home: Option<NodeId> },
    Flush { node: NodeId, producer: TaskId },
    Reduce { reduction: u64, edge: usize },
}

#[derive(Clone, Debug)]
struct Transfer {
    data: DataId,
    bytes: u64,
    route: Route,
    src: crate::datamgr::Endpoint,
    dst: crate::datamgr::Endpoint,
    purpose: Purpose,
    fields: Vec<(String, String)>,
    event: Option<EventId>,
    in_pool: Option<f64>,
}

#[derive(Clone, Debug, Default)]
struct PoolState {
    served: f64,
    last: f64,
    active: BTreeSet<(u64, u64)>,
    wake: Option<EventId>,
}

#[derive(Clone, Debug)]
struct Broadcast {
    tree: BroadcastTree,
    pending: BTreeSet<NodeId>,
    late: BTreeSet<NodeId>,
}

#[derive(Clone, Debug)]
struct Reduction {
    attempt: u64,
    sink: NodeId,
    inputs: Vec<DataId>,
    edges: Vec<TreeEdge>,
    incoming: BTreeMap<NodeId, usize>,
    sink_left: usize,
    bytes: u64,
    xfers: BTreeSet<u64>,
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// A discrete-event run of one task graph under one configuration.
pub struct Engine {
    cfg: SimConfig,
    kernel: Kernel<Ev>,
    platform: Platform,
    graph: TaskGraph,
    prov: Provisioner,
    dir: LocationDirectory,
    status: RunStatus,
    error: Option<EngineError>,

    scheds: Vec<SchedulerState>,
    rr_sched: usize,
    push_cursor: Vec<usize>,
    gang: VecDeque<TaskId>,
    queued: BTreeMap<TaskId, Queued>,
    wake_pending: BTreeSet<usize>,
    arrived: BTreeSet<TaskId>,

    workers: BTreeMap<WorkerId, Worker>,
    idle: BTreeSet<WorkerId>,
    down_since: BTreeMap<NodeId, f64>,

    attempts: BTreeMap<u64, Attempt>,
    task_attempt: BTreeMap<TaskId, u64>,
    next_attempt: u64,
    next_in_group: BTreeMap<TaskId, TaskId>,

    xfers: BTreeMap<u64, Transfer>,
    next_xfer: u64,
    pools: BTreeMap<Pool, PoolState>,
    link_load: BTreeMap<NodeId, usize>,
    node_xfers: BTreeMap<NodeId, usize>,
    inbound: BTreeMap<(DataId, NodeId), Inbound>,
    waiters: BTreeMap<(DataId, NodeId), Vec<u64>>,
    broadcasts: BTreeMap<DataId, Broadcast>,
    reductions: BTreeMap<u64, Reduction>,
    next_reduction: u64,
    local_keep: BTreeMap<DataId, NodeId>,
    flush_pending: Vec<(DataId, NodeId, TaskId)>,
    flush_event: Option<EventId>,
    next_batch: u64,
    restage: Vec<(u64, DataId)>,

    outstanding: u32,
    outstanding_nodes: u32,
    grant_events: Vec<EventId>,
    idle_check: Option<(f64, EventId)>,
    draining: BTreeSet<BlockId>,
    saved_progress: BTreeMap<TaskId, f64>,
    migrate_src: BTreeMap<TaskId, NodeId>,

    failures: Vec<FailureSpec>,
    armed: Vec<usize>,
    background: usize,
    retries: BTreeMap<TaskId, u32>,
    pending_signals: usize,
    reopened: BTreeSet<TaskId>,
    unfolded: BTreeSet<(TemplateId, u32)>,
    chop_fired: bool,
    done: usize,
    terminal: usize,
    last_checkpoint: Option<Checkpoint>,

    rng_place: RngStream,
    rng_fail: RngStream,
    rng_prune: RngStream,
    rng_iter: RngStream,
}

impl Engine {
    pub fn new(cfg: SimConfig, graph: TaskGraph) -> Res<Self> {
        Self::build(cfg, graph, 0.0, None)
    }

    fn build(cfg: SimConfig, mut graph: TaskGraph, start: f64, dir: Option<LocationDirectory>) -> Res<Self> {
        cfg.validate()?;
        graph.validate()?;
        let spec = cfg.platform.clone();
        for t in graph.tasks() {
            if t.width > spec.node_count {
                return Err(EngineError::TooWide(t.id));
            }
        }
        let mut next_in_group = BTreeMap::new();
        if cfg.dispatch.pipeline_grouping {
            let groups: BTreeSet<u64> = graph.tasks().filter_map(|t| t.group).collect();
            for g in groups {
                let chain = dispatch_group(&graph, g)?;
                for w in chain.windows(2) {
                    next_in_group.insert(w[0], w[1]);
                }
            }
        }
        let dir = match dir {
            Some(d) => d,
            None => {
                let mut d = LocationDirectory::new(cfg.data.location, cfg.data.server_count);
                for item in graph.data_items() {
                    if item.kind.is_input() || item.size == 0 {
                        d.set_gfs(item.id);
                    }
                }
                d
            }
        };
        graph.drain_newly_ready();
        let nsched = cfg.dispatch.schedulers() as usize;
        let mut kernel = Kernel::starting_at(start);
        kernel.schedule(start, Ev::Start)?;
        let platform = Platform::new(spec.clone())?;
        let prov = Provisioner::new(cfg.provision.clone(), spec.block_granularity, spec.node_count, spec.cores_per_node);
        let (mut done, mut terminal) = (0, 0);
        for t in graph.task_ids() {
            match graph.state(t) {
                Some(TaskState::Done) => {
                    done += 1;
                    terminal += 1;
                }
                Some(s) if s.is_terminal() => terminal += 1,
                _ => {}
            }
        }
        let seed = cfg.seed;
        let mut e = Self {
            kernel,
            platform,
            graph,
            prov,
            dir,
            status: RunStatus::Running,
            error: None,
            scheds: (0..nsched).map(|i| SchedulerState::new(SchedulerId(i as u32))).collect(),
            rr_sched: 0,
            push_cursor: vec![0; nsched],
            gang: VecDeque::new(),
            queued: BTreeMap::new(),
            wake_pending: BTreeSet::new(),
            arrived: BTreeSet::new(),
            workers: BTreeMap::new(),
            idle: BTreeSet::new(),
            down_since: BTreeMap::new(),
            attempts: BTreeMap::new(),
            task_attempt: BTreeMap::new(),
            next_attempt: 0,
            next_in_group,
            xfers: BTreeMap::new(),
            next_xfer: 0,
            pools: BTreeMap::new(),
            link_load: BTreeMap::new(),
            node_xfers: BTreeMap::new(),
            inbound: BTreeMap::new(),
            waiters: BTreeMap::new(),
            broadcasts: BTreeMap::new(),
            reductions: BTreeMap::new(),
            next_reduction: 0,
            local_keep: BTreeMap::new(),
            flush_pending: Vec::new(),
            flush_event: None,
            next_batch: 0,
            restage: Vec::new(),
            outstanding: 0,
            outstanding_nodes: 0,
            grant_events: Vec::new(),
            idle_check: None,
            draining: BTreeSet::new(),
            saved_progress: BTreeMap::new(),
            migrate_src: BTreeMap::new(),
            failures: Vec::new(),
            armed: Vec::new(),
            background: 0,
            retries: BTreeMap::new(),
            pending_signals: 0,
            reopened: BTreeSet::new(),
            unfolded: BTreeSet::new(),
            chop_fired: false,
            done,
            terminal,
            last_checkpoint: None,
            rng_place: RngStream::new(seed, RngStream::PLACEMENT),
            rng_fail: RngStream::new(seed, RngStream::FAILURES),
            rng_prune: RngStream::new(seed, RngStream::PRUNING),
            rng_iter: RngStream::new(seed, "iteration"),
            cfg,
        };
        for f in e.cfg.resilience.failures.clone() {
            if f.at_sec.is_some_and(|t| t < start) {
                continue;
            }
            e.schedule_failure(f)?;
        }
        if let Some(every) = e.cfg.resilience.checkpoint_every_sec {
            e.kernel.schedule(start + every, Ev::Checkpoint)?;
            e.background += 1;
        }
        Ok(e)
    }

    // ---- public surface -------------------------------------------------

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn clock(&self) -> f64 {
        self.kernel.clock()
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    /// The error that aborted the run, if any.
    pub fn error(&self) -> Option<&EngineError> {
        self.error.as_ref()
    }

    pub fn graph(&self) -> &TaskGraph {
        &self.graph
    }

    pub fn trace(&self) -> &Trace {
        self.kernel.trace()
    }

    pub fn take_trace(&mut self) -> Trace {
        self.kernel.take_trace()
    }

    pub fn directory(&self) -> &LocationDirectory {
        &self.dir
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn done_count(&self) -> usize {
        self.done
    }

    pub fn retries(&self, task: TaskId) -> u32 {
        self.retries.get(&task).copied().unwrap_or(0)
    }

    /// Most recent periodic checkpoint.
    pub fn last_checkpoint(&self) -> Option<&Checkpoint> {
        self.last_checkpoint.as_ref()
    }

    pub fn report(&self, label: &str) -> Result<RunReport, MetricsError> {
        RunReport::from_trace(label, self.cfg.seed, self.kernel.trace(), self.graph.task_count() as u64)
    }

    /// Processes one event.
    pub fn step(&mut self) -> Res<RunStatus> {
        if self.status != RunStatus::Running {
            return Ok(self.status);
        }
        match self.kernel.pop_until(f64::INFINITY) {
            Some(ev) => self.process(ev)?,
            None => self.stall(),
        }
        Ok(self.status)
    }

    /// Runs until finished, halted or stalled.
    pub fn run(&mut self) -> Res<RunStatus> {
        while self.step()? == RunStatus::Running {}
        Ok(self.status)
    }

    /// Processes every event up to time `until` and leaves the clock there.
    pub fn run_until(&mut self, until: f64) -> Res<RunStatus> {
        while self.status == RunStatus::Running {
            match self.kernel.peek_time() {
                Some(t) if t <= until => {
                    self.step()?;
                }
                Some(_) => {
                    if self.now() < until {
                        self.kernel.schedule(until, Ev::Tick)?;
                        self.step()?;
                    }
                    break;
                }
                None => self.stall(),
            }
        }
        Ok(self.status)
    }

    pub fn set_priority(&mut self, task: TaskId, priority: f64) -> Res {
        self.graph.set_priority(task, priority)?;
        if let Some(Queued::Sched(s)) = self.queued.get(&task).copied() {
            self.scheds[s].remove(task);
            self.enqueue_at(task, s);
        }
        Ok(())
    }

    // ---- event loop -----------------------------------------------------

    fn process(&mut self, ev: Fired<Ev>) -> Res {
        let r = self.handle(ev.payload).and_then(|_| self.pump());
        if let Err(e) = &r {
            self.error = Some(e.clone());
            self.status = RunStatus::Stalled;
        }
        r
    }

    fn handle(&mut self, ev: Ev) -> Res {
        match ev {
            Ev::Start => {
                for t in self.graph.ready_tasks(QueueOrder::Fifo) {
                    self.enqueue(t);
                }
                self.graph.drain_newly_ready();
            }
            Ev::Grant { nodes } => self.on_grant(nodes)?,
            Ev::Arrive { attempt } => self.on_arrive(attempt)?,
            Ev::PushArrive { task, worker } => {
                if self.workers.get(&worker).is_some_and(|w| w.backlog.contains(&task)) {
                    self.arrived.insert(task);
                }
            }
            Ev::LookupDone { attempt } => self.on_lookup_done(attempt)?,
            Ev::TaskEnd { attempt } => self.on_compute_end(attempt)?,
            Ev::KillCap { attempt } => self.on_kill_cap(attempt)?,
            Ev::PruneSignal { attempt } => self.on_prune_signal(attempt),
            Ev::XferPhase { id } => self.activate_xfer(id)?,
            Ev::XferEnd { id } => self.finish_xfer(id)?,
            Ev::PoolWake { pool } => self.on_pool_wake(pool)?,
            Ev::Wake { sched } => {
                self.wake_pending.remove(&sched);
            }
            Ev::IdleCheck => self.idle_check = None,
            Ev::Tick => {}
            Ev::Flush => self.on_flush()?,
            Ev::Failure { index } => self.fire_failure(index, None)?,
            Ev::RateTick { index } => self.on_rate_tick(index)?,
            Ev::Reboot { node } => self.on_reboot(node),
            Ev::Checkpoint => {
                self.background -= 1;
                let cp = self.checkpoint();
                self.last_checkpoint = Some(cp);
                if let Some(every) = self.cfg.resilience.checkpoint_every_sec {
                    if self.kernel.pending() > self.background {
                        self.kernel.schedule_in(every, Ev::Checkpoint)?;
                        self.background += 1;
                    }
                }
            }
        }
        Ok(())
    }

    fn emit(&mut self, kind: EventKind, fields: Vec<(String, String)>) {
        self.kernel.record(kind, fields);
    }

    fn now(&self) -> f64 {
        self.kernel.clock()
    }

    fn pump(&mut self) -> Res {
        if self.status != RunStatus::Running {
            return Ok(());
        }
        self.process_restage()?;
        self.absorb_ready();
        self.dispatch_gang()?;
        match self.cfg.dispatch.mode {
            DispatchMode::Pull => self.dispatch_pull()?,
            DispatchMode::Push => {
                self.dispatch_push()?;
                self.start_backlogs()?;
            }
        }
        self.provision()?;
        self.release_draining();
        self.release_idle_blocks()?;
        self.check_finished();
        Ok(())
    }

    fn stall(&mut self) {
        self.release_all();
        self.status = RunStatus::Stalled;
    }

    fn check_finished(&mut self) {
        if self.status != RunStatus::Running {
            return;
        }
        let all_terminal = self.terminal >= self.graph.task_count();
        if all_terminal
            && self.graph.open_templates() == 0
            && self.flush_pending.is_empty()
            && self.xfers.is_empty()
            && self.pending_signals == 0
            && self.attempts.is_empty()
        {
            self.release_all();
            self.status = RunStatus::Finished;
        }
    }

    // ---- queues ---------------------------------------------------------

    fn absorb_ready(&mut self) {
        for t in self.graph.drain_newly_ready() {
            if self.graph.state(t) == Some(TaskState::Ready) && !self.queued.contains_key(&t) && !self.task_attempt.contains_key(&t) {
                self.enqueue(t);
            }
        }
    }

    fn enqueue(&mut self, t: TaskId) {
        let Some(spec) = self.graph.task(t) else { return };
        if spec.width > 1 {
            self.gang.push_back(t);
            self.queued.insert(t, Queued::Gang);
            return;
        }
        let s = self.rr_sched % self.scheds.len();
        self.rr_sched += 1;
        self.enqueue_at(t, s);
    }

    fn enqueue_at(&mut self, t: TaskId, s: usize) {
        let spec = self.graph.task(t).expect("task exists");
        let seq = self.graph.ready_seq(t).unwrap_or(0);
        self.scheds[s].enqueue(spec, seq, self.cfg.dispatch.ordering, self.cfg.dispatch.runtimes_known);
        self.queued.insert(t, Queued::Sched(s));
    }

    fn dequeue(&mut self, t: TaskId) {
        match self.queued.remove(&t) {
            Some(Queued::Sched(s)) => {
                self.scheds[s].remove(t);
            }
            Some(Queued::Gang) => self.gang.retain(|x| *x != t),
            Some(Queued::Backlog(w)) => {
                if let Some(wk) = self.workers.get_mut(&w) {
                    wk.backlog.retain(|x| *x != t);
                }
                self.arrived.remove(&t);
            }
            None => {}
        }
    }

    fn queued_demand(&self) -> usize {
        let cpn = self.cfg.platform.cores_per_node as usize;
        let sched: usize = self.scheds.iter().map(SchedulerState::len).sum();
        let gang: usize = self.gang.iter().filter_map(|t| self.graph.task(*t)).map(|s| s.width as usize * cpn).sum();
        sched + gang
    }

    // ---- workers --------------------------------------------------------

    fn worker_id(&self, node: NodeId, core: u32) -> WorkerId {
        WorkerId(node.0 * self.cfg.platform.cores_per_node + core)
    }

    fn node_workers(&self, node: NodeId) -> Vec<WorkerId> {
        (0..self.cfg.platform.cores_per_node).map(|c| self.worker_id(node, c)).collect()
    }

    fn usable(&self, node: NodeId) -> bool {
        self.platform.node(node).usable()
    }

    fn add_workers(&mut self, node: NodeId) {
        let now = self.now();
        let sched = scheduler_for_node(node, self.scheds.len() as u32).0 as usize;
        for w in self.node_workers(node) {
            self.workers.insert(w, Worker { node, sched, slot: Slot::Idle, idle_since: now, backlog: VecDeque::new() });
            self.idle.insert(w);
        }
    }

    /// Removes a node's workers, sending their backlogs back to the queue.
    fn remove_workers(&mut self, node: NodeId) -> Res {
        for w in self.node_workers(node) {
            self.idle.remove(&w);
            if let Some(wk) = self.workers.remove(&w) {
                for t in wk.backlog {
                    self.queued.remove(&t);
                    self.arrived.remove(&t);
                    self.graph.requeue(t)?;
                }
            }
        }
        Ok(())
    }

    fn free_worker(&mut self, w: WorkerId) {
        let now = self.now();
        if let Some(wk) = self.workers.get_mut(&w) {
            wk.slot = Slot::Idle;
            wk.idle_since = now;
            let node = wk.node;
            self.idle.insert(w);
            self.emit(EventKind::WorkerIdle, vec![kv("worker", w), kv("node", node)]);
        }
    }

    fn candidates(&self, s: usize) -> Vec<WorkerId> {
        if self.scheds.len() == 1 {
            return self.idle.iter().copied().collect();
        }
        let own: Vec<WorkerId> = self.idle.iter().copied().filter(|w| self.workers[w].sched == s).collect();
        if !own.is_empty() {
            return own;
        }
        self.idle.iter().copied().filter(|w| self.scheds[self.workers[w].sched].is_empty()).collect()
    }

    fn choose_worker(&mut self, t: TaskId, cands: &[WorkerId]) -> WorkerId {
        let d = &self.cfg.dispatch;
        if d.data_aware {
            let inputs: Vec<(DataId, u64)> = self
                .graph
                .live_inputs(t)
                .into_iter()
                .map(|id| (id, self.graph.data(id).map_or(0, |r| r.size)))
                .collect();
            let ranked = rank_workers(&inputs, cands, |w, id| {
                let node = self.workers[&w].node;
                self.platform.node(node).cache.contains(id)
            });
            return ranked[0];
        }
        match d.placement {
            Placement::Random => cands[self.rng_place.below(cands.len())],
            Placement::FirstIdle => cands[0],
        }
    }

    fn hop_delay(&self) -> f64 {
        f64::from(self.cfg.dispatch.hops()) * self.cfg.dispatch.dispatch_latency_sec
    }

    fn throttled(&mut self, s: usize) -> Res<bool> {
        let now = self.now();
        if self.scheds[s].busy_until > now {
            if self.wake_pending.insert(s) {
                let at = self.scheds[s].busy_until;
                self.kernel.schedule(at, Ev::Wake { sched: s })?;
            }
            return Ok(true);
        }
        Ok(false)
    }

    fn consume_throughput(&mut self, s: usize) {
        let thr = self.cfg.dispatch.throughput_tasks_per_sec;
        if thr.is_finite() {
            self.scheds[s].busy_until = self.now() + 1.0 / thr;
        }
    }

    fn dispatch_pull(&mut self) -> Res {
        for s in 0..self.scheds.len() {
            while !self.scheds[s].is_empty() {
                if self.idle.is_empty() {
                    return Ok(());
                }
                let cands = self.candidates(s);
                if cands.is_empty() || self.throttled(s)? {
                    break;
                }
                let t = self.scheds[s].head().expect("non-empty");
                let w = self.choose_worker(t, &cands);
                self.scheds[s].pop_head();
                self.queued.remove(&t);
                let delay = self.hop_delay();
                self.dispatch_to(t, vec![w], s, delay, "pull")?;
                self.consume_throughput(s);
            }
        }
        Ok(())
    }

    fn dispatch_push(&mut self) -> Res {
        let bound = self.cfg.dispatch.push_backlog as usize;
        for s in 0..self.scheds.len() {
            if self.scheds[s].is_empty() {
                continue;
            }
            let mut targets: Vec<WorkerId> = self.workers.iter().filter(|(_, w)| w.sched == s).map(|(id, _)| *id).collect();
            if targets.is_empty() {
                targets = self.workers.keys().copied().collect();
            }
            if targets.is_empty() {
                continue;
            }
            let n = targets.len();
            while !self.scheds[s].is_empty() {
                if self.throttled(s)? {
                    break;
                }
                let cursor = self.push_cursor[s] % n;
                let Some(slot) = (0..n).map(|i| (cursor + i) % n).find(|&i| self.workers[&targets[i]].backlog.len() < bound) else {
                    break;
                };
                let t = self.scheds[s].pop_head().expect("non-empty");
                let w = targets[slot];
                self.push_cursor[s] = (slot + 1) % n;
                self.graph.mark_dispatched(t)?;
                let node = self.workers[&w].node;
                self.workers.get_mut(&w).expect("worker").backlog.push_back(t);
                self.queued.insert(t, Queued::Backlog(w));
                self.emit(EventKind::Dispatch, vec![kv("task", t), kv("worker", w), kv("node", node), kv("sched", s), kv("via", "push")]);
                let delay = self.hop_delay();
                self.kernel.schedule_in(delay, Ev::PushArrive { task: t, worker: w })?;
                self.consume_throughput(s);
            }
        }
        Ok(())
    }

    /// Idle push-mode workers start their arrived backlog head, or steal.
    fn start_backlogs(&mut self) -> Res {
        let idle: Vec<WorkerId> = self.idle.iter().copied().collect();
        for w in idle {
            if !self.idle.contains(&w) {
                continue;
            }
            let head = self.workers[&w].backlog.front().copied();
            match head {
                Some(t) if self.arrived.contains(&t) => {
                    self.workers.get_mut(&w).expect("worker").backlog.pop_front();
                    self.arrived.remove(&t);
                    self.queued.remove(&t);
                    self.begin_on(t, vec![w])?;
                }
                Some(_) => {}
                None if self.cfg.dispatch.stealing => self.try_steal(w)?,
                None => {}
            }
        }
        Ok(())
    }

    fn try_steal(&mut self, thief: WorkerId) -> Res {
        let ids: Vec<WorkerId> = self.workers.keys().copied().collect();
        let Some(me) = ids.iter().position(|w| *w == thief) else { return Ok(()) };
        let order = crate::dispatch::steal_order(me, ids.len(), &mut self.rng_place);
        let k = (self.cfg.dispatch.steal_neighbors as usize).min(order.len());
        let mut polled: Vec<crate::dispatch::WorkerBacklog> = order[..k]
            .iter()
            .map(|&i| crate::dispatch::WorkerBacklog { worker: ids[i], tasks: self.workers[&ids[i]].backlog.clone() })
            .collect();
        let idx: Vec<usize> = (0..k).collect();
        let Some((t, victim)) = crate::dispatch::steal(&mut polled, &idx, k) else { return Ok(()) };
        self.workers.get_mut(&victim).expect("victim").backlog.retain(|x| *x != t);
        self.arrived.remove(&t);
        let node = self.workers[&thief].node;
        let sched = self.workers[&thief].sched;
        self.workers.get_mut(&thief).expect("thief").backlog.push_back(t);
        self.queued.insert(t, Queued::Backlog(thief));
        self.emit(EventKind::Dispatch, vec![kv("task", t), kv("worker", thief), kv("node", node), kv("sched", sched), kv("via", "steal")]);
        let delay = self.cfg.dispatch.dispatch_latency_sec;
        self.kernel.schedule_in(delay, Ev::PushArrive { task: t, worker: thief })?;
        Ok(())
    }

    fn dispatch_gang(&mut self) -> Res {
        while let Some(&t) = self.gang.front() {
            let width = self.graph.task(t).map_or(1, |s| s.width) as usize;
            let mut nodes: Vec<NodeId> = Vec::new();
            let mut seen = BTreeSet::new();
            for w in &self.idle {
                let node = self.workers[w].node;
                if seen.insert(node) && self.node_workers(node).iter().all(|x| self.idle.contains(x)) {
                    nodes.push(node);
                    if nodes.len() == width {
                        break;
                    }
                }
            }
            if nodes.len() < width {
                break;
            }
            self.gang.pop_front();
            self.queued.remove(&t);
            let workers: Vec<WorkerId> = nodes.iter().flat_map(|n| self.node_workers(*n)).collect();
            let delay = self.hop_delay();
            self.dispatch_to(t, workers, 0, delay, "gang")?;
        }
        Ok(())
    }

    fn new_attempt(&mut self, t: TaskId, workers: Vec<WorkerId>) -> u64 {
        let id = self.next_attempt;
        self.next_attempt += 1;
        let mut nodes: Vec<NodeId> = workers.iter().map(|w| self.workers[w].node).collect();
        nodes.dedup();
        let node = nodes[0];
        for w in &workers {
            self.idle.remove(w);
            self.workers.get_mut(w).expect("worker").slot = Slot::Busy(id);
        }
        let progress = self.saved_progress.get(&t).copied().unwrap_or(0.0);
        self.attempts.insert(
            id,
            Attempt {
                task: t,
                workers,
                node,
                nodes,
                phase: Phase::Arriving,
                waiting: BTreeSet::new(),
                pinned: Vec::new(),
                started: 0.0,
                progress,
                pending_writes: 0,
                events: Vec::new(),
                writes: BTreeSet::new(),
                reduction: None,
            },
        );
        self.task_attempt.insert(t, id);
        id
    }

    /// Binds `t` to `workers` and schedules its arrival after `delay`.
    fn dispatch_to(&mut self, t: TaskId, workers: Vec<WorkerId>, sched: usize, delay: f64, via: &str) -> Res {
        self.graph.mark_dispatched(t)?;
        let w = workers[0];
        let via = if self.saved_progress.contains_key(&t) { "migrate" } else { via };
        let a = self.new_attempt(t, workers);
        let node = self.attempts[&a].node;
        self.emit(EventKind::Dispatch, vec![kv("task", t), kv("worker", w), kv("node", node), kv("sched", sched), kv("via", via)]);
        let ev = self.kernel.schedule_in(delay, Ev::Arrive { attempt: a })?;
        self.attempts.get_mut(&a).expect("attempt").events.push(ev);
        Ok(())
    }

    /// Starts a task already at its worker (push backlog head).
    fn begin_on(&mut self, t: TaskId, workers: Vec<WorkerId>) -> Res {
        let a = self.new_attempt(t, workers);
        self.begin_staging(a)
    }

    fn on_arrive(&mut self, a: u64) -> Res {
        if !self.attempts.contains_key(&a) {
            return Ok(());
        }
        self.begin_staging(a)
    }

    // ---- execution ------------------------------------------------------

    fn start_exec(&mut self, a: u64) -> Res {
        let now = self.now();
        let at = self.attempts.get_mut(&a).expect("attempt");
        at.phase = Phase::Running;
        at.started = now;
        at.events.clear();
        let (t, w, node, cores, progress) = (at.task, at.workers[0], at.node, at.workers.len(), at.progress);
        self.graph.mark_running(t)?;
        self.saved_progress.remove(&t);
        self.migrate_src.remove(&t);
        let runtime = self.graph.task(t).map_or(0.0, |s| s.runtime);
        let remaining = (runtime - progress).max(0.0);
        let mut f = vec![kv("task", t), kv("worker", w), kv("node", node), kv("cores", cores)];
        if progress > 0.0 {
            f.push(kv("resumed", progress));
        }
        if self.reopened.contains(&t) {
            f.push(kv("rerun", true));
        }
        self.emit(EventKind::TaskStart, f);
        let end = self.kernel.schedule_in(remaining, Ev::TaskEnd { attempt: a })?;
        let mut evs = vec![end];
        if let Some(cap) = self.cfg.resilience.kill_cap_sec {
            if cap < remaining {
                evs.push(self.kernel.schedule_in(cap, Ev::KillCap { attempt: a })?);
            }
        }
        self.attempts.get_mut(&a).expect("attempt").events = evs;
        Ok(())
    }

    fn on_compute_end(&mut self, a: u64) -> Res {
        let Some(at) = self.attempts.get_mut(&a) else { return Ok(()) };
        for ev in std::mem::take(&mut at.events) {
            self.kernel.cancel(ev);
        }
        at.phase = Phase::Writing;
        self.write_outputs(a)?;
        if self.attempts[&a].pending_writes == 0 {
            self.finish(a)?;
        }
        Ok(())
    }

    /// Completion once outputs are written: the task is done.
    fn finish(&mut self, a: u64) -> Res {
        let at = self.attempts.remove(&a).expect("attempt");
        let t = at.task;
        self.task_attempt.remove(&t);
        self.unpin_all(&at);
        self.graph.mark_done(t)?;
        self.done += 1;
        self.terminal += 1;
        let mut f = vec![kv("task", t), kv("worker", at.workers[0]), kv("node", at.node), kv("outcome", "done")];
        if self.reopened.contains(&t) {
            f.push(kv("rerun", true));
        }
        self.emit(EventKind::TaskEnd, f);
        self.release_inputs(t);
        self.branch_and_bound(t)?;
        self.iterate(t)?;

        // Pipeline handoff: the next group member runs on the same worker.
        let handoff = self.next_in_group.get(&t).copied().filter(|n| self.graph.state(*n) == Some(TaskState::Ready));
        match handoff {
            Some(n) if at.workers.len() == 1 && self.usable(at.node) => {
                self.dequeue(n);
                self.graph.mark_dispatched(n)?;
                let w = at.workers[0];
                let sched = self.workers[&w].sched;
                self.emit(EventKind::Dispatch, vec![kv("task", n), kv("worker", w), kv("node", at.node), kv("sched", sched), kv("via", "group")]);
                let na = self.new_attempt(n, vec![w]);
                self.begin_staging(na)?;
            }
            _ => {
                for w in &at.workers {
                    self.free_worker(*w);
                }
            }
        }
        self.maybe_chop()?;
        Ok(())
    }

    fn unpin_all(&mut self, at: &Attempt) {
        if self.platform.node(at.node).allocated {
            let cache = &mut self.platform.node_mut(at.node).cache;
            for d in &at.pinned {
                cache.unpin(*d);
            }
        }
    }

    fn is_terminal(&self, t: TaskId) -> bool {
        self.graph.state(t).is_some_and(TaskState::is_terminal)
    }

    /// Whether a data item still has a consumer that may read it.
    fn needed(&self, d: DataId) -> bool {
        self.graph.consumers(d).any(|c| !self.is_terminal(c))
    }

    /// Unpins kept local intermediates once no consumer needs them.
    fn release_inputs(&mut self, t: TaskId) {
        let inputs: Vec<DataId> = self.graph.task(t).map(|s| s.inputs.iter().copied().collect()).unwrap_or_default();
        for d in inputs {
            if let Some(&node) = self.local_keep.get(&d) {
                if !self.needed(d) {
                    self.local_keep.remove(&d);
                    if self.platform.node(node).allocated {
                        self.platform.node_mut(node).cache.unpin(d);
                    }
                }
            }
        }
    }

    fn branch_and_bound(&mut self, t: TaskId) -> Res {
        let Some(p) = self.graph.prune_probability else { return Ok(()) };
        if self.graph.parents(t).is_empty() {
            return Ok(());
        }
        if self.rng_prune.unit() >= p {
            return Ok(());
        }
        let sibling = self.graph.siblings(t).into_iter().find(|s| self.graph.state(*s) != Some(TaskState::Pruned));
        let Some(s) = sibling else { return Ok(()) };
        match self.graph.state(s) {
            Some(TaskState::Done) => {
                for c in self.graph.children(s) {
                    if !self.is_terminal(c) {
                        self.prune_internal(c)?;
                    }
                }
            }
            Some(TaskState::Failed) => {}
            _ => {
                self.prune_internal(s)?;
            }
        }
        Ok(())
    }

    fn iterate(&mut self, t: TaskId) -> Res {
        let Some(o) = self.graph.origin(t) else { return Ok(()) };
        let Some(tpl) = self.graph.template(o.template) else { return Ok(()) };
        if o.body_index != tpl.gather || tpl.is_closed() || !self.unfolded.insert((o.template, o.iteration)) {
            return Ok(());
        }
        let converged = match tpl.convergence {
            Convergence::Never => false,
            Convergence::AtIteration(k) => o.iteration >= k,
            Convergence::Probability(p) => self.rng_iter.unit() < p,
        };
        self.graph.unfold_iteration(o.template, IterationResult { converged })?;
        Ok(())
    }

    fn maybe_chop(&mut self) -> Res {
        if let Some(c) = self.cfg.dispatch.chop {
            if crate::dispatch::should_chop(self.done, self.graph.task_count(), c.trigger_fraction, self.chop_fired) {
                self.fire_chop()?;
            }
        }
        Ok(())
    }

    // ---- provisioning ---------------------------------------------------

    fn provision(&mut self) -> Res {
        loop {
            let demand = Demand {
                ready: self.queued_demand(),
                idle_workers: self.idle.len(),
                committed_nodes: self.platform.allocated_nodes() + self.outstanding_nodes,
                outstanding_requests: self.outstanding,
            };
            let Some(n) = self.prov.next_request(demand) else { return Ok(()) };
            self.request_nodes(n)?;
            if self.prov.policy.mode == ProvisionMode::Static {
                return Ok(());
            }
        }
    }

    fn request_nodes(&mut self, n: u32) -> Res {
        self.outstanding += 1;
        self.outstanding_nodes += n;
        let p = &self.prov.policy;
        let delay = p.grant_wait_sec + p.request_overhead_sec;
        let ev = self.kernel.schedule_in(delay, Ev::Grant { nodes: n })?;
        self.grant_events.push(ev);
        Ok(())
    }

    fn on_grant(&mut self, nodes: u32) -> Res {
        self.outstanding = self.outstanding.saturating_sub(1);
        self.outstanding_nodes = self.outstanding_nodes.saturating_sub(nodes);
        let now = self.now();
        let blocks = self.platform.grant(nodes, now);
        let g = self.cfg.platform.block_granularity;
        let cpn = self.cfg.platform.cores_per_node;
        for b in blocks {
            let members = self.platform.blocks[b.0 as usize].nodes.clone();
            self.emit(EventKind::BlockGranted, vec![kv("block", b), kv("nodes", g), kv("cores", g * cpn), kv("first", members[0])]);
            for n in members {
                if !self.platform.node(n).lost {
                    self.down_since.remove(&n);
                    self.add_workers(n);
                }
            }
        }
        for index in std::mem::take(&mut self.armed) {
            self.arm_rate(index)?;
        }
        Ok(())
    }

    /// Since when a node has been fully idle; `None` while any core works.
    fn node_idle_since(&self, n: NodeId) -> Option<f64> {
        if let Some(t) = self.down_since.get(&n) {
            return Some(*t);
        }
        if self.platform.node(n).lost {
            return Some(0.0);
        }
        let mut latest = f64::NEG_INFINITY;
        for w in self.node_workers(n) {
            let wk = self.workers.get(&w)?;
            if wk.slot != Slot::Idle || !wk.backlog.is_empty() {
                return None;
            }
            latest = latest.max(wk.idle_since);
        }
        Some(latest)
    }

    /// Blocks that must stay allocated: they host the only copy of data a
    /// consumer still needs, unflushed outputs or live transfers.
    fn block_retained(&self, b: BlockId) -> bool {
        let members = &self.platform.blocks[b.0 as usize].nodes;
        for n in members {
            if self.node_xfers.get(n).copied().unwrap_or(0) > 0 {
                return true;
            }
            if self.flush_pending.iter().any(|(_, m, _)| m == n) {
                return true;
            }
            if self.migrate_src.values().any(|m| m == n) {
                return true;
            }
            for d in self.platform.node(*n).cache.resident() {
                if !self.dir.on_gfs(d) && self.dir.ifs_home(d).is_none() && self.dir.holders(d).len() <= 1 && self.needed(d) {
                    return true;
                }
            }
        }
        false
    }

    fn release_idle_blocks(&mut self) -> Res {
        if self.prov.policy.mode != ProvisionMode::Dynamic || self.queued_demand() > 0 {
            return Ok(());
        }
        let now = self.now();
        let threshold = self.prov.policy.idle_release_after_sec;
        let mut view = Vec::new();
        let mut next_check = f64::INFINITY;
        for blk in self.platform.allocated_blocks() {
            if self.draining.contains(&blk.id) {
                continue;
            }
            let idle_since: Vec<Option<f64>> = blk.nodes.iter().map(|n| self.node_idle_since(*n)).collect();
            let all_idle = idle_since.iter().all(Option::is_some);
            let retained = all_idle && self.block_retained(blk.id);
            if all_idle && !retained {
                let latest = idle_since.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
                if latest + threshold > now {
                    next_check = next_check.min(latest + threshold);
                }
            }
            view.push(BlockIdleness { id: blk.id, idle_since, retained });
        }
        for b in release_idle(&view, now, &self.prov.policy) {
            self.release_block(b)?;
        }
        if next_check.is_finite() && self.idle_check.is_none_or(|(t, _)| t > next_check) {
            if let Some((_, ev)) = self.idle_check.take() {
                self.kernel.cancel(ev);
            }
            let ev = self.kernel.schedule(next_check, Ev::IdleCheck)?;
            self.idle_check = Some((next_check, ev));
        }
        Ok(())
    }

    fn release_draining(&mut self) {
        let ready: Vec<BlockId> = self.draining.iter().copied().filter(|b| !self.block_retained_for_migration(*b)).collect();
        for b in ready {
            self.draining.remove(&b);
            let _ = self.release_block(b);
        }
    }

    fn block_retained_for_migration(&self, b: BlockId) -> bool {
        self.platform.blocks[b.0 as usize]
            .nodes
            .iter()
            .any(|n| self.node_xfers.get(n).copied().unwrap_or(0) > 0 || self.migrate_src.values().any(|m| m == n))
    }

    fn release_block(&mut self, b: BlockId) -> Res {
        let now = self.now();
        let g = self.cfg.platform.block_granularity;
        let cpn = self.cfg.platform.cores_per_node;
        let members = self.platform.blocks[b.0 as usize].nodes.clone();
        for n in &members {
            self.remove_workers(*n)?;
            self.down_since.remove(n);
        }
        self.emit(EventKind::BlockReleased, vec![kv("block", b), kv("nodes", g), kv("cores", g * cpn)]);
        for (n, ids) in self.platform.release(b, now) {
            for d in ids {
                self.dir.deregister(d, n);
                if self.local_keep.get(&d) == Some(&n) {
                    self.local_keep.remove(&d);
                }
            }
        }
        let set: BTreeSet<NodeId> = members.into_iter().collect();
        self.dir.erase_ifs_on(&set);
        Ok(())
    }

    fn release_all(&mut self) {
        let ids: Vec<BlockId> = self.platform.allocated_blocks().map(|b| b.id).collect();
        for b in ids {
            let _ = self.release_block(b);
        }
        self.draining.clear();
    }
}

#[cfg(test)]
mod tests;
