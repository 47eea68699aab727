//! Task dispatch policy and the queue-level mechanics behind it: ordered
//! scheduler queues, pull assignment, round-robin push with bounded worker
//! backlogs, work stealing, data-aware ranking, pipeline group validation
//! and the tail-chop trigger.
//!
//! Timing (dispatch hops, stage-in, throughput ceilings) lives in the
//! engine; everything here is a pure decision over queue state.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{OrderKey, QueueOrder, TaskGraph, TaskSpec};
use crate::ids::{DataId, NodeId, SchedulerId, TaskId, WorkerId};
use crate::kernel::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("pipeline group {0} is not a chain")]
    GroupNotChain(u64),
    #[error("destination node {0} is busy")]
    DestinationBusy(NodeId),
    #[error("task {0} is not running")]
    NotRunning(TaskId),
    #[error("task migration is disabled")]
    MigrationDisabled,
    #[error("invalid dispatch policy: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    Centralized,
    Hierarchical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispatchMode {
    #[default]
    Pull,
    Push,
}

/// Worker choice when data-aware ranking is off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    #[default]
    FirstIdle,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ChopPolicy {
    /// Fraction of tasks done that fires the chop, in (0, 1].
    pub trigger_fraction: f64,
    pub restart_nodes: u32,
}

fn one() -> u32 {
    1
}
fn two() -> u32 {
    2
}
fn default_throughput() -> f64 {
    1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DispatchPolicy {
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "one")]
    pub scheduler_count: u32,
    #[serde(default)]
    pub mode: DispatchMode,
    #[serde(default)]
    pub stealing: bool,
    #[serde(default = "two")]
    pub steal_neighbors: u32,
    #[serde(default)]
    pub ordering: QueueOrder,
    /// Lets runtime-based orderings see true runtimes.
    #[serde(default)]
    pub runtimes_known: bool,
    #[serde(default)]
    pub data_aware: bool,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub pipeline_grouping: bool,
    #[serde(default)]
    pub dispatch_latency_sec: f64,
    /// Per-scheduler dispatch ceiling; `inf` disables it.
    #[serde(default = "default_throughput")]
    pub throughput_tasks_per_sec: f64,
    #[serde(default = "two")]
    pub push_backlog: u32,
    #[serde(default)]
    pub chop: Option<ChopPolicy>,
    #[serde(default)]
    pub migration: bool,
}

impl Default for DispatchPolicy {
    fn default() -> Self {
        Self {
            architecture: Architecture::Centralized,
            scheduler_count: 1,
            mode: DispatchMode::Pull,
            stealing: false,
            steal_neighbors: 2,
            ordering: QueueOrder::Fifo,
            runtimes_known: false,
            data_aware: false,
            placement: Placement::FirstIdle,
            pipeline_grouping: false,
            dispatch_latency_sec: 0.0,
            throughput_tasks_per_sec: default_throughput(),
            push_backlog: 2,
            chop: None,
            migration: false,
        }
    }
}

impl DispatchPolicy {
    /// Dispatch hops: submit host to worker, or via one scheduler tier.
    pub fn hops(&self) -> u32 {
        match self.architecture {
            Architecture::Centralized => 1,
            Architecture::Hierarchical => 2,
        }
    }

    pub fn schedulers(&self) -> u32 {
        match self.architecture {
            Architecture::Centralized => 1,
            Architecture::Hierarchical => self.scheduler_count.max(1),
        }
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        let bad = |m: &str| Err(DispatchError::Invalid(m.to_string()));
        if self.scheduler_count == 0 {
            return bad("scheduler-count must be >= 1");
        }
        if !(self.dispatch_latency_sec >= 0.0) {
            return bad("dispatch-latency-sec must be >= 0");
        }
        if !(self.throughput_tasks_per_sec > 0.0) {
            return bad("throughput-tasks-per-sec must be > 0");
        }
        if self.push_backlog == 0 {
            return bad("push-backlog must be >= 1");
        }
        if let Some(c) = self.chop {
            if !(c.trigger_fraction > 0.0 && c.trigger_fraction <= 1.0) {
                return bad("chop trigger-fraction must be in (0, 1]");
            }
            if c.restart_nodes == 0 {
                return bad("chop restart-nodes must be >= 1");
            }
        }
        Ok(())
    }
}

/// Static round-robin mapping of nodes to schedulers.
pub fn scheduler_for_node(node: NodeId, schedulers: u32) -> SchedulerId {
    SchedulerId(node.0 % schedulers.max(1))
}

/// One middleware scheduler's ordered ready queue.
#[derive(Clone, Debug, Default)]
pub struct SchedulerState {
    pub id: SchedulerId,
    queue: BTreeSet<(OrderKey, TaskId)>,
    keys: HashMap<TaskId, OrderKey>,
    /// Earliest time the scheduler can make its next dispatch decision.
    pub busy_until: f64,
}

impl SchedulerState {
    pub fn new(id: SchedulerId) -> Self {
        Self { id, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn contains(&self, task: TaskId) -> bool {
        self.keys.contains_key(&task)
    }

    pub fn enqueue(&mut self, spec: &TaskSpec, ready_seq: u64, order: QueueOrder, runtimes_known: bool) {
        self.enqueue_key(spec.id, OrderKey::new(spec, ready_seq, order, runtimes_known));
    }

    pub fn enqueue_key(&mut self, task: TaskId, key: OrderKey) {
        self.remove(task);
        self.queue.insert((key, task));
        self.keys.insert(task, key);
    }

    pub fn remove(&mut self, task: TaskId) -> bool {
        match self.keys.remove(&task) {
            Some(k) => self.queue.remove(&(k, task)),
            None => false,
        }
    }

    pub fn head(&self) -> Option<TaskId> {
        self.queue.first().map(|(_, t)| *t)
    }

    pub fn pop_head(&mut self) -> Option<TaskId> {
        let (k, t) = self.queue.pop_first()?;
        let _ = k;
        self.keys.remove(&t);
        Some(t)
    }

    /// Queued tasks in dispatch order.
    pub fn iter(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.queue.iter().map(|(_, t)| *t)
    }

    pub fn drain(&mut self) -> Vec<TaskId> {
        self.keys.clear();
        std::mem::take(&mut self.queue).into_iter().map(|(_, t)| t).collect()
    }
}

/// Pull mode: an idle worker takes the queue head.
pub fn assign_on_idle(_worker: WorkerId, scheduler: &mut SchedulerState) -> Option<TaskId> {
    scheduler.pop_head()
}

/// A worker's local queue in push mode.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct WorkerBacklog {
    pub worker: WorkerId,
    pub tasks: VecDeque<TaskId>,
}

impl WorkerBacklog {
    pub fn new(worker: WorkerId) -> Self {
        Self { worker, tasks: VecDeque::new() }
    }
}

/// Push mode: hand queued tasks to workers round-robin, skipping workers
/// whose backlog reached `bound`. `cursor` persists between rounds.
pub fn push_assign(
    scheduler: &mut SchedulerState,
    backlogs: &mut [WorkerBacklog],
    cursor: &mut usize,
    bound: usize,
) -> Vec<(TaskId, WorkerId)> {
    let mut out = Vec::new();
    let n = backlogs.len();
    if n == 0 {
        return out;
    }
    while !scheduler.is_empty() {
        let Some(slot) = (0..n).map(|i| (*cursor + i) % n).find(|&i| backlogs[i].tasks.len() < bound) else {
            break;
        };
        let task = scheduler.pop_head().expect("non-empty");
        backlogs[slot].tasks.push_back(task);
        out.push((task, backlogs[slot].worker));
        *cursor = (slot + 1) % n;
    }
    out
}

/// Order in which `thief` polls the other backlogs: a seeded permutation.
pub fn steal_order(thief: usize, n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut others: Vec<usize> = (0..n).filter(|&i| i != thief).collect();
    others.shuffle(rng);
    others
}

/// Work stealing: poll up to `neighbors` victims in `order`, taking the tail
/// of the first non-empty backlog.
pub fn steal(backlogs: &mut [WorkerBacklog], order: &[usize], neighbors: usize) -> Option<(TaskId, WorkerId)> {
    for &victim in order.iter().take(neighbors) {
        if let Some(t) = backlogs[victim].tasks.pop_back() {
            return Some((t, backlogs[victim].worker));
        }
    }
    None
}

/// Bytes of `inputs` resident at a candidate.
fn resident_bytes<T: Copy>(inputs: &[(DataId, u64)], c: T, holds: &impl Fn(T, DataId) -> bool) -> u64 {
    inputs.iter().filter(|(d, _)| holds(c, *d)).map(|(_, s)| *s).sum()
}

/// Data-aware ranking: descending resident input bytes, ties by id.
pub fn rank_workers<T: Copy + Ord>(inputs: &[(DataId, u64)], candidates: &[T], holds: impl Fn(T, DataId) -> bool) -> Vec<T> {
    let mut scored: Vec<(u64, T)> = candidates.iter().map(|c| (resident_bytes(inputs, *c, &holds), *c)).collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, c)| c).collect()
}

/// Validates that a pipeline group is a simple chain and returns it in
/// execution order.
pub fn dispatch_group(graph: &TaskGraph, group: u64) -> Result<Vec<TaskId>, DispatchError> {
    let members: BTreeSet<TaskId> = graph.group_members(group).into_iter().collect();
    if members.is_empty() {
        return Err(DispatchError::GroupNotChain(group));
    }
    let mut next: BTreeMap<TaskId, TaskId> = BTreeMap::new();
    let mut has_parent: BTreeSet<TaskId> = BTreeSet::new();
    for &t in &members {
        let kids: Vec<TaskId> = graph.children(t).into_iter().filter(|c| members.contains(c)).collect();
        let parents: Vec<TaskId> = graph.parents(t).into_iter().filter(|p| members.contains(p)).collect();
        if kids.len() > 1 || parents.len() > 1 {
            return Err(DispatchError::GroupNotChain(group));
        }
        if let Some(k) = kids.first() {
            next.insert(t, *k);
        }
        if !parents.is_empty() {
            has_parent.insert(t);
        }
    }
    let heads: Vec<TaskId> = members.iter().copied().filter(|t| !has_parent.contains(t)).collect();
    if heads.len() != 1 {
        return Err(DispatchError::GroupNotChain(group));
    }
    let mut chain = vec![heads[0]];
    while let Some(n) = next.get(chain.last().expect("non-empty")) {
        chain.push(*n);
    }
    if chain.len() != members.len() {
        return Err(DispatchError::GroupNotChain(group));
    }
    Ok(chain)
}

/// Done-count at which a chop fires: `floor(trigger * total)`, at least one.
pub fn chop_threshold(total: usize, trigger_fraction: f64) -> usize {
    ((trigger_fraction * total as f64 + 1e-9).floor() as usize).max(1)
}

/// Whether the tail chop fires now. It needs unfinished work to cut, so a
/// trigger of 1.0 never fires.
pub fn should_chop(done: usize, total: usize, trigger_fraction: f64, already_fired: bool) -> bool {
    !already_fired && done < total && done >= chop_threshold(total, trigger_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DataKind, DataRef};

    fn specs(n: u64) -> Vec<TaskSpec> {
        (0..n).map(|i| TaskSpec::new(i, 1.0)).collect()
    }

    fn queue_of(n: u64) -> SchedulerState {
        let mut s = SchedulerState::new(SchedulerId(0));
        for (i, t) in specs(n).iter().enumerate() {
            s.enqueue(t, i as u64, QueueOrder::Fifo, false);
        }
        s
    }

    #[test]
    fn pull_takes_head_or_nothing() {
        let mut s = queue_of(1);
        assert_eq!(assign_on_idle(WorkerId(0), &mut s), Some(TaskId(0)));
        assert_eq!(assign_on_idle(WorkerId(0), &mut s), None);
    }

    #[test]
    fn longest_first_pulls_longest() {
        let mut s = SchedulerState::new(SchedulerId(0));
        for (i, (id, rt)) in [(0, 10.0), (1, 400.0), (2, 60.0)].into_iter().enumerate() {
            s.enqueue(&TaskSpec::new(id, rt), i as u64, QueueOrder::LongestFirst, true);
        }
        assert_eq!(assign_on_idle(WorkerId(0), &mut s), Some(TaskId(1)));
        assert_eq!(assign_on_idle(WorkerId(0), &mut s), Some(TaskId(2)));
    }

    #[test]
    fn push_round_robin_examples() {
        let mut s = queue_of(4);
        let mut b = vec![WorkerBacklog::new(WorkerId(0)), WorkerBacklog::new(WorkerId(1))];
        let mut cur = 0;
        assert_eq!(push_assign(&mut s, &mut b, &mut cur, 2).len(), 4);
        assert_eq!(b[0].tasks, VecDeque::from([TaskId(0), TaskId(2)]));
        assert_eq!(b[1].tasks, VecDeque::from([TaskId(1), TaskId(3)]));

        let mut s = queue_of(1);
        let mut b: Vec<_> = (0..4).map(|w| WorkerBacklog::new(WorkerId(w))).collect();
        let mut cur = 0;
        push_assign(&mut s, &mut b, &mut cur, 2);
        assert_eq!(b.iter().filter(|w| !w.tasks.is_empty()).count(), 1);

        let mut s = queue_of(2);
        let mut b = vec![WorkerBacklog::new(WorkerId(0)), WorkerBacklog::new(WorkerId(1))];
        b[0].tasks.extend([TaskId(90), TaskId(91)]);
        let mut cur = 0;
        let assigned = push_assign(&mut s, &mut b, &mut cur, 2);
        assert!(assigned.iter().all(|(_, w)| *w == WorkerId(1)));
        assert_eq!(b[0].tasks.len(), 2);
    }

    #[test]
    fn steal_examples() {
        let mut b = vec![WorkerBacklog::new(WorkerId(0)), WorkerBacklog::new(WorkerId(1)), WorkerBacklog::new(WorkerId(2))];
        assert_eq!(steal(&mut b, &[0, 1], 2), None);
        b[1].tasks.extend([TaskId(10), TaskId(11)]);
        assert_eq!(steal(&mut b, &[0, 1], 2), Some((TaskId(11), WorkerId(1))));
        assert_eq!(b[1].tasks, VecDeque::from([TaskId(10)]));
        // Only the first `neighbors` entries are polled.
        assert_eq!(steal(&mut b, &[0, 1], 1), None);
    }

    #[test]
    fn steal_order_is_seeded() {
        let a = steal_order(0, 8, &mut RngStream::new(3, RngStream::PLACEMENT));
        let b = steal_order(0, 8, &mut RngStream::new(3, RngStream::PLACEMENT));
        assert_eq!(a, b);
        assert!(!a.contains(&0));
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn rank_examples() {
        let holds = |w: u32, d: DataId| match w {
            1 => d == DataId(2),
            2 => d == DataId(1),
            _ => false,
        };
        assert_eq!(rank_workers(&[(DataId(1), 100)], &[1u32, 2], |w, d| w == 1 && d == DataId(1)), vec![1, 2]);
        assert_eq!(rank_workers(&[(DataId(1), 100)], &[3u32, 1, 2], |_, _| false), vec![1, 2, 3]);
        assert_eq!(rank_workers(&[(DataId(1), 100), (DataId(2), 1)], &[1u32, 2], holds), vec![2, 1]);
    }

    fn chain_graph(branch: bool) -> TaskGraph {
        let mut g = TaskGraph::new();
        for d in 0..4 {
            g.add_data(DataRef::new(d, 1, DataKind::Intermediate)).unwrap();
        }
        g.add_task(TaskSpec::new(0, 10.0).outputs([0]).group(7)).unwrap();
        g.add_task(TaskSpec::new(1, 10.0).inputs([0]).outputs([1]).group(7)).unwrap();
        if branch {
            g.add_task(TaskSpec::new(2, 10.0).inputs([0]).outputs([2]).group(7)).unwrap();
        } else {
            g.add_task(TaskSpec::new(2, 10.0).inputs([1]).outputs([2]).group(7)).unwrap();
        }
        g
    }

    #[test]
    fn group_chain_validation() {
        assert_eq!(dispatch_group(&chain_graph(false), 7), Ok(vec![TaskId(0), TaskId(1), TaskId(2)]));
        assert_eq!(dispatch_group(&chain_graph(true), 7), Err(DispatchError::GroupNotChain(7)));
        assert_eq!(dispatch_group(&chain_graph(false), 8), Err(DispatchError::GroupNotChain(8)));
    }

    #[test]
    fn chop_trigger_rule() {
        assert!(!should_chop(8, 10, 0.9, false));
        assert!(should_chop(9, 10, 0.9, false));
        assert!(!should_chop(9, 10, 0.9, true));
        for done in 0..=10 {
            assert!(!should_chop(done, 10, 1.0, false));
        }
        assert_eq!(chop_threshold(4, 0.9), 3);
    }
}
