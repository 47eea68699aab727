//! Dynamic task graph: tasks, data items, dependency edges, iteration
//! templates that unfold at runtime, and cascade pruning.
//!
//! The instantiated graph is always a DAG. Cycles only exist conceptually,
//! inside an [`IterationTemplate`] whose body is re-instantiated with fresh
//! ids each time its completion predicate asks for another round.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{DataId, TaskId, TemplateId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("duplicate task id {0}")]
    DuplicateTask(TaskId),
    #[error("duplicate data id {0}")]
    DuplicateData(DataId),
    #[error("unknown data ref {0}")]
    UnknownDataRef(DataId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("adding task {0} would create a cycle")]
    CycleDetected(TaskId),
    #[error("data {0} already has producer {1}")]
    MultipleProducers(DataId, TaskId),
    #[error("input data {0} cannot have a producer")]
    ProducerForInput(DataId),
    #[error("task {0} is already done")]
    AlreadyDone(TaskId),
    #[error("task {0} cannot be pruned in state {1}")]
    NotPrunable(TaskId, TaskState),
    #[error("invalid transition for task {0}: {1} -> {2}")]
    InvalidTransition(TaskId, TaskState, TaskState),
    #[error("unknown template {0}")]
    UnknownTemplate(TemplateId),
    #[error("template {0} is closed")]
    TemplateClosed(TemplateId),
    #[error("invalid task {0}: {1}")]
    InvalidTask(TaskId, String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("intermediate data {0} has no producer")]
    OrphanIntermediate(DataId),
}

/// The four data categories the middleware manages differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    CommonInput,
    UniqueInput,
    Intermediate,
    Output,
}

impl DataKind {
    pub fn is_input(self) -> bool {
        matches!(self, DataKind::CommonInput | DataKind::UniqueInput)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::CommonInput => "common-input",
            DataKind::UniqueInput => "unique-input",
            DataKind::Intermediate => "intermediate",
            DataKind::Output => "output",
        }
    }
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "common-input" => Ok(DataKind::CommonInput),
            "unique-input" => Ok(DataKind::UniqueInput),
            "intermediate" => Ok(DataKind::Intermediate),
            "output" => Ok(DataKind::Output),
            other => Err(format!("unknown data kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRef {
    pub id: DataId,
    pub size: u64,
    pub kind: DataKind,
}

impl DataRef {
    pub fn new(id: u64, size: u64, kind: DataKind) -> Self {
        Self { id: DataId(id), size, kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskState {
    Pending,
    Ready,
    Dispatched,
    Running,
    Done,
    Pruned,
    Failed,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Pruned | TaskState::Failed)
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskState::Pending => "pending",
            TaskState::Ready => "ready",
            TaskState::Dispatched => "dispatched",
            TaskState::Running => "running",
            TaskState::Done => "done",
            TaskState::Pruned => "pruned",
            TaskState::Failed => "failed",
        };
        f.write_str(s)
    }
}

/// Static description of one task. Runtime is the true duration; the
/// scheduler only sees `estimate` unless the policy declares runtimes known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub inputs: BTreeSet<DataId>,
    pub outputs: BTreeSet<DataId>,
    pub runtime: f64,
    pub estimate: Option<f64>,
    pub priority: f64,
    pub group: Option<u64>,
    pub width: u32,
    /// Gather whose inputs may be combined pairwise along a reduction tree.
    #[serde(default)]
    pub combinable: bool,
}

impl TaskSpec {
    pub fn new(id: u64, runtime: f64) -> Self {
        Self {
            id: TaskId(id),
            inputs: BTreeSet::new(),
            outputs: BTreeSet::new(),
            runtime,
            estimate: None,
            priority: 0.0,
            group: None,
            width: 1,
            combinable: false,
        }
    }

    pub fn inputs<I: IntoIterator<Item = u64>>(mut self, ids: I) -> Self {
        self.inputs.extend(ids.into_iter().map(DataId));
        self
    }

    pub fn outputs<I: IntoIterator<Item = u64>>(mut self, ids: I) -> Self {
        self.outputs.extend(ids.into_iter().map(DataId));
        self
    }

    pub fn estimate(mut self, secs: f64) -> Self {
        self.estimate = Some(secs);
        self
    }

    pub fn priority(mut self, p: f64) -> Self {
        self.priority = p;
        self
    }

    pub fn group(mut self, g: u64) -> Self {
        self.group = Some(g);
        self
    }

    pub fn width(mut self, w: u32) -> Self {
        self.width = w;
        self
    }

    pub fn combinable(mut self) -> Self {
        self.combinable = true;
        self
    }
}

/// Queue ordering rule applied to ready tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueueOrder {
    #[default]
    Fifo,
    Priority,
    LongestFirst,
    ShortestFirst,
}

/// Sort key for a queued task; smaller keys dispatch first.
#[derive(Clone, Copy, Debug)]
pub struct OrderKey {
    class: u8,
    primary: f64,
    tie: u64,
}

impl OrderKey {
    /// Builds the key for `spec` under `order`. Unestimated tasks fall back
    /// to FIFO behind every estimated task for the runtime-based orders.
    pub fn new(spec: &TaskSpec, ready_seq: u64, order: QueueOrder, runtimes_known: bool) -> Self {
        let estimate = if runtimes_known { Some(spec.runtime) } else { spec.estimate };
        match order {
            QueueOrder::Fifo => OrderKey { class: 0, primary: 0.0, tie: ready_seq },
            QueueOrder::Priority => OrderKey { class: 0, primary: -spec.priority, tie: spec.id.0 },
            QueueOrder::LongestFirst => match estimate {
                Some(e) => OrderKey { class: 0, primary: -e, tie: spec.id.0 },
                None => OrderKey { class: 1, primary: 0.0, tie: ready_seq },
            },
            QueueOrder::ShortestFirst => match estimate {
                Some(e) => OrderKey { class: 0, primary: e, tie: spec.id.0 },
                None => OrderKey { class: 1, primary: 0.0, tie: ready_seq },
            },
        }
    }
}

impl PartialEq for OrderKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for OrderKey {}

impl PartialOrd for OrderKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.class
            .cmp(&other.class)
            .then(self.primary.total_cmp(&other.primary))
            .then(self.tie.cmp(&other.tie))
    }
}

/// How a template body task obtains one of its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateInput {
    /// An existing data item, the same for every iteration.
    External(DataId),
    /// Output of an earlier body task in the same iteration.
    Local(usize),
    /// Output of a body task in the previous iteration; absent in the first.
    Previous(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateTask {
    pub runtime: f64,
    pub estimate: Option<f64>,
    pub inputs: Vec<TemplateInput>,
    pub output_size: u64,
    pub output_kind: DataKind,
}

/// Rule deciding whether the gather task of an iteration reports convergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convergence {
    Never,
    AtIteration(u32),
    Probability(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IterationResult {
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTemplate {
    pub body: Vec<TemplateTask>,
    /// Index of the body task whose completion evaluates the predicate.
    pub gather: usize,
    pub max_iterations: u32,
    pub convergence: Convergence,
    iterations: u32,
    closed: bool,
    last_outputs: Vec<DataId>,
}

impl IterationTemplate {
    pub fn new(body: Vec<TemplateTask>, gather: usize, max_iterations: u32, convergence: Convergence) -> Self {
        Self {
            body,
            gather,
            max_iterations,
            convergence,
            iterations: 0,
            closed: false,
            last_outputs: Vec::new(),
        }
    }

    pub fn iterations(&self) -> u32 {
        self.iterations
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn validate(&self) -> Result<(), GraphError> {
        if self.body.is_empty() {
            return Err(GraphError::InvalidTemplate("empty body".into()));
        }
        if self.gather >= self.body.len() {
            return Err(GraphError::InvalidTemplate("gather index out of range".into()));
        }
        if self.max_iterations == 0 {
            return Err(GraphError::InvalidTemplate("max iterations must be >= 1".into()));
        }
        for (k, t) in self.body.iter().enumerate() {
            for input in &t.inputs {
                match input {
                    TemplateInput::Local(j) if *j >= k => {
                        return Err(GraphError::InvalidTemplate(format!(
                            "body task {k} references later local output {j}"
                        )))
                    }
                    TemplateInput::Previous(j) if *j >= self.body.len() => {
                        return Err(GraphError::InvalidTemplate(format!("previous output {j} out of range")))
                    }
                    _ => {}
                }
            }
            if t.output_kind.is_input() {
                return Err(GraphError::InvalidTemplate("body outputs cannot be input kinds".into()));
            }
        }
        Ok(())
    }
}

/// Where an instantiated task came from, if it belongs to a template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateOrigin {
    pub template: TemplateId,
    pub iteration: u32,
    pub body_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TaskNode {
    spec: TaskSpec,
    state: TaskState,
    ready_seq: Option<u64>,
    origin: Option<TemplateOrigin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DataNode {
    data: DataRef,
    producer: Option<TaskId>,
    consumers: BTreeSet<TaskId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    tasks: BTreeMap<TaskId, TaskNode>,
    data: BTreeMap<DataId, DataNode>,
    templates: BTreeMap<TemplateId, IterationTemplate>,
    next_task: u64,
    next_data: u64,
    ready_counter: u64,
    /// Probability that a completing speculative task prunes a sibling branch.
    pub prune_probability: Option<f64>,
    #[serde(skip)]
    newly_ready: Vec<TaskId>,
}

impl TaskGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn data_count(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.tasks.keys().copied()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> + '_ {
        self.tasks.values().map(|n| &n.spec)
    }

    pub fn data_items(&self) -> impl Iterator<Item = &DataRef> + '_ {
        self.data.values().map(|n| &n.data)
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskSpec> {
        self.tasks.get(&id).map(|n| &n.spec)
    }

    pub fn data(&self, id: DataId) -> Option<&DataRef> {
        self.data.get(&id).map(|n| &n.data)
    }

    pub fn state(&self, id: TaskId) -> Option<TaskState> {
        self.tasks.get(&id).map(|n| n.state)
    }

    pub fn ready_seq(&self, id: TaskId) -> Option<u64> {
        self.tasks.get(&id).and_then(|n| n.ready_seq)
    }

    pub fn origin(&self, id: TaskId) -> Option<TemplateOrigin> {
        self.tasks.get(&id).and_then(|n| n.origin)
    }

    pub fn producer(&self, id: DataId) -> Option<TaskId> {
        self.data.get(&id).and_then(|n| n.producer)
    }

    pub fn consumers(&self, id: DataId) -> impl Iterator<Item = TaskId> + '_ {
        self.data.get(&id).into_iter().flat_map(|n| n.consumers.iter().copied())
    }

    pub fn template(&self, id: TemplateId) -> Option<&IterationTemplate> {
        self.templates.get(&id)
    }

    pub fn templates(&self) -> impl Iterator<Item = (TemplateId, &IterationTemplate)> + '_ {
        self.templates.iter().map(|(k, v)| (*k, v))
    }

    pub fn count_in_state(&self, state: TaskState) -> usize {
        self.tasks.values().filter(|n| n.state == state).count()
    }

    /// Tasks consuming any output of `id`.
    pub fn children(&self, id: TaskId) -> BTreeSet<TaskId> {
        let mut out = BTreeSet::new();
        if let Some(node) = self.tasks.get(&id) {
            for d in &node.spec.outputs {
                out.extend(self.consumers(*d));
            }
        }
        out
    }

    /// Producers of the inputs of `id`.
    pub fn parents(&self, id: TaskId) -> BTreeSet<TaskId> {
        let mut out = BTreeSet::new();
        if let Some(node) = self.tasks.get(&id) {
            for d in &node.spec.inputs {
                if let Some(p) = self.producer(*d) {
                    out.insert(p);
                }
            }
        }
        out
    }

    /// Other tasks sharing a parent with `id`.
    pub fn siblings(&self, id: TaskId) -> BTreeSet<TaskId> {
        let mut out = BTreeSet::new();
        for p in self.parents(id) {
            out.extend(self.children(p));
        }
        out.remove(&id);
        out
    }

    pub fn group_members(&self, group: u64) -> Vec<TaskId> {
        self.tasks
            .values()
            .filter(|n| n.spec.group == Some(group))
            .map(|n| n.spec.id)
            .collect()
    }

    pub fn add_data(&mut self, data: DataRef) -> Result<(), GraphError> {
        if self.data.contains_key(&data.id) {
            return Err(GraphError::DuplicateData(data.id));
        }
        self.next_data = self.next_data.max(data.id.0 + 1);
        self.data.insert(data.id, DataNode { data, producer: None, consumers: BTreeSet::new() });
        Ok(())
    }

    pub fn fresh_task_id(&self) -> TaskId {
        TaskId(self.next_task)
    }

    pub fn fresh_data_id(&self) -> DataId {
        DataId(self.next_data)
    }

    /// Whether input `d` no longer blocks a consumer: raw inputs are always
    /// staged-able, produced items need a done producer, and items of pruned
    /// producers are dropped from the consumer's requirements.
    pub fn input_satisfied(&self, d: DataId) -> bool {
        let Some(node) = self.data.get(&d) else { return false };
        match node.producer {
            None => node.data.kind.is_input(),
            Some(p) => matches!(self.state(p), Some(TaskState::Done | TaskState::Pruned)),
        }
    }

    /// Inputs a task must actually stage: those not dropped by pruning.
    pub fn live_inputs(&self, id: TaskId) -> Vec<DataId> {
        let Some(node) = self.tasks.get(&id) else { return Vec::new() };
        node.spec
            .inputs
            .iter()
            .copied()
            .filter(|d| !matches!(self.producer(*d).and_then(|p| self.state(p)), Some(TaskState::Pruned)))
            .collect()
    }

    fn all_inputs_satisfied(&self, spec: &TaskSpec) -> bool {
        spec.inputs.iter().all(|d| self.input_satisfied(*d))
    }

    pub fn add_task(&mut self, spec: TaskSpec) -> Result<TaskId, GraphError> {
        self.insert_task(spec, None)
    }

    fn insert_task(&mut self, spec: TaskSpec, origin: Option<TemplateOrigin>) -> Result<TaskId, GraphError> {
        let id = spec.id;
        if self.tasks.contains_key(&id) {
            return Err(GraphError::DuplicateTask(id));
        }
        if !(spec.runtime > 0.0) || !spec.runtime.is_finite() {
            return Err(GraphError::InvalidTask(id, "runtime must be > 0".into()));
        }
        if spec.width == 0 {
            return Err(GraphError::InvalidTask(id, "width must be >= 1".into()));
        }
        if let Some(e) = spec.estimate {
            if !(e >= 0.0) {
                return Err(GraphError::InvalidTask(id, "estimate must be >= 0".into()));
            }
        }
        for d in spec.inputs.iter().chain(spec.outputs.iter()) {
            if !self.data.contains_key(d) {
                return Err(GraphError::UnknownDataRef(*d));
            }
        }
        for d in &spec.outputs {
            let node = &self.data[d];
            if node.data.kind.is_input() {
                return Err(GraphError::ProducerForInput(*d));
            }
            if let Some(p) = node.producer {
                return Err(GraphError::MultipleProducers(*d, p));
            }
            if spec.inputs.contains(d) {
                return Err(GraphError::CycleDetected(id));
            }
        }
        if self.would_cycle(&spec) {
            return Err(GraphError::CycleDetected(id));
        }

        for d in &spec.outputs {
            self.data.get_mut(d).expect("checked").producer = Some(id);
        }
        for d in &spec.inputs {
            self.data.get_mut(d).expect("checked").consumers.insert(id);
        }
        let ready = self.all_inputs_satisfied(&spec);
        self.next_task = self.next_task.max(id.0 + 1);
        self.tasks.insert(id, TaskNode { spec, state: TaskState::Pending, ready_seq: None, origin });
        if ready {
            self.make_ready(id);
        }
        Ok(id)
    }

    /// A new task closes a cycle iff some consumer of its outputs is an
    /// ancestor of one of its inputs' producers.
    fn would_cycle(&self, spec: &TaskSpec) -> bool {
        let targets: BTreeSet<TaskId> = spec.outputs.iter().flat_map(|d| self.consumers(*d)).collect();
        if targets.is_empty() {
            return false;
        }
        let mut seen = BTreeSet::new();
        let mut stack: Vec<TaskId> = spec.inputs.iter().filter_map(|d| self.producer(*d)).collect();
        while let Some(t) = stack.pop() {
            if targets.contains(&t) {
                return true;
            }
            if seen.insert(t) {
                stack.extend(self.parents(t));
            }
        }
        false
    }

    fn make_ready(&mut self, id: TaskId) {
        let seq = self.ready_counter;
        self.ready_counter += 1;
        let node = self.tasks.get_mut(&id).expect("task exists");
        node.state = TaskState::Ready;
        node.ready_seq = Some(seq);
        self.newly_ready.push(id);
    }

    /// Tasks that became ready since the last call, in readiness order.
    pub fn drain_newly_ready(&mut self) -> Vec<TaskId> {
        std::mem::take(&mut self.newly_ready)
    }

    /// Ready tasks ordered by `order`.
    pub fn ready_tasks(&self, order: QueueOrder) -> Vec<TaskId> {
        let mut ready: Vec<(OrderKey, TaskId)> = self
            .tasks
            .values()
            .filter(|n| n.state == TaskState::Ready)
            .map(|n| (OrderKey::new(&n.spec, n.ready_seq.unwrap_or(0), order, false), n.spec.id))
            .collect();
        ready.sort();
        ready.into_iter().map(|(_, id)| id).collect()
    }

    pub fn set_priority(&mut self, id: TaskId, priority: f64) -> Result<(), GraphError> {
        let node = self.tasks.get_mut(&id).ok_or(GraphError::UnknownTask(id))?;
        node.spec.priority = priority;
        Ok(())
    }

    fn current(&self, id: TaskId) -> Result<TaskState, GraphError> {
        self.state(id).ok_or(GraphError::UnknownTask(id))
    }

    fn set(&mut self, id: TaskId, to: TaskState) {
        self.tasks.get_mut(&id).expect("task exists").state = to;
    }

    fn expect_state(&self, id: TaskId, allowed: &[TaskState], to: TaskState) -> Result<(), GraphError> {
        let cur = self.current(id)?;
        if allowed.contains(&cur) {
            Ok(())
        } else {
            Err(GraphError::InvalidTransition(id, cur, to))
        }
    }

    pub fn mark_dispatched(&mut self, id: TaskId) -> Result<(), GraphError> {
        self.expect_state(id, &[TaskState::Ready], TaskState::Dispatched)?;
        self.set(id, TaskState::Dispatched);
        Ok(())
    }

    pub fn mark_running(&mut self, id: TaskId) -> Result<(), GraphError> {
        self.expect_state(id, &[TaskState::Dispatched, TaskState::Ready], TaskState::Running)?;
        self.set(id, TaskState::Running);
        Ok(())
    }

    /// Completes a task and promotes consumers whose inputs are now all met.
    pub fn mark_done(&mut self, id: TaskId) -> Result<(), GraphError> {
        self.expect_state(id, &[TaskState::Running], TaskState::Done)?;
        self.set(id, TaskState::Done);
        self.refresh_children(id);
        Ok(())
    }

    pub fn mark_failed(&mut self, id: TaskId) -> Result<(), GraphError> {
        self.expect_state(id, &[TaskState::Running, TaskState::Dispatched], TaskState::Failed)?;
        self.set(id, TaskState::Failed);
        Ok(())
    }

    /// Returns a failed, dispatched or running task to the ready pool (or to
    /// pending when its inputs are no longer available).
    pub fn requeue(&mut self, id: TaskId) -> Result<(), GraphError> {
        self.expect_state(
            id,
            &[TaskState::Failed, TaskState::Dispatched, TaskState::Running, TaskState::Ready],
            TaskState::Ready,
        )?;
        let spec = &self.tasks[&id].spec;
        if self.all_inputs_satisfied(spec) {
            self.make_ready(id);
        } else {
            self.set(id, TaskState::Pending);
        }
        Ok(())
    }

    /// Reopens a done task whose outputs were lost. Ready consumers that
    /// depended on it drop back to pending; they are returned.
    pub fn reopen(&mut self, id: TaskId) -> Result<Vec<TaskId>, GraphError> {
        self.expect_state(id, &[TaskState::Done], TaskState::Ready)?;
        self.set(id, TaskState::Pending);
        self.requeue_pending(id);
        let mut demoted = Vec::new();
        for c in self.children(id) {
            if self.state(c) == Some(TaskState::Ready) {
                self.set(c, TaskState::Pending);
                demoted.push(c);
            }
        }
        self.newly_ready.retain(|t| !demoted.contains(t));
        Ok(demoted)
    }

    fn requeue_pending(&mut self, id: TaskId) {
        let spec = &self.tasks[&id].spec;
        if self.all_inputs_satisfied(spec) {
            self.make_ready(id);
        }
    }

    /// Demotes a ready or dispatched task to pending because one of its
    /// inputs disappeared.
    pub fn demote(&mut self, id: TaskId) -> Result<(), GraphError> {
        self.expect_state(id, &[TaskState::Ready, TaskState::Dispatched, TaskState::Pending], TaskState::Pending)?;
        self.set(id, TaskState::Pending);
        self.newly_ready.retain(|t| *t != id);
        Ok(())
    }

    /// Marks a task permanently failed without passing through running.
    pub fn fail_permanently(&mut self, id: TaskId) -> Result<(), GraphError> {
        let cur = self.current(id)?;
        if cur.is_terminal() && cur != TaskState::Failed {
            return Err(GraphError::InvalidTransition(id, cur, TaskState::Failed));
        }
        self.set(id, TaskState::Failed);
        Ok(())
    }

    fn refresh_children(&mut self, id: TaskId) {
        for c in self.children(id) {
            if self.state(c) == Some(TaskState::Pending) {
                let spec = &self.tasks[&c].spec;
                if self.all_inputs_satisfied(spec) {
                    self.make_ready(c);
                }
            }
        }
    }

    /// Prunes `root` and every not-yet-done descendant whose producers all
    /// lie in the pruned region. Consumers reachable through another live
    /// path survive and simply drop the pruned inputs.
    pub fn prune_tasks(&mut self, root: TaskId) -> Result<BTreeSet<TaskId>, GraphError> {
        let state = self.current(root)?;
        match state {
            TaskState::Done => return Err(GraphError::AlreadyDone(root)),
            TaskState::Pruned => return Ok(BTreeSet::new()),
            TaskState::Failed => return Err(GraphError::NotPrunable(root, state)),
            _ => {}
        }
        let mut pruned = BTreeSet::new();
        pruned.insert(root);
        self.set(root, TaskState::Pruned);

        // Kahn's order restricted to descendants of root.
        let mut desc = BTreeSet::new();
        let mut queue: VecDeque<TaskId> = self.children(root).into_iter().collect();
        while let Some(t) = queue.pop_front() {
            if desc.insert(t) {
                queue.extend(self.children(t));
            }
        }
        let mut indeg: BTreeMap<TaskId, usize> = desc
            .iter()
            .map(|t| (*t, self.parents(*t).iter().filter(|p| desc.contains(p)).count()))
            .collect();
        let mut frontier: BTreeSet<TaskId> = indeg.iter().filter(|(_, n)| **n == 0).map(|(t, _)| *t).collect();
        while let Some(t) = frontier.pop_first() {
            let st = self.tasks[&t].state;
            let exclusive = self
                .parents(t)
                .iter()
                .all(|p| pruned.contains(p) || self.state(*p) == Some(TaskState::Pruned));
            if exclusive && !matches!(st, TaskState::Done | TaskState::Failed | TaskState::Pruned) {
                self.set(t, TaskState::Pruned);
                pruned.insert(t);
            }
            for c in self.children(t) {
                if let Some(n) = indeg.get_mut(&c) {
                    *n -= 1;
                    if *n == 0 {
                        frontier.insert(c);
                    }
                }
            }
        }
        self.newly_ready.retain(|t| !pruned.contains(t));
        // Survivors whose only blockers were pruned may now proceed.
        let survivors: BTreeSet<TaskId> = pruned.iter().flat_map(|t| self.children(*t)).collect();
        for c in survivors {
            if self.state(c) == Some(TaskState::Pending) {
                let spec = &self.tasks[&c].spec;
                if self.all_inputs_satisfied(spec) {
                    self.make_ready(c);
                }
            }
        }
        Ok(pruned)
    }

    /// Kahn topological order; fails only if the graph is cyclic.
    pub fn topo_order(&self) -> Result<Vec<TaskId>, GraphError> {
        let mut indeg: BTreeMap<TaskId, usize> =
            self.tasks.keys().map(|t| (*t, self.parents(*t).len())).collect();
        let mut frontier: BTreeSet<TaskId> = indeg.iter().filter(|(_, n)| **n == 0).map(|(t, _)| *t).collect();
        let mut order = Vec::with_capacity(self.tasks.len());
        while let Some(t) = frontier.pop_first() {
            order.push(t);
            for c in self.children(t) {
                let n = indeg.get_mut(&c).expect("child exists");
                *n -= 1;
                if *n == 0 {
                    frontier.insert(c);
                }
            }
        }
        if order.len() == self.tasks.len() {
            Ok(order)
        } else {
            let stuck = indeg.iter().find(|(_, n)| **n > 0).map(|(t, _)| *t).unwrap_or_default();
            Err(GraphError::CycleDetected(stuck))
        }
    }

    /// Structural checks run before a simulation starts.
    pub fn validate(&self) -> Result<(), GraphError> {
        for node in self.data.values() {
            if node.data.kind == DataKind::Intermediate && node.producer.is_none() {
                return Err(GraphError::OrphanIntermediate(node.data.id));
            }
        }
        self.topo_order().map(|_| ())
    }

    /// Registers an iteration template and instantiates its first iteration.
    pub fn add_template(&mut self, template: IterationTemplate) -> Result<(TemplateId, Vec<TaskId>), GraphError> {
        template.validate()?;
        for t in &template.body {
            for input in &t.inputs {
                if let TemplateInput::External(d) = input {
                    if !self.data.contains_key(d) {
                        return Err(GraphError::UnknownDataRef(*d));
                    }
                }
            }
        }
        let id = TemplateId(self.templates.keys().next_back().map_or(0, |t| t.0 + 1));
        self.templates.insert(id, template);
        let tasks = self.instantiate(id)?;
        Ok((id, tasks))
    }

    /// Evaluates the template predicate against `result`; instantiates one
    /// more iteration or closes the template.
    pub fn unfold_iteration(&mut self, id: TemplateId, result: IterationResult) -> Result<Vec<TaskId>, GraphError> {
        let template = self.templates.get_mut(&id).ok_or(GraphError::UnknownTemplate(id))?;
        if template.closed {
            return Err(GraphError::TemplateClosed(id));
        }
        if result.converged || template.iterations >= template.max_iterations {
            template.closed = true;
            return Ok(Vec::new());
        }
        self.instantiate(id)
    }

    fn instantiate(&mut self, id: TemplateId) -> Result<Vec<TaskId>, GraphError> {
        let template = self.templates[&id].clone();
        let iteration = template.iterations + 1;
        let mut outputs: Vec<DataId> = Vec::with_capacity(template.body.len());
        let mut created = Vec::with_capacity(template.body.len());
        for (k, body) in template.body.iter().enumerate() {
            let out = self.fresh_data_id();
            self.add_data(DataRef { id: out, size: body.output_size, kind: body.output_kind })?;
            let mut spec = TaskSpec::new(self.fresh_task_id().0, body.runtime);
            spec.estimate = body.estimate;
            spec.outputs.insert(out);
            for input in &body.inputs {
                match input {
                    TemplateInput::External(d) => {
                        spec.inputs.insert(*d);
                    }
                    TemplateInput::Local(j) => {
                        spec.inputs.insert(outputs[*j]);
                    }
                    TemplateInput::Previous(j) => {
                        if let Some(d) = template.last_outputs.get(*j) {
                            spec.inputs.insert(*d);
                        }
                    }
                }
            }
            let origin = TemplateOrigin { template: id, iteration, body_index: k };
            created.push(self.insert_task(spec, Some(origin))?);
            outputs.push(out);
        }
        let t = self.templates.get_mut(&id).expect("template exists");
        t.iterations = iteration;
        t.last_outputs = outputs;
        Ok(created)
    }

    /// Number of templates that may still unfold.
    pub fn open_templates(&self) -> usize {
        self.templates.values().filter(|t| !t.closed).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(g: &mut TaskGraph, id: u64, kind: DataKind) {
        g.add_data(DataRef::new(id, 10, kind)).unwrap();
    }

    #[test]
    fn task_without_inputs_is_ready() {
        let mut g = TaskGraph::new();
        g.add_task(TaskSpec::new(1, 5.0)).unwrap();
        assert_eq!(g.state(TaskId(1)), Some(TaskState::Ready));
    }

    #[test]
    fn task_with_unfinished_producer_is_pending() {
        let mut g = TaskGraph::new();
        data(&mut g, 1, DataKind::Intermediate);
        g.add_task(TaskSpec::new(1, 5.0).outputs([1])).unwrap();
        g.add_task(TaskSpec::new(2, 5.0).inputs([1])).unwrap();
        assert_eq!(g.state(TaskId(2)), Some(TaskState::Pending));
    }

    #[test]
    fn smallest_cycle_is_rejected() {
        let mut g = TaskGraph::new();
        data(&mut g, 1, DataKind::Intermediate);
        data(&mut g, 2, DataKind::Intermediate);
        g.add_task(TaskSpec::new(1, 5.0).inputs([2]).outputs([1])).unwrap();
        let err = g.add_task(TaskSpec::new(2, 5.0).inputs([1]).outputs([2])).unwrap_err();
        assert_eq!(err, GraphError::CycleDetected(TaskId(2)));
        assert!(g.topo_order().is_ok());
    }

    #[test]
    fn add_task_errors() {
        let mut g = TaskGraph::new();
        g.add_task(TaskSpec::new(1, 5.0)).unwrap();
        assert_eq!(g.add_task(TaskSpec::new(1, 5.0)), Err(GraphError::DuplicateTask(TaskId(1))));
        assert_eq!(g.add_task(TaskSpec::new(2, 5.0).inputs([9])), Err(GraphError::UnknownDataRef(DataId(9))));
        data(&mut g, 3, DataKind::CommonInput);
        assert_eq!(g.add_task(TaskSpec::new(2, 5.0).outputs([3])), Err(GraphError::ProducerForInput(DataId(3))));
        assert!(matches!(g.add_task(TaskSpec::new(2, 0.0)), Err(GraphError::InvalidTask(..))));
    }

    #[test]
    fn ready_tasks_examples() {
        let g = TaskGraph::new();
        assert!(g.ready_tasks(QueueOrder::Fifo).is_empty());

        let mut g = TaskGraph::new();
        for i in 0..100 {
            g.add_task(TaskSpec::new(i, 1.0)).unwrap();
        }
        assert_eq!(g.ready_tasks(QueueOrder::Fifo).len(), 100);

        let mut g = TaskGraph::new();
        data(&mut g, 1, DataKind::Intermediate);
        g.add_task(TaskSpec::new(1, 1.0).outputs([1])).unwrap();
        g.add_task(TaskSpec::new(2, 1.0).inputs([1])).unwrap();
        g.mark_dispatched(TaskId(1)).unwrap();
        g.mark_running(TaskId(1)).unwrap();
        g.mark_done(TaskId(1)).unwrap();
        assert_eq!(g.ready_tasks(QueueOrder::Fifo), vec![TaskId(2)]);
    }

    #[test]
    fn orderings() {
        let mut g = TaskGraph::new();
        g.add_task(TaskSpec::new(1, 10.0).estimate(10.0).priority(1.0)).unwrap();
        g.add_task(TaskSpec::new(2, 400.0).estimate(400.0).priority(1.0)).unwrap();
        g.add_task(TaskSpec::new(3, 60.0).priority(5.0)).unwrap();
        g.add_task(TaskSpec::new(4, 60.0).estimate(60.0)).unwrap();
        let ids = |v: Vec<TaskId>| v.into_iter().map(|t| t.0).collect::<Vec<_>>();
        assert_eq!(ids(g.ready_tasks(QueueOrder::LongestFirst)), vec![2, 4, 1, 3]);
        assert_eq!(ids(g.ready_tasks(QueueOrder::ShortestFirst)), vec![1, 4, 2, 3]);
        assert_eq!(ids(g.ready_tasks(QueueOrder::Priority)), vec![3, 1, 2, 4]);
        assert_eq!(ids(g.ready_tasks(QueueOrder::Fifo)), vec![1, 2, 3, 4]);
        g.set_priority(TaskId(4), 9.0).unwrap();
        assert_eq!(ids(g.ready_tasks(QueueOrder::Priority))[0], 4);
    }

    fn body(n: usize, runtime: f64) -> Vec<TemplateTask> {
        // n-1 parallel workers feeding one gather.
        let mut body: Vec<TemplateTask> = (0..n - 1)
            .map(|_| TemplateTask {
                runtime,
                estimate: None,
                inputs: vec![TemplateInput::Previous(n - 1)],
                output_size: 1,
                output_kind: DataKind::Intermediate,
            })
            .collect();
        body.push(TemplateTask {
            runtime,
            estimate: None,
            inputs: (0..n - 1).map(TemplateInput::Local).collect(),
            output_size: 1,
            output_kind: DataKind::Intermediate,
        });
        body
    }

    #[test]
    fn counted_loop_closes_after_bound() {
        let mut g = TaskGraph::new();
        let (tid, first) = g.add_template(IterationTemplate::new(body(2, 1.0), 1, 3, Convergence::Never)).unwrap();
        assert_eq!(first.len(), 2);
        assert_eq!(g.unfold_iteration(tid, IterationResult { converged: false }).unwrap().len(), 2);
        // Two unfoldings exist; one more is allowed.
        assert_eq!(g.unfold_iteration(tid, IterationResult { converged: false }).unwrap().len(), 2);
        assert!(g.unfold_iteration(tid, IterationResult { converged: false }).unwrap().is_empty());
        assert!(g.template(tid).unwrap().is_closed());
        assert_eq!(
            g.unfold_iteration(tid, IterationResult { converged: false }),
            Err(GraphError::TemplateClosed(tid))
        );
        assert!(g.topo_order().is_ok());
    }

    #[test]
    fn degenerate_loop_adds_nothing() {
        let mut g = TaskGraph::new();
        let (tid, _) = g.add_template(IterationTemplate::new(body(2, 1.0), 1, 1, Convergence::Never)).unwrap();
        let before = g.task_count();
        assert!(g.unfold_iteration(tid, IterationResult { converged: false }).unwrap().is_empty());
        assert_eq!(g.task_count(), before);
        assert_eq!(
            g.unfold_iteration(TemplateId(7), IterationResult { converged: false }),
            Err(GraphError::UnknownTemplate(TemplateId(7)))
        );
    }

    #[test]
    fn convergence_at_iteration_four_yields_twenty_tasks() {
        let mut g = TaskGraph::new();
        let (tid, _) = g.add_template(IterationTemplate::new(body(5, 1.0), 4, 100, Convergence::AtIteration(4))).unwrap();
        loop {
            let it = g.template(tid).unwrap().iterations();
            let added = g.unfold_iteration(tid, IterationResult { converged: it >= 4 }).unwrap();
            if added.is_empty() {
                break;
            }
        }
        assert_eq!(g.task_count(), 20);
        // Each iteration's workers consume the previous gather's output.
        let second: Vec<_> = g.tasks().filter(|t| g.origin(t.id).unwrap().iteration == 2).collect();
        assert!(second[0].inputs.iter().any(|d| g.producer(*d).is_some()));
    }

    fn binary_tree(depth: u32) -> TaskGraph {
        let mut g = TaskGraph::new();
        let n = (1u64 << (depth + 1)) - 1;
        for i in 0..n {
            g.add_data(DataRef::new(i, 1, DataKind::Intermediate)).unwrap();
        }
        for i in 0..n {
            let mut spec = TaskSpec::new(i, 1.0).outputs([i]);
            if i > 0 {
                spec = spec.inputs([(i - 1) / 2]);
            }
            g.add_task(spec).unwrap();
        }
        g
    }

    #[test]
    fn prune_leaf() {
        let mut g = binary_tree(3);
        let pruned = g.prune_tasks(TaskId(14)).unwrap();
        assert_eq!(pruned, BTreeSet::from([TaskId(14)]));
    }

    #[test]
    fn prune_internal_subtree_of_seven() {
        let mut g = binary_tree(3);
        assert_eq!(g.prune_tasks(TaskId(1)).unwrap().len(), 7);
        assert_eq!(g.count_in_state(TaskState::Pruned), 7);
    }

    #[test]
    fn prune_respects_second_path() {
        let mut g = TaskGraph::new();
        for d in 0..4 {
            data(&mut g, d, DataKind::Intermediate);
        }
        g.add_task(TaskSpec::new(0, 1.0).outputs([0])).unwrap();
        g.add_task(TaskSpec::new(1, 1.0).outputs([1])).unwrap();
        // 2 consumes both roots; 3 depends only on 2.
        g.add_task(TaskSpec::new(2, 1.0).inputs([0, 1]).outputs([2])).unwrap();
        g.add_task(TaskSpec::new(3, 1.0).inputs([2]).outputs([3])).unwrap();
        let pruned = g.prune_tasks(TaskId(0)).unwrap();
        assert_eq!(pruned, BTreeSet::from([TaskId(0)]));
        assert_eq!(g.state(TaskId(2)), Some(TaskState::Pending));
        g.mark_running(TaskId(1)).unwrap();
        g.mark_done(TaskId(1)).unwrap();
        // The pruned input is dropped; only the live one was required.
        assert_eq!(g.state(TaskId(2)), Some(TaskState::Ready));
        assert_eq!(g.live_inputs(TaskId(2)), vec![DataId(1)]);
    }

    #[test]
    fn prune_done_is_error() {
        let mut g = TaskGraph::new();
        g.add_task(TaskSpec::new(1, 1.0)).unwrap();
        g.mark_running(TaskId(1)).unwrap();
        g.mark_done(TaskId(1)).unwrap();
        assert_eq!(g.prune_tasks(TaskId(1)), Err(GraphError::AlreadyDone(TaskId(1))));
        assert_eq!(g.prune_tasks(TaskId(5)), Err(GraphError::UnknownTask(TaskId(5))));
    }

    #[test]
    fn reopen_demotes_ready_consumers() {
        let mut g = TaskGraph::new();
        data(&mut g, 1, DataKind::Intermediate);
        g.add_task(TaskSpec::new(1, 1.0).outputs([1])).unwrap();
        g.add_task(TaskSpec::new(2, 1.0).inputs([1])).unwrap();
        g.mark_running(TaskId(1)).unwrap();
        g.mark_done(TaskId(1)).unwrap();
        assert_eq!(g.state(TaskId(2)), Some(TaskState::Ready));
        let demoted = g.reopen(TaskId(1)).unwrap();
        assert_eq!(demoted, vec![TaskId(2)]);
        assert_eq!(g.state(TaskId(1)), Some(TaskState::Ready));
        assert_eq!(g.state(TaskId(2)), Some(TaskState::Pending));
    }

    #[test]
    fn orphan_intermediate_fails_validation() {
        let mut g = TaskGraph::new();
        data(&mut g, 1, DataKind::Intermediate);
        assert_eq!(g.validate(), Err(GraphError::OrphanIntermediate(DataId(1))));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // Random insertions (some rejected as cycles) never break acyclicity.
        #[test]
        fn acyclic_after_any_additions(edges in prop::collection::vec((0u64..12, 0u64..12), 1..40)) {
            let mut g = TaskGraph::new();
            for d in 0..12 {
                g.add_data(DataRef::new(d, 1, DataKind::Intermediate)).unwrap();
            }
            for (i, (input, output)) in edges.into_iter().enumerate() {
                let _ = g.add_task(TaskSpec::new(i as u64, 1.0).inputs([input]).outputs([output]));
            }
            prop_assert!(g.topo_order().is_ok());
        }
    }
}
