//! Failures, pruning, chop, migration, checkpoints and recovery.

use super::*;
use crate::provision::round_to_granularity;
use crate::resilience::{on_failure, CheckpointBody, FailureAction, FailureKind, Scope};

impl Engine {
    // ---- attempts -------------------------------------------------------

    /// Tears down an attempt and frees its workers. `fail` is the cause and
    /// finality recorded when the task was computing. Returns the phase the
    /// attempt was in.
    pub(super) fn abort_attempt(&mut self, a: u64, fail: Option<(&str, bool, Option<&str>)>) -> Res<Phase> {
        let at = self.attempts.remove(&a).ok_or_else(|| EngineError::Internal(format!("no attempt {a}")))?;
        let t = at.task;
        self.task_attempt.remove(&t);
        self.teardown(a, &at);
        if at.phase == Phase::Writing {
            self.purge_outputs(t);
        }
        let mut f = vec![kv("task", t), kv("worker", at.workers[0]), kv("node", at.node)];
        match (at.phase, fail) {
            (Phase::Running | Phase::Writing, Some((cause, fin, reason))) => {
                f.push(kv("cause", cause));
                f.push(kv("final", fin));
                if let Some(r) = reason {
                    f.push(kv("reason", r));
                }
                self.emit(EventKind::TaskFail, f);
            }
            (Phase::Signalling, _) => {
                self.emit(EventKind::PruneSignal, f);
                self.pending_signals -= 1;
            }
            _ => {}
        }
        for w in &at.workers {
            self.free_worker(*w);
        }
        Ok(at.phase)
    }

    /// Cancels an attempt's events, writes, reduction and waits, and unpins
    /// what it held.
    fn teardown(&mut self, a: u64, at: &Attempt) {
        for ev in &at.events {
            self.kernel.cancel(*ev);
        }
        for x in &at.writes {
            self.cancel_xfer(*x);
        }
        if let Some(r) = at.reduction {
            self.abort_reduction(r);
        }
        for d in &at.waiting {
            if let Some(list) = self.waiters.get_mut(&(*d, at.node)) {
                list.retain(|x| *x != a);
                if list.is_empty() {
                    self.waiters.remove(&(*d, at.node));
                }
            }
        }
        self.unpin_all(at);
    }

    /// Removes every trace of a task's outputs so nothing half-made is visible.
    fn purge_outputs(&mut self, t: TaskId) {
        let outputs: Vec<DataId> = self.graph.task(t).map(|s| s.outputs.iter().copied().collect()).unwrap_or_default();
        for d in outputs {
            if self.graph.data(d).is_some_and(|r| r.size == 0) {
                continue;
            }
            for n in self.dir.holders(d) {
                if self.platform.node(n).allocated {
                    let cache = &mut self.platform.node_mut(n).cache;
                    while cache.is_pinned(d) {
                        cache.unpin(d);
                    }
                    cache.remove(d);
                }
                self.dir.deregister(d, n);
            }
            self.local_keep.remove(&d);
            self.flush_pending.retain(|(x, _, _)| *x != d);
        }
    }

    // ---- pruning --------------------------------------------------------

    pub(super) fn prune_internal(&mut self, root: TaskId) -> Res {
        let set = self.graph.prune_tasks(root)?;
        self.terminal += set.len();
        for p in set {
            self.handle_pruned(p)?;
        }
        Ok(())
    }

    fn handle_pruned(&mut self, p: TaskId) -> Res {
        self.dequeue(p);
        self.saved_progress.remove(&p);
        self.migrate_src.remove(&p);
        match self.task_attempt.get(&p).copied() {
            Some(a) => {
                let at = self.attempts.get(&a).expect("attempt").clone();
                self.teardown(a, &at);
                let latency = self.cfg.dispatch.dispatch_latency_sec;
                let ev = self.kernel.schedule_in(latency, Ev::PruneSignal { attempt: a })?;
                let at = self.attempts.get_mut(&a).expect("attempt");
                at.phase = Phase::Signalling;
                at.events = vec![ev];
                at.waiting.clear();
                at.pinned.clear();
                at.writes.clear();
                at.reduction = None;
                self.pending_signals += 1;
            }
            None => self.emit(EventKind::PruneSignal, vec![kv("task", p)]),
        }
        self.purge_outputs(p);
        Ok(())
    }

    pub(super) fn on_prune_signal(&mut self, a: u64) {
        let Some(at) = self.attempts.remove(&a) else { return };
        self.task_attempt.remove(&at.task);
        self.pending_signals -= 1;
        self.emit(EventKind::PruneSignal, vec![kv("task", at.task), kv("worker", at.workers[0]), kv("node", at.node)]);
        for w in &at.workers {
            self.free_worker(*w);
        }
    }

    /// Prunes `task` and everything only it feeds.
    pub fn prune(&mut self, task: TaskId) -> Res {
        self.prune_internal(task)?;
        self.pump()
    }

    // ---- failures -------------------------------------------------------

    /// Adds a failure to the run.
    pub fn inject(&mut self, spec: FailureSpec) -> Res {
        spec.validate()?;
        let p = &self.cfg.platform;
        let known = match spec.scope() {
            Scope::Node(n) => n.0 < p.node_count,
            Scope::Block(b) => b.0 < p.block_count(),
            Scope::Task(t) => self.graph.task(t).is_some(),
            Scope::Run => true,
        };
        if !known {
            return Err(EngineError::UnknownScope(format!("{:?}", spec.scope())));
        }
        if let Some(t) = spec.at_sec {
            if t < self.now() {
                return Err(KernelError::TimeTravel { time: t, clock: self.now() }.into());
            }
        }
        self.schedule_failure(spec)
    }

    pub(super) fn schedule_failure(&mut self, f: FailureSpec) -> Res {
        let index = self.failures.len();
        let at = f.at_sec;
        self.failures.push(f);
        match at {
            Some(t) => {
                self.kernel.schedule(t, Ev::Failure { index })?;
            }
            None => self.arm_rate(index)?,
        }
        Ok(())
    }

    fn scope_nodes(&self, f: &FailureSpec) -> Vec<NodeId> {
        let all = self.platform.nodes.iter().filter(|n| n.usable()).map(|n| n.id);
        match f.scope() {
            Scope::Node(n) => vec![n],
            Scope::Block(b) => self.platform.blocks.get(b.0 as usize).map(|blk| blk.nodes.clone()).unwrap_or_default(),
            Scope::Task(t) => self.task_attempt.get(&t).map(|a| self.attempts[a].nodes.clone()).unwrap_or_default(),
            Scope::Run => all.collect(),
        }
    }

    pub(super) fn arm_rate(&mut self, index: usize) -> Res {
        let f = self.failures[index].clone();
        let Some(rate) = f.rate_per_node_hour else { return Ok(()) };
        let n = self.scope_nodes(&f).into_iter().filter(|n| self.usable(*n)).count();
        if n == 0 || rate <= 0.0 {
            self.armed.push(index);
            return Ok(());
        }
        let lambda = rate * n as f64 / 3600.0;
        let u = self.rng_fail.unit();
        let dt = -(1.0 - u).ln() / lambda;
        self.kernel.schedule_in(dt, Ev::RateTick { index })?;
        self.background += 1;
        Ok(())
    }

    pub(super) fn on_rate_tick(&mut self, index: usize) -> Res {
        self.background -= 1;
        let f = self.failures[index].clone();
        let nodes: Vec<NodeId> = self.scope_nodes(&f).into_iter().filter(|n| self.usable(*n)).collect();
        if !nodes.is_empty() {
            let target = nodes[self.rng_fail.below(nodes.len())];
            self.fire_failure(index, Some(target))?;
        }
        if self.status == RunStatus::Running && self.kernel.pending() > self.background {
            self.arm_rate(index)?;
        }
        Ok(())
    }

    pub(super) fn fire_failure(&mut self, index: usize, target: Option<NodeId>) -> Res {
        let f = self.failures[index].clone();
        let mut fields = vec![kv("kind", f.kind.as_str())];
        match f.scope() {
            Scope::Node(n) => fields.extend([kv("scope", "node"), kv("node", n)]),
            Scope::Block(b) => fields.extend([kv("scope", "block"), kv("block", b)]),
            Scope::Task(t) => fields.extend([kv("scope", "task"), kv("task", t)]),
            Scope::Run => fields.push(kv("scope", "run")),
        }
        if let Some(n) = target {
            fields.push(kv("target", n));
        }
        fields.push(kv("permanent", f.permanent));
        self.emit(EventKind::FailureInjected, fields);
        let nodes = match target {
            Some(n) => vec![n],
            None => self.scope_nodes(&f),
        };
        match f.kind {
            FailureKind::Hardware | FailureKind::Os => {
                for n in nodes {
                    self.node_failure(n, f.kind, f.permanent, f.reboot_sec)?;
                }
            }
            FailureKind::Application => {
                let hits: Vec<u64> = match (f.scope(), target) {
                    (Scope::Task(t), None) => self.task_attempt.get(&t).copied().into_iter().collect(),
                    _ => self.attempts.iter().filter(|(_, at)| at.nodes.iter().any(|n| nodes.contains(n))).map(|(a, _)| *a).collect(),
                };
                for a in hits {
                    if self.attempts.get(&a).is_some_and(Attempt::running) {
                        self.app_fail(a, None)?;
                    }
                }
            }
            FailureKind::Strategic => match on_failure(f.kind, 0, 0, self.cfg.dispatch.chop.is_some()) {
                FailureAction::Chop => self.fire_chop()?,
                _ => self.halt()?,
            },
        }
        Ok(())
    }

    fn node_failure(&mut self, n: NodeId, kind: FailureKind, permanent: bool, reboot: f64) -> Res {
        if n.0 >= self.cfg.platform.node_count {
            return Ok(());
        }
        if !self.usable(n) {
            if permanent {
                self.platform.node_mut(n).lost = true;
            }
            return Ok(());
        }
        let hits: Vec<u64> = self.attempts.iter().filter(|(_, at)| at.nodes.contains(&n)).map(|(a, _)| *a).collect();
        for a in hits {
            let t = self.attempts[&a].task;
            let phase = self.abort_attempt(a, Some((kind.as_str(), false, None)))?;
            if phase != Phase::Signalling {
                self.graph.requeue(t)?;
            }
        }
        let bcasts: Vec<DataId> = self.broadcasts.iter().filter(|(_, bc)| bc.pending.contains(&n)).map(|(d, _)| *d).collect();
        for d in bcasts {
            self.drop_subtree(d, n);
        }
        let touching: Vec<u64> = self.xfers.iter().filter(|(_, x)| x.src.node() == Some(n) || x.dst.node() == Some(n)).map(|(id, _)| *id).collect();
        for id in touching {
            self.abort_xfer(id)?;
        }
        self.remove_workers(n)?;
        self.platform.node_mut(n).cache.clear();
        self.dir.drop_node(n);
        self.dir.erase_ifs_on(&BTreeSet::from([n]));
        self.local_keep.retain(|_, m| *m != n);
        let lost: Vec<(DataId, NodeId, TaskId)> = self.flush_pending.iter().copied().filter(|(_, m, _)| *m == n).collect();
        self.flush_pending.retain(|(_, m, _)| *m != n);
        for (d, _, p) in lost {
            self.lost_output(d, p)?;
        }
        let now = self.now();
        let node = self.platform.node_mut(n);
        node.up = false;
        self.down_since.insert(n, now);
        if permanent {
            self.platform.node_mut(n).lost = true;
        } else {
            self.kernel.schedule_in(reboot, Ev::Reboot { node: n })?;
        }
        Ok(())
    }

    pub(super) fn on_reboot(&mut self, n: NodeId) {
        let node = self.platform.node(n);
        if node.allocated && !node.lost && !node.up {
            self.platform.node_mut(n).up = true;
            self.down_since.remove(&n);
            self.add_workers(n);
        }
    }

    /// Application-level failure of a computing attempt.
    fn app_fail(&mut self, a: u64, reason: Option<&str>) -> Res {
        let t = self.attempts[&a].task;
        let used = self.retries(t);
        match on_failure(FailureKind::Application, used, self.cfg.resilience.max_retries, self.cfg.dispatch.chop.is_some()) {
            FailureAction::Retry { counted } => {
                self.abort_attempt(a, Some(("application", false, reason)))?;
                if counted {
                    *self.retries.entry(t).or_insert(0) += 1;
                }
                self.graph.mark_failed(t)?;
                self.graph.requeue(t)?;
            }
            _ => {
                self.abort_attempt(a, Some(("application", true, reason)))?;
                self.graph.mark_failed(t)?;
                self.terminal += 1;
                for c in self.graph.children(t) {
                    if !self.is_terminal(c) {
                        self.prune_internal(c)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub(super) fn on_kill_cap(&mut self, a: u64) -> Res {
        if self.attempts.get(&a).is_some_and(|at| at.phase == Phase::Running) {
            self.app_fail(a, Some("kill-cap"))?;
        }
        Ok(())
    }

    // ---- chop, halt, migration ------------------------------------------

    /// Stops every attempt. With `migrate`, computing tasks keep their
    /// progress and remember the node holding their inputs.
    fn stop_all(&mut self, migrate: bool) -> Res {
        let now = self.now();
        let ids: Vec<u64> = self.attempts.keys().copied().collect();
        for a in ids {
            let at = self.attempts[&a].clone();
            if migrate && at.phase == Phase::Running {
                self.attempts.remove(&a);
                self.task_attempt.remove(&at.task);
                let resident: u64 = at.pinned.iter().filter_map(|d| self.graph.data(*d)).map(|r| r.size).sum();
                self.teardown(a, &at);
                self.emit(EventKind::TaskEnd, vec![kv("task", at.task), kv("worker", at.workers[0]), kv("node", at.node), kv("outcome", "migrated")]);
                for w in &at.workers {
                    self.free_worker(*w);
                }
                self.graph.requeue(at.task)?;
                self.saved_progress.insert(at.task, at.progress + now - at.started);
                if resident > 0 {
                    self.migrate_src.insert(at.task, at.node);
                }
                continue;
            }
            let phase = self.abort_attempt(a, Some(("strategic", false, None)))?;
            if phase != Phase::Signalling {
                self.graph.requeue(at.task)?;
            }
        }
        let backlogged: Vec<WorkerId> = self.workers.iter().filter(|(_, w)| !w.backlog.is_empty()).map(|(id, _)| *id).collect();
        for w in backlogged {
            let tasks: Vec<TaskId> = self.workers.get_mut(&w).expect("worker").backlog.drain(..).collect();
            for t in tasks {
                self.queued.remove(&t);
                self.arrived.remove(&t);
                self.graph.requeue(t)?;
            }
        }
        let ids: Vec<u64> = self.xfers.keys().copied().collect();
        for id in ids {
            self.abort_xfer(id)?;
        }
        self.restage.clear();
        for ev in std::mem::take(&mut self.grant_events) {
            self.kernel.cancel(ev);
        }
        self.outstanding = 0;
        self.outstanding_nodes = 0;
        self.prov.freeze();
        Ok(())
    }

    fn release_after_stop(&mut self) -> Res {
        let keep: BTreeSet<BlockId> = self.migrate_src.values().map(|n| self.platform.node(*n).block).collect();
        let ids: Vec<BlockId> = self.platform.allocated_blocks().map(|b| b.id).filter(|b| !keep.contains(b)).collect();
        for b in ids {
            self.release_block(b)?;
        }
        self.draining = keep;
        for (d, _, p) in std::mem::take(&mut self.flush_pending) {
            self.lost_output(d, p)?;
        }
        if let Some(ev) = self.flush_event.take() {
            self.kernel.cancel(ev);
        }
        Ok(())
    }

    pub(super) fn fire_chop(&mut self) -> Res {
        let Some(chop) = self.cfg.dispatch.chop else { return Ok(()) };
        self.chop_fired = true;
        let p = &self.cfg.platform;
        let restart = round_to_granularity(chop.restart_nodes, p.block_granularity, p.node_count)?;
        self.emit(EventKind::ChopTriggered, vec![kv("done", self.done), kv("total", self.graph.task_count()), kv("restart-nodes", restart)]);
        self.stop_all(self.cfg.dispatch.migration)?;
        self.release_after_stop()?;
        self.request_nodes(restart)
    }

    fn halt(&mut self) -> Res {
        self.stop_all(false)?;
        self.migrate_src.clear();
        self.release_after_stop()?;
        self.release_all();
        self.status = RunStatus::Halted;
        Ok(())
    }

    /// Moves a computing task to an idle core on `to`, keeping its progress.
    pub fn migrate(&mut self, task: TaskId, to: NodeId) -> Res {
        if !self.cfg.dispatch.migration {
            return Err(EngineError::MigrationDisabled);
        }
        let a = self
            .task_attempt
            .get(&task)
            .copied()
            .filter(|a| self.attempts[a].phase == Phase::Running)
            .ok_or(EngineError::NotRunning(task))?;
        let dest = self
            .idle
            .iter()
            .copied()
            .find(|w| self.workers[w].node == to)
            .ok_or(EngineError::DestinationBusy(to))?;
        let now = self.now();
        let at = self.attempts.remove(&a).expect("attempt");
        self.task_attempt.remove(&task);
        self.teardown(a, &at);
        self.emit(EventKind::TaskEnd, vec![kv("task", task), kv("worker", at.workers[0]), kv("node", at.node), kv("outcome", "migrated")]);
        for w in &at.workers {
            self.free_worker(*w);
        }
        self.graph.requeue(task)?;
        self.saved_progress.insert(task, at.progress + now - at.started);
        if at.node != to {
            self.migrate_src.insert(task, at.node);
        }
        let sched = self.workers[&dest].sched;
        self.dispatch_to(task, vec![dest], sched, 0.0, "migrate")?;
        self.pump()
    }

    // ---- checkpoints ----------------------------------------------------

    /// Snapshot of the durable run state.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut pending: Vec<DataId> = self.flush_pending.iter().map(|(d, _, _)| *d).collect();
        pending.extend(self.xfers.values().filter(|x| matches!(x.purpose, Purpose::Flush { .. })).map(|x| x.data));
        let body = CheckpointBody {
            snapshot_time: self.now(),
            seed: self.cfg.seed,
            graph: self.graph.clone(),
            directory: self.dir.clone(),
            provisioner_cursor: self.prov.cursor(),
            pending_flush: pending,
            retries: self.retries.clone(),
            chop_fired: self.chop_fired,
        };
        self.emit(EventKind::Checkpoint, vec![kv("done", self.done)]);
        Checkpoint::new(body)
    }
}

/// Restarts a run from a checkpoint on a fresh static allocation of `nodes`.
/// Work in flight at the snapshot is requeued; finished tasks whose outputs
/// only lived in volatile storage run again.
pub fn recover(cfg: &SimConfig, cp: &Checkpoint, nodes: u32) -> Res<Engine> {
    let body = &cp.body;
    let mut graph = body.graph.clone();
    let ids: Vec<TaskId> = graph.task_ids().collect();
    for t in &ids {
        if matches!(graph.state(*t), Some(TaskState::Dispatched | TaskState::Running)) {
            graph.requeue(*t)?;
        }
    }
    let mut dir = body.directory.clone();
    dir.drop_volatile();
    let mut reopen = Vec::new();
    for t in &ids {
        if graph.state(*t) != Some(TaskState::Done) {
            continue;
        }
        let spec = graph.task(*t).expect("task");
        let lost = spec.outputs.iter().any(|d| {
            let r = graph.data(*d).expect("data");
            let live = graph.consumers(*d).any(|c| !graph.state(c).is_some_and(TaskState::is_terminal));
            r.size > 0 && !dir.on_gfs(*d) && dir.ifs_home(*d).is_none() && (live || r.kind == DataKind::Output)
        });
        if lost {
            reopen.push(*t);
        }
    }
    for t in &reopen {
        graph.reopen(*t)?;
    }
    let mut cfg = cfg.clone();
    cfg.provision = ProvisionPolicy { mode: ProvisionMode::Static, static_nodes: Some(nodes), ..cfg.provision };
    let mut e = Engine::build(cfg, graph, body.snapshot_time, Some(dir))?;
    e.retries = body.retries.clone();
    e.chop_fired = body.chop_fired;
    e.reopened = reopen.into_iter().collect();
    e.prov.set_cursor(body.provisioner_cursor);
    Ok(e)
}
