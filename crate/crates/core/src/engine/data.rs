//! Stage-in, output writes, flushes, broadcasts, reductions and the
//! bandwidth-shared transfer pools.

use std::collections::BTreeSet;

use super::*;
use crate::datamgr::{nearest_holder, plan_broadcast, plan_reduction, server_for, stage_in, write_output, Endpoint, OutputAction, Source};
use crate::graph::DataRef;

impl Engine {
    pub(super) fn begin_staging(&mut self, a: u64) -> Res {
        let (t, node) = {
            let at = &self.attempts[&a];
            (at.task, at.node)
        };
        let inputs = self.graph.live_inputs(t);
        let mut missing = BTreeSet::new();
        for d in inputs {
            if self.graph.data(d).is_none_or(|r| r.size == 0) {
                continue;
            }
            if self.platform.node(node).cache.contains(d) {
                self.pin_for(a, d);
            } else {
                missing.insert(d);
            }
        }
        if missing.is_empty() {
            return self.start_exec(a);
        }
        let lookup = self.cfg.data.lookup_latency_sec;
        let at = self.attempts.get_mut(&a).expect("attempt");
        at.waiting = missing.clone();
        if lookup > 0.0 {
            at.phase = Phase::Lookup;
            let ev = self.kernel.schedule_in(lookup, Ev::LookupDone { attempt: a })?;
            self.attempts.get_mut(&a).expect("attempt").events.push(ev);
            return Ok(());
        }
        at.phase = Phase::Staging;
        self.stage(a, missing.into_iter().collect())
    }

    pub(super) fn on_lookup_done(&mut self, a: u64) -> Res {
        let Some(at) = self.attempts.get_mut(&a) else { return Ok(()) };
        if at.phase != Phase::Lookup {
            return Ok(());
        }
        at.phase = Phase::Staging;
        at.events.clear();
        let ids: Vec<DataId> = at.waiting.iter().copied().collect();
        self.stage(a, ids)
    }

    fn pin_for(&mut self, a: u64, d: DataId) {
        let node = self.attempts[&a].node;
        let cache = &mut self.platform.node_mut(node).cache;
        if cache.contains(d) {
            cache.pin(d);
            self.attempts.get_mut(&a).expect("attempt").pinned.push(d);
        }
    }

    fn add_waiter(&mut self, d: DataId, node: NodeId, a: u64) {
        let list = self.waiters.entry((d, node)).or_default();
        if !list.contains(&a) {
            list.push(a);
        }
    }

    /// Plans and starts transfers for the given missing inputs of attempt `a`.
    pub(super) fn stage(&mut self, a: u64, ids: Vec<DataId>) -> Res {
        let (t, node) = {
            let at = &self.attempts[&a];
            (at.task, at.node)
        };
        let mut rest: Vec<DataRef> = Vec::new();
        for d in ids {
            if self.platform.node(node).cache.contains(d) {
                self.pin_for(a, d);
                self.attempts.get_mut(&a).expect("attempt").waiting.remove(&d);
                continue;
            }
            if self.inbound.contains_key(&(d, node)) {
                self.add_waiter(d, node, a);
                continue;
            }
            if let Some(src) = self.migrate_src.get(&t).copied() {
                if src != node && self.platform.node(src).allocated && self.platform.node(src).cache.contains(d) {
                    self.fetch_peer(d, src, node, a)?;
                    continue;
                }
            }
            rest.push(self.graph.data(d).cloned().ok_or_else(|| EngineError::Internal(format!("unknown data {d}")))?);
        }
        let combinable = self.graph.task(t).is_some_and(|s| s.combinable);
        if let (true, Some(fanout)) = (combinable, self.cfg.data.reduction_fanout) {
            if rest.len() >= 2 {
                let taken = self.try_reduction(a, &rest, fanout)?;
                rest.retain(|r| !taken.contains(&r.id));
            }
        }
        let steps = {
            let link = &self.link_load;
            stage_in(&rest, node, |_| false, &mut self.dir, &self.cfg.data, |n| link.get(&n).copied().unwrap_or(0))?
        };
        for step in steps {
            let d = step.data;
            match step.source {
                Source::Cached => {
                    self.pin_for(a, d);
                    self.attempts.get_mut(&a).expect("attempt").waiting.remove(&d);
                }
                Source::Peer(p) => self.fetch_peer(d, p, node, a)?,
                Source::Ifs => {
                    let id = self.start_transfer(d, step.bytes, Route::IfsRead, Endpoint::Ifs, Endpoint::Node(node), Purpose::Deliver { node, broadcast: false }, vec![kv("task", t)])?;
                    self.inbound.insert((d, node), Inbound::Xfer(id));
                    self.add_waiter(d, node, a);
                }
                Source::Gfs => {
                    let id = self.start_transfer(d, step.bytes, Route::GfsRead, Endpoint::Gfs, Endpoint::Node(node), Purpose::Deliver { node, broadcast: false }, vec![kv("task", t)])?;
                    self.inbound.insert((d, node), Inbound::Xfer(id));
                    self.add_waiter(d, node, a);
                }
                Source::Broadcast => self.join_broadcast(d, node, a)?,
                Source::Regenerate => return self.regenerate(a, d),
            }
        }
        let at = &self.attempts[&a];
        if at.waiting.is_empty() && at.phase == Phase::Staging {
            self.start_exec(a)?;
        }
        Ok(())
    }

    fn fetch_peer(&mut self, d: DataId, from: NodeId, to: NodeId, a: u64) -> Res {
        let bytes = self.graph.data(d).map_or(0, |r| r.size);
        let t = self.attempts[&a].task;
        let id = self.start_transfer(d, bytes, Route::NodeToNode, Endpoint::Node(from), Endpoint::Node(to), Purpose::Deliver { node: to, broadcast: false }, vec![kv("task", t)])?;
        self.inbound.insert((d, to), Inbound::Xfer(id));
        self.add_waiter(d, to, a);
        Ok(())
    }

    /// No copy of `d` survives: the consumer goes back to pending and the
    /// producer runs again.
    fn regenerate(&mut self, a: u64, d: DataId) -> Res {
        let t = self.attempts[&a].task;
        self.abort_attempt(a, None)?;
        self.graph.demote(t)?;
        if let Some(p) = self.graph.producer(d) {
            if self.graph.state(p) == Some(TaskState::Done) {
                self.reopen_task(p)?;
            }
        }
        Ok(())
    }

    /// Puts a finished task back in play because one of its outputs was lost.
    pub(super) fn reopen_task(&mut self, p: TaskId) -> Res {
        let demoted = self.graph.reopen(p)?;
        self.done -= 1;
        self.terminal -= 1;
        self.reopened.insert(p);
        for c in demoted {
            self.dequeue(c);
        }
        Ok(())
    }

    /// An output that never reached durable storage is gone.
    pub(super) fn lost_output(&mut self, d: DataId, producer: TaskId) -> Res {
        if self.dir.on_gfs(d) || self.dir.ifs_home(d).is_some() || !self.dir.holders(d).is_empty() {
            return Ok(());
        }
        let is_output = self.graph.data(d).is_some_and(|r| r.kind == DataKind::Output);
        if (is_output || self.needed(d)) && self.graph.state(producer) == Some(TaskState::Done) {
            self.reopen_task(producer)?;
        }
        Ok(())
    }

    // ---- broadcast ------------------------------------------------------

    fn join_broadcast(&mut self, d: DataId, node: NodeId, a: u64) -> Res {
        if let Some(bc) = self.broadcasts.get_mut(&d) {
            if !bc.pending.contains(&node) {
                bc.late.insert(node);
            }
            self.inbound.insert((d, node), Inbound::Broadcast);
            self.add_waiter(d, node, a);
            return Ok(());
        }
        let dests: Vec<NodeId> = self
            .platform
            .nodes
            .iter()
            .filter(|n| n.usable() && !n.cache.contains(d))
            .map(|n| n.id)
            .collect();
        let tree = plan_broadcast(Endpoint::Gfs, &dests, self.cfg.data.broadcast_fanout);
        for n in &dests {
            self.inbound.insert((d, *n), Inbound::Broadcast);
        }
        let relay = tree.relay.unwrap_or(Endpoint::Relay(0));
        self.broadcasts.insert(d, Broadcast { tree, pending: dests.into_iter().collect(), late: BTreeSet::new() });
        self.add_waiter(d, node, a);
        let bytes = self.graph.data(d).map_or(0, |r| r.size);
        self.start_transfer(d, bytes, Route::GfsRead, Endpoint::Gfs, relay, Purpose::Relay, Vec::new())?;
        Ok(())
    }

    fn forward_broadcast(&mut self, d: DataId, from: Endpoint) -> Res {
        let Some(bc) = self.broadcasts.get(&d) else { return Ok(()) };
        let kids: Vec<NodeId> = bc.tree.children_of(from).filter_map(|e| e.to.node()).collect();
        let bytes = self.graph.data(d).map_or(0, |r| r.size);
        for m in kids {
            if !self.usable(m) {
                self.drop_subtree(d, m);
                continue;
            }
            let id = self.start_transfer(d, bytes, Route::NodeToNode, from, Endpoint::Node(m), Purpose::Deliver { node: m, broadcast: true }, Vec::new())?;
            self.inbound.insert((d, m), Inbound::Xfer(id));
        }
        self.maybe_end_broadcast(d);
        Ok(())
    }

    /// Gives up on the part of a broadcast tree rooted at `m`; its waiters
    /// stage again from whatever copies exist.
    pub(super) fn drop_subtree(&mut self, d: DataId, m: NodeId) {
        let Some(bc) = self.broadcasts.get(&d) else { return };
        let mut stack = vec![m];
        let mut nodes = Vec::new();
        while let Some(n) = stack.pop() {
            nodes.push(n);
            stack.extend(bc.tree.children_of(Endpoint::Node(n)).filter_map(|e| e.to.node()));
        }
        for n in nodes {
            let still = self.broadcasts.get_mut(&d).is_some_and(|bc| bc.pending.remove(&n));
            if still {
                if let Some(Inbound::Xfer(id)) = self.inbound.remove(&(d, n)) {
                    self.cancel_xfer(id);
                }
                self.restage_waiters(d, n);
            }
        }
        self.maybe_end_broadcast(d);
    }

    fn maybe_end_broadcast(&mut self, d: DataId) {
        if self.broadcasts.get(&d).is_some_and(|bc| bc.pending.is_empty()) {
            let bc = self.broadcasts.remove(&d).expect("broadcast");
            for m in bc.late {
                self.inbound.remove(&(d, m));
                self.restage_waiters(d, m);
            }
        }
    }

    fn abort_broadcast(&mut self, d: DataId) {
        if let Some(bc) = self.broadcasts.remove(&d) {
            for n in bc.pending.iter().chain(bc.late.iter()) {
                if let Some(Inbound::Xfer(id)) = self.inbound.remove(&(d, *n)) {
                    self.cancel_xfer(id);
                }
                self.restage_waiters(d, *n);
            }
        }
    }

    pub(super) fn restage_waiters(&mut self, d: DataId, node: NodeId) {
        for a in self.waiters.remove(&(d, node)).unwrap_or_default() {
            self.restage.push((a, d));
        }
    }

    pub(super) fn process_restage(&mut self) -> Res {
        while !self.restage.is_empty() {
            for (a, d) in std::mem::take(&mut self.restage) {
                let ok = self.attempts.get(&a).is_some_and(|at| at.phase == Phase::Staging && at.waiting.contains(&d) && at.reduction.is_none());
                if ok && self.usable(self.attempts[&a].node) {
                    self.stage(a, vec![d])?;
                }
            }
        }
        Ok(())
    }

    // ---- reduction ------------------------------------------------------

    /// Gathers remote inputs of a combinable task through a reduction tree.
    /// Returns the inputs the tree will deliver.
    fn try_reduction(&mut self, a: u64, refs: &[DataRef], fanout: u32) -> Res<Vec<DataId>> {
        let sink = self.attempts[&a].node;
        let mut picks = Vec::new();
        for r in refs {
            let holders = self.dir.holders(r.id);
            let link = &self.link_load;
            if let Some(h) = nearest_holder(&holders, sink, |n| link.get(&n).copied().unwrap_or(0)) {
                picks.push((r.id, h, r.size));
            }
        }
        if picks.len() < 2 {
            return Ok(Vec::new());
        }
        let mut sources: Vec<NodeId> = picks.iter().map(|p| p.1).collect();
        sources.sort();
        sources.dedup();
        let plan = plan_reduction(&sources, sink, fanout, true);
        if plan.edges.is_empty() {
            return Ok(Vec::new());
        }
        let mut incoming = BTreeMap::new();
        for e in &plan.edges {
            if let Some(n) = e.to.node() {
                *incoming.entry(n).or_insert(0usize) += 1;
            }
        }
        let rid = self.next_reduction;
        self.next_reduction += 1;
        let inputs: Vec<DataId> = picks.iter().map(|p| p.0).collect();
        let bytes = picks.iter().map(|p| p.2).max().unwrap_or(0);
        let sink_left = incoming.get(&sink).copied().unwrap_or(0);
        self.reductions.insert(rid, Reduction { attempt: a, sink, inputs: inputs.clone(), edges: plan.edges, incoming, sink_left, bytes, xfers: BTreeSet::new() });
        self.attempts.get_mut(&a).expect("attempt").reduction = Some(rid);
        let leaves: Vec<usize> = {
            let rd = &self.reductions[&rid];
            (0..rd.edges.len())
                .filter(|&i| rd.edges[i].from.node().is_some_and(|n| rd.incoming.get(&n).copied().unwrap_or(0) == 0))
                .collect()
        };
        for i in leaves {
            self.start_reduction_edge(rid, i)?;
        }
        Ok(inputs)
    }

    fn start_reduction_edge(&mut self, rid: u64, i: usize) -> Res {
        let (edge, data, bytes, attempt) = {
            let rd = &self.reductions[&rid];
            (rd.edges[i], rd.inputs[0], rd.bytes, rd.attempt)
        };
        let ok = edge.from.node().is_some_and(|n| self.usable(n)) && edge.to.node().is_some_and(|n| self.usable(n));
        if !ok {
            self.abort_reduction(rid);
            return Ok(());
        }
        let t = self.attempts[&attempt].task;
        let id = self.start_transfer(data, bytes, Route::NodeToNode, edge.from, edge.to, Purpose::Reduce { reduction: rid, edge: i }, vec![kv("task", t)])?;
        self.reductions.get_mut(&rid).expect("reduction").xfers.insert(id);
        Ok(())
    }

    fn reduction_edge_done(&mut self, rid: u64, xfer: u64, i: usize) -> Res {
        let Some(rd) = self.reductions.get_mut(&rid) else { return Ok(()) };
        rd.xfers.remove(&xfer);
        let Some(to) = rd.edges[i].to.node() else { return Ok(()) };
        if to == rd.sink {
            rd.sink_left = rd.sink_left.saturating_sub(1);
            if rd.sink_left == 0 {
                let rd = self.reductions.remove(&rid).expect("reduction");
                if let Some(at) = self.attempts.get_mut(&rd.attempt) {
                    at.reduction = None;
                    for d in &rd.inputs {
                        at.waiting.remove(d);
                    }
                    if at.waiting.is_empty() && at.phase == Phase::Staging {
                        self.start_exec(rd.attempt)?;
                    }
                }
            }
            return Ok(());
        }
        let left = rd.incoming.get_mut(&to).expect("in-degree");
        *left -= 1;
        if *left == 0 {
            let next: Vec<usize> = (0..rd.edges.len()).filter(|&k| rd.edges[k].from == Endpoint::Node(to)).collect();
            for k in next {
                self.start_reduction_edge(rid, k)?;
            }
        }
        Ok(())
    }

    /// Drops a reduction; its inputs are staged individually instead.
    pub(super) fn abort_reduction(&mut self, rid: u64) {
        let Some(rd) = self.reductions.remove(&rid) else { return };
        for x in rd.xfers {
            self.cancel_xfer(x);
        }
        if let Some(at) = self.attempts.get_mut(&rd.attempt) {
            at.reduction = None;
            for d in rd.inputs {
                if at.waiting.contains(&d) {
                    self.restage.push((rd.attempt, d));
                }
            }
        }
    }

    // ---- outputs --------------------------------------------------------

    fn cache_output(&mut self, node: NodeId, data: &DataRef, pin: bool) -> bool {
        if !self.platform.node(node).allocated {
            return false;
        }
        match self.platform.node_mut(node).cache.put(data) {
            Ok(evicted) => {
                self.dir.register(data.id, node);
                for e in evicted {
                    self.dir.deregister(e, node);
                }
                if pin {
                    self.platform.node_mut(node).cache.pin(data.id);
                }
                true
            }
            Err(_) => false,
        }
    }

    fn ifs_home_for(&self, d: DataId) -> Option<NodeId> {
        let nodes: Vec<NodeId> = self.platform.nodes.iter().filter(|n| n.usable()).map(|n| n.id).collect();
        if nodes.is_empty() {
            return None;
        }
        Some(nodes[server_for(d, nodes.len() as u32)])
    }

    pub(super) fn write_outputs(&mut self, a: u64) -> Res {
        let (t, node, w) = {
            let at = &self.attempts[&a];
            (at.task, at.node, at.workers[0])
        };
        let spec = self.graph.task(t).expect("task").clone();
        for d in &spec.outputs {
            let dref = self.graph.data(*d).expect("output").clone();
            if dref.size == 0 {
                self.dir.set_gfs(dref.id);
                continue;
            }
            let group_local = self.cfg.dispatch.pipeline_grouping
                && dref.kind == DataKind::Intermediate
                && spec.group.is_some()
                && self.graph.consumers(dref.id).all(|c| self.graph.task(c).and_then(|s| s.group) == spec.group);
            let mut action = write_output(&dref, group_local, &self.cfg.data, self.cfg.platform.ifs_enabled);
            let home = if action == OutputAction::SyncIfs { self.ifs_home_for(dref.id) } else { None };
            if action == OutputAction::SyncIfs && home.is_none() {
                action = OutputAction::SyncGfs;
            }
            match action {
                OutputAction::Local => {
                    let keep = self.needed(dref.id);
                    if self.cache_output(node, &dref, keep) {
                        if keep {
                            self.local_keep.insert(dref.id, node);
                        }
                    } else {
                        self.sync_write(a, &dref, None, w, t)?;
                    }
                }
                OutputAction::Deferred => {
                    if self.cache_output(node, &dref, true) {
                        self.flush_pending.push((dref.id, node, t));
                        if self.flush_event.is_none() {
                            let ev = self.kernel.schedule_in(self.cfg.data.flush_period_sec, Ev::Flush)?;
                            self.flush_event = Some(ev);
                        }
                    } else {
                        self.sync_write(a, &dref, None, w, t)?;
                    }
                }
                OutputAction::SyncGfs => {
                    self.cache_output(node, &dref, false);
                    self.sync_write(a, &dref, None, w, t)?;
                }
                OutputAction::SyncIfs => {
                    self.cache_output(node, &dref, false);
                    self.sync_write(a, &dref, home, w, t)?;
                }
            }
        }
        Ok(())
    }

    fn sync_write(&mut self, a: u64, d: &DataRef, ifs_home: Option<NodeId>, w: WorkerId, t: TaskId) -> Res {
        let node = self.attempts[&a].node;
        let (route, dst) = if ifs_home.is_some() { (Route::IfsWrite, Endpoint::Ifs) } else { (Route::GfsWrite, Endpoint::Gfs) };
        let id = self.start_transfer(d.id, d.size, route, Endpoint::Node(node), dst, Purpose::Write { attempt: a, ifs_home }, vec![kv("worker", w), kv("task", t)])?;
        let at = self.attempts.get_mut(&a).expect("attempt");
        at.pending_writes += 1;
        at.writes.insert(id);
        Ok(())
    }

    pub(super) fn on_flush(&mut self) -> Res {
        self.flush_event = None;
        let batch = self.next_batch;
        self.next_batch += 1;
        for (d, node, p) in std::mem::take(&mut self.flush_pending) {
            if self.platform.node(node).allocated && self.platform.node(node).cache.contains(d) {
                let bytes = self.graph.data(d).map_or(0, |r| r.size);
                self.start_transfer(d, bytes, Route::GfsWrite, Endpoint::Node(node), Endpoint::Gfs, Purpose::Flush { node, producer: p }, vec![kv("batch", batch)])?;
            } else {
                self.lost_output(d, p)?;
            }
        }
        Ok(())
    }

    // ---- transfers ------------------------------------------------------

    fn touch(&mut self, ep: Endpoint, delta: isize) {
        if let Some(n) = ep.node() {
            let c = self.node_xfers.entry(n).or_insert(0);
            *c = c.saturating_add_signed(delta);
            if *c == 0 {
                self.node_xfers.remove(&n);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn start_transfer(&mut self, data: DataId, bytes: u64, route: Route, src: Endpoint, dst: Endpoint, purpose: Purpose, extra: Vec<(String, String)>) -> Res<u64> {
        let id = self.next_xfer;
        self.next_xfer += 1;
        let mut fields = vec![kv("xfer", id), kv("data", data), kv("bytes", bytes), kv("route", route.as_str()), kv("src", src), kv("dst", dst)];
        fields.extend(extra);
        self.emit(EventKind::TransferStart, fields.clone());
        self.touch(src, 1);
        self.touch(dst, 1);
        if route == Route::NodeToNode {
            if let Some(n) = src.node() {
                *self.link_load.entry(n).or_insert(0) += 1;
            }
        }
        self.xfers.insert(id, Transfer { data, bytes, route, src, dst, purpose, fields, event: None, in_pool: None });
        let (_, latency) = self.cfg.platform.route_params(route);
        if latency > 0.0 {
            let ev = self.kernel.schedule_in(latency, Ev::XferPhase { id })?;
            self.xfers.get_mut(&id).expect("xfer").event = Some(ev);
        } else {
            self.activate_xfer(id)?;
        }
        Ok(id)
    }

    /// Latency is over; the payload starts flowing.
    pub(super) fn activate_xfer(&mut self, id: u64) -> Res {
        let Some(x) = self.xfers.get_mut(&id) else { return Ok(()) };
        x.event = None;
        let (route, bytes) = (x.route, x.bytes);
        let (bw, _) = self.cfg.platform.route_params(route);
        match route.pool() {
            Some(pool) => {
                self.advance_pool(pool);
                let st = self.pools.entry(pool).or_default();
                let finish = st.served + bytes as f64;
                st.active.insert((finish.to_bits(), id));
                self.xfers.get_mut(&id).expect("xfer").in_pool = Some(finish);
                self.reschedule_pool(pool)?;
            }
            None => {
                let ev = self.kernel.schedule_in(bytes as f64 / bw, Ev::XferEnd { id })?;
                self.xfers.get_mut(&id).expect("xfer").event = Some(ev);
            }
        }
        Ok(())
    }

    fn pool_bw(&self, pool: Pool) -> f64 {
        let route = match pool {
            Pool::Gfs => Route::GfsRead,
            Pool::Ifs => Route::IfsRead,
        };
        self.cfg.platform.route_params(route).0
    }

    fn advance_pool(&mut self, pool: Pool) {
        let now = self.now();
        let bw = self.pool_bw(pool);
        let st = self.pools.entry(pool).or_default();
        let n = st.active.len();
        if n > 0 {
            st.served += (now - st.last) * bw / n as f64;
        }
        st.last = now;
    }

    fn reschedule_pool(&mut self, pool: Pool) -> Res {
        let bw = self.pool_bw(pool);
        let now = self.now();
        let st = self.pools.entry(pool).or_default();
        if let Some(ev) = st.wake.take() {
            self.kernel.cancel(ev);
        }
        let st = &self.pools[&pool];
        if let Some(&(bits, _)) = st.active.first() {
            let remaining = (f64::from_bits(bits) - st.served).max(0.0);
            let dt = remaining * st.active.len() as f64 / bw;
            let ev = self.kernel.schedule(now + dt, Ev::PoolWake { pool })?;
            self.pools.get_mut(&pool).expect("pool").wake = Some(ev);
        }
        Ok(())
    }

    pub(super) fn on_pool_wake(&mut self, pool: Pool) -> Res {
        self.pools.entry(pool).or_default().wake = None;
        self.advance_pool(pool);
        let st = &self.pools[&pool];
        let mut done: Vec<(u64, u64)> = st
            .active
            .iter()
            .take_while(|(bits, _)| {
                let f = f64::from_bits(*bits);
                f <= st.served + 1e-9 * f.max(1.0)
            })
            .copied()
            .collect();
        if done.is_empty() {
            // Time cannot resolve the remainder; finish the earliest.
            done.extend(st.active.first().copied());
        }
        for key in &done {
            self.pools.get_mut(&pool).expect("pool").active.remove(key);
        }
        self.reschedule_pool(pool)?;
        for (_, id) in done {
            self.xfers.get_mut(&id).expect("xfer").in_pool = None;
            self.finish_xfer(id)?;
        }
        Ok(())
    }

    fn unlink(&mut self, x: &Transfer) {
        self.touch(x.src, -1);
        self.touch(x.dst, -1);
        if x.route == Route::NodeToNode {
            if let Some(n) = x.src.node() {
                if let Some(c) = self.link_load.get_mut(&n) {
                    *c -= 1;
                    if *c == 0 {
                        self.link_load.remove(&n);
                    }
                }
            }
        }
    }

    /// Stops a transfer without any follow-up.
    pub(super) fn cancel_xfer(&mut self, id: u64) -> Option<Transfer> {
        let x = self.xfers.remove(&id)?;
        if let Some(ev) = x.event {
            self.kernel.cancel(ev);
        }
        if let (Some(f), Some(pool)) = (x.in_pool, x.route.pool()) {
            self.advance_pool(pool);
            self.pools.get_mut(&pool).expect("pool").active.remove(&(f.to_bits(), id));
            let _ = self.reschedule_pool(pool);
        }
        self.unlink(&x);
        Some(x)
    }

    /// Stops a transfer and repairs whatever depended on it.
    pub(super) fn abort_xfer(&mut self, id: u64) -> Res {
        let Some(x) = self.cancel_xfer(id) else { return Ok(()) };
        match x.purpose {
            Purpose::Deliver { node, broadcast: false } => {
                self.inbound.remove(&(x.data, node));
                self.restage_waiters(x.data, node);
            }
            Purpose::Deliver { node, broadcast: true } => {
                self.inbound.remove(&(x.data, node));
                self.drop_subtree(x.data, node);
                self.restage_waiters(x.data, node);
            }
            Purpose::Relay => self.abort_broadcast(x.data),
            Purpose::Write { attempt, .. } => {
                if let Some(at) = self.attempts.get_mut(&attempt) {
                    at.writes.remove(&id);
                }
            }
            Purpose::Flush { producer, node } => {
                if self.platform.node(node).allocated {
                    self.platform.node_mut(node).cache.unpin(x.data);
                }
                self.lost_output(x.data, producer)?;
            }
            Purpose::Reduce { reduction, .. } => self.abort_reduction(reduction),
        }
        Ok(())
    }

    /// Transfer reached its destination.
    pub(super) fn finish_xfer(&mut self, id: u64) -> Res {
        let Some(x) = self.xfers.remove(&id) else { return Ok(()) };
        self.unlink(&x);
        self.emit(EventKind::TransferEnd, x.fields.clone());
        match x.purpose {
            Purpose::Deliver { node, broadcast } => {
                self.deliver(x.data, node)?;
                if broadcast {
                    if let Some(bc) = self.broadcasts.get_mut(&x.data) {
                        bc.pending.remove(&node);
                    }
                    self.forward_broadcast(x.data, Endpoint::Node(node))?;
                }
            }
            Purpose::Relay => self.forward_broadcast(x.data, x.dst)?,
            Purpose::Write { attempt, ifs_home } => {
                match ifs_home {
                    Some(h) => self.dir.set_ifs(x.data, h),
                    None => self.dir.set_gfs(x.data),
                }
                if let Some(at) = self.attempts.get_mut(&attempt) {
                    at.writes.remove(&id);
                    at.pending_writes -= 1;
                    if at.pending_writes == 0 && at.phase == Phase::Writing {
                        self.finish(attempt)?;
                    }
                }
            }
            Purpose::Flush { node, .. } => {
                self.dir.set_gfs(x.data);
                if self.platform.node(node).allocated {
                    self.platform.node_mut(node).cache.unpin(x.data);
                }
            }
            Purpose::Reduce { reduction, edge } => self.reduction_edge_done(reduction, id, edge)?,
        }
        Ok(())
    }

    fn deliver(&mut self, d: DataId, node: NodeId) -> Res {
        self.inbound.remove(&(d, node));
        let cached = match self.graph.data(d).cloned() {
            Some(r) if self.usable(node) => self.cache_output(node, &r, false),
            _ => false,
        };
        for a in self.waiters.remove(&(d, node)).unwrap_or_default() {
            let Some(at) = self.attempts.get_mut(&a) else { continue };
            if !at.waiting.remove(&d) {
                continue;
            }
            if cached {
                self.pin_for(a, d);
            }
            let at = &self.attempts[&a];
            if at.waiting.is_empty() && at.phase == Phase::Staging {
                self.start_exec(a)?;
            }
        }
        Ok(())
    }
}
