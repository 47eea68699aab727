//! Data placement and movement planning: the location directory, broadcast
//! and reduction trees, stage-in source selection and output handling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DataKind, DataRef};
use crate::ids::{DataId, NodeId};
use crate::platform::Route;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("data {0} is not registered anywhere")]
    UnknownData(DataId),
    #[error("local storage full on node {0}")]
    LocalStorageFull(NodeId),
    #[error("invalid data policy: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommonInputPolicy {
    PushBroadcast,
    #[default]
    PullOnDemand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocationKind {
    #[default]
    CentralMap,
    Hashed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntermediatePolicy {
    #[default]
    GfsPassthrough,
    PeerToPeer,
    Ifs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputPolicy {
    #[default]
    Synchronized,
    Collective,
}

fn two() -> u32 {
    2
}
fn one() -> u32 {
    1
}
fn sixty() -> f64 {
    60.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DataPolicy {
    #[serde(default)]
    pub common_input: CommonInputPolicy,
    #[serde(default = "two")]
    pub broadcast_fanout: u32,
    #[serde(default)]
    pub location: LocationKind,
    #[serde(default = "one")]
    pub server_count: u32,
    /// Cost of one directory probe.
    #[serde(default)]
    pub lookup_latency_sec: f64,
    #[serde(default)]
    pub intermediate: IntermediatePolicy,
    #[serde(default)]
    pub output: OutputPolicy,
    #[serde(default = "sixty")]
    pub flush_period_sec: f64,
    /// Combining tree for gathers marked combinable; `None` keeps a star.
    #[serde(default)]
    pub reduction_fanout: Option<u32>,
}

impl Default for DataPolicy {
    fn default() -> Self {
        Self {
            common_input: CommonInputPolicy::PullOnDemand,
            broadcast_fanout: 2,
            location: LocationKind::CentralMap,
            server_count: 1,
            lookup_latency_sec: 0.0,
            intermediate: IntermediatePolicy::GfsPassthrough,
            output: OutputPolicy::Synchronized,
            flush_period_sec: 60.0,
            reduction_fanout: None,
        }
    }
}

impl DataPolicy {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if self.broadcast_fanout < 2 {
            return bad("broadcast-fanout must be >= 2");
        }
        if self.server_count == 0 {
            return bad("server-count must be >= 1");
        }
        if !(self.flush_period_sec > 0.0) {
            return bad("flush-period-sec must be > 0");
        }
        if !(self.lookup_latency_sec >= 0.0) {
            return bad("lookup-latency-sec must be >= 0");
        }
        if matches!(self.reduction_fanout, Some(f) if f < 2) {
            return bad("reduction-fanout must be >= 2");
        }
        Ok(())
    }
}

/// Multiplicative (Fibonacci) hash of a data id onto `servers` servers.
pub fn server_for(id: DataId, servers: u32) -> usize {
    let h = id.0.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ((h >> 32) % u64::from(servers.max(1))) as usize
}

/// Where a data item currently lives.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Location {
    pub nodes: BTreeSet<NodeId>,
    pub gfs: bool,
    /// Node hosting the item's IFS shard, when it is on the IFS.
    pub ifs: Option<NodeId>,
}

/// Replica map from data ids to holders, split over `servers` shards. The
/// central variant is the single-shard case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationDirectory {
    kind: LocationKind,
    shards: Vec<BTreeMap<DataId, BTreeSet<NodeId>>>,
    gfs: BTreeSet<DataId>,
    ifs: BTreeMap<DataId, NodeId>,
    #[serde(skip)]
    probes: u64,
}

impl LocationDirectory {
    pub fn new(kind: LocationKind, servers: u32) -> Self {
        let n = match kind {
            LocationKind::CentralMap => 1,
            LocationKind::Hashed => servers.max(1) as usize,
        };
        Self { kind, shards: vec![BTreeMap::new(); n], gfs: BTreeSet::new(), ifs: BTreeMap::new(), probes: 0 }
    }

    pub fn kind(&self) -> LocationKind {
        self.kind
    }

    pub fn server_count(&self) -> usize {
        self.shards.len()
    }

    fn shard(&self, id: DataId) -> usize {
        server_for(id, self.shards.len() as u32)
    }

    /// Probes issued by `locate` so far.
    pub fn probes(&self) -> u64 {
        self.probes
    }

    pub fn register(&mut self, id: DataId, node: NodeId) {
        let s = self.shard(id);
        self.shards[s].entry(id).or_default().insert(node);
    }

    pub fn deregister(&mut self, id: DataId, node: NodeId) {
        let s = self.shard(id);
        if let Some(set) = self.shards[s].get_mut(&id) {
            set.remove(&node);
            if set.is_empty() {
                self.shards[s].remove(&id);
            }
        }
    }

    /// Forgets every replica on `node`.
    pub fn drop_node(&mut self, node: NodeId) {
        for shard in &mut self.shards {
            shard.retain(|_, set| {
                set.remove(&node);
                !set.is_empty()
            });
        }
    }

    /// Forgets all node replicas and IFS shards, keeping GFS residency.
    pub fn drop_volatile(&mut self) {
        for shard in &mut self.shards {
            shard.clear();
        }
        self.ifs.clear();
    }

    pub fn set_gfs(&mut self, id: DataId) {
        self.gfs.insert(id);
    }

    pub fn on_gfs(&self, id: DataId) -> bool {
        self.gfs.contains(&id)
    }

    pub fn gfs_resident(&self) -> impl Iterator<Item = DataId> + '_ {
        self.gfs.iter().copied()
    }

    pub fn set_ifs(&mut self, id: DataId, home: NodeId) {
        self.ifs.insert(id, home);
    }

    pub fn ifs_home(&self, id: DataId) -> Option<NodeId> {
        self.ifs.get(&id).copied()
    }

    /// Erases IFS shards hosted on any of `nodes`; returns the lost ids.
    pub fn erase_ifs_on(&mut self, nodes: &BTreeSet<NodeId>) -> Vec<DataId> {
        let lost: Vec<DataId> = self.ifs.iter().filter(|(_, h)| nodes.contains(h)).map(|(d, _)| *d).collect();
        for d in &lost {
            self.ifs.remove(d);
        }
        lost
    }

    /// Node holders without charging a probe.
    pub fn holders(&self, id: DataId) -> BTreeSet<NodeId> {
        self.shards[self.shard(id)].get(&id).cloned().unwrap_or_default()
    }

    /// One probe of exactly one server.
    pub fn locate(&mut self, id: DataId) -> Result<Location, DataError> {
        self.probes += 1;
        let nodes = self.holders(id);
        let gfs = self.gfs.contains(&id);
        let ifs = self.ifs.get(&id).copied();
        if nodes.is_empty() && !gfs && ifs.is_none() {
            return Err(DataError::UnknownData(id));
        }
        Ok(Location { nodes, gfs, ifs })
    }
}

/// Transfer endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Gfs,
    Ifs,
    /// A utility node relaying a broadcast.
    Relay(u32),
    Node(NodeId),
}

impl Endpoint {
    pub fn node(self) -> Option<NodeId> {
        match self {
            Endpoint::Node(n) => Some(n),
            _ => None,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Gfs => f.write_str("gfs"),
            Endpoint::Ifs => f.write_str("ifs"),
            Endpoint::Relay(u) => write!(f, "util{u}"),
            Endpoint::Node(n) => write!(f, "node{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeEdge {
    pub from: Endpoint,
    pub to: Endpoint,
    /// 1 for edges leaving the root.
    pub level: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BroadcastTree {
    /// A GFS-sourced broadcast first reads into this relay.
    pub relay: Option<Endpoint>,
    pub edges: Vec<TreeEdge>,
    pub depth: u32,
}

impl BroadcastTree {
    /// Edges whose sender is `from`.
    pub fn children_of(&self, from: Endpoint) -> impl Iterator<Item = &TreeEdge> + '_ {
        self.edges.iter().filter(move |e| e.from == from)
    }
}

/// Broadcast tree over `destinations` with out-degree at most `fanout`.
/// A GFS source is read once into a utility-node relay which roots the
/// tree; a node source roots it directly.
pub fn plan_broadcast(source: Endpoint, destinations: &[NodeId], fanout: u32) -> BroadcastTree {
    let f = fanout.max(2) as usize;
    let mut dests: Vec<NodeId> = destinations.to_vec();
    dests.sort();
    dests.dedup();
    if let Endpoint::Node(src) = source {
        dests.retain(|d| *d != src);
    }
    let root = match source {
        Endpoint::Gfs | Endpoint::Ifs => Endpoint::Relay(0),
        other => other,
    };
    let relay = matches!(source, Endpoint::Gfs | Endpoint::Ifs).then_some(root);
    let mut edges = Vec::with_capacity(dests.len());
    let mut levels = vec![0u32; dests.len()];
    for i in 0..dests.len() {
        let (from, level) = if i < f {
            (root, 1)
        } else {
            let p = (i - f) / f;
            (Endpoint::Node(dests[p]), levels[p] + 1)
        };
        levels[i] = level;
        edges.push(TreeEdge { from, to: Endpoint::Node(dests[i]), level });
    }
    let depth = levels.iter().copied().max().unwrap_or(0);
    BroadcastTree { relay, edges, depth }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReductionTree {
    pub edges: Vec<TreeEdge>,
    pub depth: u32,
    pub sink_in_degree: usize,
}

/// Combining tree from `sources` into `sink`. Each round groups survivors
/// by `fanout`, the first member of a group combining the rest; once at most
/// `fanout` partials remain they go to the sink. Non-combinable gathers get
/// a star.
pub fn plan_reduction(sources: &[NodeId], sink: NodeId, fanout: u32, combinable: bool) -> ReductionTree {
    let mut live: Vec<NodeId> = sources.to_vec();
    live.sort();
    live.dedup();
    let f = fanout.max(2) as usize;
    let mut edges = Vec::new();
    if !combinable {
        let edges: Vec<TreeEdge> = live
            .iter()
            .map(|s| TreeEdge { from: Endpoint::Node(*s), to: Endpoint::Node(sink), level: 1 })
            .collect();
        let n = edges.len();
        return ReductionTree { edges, depth: u32::from(n > 0), sink_in_degree: n };
    }
    let mut level = 0;
    while live.len() > f {
        level += 1;
        let mut next = Vec::with_capacity(live.len().div_ceil(f));
        for group in live.chunks(f) {
            for s in &group[1..] {
                edges.push(TreeEdge { from: Endpoint::Node(*s), to: Endpoint::Node(group[0]), level });
            }
            next.push(group[0]);
        }
        live = next;
    }
    if !live.is_empty() {
        level += 1;
    }
    for s in &live {
        edges.push(TreeEdge { from: Endpoint::Node(*s), to: Endpoint::Node(sink), level });
    }
    ReductionTree { edges, depth: level, sink_in_degree: live.len() }
}

/// Where one missing input will come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Cached,
    Peer(NodeId),
    Ifs,
    Gfs,
    /// Start a tree broadcast from the GFS.
    Broadcast,
    /// Nowhere: the producer must run again.
    Regenerate,
}

impl Source {
    pub fn route(self) -> Option<Route> {
        match self {
            Source::Peer(_) => Some(Route::NodeToNode),
            Source::Ifs => Some(Route::IfsRead),
            Source::Gfs | Source::Broadcast => Some(Route::GfsRead),
            Source::Cached | Source::Regenerate => None,
        }
    }
}

/// Holder with the fewest active outgoing transfers, ties by node id.
pub fn nearest_holder(holders: &BTreeSet<NodeId>, exclude: NodeId, link_load: impl Fn(NodeId) -> usize) -> Option<NodeId> {
    holders.iter().copied().filter(|h| *h != exclude).min_by_key(|h| (link_load(*h), *h))
}

/// Source choice for one input at `node`, in priority order: local cache,
/// preferred peer, IFS, GFS, any peer, regeneration.
pub fn choose_source(
    data: &DataRef,
    node: NodeId,
    cached: bool,
    loc: &Location,
    policy: &DataPolicy,
    link_load: impl Fn(NodeId) -> usize,
) -> Source {
    if cached {
        return Source::Cached;
    }
    let peer = nearest_holder(&loc.nodes, node, &link_load);
    let broadcast = data.kind == DataKind::CommonInput && policy.common_input == CommonInputPolicy::PushBroadcast;
    let p2p = data.kind == DataKind::Intermediate && policy.intermediate == IntermediatePolicy::PeerToPeer;
    if p2p || broadcast {
        if let Some(p) = peer {
            return Source::Peer(p);
        }
    }
    if broadcast && loc.gfs {
        return Source::Broadcast;
    }
    if loc.ifs.is_some() {
        return Source::Ifs;
    }
    if loc.gfs {
        return Source::Gfs;
    }
    match peer {
        Some(p) => Source::Peer(p),
        None => Source::Regenerate,
    }
}

/// One planned stage-in transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageStep {
    pub data: DataId,
    pub bytes: u64,
    pub source: Source,
}

/// Stage-in plan for a task's inputs at `node`. Cache hits yield no step.
pub fn stage_in(
    inputs: &[DataRef],
    node: NodeId,
    is_cached: impl Fn(DataId) -> bool,
    dir: &mut LocationDirectory,
    policy: &DataPolicy,
    link_load: impl Fn(NodeId) -> usize,
) -> Result<Vec<StageStep>, DataError> {
    let mut plan = Vec::new();
    for d in inputs {
        if is_cached(d.id) {
            continue;
        }
        let loc = match dir.locate(d.id) {
            Ok(l) => l,
            Err(DataError::UnknownData(_)) if !d.kind.is_input() => Location::default(),
            Err(e) => return Err(e),
        };
        let source = choose_source(d, node, false, &loc, policy, &link_load);
        plan.push(StageStep { data: d.id, bytes: d.size, source });
    }
    Ok(plan)
}

/// What happens to a task's output when the task finishes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputAction {
    /// Stays in local storage only.
    Local,
    /// Written to GFS while the worker waits.
    SyncGfs,
    /// Written to the IFS while the worker waits.
    SyncIfs,
    /// Pinned locally, flushed to GFS by the next batch.
    Deferred,
}

/// Output handling for one produced item. `group_local` marks an
/// intermediate consumed only inside its producer's pipeline group.
pub fn write_output(data: &DataRef, group_local: bool, policy: &DataPolicy, ifs_enabled: bool) -> OutputAction {
    if data.size == 0 {
        return OutputAction::Local;
    }
    match data.kind {
        DataKind::Intermediate if group_local => OutputAction::Local,
        DataKind::Intermediate => match policy.intermediate {
            IntermediatePolicy::PeerToPeer => OutputAction::Local,
            IntermediatePolicy::Ifs if ifs_enabled => OutputAction::SyncIfs,
            _ => match policy.output {
                OutputPolicy::Synchronized => OutputAction::SyncGfs,
                OutputPolicy::Collective => OutputAction::Deferred,
            },
        },
        _ => match policy.output {
            OutputPolicy::Synchronized => OutputAction::SyncGfs,
            OutputPolicy::Collective => OutputAction::Deferred,
        },
    }
}
