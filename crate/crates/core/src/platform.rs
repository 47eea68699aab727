//! The simulated machine: nodes with LRU local caches, a shared global file
//! system, an optional intermediate file system, point-to-point links, and
//! block-granular allocation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::DataRef;
use crate::ids::{BlockId, DataId, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlatformError {
    #[error("invalid platform: {0}")]
    Invalid(String),
    #[error("object of {size} bytes exceeds cache capacity {capacity}")]
    ObjectLargerThanCache { size: u64, capacity: u64 },
    #[error("cache cannot fit {size} bytes without evicting pinned entries")]
    PinnedFull { size: u64 },
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PlatformSpec {
    pub node_count: u32,
    pub block_granularity: u32,
    #[serde(default = "one")]
    pub cores_per_node: u32,
    pub local_storage_bytes: u64,
    pub gfs_bandwidth_bytes_per_sec: f64,
    #[serde(default)]
    pub gfs_latency_sec: f64,
    pub node_link_bandwidth_bytes_per_sec: f64,
    #[serde(default)]
    pub ifs_enabled: bool,
    #[serde(default)]
    pub ifs_bandwidth_bytes_per_sec: f64,
    #[serde(default)]
    pub ifs_latency_sec: f64,
    #[serde(default)]
    pub utility_node_count: u32,
}

impl PlatformSpec {
    /// Generic machine of `nodes` nodes allocated in blocks of `granularity`.
    pub fn with_granularity(nodes: u32, granularity: u32) -> Self {
        Self {
            node_count: nodes,
            block_granularity: granularity,
            cores_per_node: 1,
            local_storage_bytes: 2 * 1024 * 1024 * 1024,
            gfs_bandwidth_bytes_per_sec: 1e10,
            gfs_latency_sec: 0.0,
            node_link_bandwidth_bytes_per_sec: 1e9,
            ifs_enabled: false,
            ifs_bandwidth_bytes_per_sec: 0.0,
            ifs_latency_sec: 0.0,
            utility_node_count: 1,
        }
    }

    /// Named presets for the three granularities in common use: one node,
    /// a 32-node block and a 64-node block.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "granularity-1" | "ranger-like" => Some(Self::with_granularity(4096, 1)),
            "granularity-32" | "bgl-like" => Some(Self::with_granularity(4096, 32)),
            "granularity-64" | "bgp-like" => Some(Self::with_granularity(4096, 64)),
            _ => None,
        }
    }

    pub fn block_count(&self) -> u32 {
        self.node_count / self.block_granularity
    }

    pub fn total_cores(&self) -> u64 {
        u64::from(self.node_count) * u64::from(self.cores_per_node)
    }

    pub fn validate(&self) -> Result<(), PlatformError> {
        let bad = |m: &str| Err(PlatformError::Invalid(m.to_string()));
        if self.block_granularity == 0 || self.node_count == 0 {
            return bad("node-count and block-granularity must be positive");
        }
        if !self.node_count.is_multiple_of(self.block_granularity) {
            return bad("node-count must be a multiple of block-granularity");
        }
        if self.cores_per_node == 0 {
            return bad("cores-per-node must be positive");
        }
        if self.local_storage_bytes == 0 {
            return bad("local-storage-bytes must be positive");
        }
        if !(self.gfs_bandwidth_bytes_per_sec > 0.0) || !(self.node_link_bandwidth_bytes_per_sec > 0.0) {
            return bad("bandwidths must be positive");
        }
        if self.ifs_enabled && !(self.ifs_bandwidth_bytes_per_sec > 0.0) {
            return bad("ifs-bandwidth-bytes-per-sec must be positive when the IFS is enabled");
        }
        if !(self.gfs_latency_sec >= 0.0) || !(self.ifs_latency_sec >= 0.0) {
            return bad("latencies must be >= 0");
        }
        Ok(())
    }

    pub fn block_of(&self, node: NodeId) -> BlockId {
        BlockId(node.0 / self.block_granularity)
    }

    pub fn route_params(&self, route: Route) -> (f64, f64) {
        match route {
            Route::GfsRead | Route::GfsWrite => (self.gfs_bandwidth_bytes_per_sec, self.gfs_latency_sec),
            Route::IfsRead | Route::IfsWrite => (self.ifs_bandwidth_bytes_per_sec, self.ifs_latency_sec),
            Route::NodeToNode => (self.node_link_bandwidth_bytes_per_sec, 0.0),
        }
    }
}

/// Path a transfer takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    GfsRead,
    GfsWrite,
    NodeToNode,
    IfsRead,
    IfsWrite,
}

impl Route {
    pub const ALL: [Route; 5] = [Route::GfsRead, Route::GfsWrite, Route::NodeToNode, Route::IfsRead, Route::IfsWrite];

    /// Shared routes split their aggregate bandwidth among concurrent users.
    pub fn is_shared(self) -> bool {
        !matches!(self, Route::NodeToNode)
    }

    /// Which bandwidth pool a shared route draws from.
    pub fn pool(self) -> Option<Pool> {
        match self {
            Route::GfsRead | Route::GfsWrite => Some(Pool::Gfs),
            Route::IfsRead | Route::IfsWrite => Some(Pool::Ifs),
            Route::NodeToNode => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Route::GfsRead => "gfs-read",
            Route::GfsWrite => "gfs-write",
            Route::NodeToNode => "node-to-node",
            Route::IfsRead => "ifs-read",
            Route::IfsWrite => "ifs-write",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Route {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Route::ALL.iter().copied().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown route `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pool {
    Gfs,
    Ifs,
}

/// Duration of one transfer given how many transfers share its route:
/// `latency + size / (bandwidth / max(1, load))`, links unshared.
pub fn transfer_time(spec: &PlatformSpec, size: u64, route: Route, concurrent_load: usize) -> f64 {
    let (bw, latency) = spec.route_params(route);
    if size == 0 {
        return latency;
    }
    let share = if route.is_shared() { concurrent_load.max(1) as f64 } else { 1.0 };
    latency + size as f64 / (bw / share)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheLookup {
    Hit,
    Miss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    size: u64,
    stamp: u64,
}

/// Byte-bounded LRU cache with pinning. Pinned entries are never evicted.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeCache {
    capacity: u64,
    used: u64,
    entries: BTreeMap<DataId, CacheEntry>,
    recency: BTreeMap<u64, DataId>,
    pins: BTreeMap<DataId, u32>,
    next_stamp: u64,
}

impl NodeCache {
    pub fn new(capacity: u64) -> Self {
        Self { capacity, ..Self::default() }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: DataId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn resident(&self) -> impl Iterator<Item = DataId> + '_ {
        self.entries.keys().copied()
    }

    pub fn is_pinned(&self, id: DataId) -> bool {
        self.pins.contains_key(&id)
    }

    fn touch(&mut self, id: DataId) {
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        if let Some(e) = self.entries.get_mut(&id) {
            self.recency.remove(&e.stamp);
            e.stamp = stamp;
            self.recency.insert(stamp, id);
        }
    }

    /// Lookup that refreshes recency on a hit.
    pub fn get(&mut self, id: DataId) -> CacheLookup {
        if self.entries.contains_key(&id) {
            self.touch(id);
            CacheLookup::Hit
        } else {
            CacheLookup::Miss
        }
    }

    /// Inserts `data`, evicting least-recently-used unpinned entries until it
    /// fits. Returns the evicted ids. Nothing changes on error.
    pub fn put(&mut self, data: &DataRef) -> Result<Vec<DataId>, PlatformError> {
        if data.size > self.capacity {
            return Err(PlatformError::ObjectLargerThanCache { size: data.size, capacity: self.capacity });
        }
        if self.entries.contains_key(&data.id) {
            self.touch(data.id);
            return Ok(Vec::new());
        }
        let evictable: u64 = self
            .entries
            .iter()
            .filter(|(id, _)| !self.pins.contains_key(id))
            .map(|(_, e)| e.size)
            .sum();
        if self.used - evictable + data.size > self.capacity {
            return Err(PlatformError::PinnedFull { size: data.size });
        }
        let mut evicted = Vec::new();
        while self.used + data.size > self.capacity {
            let victim = self
                .recency
                .values()
                .copied()
                .find(|id| !self.pins.contains_key(id))
                .expect("feasibility checked");
            self.remove(victim);
            evicted.push(victim);
        }
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        self.entries.insert(data.id, CacheEntry { size: data.size, stamp });
        self.recency.insert(stamp, data.id);
        self.used += data.size;
        Ok(evicted)
    }

    pub fn remove(&mut self, id: DataId) -> bool {
        match self.entries.remove(&id) {
            Some(e) => {
                self.recency.remove(&e.stamp);
                self.used -= e.size;
                self.pins.remove(&id);
                true
            }
            None => false,
        }
    }

    pub fn pin(&mut self, id: DataId) {
        if self.entries.contains_key(&id) {
            *self.pins.entry(id).or_insert(0) += 1;
        }
    }

    pub fn unpin(&mut self, id: DataId) {
        if let Some(n) = self.pins.get_mut(&id) {
            *n -= 1;
            if *n == 0 {
                self.pins.remove(&id);
            }
        }
    }

    /// Drops every entry; returns what was resident.
    pub fn clear(&mut self) -> Vec<DataId> {
        let ids: Vec<DataId> = self.entries.keys().copied().collect();
        self.entries.clear();
        self.recency.clear();
        self.pins.clear();
        self.used = 0;
        ids
    }
}

/// Free functions mirroring the node cache operations.
pub fn cache_get(cache: &mut NodeCache, id: DataId) -> CacheLookup {
    cache.get(id)
}

pub fn cache_put(cache: &mut NodeCache, data: &DataRef) -> Result<Vec<DataId>, PlatformError> {
    cache.put(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub id: NodeId,
    pub block: BlockId,
    pub cache: NodeCache,
    pub allocated: bool,
    /// False while crashed or rebooting.
    pub up: bool,
    /// Permanently removed for the rest of the run.
    pub lost: bool,
}

impl NodeState {
    pub fn usable(&self) -> bool {
        self.allocated && self.up && !self.lost
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationBlock {
    pub id: BlockId,
    pub nodes: Vec<NodeId>,
    pub granted_at: Option<f64>,
    pub released_at: Option<f64>,
}

impl AllocationBlock {
    pub fn is_allocated(&self) -> bool {
        self.granted_at.is_some() && self.released_at.is_none()
    }
}

/// Machine state: every node and block, allocated or not.
#[derive(Clone, Debug)]
pub struct Platform {
    pub spec: PlatformSpec,
    pub nodes: Vec<NodeState>,
    pub blocks: Vec<AllocationBlock>,
}

impl Platform {
    pub fn new(spec: PlatformSpec) -> Result<Self, PlatformError> {
        spec.validate()?;
        let g = spec.block_granularity;
        let nodes = (0..spec.node_count)
            .map(|n| NodeState {
                id: NodeId(n),
                block: BlockId(n / g),
                cache: NodeCache::new(spec.local_storage_bytes),
                allocated: false,
                up: true,
                lost: false,
            })
            .collect();
        let blocks = (0..spec.block_count())
            .map(|b| AllocationBlock {
                id: BlockId(b),
                nodes: (b * g..(b + 1) * g).map(NodeId).collect(),
                granted_at: None,
                released_at: None,
            })
            .collect();
        Ok(Self { spec, nodes, blocks })
    }

    pub fn node(&self, id: NodeId) -> &NodeState {
        &self.nodes[id.0 as usize]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut NodeState {
        &mut self.nodes[id.0 as usize]
    }

    pub fn allocated_nodes(&self) -> u32 {
        self.nodes.iter().filter(|n| n.allocated).count() as u32
    }

    /// Blocks available for a new grant: never granted, or granted and
    /// released (a block can be re-granted after release).
    pub fn free_blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.blocks
            .iter()
            .filter(|b| !b.is_allocated())
            .filter(|b| b.nodes.iter().any(|n| !self.node(*n).lost))
            .map(|b| b.id)
    }

    pub fn free_nodes(&self) -> u32 {
        self.free_blocks().count() as u32 * self.spec.block_granularity
    }

    pub fn allocated_blocks(&self) -> impl Iterator<Item = &AllocationBlock> + '_ {
        self.blocks.iter().filter(|b| b.is_allocated())
    }

    /// Grants the lowest-numbered free blocks covering `nodes` nodes.
    pub fn grant(&mut self, nodes: u32, now: f64) -> Vec<BlockId> {
        let want = nodes.div_ceil(self.spec.block_granularity) as usize;
        let chosen: Vec<BlockId> = self.free_blocks().take(want).collect();
        for b in &chosen {
            let block = &mut self.blocks[b.0 as usize];
            block.granted_at = Some(now);
            block.released_at = None;
            for n in block.nodes.clone() {
                let node = &mut self.nodes[n.0 as usize];
                node.allocated = true;
                node.up = true;
            }
        }
        chosen
    }

    /// Releases a block whole and erases its nodes' local storage.
    pub fn release(&mut self, block: BlockId, now: f64) -> Vec<(NodeId, Vec<DataId>)> {
        let b = &mut self.blocks[block.0 as usize];
        b.released_at = Some(now);
        let mut erased = Vec::new();
        for n in b.nodes.clone() {
            let node = &mut self.nodes[n.0 as usize];
            node.allocated = false;
            erased.push((n, node.cache.clear()));
        }
        erased
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DataKind;

    fn spec() -> PlatformSpec {
        let mut s = PlatformSpec::with_granularity(4, 1);
        s.gfs_bandwidth_bytes_per_sec = 1e9;
        s
    }

    #[test]
    fn transfer_time_examples() {
        let s = spec();
        assert_eq!(transfer_time(&s, 0, Route::GfsRead, 1), 0.0);
        assert_eq!(transfer_time(&s, 1_000_000_000, Route::GfsRead, 1), 1.0);
        assert_eq!(transfer_time(&s, 1_000_000_000, Route::GfsRead, 2), 2.0);
        // links are unshared
        assert_eq!(transfer_time(&s, 1_000_000_000, Route::NodeToNode, 8), 1.0);
        let mut lat = s.clone();
        lat.gfs_latency_sec = 0.5;
        assert_eq!(transfer_time(&lat, 0, Route::GfsWrite, 1), 0.5);
    }

    #[test]
    fn cache_lru_examples() {
        let mut c = NodeCache::new(100);
        assert_eq!(cache_get(&mut c, DataId(1)), CacheLookup::Miss);
        let a = DataRef::new(1, 50, DataKind::UniqueInput);
        let b = DataRef::new(2, 50, DataKind::UniqueInput);
        let cc = DataRef::new(3, 50, DataKind::UniqueInput);
        assert!(cache_put(&mut c, &a).unwrap().is_empty());
        assert_eq!(cache_get(&mut c, DataId(1)), CacheLookup::Hit);
        cache_put(&mut c, &b).unwrap();
        // A is older than B after the refresh of B's insert.
        assert_eq!(cache_put(&mut c, &cc).unwrap(), vec![DataId(1)]);
        assert_eq!(cache_get(&mut c, DataId(1)), CacheLookup::Miss);
    }

    #[test]
    fn cache_put_examples() {
        let mut c = NodeCache::new(100);
        cache_put(&mut c, &DataRef::new(1, 60, DataKind::UniqueInput)).unwrap();
        assert_eq!(cache_put(&mut c, &DataRef::new(2, 60, DataKind::UniqueInput)).unwrap(), vec![DataId(1)]);
        assert_eq!(
            cache_put(&mut c, &DataRef::new(3, 101, DataKind::UniqueInput)),
            Err(PlatformError::ObjectLargerThanCache { size: 101, capacity: 100 })
        );
    }

    #[test]
    fn pinned_entries_survive() {
        let mut c = NodeCache::new(100);
        cache_put(&mut c, &DataRef::new(1, 60, DataKind::UniqueInput)).unwrap();
        c.pin(DataId(1));
        assert_eq!(
            cache_put(&mut c, &DataRef::new(2, 60, DataKind::UniqueInput)),
            Err(PlatformError::PinnedFull { size: 60 })
        );
        assert!(c.contains(DataId(1)));
        c.unpin(DataId(1));
        assert_eq!(cache_put(&mut c, &DataRef::new(2, 60, DataKind::UniqueInput)).unwrap(), vec![DataId(1)]);
    }

    #[test]
    fn platform_validation() {
        let mut s = PlatformSpec::with_granularity(100, 64);
        assert!(s.validate().is_err());
        s.node_count = 128;
        assert!(s.validate().is_ok());
        for g in [1, 32, 64] {
            let p = PlatformSpec::preset(&format!("granularity-{g}")).unwrap();
            assert_eq!(p.block_granularity, g);
            assert!(p.validate().is_ok());
        }
    }

    #[test]
    fn grant_and_release_whole_blocks() {
        let mut p = Platform::new(PlatformSpec::with_granularity(128, 64)).unwrap();
        assert_eq!(p.grant(65, 0.0), vec![BlockId(0), BlockId(1)]);
        assert_eq!(p.allocated_nodes(), 128);
        p.node_mut(NodeId(3)).cache.put(&DataRef::new(1, 10, DataKind::UniqueInput)).unwrap();
        let erased = p.release(BlockId(0), 5.0);
        assert_eq!(erased.len(), 64);
        assert!(!p.node(NodeId(3)).cache.contains(DataId(1)));
        assert_eq!(p.allocated_nodes(), 64);
        assert_eq!(p.free_blocks().collect::<Vec<_>>(), vec![BlockId(0)]);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::graph::DataKind;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn transfer_time_monotone_in_load(size in 0u64..10_000_000_000, load in 0usize..64) {
            let s = PlatformSpec::with_granularity(4, 1);
            for route in Route::ALL {
                prop_assert!(transfer_time(&s, size, route, load) <= transfer_time(&s, size, route, load + 1));
            }
        }

        #[test]
        fn cache_never_exceeds_capacity(ops in prop::collection::vec((0u64..20, 1u64..60, any::<bool>()), 1..80)) {
            let mut c = NodeCache::new(100);
            for (id, size, pin) in ops {
                let _ = c.put(&DataRef::new(id, size, DataKind::UniqueInput));
                if pin { c.pin(DataId(id)); } else { c.unpin(DataId(id)); }
                prop_assert!(c.used() <= c.capacity());
            }
        }
    }
}
