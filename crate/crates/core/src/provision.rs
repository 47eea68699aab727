//! Resource provisioning: static versus dynamic acquisition, request growth
//! sequences, block-granularity rounding and idle release.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::BlockId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProvisionError {
    #[error("request of {requested} nodes exceeds machine size {machine}")]
    RequestExceedsMachine { requested: u32, machine: u32 },
    #[error("requests must be for at least one node")]
    EmptyRequest,
    #[error("invalid provisioning policy: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProvisionMode {
    #[default]
    Static,
    Dynamic,
}

/// Request-size sequence, in blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", rename_all_fields = "kebab-case", deny_unknown_fields)]
pub enum Growth {
    Constant { step_blocks: u32 },
    Arithmetic { start_blocks: u32, delta_blocks: u32 },
    Geometric { start_blocks: u32, ratio: f64 },
}

impl Default for Growth {
    fn default() -> Self {
        Growth::Constant { step_blocks: 1 }
    }
}

impl Growth {
    /// Term `k` (zero-based) of the sequence, in whole blocks.
    pub fn term(&self, k: u32) -> u32 {
        match *self {
            Growth::Constant { step_blocks } => step_blocks,
            Growth::Arithmetic { start_blocks, delta_blocks } => start_blocks.saturating_add(k.saturating_mul(delta_blocks)),
            Growth::Geometric { start_blocks, ratio } => {
                let v = f64::from(start_blocks) * ratio.powi(k as i32);
                if v >= f64::from(u32::MAX) {
                    u32::MAX
                } else {
                    v.ceil() as u32
                }
            }
        }
    }

    fn validate(&self) -> Result<(), ProvisionError> {
        let ok = match *self {
            Growth::Constant { step_blocks } => step_blocks >= 1,
            Growth::Arithmetic { start_blocks, .. } => start_blocks >= 1,
            Growth::Geometric { start_blocks, ratio } => start_blocks >= 1 && ratio > 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ProvisionError::Invalid("growth needs step/start >= 1 and ratio > 1".into()))
        }
    }
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ProvisionPolicy {
    #[serde(default)]
    pub mode: ProvisionMode,
    /// Node count requested once at start in static mode.
    #[serde(default)]
    pub static_nodes: Option<u32>,
    #[serde(default)]
    pub growth: Growth,
    #[serde(default)]
    pub idle_release_after_sec: f64,
    #[serde(default = "one")]
    pub max_outstanding_requests: u32,
    #[serde(default)]
    pub allow_partial_release: bool,
    /// Batch-queue wait before a request is granted.
    #[serde(default)]
    pub grant_wait_sec: f64,
    /// Fixed cost added to every request.
    #[serde(default)]
    pub request_overhead_sec: f64,
}

impl Default for ProvisionPolicy {
    fn default() -> Self {
        Self {
            mode: ProvisionMode::Static,
            static_nodes: None,
            growth: Growth::default(),
            idle_release_after_sec: 0.0,
            max_outstanding_requests: 1,
            allow_partial_release: false,
            grant_wait_sec: 0.0,
            request_overhead_sec: 0.0,
        }
    }
}

impl ProvisionPolicy {
    pub fn static_nodes(nodes: u32) -> Self {
        Self { mode: ProvisionMode::Static, static_nodes: Some(nodes), ..Self::default() }
    }

    pub fn dynamic(growth: Growth, partial_release: bool) -> Self {
        Self { mode: ProvisionMode::Dynamic, growth, allow_partial_release: partial_release, ..Self::default() }
    }

    pub fn validate(&self, machine_nodes: u32) -> Result<(), ProvisionError> {
        self.growth.validate()?;
        if !(self.idle_release_after_sec >= 0.0) || !(self.grant_wait_sec >= 0.0) || !(self.request_overhead_sec >= 0.0) {
            return Err(ProvisionError::Invalid("durations must be >= 0".into()));
        }
        if self.max_outstanding_requests == 0 {
            return Err(ProvisionError::Invalid("max-outstanding-requests must be >= 1".into()));
        }
        if self.mode == ProvisionMode::Static {
            let n = self.static_nodes.ok_or_else(|| ProvisionError::Invalid("static mode needs static-nodes".into()))?;
            if n == 0 {
                return Err(ProvisionError::EmptyRequest);
            }
            if n > machine_nodes {
                return Err(ProvisionError::RequestExceedsMachine { requested: n, machine: machine_nodes });
            }
        }
        Ok(())
    }
}

/// Smallest multiple of `granularity` that covers `requested`, capped at
/// the machine size.
pub fn round_to_granularity(requested: u32, granularity: u32, machine_nodes: u32) -> Result<u32, ProvisionError> {
    if requested == 0 {
        return Err(ProvisionError::EmptyRequest);
    }
    if requested > machine_nodes {
        return Err(ProvisionError::RequestExceedsMachine { requested, machine: machine_nodes });
    }
    Ok((requested.div_ceil(granularity) * granularity).min(machine_nodes))
}

/// Snapshot of demand and supply the provisioner decides on.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Demand {
    /// Ready tasks not yet bound to a worker.
    pub ready: usize,
    /// Idle worker slots (cores) already allocated.
    pub idle_workers: usize,
    /// Allocated nodes plus nodes in outstanding requests.
    pub committed_nodes: u32,
    pub outstanding_requests: u32,
}

/// Provisioning state machine: the growth cursor and the static latch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provisioner {
    pub policy: ProvisionPolicy,
    pub granularity: u32,
    pub machine_nodes: u32,
    pub cores_per_node: u32,
    cursor: u32,
    static_requested: bool,
}

impl Provisioner {
    pub fn new(policy: ProvisionPolicy, granularity: u32, machine_nodes: u32, cores_per_node: u32) -> Self {
        Self { policy, granularity, machine_nodes, cores_per_node, cursor: 0, static_requested: false }
    }

    pub fn cursor(&self) -> u32 {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: u32) {
        self.cursor = cursor;
    }

    /// Switches to a fixed allocation, e.g. after a tail chop.
    pub fn freeze(&mut self) {
        self.policy.mode = ProvisionMode::Static;
        self.static_requested = true;
    }

    /// Node count of the next request, if one should be made now.
    pub fn next_request(&mut self, demand: Demand) -> Option<u32> {
        match self.policy.mode {
            ProvisionMode::Static => {
                if self.static_requested {
                    return None;
                }
                self.static_requested = true;
                let n = self.policy.static_nodes.unwrap_or(self.machine_nodes);
                round_to_granularity(n, self.granularity, self.machine_nodes).ok()
            }
            ProvisionMode::Dynamic => {
                if demand.ready == 0 {
                    self.cursor = 0;
                    return None;
                }
                if demand.ready <= demand.idle_workers {
                    return None;
                }
                if demand.outstanding_requests >= self.policy.max_outstanding_requests {
                    return None;
                }
                let remaining = self.machine_nodes.saturating_sub(demand.committed_nodes);
                let remaining = remaining / self.granularity * self.granularity;
                if remaining == 0 {
                    return None;
                }
                let term = self.policy.growth.term(self.cursor).saturating_mul(self.granularity);
                let unmet = (demand.ready - demand.idle_workers) as u64;
                let need_nodes = unmet.div_ceil(u64::from(self.cores_per_node)).min(u64::from(u32::MAX)) as u32;
                let need = need_nodes.div_ceil(self.granularity).saturating_mul(self.granularity);
                self.cursor += 1;
                Some(term.min(need).min(remaining))
            }
        }
    }
}

/// Per-block idleness as seen by the release rule.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockIdleness {
    pub id: BlockId,
    /// For each member node, since when it has been idle (`None`: busy).
    pub idle_since: Vec<Option<f64>>,
    /// Blocks holding data that must not be erased yet.
    pub retained: bool,
}

impl BlockIdleness {
    fn idle_for(&self, now: f64) -> Option<f64> {
        let mut latest = f64::NEG_INFINITY;
        for s in &self.idle_since {
            latest = latest.max((*s)?);
        }
        Some(now - latest)
    }
}

/// Blocks to release now. With partial release any block idle long enough
/// goes; otherwise only the whole allocation, once every node is idle.
pub fn release_idle(blocks: &[BlockIdleness], now: f64, policy: &ProvisionPolicy) -> Vec<BlockId> {
    let threshold = policy.idle_release_after_sec;
    if policy.allow_partial_release {
        blocks
            .iter()
            .filter(|b| !b.retained && b.idle_for(now).is_some_and(|t| t >= threshold))
            .map(|b| b.id)
            .collect()
    } else {
        let all = !blocks.is_empty()
            && blocks.iter().all(|b| !b.retained && b.idle_for(now).is_some_and(|t| t >= threshold));
        if all {
            blocks.iter().map(|b| b.id).collect()
        } else {
            Vec::new()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_examples() {
        assert_eq!(round_to_granularity(100, 64, 4096), Ok(128));
        assert_eq!(round_to_granularity(1, 32, 4096), Ok(32));
        assert_eq!(round_to_granularity(17, 1, 4096), Ok(17));
        assert_eq!(round_to_granularity(100, 64, 100), Ok(100));
        assert_eq!(
            round_to_granularity(5000, 64, 4096),
            Err(ProvisionError::RequestExceedsMachine { requested: 5000, machine: 4096 })
        );
    }

    #[test]
    fn static_requests_once() {
        let mut p = Provisioner::new(ProvisionPolicy::static_nodes(256), 64, 4096, 1);
        let d = Demand { ready: 1000, ..Demand::default() };
        assert_eq!(p.next_request(d), Some(256));
        for _ in 0..5 {
            assert_eq!(p.next_request(d), None);
        }
    }

    #[test]
    fn geometric_growth_under_sustained_demand() {
        let policy = ProvisionPolicy {
            max_outstanding_requests: 100,
            ..ProvisionPolicy::dynamic(Growth::Geometric { start_blocks: 1, ratio: 2.0 }, true)
        };
        let mut p = Provisioner::new(policy, 32, 1 << 20, 1);
        let mut committed = 0;
        let mut blocks = Vec::new();
        for _ in 0..4 {
            let d = Demand { ready: 1_000_000, idle_workers: 0, committed_nodes: committed, outstanding_requests: 0 };
            let n = p.next_request(d).unwrap();
            committed += n;
            blocks.push(n / 32);
        }
        assert_eq!(blocks, vec![1, 2, 4, 8]);
    }

    #[test]
    fn no_demand_no_request_and_cursor_resets() {
        let mut p = Provisioner::new(ProvisionPolicy::dynamic(Growth::Arithmetic { start_blocks: 1, delta_blocks: 1 }, true), 1, 100, 1);
        assert_eq!(p.next_request(Demand { ready: 0, ..Demand::default() }), None);
        let d = Demand { ready: 1000, ..Demand::default() };
        assert_eq!(p.next_request(d), Some(1));
        assert_eq!(p.next_request(Demand { committed_nodes: 1, ..d }), Some(2));
        assert_eq!(p.next_request(Demand { ready: 0, ..d }), None);
        assert_eq!(p.cursor(), 0);
        assert_eq!(p.next_request(d), Some(1));
    }

    #[test]
    fn dynamic_respects_outstanding_and_machine() {
        let mut p = Provisioner::new(ProvisionPolicy::dynamic(Growth::Constant { step_blocks: 4 }, true), 64, 128, 1);
        let d = Demand { ready: 1000, idle_workers: 0, committed_nodes: 0, outstanding_requests: 1 };
        assert_eq!(p.next_request(d), None);
        assert_eq!(p.next_request(Demand { outstanding_requests: 0, ..d }), Some(128));
        assert_eq!(p.next_request(Demand { outstanding_requests: 0, committed_nodes: 128, ..d }), None);
        // Demand already covered by idle workers.
        assert_eq!(p.next_request(Demand { ready: 3, idle_workers: 3, ..Demand::default() }), None);
    }

    fn block(id: u32, idle: &[Option<f64>]) -> BlockIdleness {
        BlockIdleness { id: BlockId(id), idle_since: idle.to_vec(), retained: false }
    }

    #[test]
    fn release_examples() {
        let partial = ProvisionPolicy { idle_release_after_sec: 300.0, ..ProvisionPolicy::dynamic(Growth::default(), true) };
        let busy = [block(0, &[None, None])];
        assert!(release_idle(&busy, 1000.0, &partial).is_empty());

        let idle = vec![Some(0.0); 32];
        let blocks = [block(0, &idle), block(1, &[None; 32])];
        assert_eq!(release_idle(&blocks, 600.0, &partial), vec![BlockId(0)]);

        let whole = ProvisionPolicy { allow_partial_release: false, ..partial.clone() };
        assert!(release_idle(&blocks, 600.0, &whole).is_empty());
        let all_idle = [block(0, &idle), block(1, &idle)];
        assert_eq!(release_idle(&all_idle, 600.0, &whole), vec![BlockId(0), BlockId(1)]);
        assert!(release_idle(&all_idle, 100.0, &whole).is_empty());

        let mut retained = block(0, &idle);
        retained.retained = true;
        assert!(release_idle(&[retained], 600.0, &partial).is_empty());
    }

    #[test]
    fn policy_validation() {
        assert!(ProvisionPolicy::static_nodes(8).validate(4).is_err());
        assert!(ProvisionPolicy::dynamic(Growth::Geometric { start_blocks: 1, ratio: 1.0 }, true).validate(4).is_err());
        assert!(ProvisionPolicy { mode: ProvisionMode::Static, ..ProvisionPolicy::default() }.validate(4).is_err());
        assert!(ProvisionPolicy::static_nodes(4).validate(4).is_ok());
    }
}
