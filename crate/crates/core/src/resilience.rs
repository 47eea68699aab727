//! Failure taxonomy, retry decisions and the checkpoint file format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamgr::LocationDirectory;
use crate::graph::TaskGraph;
use crate::ids::{BlockId, DataId, NodeId, TaskId};

pub const CHECKPOINT_FORMAT: &str = "mtcsim-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResilienceError {
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unknown failure scope: {0}")]
    UnknownScope(String),
    #[error("invalid failure spec: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    Hardware,
    Os,
    Application,
    Strategic,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Hardware => "hardware",
            FailureKind::Os => "os",
            FailureKind::Application => "application",
            FailureKind::Strategic => "strategic",
        }
    }

    /// Hardware and OS failures hit a node, not the task running on it.
    pub fn is_node_level(self) -> bool {
        matches!(self, FailureKind::Hardware | FailureKind::Os)
    }
}

/// What a failure hits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Node(NodeId),
    Block(BlockId),
    Task(TaskId),
    /// Every allocated node (rate-driven failures) or the run itself.
    Run,
}

fn default_reboot() -> f64 {
    60.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FailureSpec {
    pub kind: FailureKind,
    #[serde(default)]
    pub node: Option<u32>,
    #[serde(default)]
    pub block: Option<u32>,
    #[serde(default)]
    pub task: Option<u64>,
    /// Fire once at this time.
    #[serde(default)]
    pub at_sec: Option<f64>,
    /// Poisson arrivals per node-hour over the scoped nodes.
    #[serde(default)]
    pub rate_per_node_hour: Option<f64>,
    #[serde(default)]
    pub permanent: bool,
    /// Downtime of a transient node failure.
    #[serde(default = "default_reboot")]
    pub reboot_sec: f64,
}

impl FailureSpec {
    pub fn at(kind: FailureKind, at_sec: f64) -> Self {
        Self {
            kind,
            node: None,
            block: None,
            task: None,
            at_sec: Some(at_sec),
            rate_per_node_hour: None,
            permanent: false,
            reboot_sec: default_reboot(),
        }
    }

    pub fn on_node(mut self, node: u32) -> Self {
        self.node = Some(node);
        self
    }

    pub fn on_task(mut self, task: u64) -> Self {
        self.task = Some(task);
        self
    }

    pub fn permanent(mut self) -> Self {
        self.permanent = true;
        self
    }

    pub fn scope(&self) -> Scope {
        if let Some(t) = self.task {
            Scope::Task(TaskId(t))
        } else if let Some(n) = self.node {
            Scope::Node(NodeId(n))
        } else if let Some(b) = self.block {
            Scope::Block(BlockId(b))
        } else {
            Scope::Run
        }
    }

    pub fn validate(&self) -> Result<(), ResilienceError> {
        let bad = |m: &str| Err(ResilienceError::Invalid(m.to_string()));
        match (self.at_sec, self.rate_per_node_hour) {
            (Some(t), None) if t >= 0.0 => {}
            (None, Some(r)) if r >= 0.0 => {}
            (Some(_), Some(_)) => return bad("give either at-sec or rate-per-node-hour, not both"),
            (None, None) => return bad("one of at-sec or rate-per-node-hour is required"),
            _ => return bad("times and rates must be >= 0"),
        }
        if !(self.reboot_sec >= 0.0) {
            return bad("reboot-sec must be >= 0");
        }
        if self.kind == FailureKind::Application && self.task.is_none() && self.node.is_none() {
            return bad("application failures need a task or node scope");
        }
        Ok(())
    }
}

fn three() -> u32 {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ResiliencePolicy {
    #[serde(default = "three")]
    pub max_retries: u32,
    /// Tasks running longer than this fail as application failures.
    #[serde(default)]
    pub kill_cap_sec: Option<f64>,
    #[serde(default)]
    pub checkpoint_every_sec: Option<f64>,
    #[serde(default)]
    pub failures: Vec<FailureSpec>,
}

impl Default for ResiliencePolicy {
    fn default() -> Self {
        Self { max_retries: 3, kill_cap_sec: None, checkpoint_every_sec: None, failures: Vec::new() }
    }
}

impl ResiliencePolicy {
    pub fn validate(&self) -> Result<(), ResilienceError> {
        if matches!(self.kill_cap_sec, Some(c) if !(c > 0.0)) {
            return Err(ResilienceError::Invalid("kill-cap-sec must be > 0".into()));
        }
        if matches!(self.checkpoint_every_sec, Some(c) if !(c > 0.0)) {
            return Err(ResilienceError::Invalid("checkpoint-every-sec must be > 0".into()));
        }
        self.failures.iter().try_for_each(FailureSpec::validate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureAction {
    /// Back to ready; `counted` says whether it used up a retry.
    Retry { counted: bool },
    /// Out of retries: fail for good and prune downstream.
    Permanent,
    /// Cut the tail now.
    Chop,
    /// Stop the run so it can be recovered from a checkpoint.
    Halt,
}

/// Recovery for a task hit by `kind` after `retries_used` counted retries.
pub fn on_failure(kind: FailureKind, retries_used: u32, max_retries: u32, chop_configured: bool) -> FailureAction {
    match kind {
        FailureKind::Hardware | FailureKind::Os => FailureAction::Retry { counted: false },
        FailureKind::Application if retries_used < max_retries => FailureAction::Retry { counted: true },
        FailureKind::Application => FailureAction::Permanent,
        FailureKind::Strategic if chop_configured => FailureAction::Chop,
        FailureKind::Strategic => FailureAction::Halt,
    }
}

/// Engine state persisted across a recovery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CheckpointBody {
    pub snapshot_time: f64,
    pub seed: u64,
    pub graph: TaskGraph,
    pub directory: LocationDirectory,
    pub provisioner_cursor: u32,
    pub pending_flush: Vec<DataId>,
    pub retries: BTreeMap<TaskId, u32>,
    pub chop_fired: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub body: CheckpointBody,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    digest: String,
    body: serde_json::Value,
}

fn digest_of(body: &CheckpointBody) -> Result<(String, serde_json::Value), serde_json::Error> {
    let value = serde_json::to_value(body)?;
    let canonical = serde_json::to_string(&value)?;
    Ok((hex::encode(Sha256::digest(canonical.as_bytes())), value))
}

impl Checkpoint {
    pub fn new(body: CheckpointBody) -> Self {
        Self { body }
    }

    /// Self-describing JSON with a SHA-256 digest over the body.
    pub fn to_json(&self) -> String {
        let (digest, body) = digest_of(&self.body).expect("checkpoint body serializes");
        let env = Envelope { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, digest, body };
        serde_json::to_string_pretty(&env).expect("envelope serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ResilienceError> {
        let corrupt = |m: String| ResilienceError::CorruptCheckpoint(m);
        let env: Envelope = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        if env.format != CHECKPOINT_FORMAT {
            return Err(corrupt(format!("unexpected format `{}`", env.format)));
        }
        if env.version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {}", env.version)));
        }
        let canonical = serde_json::to_string(&env.body).map_err(|e| corrupt(e.to_string()))?;
        let actual = hex::encode(Sha256::digest(canonical.as_bytes()));
        if actual != env.digest {
            return Err(corrupt("digest mismatch".into()));
        }
        let body: CheckpointBody = serde_json::from_value(env.body).map_err(|e| corrupt(e.to_string()))?;
        Ok(Self { body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamgr::LocationKind;
    use crate::graph::{DataKind, DataRef, TaskSpec, TaskState};

    #[test]
    fn retry_rules() {
        let mut runs = 1;
        let mut used = 0;
        loop {
            match on_failure(FailureKind::Application, used, 3, false) {
                FailureAction::Retry { counted: true } => {
                    used += 1;
                    runs += 1;
                }
                FailureAction::Permanent => break,
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(runs, 4);
        assert_eq!(on_failure(FailureKind::Hardware, 3, 3, false), FailureAction::Retry { counted: false });
        assert_eq!(on_failure(FailureKind::Os, 9, 0, false), FailureAction::Retry { counted: false });
        assert_eq!(on_failure(FailureKind::Strategic, 0, 3, true), FailureAction::Chop);
        assert_eq!(on_failure(FailureKind::Strategic, 0, 3, false), FailureAction::Halt);
    }

    #[test]
    fn spec_validation() {
        assert!(FailureSpec::at(FailureKind::Hardware, 5.0).on_node(1).validate().is_ok());
        assert!(FailureSpec::at(FailureKind::Hardware, -1.0).validate().is_err());
        assert!(FailureSpec::at(FailureKind::Application, 5.0).validate().is_err());
        let mut both = FailureSpec::at(FailureKind::Os, 1.0);
        both.rate_per_node_hour = Some(0.1);
        assert!(both.validate().is_err());
        assert_eq!(FailureSpec::at(FailureKind::Application, 1.0).on_task(4).scope(), Scope::Task(TaskId(4)));
    }

    #[test]
    fn awkward_floats_survive_the_digest() {
        let mut b = body();
        b.snapshot_time = 0.1 + 0.2;
        b.graph.add_task(TaskSpec::new(9, 127.006_728_169_053_37)).unwrap();
        b.graph.drain_newly_ready();
        let cp = Checkpoint::new(b);
        assert_eq!(Checkpoint::from_json(&cp.to_json()).unwrap(), cp);
    }

    fn body() -> CheckpointBody {
        let mut g = TaskGraph::new();
        g.add_data(DataRef::new(1, 10, DataKind::Output)).unwrap();
        g.add_task(TaskSpec::new(0, 5.0).outputs([1])).unwrap();
        g.add_task(TaskSpec::new(2, 5.0)).unwrap();
        g.mark_running(TaskId(0)).unwrap();
        g.mark_done(TaskId(0)).unwrap();
        g.drain_newly_ready();
        let mut dir = LocationDirectory::new(LocationKind::Hashed, 4);
        dir.set_gfs(DataId(1));
        dir.register(DataId(1), NodeId(3));
        CheckpointBody {
            snapshot_time: 12.5,
            seed: 7,
            graph: g,
            directory: dir,
            provisioner_cursor: 2,
            pending_flush: vec![DataId(1)],
            retries: BTreeMap::from([(TaskId(2), 1)]),
            chop_fired: false,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let ck = Checkpoint::new(body());
        let text = ck.to_json();
        assert!(text.contains(CHECKPOINT_FORMAT));
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), text);
        assert_eq!(back.body.graph.state(TaskId(0)), Some(TaskState::Done));
    }

    #[test]
    fn tampered_checkpoint_is_rejected() {
        let text = Checkpoint::new(body()).to_json();
        let tampered = text.replace("12.5", "13.5");
        assert!(matches!(Checkpoint::from_json(&tampered), Err(ResilienceError::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_json("{}"), Err(ResilienceError::CorruptCheckpoint(_))));
        let wrong = text.replace(CHECKPOINT_FORMAT, "other");
        assert!(Checkpoint::from_json(&wrong).is_err());
    }
}
