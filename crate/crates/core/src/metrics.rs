//! Report quantities derived from a finished trace.
//!
//! Trace fields read here:
//!
//! | kind | fields |
//! |------|--------|
//! | `task-start` | `task worker node cores [resumed]` |
//! | `task-end` | `task worker node outcome` (`done` or `migrated`) |
//! | `task-fail` | `task worker node cause final` |
//! | `prune-signal` | `task [worker]` |
//! | `transfer-start`, `transfer-end` | `xfer data bytes route src dst [worker] [batch] [task]` |
//! | `block-granted`, `block-released` | `block nodes cores` |
//! | `dispatch` | `task worker node sched [via]` |
//!
//! Busy time runs from `task-start` to the matching `task-end`,
//! `task-fail` or `prune-signal`. Synchronous output writes happen before
//! `task-end`, so they count as busy; stage-in happens before `task-start`
//! and does not.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::kernel::{EventKind, Trace, TraceRecord};
use crate::platform::Route;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("malformed trace at seq {seq}: {msg}")]
    MalformedTrace { seq: u64, msg: String },
}

fn malformed(r: &TraceRecord, msg: &str) -> MetricsError {
    MetricsError::MalformedTrace { seq: r.seq, msg: format!("{} {msg}", r.kind) }
}

fn req_u64(r: &TraceRecord, key: &str) -> Result<u64, MetricsError> {
    r.field_u64(key).ok_or_else(|| malformed(r, &format!("lacks `{key}`")))
}

/// A span of `cores` cores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub cores: u64,
}

impl Interval {
    /// Core-seconds inside `[t0, t1]`.
    pub fn overlap(&self, t0: f64, t1: f64) -> f64 {
        let d = self.end.min(t1) - self.start.max(t0);
        if d > 0.0 {
            d * self.cores as f64
        } else {
            0.0
        }
    }

    pub fn core_seconds(&self) -> f64 {
        (self.end - self.start) * self.cores as f64
    }
}

fn last_time(trace: &Trace) -> f64 {
    trace.records.last().map_or(0.0, |r| r.time)
}

pub fn busy_intervals(trace: &Trace) -> Result<Vec<Interval>, MetricsError> {
    let mut open: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.iter() {
        match r.kind {
            EventKind::TaskStart => {
                let t = req_u64(r, "task")?;
                let cores = r.field_u64("cores").unwrap_or(1);
                if open.insert(t, (r.time, cores)).is_some() {
                    return Err(malformed(r, &format!("for task {t} which is already running")));
                }
            }
            EventKind::TaskEnd | EventKind::TaskFail | EventKind::PruneSignal => {
                let t = req_u64(r, "task")?;
                if let Some((start, cores)) = open.remove(&t) {
                    out.push(Interval { start, end: r.time, cores });
                } else if r.kind != EventKind::PruneSignal {
                    return Err(malformed(r, &format!("for task {t} which never started")));
                }
            }
            _ => {}
        }
    }
    let end = last_time(trace);
    out.extend(open.into_values().map(|(start, cores)| Interval { start, end, cores }));
    Ok(out)
}

pub fn allocation_intervals(trace: &Trace) -> Result<Vec<Interval>, MetricsError> {
    let mut open: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.iter() {
        match r.kind {
            EventKind::BlockGranted => {
                let b = req_u64(r, "block")?;
                let cores = req_u64(r, "cores")?;
                if open.insert(b, (r.time, cores)).is_some() {
                    return Err(malformed(r, &format!("for block {b} which is already granted")));
                }
            }
            EventKind::BlockReleased => {
                let b = req_u64(r, "block")?;
                let (start, cores) = open.remove(&b).ok_or_else(|| malformed(r, &format!("for block {b} never granted")))?;
                out.push(Interval { start, end: r.time, cores });
            }
            _ => {}
        }
    }
    let end = last_time(trace);
    out.extend(open.into_values().map(|(start, cores)| Interval { start, end, cores }));
    Ok(out)
}

fn ratio(busy: f64, alloc: f64) -> f64 {
    if alloc <= 0.0 {
        1.0
    } else {
        (busy / alloc).min(1.0)
    }
}

/// Busy over allocated core-seconds; an empty run counts as fully utilized.
pub fn utilization(trace: &Trace) -> Result<f64, MetricsError> {
    let busy: f64 = busy_intervals(trace)?.iter().map(Interval::core_seconds).sum();
    let alloc: f64 = allocation_intervals(trace)?.iter().map(Interval::core_seconds).sum();
    Ok(ratio(busy, alloc))
}

/// Utilization restricted to `[t0, t1]`.
pub fn window_utilization(trace: &Trace, t0: f64, t1: f64) -> Result<f64, MetricsError> {
    let busy: f64 = busy_intervals(trace)?.iter().map(|i| i.overlap(t0, t1)).sum();
    let alloc: f64 = allocation_intervals(trace)?.iter().map(|i| i.overlap(t0, t1)).sum();
    Ok(ratio(busy, alloc))
}

/// Latest task or transfer completion.
pub fn makespan(trace: &Trace) -> f64 {
    trace
        .iter()
        .filter(|r| matches!(r.kind, EventKind::TaskEnd | EventKind::TransferEnd))
        .map(|r| r.time)
        .fold(0.0, f64::max)
}

/// Completed-transfer bytes per route.
pub fn bytes_moved(trace: &Trace) -> BTreeMap<Route, u64> {
    let mut out: BTreeMap<Route, u64> = Route::ALL.iter().map(|r| (*r, 0)).collect();
    for r in trace.of_kind(EventKind::TransferEnd) {
        if let (Some(route), Some(b)) = (r.field("route").and_then(|s| s.parse::<Route>().ok()), r.field_u64("bytes")) {
            *out.entry(route).or_default() += b;
        }
    }
    out
}

/// Completed-transfer bytes of one data item over one route.
pub fn bytes_for_data(trace: &Trace, route: Route, data: u64) -> u64 {
    trace
        .of_kind(EventKind::TransferEnd)
        .filter(|r| r.field("route") == Some(route.as_str()) && r.field_u64("data") == Some(data))
        .filter_map(|r| r.field_u64("bytes"))
        .sum()
}

/// Utilization of each tenth of the makespan. Deciles with nothing allocated
/// count as fully utilized.
pub fn tail_profile(trace: &Trace) -> Result<[f64; 10], MetricsError> {
    let m = makespan(trace);
    let busy = busy_intervals(trace)?;
    let alloc = allocation_intervals(trace)?;
    let mut out = [1.0; 10];
    if m <= 0.0 {
        return Ok(out);
    }
    for (i, slot) in out.iter_mut().enumerate() {
        let t0 = m * i as f64 / 10.0;
        let t1 = m * (i + 1) as f64 / 10.0;
        let b: f64 = busy.iter().map(|x| x.overlap(t0, t1)).sum();
        let a: f64 = alloc.iter().map(|x| x.overlap(t0, t1)).sum();
        *slot = ratio(b, a);
    }
    Ok(out)
}

/// Time from each dispatch to the task-start it led to.
pub fn dispatch_latencies(trace: &Trace) -> Vec<f64> {
    let mut pending: BTreeMap<u64, f64> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.iter() {
        match r.kind {
            EventKind::Dispatch => {
                if let Some(t) = r.field_u64("task") {
                    pending.entry(t).or_insert(r.time);
                }
            }
            EventKind::TaskStart => {
                if let Some(at) = r.field_u64("task").and_then(|t| pending.remove(&t)) {
                    out.push(r.time - at);
                }
            }
            EventKind::TaskFail | EventKind::PruneSignal => {
                if let Some(t) = r.field_u64("task") {
                    pending.remove(&t);
                }
            }
            _ => {}
        }
    }
    out
}

/// Nearest-rank percentile; 0 for an empty sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TaskCounters {
    pub generated: u64,
    /// Distinct tasks that completed.
    pub executed: u64,
    pub pruned: u64,
    pub failed: u64,
    /// Counted application retries.
    pub retried: u64,
    /// All task-start events, retries and restarts included.
    pub starts: u64,
}

pub fn counters(trace: &Trace, generated: u64) -> TaskCounters {
    let mut done = BTreeSet::new();
    let mut pruned = BTreeSet::new();
    let mut failed = BTreeSet::new();
    let mut c = TaskCounters { generated, ..TaskCounters::default() };
    for r in trace.iter() {
        let task = r.field_u64("task");
        match r.kind {
            EventKind::TaskStart => c.starts += 1,
            EventKind::TaskEnd if r.field("outcome") == Some("done") => {
                done.extend(task);
            }
            EventKind::PruneSignal => {
                pruned.extend(task);
            }
            EventKind::TaskFail => {
                if r.field("final") == Some("true") {
                    failed.extend(task);
                } else if r.field("cause") == Some("application") {
                    c.retried += 1;
                }
            }
            _ => {}
        }
    }
    c.executed = done.len() as u64;
    c.pruned = pruned.len() as u64;
    c.failed = failed.len() as u64;
    c
}

/// One run's summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub label: String,
    pub seed: u64,
    pub makespan: f64,
    pub utilization: f64,
    pub allocated_core_seconds: f64,
    pub busy_core_seconds: f64,
    pub bytes: BTreeMap<Route, u64>,
    pub dispatch_p50: f64,
    pub dispatch_p95: f64,
    pub dispatch_p99: f64,
    pub tasks: TaskCounters,
    pub chopped: bool,
    pub tail: [f64; 10],
}

pub const CSV_COLUMNS: [&str; 23] = [
    "label",
    "seed",
    "makespan_sec",
    "utilization",
    "allocated_core_sec",
    "busy_core_sec",
    "gfs_read_bytes",
    "gfs_write_bytes",
    "node_to_node_bytes",
    "ifs_read_bytes",
    "ifs_write_bytes",
    "dispatch_p50_sec",
    "dispatch_p95_sec",
    "dispatch_p99_sec",
    "tasks_generated",
    "tasks_executed",
    "tasks_pruned",
    "tasks_failed",
    "tasks_retried",
    "task_starts",
    "chopped",
    "network_bytes",
    "final_decile_utilization",
];

impl RunReport {
    pub fn from_trace(label: &str, seed: u64, trace: &Trace, generated: u64) -> Result<Self, MetricsError> {
        let busy: f64 = busy_intervals(trace)?.iter().map(Interval::core_seconds).sum();
        let alloc: f64 = allocation_intervals(trace)?.iter().map(Interval::core_seconds).sum();
        let lat = dispatch_latencies(trace);
        Ok(Self {
            label: label.to_string(),
            seed,
            makespan: makespan(trace),
            utilization: ratio(busy, alloc),
            allocated_core_seconds: alloc,
            busy_core_seconds: busy,
            bytes: bytes_moved(trace),
            dispatch_p50: percentile(&lat, 50.0),
            dispatch_p95: percentile(&lat, 95.0),
            dispatch_p99: percentile(&lat, 99.0),
            tasks: counters(trace, generated),
            chopped: trace.of_kind(EventKind::ChopTriggered).next().is_some(),
            tail: tail_profile(trace)?,
        })
    }

    pub fn route_bytes(&self, r: Route) -> u64 {
        self.bytes.get(&r).copied().unwrap_or(0)
    }

    /// Bytes over every route.
    pub fn network_bytes(&self) -> u64 {
        self.bytes.values().sum()
    }

    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
        h.extend((1..=10).map(|i| format!("decile_{i}")));
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut v = vec![
            self.label.clone(),
            self.seed.to_string(),
            self.makespan.to_string(),
            self.utilization.to_string(),
            self.allocated_core_seconds.to_string(),
            self.busy_core_seconds.to_string(),
        ];
        v.extend(Route::ALL.iter().map(|r| self.route_bytes(*r).to_string()));
        v.extend([self.dispatch_p50, self.dispatch_p95, self.dispatch_p99].iter().map(f64::to_string));
        let t = &self.tasks;
        v.extend([t.generated, t.executed, t.pruned, t.failed, t.retried, t.starts].iter().map(u64::to_string));
        v.push(self.chopped.to_string());
        v.push(self.network_bytes().to_string());
        v.push(self.tail[9].to_string());
        v.extend(self.tail.iter().map(f64::to_string));
        v
    }
}

/// Writes reports as CSV with a header row.
pub fn write_csv<W: std::io::Write>(out: W, reports: &[RunReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RunReport::csv_header())?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

/// A named trace property that did not hold.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("invariant `{invariant}` violated: {detail}")]
pub struct InvariantViolation {
    pub invariant: &'static str,
    pub detail: String,
}

fn violation(invariant: &'static str, detail: String) -> InvariantViolation {
    InvariantViolation { invariant, detail }
}

/// Checks the trace-level properties every run must satisfy.
pub fn check_trace(trace: &Trace) -> Result<(), InvariantViolation> {
    let mut last = (f64::NEG_INFINITY, 0u64);
    let mut pruned = BTreeSet::new();
    let mut done = BTreeSet::new();
    let mut running_on: BTreeMap<u64, u64> = BTreeMap::new();
    let mut task_worker: BTreeMap<u64, u64> = BTreeMap::new();
    let mut grant_sizes = BTreeSet::new();
    for r in trace.iter() {
        if (r.time, r.seq) < last {
            return Err(violation("clock-monotonicity", format!("seq {} at {} after {:?}", r.seq, r.time, last)));
        }
        last = (r.time, r.seq);
        let task = r.field_u64("task");
        match r.kind {
            EventKind::TaskStart => {
                let t = task.unwrap_or_default();
                if pruned.contains(&t) {
                    return Err(violation("prune-soundness", format!("task {t} started after being pruned")));
                }
                // A producer reopened after its output was lost runs again.
                if r.field("rerun") == Some("true") {
                    done.remove(&t);
                } else if done.contains(&t) {
                    return Err(violation("at-most-once-completion", format!("task {t} restarted after completing")));
                }
                if let Some(w) = r.field_u64("worker") {
                    if let Some(other) = running_on.insert(w, t) {
                        return Err(violation("single-assignment", format!("worker {w} runs {other} and {t}")));
                    }
                    task_worker.insert(t, w);
                }
            }
            EventKind::TaskEnd | EventKind::TaskFail | EventKind::PruneSignal => {
                let t = task.unwrap_or_default();
                if let Some(w) = task_worker.remove(&t) {
                    running_on.remove(&w);
                }
                if r.kind == EventKind::PruneSignal {
                    pruned.insert(t);
                }
                if r.kind == EventKind::TaskEnd && r.field("outcome") == Some("done") && !done.insert(t) {
                    return Err(violation("at-most-once-completion", format!("task {t} completed twice")));
                }
            }
            EventKind::BlockGranted => {
                grant_sizes.insert(r.field_u64("nodes").unwrap_or_default());
            }
            _ => {}
        }
    }
    if grant_sizes.len() > 1 {
        return Err(violation("grant-quantization", format!("blocks of differing sizes {grant_sizes:?}")));
    }
    let busy: f64 = busy_intervals(trace).map_err(|e| violation("well-formed-trace", e.to_string()))?.iter().map(Interval::core_seconds).sum();
    let alloc: f64 =
        allocation_intervals(trace).map_err(|e| violation("well-formed-trace", e.to_string()))?.iter().map(Interval::core_seconds).sum();
    if busy > alloc * (1.0 + 1e-9) + 1e-9 {
        return Err(violation("busy-within-allocation", format!("busy {busy} exceeds allocated {alloc}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(time: f64, seq: u64, kind: EventKind, fields: &[(&str, &str)]) -> TraceRecord {
        TraceRecord { time, seq, kind, fields: fields.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    /// Hand-written trace of the four-task long-tail schedule.
    fn oracle(dynamic: bool) -> Trace {
        let mut r = Vec::new();
        let mut seq = 0;
        let mut push = |r: &mut Vec<TraceRecord>, t: f64, k: EventKind, f: &[(&str, &str)]| {
            r.push(rec(t, seq, k, f));
            seq += 1;
        };
        for b in ["0", "1", "2", "3"] {
            push(&mut r, 0.0, EventKind::BlockGranted, &[("block", b), ("nodes", "1"), ("cores", "1")]);
        }
        for t in ["0", "1", "2", "3"] {
            push(&mut r, 0.0, EventKind::TaskStart, &[("task", t), ("worker", t), ("cores", "1")]);
        }
        for t in ["0", "1", "2"] {
            push(&mut r, 100.0, EventKind::TaskEnd, &[("task", t), ("worker", t), ("outcome", "done")]);
            if dynamic {
                push(&mut r, 100.0, EventKind::BlockReleased, &[("block", t), ("nodes", "1"), ("cores", "1")]);
            }
        }
        push(&mut r, 400.0, EventKind::TaskEnd, &[("task", "3"), ("worker", "3"), ("outcome", "done")]);
        let rest: &[&str] = if dynamic { &["3"] } else { &["0", "1", "2", "3"] };
        for b in rest {
            push(&mut r, 400.0, EventKind::BlockReleased, &[("block", b), ("nodes", "1"), ("cores", "1")]);
        }
        Trace { records: r }
    }

    #[test]
    fn two_worker_example() {
        let t = Trace {
            records: vec![
                rec(0.0, 0, EventKind::BlockGranted, &[("block", "0"), ("nodes", "2"), ("cores", "2")]),
                rec(0.0, 1, EventKind::TaskStart, &[("task", "0"), ("cores", "1")]),
                rec(0.0, 2, EventKind::TaskStart, &[("task", "1"), ("cores", "1")]),
                rec(90.0, 3, EventKind::TaskEnd, &[("task", "1"), ("outcome", "done")]),
                rec(100.0, 4, EventKind::TaskEnd, &[("task", "0"), ("outcome", "done")]),
                rec(100.0, 5, EventKind::BlockReleased, &[("block", "0"), ("nodes", "2"), ("cores", "2")]),
            ],
        };
        assert_eq!(utilization(&t).unwrap(), 0.95);
    }

    #[test]
    fn long_tail_oracle() {
        let s = oracle(false);
        assert_eq!(utilization(&s).unwrap(), 0.4375);
        assert_eq!(tail_profile(&s).unwrap()[9], 0.25);
        assert_eq!(makespan(&s), 400.0);
        let d = oracle(true);
        assert_eq!(utilization(&d).unwrap(), 1.0);
        let rd = RunReport::from_trace("d", 0, &d, 4).unwrap();
        assert_eq!(rd.allocated_core_seconds, 700.0);
        assert_eq!(rd.tasks.executed, 4);
        check_trace(&s).unwrap();
        check_trace(&d).unwrap();
    }

    #[test]
    fn empty_and_transferless() {
        let t = Trace::default();
        assert_eq!(utilization(&t).unwrap(), 1.0);
        assert_eq!(makespan(&t), 0.0);
        assert!(bytes_moved(&oracle(false)).values().all(|b| *b == 0));
        assert_eq!(tail_profile(&t).unwrap(), [1.0; 10]);
    }

    #[test]
    fn byte_totals() {
        let t = Trace {
            records: vec![
                rec(1.0, 0, EventKind::TransferEnd, &[("data", "4"), ("bytes", "1000"), ("route", "gfs-read")]),
                rec(2.0, 1, EventKind::TransferEnd, &[("data", "4"), ("bytes", "1000"), ("route", "node-to-node")]),
                rec(2.0, 2, EventKind::TransferEnd, &[("data", "5"), ("bytes", "7"), ("route", "gfs-read")]),
            ],
        };
        let b = bytes_moved(&t);
        assert_eq!(b[&Route::GfsRead], 1007);
        assert_eq!(b[&Route::NodeToNode], 1000);
        assert_eq!(bytes_for_data(&t, Route::GfsRead, 4), 1000);
        assert_eq!(makespan(&t), 2.0);
    }

    #[test]
    fn malformed_traces() {
        let t = Trace { records: vec![rec(0.0, 0, EventKind::TaskEnd, &[("task", "1")])] };
        assert!(utilization(&t).is_err());
        let t = Trace { records: vec![rec(0.0, 0, EventKind::BlockReleased, &[("block", "1"), ("cores", "1")])] };
        assert!(utilization(&t).is_err());
    }

    #[test]
    fn invariant_checks() {
        let t = Trace {
            records: vec![
                rec(0.0, 0, EventKind::PruneSignal, &[("task", "1")]),
                rec(1.0, 1, EventKind::TaskStart, &[("task", "1")]),
            ],
        };
        assert_eq!(check_trace(&t).unwrap_err().invariant, "prune-soundness");
        let t = Trace {
            records: vec![rec(5.0, 1, EventKind::TaskStart, &[("task", "1")]), rec(4.0, 2, EventKind::TaskStart, &[("task", "2")])],
        };
        assert_eq!(check_trace(&t).unwrap_err().invariant, "clock-monotonicity");
        let t = Trace {
            records: vec![
                rec(0.0, 0, EventKind::TaskStart, &[("task", "1"), ("worker", "0")]),
                rec(0.0, 1, EventKind::TaskStart, &[("task", "2"), ("worker", "0")]),
            ],
        };
        assert_eq!(check_trace(&t).unwrap_err().invariant, "single-assignment");
    }

    #[test]
    fn percentiles_and_csv() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), 2.0);
        assert_eq!(percentile(&[], 99.0), 0.0);
        let r = RunReport::from_trace("x", 3, &oracle(false), 4).unwrap();
        assert_eq!(r.csv_record().len(), RunReport::csv_header().len());
        let mut buf = Vec::new();
        write_csv(&mut buf, &[r.clone(), r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().contains(",0.4375,"));
    }
}
