use super::*;
use crate::datamgr::{CommonInputPolicy, OutputPolicy};
use crate::dispatch::ChopPolicy;
use crate::graph::{DataRef, TaskSpec};
use crate::kernel::Distribution;
use crate::metrics::{bytes_for_data, check_trace, counters};
use crate::provision::Growth;
use crate::resilience::FailureKind;
use crate::workloads::{gen_branch_and_bound, gen_sweep};

fn independent(runtimes: &[f64]) -> TaskGraph {
    let mut g = TaskGraph::new();
    for (i, r) in runtimes.iter().enumerate() {
        g.add_task(TaskSpec::new(i as u64, *r)).unwrap();
    }
    g
}

/// One core per node, whole-node blocks and an unthrottled scheduler.
fn machine(nodes: u32) -> SimConfig {
    let mut cfg = SimConfig::new(PlatformSpec::with_granularity(nodes, 1), ProvisionPolicy::static_nodes(nodes));
    cfg.dispatch.throughput_tasks_per_sec = f64::INFINITY;
    cfg
}

fn run(cfg: SimConfig, g: TaskGraph) -> Engine {
    let mut e = Engine::new(cfg, g).unwrap();
    assert_eq!(e.run().unwrap(), RunStatus::Finished);
    check_trace(e.trace()).unwrap();
    e
}

fn times(e: &Engine, kind: EventKind, task: u64) -> Vec<f64> {
    e.trace()
        .of_kind(kind)
        .filter(|r| r.field_u64("task") == Some(task))
        .filter(|r| kind != EventKind::TaskEnd || r.field("outcome") == Some("done"))
        .map(|r| r.time)
        .collect()
}

fn long_tail() -> TaskGraph {
    independent(&[100.0, 100.0, 100.0, 400.0])
}

#[test]
fn first_start_waits_one_dispatch_hop() {
    let mut cfg = machine(1);
    cfg.dispatch.dispatch_latency_sec = 0.001;
    let e = run(cfg, independent(&[1.0]));
    assert_eq!(times(&e, EventKind::TaskStart, 0), vec![0.001]);
}

#[test]
fn three_stage_chain_is_serial() {
    let mut g = TaskGraph::new();
    g.add_data(DataRef::new(0, 0, DataKind::Intermediate)).unwrap();
    g.add_data(DataRef::new(1, 0, DataKind::Intermediate)).unwrap();
    g.add_task(TaskSpec::new(0, 10.0).outputs([0])).unwrap();
    g.add_task(TaskSpec::new(1, 10.0).inputs([0]).outputs([1])).unwrap();
    g.add_task(TaskSpec::new(2, 10.0).inputs([1])).unwrap();
    let e = run(machine(1), g);
    assert_eq!(e.report("chain").unwrap().makespan, 30.0);
}

#[test]
fn longest_first_ordering() {
    let mut cfg = machine(1);
    cfg.dispatch.ordering = QueueOrder::LongestFirst;
    cfg.dispatch.runtimes_known = true;
    let e = run(cfg, independent(&[1.0, 5.0, 3.0]));
    let order: Vec<u64> = e.trace().of_kind(EventKind::TaskStart).filter_map(|r| r.field_u64("task")).collect();
    assert_eq!(order, vec![1, 2, 0]);
}

#[test]
fn push_mode_spreads_over_workers() {
    let mut cfg = machine(2);
    cfg.dispatch.mode = DispatchMode::Push;
    let e = run(cfg, independent(&[10.0; 4]));
    assert_eq!(e.report("push").unwrap().makespan, 20.0);
    assert_eq!(e.trace().of_kind(EventKind::Dispatch).filter(|r| r.field("via") == Some("push")).count(), 4);
}

#[test]
fn static_long_tail_golden() {
    let r = run(machine(4), long_tail()).report("static").unwrap();
    assert_eq!(r.allocated_core_seconds, 1600.0);
    assert_eq!(r.makespan, 400.0);
    assert!((r.utilization - 0.4375).abs() < 1e-12);
}

#[test]
fn dynamic_long_tail_releases_idle_nodes() {
    let mut cfg = machine(4);
    cfg.provision = ProvisionPolicy::dynamic(Growth::default(), true);
    let r = run(cfg, long_tail()).report("dynamic").unwrap();
    assert_eq!(r.allocated_core_seconds, 700.0);
    assert!((r.utilization - 1.0).abs() < 1e-12);
}

#[test]
fn chop_restarts_the_tail_on_fewer_nodes() {
    let mut cfg = machine(4);
    cfg.dispatch.chop = Some(ChopPolicy { trigger_fraction: 0.75, restart_nodes: 1 });
    let e = run(cfg.clone(), long_tail());
    let r = e.report("chop").unwrap();
    assert_eq!((r.allocated_core_seconds, r.makespan), (800.0, 500.0));
    assert_eq!(e.trace().of_kind(EventKind::ChopTriggered).count(), 1);

    cfg.dispatch.migration = true;
    let e = run(cfg, long_tail());
    let r = e.report("migrate").unwrap();
    assert_eq!((r.allocated_core_seconds, r.makespan), (700.0, 400.0));
    let resumed: Vec<f64> = e.trace().of_kind(EventKind::TaskStart).filter_map(|r| r.field_f64("resumed")).collect();
    assert_eq!(resumed, vec![100.0]);
}

#[test]
fn hardware_failure_on_idle_node_is_harmless() {
    let mut cfg = machine(2);
    cfg.resilience.failures.push(FailureSpec::at(FailureKind::Hardware, 10.0).on_node(1));
    let e = run(cfg, independent(&[100.0]));
    assert_eq!(e.report("idle").unwrap().makespan, 100.0);
    assert_eq!(e.trace().of_kind(EventKind::TaskFail).count(), 0);
    assert_eq!(e.trace().of_kind(EventKind::FailureInjected).count(), 1);
}

#[test]
fn permanent_node_loss_finishes_on_survivors() {
    let mut cfg = machine(4);
    cfg.resilience.failures.push(FailureSpec::at(FailureKind::Hardware, 50.0).on_node(0).permanent());
    let e = run(cfg, long_tail());
    assert_eq!(times(&e, EventKind::TaskStart, 0), vec![0.0, 100.0]);
    assert_eq!(times(&e, EventKind::TaskEnd, 0), vec![200.0]);
    assert_eq!(e.report("lost").unwrap().makespan, 400.0);
    let fail = e.trace().of_kind(EventKind::TaskFail).next().unwrap();
    assert_eq!(fail.field("cause"), Some("hardware"));
    assert_eq!(fail.field("final"), Some("false"));
    assert!(e.platform().node(NodeId(0)).lost);
}

#[test]
fn transient_failure_reboots_the_node() {
    let mut cfg = machine(1);
    let mut f = FailureSpec::at(FailureKind::Os, 10.0).on_node(0);
    f.reboot_sec = 30.0;
    cfg.resilience.failures.push(f);
    let e = run(cfg, independent(&[100.0]));
    assert_eq!(times(&e, EventKind::TaskStart, 0), vec![0.0, 40.0]);
    assert_eq!(e.report("reboot").unwrap().makespan, 140.0);
}

#[test]
fn kill_cap_exhausts_retries() {
    let mut cfg = machine(1);
    cfg.resilience.kill_cap_sec = Some(10.0);
    let e = run(cfg, independent(&[100.0]));
    assert_eq!(times(&e, EventKind::TaskStart, 0), vec![0.0, 10.0, 20.0, 30.0]);
    let c = counters(e.trace(), 1);
    assert_eq!((c.retried, c.failed, c.executed), (3, 1, 0));
    let last = e.trace().of_kind(EventKind::TaskFail).last().unwrap();
    assert_eq!((last.time, last.field("final")), (40.0, Some("true")));
    assert_eq!(e.graph().state(TaskId(0)), Some(TaskState::Failed));
}

#[test]
fn permanent_failure_prunes_descendants() {
    let mut g = TaskGraph::new();
    g.add_data(DataRef::new(0, 0, DataKind::Intermediate)).unwrap();
    g.add_task(TaskSpec::new(0, 100.0).outputs([0])).unwrap();
    g.add_task(TaskSpec::new(1, 10.0).inputs([0])).unwrap();
    let mut cfg = machine(1);
    cfg.resilience.max_retries = 0;
    cfg.resilience.failures.push(FailureSpec::at(FailureKind::Application, 5.0).on_task(0));
    let e = run(cfg, g);
    assert_eq!(e.graph().state(TaskId(1)), Some(TaskState::Pruned));
    assert_eq!(counters(e.trace(), 2).pruned, 1);
}

#[test]
fn branch_and_bound_certain_pruning() {
    let mut rng = RngStream::new(1, RngStream::RUNTIMES);
    let g = gen_branch_and_bound(3, 2, 1.0, &Distribution::constant(10.0), 0, &mut rng).unwrap();
    let e = run(machine(8), g);
    let c = counters(e.trace(), 15);
    assert_eq!(c.executed, 4);
    assert_eq!(c.starts, 7);
    assert_eq!(c.pruned, 11);
    assert_eq!(e.done_count(), 4);
}

#[test]
fn broadcast_reads_common_input_once() {
    let sweep = || {
        let mut rng = RngStream::new(1, RngStream::RUNTIMES);
        gen_sweep(64, &Distribution::constant(10.0), 1_000_000_000, 0, 0, &mut rng).unwrap()
    };
    let pull = run(machine(64), sweep());
    assert_eq!(bytes_for_data(pull.trace(), Route::GfsRead, 0), 64_000_000_000);
    let mut cfg = machine(64);
    cfg.data.common_input = CommonInputPolicy::PushBroadcast;
    let push = run(cfg, sweep());
    assert_eq!(bytes_for_data(push.trace(), Route::GfsRead, 0), 1_000_000_000);
}

#[test]
fn synchronized_output_holds_the_worker() {
    let mut g = TaskGraph::new();
    g.add_data(DataRef::new(0, 1_000_000_000, DataKind::Output)).unwrap();
    g.add_task(TaskSpec::new(0, 10.0).outputs([0])).unwrap();
    let mut cfg = machine(1);
    cfg.platform.gfs_bandwidth_bytes_per_sec = 1e9;
    let e = run(cfg, g);
    assert_eq!(times(&e, EventKind::TaskEnd, 0), vec![11.0]);
    assert!(e.directory().on_gfs(DataId(0)));
}

#[test]
fn collective_output_flushes_in_one_batch() {
    let mut g = TaskGraph::new();
    for i in 0..4 {
        g.add_data(DataRef::new(i, 1_000_000, DataKind::Output)).unwrap();
        g.add_task(TaskSpec::new(i, 10.0).outputs([i])).unwrap();
    }
    let mut cfg = machine(4);
    cfg.data.output = OutputPolicy::Collective;
    let e = run(cfg, g);
    for t in 0..4 {
        assert_eq!(times(&e, EventKind::TaskEnd, t), vec![10.0]);
    }
    let batches: Vec<u64> = e.trace().of_kind(EventKind::TransferStart).filter_map(|r| r.field_u64("batch")).collect();
    assert_eq!(batches, vec![0; 4]);
    for d in 0..4 {
        assert!(e.directory().on_gfs(DataId(d)));
    }
}

#[test]
fn recovery_requeues_in_flight_work() {
    let cfg = machine(2);
    let mut e = Engine::new(cfg.clone(), independent(&[100.0; 4])).unwrap();
    e.run_until(150.0).unwrap();
    let cp = e.checkpoint();
    let restored = Checkpoint::from_json(&cp.to_json()).unwrap();
    let mut r = recover(&cfg, &restored, 2).unwrap();
    assert_eq!(r.done_count(), 2);
    assert_eq!(r.run().unwrap(), RunStatus::Finished);
    check_trace(r.trace()).unwrap();
    assert_eq!(times(&r, EventKind::TaskStart, 2), vec![150.0]);
    assert_eq!(times(&r, EventKind::TaskEnd, 3), vec![250.0]);
    assert_eq!(r.done_count(), 4);
}

#[test]
fn strategic_failure_without_chop_halts() {
    let mut cfg = machine(1);
    cfg.resilience.failures.push(FailureSpec::at(FailureKind::Strategic, 5.0));
    let mut e = Engine::new(cfg, independent(&[100.0])).unwrap();
    assert_eq!(e.run().unwrap(), RunStatus::Halted);
    assert_eq!(e.graph().state(TaskId(0)), Some(TaskState::Ready));
    assert_eq!(e.platform().allocated_nodes(), 0);
}

#[test]
fn explicit_migration_keeps_progress() {
    let mut cfg = machine(2);
    let mut e = Engine::new(cfg.clone(), independent(&[100.0])).unwrap();
    e.run_until(50.0).unwrap();
    assert_eq!(e.migrate(TaskId(0), NodeId(1)), Err(EngineError::MigrationDisabled));

    cfg.dispatch.migration = true;
    let mut e = Engine::new(cfg, independent(&[100.0])).unwrap();
    e.run_until(50.0).unwrap();
    assert_eq!(e.migrate(TaskId(0), NodeId(0)), Err(EngineError::DestinationBusy(NodeId(0))));
    e.migrate(TaskId(0), NodeId(1)).unwrap();
    e.run().unwrap();
    check_trace(e.trace()).unwrap();
    assert_eq!(times(&e, EventKind::TaskEnd, 0), vec![100.0]);
}

#[test]
fn pruning_a_running_task_signals_after_latency() {
    let mut cfg = machine(1);
    cfg.dispatch.dispatch_latency_sec = 0.5;
    let mut e = Engine::new(cfg, independent(&[100.0])).unwrap();
    e.run_until(10.0).unwrap();
    e.prune(TaskId(0)).unwrap();
    assert_eq!(e.run().unwrap(), RunStatus::Finished);
    let sig = e.trace().of_kind(EventKind::PruneSignal).next().unwrap();
    assert_eq!(sig.time, 10.5);
    assert_eq!(sig.field_u64("worker"), Some(0));
}

#[test]
fn injecting_into_the_past_is_rejected() {
    let mut e = Engine::new(machine(1), independent(&[100.0])).unwrap();
    e.run_until(50.0).unwrap();
    let err = e.inject(FailureSpec::at(FailureKind::Hardware, 10.0).on_node(0)).unwrap_err();
    assert!(matches!(err, EngineError::Kernel(KernelError::TimeTravel { .. })));
    let err = e.inject(FailureSpec::at(FailureKind::Hardware, 60.0).on_node(9)).unwrap_err();
    assert!(matches!(err, EngineError::UnknownScope(_)));
}

#[test]
fn stall_when_no_node_survives() {
    let mut cfg = machine(1);
    cfg.resilience.failures.push(FailureSpec::at(FailureKind::Hardware, 10.0).on_node(0).permanent());
    let mut e = Engine::new(cfg, independent(&[100.0])).unwrap();
    assert_eq!(e.run().unwrap(), RunStatus::Stalled);
}
