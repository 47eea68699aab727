use std::path::Path;

use mtcsim::config::ExperimentConfig;
use mtcsim::experiment::simulate;
use mtcsim::kernel::{EventKind, Trace};

fn run(workload: &str, extra: &str) -> (mtcsim::metrics::RunReport, Trace) {
    let text = format!(
        r#"
[platform]
node-count = 16
block-granularity = 4
cores-per-node = 2
local-storage-bytes = 4_294_967_296
gfs-bandwidth-bytes-per-sec = 1e10
node-link-bandwidth-bytes-per-sec = 1e9
ifs-enabled = true
ifs-bandwidth-bytes-per-sec = 5e9
utility-node-count = 1

{extra}

[workload]
{workload}
"#
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    cfg.validate(Path::new(".")).unwrap();
    let o = simulate(&cfg, Path::new("."), "t", 3).unwrap();
    assert_eq!(o.violation, None, "{workload}");
    let trace = Trace::parse(&o.trace).unwrap();
    (o.report.unwrap(), trace)
}

#[test]
fn every_archetype_completes_with_a_sound_trace() {
    let cases = [
        ("archetype = \"sweep\"\ntasks = 50\ncommon-input-bytes = 1_000_000", 50),
        ("archetype = \"all-pairs\"\nm = 6\nk = 5\ninput-bytes = 1000", 31),
        ("archetype = \"pipeline-chain\"\nstages = 3\nwidth = 8", 24),
        ("archetype = \"scatter-gather\"\ntasks = 20\ncommon-input-bytes = 1000\noutput-bytes = 100", 21),
        ("archetype = \"dock-like\"\ntasks = 40", 40),
        ("archetype = \"blast-like\"\ntasks = 40", 40),
        ("archetype = \"oops-like\"\ntasks = 40", 40),
    ];
    for (w, n) in cases {
        let (r, _) = run(w, "");
        assert_eq!(r.tasks.executed, n, "{w}");
        assert!(r.utilization > 0.0 && r.utilization <= 1.0);
        assert!(r.busy_core_seconds <= r.allocated_core_seconds + 1e-6);
    }
}

#[test]
fn iterative_template_unfolds_until_convergence() {
    let (r, _) = run("archetype = \"iterative\"\nbody-size = 5\nmax-iterations = 10\nconverge-at-iteration = 4", "");
    assert_eq!(r.tasks.generated, 20);
    assert_eq!(r.tasks.executed, 20);
}

#[test]
fn larger_presets_complete() {
    for w in [
        "archetype = \"montage-like\"\nimages = 40",
        "archetype = \"deem-like\"\ntasks = 30",
        "archetype = \"social-learning\"\nstrategies = 20",
    ] {
        let (r, _) = run(w, "");
        assert_eq!(r.tasks.executed + r.tasks.pruned + r.tasks.failed, r.tasks.generated, "{w}");
    }
}

#[test]
fn collective_flushes_are_batched() {
    let (r, trace) = run(
        "archetype = \"sweep\"\ntasks = 100\nruntime = { kind = \"uniform\", low-sec = 30.0, high-sec = 300.0 }\noutput-bytes = 1_000_000",
        "[policy.data]\noutput = \"collective\"\nflush-period-sec = 60.0",
    );
    let mut batches: Vec<u64> = trace.of_kind(EventKind::TransferStart).filter_map(|x| x.field_u64("batch")).collect();
    batches.dedup();
    assert!(!batches.is_empty());
    assert!(batches.len() as f64 <= (r.makespan / 60.0).ceil() + 1.0);
}

#[test]
fn hierarchical_push_with_stealing_completes() {
    let (r, trace) = run(
        "archetype = \"sweep\"\ntasks = 200\nruntime = { kind = \"exponential\", mean-sec = 20.0 }",
        "[policy.dispatch]\narchitecture = \"hierarchical\"\nscheduler-count = 4\nmode = \"push\"\nstealing = true\npush-backlog = 3",
    );
    assert_eq!(r.tasks.executed, 200);
    assert!(trace.of_kind(EventKind::Dispatch).any(|d| d.field("via") == Some("steal")));
}

#[test]
fn random_failures_are_survived() {
    let (r, trace) = run(
        "archetype = \"sweep\"\ntasks = 100\nruntime = { kind = \"constant\", value-sec = 120.0 }",
        "[[policy.resilience.failures]]\nkind = \"os\"\nrate-per-node-hour = 0.5\nreboot-sec = 30.0",
    );
    assert_eq!(r.tasks.executed, 100);
    assert!(trace.of_kind(EventKind::FailureInjected).count() > 0);
}
