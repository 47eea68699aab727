use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mtcsim(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtcsim")).args(args).env("MTCSIM_OUT_DIR", out).output().unwrap()
}

fn cfg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

/// Column `name` of every data row.
fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

const SMALL: &str = r#"
[platform]
node-count = 2
block-granularity = 1
local-storage-bytes = 1000
gfs-bandwidth-bytes-per-sec = 1e9
node-link-bandwidth-bytes-per-sec = 1e9

[workload]
archetype = "sweep"
tasks = 4
"#;

#[test]
fn long_tail_run_reports_oracle_utilization() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtcsim(dir.path(), &["run", &cfg("long-tail-static.toml")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("static.csv")).unwrap();
    assert_eq!(column(&csv, "utilization"), vec!["0.4375"]);
    assert!(dir.path().join("static-seed1.trace").exists());
}

#[test]
fn repeated_runs_overwrite_identically() {
    let dir = tempfile::tempdir().unwrap();
    let read = || {
        let csv = std::fs::read(dir.path().join("dynamic.csv")).unwrap();
        let trace = std::fs::read(dir.path().join("dynamic-seed1.trace")).unwrap();
        (csv, trace)
    };
    assert!(mtcsim(dir.path(), &["run", &cfg("long-tail-dynamic.toml")]).status.success());
    let first = read();
    assert!(mtcsim(dir.path(), &["run", &cfg("long-tail-dynamic.toml")]).status.success());
    assert_eq!(read(), first);
}

#[test]
fn two_seeds_give_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.toml");
    std::fs::write(&path, format!("{SMALL}\n[run]\nseeds = [3, 4]\n")).unwrap();
    let o = mtcsim(dir.path(), &["run", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("two.csv")).unwrap();
    assert_eq!(column(&csv, "seed"), vec!["3", "4"]);
}

#[test]
fn exit_codes_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    };
    let broken = write("broken.toml", "[platform\nnode-count = 2");
    assert_eq!(mtcsim(dir.path(), &["run", &broken]).status.code(), Some(2));
    assert_eq!(mtcsim(dir.path(), &["validate", &broken]).status.code(), Some(2));

    let invalid = write("invalid.toml", &SMALL.replace("block-granularity = 1", "block-granularity = 3"));
    assert_eq!(mtcsim(dir.path(), &["run", &invalid]).status.code(), Some(3));
    assert_eq!(mtcsim(dir.path(), &["validate", &invalid]).status.code(), Some(3));

    let halts = write("halts.toml", &format!("{SMALL}\n[[policy.resilience.failures]]\nkind = \"strategic\"\nat-sec = 1.0\n"));
    let o = mtcsim(dir.path(), &["run", &halts]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("completion"));

    let ok = write("ok.toml", SMALL);
    let o = mtcsim(dir.path(), &["validate", &ok]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "ok");
}

#[test]
fn compare_prints_utilization_delta() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtcsim(dir.path(), &["compare", &cfg("long-tail-static.toml"), &cfg("long-tail-dynamic.toml")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    let util = out.lines().find(|l| l.starts_with("utilization")).unwrap();
    assert!(util.ends_with("+0.562500"), "{util}");
    assert!(dir.path().join("comparison.csv").exists());
}

#[test]
fn compare_rejects_mismatched_workload_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let other = std::fs::read_to_string(configs().join("long-tail-dynamic.toml")).unwrap().replace("workload-seed = 1", "workload-seed = 2");
    let p = dir.path().join("other.toml");
    std::fs::write(&p, other.replace("workloads/long-tail.wl", &configs().join("workloads/long-tail.wl").to_string_lossy())).unwrap();
    let o = mtcsim(dir.path(), &["compare", &cfg("long-tail-static.toml"), p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incompatible"));
}

#[test]
fn generated_workload_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    let wl = dir.path().join("chain.wl");
    let o = mtcsim(dir.path(), &["gen", "pipeline-chain", "stages=3", "width=2", "intermediate-bytes=1000", "-o", wl.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&wl).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("task ")).count(), 6);

    let config = SMALL.replace("archetype = \"sweep\"\ntasks = 4", "archetype = \"file\"\npath = \"chain.wl\"");
    let p = dir.path().join("chain.toml");
    std::fs::write(&p, config).unwrap();
    let o = mtcsim(dir.path(), &["run", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("chain.csv")).unwrap();
    assert_eq!(column(&csv, "tasks_executed"), vec!["6"]);

    assert_eq!(mtcsim(dir.path(), &["gen", "no-such-thing", "-o", wl.to_str().unwrap()]).status.code(), Some(2));
}
