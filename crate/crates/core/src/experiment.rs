//! Seeded experiment runs, CSV output and policy comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{self, ConfigError, ExperimentConfig};
use crate::engine::{Engine, RunStatus};
use crate::metrics::{check_trace, RunReport};
use crate::platform::Route;
use crate::runner::run_seeds;
use crate::workloads::WorkloadSpec;

/// Overrides `run.output-dir`.
pub const OUT_DIR_ENV: &str = "MTCSIM_OUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentError {
    Config(ConfigError),
    Incompatible(String),
    Invariant { label: String, seed: u64, invariant: String, detail: String },
    Io(String),
}

impl ExperimentError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(ConfigError::Parse(_)) => 2,
            ExperimentError::Config(ConfigError::Invalid(_)) | ExperimentError::Incompatible(_) => 3,
            ExperimentError::Invariant { .. } => 4,
            ExperimentError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExperimentError::Config(e) => e.fmt(f),
            ExperimentError::Incompatible(m) => write!(f, "incompatible workloads: {m}"),
            ExperimentError::Invariant { label, seed, invariant, detail } => {
                write!(f, "{label} seed {seed}: invariant `{invariant}` violated: {detail}")
            }
            ExperimentError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for ExperimentError {}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        ExperimentError::Config(e)
    }
}

fn io(path: &Path, e: std::io::Error) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

/// Everything one seeded run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub status: RunStatus,
    pub report: Option<RunReport>,
    pub trace: String,
    pub checkpoint: Option<String>,
    /// First violated invariant, by name.
    pub violation: Option<(String, String)>,
}

/// Runs one seed to completion and checks the trace.
pub fn simulate(cfg: &ExperimentConfig, base: &Path, label: &str, seed: u64) -> Result<RunOutcome, ExperimentError> {
    let invalid = |e: &dyn std::fmt::Display| ExperimentError::Config(ConfigError::Invalid(e.to_string()));
    let w = cfg.workload.generate(cfg.workload_seed_for(seed), base).map_err(|e| invalid(&e))?;
    let mut engine = Engine::new(cfg.sim_config(seed, &w), w.graph).map_err(|e| invalid(&e))?;
    let mut violation = match engine.run() {
        Ok(RunStatus::Finished) => None,
        Ok(RunStatus::Halted) => Some(("completion".to_string(), "run halted before every task finished".to_string())),
        Ok(_) => {
            let why = engine.error().map(|e| e.to_string()).unwrap_or_else(|| "no runnable work remains".into());
            Some(("progress".to_string(), why))
        }
        Err(e) => Some(("engine".to_string(), e.to_string())),
    };
    if let Err(v) = check_trace(engine.trace()) {
        violation.get_or_insert((v.invariant.to_string(), v.detail));
    }
    let report = match engine.report(label) {
        Ok(r) => Some(r),
        Err(e) => {
            violation.get_or_insert(("malformed-trace".to_string(), e.to_string()));
            None
        }
    };
    Ok(RunOutcome {
        seed,
        status: engine.status(),
        report,
        trace: engine.trace().to_text(),
        checkpoint: engine.last_checkpoint().map(|c| c.to_json()),
        violation,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub label: String,
    pub outcomes: Vec<RunOutcome>,
    pub csv_path: PathBuf,
}

impl ExperimentResult {
    pub fn reports(&self) -> Vec<&RunReport> {
        self.outcomes.iter().filter_map(|o| o.report.as_ref()).collect()
    }
}

/// `MTCSIM_OUT_DIR` if set, else the config's output directory.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.run.output_dir.clone())
}

fn label_for(cfg: &ExperimentConfig, path: &Path) -> String {
    cfg.run.label.clone().unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into()))
}

/// Parses, validates and runs a config file, writing outputs.
pub fn run_experiment(path: &Path) -> Result<ExperimentResult, ExperimentError> {
    let (cfg, base) = config::load(path)?;
    cfg.validate(&base)?;
    let label = label_for(&cfg, path);
    execute(&cfg, &base, &label, &output_dir(&cfg))
}

/// Runs every seed and writes `<label>.csv`, plus one trace per seed when
/// tracing is on and the last checkpoint when checkpointing is on. Outputs
/// are written even when a run violates an invariant; the error follows.
pub fn execute(cfg: &ExperimentConfig, base: &Path, label: &str, out: &Path) -> Result<ExperimentResult, ExperimentError> {
    let outcomes = run_seeds(&cfg.run.seeds, |s| simulate(cfg, base, label, s)).into_iter().collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let csv_path = out.join(format!("{label}.csv"));
    let reports: Vec<RunReport> = outcomes.iter().filter_map(|o| o.report.clone()).collect();
    let file = std::fs::File::create(&csv_path).map_err(|e| io(&csv_path, e))?;
    crate::metrics::write_csv(file, &reports).map_err(|e| ExperimentError::Io(e.to_string()))?;
    for o in &outcomes {
        if cfg.run.trace {
            let p = out.join(format!("{label}-seed{}.trace", o.seed));
            std::fs::write(&p, &o.trace).map_err(|e| io(&p, e))?;
        }
        if let Some(cp) = &o.checkpoint {
            let p = out.join(format!("{label}-seed{}.checkpoint.json", o.seed));
            std::fs::write(&p, cp).map_err(|e| io(&p, e))?;
        }
    }
    if let Some(o) = outcomes.iter().find(|o| o.violation.is_some()) {
        let (invariant, detail) = o.violation.clone().unwrap_or_default();
        return Err(ExperimentError::Invariant { label: label.to_string(), seed: o.seed, invariant, detail });
    }
    Ok(ExperimentResult { label: label.to_string(), outcomes, csv_path })
}

/// A comparison metric: one mean per config and its delta from the first.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub metric: &'static str,
    pub values: Vec<f64>,
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

type Metric = (&'static str, fn(&RunReport) -> f64);

const METRICS: [Metric; 10] = [
    ("makespan_sec", |r| r.makespan),
    ("utilization", |r| r.utilization),
    ("allocated_core_sec", |r| r.allocated_core_seconds),
    ("busy_core_sec", |r| r.busy_core_seconds),
    ("gfs_read_bytes", |r| r.route_bytes(Route::GfsRead) as f64),
    ("network_bytes", |r| r.network_bytes() as f64),
    ("tasks_executed", |r| r.tasks.executed as f64),
    ("tasks_pruned", |r| r.tasks.pruned as f64),
    ("tasks_retried", |r| r.tasks.retried as f64),
    ("final_decile_utilization", |r| r.tail[9]),
];

impl Comparison {
    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// Aligned text table. Delta columns are relative to the first config.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<26}", "metric");
        for l in &self.labels {
            let _ = write!(out, " {l:>18}");
        }
        for l in self.labels.iter().skip(1) {
            let _ = write!(out, " {:>18}", format!("d({l})"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<26}", r.metric);
            for v in &r.values {
                let _ = write!(out, " {v:>18.6}");
            }
            for d in r.deltas.iter().skip(1) {
                let _ = write!(out, " {d:>+18.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["metric".to_string()];
        header.extend(self.labels.iter().cloned());
        header.extend(self.labels.iter().skip(1).map(|l| format!("delta_{l}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.metric.to_string()];
            rec.extend(r.values.iter().map(f64::to_string));
            rec.extend(r.deltas.iter().skip(1).map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn resolved_workload(cfg: &ExperimentConfig, base: &Path) -> WorkloadSpec {
    match &cfg.workload {
        WorkloadSpec::File { path } if !path.is_absolute() => WorkloadSpec::File { path: base.join(path) },
        w => w.clone(),
    }
}

/// Loaded config plus the base directory and label it runs under.
pub type Loaded = (ExperimentConfig, PathBuf, String);

/// Fails unless every config generates the same workloads.
pub fn check_compatible(configs: &[Loaded]) -> Result<(), ExperimentError> {
    if configs.len() < 2 {
        return Err(ConfigError::Invalid("compare needs at least two configs".into()).into());
    }
    let (first, base0, l0) = &configs[0];
    let w0 = resolved_workload(first, base0);
    let s0: Vec<u64> = first.run.seeds.iter().map(|s| first.workload_seed_for(*s)).collect();
    for (c, base, l) in &configs[1..] {
        if resolved_workload(c, base) != w0 {
            return Err(ExperimentError::Incompatible(format!("{l} and {l0} define different workloads")));
        }
        let s: Vec<u64> = c.run.seeds.iter().map(|s| c.workload_seed_for(*s)).collect();
        if s != s0 {
            return Err(ExperimentError::Incompatible(format!("{l} and {l0} use different workload seeds")));
        }
    }
    Ok(())
}

/// Runs already-loaded configs and tabulates their seed-mean metrics.
pub fn compare_loaded(configs: &[Loaded], out: &Path) -> Result<Comparison, ExperimentError> {
    check_compatible(configs)?;
    let mut results = Vec::new();
    for (c, base, label) in configs {
        c.validate(base)?;
        results.push(execute(c, base, label, out)?);
    }
    let rows = METRICS
        .iter()
        .map(|(metric, f)| {
            let values: Vec<f64> = results
                .iter()
                .map(|r| {
                    let rs = r.reports();
                    rs.iter().map(|x| f(x)).sum::<f64>() / rs.len().max(1) as f64
                })
                .collect();
            let deltas = values.iter().map(|v| v - values[0]).collect();
            ComparisonRow { metric, values, deltas }
        })
        .collect();
    Ok(Comparison { labels: results.into_iter().map(|r| r.label).collect(), rows })
}

/// Loads config files and compares them. Duplicate labels get a numeric
/// suffix so their outputs do not collide. Writes `comparison.csv`.
pub fn compare(paths: &[PathBuf]) -> Result<Comparison, ExperimentError> {
    let mut configs: Vec<Loaded> = Vec::new();
    for p in paths {
        let (c, base) = config::load(p)?;
        let mut label = label_for(&c, p);
        if configs.iter().any(|(_, _, l)| *l == label) {
            label = format!("{label}-{}", configs.len() + 1);
        }
        configs.push((c, base, label));
    }
    let out = output_dir(&configs.first().ok_or_else(|| ConfigError::Invalid("no configs".into()))?.0);
    let cmp = compare_loaded(&configs, &out)?;
    let p = out.join("comparison.csv");
    let file = std::fs::File::create(&p).map_err(|e| io(&p, e))?;
    cmp.write_csv(file).map_err(|e| ExperimentError::Io(e.to_string()))?;
    Ok(cmp)
}
