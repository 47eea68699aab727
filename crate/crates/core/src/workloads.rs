//! Synthetic workload generators and the line-oriented workload file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    Convergence, DataKind, DataRef, GraphError, IterationTemplate, TaskGraph, TaskSpec, TemplateInput, TemplateTask,
};
use crate::ids::DataId;
use crate::kernel::{sample, DistError, Distribution, RngStream};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("workload file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot read workload file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A generated graph plus the run settings its archetype implies.
#[derive(Clone, Debug)]
pub struct GeneratedWorkload {
    pub graph: TaskGraph,
    pub kill_cap_sec: Option<f64>,
    pub max_retries: Option<u32>,
}

impl From<TaskGraph> for GeneratedWorkload {
    fn from(graph: TaskGraph) -> Self {
        Self { graph, kill_cap_sec: None, max_retries: None }
    }
}

fn sixty() -> Distribution {
    Distribution::constant(60.0)
}
fn one() -> u32 {
    1
}
fn two() -> u32 {
    2
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "archetype", rename_all = "kebab-case")]
pub enum WorkloadSpec {
    #[serde(rename_all = "kebab-case")]
    Sweep {
        #[serde(default)]
        tasks: u32,
        /// Explicit per-task runtimes; overrides `tasks` and `runtime`.
        #[serde(default)]
        runtimes_sec: Option<Vec<f64>>,
        #[serde(default = "sixty")]
        runtime: Distribution,
        #[serde(default)]
        common_input_bytes: u64,
        #[serde(default)]
        unique_input_bytes: u64,
        #[serde(default)]
        output_bytes: u64,
    },
    #[serde(rename_all = "kebab-case")]
    AllPairs {
        m: u32,
        k: u32,
        #[serde(default = "sixty")]
        runtime: Distribution,
        #[serde(default)]
        input_bytes: u64,
        #[serde(default)]
        output_bytes: u64,
    },
    #[serde(rename_all = "kebab-case")]
    PipelineChain {
        stages: u32,
        #[serde(default = "one")]
        width: u32,
        #[serde(default = "sixty")]
        runtime: Distribution,
        #[serde(default)]
        input_bytes: u64,
        #[serde(default)]
        intermediate_bytes: u64,
        #[serde(default)]
        output_bytes: u64,
        #[serde(default = "yes")]
        grouped: bool,
    },
    #[serde(rename_all = "kebab-case")]
    ScatterGather {
        tasks: u32,
        #[serde(default = "sixty")]
        runtime: Distribution,
        #[serde(default)]
        common_input_bytes: u64,
        #[serde(default)]
        output_bytes: u64,
        #[serde(default)]
        combinable: bool,
    },
    #[serde(rename_all = "kebab-case")]
    Iterative {
        body_size: u32,
        max_iterations: u32,
        #[serde(default = "sixty")]
        runtime: Distribution,
        #[serde(default)]
        converge_at_iteration: Option<u32>,
        #[serde(default)]
        converge_probability: Option<f64>,
        #[serde(default)]
        data_bytes: u64,
    },
    #[serde(rename_all = "kebab-case")]
    BranchAndBound {
        depth: u32,
        #[serde(default = "two")]
        branching: u32,
        #[serde(default)]
        prune_probability: f64,
        #[serde(default = "sixty")]
        runtime: Distribution,
        #[serde(default)]
        data_bytes: u64,
    },
    DockLike {
        tasks: u32,
    },
    BlastLike {
        tasks: u32,
    },
    MontageLike {
        images: u32,
    },
    DeemLike {
        tasks: u32,
    },
    OopsLike {
        tasks: u32,
    },
    SocialLearning {
        strategies: u32,
    },
    File {
        path: PathBuf,
    },
}

impl WorkloadSpec {
    pub fn archetype(&self) -> &'static str {
        match self {
            WorkloadSpec::Sweep { .. } => "sweep",
            WorkloadSpec::AllPairs { .. } => "all-pairs",
            WorkloadSpec::PipelineChain { .. } => "pipeline-chain",
            WorkloadSpec::ScatterGather { .. } => "scatter-gather",
            WorkloadSpec::Iterative { .. } => "iterative",
            WorkloadSpec::BranchAndBound { .. } => "branch-and-bound",
            WorkloadSpec::DockLike { .. } => "dock-like",
            WorkloadSpec::BlastLike { .. } => "blast-like",
            WorkloadSpec::MontageLike { .. } => "montage-like",
            WorkloadSpec::DeemLike { .. } => "deem-like",
            WorkloadSpec::OopsLike { .. } => "oops-like",
            WorkloadSpec::SocialLearning { .. } => "social-learning",
            WorkloadSpec::File { .. } => "file",
        }
    }

    /// Builds the graph. Relative file paths resolve against `base`.
    pub fn generate(&self, seed: u64, base: &Path) -> Result<GeneratedWorkload, WorkloadError> {
        let rng = &mut RngStream::new(seed, RngStream::RUNTIMES);
        let g = match self {
            WorkloadSpec::Sweep { runtimes_sec: Some(list), common_input_bytes, unique_input_bytes, output_bytes, .. } => {
                sweep_with(list.len() as u32, |i, _| Ok(list[i as usize]), *common_input_bytes, *unique_input_bytes, *output_bytes, rng)?
            }
            WorkloadSpec::Sweep { tasks, runtime, common_input_bytes, unique_input_bytes, output_bytes, .. } => {
                gen_sweep(*tasks, runtime, *common_input_bytes, *unique_input_bytes, *output_bytes, rng)?
            }
            WorkloadSpec::AllPairs { m, k, runtime, input_bytes, output_bytes } => {
                gen_all_pairs(*m, *k, runtime, *input_bytes, *output_bytes, rng)?
            }
            WorkloadSpec::PipelineChain { stages, width, runtime, input_bytes, intermediate_bytes, output_bytes, grouped } => {
                gen_pipeline(*stages, *width, runtime, *input_bytes, *intermediate_bytes, *output_bytes, *grouped, rng)?
            }
            WorkloadSpec::ScatterGather { tasks, runtime, common_input_bytes, output_bytes, combinable } => {
                gen_scatter_gather(*tasks, runtime, *common_input_bytes, *output_bytes, *combinable, rng)?
            }
            WorkloadSpec::Iterative { body_size, max_iterations, runtime, converge_at_iteration, converge_probability, data_bytes } => {
                let conv = match (converge_at_iteration, converge_probability) {
                    (Some(k), _) => Convergence::AtIteration(*k),
                    (None, Some(p)) => Convergence::Probability(*p),
                    (None, None) => Convergence::Never,
                };
                gen_iterative(*body_size, *max_iterations, runtime, conv, *data_bytes, rng)?
            }
            WorkloadSpec::BranchAndBound { depth, branching, prune_probability, runtime, data_bytes } => {
                gen_branch_and_bound(*depth, *branching, *prune_probability, runtime, *data_bytes, rng)?
            }
            WorkloadSpec::DockLike { tasks } => dock_like(*tasks, rng)?,
            WorkloadSpec::BlastLike { tasks } => blast_like(*tasks, rng)?,
            WorkloadSpec::MontageLike { images } => montage_like(*images, rng)?,
            WorkloadSpec::DeemLike { tasks } => return deem_like(*tasks, rng),
            WorkloadSpec::OopsLike { tasks } => oops_like(*tasks, rng)?,
            WorkloadSpec::SocialLearning { strategies } => social_learning(*strategies, rng)?,
            WorkloadSpec::File { path } => {
                let full = if path.is_absolute() { path.clone() } else { base.join(path) };
                let text = std::fs::read_to_string(&full).map_err(|source| WorkloadError::Io { path: full.clone(), source })?;
                parse_workload(&text)?
            }
        };
        Ok(g.into())
    }
}

fn invalid(msg: &str) -> WorkloadError {
    WorkloadError::Invalid(msg.to_string())
}

/// Sequential id allocator for a graph under construction.
struct Builder {
    g: TaskGraph,
    next_data: u64,
    next_task: u64,
}

impl Builder {
    fn new() -> Self {
        Self { g: TaskGraph::new(), next_data: 0, next_task: 0 }
    }

    fn data(&mut self, size: u64, kind: DataKind) -> Result<u64, WorkloadError> {
        let id = self.next_data;
        self.next_data += 1;
        self.g.add_data(DataRef::new(id, size, kind))?;
        Ok(id)
    }

    fn task(&mut self, spec: impl FnOnce(u64) -> TaskSpec) -> Result<u64, WorkloadError> {
        let id = self.next_task;
        self.next_task += 1;
        self.g.add_task(spec(id))?;
        Ok(id)
    }
}

fn sweep_with(
    n: u32,
    mut runtime: impl FnMut(u32, &mut RngStream) -> Result<f64, WorkloadError>,
    common: u64,
    unique: u64,
    output: u64,
    rng: &mut RngStream,
) -> Result<TaskGraph, WorkloadError> {
    if n == 0 {
        return Ok(TaskGraph::new());
    }
    let mut b = Builder::new();
    let c = b.data(common, DataKind::CommonInput)?;
    for i in 0..n {
        let u = b.data(unique, DataKind::UniqueInput)?;
        let o = b.data(output, DataKind::Output)?;
        let rt = runtime(i, rng)?;
        b.task(|id| TaskSpec::new(id, rt).inputs([c, u]).outputs([o]))?;
    }
    Ok(b.g)
}

/// `n` independent tasks sharing one common input, each with its own
/// unique input and output. `n = 0` gives an empty graph.
pub fn gen_sweep(n: u32, runtime: &Distribution, common: u64, unique: u64, output: u64, rng: &mut RngStream) -> Result<TaskGraph, WorkloadError> {
    runtime.validate()?;
    sweep_with(n, |_, r| Ok(sample(runtime, r)?), common, unique, output, rng)
}

/// `m * k` compare tasks over row and column inputs, plus one gather.
pub fn gen_all_pairs(m: u32, k: u32, runtime: &Distribution, input: u64, output: u64, rng: &mut RngStream) -> Result<TaskGraph, WorkloadError> {
    if m == 0 || k == 0 {
        return Err(invalid("all-pairs needs m, k >= 1"));
    }
    runtime.validate()?;
    let mut b = Builder::new();
    let rows: Vec<u64> = (0..m).map(|_| b.data(input, DataKind::UniqueInput)).collect::<Result<_, _>>()?;
    let cols: Vec<u64> = (0..k).map(|_| b.data(input, DataKind::UniqueInput)).collect::<Result<_, _>>()?;
    let mut outs = Vec::with_capacity((m * k) as usize);
    for r in &rows {
        for c in &cols {
            let o = b.data(output, DataKind::Intermediate)?;
            let rt = sample(runtime, rng)?;
            b.task(|id| TaskSpec::new(id, rt).inputs([*r, *c]).outputs([o]))?;
            outs.push(o);
        }
    }
    let result = b.data(output, DataKind::Output)?;
    let rt = sample(runtime, rng)?;
    b.task(|id| TaskSpec::new(id, rt).inputs(outs).outputs([result]).combinable())?;
    Ok(b.g)
}

/// `width` independent chains of `stages` tasks. Each chain is one
/// pipeline group when `grouped`.
#[allow(clippy::too_many_arguments)]
pub fn gen_pipeline(
    stages: u32,
    width: u32,
    runtime: &Distribution,
    input: u64,
    intermediate: u64,
    output: u64,
    grouped: bool,
    rng: &mut RngStream,
) -> Result<TaskGraph, WorkloadError> {
    if stages == 0 || width == 0 {
        return Err(invalid("pipeline needs stages, width >= 1"));
    }
    runtime.validate()?;
    let mut b = Builder::new();
    for chain in 0..width {
        let mut prev = b.data(input, DataKind::UniqueInput)?;
        for s in 0..stages {
            let last = s + 1 == stages;
            let out = b.data(if last { output } else { intermediate }, if last { DataKind::Output } else { DataKind::Intermediate })?;
            let rt = sample(runtime, rng)?;
            b.task(|id| {
                let t = TaskSpec::new(id, rt).inputs([prev]).outputs([out]);
                if grouped {
                    t.group(u64::from(chain))
                } else {
                    t
                }
            })?;
            prev = out;
        }
    }
    Ok(b.g)
}

/// One common input scattered to `n` tasks whose outputs one gather reads.
pub fn gen_scatter_gather(n: u32, runtime: &Distribution, common: u64, output: u64, combinable: bool, rng: &mut RngStream) -> Result<TaskGraph, WorkloadError> {
    if n == 0 {
        return Err(invalid("scatter-gather needs tasks >= 1"));
    }
    runtime.validate()?;
    let mut b = Builder::new();
    let c = b.data(common, DataKind::CommonInput)?;
    let mut outs = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let o = b.data(output, DataKind::Intermediate)?;
        let rt = sample(runtime, rng)?;
        b.task(|id| TaskSpec::new(id, rt).inputs([c]).outputs([o]))?;
        outs.push(o);
    }
    let result = b.data(output, DataKind::Output)?;
    let rt = sample(runtime, rng)?;
    b.task(|id| {
        let t = TaskSpec::new(id, rt).inputs(outs).outputs([result]);
        if combinable {
            t.combinable()
        } else {
            t
        }
    })?;
    Ok(b.g)
}

/// An iteration template of `body` tasks: `body - 1` workers reading the
/// shared input and the previous iteration's gather output, then a gather
/// over them that decides convergence.
pub fn gen_iterative(
    body: u32,
    max_iterations: u32,
    runtime: &Distribution,
    convergence: Convergence,
    data: u64,
    rng: &mut RngStream,
) -> Result<TaskGraph, WorkloadError> {
    if body == 0 || max_iterations == 0 {
        return Err(invalid("iterative needs body-size, max-iterations >= 1"));
    }
    runtime.validate()?;
    let mut b = Builder::new();
    let seed_input = DataId(b.data(data, DataKind::CommonInput)?);
    let gather = (body - 1) as usize;
    let mut tasks = Vec::with_capacity(body as usize);
    for k in 0..gather {
        let _ = k;
        tasks.push(TemplateTask {
            runtime: sample(runtime, rng)?,
            estimate: None,
            inputs: vec![TemplateInput::External(seed_input), TemplateInput::Previous(gather)],
            output_size: data,
            output_kind: DataKind::Intermediate,
        });
    }
    let mut gather_inputs: Vec<TemplateInput> = (0..gather).map(TemplateInput::Local).collect();
    gather_inputs.push(TemplateInput::External(seed_input));
    if gather == 0 {
        gather_inputs.push(TemplateInput::Previous(0));
    }
    tasks.push(TemplateTask {
        runtime: sample(runtime, rng)?,
        estimate: None,
        inputs: gather_inputs,
        output_size: data,
        output_kind: DataKind::Output,
    });
    b.g.add_template(IterationTemplate::new(tasks, gather, max_iterations, convergence))?;
    Ok(b.g)
}

/// Full `branching`-ary tree of `depth` levels below the root. Completing
/// tasks prune sibling branches with `prune_probability` at run time.
pub fn gen_branch_and_bound(
    depth: u32,
    branching: u32,
    prune_probability: f64,
    runtime: &Distribution,
    data: u64,
    rng: &mut RngStream,
) -> Result<TaskGraph, WorkloadError> {
    if depth == 0 || branching < 2 {
        return Err(invalid("branch-and-bound needs depth >= 1, branching >= 2"));
    }
    if !(0.0..=1.0).contains(&prune_probability) {
        return Err(invalid("prune-probability must be in [0, 1]"));
    }
    runtime.validate()?;
    let b64 = u64::from(branching);
    let total = (b64.pow(depth + 1) - 1) / (b64 - 1);
    let interior = (b64.pow(depth) - 1) / (b64 - 1);
    let mut b = Builder::new();
    for i in 0..total {
        let kind = if i < interior { DataKind::Intermediate } else { DataKind::Output };
        b.data(data, kind)?;
    }
    for i in 0..total {
        let rt = sample(runtime, rng)?;
        b.task(|id| {
            let t = TaskSpec::new(id, rt).outputs([i]);
            if i == 0 {
                t
            } else {
                t.inputs([(i - 1) / b64])
            }
        })?;
    }
    b.g.prune_probability = Some(prune_probability);
    Ok(b.g)
}

/// Docking sweep: 713 +/- 560 s lognormal, a ~10 MB shared grid, ~10 KB
/// ligand and result per task.
pub fn dock_like(n: u32, rng: &mut RngStream) -> Result<TaskGraph, WorkloadError> {
    gen_sweep(n, &Distribution::lognormal(713.0, 560.0), 10_000_000, 10_000, 10_000, rng)
}

/// Sequence search: one ~1 GB database shared by every task, ~1 KB query,
/// about a minute each.
pub fn blast_like(n: u32, rng: &mut RngStream) -> Result<TaskGraph, WorkloadError> {
    gen_sweep(n, &Distribution::constant(60.0), 1_000_000_000, 1_000, 1_000, rng)
}

/// Mosaic pipeline: reproject each image, fit a background model in a
/// serialized chain of `images / 10` steps, rectify each image against the
/// model, then co-add everything. Images are ~0.5 megapixel at 4 bytes.
pub fn montage_like(images: u32, rng: &mut RngStream) -> Result<TaskGraph, WorkloadError> {
    if images == 0 {
        return Err(invalid("montage-like needs images >= 1"));
    }
    const IMAGE: u64 = 2_000_000;
    let reproject = Distribution::lognormal(20.0, 5.0);
    let rectify = Distribution::lognormal(10.0, 3.0);
    let mut b = Builder::new();
    let mut projected = Vec::with_capacity(images as usize);
    for _ in 0..images {
        let raw = b.data(IMAGE, DataKind::UniqueInput)?;
        let out = b.data(IMAGE, DataKind::Intermediate)?;
        let rt = sample(&reproject, rng)?;
        b.task(|id| TaskSpec::new(id, rt).inputs([raw]).outputs([out]))?;
        projected.push(out);
    }
    let chain = (images / 10).max(1);
    let mut model = None;
    for k in 0..chain {
        let out = b.data(1_000, DataKind::Intermediate)?;
        let inputs: Vec<u64> = match model {
            None => projected.clone(),
            Some(prev) => vec![prev],
        };
        let _ = k;
        b.task(|id| TaskSpec::new(id, 5.0).inputs(inputs).outputs([out]))?;
        model = Some(out);
    }
    let model = model.expect("chain has at least one step");
    let mut rectified = Vec::with_capacity(images as usize);
    for p in &projected {
        let out = b.data(IMAGE, DataKind::Intermediate)?;
        let rt = sample(&rectify, rng)?;
        b.task(|id| TaskSpec::new(id, rt).inputs([*p, model]).outputs([out]))?;
        rectified.push(out);
    }
    let mosaic = b.data(IMAGE * u64::from(images) / 4, DataKind::Output)?;
    b.task(|id| TaskSpec::new(id, 600.0).inputs(rectified).outputs([mosaic]))?;
    Ok(b.g)
}

/// Database screening with runtimes from a few minutes to several hours.
/// The lognormal puts its 5th and 95th percentiles at 3 min and 3.5 h
/// (mean ~3475 s, sd ~7190 s); runs are killed at 10 h and not retried.
pub fn deem_like(n: u32, rng: &mut RngStream) -> Result<GeneratedWorkload, WorkloadError> {
    let graph = gen_sweep(n, &Distribution::lognormal(3475.0, 7190.0), 1_000_000, 1_000, 1_000, rng)?;
    Ok(GeneratedWorkload { graph, kill_cap_sec: Some(36_000.0), max_retries: Some(0) })
}

/// Protein folding sweep, 0.5 to 3 CPU-hours per task (shape assumed
/// uniform).
pub fn oops_like(n: u32, rng: &mut RngStream) -> Result<TaskGraph, WorkloadError> {
    gen_sweep(n, &Distribution::Uniform { low_sec: 1800.0, high_sec: 10_800.0 }, 1_000_000, 10_000, 10_000, rng)
}

/// Pairwise competitions among `strategies` strategies.
pub fn social_learning(strategies: u32, rng: &mut RngStream) -> Result<TaskGraph, WorkloadError> {
    gen_all_pairs(strategies, strategies, &Distribution::constant(60.0), 1_000, 1_000, rng)
}

fn parse_list(v: &str, line: usize) -> Result<Vec<u64>, WorkloadError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| WorkloadError::Parse { line, msg: format!("bad id `{x}`: {e}") }))
        .collect()
}

/// Parses the line-oriented workload format:
///
/// ```text
/// data <id> size=<bytes> kind=<kind>
/// task <id> runtime=<s> [estimate=<s>] [priority=<p>] [group=<g>] [width=<n>] in=<d1,...> out=<d1,...>
/// option prune-probability=<p>
/// ```
///
/// `#` starts a comment.
pub fn parse_workload(text: &str) -> Result<TaskGraph, WorkloadError> {
    let mut g = TaskGraph::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |msg: String| WorkloadError::Parse { line, msg };
        let mut words = content.split_whitespace();
        let record = words.next().expect("non-empty");
        let mut kv = Vec::new();
        let mut id = None;
        for w in words {
            match w.split_once('=') {
                Some((k, v)) => kv.push((k, v)),
                None if id.is_none() => id = Some(w.parse::<u64>().map_err(|e| err(format!("bad id `{w}`: {e}")))?),
                None => return Err(err(format!("unexpected token `{w}`"))),
            }
        }
        let num = |k: &str, v: &str| v.parse::<f64>().map_err(|e| err(format!("bad {k} `{v}`: {e}")));
        match record {
            "data" => {
                let id = id.ok_or_else(|| err("data record needs an id".into()))?;
                let (mut size, mut kind) = (None, None);
                for (k, v) in kv {
                    match k {
                        "size" => size = Some(v.parse::<u64>().map_err(|e| err(format!("bad size `{v}`: {e}")))?),
                        "kind" => kind = Some(v.parse::<DataKind>().map_err(err)?),
                        _ => return Err(err(format!("unknown data field `{k}`"))),
                    }
                }
                let size = size.ok_or_else(|| err("data record needs size=".into()))?;
                let kind = kind.ok_or_else(|| err("data record needs kind=".into()))?;
                g.add_data(DataRef::new(id, size, kind)).map_err(|e| err(e.to_string()))?;
            }
            "task" => {
                let id = id.ok_or_else(|| err("task record needs an id".into()))?;
                let mut spec = TaskSpec::new(id, 0.0);
                let mut have_runtime = false;
                for (k, v) in kv {
                    match k {
                        "runtime" => {
                            spec.runtime = num(k, v)?;
                            have_runtime = true;
                        }
                        "estimate" => spec.estimate = Some(num(k, v)?),
                        "priority" => spec.priority = num(k, v)?,
                        "group" => spec.group = Some(v.parse().map_err(|e| err(format!("bad group `{v}`: {e}")))?),
                        "width" => spec.width = v.parse().map_err(|e| err(format!("bad width `{v}`: {e}")))?,
                        "combinable" => spec.combinable = v == "true" || v == "1",
                        "in" => spec.inputs = parse_list(v, line)?.into_iter().map(DataId).collect(),
                        "out" => spec.outputs = parse_list(v, line)?.into_iter().map(DataId).collect(),
                        _ => return Err(err(format!("unknown task field `{k}`"))),
                    }
                }
                if !have_runtime {
                    return Err(err("task record needs runtime=".into()));
                }
                g.add_task(spec).map_err(|e| err(e.to_string()))?;
            }
            "option" => {
                for (k, v) in kv {
                    match k {
                        "prune-probability" => g.prune_probability = Some(num(k, v)?),
                        _ => return Err(err(format!("unknown option `{k}`"))),
                    }
                }
            }
            other => return Err(err(format!("unknown record `{other}`"))),
        }
    }
    g.validate()?;
    Ok(g)
}

fn join(ids: &std::collections::BTreeSet<DataId>) -> String {
    ids.iter().map(|d| d.0.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes a graph in the workload format. Iteration templates have no
/// file representation and are rejected.
pub fn write_workload(g: &TaskGraph) -> Result<String, WorkloadError> {
    if g.templates().next().is_some() {
        return Err(invalid("graphs with iteration templates cannot be written as workload files"));
    }
    let mut out = String::new();
    if let Some(p) = g.prune_probability {
        writeln!(out, "option prune-probability={p}").expect("string write");
    }
    for d in g.data_items() {
        writeln!(out, "data {} size={} kind={}", d.id, d.size, d.kind).expect("string write");
    }
    for t in g.tasks() {
        write!(out, "task {} runtime={}", t.id, t.runtime).expect("string write");
        if let Some(e) = t.estimate {
            write!(out, " estimate={e}").expect("string write");
        }
        if t.priority != 0.0 {
            write!(out, " priority={}", t.priority).expect("string write");
        }
        if let Some(gr) = t.group {
            write!(out, " group={gr}").expect("string write");
        }
        if t.width != 1 {
            write!(out, " width={}", t.width).expect("string write");
        }
        if t.combinable {
            write!(out, " combinable=true").expect("string write");
        }
        writeln!(out, " in={} out={}", join(&t.inputs), join(&t.outputs)).expect("string write");
    }
    Ok(out)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn closed_form_counts(depth in 1u32..6, branching in 2u32..4, n in 1u32..200, m in 1u32..12, k in 1u32..12) {
            let r = &mut RngStream::new(3, RngStream::RUNTIMES);
            let c = Distribution::constant(1.0);
            let b = u64::from(branching);
            let bb = gen_branch_and_bound(depth, branching, 0.0, &c, 0, r).unwrap();
            prop_assert_eq!(bb.task_count() as u64, (b.pow(depth + 1) - 1) / (b - 1));
            let sw = gen_sweep(n, &c, 1, 1, 1, r).unwrap();
            prop_assert_eq!(sw.task_count(), n as usize);
            prop_assert_eq!(sw.data_count(), 2 * n as usize + 1);
            let ap = gen_all_pairs(m, k, &c, 1, 1, r).unwrap();
            prop_assert_eq!(ap.task_count(), (m * k + 1) as usize);
            prop_assert!(ap.validate().is_ok());
        }
    }
}
