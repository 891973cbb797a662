//! Command implementations behind the `parplan` binary.
//!
//! Each command writes its human-readable report to the given writer and
//! returns the process exit code. Machine-readable output goes to files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use parplan_core::oracle::{run_trials, InstanceBounds, Mismatch, OracleReport};
use parplan_core::search::{discover, SearchOptions, SearchResult};
use parplan_core::selector::SelectorConfig;
use parplan_core::sim::{run, Policy, SimOptions, DEFAULT_NOISE};
use parplan_core::spec::{parse_cluster_spec, parse_job_spec, parse_model_spec, ClusterSpec};
use parplan_core::trace::Trace;
use parplan_core::validate::validate;
use parplan_core::{memory_footprint, workload, CommPlan, Error, JobSpec, ParallelismConfig, Workload};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Mismatch = 1,
    Invalid = 2,
    Infeasible = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Parser)]
#[command(name = "parplan", version, about = "Plan and simulate hybrid-parallel training runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for the cheapest parallelism configuration.
    Plan {
        #[command(flatten)]
        specs: SpecFiles,
        /// Write the chosen configuration as a plan document.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Simulate a run step by step.
    Simulate {
        #[command(flatten)]
        specs: SpecFiles,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_enum, default_value_t = PolicyArg::Static)]
        policy: PolicyArg,
        /// Trace output path; `.jsonl` and `.csv` files are written next to it.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the static and adaptive policies side by side.
    Compare {
        #[command(flatten)]
        specs: SpecFiles,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Cross-check the search against brute force on random instances.
    Oracle {
        /// Draw every instance on this cluster instead of a random one.
        #[arg(long)]
        cluster: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the first diverging instance.
        #[arg(long, default_value = "oracle-repro")]
        repro: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SpecFiles {
    #[arg(long)]
    pub cluster: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub job: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunFlags {
    /// Start from this plan document instead of searching.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Overrides the job seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Half-width of the multiplicative iteration-time noise.
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: f64,
    /// Selector thresholds; overrides the job's `selector` section.
    #[arg(long)]
    pub selector_config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Static,
    Adaptive,
}

/// An error already mapped to its exit code.
#[derive(Debug)]
pub struct Failure {
    pub status: ExitStatus,
    pub message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure {
            status: ExitStatus::Invalid,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::NoFeasibleStrategy(_) => ExitStatus::Infeasible,
            _ => ExitStatus::Invalid,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<ExitStatus, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn in_file<T>(path: &Path, r: parplan_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

struct Loaded {
    cluster: ClusterSpec,
    job: JobSpec,
    workload: Workload,
    problems: Vec<String>,
}

fn load(specs: &SpecFiles) -> Result<Loaded, Failure> {
    let cluster = in_file(&specs.cluster, parse_cluster_spec(&read(&specs.cluster)?))?;
    let model = in_file(&specs.model, parse_model_spec(&read(&specs.model)?))?;
    let job = in_file(&specs.job, parse_job_spec(&read(&specs.job)?))?;
    let problems = validate(&cluster, &model, &job, &SearchOptions::default());
    let workload = workload(&cluster, &model, &job, CommPlan::default())?;
    Ok(Loaded {
        cluster,
        job,
        workload,
        problems,
    })
}

fn search(l: &Loaded) -> Result<SearchResult, Failure> {
    discover(&l.workload, &SearchOptions::default()).map_err(|e| match e {
        Error::NoFeasibleStrategy(_) if !l.problems.is_empty() => Failure {
            status: ExitStatus::Infeasible,
            message: l.problems.join("\n"),
        },
        e => e.into(),
    })
}

pub fn cmd_plan(specs: &SpecFiles, emit: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let l = load(specs)?;
    let r = search(&l)?;
    let c = &r.best;
    let cost = &r.best_cost;
    let mem = &r.memory;
    let w = |out: &mut dyn Write| -> io::Result<()> {
        writeln!(out, "cluster: {} GPUs ({} per node)", l.cluster.total_gpus(), l.cluster.gpus_per_node)?;
        writeln!(out, "config: {}", c.id())?;
        writeln!(
            out,
            "  dp={} tp={} pp={} micro_batch={} x{} zero={}",
            c.dp, c.tp, c.pp, c.micro_batch_size, c.num_micro_batches, c.zero_stage
        )?;
        writeln!(out, "  stage boundaries: {:?}", c.stage_boundaries)?;
        let strategies: Vec<&str> = c
            .layer_strategies
            .iter()
            .map(|s| match s {
                parplan_core::LayerStrategy::DataReplicated => "DR",
                parplan_core::LayerStrategy::TensorParallel => "TP",
            })
            .collect();
        writeln!(out, "  layer strategies: {}", strategies.join(" "))?;
        writeln!(out, "cost:")?;
        for (name, v) in [
            ("compute", cost.compute_s),
            ("tp comm", cost.tp_comm_s),
            ("dp sync", cost.dp_sync_s),
            ("p2p", cost.p2p_s),
            ("bubble", cost.bubble_s),
        ] {
            writeln!(out, "  {name:<10} {v:.6e} s")?;
        }
        writeln!(out, "  {:<10} {:.6e} s", "total", cost.total_s)?;
        writeln!(out, "  throughput {:.3} samples/s", cost.throughput)?;
        writeln!(out, "  comm fraction {:.4}", cost.comm_fraction)?;
        writeln!(out, "memory:")?;
        writeln!(out, "  model state {:.4e} B", mem.model_state_bytes)?;
        writeln!(out, "  activations {:.4e} B", mem.activation_bytes)?;
        writeln!(out, "  total       {:.4e} B (headroom {:.3})", mem.total_bytes, mem.headroom_fraction)?;
        writeln!(out, "evaluated {} candidates", r.evaluated_count)?;
        writeln!(out, "pruned:")?;
        for (d, rule) in &r.pruning_log {
            writeln!(out, "  {d} {rule}")?;
        }
        Ok(())
    };
    w(out).map_err(|e| Failure::invalid(e.to_string()))?;
    if let Some(path) = emit {
        fs::write(path, pretty(c)).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    }
    Ok(ExitStatus::Success)
}

/// Reads a plan document and checks it against the workload.
pub fn load_plan(path: &Path, w: &Workload) -> Result<ParallelismConfig, Failure> {
    let text = read(path)?;
    let c: ParallelismConfig = in_file(path, serde_json::from_str(&text).map_err(Error::from))?;
    in_file(path, c.check(w.hw.total_gpus, &w.model, w.global_batch()))?;
    if !memory_footprint(&c, w).fits() {
        return Err(Failure::invalid(format!("{}: plan does not fit in device memory", path.display())));
    }
    Ok(c)
}

struct Prepared {
    job: JobSpec,
    workload: Workload,
    initial: ParallelismConfig,
    selector: SelectorConfig,
    options: SimOptions,
}

fn prepare(specs: &SpecFiles, flags: &RunFlags) -> Result<Prepared, Failure> {
    let l = load(specs)?;
    let initial = match &flags.plan {
        Some(p) => load_plan(p, &l.workload)?,
        None => search(&l)?.best,
    };
    let selector = match &flags.selector_config {
        Some(p) => {
            let c: SelectorConfig = in_file(p, serde_json::from_str(&read(p)?).map_err(Error::from))?;
            in_file(p, c.check())?;
            c
        }
        None => l.job.selector.clone().unwrap_or_default(),
    };
    let mut job = l.job;
    if let Some(s) = flags.seed {
        job.seed = s;
    }
    Ok(Prepared {
        job,
        workload: l.workload,
        initial,
        selector,
        options: SimOptions {
            noise: flags.noise,
            ..SimOptions::default()
        },
    })
}

fn simulate(p: &Prepared, policy: PolicyArg) -> Result<Trace, Failure> {
    let policy = match policy {
        PolicyArg::Static => Policy::Static,
        PolicyArg::Adaptive => Policy::Adaptive(p.selector.clone()),
    };
    Ok(run(&p.initial, &p.workload, &p.job, &policy, p.options.clone())?)
}

/// `out.jsonl` and `out.csv` for a trace path of `out` or `out.jsonl`.
pub fn trace_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.extension().is_some_and(|e| e == "jsonl") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (base.with_file_name(format!("{name}.jsonl")), base.with_file_name(format!("{name}.csv")))
}

fn write_trace(trace: &Trace, path: &Path) -> Result<(), Failure> {
    let (jsonl, csv) = trace_paths(path);
    let io_err = |p: &Path, e: String| Failure::invalid(format!("{}: {e}", p.display()));
    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf).map_err(|e| io_err(&jsonl, e.to_string()))?;
    fs::write(&jsonl, buf).map_err(|e| io_err(&jsonl, e.to_string()))?;
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).map_err(|e| io_err(&csv, e.to_string()))?;
    fs::write(&csv, buf).map_err(|e| io_err(&csv, e.to_string()))?;
    Ok(())
}

pub fn cmd_simulate(
    specs: &SpecFiles,
    flags: &RunFlags,
    policy: PolicyArg,
    trace_path: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    let p = prepare(specs, flags)?;
    let trace = simulate(&p, policy)?;
    if let Some(path) = trace_path {
        write_trace(&trace, path)?;
    }
    let s = trace.summary();
    let w = |out: &mut dyn Write| -> io::Result<()> {
        writeln!(out, "initial config: {}", p.initial.id())?;
        writeln!(out, "steps: {}", s.steps)?;
        writeln!(out, "wall clock: {:.6} s", s.wall_clock_s)?;
        writeln!(out, "mean throughput: {:.3} samples/s", s.mean_throughput)?;
        writeln!(out, "transitions: {}", s.transitions)?;
        for t in trace.transitions() {
            writeln!(
                out,
                "  after step {}: {} -> {} ({:.4e} B, pause {:.4} s) [{}]",
                t.step,
                t.from,
                t.to,
                t.bytes_moved,
                t.pause_s,
                t.flags.join(", ")
            )?;
        }
        Ok(())
    };
    w(out).map_err(|e| Failure::invalid(e.to_string()))?;
    Ok(ExitStatus::Success)
}

pub fn cmd_compare(specs: &SpecFiles, flags: &RunFlags, out: &mut dyn Write) -> CmdResult {
    let p = prepare(specs, flags)?;
    let (st, ad) = std::thread::scope(|s| {
        let st = s.spawn(|| simulate(&p, PolicyArg::Static));
        let ad = s.spawn(|| simulate(&p, PolicyArg::Adaptive));
        (st.join().expect("static run"), ad.join().expect("adaptive run"))
    });
    let (st, ad) = (st?.summary(), ad?.summary());
    let gain = (st.wall_clock_s - ad.wall_clock_s) / st.wall_clock_s;
    let w = |out: &mut dyn Write| -> io::Result<()> {
        writeln!(out, "initial config: {}", p.initial.id())?;
        writeln!(out, "{:<10} {:>16} {:>16} {:>12}", "policy", "wall clock (s)", "samples/s", "transitions")?;
        for (name, s) in [("static", st), ("adaptive", ad)] {
            writeln!(
                out,
                "{name:<10} {:>16.6} {:>16.3} {:>12}",
                s.wall_clock_s, s.mean_throughput, s.transitions
            )?;
        }
        writeln!(out, "relative gain: {:.3}%", gain * 100.0)?;
        Ok(())
    };
    w(out).map_err(|e| Failure::invalid(e.to_string()))?;
    Ok(ExitStatus::Success)
}

/// Writes `cluster.json`, `model.json`, `job.json` and `instance.json` for
/// a diverging instance, so `parplan plan` can replay it.
pub fn dump_repro(m: &Mismatch, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let i = &m.instance;
    fs::write(dir.join("cluster.json"), pretty(&i.cluster))?;
    fs::write(dir.join("model.json"), pretty(&i.model))?;
    fs::write(dir.join("job.json"), pretty(&i.job))?;
    fs::write(dir.join("instance.json"), pretty(i))?;
    Ok(())
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("document serializes") + "\n"
}

/// The oracle command with an injectable planner, so a faulty search can
/// be exercised.
pub fn cmd_oracle_with<P>(
    cluster: Option<&Path>,
    trials: usize,
    seed: u64,
    repro: &Path,
    planner: P,
    out: &mut dyn Write,
) -> CmdResult
where
    P: Fn(&Workload, &SearchOptions) -> parplan_core::Result<SearchResult> + Sync,
{
    let cluster = match cluster {
        Some(p) => Some(in_file(p, parse_cluster_spec(&read(p)?))?),
        None => None,
    };
    let report: OracleReport = run_trials(trials, seed, InstanceBounds::default(), cluster.as_ref(), planner)?;
    let fmt = |v: Option<f64>| v.map_or("infeasible".to_string(), |t| format!("{t:.9e} s"));
    let w = |out: &mut dyn Write| -> io::Result<()> {
        writeln!(
            out,
            "{} trials, {} infeasible, {} mismatches",
            report.trials,
            report.infeasible,
            report.mismatches.len()
        )?;
        if let Some(m) = report.mismatches.first() {
            dump_repro(m, repro)?;
            writeln!(
                out,
                "first mismatch at trial {}: search {}, brute force {}",
                m.trial,
                fmt(m.search_total_s),
                fmt(m.oracle_total_s)
            )?;
            writeln!(out, "instance written to {}", repro.display())?;
        }
        Ok(())
    };
    w(out).map_err(|e| Failure::invalid(e.to_string()))?;
    Ok(if report.passed() {
        ExitStatus::Success
    } else {
        ExitStatus::Mismatch
    })
}

/// Runs a parsed command line. Errors are reported on `err`.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus {
    let r = match &cli.command {
        Command::Plan { specs, emit } => cmd_plan(specs, emit.as_deref(), out),
        Command::Simulate {
            specs,
            run,
            policy,
            trace,
        } => cmd_simulate(specs, run, *policy, trace.as_deref(), out),
        Command::Compare { specs, run } => cmd_compare(specs, run, out),
        Command::Oracle {
            cluster,
            trials,
            seed,
            repro,
        } => cmd_oracle_with(cluster.as_deref(), *trials, *seed, repro, discover, out),
    };
    match r {
        Ok(s) => s,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.status
        }
    }
}
