use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use slearn_core::bayes::{self, GaussianPrior, Grid, TaskNoise};
use slearn_core::metrics::{self, ResistanceAt, SummaryRow};
use slearn_core::traceio::{self, ArrivalProcess, SynthSpec, WidthLaw};
use slearn_core::{HistoryStore, Job, Policy, SamplingMode, SchedulerConfig, SimResult};

#[derive(Parser)]
#[command(
    name = "slearn",
    version,
    about = "Trace-driven cluster scheduling simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace under one policy.
    Simulate(SimulateArgs),
    /// Replay a trace under several policies and report speedups of the target.
    Compare(CompareArgs),
    /// Variability and load analysis of a trace.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic trace.
    Gen(GenArgs),
    /// Chain the jobs of a trace into multi-stage jobs.
    GenDag(GenDagArgs),
    /// Posterior of a job's mean task length given sampled task durations.
    Bayes(BayesArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value_t = 150)]
    machines: usize,
    #[arg(long, default_value_t = 10)]
    queues: usize,
    #[arg(long = "q0-hi-ms", default_value_t = 1_000_000)]
    q0_hi_ms: u64,
    #[arg(long, default_value_t = 10.0)]
    growth: f64,
    #[arg(long = "weight-decay", default_value_t = 10.0)]
    weight_decay: f64,
    #[arg(long = "thin-limit", default_value_t = 3)]
    thin_limit: usize,
    /// `adaptive` or `fixed:<ratio>`
    #[arg(long, default_value = "adaptive", value_parser = parse_sampling)]
    sampling: SamplingMode,
    #[arg(long = "adaptive-t", default_value_t = 100)]
    adaptive_t: usize,
    #[arg(long = "window-days", default_value_t = 14, value_parser = parse_window)]
    window_days: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ConfigArgs {
    fn config(&self) -> anyhow::Result<SchedulerConfig> {
        let cfg = SchedulerConfig {
            machines: self.machines,
            num_queues: self.queues,
            q0_hi_ms: self.q0_hi_ms,
            growth_factor: self.growth,
            queue_weight_decay: self.weight_decay,
            thin_limit: self.thin_limit,
            sampling: self.sampling,
            adaptive_t: self.adaptive_t,
            window_days: self.window_days,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_sampling(s: &str) -> Result<SamplingMode, String> {
    if s == "adaptive" {
        return Ok(SamplingMode::Adaptive);
    }
    let ratio = s
        .strip_prefix("fixed:")
        .ok_or_else(|| format!("expected `adaptive` or `fixed:<ratio>`, got `{s}`"))?;
    let r: f64 = ratio
        .parse()
        .map_err(|e| format!("bad ratio `{ratio}`: {e}"))?;
    if !(r > 0.0 && r <= 1.0) {
        return Err(format!("ratio {r} outside (0, 1]"));
    }
    Ok(SamplingMode::Fixed(r))
}

fn parse_window(s: &str) -> Result<u64, String> {
    match s.parse::<u64>() {
        Ok(w @ (3 | 7 | 14)) => Ok(w),
        _ => Err(format!("window must be one of 3, 7, 14 (got `{s}`)")),
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&f) {
        Ok(f)
    } else {
        Err(format!("fraction {f} outside [0, 1)"))
    }
}

#[derive(Args, Clone)]
struct HistoryArgs {
    /// Trace of already-completed jobs to seed history-based predictors.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Fraction of the trace (chronological prefix) used as history when
    /// `--history` is absent. Prediction is evaluated on the remainder.
    #[arg(long = "history-split", value_parser = parse_fraction)]
    history_split: Option<f64>,
}

const DEFAULT_SPLIT: f64 = 0.5;

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    policy: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    hist: HistoryArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Comma-separated policy list.
    #[arg(long, value_delimiter = ',', required = true)]
    policies: Vec<String>,
    /// Policy whose speedup over the others is reported; defaults to
    /// `slearn` when listed, else the first policy.
    #[arg(long)]
    target: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    hist: HistoryArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Sampling ratio for the across-task variability.
    #[arg(long, default_value_t = 0.03)]
    ratio: f64,
    /// Cluster size used to normalize load.
    #[arg(long, default_value_t = 150)]
    machines: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// JSON generator spec; when given, the individual flags are ignored.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long = "n-jobs", default_value_t = 500)]
    n_jobs: usize,
    /// Poisson arrival rate in jobs per second.
    #[arg(long, default_value_t = 0.1)]
    rate: f64,
    #[arg(long = "width-min", default_value_t = 1)]
    width_min: usize,
    #[arg(long = "width-max", default_value_t = 100)]
    width_max: usize,
    #[arg(long = "mu-ms", default_value_t = 100_000.0)]
    mu_ms: f64,
    #[arg(long = "sigma0-ms", default_value_t = 50_000.0)]
    sigma0_ms: f64,
    #[arg(long = "sigma1-ms", default_value_t = 10_000.0)]
    sigma1_ms: f64,
    #[arg(long, default_value_t = 5)]
    apps: usize,
    #[arg(long, default_value_t = 10)]
    users: usize,
    #[arg(long, default_value_t = 20)]
    names: usize,
    /// Drop generated jobs wider than this.
    #[arg(long = "max-width")]
    max_width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDagArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BayesArgs {
    #[arg(long, allow_hyphen_values = true)]
    mu: f64,
    /// Prior variance; `inf` for no prior.
    #[arg(long = "sigma0-sq")]
    sigma0_sq: f64,
    #[arg(long = "sigma1-sq")]
    sigma1_sq: f64,
    /// Comma-separated sampled task durations.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    samples: Vec<f64>,
    /// Also integrate the posterior numerically.
    #[arg(long)]
    oracle: bool,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::Analyze(a) => analyze(a),
        Command::Gen(a) => gen(a),
        Command::GenDag(a) => gen_dag(a),
        Command::Bayes(a) => bayes_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn parse_policy(name: &str) -> Result<Policy, Failure> {
    Policy::from_str(name).map_err(|e| usage(anyhow!(e)))
}

fn load_trace(path: &Path) -> Result<Vec<Job>, Failure> {
    let jobs = traceio::parse_trace(path)
        .with_context(|| format!("reading trace {}", path.display()))
        .map_err(usage)?;
    if jobs.is_empty() {
        return Err(usage(anyhow!("trace {} has no jobs", path.display())));
    }
    Ok(jobs)
}

/// Trace to evaluate plus, when history is in play, the completed-job prefix.
struct Workload {
    eval: Vec<Job>,
    history: Option<Vec<Job>>,
}

fn workload(trace: Vec<Job>, hist: &HistoryArgs, needs_history: bool) -> Result<Workload, Failure> {
    if let Some(path) = &hist.history {
        return Ok(Workload {
            eval: trace,
            history: Some(load_trace(path)?),
        });
    }
    let split = match (hist.history_split, needs_history) {
        (Some(f), _) => f,
        (None, true) => DEFAULT_SPLIT,
        (None, false) => {
            return Ok(Workload {
                eval: trace,
                history: None,
            })
        }
    };
    let (prefix, eval) = traceio::split_history(&trace, split);
    if needs_history && prefix.is_empty() {
        return Err(usage(anyhow!(
            "NoHistory: history-based policies need completed jobs; pass --history <trace> \
             or a positive --history-split"
        )));
    }
    if eval.is_empty() {
        return Err(usage(anyhow!("history split leaves no jobs to evaluate")));
    }
    Ok(Workload {
        eval,
        history: Some(prefix),
    })
}

fn history_store(w: &Workload, policy: Policy, cfg: &SchedulerConfig) -> Option<HistoryStore> {
    let prefix = w.history.as_ref().filter(|_| policy.uses_history())?;
    let cutoff = w.eval.first().map(Job::arrival_ms);
    Some(traceio::build_history(
        prefix,
        cutoff,
        cfg.window_days,
        policy.estimator(),
    ))
}

fn run_policy(w: &Workload, policy: Policy, cfg: &SchedulerConfig) -> anyhow::Result<SimResult> {
    let result = match history_store(w, policy, cfg) {
        Some(store) => slearn_core::run_with_history(&w.eval, policy, cfg, store)?,
        None => slearn_core::run(&w.eval, policy, cfg)?,
    };
    Ok(result)
}

#[derive(serde::Serialize)]
struct JobRow<'a> {
    job_id: &'a str,
    arrival_ms: u64,
    width: usize,
    actual_total_ms: u64,
    estimate_total_ms: Option<f64>,
    queue: usize,
    jct_ms: u64,
    normalized_wait: f64,
    resistance_ms: f64,
}

fn job_rows(result: &SimResult) -> Vec<JobRow<'_>> {
    result
        .jobs
        .iter()
        .map(|j| JobRow {
            job_id: &j.job_id,
            arrival_ms: j.arrival_ms,
            width: j.width,
            actual_total_ms: j.actual_total_ms(),
            estimate_total_ms: j.estimate.as_ref().map(|e| e.total_ms),
            queue: j.queue_assigned,
            jct_ms: j.jct_ms,
            normalized_wait: metrics::normalized_waiting_time(j),
            resistance_ms: metrics::resistance(result, &j.job_id, ResistanceAt::EstimateReady)
                .expect("job taken from the result"),
        })
        .collect()
}

fn write_run(dir: &Path, result: &SimResult) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(result)?;
    fs::write(dir.join("result.json"), json + "\n")?;
    metrics::write_errors(&dir.join("errors.csv"), &metrics::prediction_errors(result))?;
    metrics::write_rows(fs::File::create(dir.join("jobs.csv"))?, &job_rows(result))?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Outcome {
    let policy = parse_policy(&a.policy)?;
    let cfg = a.cfg.config().map_err(usage)?;
    let w = workload(load_trace(&a.trace)?, &a.hist, policy.uses_history())?;
    let result = run_policy(&w, policy, &cfg).map_err(runtime)?;
    write_run(&a.out, &result).map_err(runtime)?;
    metrics::write_summary(&a.out.join("summary.csv"), &[SummaryRow::new(&result)])
        .map_err(runtime)?;
    println!(
        "{}: {} jobs, mean JCT {:.1} ms -> {}",
        policy,
        result.jobs.len(),
        result.mean_jct_ms(),
        a.out.display()
    );
    Ok(())
}

fn compare(a: CompareArgs) -> Outcome {
    if a.policies.len() < 2 {
        return Err(usage(anyhow!("compare needs at least two policies")));
    }
    let policies = a
        .policies
        .iter()
        .map(|p| parse_policy(p))
        .collect::<Result<Vec<_>, _>>()?;
    let target = match &a.target {
        Some(t) => {
            let t = parse_policy(t)?;
            if !policies.contains(&t) {
                return Err(usage(anyhow!("target {t} is not among the policies")));
            }
            t
        }
        None if policies.contains(&Policy::SLearn) => Policy::SLearn,
        None => policies[0],
    };
    let cfg = a.cfg.config().map_err(usage)?;
    let needs_history = policies.iter().any(|p| p.uses_history());
    let w = workload(load_trace(&a.trace)?, &a.hist, needs_history)?;

    let results: Vec<anyhow::Result<SimResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = policies
            .iter()
            .map(|&p| {
                let (w, cfg) = (&w, &cfg);
                s.spawn(move || run_policy(w, p, cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let results = results
        .into_iter()
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(runtime)?;

    let t_idx = policies.iter().position(|&p| p == target).unwrap();
    let mut summary = Vec::new();
    let mut used_names = Vec::new();
    for (i, (policy, result)) in policies.iter().zip(&results).enumerate() {
        let mut name = policy.name().to_string();
        let mut k = 2;
        while used_names.contains(&name) {
            name = format!("{}-{k}", policy.name());
            k += 1;
        }
        used_names.push(name.clone());
        write_run(&a.out.join(&name), result).map_err(runtime)?;
        let mut row = SummaryRow::new(result);
        if i != t_idx {
            let sp = metrics::jct_speedup(result, &results[t_idx]).map_err(runtime)?;
            metrics::write_speedups(&a.out.join(format!("speedups_{name}.csv")), &sp.per_job)
                .map_err(runtime)?;
            println!("{target} over {name}: mean-JCT speedup {:.4}", sp.mean);
            row = row.with_speedup(target.name(), &sp);
        }
        summary.push(row);
    }
    metrics::write_summary(&a.out.join("summary.csv"), &summary).map_err(runtime)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct LoadRow {
    window_start_ms: u64,
    load: f64,
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    if !(a.ratio > 0.0 && a.ratio <= 1.0) {
        return Err(usage(anyhow!("ratio must lie in (0, 1]")));
    }
    if a.machines == 0 {
        return Err(usage(anyhow!("machines must be positive")));
    }
    let trace = load_trace(&a.trace)?;
    let store = traceio::build_history(&trace, None, 14, slearn_core::HistoryEstimator::Utility);
    fs::create_dir_all(&a.out).map_err(runtime)?;
    let rows = metrics::cov_rows(&trace, &store, a.ratio);
    metrics::write_cov(&a.out.join("cov.csv"), &rows).map_err(runtime)?;

    let load = traceio::load_windows(&trace, a.machines, 1_000_000, 100_000);
    let load_rows: Vec<LoadRow> = load
        .windows
        .iter()
        .map(|&(window_start_ms, load)| LoadRow {
            window_start_ms,
            load,
        })
        .collect();
    metrics::write_rows(
        fs::File::create(a.out.join("load.csv")).map_err(runtime)?,
        &load_rows,
    )
    .map_err(runtime)?;
    println!(
        "load mean {:.4} p50 {:.4} p90 {:.4}",
        load.mean, load.p50, load.p90
    );
    Ok(())
}

fn gen(a: GenArgs) -> Outcome {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(usage)?;
            serde_json::from_str(&text)
                .context("parsing generator spec")
                .map_err(usage)?
        }
        None => SynthSpec {
            n_jobs: a.n_jobs,
            arrival: ArrivalProcess::Poisson { rate_per_s: a.rate },
            width: WidthLaw::Uniform {
                min: a.width_min,
                max: a.width_max,
            },
            mu_ms: a.mu_ms,
            sigma0_ms: a.sigma0_ms,
            sigma1_ms: a.sigma1_ms,
            apps: a.apps,
            users: a.users,
            names: a.names,
            seed: a.seed,
        },
    };
    let mut jobs = traceio::gen_synthetic(&spec).map_err(usage)?;
    if let Some(cap) = a.max_width {
        if cap == 0 {
            return Err(usage(anyhow!("max-width must be positive")));
        }
        jobs = traceio::cap_width(&jobs, cap);
    }
    write_parent(&a.out)?;
    traceio::write_trace(&jobs, &a.out).map_err(runtime)?;
    println!("wrote {} jobs to {}", jobs.len(), a.out.display());
    Ok(())
}

fn write_parent(path: &Path) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(runtime)?;
    }
    Ok(())
}

fn gen_dag(a: GenDagArgs) -> Outcome {
    let base = load_trace(&a.base)?;
    let dags = traceio::gen_dag_trace(&base, a.seed).map_err(usage)?;
    if dags.short_tail {
        eprintln!("warning: last DAG has a single stage (base trace ran out)");
    }
    write_parent(&a.out)?;
    traceio::write_trace(&dags.jobs, &a.out).map_err(runtime)?;
    println!("wrote {} DAG jobs to {}", dags.jobs.len(), a.out.display());
    Ok(())
}

fn bayes_cmd(a: BayesArgs) -> Outcome {
    let prior = GaussianPrior::new(a.mu, a.sigma0_sq).map_err(usage)?;
    let noise = TaskNoise::new(a.sigma1_sq).map_err(usage)?;
    let post = if a.samples.is_empty() {
        bayes::history_estimate(&prior).map_err(usage)?
    } else {
        bayes::sampling_posterior(&prior, &noise, &a.samples).map_err(usage)?
    };
    println!("mean {}", post.mean);
    println!("variance {}", post.variance);
    if a.oracle {
        let grid = Grid::around(post.mean, post.variance.sqrt(), 12.0, 1000.0);
        let q = bayes::posterior_quadrature_oracle(&prior, &noise, &a.samples, grid)
            .map_err(|e| runtime(anyhow!(e)))?;
        println!("oracle_mean {}", q.mean);
        println!("oracle_variance {}", q.variance);
    }
    Ok(())
}
