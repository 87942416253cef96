//! The `soe` command line.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.
//! Randomised commands need a seed: `--seed` wins over the `SOE_SEED`
//! environment variable, which wins over a seed in the config file.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::io::config::{load_toml, SimFileConfig};
use crate::io::{self as fio, ManifoldSummary};
use crate::manifold::{aggregate_trajectory, estimate_manifold, Aggregation, MCSampleSet};
use crate::pipeline::backend::{connect, serve_stdio};
use crate::pipeline::synthetic::{SyntheticBackend, SyntheticWorld};
use crate::pipeline::{self, RunConfig, SelectorKind};
use crate::probe::{self, ProbeSelection};
use crate::sim::{self, EjectionConfig, InjectionSelector};
use crate::spectral;

pub const SEED_ENV: &str = "SOE_SEED";

#[derive(Debug, Parser)]
#[command(name = "soe", version, about = "Spectral collapse monitoring and orthogonal probe selection")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sliding-window effective rank of a trajectory, with collapse detection.
    Monitor(MonitorArgs),
    /// Estimate a bias manifold from look-ahead trajectories.
    Manifold(ManifoldArgs),
    /// Score probe candidates against a manifold and pick one.
    ProbeSelect(ProbeArgs),
    /// Run the attention simulator and write its trajectory.
    Simulate(SimulateArgs),
    /// Run the full procedure against Teacher and Student backends.
    Pipeline(PipelineArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve the synthetic backend over stdin/stdout.
    #[command(hide = true)]
    StubBackend(StubArgs),
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    pub trajectory: PathBuf,
    #[arg(long, default_value_t = spectral::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = spectral::DEFAULT_STRIDE)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    #[arg(long, default_value_t = 3)]
    pub sustain: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ManifoldArgs {
    /// One trajectory file per look-ahead sample.
    #[arg(required = true, num_args = 2..)]
    pub samples: Vec<PathBuf>,
    #[arg(long, default_value_t = crate::manifold::DEFAULT_RHO)]
    pub rho: f64,
    #[arg(long, default_value_t = crate::manifold::DEFAULT_K_MAX)]
    pub kmax: usize,
    /// mean-pool or last-state.
    #[arg(long, default_value = "mean-pool")]
    pub aggregate: Aggregation,
    /// Binary manifold output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary output instead of stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    pub manifold: PathBuf,
    pub candidates: PathBuf,
    #[arg(long, default_value_t = probe::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Pick uniformly at random instead of by score.
    #[arg(long)]
    pub random: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-step summary output instead of stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shell command or http(s) URL.
    #[arg(long)]
    pub teacher: String,
    #[arg(long)]
    pub student: String,
    /// File holding the problem context.
    #[arg(long, conflicts_with = "prompt")]
    pub context: Option<PathBuf>,
    /// Problem context given inline.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Also draw this many plain Teacher samples.
    #[arg(long)]
    pub baseline: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Pass@k over JSON lines of `{"correct": [bool, ...]}`.
    Pass { input: PathBuf },
    /// Distinct-solution curve over JSON lines of solution records.
    Curve {
        input: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_TAU)]
        tau: f64,
        /// Keep only records with this method tag.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Relative improvement from a `name,baseline,ours` CSV.
    Table1 {
        input: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Orthogonality-score histogram over probe selection reports.
    Dist {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Orthogonal / random / no-injection comparison in the simulator.
    Ablation {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct StubArgs {
    #[arg(long, value_parser = ["teacher", "student"])]
    pub role: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub subspace: usize,
    /// Seed of the token-to-state map shared by Teacher and Student.
    #[arg(long, default_value_t = 0)]
    pub world_seed: u64,
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Seed from the flag, then `SOE_SEED`, then the config.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")));
    }
    config.ok_or_else(|| CliError::Usage(format!("a seed is required: pass --seed or set {SEED_ENV}")))
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fio::write_json(value, p),
        None => {
            print!("{}", fio::to_json(value)?);
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn monitor(args: &MonitorArgs) -> Result<spectral::CollapseReport> {
    let traj = fio::read_trajectory(&args.trajectory)?;
    let mut report = spectral::effrank_series(&traj, args.window, args.stride)?;
    report.apply_detection(args.theta, args.sustain)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifoldOutput {
    pub samples: Vec<String>,
    pub aggregation: Aggregation,
    pub rho: f64,
    pub k_max: usize,
    pub summary: ManifoldSummary,
}

fn manifold_cmd(args: &ManifoldArgs) -> Result<()> {
    let mut samples = Vec::with_capacity(args.samples.len());
    for path in &args.samples {
        let traj = fio::read_trajectory(path)?;
        let rows: Vec<&[f64]> = traj.states().collect();
        samples.push(aggregate_trajectory(&rows, args.aggregate)?);
    }
    let set = MCSampleSet::new(samples, args.aggregate, f64::NAN)?;
    let m = estimate_manifold(&set, args.rho, args.kmax)?;
    if let Some(out) = &args.out {
        fio::write_manifold(&m, out)?;
    }
    let report = ManifoldOutput {
        samples: args.samples.iter().map(|p| p.display().to_string()).collect(),
        aggregation: args.aggregate,
        rho: args.rho,
        k_max: args.kmax,
        summary: ManifoldSummary::from(&m),
    };
    emit(&report, args.json.as_deref())
}

fn probe_cmd(args: &ProbeArgs) -> CliResult<()> {
    let seed = if args.random {
        Some(resolve_seed(args.seed, None)?)
    } else {
        None
    };
    let m = fio::read_manifold(&args.manifold)?;
    let candidates = fio::read_candidates(&args.candidates)?;
    let mut sel = match seed {
        Some(s) => probe::random_select(candidates, &m, args.epsilon, s)?,
        None => probe::select_probe(candidates, &m, args.epsilon)?,
    };
    sel.manifold_ref = Some(args.manifold.display().to_string());
    emit(&sel, args.json.as_deref())?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub seed: u64,
    pub dim: usize,
    pub slots: usize,
    pub steps: usize,
    pub states_written: usize,
    pub state_ranks: Vec<usize>,
    pub effrank_per_step: Vec<f64>,
}

fn simulate_cmd(args: &SimulateArgs) -> CliResult<()> {
    let file: SimFileConfig = load_toml(&args.config)?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let config = file.to_sim_config(seed)?;
    let run = sim::simulate_run(&config)?;
    let traj = run.trajectory();
    fio::write_trajectory(&traj, &args.out)?;
    let out = SimulateOutput {
        seed,
        dim: config.dim,
        slots: config.slots,
        steps: config.steps,
        states_written: traj.len(),
        state_ranks: run.state_ranks(sim::DEFAULT_RANK_TOL)?,
        effrank_per_step: run.effrank_per_step()?,
    };
    emit(&out, args.json.as_deref())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PipelineOutput {
    config: RunConfig,
    soe: pipeline::SoeRunResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<pipeline::BaselineResult>,
}

fn pipeline_cmd(args: &PipelineArgs) -> CliResult<()> {
    let mut config: RunConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => RunConfig::default(),
    };
    if config.selector == SelectorKind::Random {
        config.seed = Some(resolve_seed(args.seed, config.seed)?);
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let context = match (&args.context, &args.prompt) {
        (Some(p), _) => read_text(p)?,
        (None, Some(s)) => s.clone(),
        (None, None) => return Err(CliError::Usage("give --context FILE or --prompt TEXT".into())),
    };
    let mut teacher = connect(&args.teacher)?;
    let mut student = connect(&args.student)?;
    let soe = match pipeline::run_soe(&context, teacher.as_mut(), student.as_mut(), &config) {
        Ok(r) => r,
        Err(e) => {
            // Keep what was gathered before the failure.
            if let Some(path) = &args.json {
                let _ = fio::write_json(&e.partial, path);
            }
            return Err(CliError::Runtime(e.error));
        }
    };
    let baseline = match args.baseline {
        Some(n) => Some(pipeline::run_baseline(&context, teacher.as_mut(), n, &config)?),
        None => None,
    };
    emit(&PipelineOutput { config, soe, baseline }, args.json.as_deref())?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PassLine {
    correct: Vec<bool>,
}

#[derive(Debug, Serialize)]
struct PassOutput {
    problems: usize,
    solved: usize,
    pass_at_k: f64,
}

#[derive(Debug, Serialize)]
struct CurveOutput {
    tau: f64,
    records: usize,
    distinct: usize,
    total_tokens: u64,
    curve: eval::EfficiencyCurve,
}

#[derive(Debug, Serialize)]
struct TableOutput {
    rows: Vec<String>,
    #[serde(flatten)]
    result: eval::RelativeImprovement,
}

#[derive(Debug, Serialize)]
struct AblationOutput {
    seed: u64,
    trials: usize,
    resamples: usize,
    summaries: Vec<sim::EjectionSummary>,
    perp_energy_order_fraction: f64,
    effrank_jump_order_fraction: f64,
}

fn read_selections(path: &Path) -> Result<Vec<ProbeSelection>> {
    let text = read_text(path)?;
    if let Ok(v) = serde_json::from_str::<Vec<ProbeSelection>>(&text) {
        return Ok(v);
    }
    if let Ok(s) = serde_json::from_str::<ProbeSelection>(&text) {
        return Ok(vec![s]);
    }
    json_lines(path)
}

fn slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn eval_cmd(cmd: &EvalCommand) -> CliResult<()> {
    match cmd {
        EvalCommand::Pass { input } => {
            let lines: Vec<PassLine> = json_lines(input)?;
            let per: Vec<Vec<bool>> = lines.into_iter().map(|l| l.correct).collect();
            let p = eval::pass_at_k(&per)?;
            let out = PassOutput {
                problems: per.len(),
                solved: per.iter().filter(|s| s.contains(&true)).count(),
                pass_at_k: p,
            };
            emit(&out, None)?;
        }
        EvalCommand::Curve { input, tau, method, csv } => {
            let mut records: Vec<eval::SolutionRecord> = json_lines(input)?;
            if let Some(m) = method {
                records.retain(|r| &r.method_tag == m);
            }
            let curve = eval::distinct_solutions(&records, *tau)?;
            if let Some(path) = csv {
                fs::write(path, curve.to_csv()).map_err(|e| Error::io(path, e))?;
            }
            let out = CurveOutput {
                tau: *tau,
                records: records.len(),
                distinct: curve.final_count(),
                total_tokens: curve.points.last().map_or(0, |p| p.tokens),
                curve,
            };
            emit(&out, None)?;
        }
        EvalCommand::Table1 { input, json } => {
            let rows = eval::parse_table_csv(&read_text(input)?)?;
            let base: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let ours: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let r = eval::relative_improvement(&base, &ours)?;
            for (row, rel) in rows.iter().zip(&r.per_item) {
                println!("{}: {} -> {} ({})", row.0, row.1, row.2, eval::format_percent(*rel));
            }
            println!("mean_base: {:.1}", eval::round_half_up(r.mean_base, 1));
            println!("mean_ours: {:.1}", eval::round_half_up(r.mean_ours, 1));
            println!("mean_rel: {}", eval::format_percent(r.mean_rel));
            println!("rel_of_means: {}", eval::format_percent(r.rel_of_means));
            if let Some(path) = json {
                let out = TableOutput {
                    rows: rows.into_iter().map(|r| r.0).collect(),
                    result: r,
                };
                fio::write_json(&out, path)?;
            }
        }
        EvalCommand::Dist { inputs } => {
            let mut all = Vec::new();
            for p in inputs {
                all.extend(read_selections(p)?);
            }
            emit(&eval::score_distribution(&all)?, None)?;
        }
        EvalCommand::Ablation { trials, resamples, seed } => {
            let seed = resolve_seed(*seed, None)?;
            let config = EjectionConfig::standard()?;
            let summaries = [InjectionSelector::Orthogonal, InjectionSelector::Random, InjectionSelector::None]
                .into_iter()
                .map(|s| sim::ejection_experiment(&config, s, *trials, seed))
                .collect::<Result<Vec<_>>>()?;
            let column = |f: fn(&sim::TrialOutcome) -> f64| -> Vec<Vec<f64>> {
                summaries.iter().map(|s| s.outcomes.iter().map(f).collect()).collect()
            };
            let perp = column(|o| o.perp_energy);
            let jump = column(sim::TrialOutcome::effrank_jump);
            let out = AblationOutput {
                seed,
                trials: *trials,
                resamples: *resamples,
                perp_energy_order_fraction: eval::bootstrap_ordering(&slices(&perp), *resamples, seed)?,
                effrank_jump_order_fraction: eval::bootstrap_ordering(&slices(&jump), *resamples, seed)?,
                summaries,
            };
            emit(&out, None)?;
        }
    }
    Ok(())
}

fn stub_cmd(args: &StubArgs) -> CliResult<()> {
    let seed = resolve_seed(args.seed, None)?;
    let world = SyntheticWorld::new(args.dim, args.subspace, args.world_seed)?;
    let role = if args.role == "teacher" {
        pipeline::Role::Teacher
    } else {
        pipeline::Role::Student
    };
    let mut backend = SyntheticBackend::new(world, role, seed);
    let tmp;
    let dir = match &args.state_dir {
        Some(d) => d.clone(),
        None => {
            tmp = std::env::temp_dir().join(format!("soe-stub-{}", std::process::id()));
            tmp
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stdin = io::stdin();
    serve_stdio(&mut backend, BufReader::new(stdin.lock()), io::stdout().lock(), &dir)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Monitor(a) => emit(&monitor(&a)?, a.json.as_deref())?,
        Command::Manifold(a) => manifold_cmd(&a)?,
        Command::ProbeSelect(a) => probe_cmd(&a)?,
        Command::Simulate(a) => simulate_cmd(&a)?,
        Command::Pipeline(a) => pipeline_cmd(&a)?,
        Command::Eval(c) => eval_cmd(&c)?,
        Command::StubBackend(a) => stub_cmd(&a)?,
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
