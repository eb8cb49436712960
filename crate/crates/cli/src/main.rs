use std::path::PathBuf;
use std::process::ExitCode;

use branchmc::harness::{convergence_study, run_estimation, ModelSource, RunConfig, SchemeChoice, PRESET_NAMES};
use branchmc::{check_conditions, BranchingLaw, Selection};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "branchmc", version, about = "Branching diffusion Monte Carlo for semilinear PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate u(0, x0) over R runs of n samples.
    Estimate(EstimateArgs),
    /// Convergence study over a ladder of sample sizes.
    Study(StudyArgs),
    /// Print the integrability condition report as JSON.
    Check(CheckArgs),
    /// List the preset names.
    Presets,
}

#[derive(Args)]
struct ModelArgs {
    /// Named preset, see `branchmc presets`.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON model description.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    #[arg(long, default_value_t = 2.5)]
    theta: f64,
}

impl ModelArgs {
    fn source(&self) -> Result<ModelSource, String> {
        match (&self.preset, &self.config) {
            (Some(name), None) => Ok(ModelSource::Preset(name.clone())),
            (None, Some(path)) => Ok(ModelSource::File(path.clone())),
            _ => Err("give exactly one of --preset or --config".into()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    A,
    B,
    C,
    D,
}

impl From<SchemeArg> for SchemeChoice {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::A => SchemeChoice::A,
            SchemeArg::B => SchemeChoice::B,
            SchemeArg::C => SchemeChoice::C,
            SchemeArg::D => SchemeChoice::D,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Multinomial,
    Systematic,
    Identity,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::Multinomial => Selection::Multinomial,
            SelectionArg::Systematic => Selection::Systematic,
            SelectionArg::Identity => Selection::Identity,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "a")]
    scheme: SchemeArg,
    /// Runs.
    #[arg(short = 'R', long = "runs", default_value_t = 10)]
    runs: usize,
    /// Ensemble size of schemes c and d.
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to min(available cores, 96).
    #[arg(long)]
    shards: Option<usize>,
    /// Euler sub-step.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long, value_enum, default_value = "multinomial")]
    selection: SelectionArg,
    /// Output path; the summary JSON is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, particles: usize) -> Result<RunConfig, String> {
        let mut cfg = RunConfig {
            model: self.model.source()?,
            scheme: self.scheme.into(),
            particles,
            runs: self.runs,
            ensemble: self.ensemble,
            shards: self.shards,
            seed: self.seed,
            law: Default::default(),
            step: self.step,
            selection: self.selection.into(),
            gradient: None,
            output: self.out.clone(),
        };
        cfg.law.kappa = self.model.kappa;
        cfg.law.theta = self.model.theta;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Samples per run.
    #[arg(short = 'n', long = "particles", default_value_t = 10_000)]
    particles: usize,
    /// Estimate v·Du instead of u, with v given as comma-separated entries.
    #[arg(long, value_delimiter = ',')]
    gradient: Option<Vec<f64>>,
    /// Full run configuration as JSON; other options are ignored.
    #[arg(long)]
    run_config: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Increasing sample sizes, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384, 32768, 65536])]
    ladder: Vec<usize>,
    /// Rerun the last rung with twice the runs.
    #[arg(long)]
    sanity: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Moment order.
    #[arg(short, long, default_value_t = 2.0)]
    q: f64,
    /// Grid steps of the comparison ODE.
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    /// Override the closed-form C1q (needed for non-constant volatility).
    #[arg(long, requires = "c2q")]
    c1q: Option<f64>,
    #[arg(long, requires = "c1q")]
    c2q: Option<f64>,
}

fn estimate(args: EstimateArgs) -> Result<(), String> {
    let cfg = match &args.run_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            RunConfig::from_json(&text).map_err(|e| e.to_string())?
        }
        None => RunConfig { gradient: args.gradient.clone(), ..args.run.config(args.particles)? },
    };
    let report = run_estimation(&cfg).map_err(|e| e.to_string())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let summary = serde_json::json!({
        "mean": report.mean,
        "stderr": report.stderr,
        "runs": report.runs,
        "n": report.n,
        "scheme": report.scheme,
        "preset": report.preset,
        "seed": report.seed,
        "reference": report.reference,
        "mean_particles": report.mean_particles,
        "wall_seconds": report.wall_seconds,
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

fn study(args: StudyArgs) -> Result<(), String> {
    let cfg = args.run.config(1)?;
    let report = convergence_study(&cfg, &args.ladder, args.sanity).map_err(|e| e.to_string())?;
    println!("n,runs,mean,stderr,se_of_se");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
    for row in report.rows.iter().chain(&report.sanity) {
        println!("{},{},{:.8},{},{}", row.n, row.runs, row.mean, opt(row.stderr), opt(row.se_of_se));
    }
    match report.slope {
        Some(s) => println!("# slope {s:.4}"),
        None => println!("# slope undefined"),
    }
    Ok(())
}

fn check(args: CheckArgs) -> Result<(), String> {
    let problem = args.model.source()?.load().map_err(|e| e.to_string())?;
    let law = BranchingLaw::for_generator(problem.model.generator(), args.model.kappa, args.model.theta)
        .map_err(|e| e.to_string())?;
    let constants = args.c1q.zip(args.c2q);
    let report = check_conditions(&law, &problem.model, args.q, args.grid, constants).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Study(a) => study(a),
        Command::Check(a) => check(a),
        Command::Presets => {
            PRESET_NAMES.iter().for_each(|n| println!("{n}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
