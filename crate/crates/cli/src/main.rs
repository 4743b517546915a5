use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cmab_core::bench::{self, Cell, Mode, Precision, Workload};
use cmab_core::check;
use cmab_core::cmanp::{self, gen_sine_tasks, TrainConfig};
use cmab_core::config::ModelConfig;
use cmab_core::instrument::{flops, CountingAllocator};
use cmab_core::io;
use cmab_core::numerics::RngState;
use cmab_core::Matrix;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[derive(Parser)]
#[command(
    name = "cmab",
    version,
    about = "Constant-memory attention blocks and neural processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Randomised equivalence suites.
    #[command(subcommand)]
    Check(CheckCommand),
    /// Peak-memory and operation-count curves over context size.
    Bench(BenchArgs),
    /// Meta-trains a CMANP on sinusoid tasks.
    Train(TrainArgs),
    /// Predictive mean and standard deviation for target inputs.
    Predict(PredictArgs),
    /// Conditions on a context, then absorbs a stream one pair at a time.
    UpdateDemo(UpdateDemoArgs),
}

#[derive(Subcommand)]
enum CheckCommand {
    /// Update and chunked paths against full recomputation.
    Equivalence(EquivalenceArgs),
}

#[derive(Args)]
struct EquivalenceArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Named config; each trial draws random small dimensions when omitted.
    #[arg(long)]
    config: Option<String>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ForwardPath {
    Chunked,
    Naive,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    mode: Mode,
    /// Comma-separated context sizes.
    #[arg(long, default_value = "512,1024,2048,4096,8192")]
    n: String,
    #[arg(long, default_value_t = 16)]
    u: usize,
    #[arg(long, default_value = "deployment")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: PathBuf,
    /// Forward path measured by `--mode memory`.
    #[arg(long, value_enum, default_value = "chunked")]
    path: ForwardPath,
    /// Writes wall_ns as 0 so repeated runs are byte-identical.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Sine,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "sine")]
    task: Task,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "desk")]
    config: String,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Held-out tasks scored against the context-marginal baseline after training.
    #[arg(long, default_value_t = 0)]
    eval_tasks: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    /// CSV with header `x,y`.
    #[arg(long)]
    context: PathBuf,
    /// CSV with header `x`.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UpdateDemoArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    context: PathBuf,
    /// CSV with header `x,y`, absorbed one row per step.
    #[arg(long)]
    stream: PathBuf,
    /// Input at which each step's prediction is reported.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    probe: f64,
}

fn check_equivalence(args: EquivalenceArgs) -> Result<ExitCode> {
    let config = args.config.as_deref().map(ModelConfig::named).transpose()?;
    let report = check::run_equivalence(args.seed, args.trials, config, args.tol)?;
    for p in &report.properties {
        println!("{p}");
    }
    println!("worst relative error {:.3e}", report.worst());
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run_bench(args: BenchArgs) -> Result<ExitCode> {
    ModelConfig::named(&args.config)?;
    let precision = Precision::from_env()?;
    let workload = match (args.mode, args.path) {
        (Mode::Memory, ForwardPath::Naive) => Workload::NaiveForward,
        (mode, _) => bench::workload_for(mode, args.u),
    };
    let mut records = Vec::new();
    for n in bench::parse_n_list(&args.n)? {
        let cell = Cell {
            mode: args.mode,
            workload,
            n,
            config_name: args.config.clone(),
            seed: args.seed,
        };
        let rec = bench::measure_peak(&cell, precision)
            .with_context(|| format!("{} at n={n}", workload.name()))?;
        eprintln!(
            "{} n={} peak_bytes={} flops={} param_bytes={} state_bytes={}",
            workload.name(),
            rec.n,
            rec.peak_bytes,
            rec.flops,
            rec.param_bytes,
            rec.state_bytes
        );
        records.push(rec);
    }
    fs::write(
        &args.csv,
        bench::records_to_csv(&records, args.deterministic)?,
    )
    .with_context(|| format!("writing {}", args.csv.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn run_train(args: TrainArgs) -> Result<ExitCode> {
    let Task::Sine = args.task;
    if args.steps == 0 {
        bail!("--steps must be at least 1");
    }
    let model_cfg = ModelConfig::named(&args.config)?;
    let mut cfg = TrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    cfg.adam.lr = args.lr;
    let outcome = cmanp::train(model_cfg, cfg)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "step,nll")?;
    for r in &outcome.trace {
        writeln!(out, "{},{}", r.step, io::format_real(r.nll))?;
    }
    io::save_weights(&outcome.model, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if args.eval_tasks > 0 {
        let tasks = gen_sine_tasks(&mut RngState::new(args.seed).split(2), args.eval_tasks);
        let report = cmanp::evaluate(&outcome.model, &tasks)?;
        eprintln!(
            "held-out nll {:.4} baseline {:.4} margin {:.4} over {} tasks",
            report.model_nll,
            report.baseline_nll,
            report.margin(),
            report.tasks
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn run_predict(args: PredictArgs) -> Result<ExitCode> {
    let model = io::load_weights(&args.weights)
        .with_context(|| format!("loading {}", args.weights.display()))?;
    let context = io::read_context(&args.context)
        .with_context(|| format!("reading {}", args.context.display()))?;
    let xs = io::read_targets(&args.targets)
        .with_context(|| format!("reading {}", args.targets.display()))?;
    let state = model.condition(&context)?;
    let pred = model.query(&state, &xs)?;
    fs::write(&args.out, io::write_predictions(&xs, &pred)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn run_update_demo(args: UpdateDemoArgs) -> Result<ExitCode> {
    let model = io::load_weights(&args.weights)
        .with_context(|| format!("loading {}", args.weights.display()))?;
    let context = io::read_context(&args.context)
        .with_context(|| format!("reading {}", args.context.display()))?;
    let stream = io::read_context(&args.stream)
        .with_context(|| format!("reading {}", args.stream.display()))?;
    let probe = Matrix::filled(1, 1, args.probe);
    let mut state = model.condition(&context)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "step,n,mean,std,flops")?;
    let pred = model.query(&state, &probe)?;
    let row = |step: usize, n: usize, p: &cmanp::Predictions, f: u64| {
        format!(
            "{step},{n},{},{},{f}",
            io::format_real(p.mean.get(0, 0)),
            io::format_real(p.std.get(0, 0))
        )
    };
    writeln!(out, "{}", row(0, state.count(), &pred, 0))?;
    for r in 0..stream.rows() {
        let pair = stream.slice_rows(r, r + 1)?;
        let (res, counts) = flops::count(|| model.update_context(&mut state, &pair));
        res?;
        let pred = model.query(&state, &probe)?;
        writeln!(out, "{}", row(r + 1, state.count(), &pred, counts.total()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Check(CheckCommand::Equivalence(args)) => check_equivalence(args),
        Command::Bench(args) => run_bench(args),
        Command::Train(args) => run_train(args),
        Command::Predict(args) => run_predict(args),
        Command::UpdateDemo(args) => run_update_demo(args),
    }
}
