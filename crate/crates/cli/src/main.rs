use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tmpsched::config::{load_config, RunConfig};
use tmpsched::report::{cmd_ablate, cmd_plan, cmd_simulate, cmd_verify_numerics, render_numerics, render_table};
use tmpsched::schedule::Variant;
use tmpsched::Error;

#[derive(Parser)]
#[command(name = "tmpsched", version, about = "Simulate and plan tensor-parallel training schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured schedule variants and write traces.
    Simulate(RunArgs),
    /// Search per-block TMP degrees under the memory budget.
    Plan(RunArgs),
    /// Compare schedule variants and the planner against a baseline.
    Ablate(RunArgs),
    /// Check the gradient identities behind communication elision.
    VerifyNumerics {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated schedule variants, e.g. `Default,Oases`.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long = "mem-granularity")]
    mem_granularity: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> tmpsched::Result<RunConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = &self.variants {
            cfg.variants = v.clone();
        }
        if let Some(g) = self.mem_granularity {
            cfg.memory_granularity = Some(g);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidSpec { .. }
        | Error::InvalidProfile(_)
        | Error::MissingBandwidth(_)
        | Error::UnknownDegree(_)
        | Error::MeasuredCosts(_)
        | Error::UnknownBlock(_)
        | Error::LengthMismatch { .. }
        | Error::Json(_) => 2,
        Error::Infeasible { .. } => 3,
        Error::Io(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> tmpsched::Result<bool> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.load()?;
            let report = cmd_simulate(&cfg, &cfg.output_dir)?;
            print!("{}", render_table(&report.rows));
            println!("artifacts written to {}", cfg.output_dir.display());
        }
        Command::Plan(args) => {
            let cfg = args.load()?;
            let plan = cmd_plan(&cfg, &cfg.output_dir)?;
            println!("strategy:        {}", plan.rendered);
            println!("predicted time:  {:.6} s", plan.predicted_time);
            println!("predicted memory: {:.2} GiB", plan.predicted_memory / (1u64 << 30) as f64);
            println!("solve time:      {:.1} ms", plan.solve_time_ms);
        }
        Command::Ablate(args) => {
            let cfg = args.load()?;
            let report = cmd_ablate(&cfg, &cfg.output_dir)?;
            print!("{}", render_table(&report.rows));
        }
        Command::VerifyNumerics { out, seed } => {
            let out = out.unwrap_or_else(|| PathBuf::from("out"));
            let report = cmd_verify_numerics(seed, &out)?;
            print!("{}", render_numerics(&report));
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
