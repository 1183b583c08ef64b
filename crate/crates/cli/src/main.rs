//! `bench`: imagination benchmark harness.
//!
//! Exit status: 0 on success, 2 when generation modes disagree, 1 otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rpop_core::bench::{
    apply_model_shape, emit_report, render_report, run_benchmark, run_train_forward, verify,
    BenchConfig, BenchReport, Precision, ReportFormat,
};
use rpop_core::{Error, GenerationMode};

#[derive(Parser)]
#[command(name = "bench", version, about = "Imagination speed benchmark for POP world models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time imagination rollouts in each generation mode.
    Run {
        #[arg(long = "K")]
        k: Option<usize>,
        #[command(flatten)]
        shape: Shape,
        #[command(flatten)]
        output: Output,
        /// Time the POP chunkwise training forward instead of imagination.
        #[arg(long)]
        train_forward: bool,
    },
    /// Run only the greedy equivalence gate.
    Verify {
        #[arg(long = "K")]
        k: Option<usize>,
        #[command(flatten)]
        shape: Shape,
    },
    /// Run the benchmark for several observation sizes.
    Sweep {
        #[arg(long = "K", value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[command(flatten)]
        shape: Shape,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Args)]
struct Shape {
    /// Start from a named preset (only `paper`); flags override it.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ffn: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    blocks_per_chunk: Option<usize>,
    /// Concurrent rollouts per timed repetition.
    #[arg(long)]
    batch: Option<usize>,
    /// Comma-separated modes, or `all`.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Load an RPOPv1 bundle instead of seeding one.
    #[arg(long, conflicts_with = "seed")]
    model: Option<PathBuf>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_params: Option<usize>,
}

#[derive(Args)]
struct Output {
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `csv` or `text`; defaults to csv for files and text for stdout.
    #[arg(long)]
    format: Option<String>,
}

fn build_config(shape: &Shape, k: Option<usize>) -> anyhow::Result<BenchConfig> {
    let mut c = match shape.preset.as_deref() {
        None | Some("paper") => BenchConfig::paper(),
        Some(other) => bail!(Error::Config(format!("unknown preset '{other}'"))),
    };
    if let Some(path) = &shape.model {
        apply_model_shape(&mut c, path).with_context(|| format!("reading {}", path.display()))?;
    }
    macro_rules! set {
        ($($field:ident <- $value:expr),* $(,)?) => {
            $(if let Some(v) = $value { c.$field = v; })*
        };
    }
    set!(
        tokens_per_obs <- k,
        vocab_size <- shape.n,
        d_model <- shape.d_model,
        d_ffn <- shape.d_ffn,
        layers <- shape.layers,
        heads <- shape.heads,
        num_actions <- shape.actions,
        horizon <- shape.horizon,
        blocks_per_chunk <- shape.blocks_per_chunk,
        batch <- shape.batch,
        seed <- shape.seed,
        repetitions <- shape.reps,
        temperature <- shape.temperature,
        max_params <- shape.max_params,
    );
    if let Some(p) = &shape.precision {
        c.precision = p.parse::<Precision>()?;
    }
    if !shape.mode.is_empty() && shape.mode != ["all"] {
        c.modes = shape
            .mode
            .iter()
            .map(|m| m.parse::<GenerationMode>())
            .collect::<Result<_, _>>()?;
    }
    c.validate()?;
    Ok(c)
}

fn write(report: &BenchReport, output: &Output) -> anyhow::Result<()> {
    let format = match &output.format {
        Some(f) => f.parse::<ReportFormat>()?,
        None if output.out.is_some() => ReportFormat::Csv,
        None => ReportFormat::Text,
    };
    match &output.out {
        Some(path) => emit_report(report, path, format).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{}", render_report(report, format)?);
            Ok(())
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("RPOP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("RPOP_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            bail!(Error::Config("RPOP_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run { k, shape, output, train_forward } => {
            let config = build_config(&shape, k)?;
            let report = if train_forward { run_train_forward(&config)? } else { run_benchmark(&config)? };
            write(&report, &output)
        }
        Command::Verify { k, shape } => {
            let config = build_config(&shape, k)?;
            verify(&config)?;
            println!(
                "equivalence gate passed: {} greedy rollouts of H={} agree, calls {}/{}/{}",
                config.hash(),
                config.horizon,
                GenerationMode::PopDefault.expected_calls(config.horizon, config.tokens_per_obs),
                GenerationMode::PopCombined.expected_calls(config.horizon, config.tokens_per_obs),
                GenerationMode::NoPopOracle.expected_calls(config.horizon, config.tokens_per_obs),
            );
            Ok(())
        }
        Command::Sweep { k, shape, output } => {
            let mut report = BenchReport::default();
            for value in k {
                let config = build_config(&shape, Some(value))?;
                report.rows.extend(run_benchmark(&config)?.rows);
            }
            write(&report, &output)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Equivalence(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
