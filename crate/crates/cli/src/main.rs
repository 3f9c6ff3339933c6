use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use qsmp_cli::config::{Format, Pipeline};
use qsmp_cli::pipeline::{run_pipeline, CheckStatus, Overrides, EXIT_CONFIG};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Solve,
    Adjoint,
    GradientCheck,
    Descend,
    MpCheck,
    Bmo,
    Constants,
}

impl From<Command> for Pipeline {
    fn from(c: Command) -> Self {
        match c {
            Command::Solve => Pipeline::Solve,
            Command::Adjoint => Pipeline::Adjoint,
            Command::GradientCheck => Pipeline::GradientCheck,
            Command::Descend => Pipeline::Descend,
            Command::MpCheck => Pipeline::MpCheck,
            Command::Bmo => Pipeline::Bmo,
            Command::Constants => Pipeline::Constants,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

/// Monte Carlo experiments for quadratic forward-backward control problems.
#[derive(Debug, Parser)]
#[command(name = "qsmp", version)]
struct Cli {
    /// Pipeline to run.
    #[arg(value_enum)]
    pipeline: Command,
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides `monte_carlo.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; falls back to QSMP_THREADS, then to all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

fn threads(cli: &Cli) -> Result<Option<usize>, String> {
    let n = match cli.threads {
        Some(n) => n,
        None => match std::env::var("QSMP_THREADS") {
            Ok(s) => s.trim().parse().map_err(|_| format!("QSMP_THREADS must be a positive integer, got `{s}`"))?,
            Err(_) => return Ok(None),
        },
    };
    if n == 0 {
        return Err("thread count must be at least 1".into());
    }
    Ok(Some(n))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match threads(&cli) {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: cannot start thread pool: {e}");
                return ExitCode::from(1);
            }
        }
        Ok(None) => {}
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    }
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", cli.config.display());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        format: cli.format.map(|f| match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }),
    };
    match run_pipeline(&text, cli.pipeline.into(), &overrides) {
        Ok(report) => {
            if let CheckStatus::NotPassed(why) = &report.status {
                eprintln!("check not passed: {why}");
            }
            println!("wrote {} files to {}", report.files.len(), report.out_dir.display());
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("{}: {e}", cli.config.display());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
