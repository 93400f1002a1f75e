use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use novikov_lab::cli_runner::{run, summary, write_outputs, RunConfig, RunOptions, Stage};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Zeros,
    Rho,
    Complex,
    Spectrum,
    Recover,
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        match self {
            Command::Zeros => Some(Stage::Zeros),
            Command::Rho => Some(Stage::Rho),
            Command::Complex => Some(Stage::Complex),
            Command::Spectrum => Some(Stage::Spectrum),
            Command::Recover => Some(Stage::Recover),
            Command::All => None,
        }
    }
}

/// Novikov complexes from trajectory counting and from Witten Laplacian spectra.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// Stage to run (with its dependencies); `all` runs every enabled stage.
    #[arg(value_enum, default_value = "all")]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Same as the positional stage: zeros, rho, complex, spectrum or recover.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides `numerics.threads`; 0 for all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Neither read nor write cached stage results.
    #[arg(long)]
    no_cache: bool,
}

const EXIT_CONFIG: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = cli.threads {
        cfg.numerics.threads = n;
    }
    let target = match &cli.stage {
        Some(name) => match Stage::parse(name) {
            Some(s) => Some(s),
            None => {
                eprintln!("error: unknown stage {name:?}");
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => cli.command.stage(),
    };
    if cfg.numerics.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.numerics.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let opts = RunOptions { out: out.clone(), target, use_cache: cfg.output.cache && !cli.no_cache };
    let report = run(&cfg, &opts);
    print!("{}", summary(&report));
    if let Err(e) = write_outputs(&report, &out) {
        eprintln!("error: cannot write outputs to {}: {e}", out.display());
        return ExitCode::from(3);
    }
    println!("report written to {}", out.join("report.json").display());
    ExitCode::from(report.exit_code() as u8)
}
