//! `kinfilt`: experiment runner for the filtering toolkit.

mod commands;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kinfilt::config::ScenarioConfig;
use kinfilt::io::OUT_ENV;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kinfilt", version, about = "Filtering for degenerate kinetic diffusions")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct GlobalArgs {
    /// Scenario file (TOML); defaults to the shipped sinusoidal scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Euler-Maruyama paths of the signal/observation system.
    Simulate {
        #[arg(long, default_value_t = 1)]
        paths: u64,
    },
    /// Itô-Wentzell flow on the observation path, with fitted flow bounds.
    Flow {
        /// Steps between dumped slices.
        #[arg(long, default_value_t = 100)]
        dump_every: usize,
    },
    /// Frozen, prototype and bounding kernels on a whitened box.
    Kernel,
    /// Parametrix series and Gaussian sandwich certification.
    Parametrix,
    /// Forward filtering density and estimate.
    FilterForward,
    /// Kallianpur-Striebel and backward lattice estimates.
    FilterBackward,
    /// Backward Itô integral and backward diffusion residuals.
    BitoCheck,
    /// Acceptance suite.
    Verify {
        /// Reduced sizes for a fast smoke run.
        #[arg(long)]
        quick: bool,
        /// Comma-separated criterion ids; all by default.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
    },
}

/// Resolved inputs shared by every subcommand.
pub struct Session {
    pub cfg: ScenarioConfig,
    pub out: PathBuf,
    pub command_line: String,
    /// Whether the scenario came from `--config`.
    pub explicit_config: bool,
}

fn resolve(g: &GlobalArgs) -> Result<Session> {
    let mut cfg = match &g.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => kinfilt::verify::shipped_scenarios()?.pop().context("no shipped scenario")?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let out = g.out.clone().or_else(|| cfg.output.dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    let command_line = std::env::args().skip(1).collect::<Vec<_>>().join(" ");
    Ok(Session { cfg, out, command_line, explicit_config: g.config.is_some() })
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let ctx = resolve(&cli.global)?;
    match cli.command {
        Command::Simulate { paths } => commands::simulate(&ctx, paths),
        Command::Flow { dump_every } => commands::flow(&ctx, dump_every),
        Command::Kernel => commands::kernel(&ctx),
        Command::Parametrix => commands::parametrix(&ctx),
        Command::FilterForward => commands::filter_forward(&ctx),
        Command::FilterBackward => commands::filter_backward(&ctx),
        Command::BitoCheck => commands::bito_check(&ctx),
        Command::Verify { quick, criteria } => commands::verify(&ctx, quick, &criteria),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("kinfilt: one or more checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("kinfilt: {e:#}");
            ExitCode::from(2)
        }
    }
}
