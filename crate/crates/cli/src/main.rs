mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Status, UsageError};
use config::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "rdctl",
    version,
    about = "Observer-based boundary control of 1-D reaction-diffusion equations"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["t1", "t2", "t3", "c4"])]
    theorem: Option<String>,
    /// Observer dimension.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Controller poles, comma separated; one value is repeated.
    #[arg(
        long,
        global = true,
        value_delimiter = ',',
        allow_negative_numbers = true
    )]
    poles: Option<Vec<f64>>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Half-width of the input sector.
    #[arg(long, global = true)]
    dkphi: Option<f64>,
    /// Largest observer dimension tried by searches.
    #[arg(long, global = true)]
    nmax: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenpairs of the spatial operator with diagnostics.
    Eig {
        /// Samples per eigenfunction.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Controller and observer gains.
    Synth,
    /// Search for a certificate, or re-verify one with --certificate.
    Check {
        #[arg(long)]
        certificate: Option<PathBuf>,
    },
    /// Closed-loop simulation.
    Simulate,
    /// Sector size over q_tilde, or feasibility over N.
    Sweep,
    /// Full reproduction bundle with a pass/fail summary.
    Repro,
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let g = cli.global;
    let mut cfg = ExperimentConfig::load(g.config.as_deref())
        .map_err(|e| commands::usage(format!("{e:#}")))?;
    cfg.apply(&Overrides {
        theorem: g.theorem,
        n: g.n,
        poles: g.poles,
        delta: g.delta,
        dk_phi: g.dkphi,
        n_max: g.nmax,
    });
    if let Command::Eig {
        resolution: Some(r),
    } = &cli.command
    {
        cfg.plant.resolution = Some(*r);
    }
    let out = commands::output_dir(g.out)?;
    match cli.command {
        Command::Eig { .. } => commands::eig(&cfg, &out),
        Command::Synth => commands::synth(&cfg, &out),
        Command::Check { certificate } => commands::check(&cfg, &out, certificate.as_deref()),
        Command::Simulate => commands::simulate(&cfg, &out),
        Command::Sweep => commands::sweep(&cfg, &out),
        Command::Repro => commands::repro(&cfg, &out),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<rdctl::Error>(),
                Some(
                    rdctl::Error::InvalidSpec(_)
                        | rdctl::Error::Sector(_)
                        | rdctl::Error::PolePlacement(_)
                        | rdctl::Error::Dimension(_)
                )
            )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Passed) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
