use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use prml::diagnostics::BiasStudyResult;
use prml_cli::commands::{cmd_fit, cmd_simulate, cmd_study, half_horizon_path, Overrides, StudyKind, StudyOutcome};
use prml_cli::config::RunConfig;

/// Recursive maximum likelihood for state-space models with particle filter derivatives.
#[derive(Parser)]
#[command(name = "prml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output file; overrides the configured path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Particle count; overrides `smc.particles`.
    #[arg(long)]
    particles: Option<usize>,
    /// Number of time steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Bias,
    Tail,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate observations (and a sibling file of latent states).
    Simulate(Common),
    /// Fit the parameter online and write the trace.
    Fit(Common),
    /// Run a bias or tail study against an exact oracle.
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        study: Study,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            particles: self.particles,
            steps: self.steps,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = RunConfig::load(&c.config)?;
            let out = cmd_simulate(&cfg, &c.overrides())?;
            println!("observations written to {}", out.display());
        }
        Command::Fit(c) => {
            let cfg = RunConfig::load(&c.config)?;
            let (summary, out) = cmd_fit(&cfg, &c.overrides())?;
            println!("final theta: {:?}", summary.theta);
            println!("projection hits: {}", summary.projection_hits);
            println!("trace: {} ({} steps)", out.display(), summary.steps);
        }
        Command::Study { common, study } => {
            let cfg = RunConfig::load(&common.config)?;
            let kind = match study {
                Study::Bias => StudyKind::Bias,
                Study::Tail => StudyKind::Tail,
            };
            let (outcome, out) = cmd_study(&cfg, kind, &common.overrides())?;
            match outcome {
                StudyOutcome::Bias { main, half_horizon } => {
                    print_bias(&main);
                    if let Some(half) = half_horizon {
                        println!("at half the horizon ({}):", half.horizon);
                        print_bias(&half);
                        println!("half-horizon table: {}", half_horizon_path(&out).display());
                    }
                }
                StudyOutcome::Tail(res) => {
                    for r in &res.rows {
                        println!(
                            "N={:<6} tail |grad|={:.6e} se={:.3e} loglik oscillation={:.3e} projection hits={}",
                            r.n_particles, r.mean_gradient_norm, r.stderr, r.loglik_oscillation, r.projection_hits_tail
                        );
                    }
                }
            }
            println!("table: {}", out.display());
        }
    }
    Ok(())
}

fn print_bias(res: &BiasStudyResult) {
    for r in &res.rows {
        println!("N={:<6} bias={:.6e} se={:.3e}", r.n_particles, r.bias_norm, r.stderr);
    }
    match res.slope {
        Some(s) => println!("log-log slope: {s:.4}"),
        None => println!("log-log slope: undefined (zero bias)"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
