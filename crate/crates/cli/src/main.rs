use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hypergrad_cli::{load_config, run_with_threads, ConfigError, ExperimentConfig, Mode};

/// Tune the Lasso / Group Lasso penalty by hyper-subgradient descent on
/// leave-one-out error.
#[derive(Parser)]
#[command(name = "hypergrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run(RunArgs),
    /// Print the fully defaulted config, or the first error found.
    ValidateConfig(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted means all defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set synthetic.dim=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Seed of the synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    /// Outer step size.
    #[arg(long)]
    beta: Option<f64>,
    /// Step sizes for the sweeps, comma separated.
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// Inner tolerances for the sweeps, comma separated.
    #[arg(long, value_delimiter = ',')]
    tols: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long, env = "HYPERGRAD_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Worker threads; 1 runs everything on one thread.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut overrides = self.overrides.clone();
        let list = |v: &[f64]| {
            format!(
                "[{}]",
                v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
            )
        };
        if let Some(m) = self.mode {
            overrides.push(format!("mode=\"{}\"", format!("{m:?}").to_lowercase()));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("synthetic.seed={s}"));
        }
        if let Some(b) = self.beta {
            overrides.push(format!("hyper.beta={b:e}"));
        }
        if let Some(b) = &self.betas {
            overrides.push(format!("betas={}", list(b)));
        }
        if let Some(t) = &self.tols {
            overrides.push(format!("tols={}", list(t)));
        }
        let mut cfg = load_config(self.config.as_deref(), &overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ValidateConfig(args) => match args.resolve() {
            Ok(cfg) => {
                print!("{}", cfg.to_toml());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("config error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run(args) => {
            let cfg = match args.config.resolve() {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            match run_with_threads(&cfg, args.threads.map(|t| t as usize)) {
                Ok(summary) => {
                    if let Some(g) = &summary.grid {
                        println!("grid argmin lambda = {}", g.argmin_lambda);
                    }
                    for r in &summary.runs {
                        println!(
                            "{}: lambda* = {} after {} steps, {} inner iterations",
                            r.name, r.lambda_star, r.steps, r.total_inner_iters
                        );
                    }
                    println!("wrote {}", cfg.output_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
