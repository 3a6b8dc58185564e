use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use esmeta::experiment::{load_checkpoint, run_eval, run_train, RunConfig};
use esmeta::Error;

#[derive(Parser, Debug)]
#[command(
    name = "esmeta",
    version,
    about = "Evolution-strategies meta-RL with DDPG adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a meta-distribution.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set K=40`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Measure pre- and post-adaptation returns on held-out tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 25)]
        tasks: usize,
        #[arg(long = "adapt-steps", default_value_t = 1)]
        adapt_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config supplying adaptation and environment settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Write the per-task CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print dimensions, iteration and sigma statistics of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn stats(v: &[f64]) -> (f64, f64, f64) {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, v.iter().sum::<f64>() / v.len().max(1) as f64, max)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, set } => {
            let cfg = RunConfig::load(&config, &set)?;
            let out = run_train(&cfg)?;
            if let Some(last) = out.stats.last() {
                println!(
                    "trained {} iterations; final fitness mean {} (sigma_a {}); checkpoint {}",
                    out.stats.len(),
                    last.fitness_mean,
                    last.sigma_mean_actor,
                    out.final_checkpoint.display()
                );
            } else {
                println!("no iterations run; checkpoint {}", out.final_checkpoint.display());
            }
        }
        Command::Eval {
            checkpoint,
            tasks,
            adapt_steps,
            seed,
            config,
            set,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p, &[])?,
                None => RunConfig::default(),
            };
            cfg.apply_overrides(&set)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let state = ckpt.to_state(cfg.meta.sigma_bounds)?;
            let report = run_eval(&state, &cfg.meta, tasks, adapt_steps, seed)?;
            match out {
                Some(p) => std::fs::write(p, report.to_csv())?,
                None => print!("{}", report.to_csv()),
            }
            eprint!("{}", report.summary_csv());
        }
        Command::Inspect { checkpoint } => {
            let c = load_checkpoint(&checkpoint)?;
            println!("format_version {}", c.format_version);
            println!("iteration {}", c.iteration);
            println!("master_seed {}", c.master_seed);
            for (name, layout, sigma) in [
                ("actor", &c.actor_layout, &c.sigma_a),
                ("critic", &c.critic_layout, &c.sigma_c),
            ] {
                let dims: Vec<String> = layout
                    .layers()
                    .iter()
                    .map(|l| format!("{}->{}", l.input_dim, l.output_dim))
                    .collect();
                let (lo, mean, hi) = stats(sigma);
                println!(
                    "{name}: layers [{}] params {} sigma min {lo} mean {mean} max {hi}",
                    dims.join(", "),
                    layout.total_params()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
