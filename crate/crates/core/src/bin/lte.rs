use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lte_lab::cli::{self, SweepGrid, DEFAULT_COMPARE_DIR, DEFAULT_SWEEP_DIR};
use lte_lab::costmodel::CostInputs;
use lte_lab::Error;

#[derive(Parser)]
#[command(
    name = "lte",
    version,
    about = "Parallel low-rank adapter training experiments"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effective-weight deviation between two runs.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = DEFAULT_COMPARE_DIR)]
        out: PathBuf,
    },
    /// Run a grid over heads, ranks and merge periods.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Communication and memory accounting.
    Cost {
        #[arg(long, value_parser = parse_count)]
        n_ddp: u64,
        #[arg(long, value_parser = parse_count)]
        n_lte: u64,
        #[arg(long, value_parser = parse_count)]
        m: u64,
        #[arg(long, value_parser = parse_count)]
        m_lte: u64,
        #[arg(long, value_parser = parse_count)]
        t: u64,
        #[arg(long)]
        q: f64,
        /// Report counts in bytes.
        #[arg(long)]
        bytes_per_param: Option<f64>,
        #[arg(long)]
        json: bool,
    },
}

/// Accepts plain integers and exact scientific forms such as `22.9e6`.
fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(format!("`{s}` is not a non-negative integer"))
    }
}

fn execute(command: Command) -> lte_lab::Result<()> {
    match command {
        Command::Train { config, seed, out } => {
            let mut cfg = cli::read_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let summary = cli::cmd_train(&cfg, out.as_deref())?;
            let traj = &summary.outcome.trajectory;
            println!(
                "{} steps, final eval loss {}, artifacts in {}",
                traj.steps.len(),
                traj.final_eval_loss()
                    .map_or("-".into(), |l| format!("{l:.6e}")),
                summary.out_dir.display()
            );
        }
        Command::Compare { a, b, out } => {
            let (summary, _) =
                cli::cmd_compare(&cli::read_config(&a)?, &cli::read_config(&b)?, &out)?;
            println!(
                "{} snapshots, max deviation {:.6e}, mean {:.6e}, final {:.6e}",
                summary.snapshots,
                summary.max_deviation,
                summary.mean_deviation,
                summary.final_deviation
            );
        }
        Command::Sweep { grid, out } => {
            let grid = SweepGrid::read(&grid)?;
            let dir = out
                .or_else(|| grid.out_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_SWEEP_DIR));
            let rows = cli::cmd_sweep(&grid, &dir)?;
            print!("{}", cli::sweep_table(&rows));
        }
        Command::Cost {
            n_ddp,
            n_lte,
            m,
            m_lte,
            t,
            q,
            bytes_per_param,
            json,
        } => {
            let inputs = CostInputs::new(m, m_lte, n_ddp, n_lte, t, q)?;
            let (_, text, js) = cli::cmd_cost(&inputs, bytes_per_param)?;
            if json {
                println!("{js}");
            } else {
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Args::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
