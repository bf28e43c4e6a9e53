use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajdiff::cli::commands::{
    cmd_eval, cmd_eval_baseline, cmd_gen_data, cmd_render, cmd_sweep, cmd_train, sweep_table, SweepAxis, BEST_CKPT,
};
use trajdiff::cli::{Overrides, RunConfig};
use trajdiff::evalsuite::MetricsSummary;
use trajdiff::train::Placement;
use trajdiff::PlanError;

/// Diffusion trajectory planner with representation decorrelation.
#[derive(Parser)]
#[command(name = "trajdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Unset flags fall back to the config
/// file, then to the defaults shown.
#[derive(Args)]
struct Common {
    /// Flat `key = value` run configuration file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Base random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory [default: data]
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Episodes generated by gen-data [default: 2000]
    #[arg(long)]
    episodes: Option<usize>,
    /// Diffusion steps T [default: 10]
    #[arg(long = "steps", short = 'T')]
    steps: Option<usize>,
    /// Batch size B [default: 64]
    #[arg(long, short = 'B')]
    batch: Option<usize>,
    /// Decorrelation weight [default: 0.02]
    #[arg(long)]
    beta: Option<f64>,
    /// Candidates N per episode [default: 30]
    #[arg(long, short = 'N')]
    candidates: Option<usize>,
    /// Training epochs [default: 120]
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate of the one-cycle schedule [default: 1e-4]
    #[arg(long)]
    max_lr: Option<f64>,
    /// Decorrelation placement: outer, inner or off [default: outer]
    #[arg(long)]
    placement: Option<Placement>,
    /// Output directory [default: runs/default]
    #[arg(long, short = 'o')]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, PlanError> {
        let over = Overrides {
            seed: self.seed,
            dataset: self.dataset.clone(),
            episodes: self.episodes,
            steps: self.steps,
            batch: self.batch,
            beta: self.beta,
            candidates: self.candidates,
            epochs: self.epochs,
            max_lr: self.max_lr,
            placement: self.placement,
            out_dir: self.out_dir.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &over)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits (80/10/10) as JSON lines.
    GenData(Common),
    /// Train a planner; writes train_log.csv, best.ckpt and last.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs; a later --resume finishes the run.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score the test split; writes metrics.csv (metrics_cv.csv for the baseline).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate [default: <out-dir>/best.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate a baseline instead of a model (only `cv`, constant velocity).
        #[arg(long, value_parser = ["cv"])]
        baseline: Option<String>,
        /// Measure diversity over filtered survivors instead of all candidates.
        #[arg(long)]
        post_filter_diversity: bool,
    },
    /// Train and evaluate over one axis: T, B, beta, N or placement.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values [default: per axis]
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Draw one test episode with its candidates as SVG.
    Render {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample from; without it the constant-velocity plan is drawn.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output file [default: <out-dir>/render_<index>.svg]
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn print_summary(label: &str, s: &MetricsSummary) {
    println!(
        "{label}: PDMS {:.4}  D {:.4}  NC {:.3}  DAC {:.3}  EP {:.3}  TTC {:.3}  Comfort {:.3}  surviving {:.2}",
        s.pdms, s.diversity, s.scores.nc, s.scores.dac, s.scores.ep, s.scores.ttc, s.scores.comfort, s.n_surviving
    );
}

fn run(cli: Cli) -> Result<(), PlanError> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.resolve()?;
            let s = cmd_gen_data(&cfg)?;
            println!(
                "wrote {} train, {} val, {} test episodes to {}",
                s.train.len(),
                s.val.len(),
                s.test.len(),
                cfg.dataset.display()
            );
        }
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let cfg = common.resolve()?;
            let logs = cmd_train(&cfg, resume, stop_after)?;
            for l in &logs {
                println!(
                    "epoch {:>4}  L_diff {:.5}  L_rep {:.4}  val L_diff {:.5}  |corr| {:.4}",
                    l.epoch, l.l_diff, l.l_rep, l.val_l_diff, l.mean_abs_corr
                );
            }
            println!("checkpoints in {}", cfg.out_dir.display());
        }
        Command::Eval {
            common,
            checkpoint,
            baseline,
            post_filter_diversity,
        } => {
            let cfg = common.resolve()?;
            let report = if baseline.is_some() {
                cmd_eval_baseline(&cfg)?
            } else {
                let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(BEST_CKPT));
                cmd_eval(&cfg, &ckpt, post_filter_diversity)?
            };
            print_summary(if baseline.is_some() { "constant velocity" } else { "planner" }, &report.summary);
            println!("wrote {}", report.csv_path.display());
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.resolve()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let rows = cmd_sweep(&cfg, axis, &values)?;
            print!("{}", sweep_table(axis, &rows));
        }
        Command::Render {
            common,
            checkpoint,
            index,
            output,
        } => {
            let cfg = common.resolve()?;
            let out = output.unwrap_or_else(|| cfg.out_dir.join(format!("render_{index}.svg")));
            cmd_render(&cfg, checkpoint.as_deref(), index, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
