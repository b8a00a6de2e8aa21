//! Command-line arguments.

use std::path::PathBuf;

use clap::Parser;

use crate::pipeline::{run, ExitStatus, RunOptions, Sweep};

#[derive(Debug, Clone, Parser)]
#[command(name = "ellabs", version, about = "Ellipsoidal abstraction builder for reach-avoid control")]
pub struct Cli {
    /// TOML problem file.
    pub problem: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub improve_budget: Option<usize>,
    /// Trade-off weight; also overrides the single-transition lambda.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Solve only the `[single_transition]` local problem.
    #[arg(long)]
    pub single_transition: bool,
    /// Comma-separated lambda list; without a value the file's list is used.
    #[arg(long, num_args = 0..=1, value_delimiter = ',', default_missing_value = "")]
    pub sweep: Option<Vec<String>>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub grid_res: Option<usize>,
    /// Write every conic program to `<out-dir>/sdp/`.
    #[arg(long)]
    pub dump_sdp: bool,
}

impl Cli {
    pub fn options(&self) -> Result<RunOptions, String> {
        let sweep = match &self.sweep {
            None => None,
            Some(items) if items.iter().all(|s| s.trim().is_empty()) => Some(Sweep::FromFile),
            Some(items) => Some(Sweep::Lambdas(
                items
                    .iter()
                    .map(|s| s.trim().parse::<f64>().map_err(|e| format!("--sweep: `{s}`: {e}")))
                    .collect::<Result<Vec<_>, _>>()?,
            )),
        };
        Ok(RunOptions {
            out_dir: self.out_dir.clone(),
            seed: self.seed,
            max_iters: self.max_iters,
            improve_budget: self.improve_budget,
            lambda: self.lambda,
            trajectories: self.trajectories,
            grid_res: self.grid_res,
            single_transition: self.single_transition,
            sweep,
            dump_sdp: self.dump_sdp,
        })
    }
}

/// Runs the CLI and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let opts = match cli.options() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitStatus::InputError.code();
        }
    };
    match run(&cli.problem, &opts) {
        Ok(s) => s.code(),
        Err(e) => {
            eprintln!("error: {e}");
            e.status().code()
        }
    }
}
