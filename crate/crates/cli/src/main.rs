use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtopt::verify::VerifyConfig;
use mtopt_cli::{cmd_report, cmd_run, cmd_sweep, cmd_verify, format_outcome, write_atomic, CliError, RunOptions, SweepGrid};

/// Multi-task optimizer experiments.
///
/// Exit status: 0 success, 1 verification failure, 2 usage or input error, 3 divergence.
#[derive(Parser)]
#[command(name = "mtopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output`, then $MTOPT_OUT, then ./mtopt-out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run only this method.
    #[arg(long)]
    method: Option<String>,
    /// Parallel runs (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Finish the remaining runs and exit 0 when some diverge.
    #[arg(long)]
    keep_going: bool,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            out: self.out.clone(),
            seed: self.seed,
            method: self.method.clone(),
            jobs: self.jobs,
            keep_going: self.keep_going,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method for every seed.
    Run(RunArgs),
    /// Grid over L2 strength and dropout, with a best-validation table.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated L2 values; overrides the config's grid.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        l2: Option<Vec<f64>>,
        /// Comma-separated dropout rates; overrides the config's grid.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        dropout: Option<Vec<f64>>,
    },
    /// Run the property and certificate suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace every comparison tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Directory for the counterexample dump.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize run directories or run JSON files.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let summary = cmd_run(&args.config, &args.options())?;
            for e in &summary.entries {
                match e.test_average {
                    Some(v) => println!("{}\t{}\ttest_avg={v:.4}", e.id, e.status),
                    None => println!("{}\t{}\t{}", e.id, e.status, e.error.as_deref().unwrap_or("")),
                }
            }
            println!("wrote {}", summary.out_dir.display());
        }
        Command::Sweep { run, l2, dropout } => {
            let grid = match (l2, dropout) {
                (None, None) => None,
                (l2, dropout) => Some(SweepGrid {
                    l2: l2.unwrap_or_else(|| vec![0.0]),
                    dropout: dropout.unwrap_or_else(|| vec![0.0]),
                }),
            };
            let summary = cmd_sweep(&run.config, grid, &run.options())?;
            println!("method\tl2\tdropout\truns\tval_metric\tbest");
            for r in &summary.rows {
                println!(
                    "{}\t{}\t{}\t{}\t{:.4}\t{}",
                    r.method,
                    r.l2,
                    r.dropout,
                    r.runs,
                    r.val_metric,
                    if r.best { "*" } else { "" }
                );
            }
            println!("wrote {}", summary.run.out_dir.display());
        }
        Command::Verify { seed, tolerance, out } => {
            let outcomes = cmd_verify(&VerifyConfig { seed, tolerance }, out.as_deref())?;
            for o in &outcomes {
                println!("{}", format_outcome(o));
            }
            let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
            if !failed.is_empty() {
                if out.is_none() {
                    for o in &failed {
                        eprintln!("{}", serde_json::to_string(o).unwrap_or_default());
                    }
                }
                return Err(CliError::Verify { failed: failed.len() });
            }
        }
        Command::Report { paths, csv } => {
            let table = cmd_report(&paths)?;
            print!("{}", table.to_text());
            if let Some(path) = csv {
                write_atomic(&path, table.to_csv()?.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
