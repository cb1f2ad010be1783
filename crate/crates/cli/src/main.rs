use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pnnl_cli::commands::bench_table;
use pnnl_cli::{cmd_bench, cmd_convert, cmd_evaluate, cmd_run, CliError, EvalSource, RunOverrides, SplitName};
use pnnl_core::LabelColumn;

#[derive(Parser)]
#[command(name = "pnnl", version, about = "Progressive MLP construction with subset sampling")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grow, fine-tune and evaluate a network from a run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed (overrides the config's base_seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert a CSV dataset to the PNNL binary format.
    Convert {
        csv: PathBuf,
        #[arg(long, default_value = "label")]
        label_column: String,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and mean loss of a saved model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Dataset file (.csv or PNNL binary).
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "label")]
        label_column: String,
        /// standardizer.json written by `run`.
        #[arg(long)]
        standardizer: Option<PathBuf>,
        /// Evaluate on a split of this run config's data instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Run or collect every config/report in a directory into one table.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Run { config, out, seed } => {
            let res = cmd_run(&config, &RunOverrides { seed, out })?;
            if !quiet {
                let s = &res.report.summary;
                println!(
                    "test accuracy {:.2}%  unique samples {}  avg block {:.4}s  total {:.2}s  params {}",
                    s.test_accuracy.unwrap_or(f64::NAN) * 100.0,
                    s.unique_samples_total,
                    s.avg_block_time_s,
                    s.total_time_s,
                    s.param_count
                );
                println!("wrote {} and {}", res.report_path.display(), res.model_path.display());
            }
        }
        Command::Convert {
            csv,
            label_column,
            num_classes,
            out,
        } => {
            let ds = cmd_convert(&csv, &LabelColumn::from(label_column.as_str()), num_classes, &out)?;
            if !quiet {
                println!("wrote {} (N={}, D={}, K={})", out.display(), ds.len(), ds.dim(), ds.num_classes());
            }
        }
        Command::Evaluate {
            model,
            data,
            label_column,
            standardizer,
            config,
            split,
        } => {
            let source = match (data, config) {
                (Some(path), _) => EvalSource::File {
                    path,
                    label_column: LabelColumn::from(label_column.as_str()),
                    standardizer,
                },
                (None, Some(path)) => EvalSource::Config { path, split },
                (None, None) => unreachable!("clap requires one of --data/--config"),
            };
            let (acc, loss) = cmd_evaluate(&model, &source)?;
            if !quiet {
                println!("accuracy {acc:.6}  loss {loss:.6}");
            }
        }
        Command::Bench { config, out, jobs } => {
            let rows = cmd_bench(&config, out.as_deref(), jobs.max(1))?;
            if !quiet {
                print!("{}", bench_table(&rows));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
