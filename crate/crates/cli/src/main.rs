use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gfss_cli::run::{run_experiment, sweep, Axis};
use gfss_cli::{export, report, CliError, ExperimentConfig};

/// Generalized few-shot segmentation experiments.
#[derive(Debug, Parser)]
#[command(name = "gfss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate every fold, shot count and seed of a config.
    Run { config: PathBuf },
    /// Repeat a config over values of one setting.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; `base:ft` pairs for lambda-triplet.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Tabulate all run reports below a directory.
    Report { dir: PathBuf },
    /// Write predicted masks of a checkpoint as palette PNGs.
    ExportMasks {
        checkpoint: PathBuf,
        dir: PathBuf,
        /// Dataset directory, or an experiment config whose dataset to use.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_experiment(&cfg, &cfg.output_root())?;
            for (shots, s) in &out.by_shots {
                println!(
                    "{} K={shots}: base {} novel {} total {:.4}",
                    cfg.method,
                    fmt(s.base_miou),
                    fmt(s.novel_miou),
                    s.total_miou
                );
            }
            println!("wrote {}", out.method_dir.display());
        }
        Command::Sweep { config, axis, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = sweep(&cfg, axis, &values, &cfg.output_root())?;
            println!(
                "| {} | shots | base | novel | total |\n|---|---|---|---|---|",
                axis.name()
            );
            for row in &rows {
                for (shots, s) in &row.by_shots {
                    println!(
                        "| {} | {shots} | {} | {} | {:.4} |",
                        row.value,
                        fmt(s.base_miou),
                        fmt(s.novel_miou),
                        s.total_miou
                    );
                }
            }
        }
        Command::Report { dir } => {
            report::report(&dir)?;
            print!("{}", std::fs::read_to_string(dir.join(report::REPORT_MD))?);
        }
        Command::ExportMasks {
            checkpoint,
            dir,
            dataset,
            split,
        } => {
            let bundle = export::load_samples(&dataset)?;
            let samples = match split {
                Split::Train => &bundle.train,
                Split::Val => &bundle.val,
            };
            let written = export::export_masks(&checkpoint, samples, bundle.spec.ignore_value, &dir)?;
            println!("wrote {} masks to {}", written.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
