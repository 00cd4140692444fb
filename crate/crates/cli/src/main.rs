use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bridgenet_cli::{eval, gen_data, gradcheck, init_threads, reference_tables, train, CliResult};
use bridgenet_cli::{EvalOptions, Overrides, TrainOptions};

/// Multi-task dense prediction on synthetic scenes.
#[derive(Parser)]
#[command(name = "bridgenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val dataset.
    GenData {
        /// Run configuration file (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (overrides data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and evaluate it on the validation split.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Dataset directory (overrides data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        /// Task trained by the stl variant.
        #[arg(long)]
        task: Option<String>,
        /// Train on the first batch only and report metrics on it.
        #[arg(long)]
        overfit_one_batch: bool,
    },
    /// Evaluate a checkpoint, optionally against single-task references.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// train or val.
        #[arg(long)]
        split: Option<String>,
        /// report.kv of a single-task run; repeat for each task.
        #[arg(long = "stl-ref")]
        stl_ref: Vec<PathBuf>,
        /// Directory receiving report.kv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the embedded reference tables with recomputed ΔMTL.
        #[arg(long)]
        reference_tables: bool,
    },
    /// Check every backward rule against central differences.
    Gradcheck {
        /// tpp, bfe, tfr, hdc, ffn or model (default: all).
        #[arg(long)]
        block: Option<String>,
        /// Replace one backward rule with a wrong one: gelu, softmax,
        /// layer_norm, conv2d or matmul.
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// stl, mtl_baseline or bridgenet.
    #[arg(long)]
    variant: Option<String>,
    /// base, large or huge.
    #[arg(long)]
    tfr: Option<String>,
    /// Disable a module (tpp, bfe or tfr); repeatable.
    #[arg(long)]
    ablate: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult {
    init_threads()?;
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::GenData { config, out, seed } => {
            let ov = Overrides {
                config: Some(config),
                out,
                seed,
                ..Overrides::default()
            };
            let manifest = gen_data(&ov)?;
            writeln!(stdout, "wrote {}", manifest.display())?;
        }
        Command::Train {
            model,
            data,
            iters,
            task,
            overfit_one_batch,
        } => {
            let ov = Overrides {
                config: model.config,
                variant: model.variant,
                tfr: model.tfr,
                ablate: model.ablate,
                seed: model.seed,
                out: model.out,
                data,
                iters,
                task,
            };
            let outcome = train(&ov, &TrainOptions { overfit_one_batch }, &mut stdout)?;
            writeln!(stdout, "wrote {}", outcome.out.display())?;
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            split,
            stl_ref,
            out,
            reference_tables: tables,
        } => {
            if tables {
                write!(stdout, "{}", reference_tables()?)?;
                if checkpoint.is_none() {
                    return Ok(());
                }
            }
            let ov = Overrides {
                config,
                data,
                out,
                ..Overrides::default()
            };
            let opts = EvalOptions {
                checkpoint,
                split,
                stl_refs: stl_ref,
            };
            let report = eval(&ov, &opts)?;
            writeln!(stdout, "{}", report.to_table())?;
            write!(stdout, "{}", report.to_kv())?;
        }
        Command::Gradcheck { block, inject_fault } => {
            gradcheck(block.as_deref(), inject_fault.as_deref(), &mut stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

