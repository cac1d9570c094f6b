use clap::{Parser, Subcommand};
use shatter::commands::{
    cmd_ablate, cmd_bench, cmd_extend, cmd_finetune_toy, cmd_params, cmd_partition_plot,
    cmd_pretrain_cached, cmd_pretrain_from_manifest, GlobalOpts, BUILTIN_TOY_CORPUS,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "shatter",
    about = "Sequence-encoder lab: partitioned single-headed attention, baselines, a desk-scale MLM harness and analytic cost counters",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Config file path or preset name.
    #[arg(long)]
    config: String,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the step count.
    #[arg(long)]
    steps: Option<u64>,
    /// Force bit-reproducible output (zeroes wall-clock columns).
    #[arg(long)]
    deterministic: bool,
    /// Output directory or file.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn opts(&self) -> GlobalOpts {
        GlobalOpts {
            seed: self.seed,
            steps: self.steps,
            deterministic: self.deterministic,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// MLM-pretrain a model; writes manifest, metrics CSV and checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus: text file (one document per line) or `builtin:toy`.
        #[arg(long, default_value = BUILTIN_TOY_CORPUS)]
        corpus: String,
        /// Validation text; defaults to a held-out slice of the corpus.
        #[arg(long)]
        valid: Option<String>,
        /// Continue from the run directory's state checkpoint.
        #[arg(long)]
        resume: bool,
        /// Rerun a recorded manifest instead of a config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Binary token cache: loaded when fresh, rewritten otherwise.
        #[arg(long)]
        token_cache: Option<PathBuf>,
    },
    /// Run the seven-variant ladder over shared data; emits a merged CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = BUILTIN_TOY_CORPUS)]
        corpus: String,
    },
    /// Train a classifier head on a synthetic task from a checkpoint.
    FinetuneToy {
        #[arg(long)]
        checkpoint: PathBuf,
        /// position_probe or order_pair.
        #[arg(long)]
        task: String,
        /// cls or pooled.
        #[arg(long, default_value = "pooled")]
        strategy: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter/FLOP/memory report, optionally with wall-clock timing.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 128)]
        len: usize,
        /// Timed steps (0 = analytic only).
        #[arg(long, default_value_t = 0)]
        time_steps: usize,
    },
    /// Trainable-parameter count under the documented convention.
    Params {
        #[arg(long)]
        config: String,
        /// Also print the baseline-plus-d^2-per-layer formula.
        #[arg(long)]
        xlnet_formula: bool,
    },
    /// Sample the partition of unity on integer offsets in [-64, 64].
    PartitionPlot {
        #[arg(long, default_value_t = 8)]
        parts: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grow a checkpoint's maximum sequence length.
    Extend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        new_len: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run() -> shatter::error::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain {
            common,
            corpus,
            valid,
            resume,
            manifest,
            token_cache,
        } => {
            let dir = match manifest {
                Some(path) => cmd_pretrain_from_manifest(&path, &common.opts())?,
                None => cmd_pretrain_cached(
                    &common.config,
                    &corpus,
                    valid.as_deref(),
                    resume,
                    token_cache.as_deref(),
                    &common.opts(),
                )?,
            };
            println!("run directory: {}", dir.display());
        }
        Command::Ablate { common, corpus } => {
            let dir = cmd_ablate(&common.config, &corpus, &common.opts())?;
            println!("ablation results: {}", dir.join("ablation.csv").display());
        }
        Command::FinetuneToy {
            checkpoint,
            task,
            strategy,
            seed,
            steps,
            deterministic,
            out,
        } => {
            let opts = GlobalOpts {
                seed,
                steps,
                deterministic,
                out,
            };
            let report = cmd_finetune_toy(&checkpoint, &task, &strategy, &opts)?;
            println!(
                "{} with {} pooling: train accuracy {:.3}, dev accuracy {:.3}",
                report.task, report.strategy, report.train_accuracy, report.dev_accuracy
            );
        }
        Command::Bench {
            common,
            batch,
            len,
            time_steps,
        } => {
            let report = cmd_bench(&common.config, batch, len, time_steps, &common.opts())?;
            println!(
                "{}: {} params ({}), {} attention flops/layer at l={}, {} activation bytes (batch {})",
                report.params.variant,
                report.params.total,
                report.params.millions,
                report.flops.per_layer,
                len,
                report.memory.bytes,
                batch
            );
            println!(
                "half-length memory ratio: {:.3}",
                report.memory_half_over_full
            );
            if let Some(t) = &report.timing {
                match t.median_ms {
                    Some(ms) => println!("median step time: {ms:.2} ms"),
                    None => println!("timing: {}", t.note.clone().unwrap_or_default()),
                }
            }
            if let Some(out) = &common.out {
                println!("report written to {}", out.display());
            }
        }
        Command::Params {
            config,
            xlnet_formula,
        } => {
            println!("{}", cmd_params(&config, xlnet_formula)?);
        }
        Command::PartitionPlot { parts, layers, out } => {
            let csv = cmd_partition_plot(parts, layers, out.as_deref())?;
            match out {
                Some(path) => println!("partition samples written to {}", path.display()),
                None => print!("{csv}"),
            }
        }
        Command::Extend {
            checkpoint,
            new_len,
            out,
            seed,
        } => {
            let (before, after) = cmd_extend(&checkpoint, new_len, &out, seed)?;
            println!(
                "extended to max_len {new_len}: {before} -> {after} parameters ({:+})",
                after as i64 - before as i64
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
