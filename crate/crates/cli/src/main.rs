use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use seqbench_core::data::{leave_one_out_split, DatasetFormat, Phase};
use seqbench_core::evaluator::{evaluate, EvalNegatives};
use seqbench_core::models::load_checkpoint;
use seqbench_core::runner::{infer_format, load_config, load_processed, preprocess, run_plan, write_markdown_report, RunOptions};
use seqbench_core::{DataError, RunError};

#[derive(Parser)]
#[command(name = "seqbench", version, about = "Sequential recommendation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse, 5-core filter and sequence a raw dataset into the canonical layout.
    Preprocess {
        #[arg(long)]
        dataset: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// movielens, amazon, foursquare or canonical; inferred from the name by default.
        #[arg(long)]
        format: Option<String>,
    },
    /// Run every point of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Also retry points that failed previously.
        #[arg(long)]
        resume: bool,
    },
    /// Test-set metrics of a checkpoint on a preprocessed dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Sampled negatives per user, or `all`.
        #[arg(long, default_value = "100")]
        neg: String,
        /// Seed of the negative sampler; defaults to the checkpoint's run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tables (and figures, when seqbench-report is installed) from a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn find_on_path(name: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path).map(|d| d.join(name)).find(|p| p.is_file())
}

fn report(results: &Path, out: &Path) -> anyhow::Result<()> {
    if let Some(tool) = find_on_path("seqbench-report") {
        let status = Command::new(&tool)
            .arg("--results")
            .arg(results)
            .arg("--out")
            .arg(out)
            .status()
            .with_context(|| format!("running {}", tool.display()))?;
        if !status.success() {
            bail!("{} exited with {status}", tool.display());
        }
        return Ok(());
    }
    let path = write_markdown_report(results, out)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Preprocess {
            dataset,
            input,
            out,
            format,
        } => {
            let format = match format {
                Some(f) => f.parse::<DatasetFormat>()?,
                None => infer_format(&dataset).ok_or_else(|| {
                    RunError::Config(format!("cannot infer the format of `{dataset}`; pass --format"))
                })?,
            };
            let stats = preprocess(&dataset, format, &input, &out)?;
            println!(
                "{}: {} users, {} items, {} interactions -> {}",
                stats.name,
                stats.users,
                stats.items,
                stats.interactions,
                out.display()
            );
        }
        Cmd::Run {
            config,
            parallel,
            resume,
        } => {
            let cfg = load_config(&config)?;
            let log = |msg: &str| eprintln!("{msg}");
            let summary = run_plan(&cfg, RunOptions { parallel, resume }, &log)?;
            println!(
                "{} points: {} completed, {} failed, {} already done; results in {}",
                summary.total,
                summary.completed,
                summary.failed,
                summary.skipped,
                cfg.output.join("results.csv").display()
            );
            if summary.failed > 0 {
                return Err(RunError::Failures {
                    failed: summary.failed,
                    total: summary.total,
                }
                .into());
            }
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            neg,
            seed,
        } => {
            let neg: EvalNegatives = neg.parse().map_err(RunError::Config)?;
            let (model, meta) = load_checkpoint(&checkpoint).map_err(|e| RunError::Train(e.into()))?;
            let prepared = load_processed(&dataset)?;
            if prepared.data.num_items() != model.num_items() {
                return Err(RunError::Config(format!(
                    "checkpoint expects {} items but {} has {}",
                    model.num_items(),
                    dataset.display(),
                    prepared.data.num_items()
                ))
                .into());
            }
            let split = leave_one_out_split(&prepared.data);
            let report = evaluate(&model, &split, Phase::Test, neg, seed.unwrap_or(meta.seed))?;
            println!("model {} d={} L={} epoch {} ({} users, {} negatives)", meta.family, meta.emb, meta.seqlen, meta.epoch, report.users, neg);
            println!("k\tprecision\trecall\tndcg\tmap");
            for k in [10, 20] {
                let a = report.at(k);
                println!("{k}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", a.precision, a.recall, a.ndcg, a.map);
            }
        }
        Cmd::Report { results, out } => report(&results, &out)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<RunError>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
