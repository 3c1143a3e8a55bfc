use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use stoa_vlp::harness::{ablate, format_table, pretrain, run_probe, AblationGrid, ProbeTask, RunConfig, Trained};
use stoa_vlp::synthetic_world::{
    corpus_hash, generate_corpus, generate_unique_corpus, read_corpus, write_corpus, CorpusConfig,
};

#[derive(Parser)]
#[command(
    name = "stoa",
    version,
    about = "Video-language pre-training on synthetic moving shapes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus directory (manifest.jsonl + frames.bin).
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Corpus settings file (T, S, patch, K_max, L_max, templates, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip seeds whose caption repeats an earlier one.
        #[arg(long)]
        unique_captions: bool,
    },
    /// Pre-train from a run config; writes metrics.log and checkpoints.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one downstream task.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["retrieval", "caption", "qa"])]
        task: String,
        /// Corpus to evaluate on; defaults to the run's eval_corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train and probe every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            seed,
            count,
            out,
            config,
            unique_captions,
        } => {
            let cfg = match config {
                Some(p) => CorpusConfig::load(&p)?,
                None => CorpusConfig::default(),
            };
            let samples = if unique_captions {
                generate_unique_corpus(seed, count, &cfg)?
            } else {
                generate_corpus(seed, count, &cfg)?
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let manifest = write_corpus(&samples, &out)?;
            println!(
                "wrote {} clips ({} bytes of frames) to {}",
                manifest.records.len(),
                manifest.blob_bytes,
                out.display()
            );
            println!("sha256 {}", corpus_hash(&out)?);
        }
        Command::Pretrain { config } => {
            let cfg = RunConfig::load(&config)?;
            let (_, summary) = pretrain(&cfg)?;
            if let Some(last) = summary.history.last() {
                println!("{}", last.log_line(summary.history.len()));
            }
            for c in &summary.checkpoints {
                println!("checkpoint {}", c.display());
            }
            println!("elapsed {:.1}s", summary.elapsed.as_secs_f64());
        }
        Command::Probe {
            checkpoint,
            task,
            corpus,
        } => {
            let (trained, step) = Trained::load(&checkpoint)?;
            let dir = corpus
                .or_else(|| trained.config.eval_corpus.clone())
                .context("no --corpus given and the run has no eval_corpus")?;
            let samples = read_corpus(&dir)?;
            let report = run_probe(&trained, ProbeTask::parse(&task)?, &samples)?;
            println!("checkpoint step {step}, {} clips", samples.len());
            if let Some(r) = report.retrieval {
                let [a, b, c] = r.text_to_video;
                let [d, e, f] = r.video_to_text;
                println!("text->video R@1 {a:.4} R@5 {b:.4} R@10 {c:.4}");
                println!("video->text R@1 {d:.4} R@5 {e:.4} R@10 {f:.4}");
            }
            if let Some(c) = report.caption {
                println!(
                    "caption token_accuracy {:.4} exact_match {:.4}",
                    c.token_accuracy, c.exact_match
                );
            }
            if let Some(q) = report.qa {
                println!(
                    "qa accuracy {:.4} restricted_accuracy {:.4} items {}",
                    q.accuracy, q.restricted_accuracy, q.items
                );
            }
        }
        Command::Ablate { grid } => {
            let g = AblationGrid::load(&grid)?;
            let rows = ablate(&g)?;
            let table = format_table(&rows);
            print!("{table}");
            let path = g.base.out_dir.join("ablation.txt");
            std::fs::create_dir_all(&g.base.out_dir)?;
            std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
