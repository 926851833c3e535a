use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use amicl_cli::{cmd_embed_titles, cmd_evaluate, cmd_export_finetune, cmd_replay, cmd_run_icl, cmd_stats, RunResult};
use amicl_core::corpus::{SplitSet, StatsScope};
use amicl_core::experiment::RunConfig;
use amicl_core::metrics::render_table;

#[derive(Parser)]
#[command(name = "amicl", version, about = "Argument type classification with in-context learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    All,
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(clap::Args)]
struct CorpusArgs {
    /// Directory with essayNNN.txt / essayNNN.ann pairs
    #[arg(long)]
    corpus_dir: PathBuf,
    /// Train/test split CSV
    #[arg(long)]
    split_file: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print corpus statistics
    Stats {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum, default_value = "all")]
        scope: Scope,
        #[arg(long)]
        json: bool,
    },
    /// Embed all essay titles through the configured gateway
    Embed {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an ICL experiment over the test split (resumable)
    Run {
        #[arg(long, required_unless_present = "replay")]
        config: Option<PathBuf>,
        /// Print request estimates and exit
        #[arg(long)]
        dry_run: bool,
        /// Re-execute a finished run directory against its response store
        #[arg(long, requires = "out")]
        replay: Option<PathBuf>,
        /// Output directory for --replay
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a records.jsonl file against gold labels
    Eval {
        #[arg(long)]
        records: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        json: bool,
    },
    /// Export chat-format JSONL for fine-tuning
    Export {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum)]
        split: Split,
        /// Add title, sentence, paragraph number and structural sentences
        #[arg(long)]
        featxt: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats { corpus, scope, json } => {
            let scope = match scope {
                Scope::All => StatsScope::All,
                Scope::Train => StatsScope::Train,
                Scope::Test => StatsScope::Test,
            };
            let stats = cmd_stats(&corpus.corpus_dir, &corpus.split_file, scope)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{}", stats.to_table());
            }
        }
        Command::Embed { config } => {
            let summary = cmd_embed_titles(&RunConfig::load(&config)?)?;
            println!(
                "{} titles: {} fetched, {} reused",
                summary.titles, summary.fetched, summary.reused
            );
        }
        Command::Run {
            config,
            dry_run,
            replay,
            out,
        } => {
            let outcome = if let Some(run_dir) = replay {
                cmd_replay(&run_dir, &out.expect("clap enforces --out"))?
            } else {
                let config = RunConfig::load(&config.expect("clap enforces --config"))?;
                match cmd_run_icl(&config, dry_run)? {
                    RunResult::DryRun(estimate) => {
                        println!("{estimate}");
                        return Ok(());
                    }
                    RunResult::Done(outcome) => *outcome,
                }
            };
            for w in &outcome.manifest.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", render_table(&[&outcome.report]));
            println!(
                "{} essays ({} resumed), backends {:?}, {} prompt + {} completion tokens",
                outcome.records.len(),
                outcome.resumed,
                outcome.manifest.backend_tags,
                outcome.manifest.usage.prompt_tokens,
                outcome.manifest.usage.completion_tokens
            );
        }
        Command::Eval { records, corpus, json } => {
            let report = cmd_evaluate(&records, &corpus.corpus_dir, &corpus.split_file)?;
            if json {
                print!("{}", report.to_json());
            } else {
                print!("{}", render_table(&[&report]));
            }
        }
        Command::Export {
            corpus,
            split,
            featxt,
            out,
        } => {
            let split = match split {
                Split::Train => SplitSet::Train,
                Split::Test => SplitSet::Test,
            };
            let n = cmd_export_finetune(&corpus.corpus_dir, &corpus.split_file, split, featxt, &out)?;
            println!("wrote {n} records to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
