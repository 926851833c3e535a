//! Command implementations behind the `amicl` binary. Each `cmd_*`
//! function does the work and returns a value; printing is left to `main`.

use std::path::Path;

use anyhow::{Context, Result};

use amicl_core::corpus::{compute_stats, load_corpus, CorpusStats, SplitSet, StatsScope};
use amicl_core::experiment::{
    build_gateway, embed_titles, estimate, evaluate_records, run_icl_with, DryRunEstimate, EmbedSummary, RunConfig,
    RunManifest, RunOutcome, MANIFEST_FILE,
};
use amicl_core::finetune;
use amicl_core::metrics::EvaluationReport;

pub fn cmd_stats(corpus_dir: &Path, split_file: &Path, scope: StatsScope) -> Result<CorpusStats> {
    let corpus = load_corpus(corpus_dir, split_file)
        .with_context(|| format!("loading corpus from {}", corpus_dir.display()))?;
    Ok(compute_stats(&corpus, scope))
}

pub fn cmd_embed_titles(config: &RunConfig) -> Result<EmbedSummary> {
    let corpus = load_corpus(&config.corpus.dir, &config.corpus.split_file)?;
    let gateway = build_gateway(&config.gateway, &config.model, &corpus)?;
    let (_, summary) = embed_titles(&corpus, &gateway)?;
    Ok(summary)
}

pub enum RunResult {
    DryRun(DryRunEstimate),
    Done(Box<RunOutcome>),
}

pub fn cmd_run_icl(config: &RunConfig, dry_run: bool) -> Result<RunResult> {
    let corpus = load_corpus(&config.corpus.dir, &config.corpus.split_file)?;
    if dry_run {
        config.validate()?;
        return Ok(RunResult::DryRun(estimate(config, &corpus)?));
    }
    let gateway = build_gateway(&config.gateway, &config.model, &corpus)?;
    Ok(RunResult::Done(Box::new(run_icl_with(config, &corpus, &gateway)?)))
}

/// Re-executes a finished run against its response store into `out_dir`.
pub fn cmd_replay(run_dir: &Path, out_dir: &Path) -> Result<RunOutcome> {
    let manifest = RunManifest::load(&run_dir.join(MANIFEST_FILE))?;
    let config = manifest.replay_config(out_dir.to_path_buf())?;
    match cmd_run_icl(&config, false)? {
        RunResult::Done(outcome) => Ok(*outcome),
        RunResult::DryRun(_) => unreachable!(),
    }
}

pub fn cmd_evaluate(records_path: &Path, corpus_dir: &Path, split_file: &Path) -> Result<EvaluationReport> {
    let corpus = load_corpus(corpus_dir, split_file)?;
    Ok(evaluate_records(records_path, &corpus)?)
}

pub fn cmd_export_finetune(
    corpus_dir: &Path,
    split_file: &Path,
    split: SplitSet,
    featxt: bool,
    out: &Path,
) -> Result<usize> {
    let corpus = load_corpus(corpus_dir, split_file)?;
    Ok(finetune::export(&corpus, split, featxt, out)?)
}
