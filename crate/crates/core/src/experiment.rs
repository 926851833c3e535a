//! Run configuration, gateway assembly and the resumable experiment runner.
//!
//! A run directory holds:
//!
//! | file            | contents                                              |
//! |-----------------|-------------------------------------------------------|
//! | `records.jsonl` | one [`PredictionRecord`] per test essay, sorted by id |
//! | `report.json`   | the [`EvaluationReport`]                              |
//! | `report.txt`    | the report as a result-table row                      |
//! | `manifest.json` | [`RunManifest`]: config, digest, tags, usage, timing  |
//!
//! Records and reports carry no timestamps, so two runs with the same
//! config against the same store are byte-identical. Wall-clock time lives
//! in the manifest only.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{essays_stats, load_corpus, Corpus, CorpusError, Essay, Label, SplitSet};
use crate::ensemble::{run_ensemble, EnsembleContext, EnsembleError, IclConfig, PredictionRecord};
use crate::gateway::{
    Audit, BackendTag, ChatRequest, Gateway, GatewayError, MockEmbeddings, MockUpstream, OpenAiCompatible,
    ResponseStore, Upstream, Usage,
};
use crate::metrics::{aggregate_runs, render_table, EvaluationReport, MetricsError};
use crate::prompting::{query_components, render_labels, ClassDefinitions, InfoBlock, ModelSettings, PromptConfig, PromptMode};
use crate::selection::{SelectionStrategy, TitleIndex};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("run directory {dir} belongs to config {found}, not {expected}")]
    DigestMismatch { dir: PathBuf, expected: String, found: String },
    #[error("{failed} of {total} essays failed; first: {first}")]
    EssaysFailed { failed: usize, total: usize, first: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Live,
    Cache,
    Replay,
    Mock,
}

/// Where chat answers come from when the gateway needs to fetch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpstreamKind {
    /// OpenAI-compatible HTTP endpoint.
    Http,
    /// Answers with the query essay's gold labels.
    GoldEcho,
    /// Answers every component with one label.
    Constant(Label),
    /// Deterministic pseudo-random labels derived from the request hash.
    PseudoRandom,
}

impl FromStr for UpstreamKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "http" => Ok(UpstreamKind::Http),
            "gold-echo" => Ok(UpstreamKind::GoldEcho),
            "pseudo-random" => Ok(UpstreamKind::PseudoRandom),
            other => match other.strip_prefix("constant:") {
                Some(label) => Label::from_loose(label)
                    .map(UpstreamKind::Constant)
                    .ok_or_else(|| format!("unknown label in {other:?}")),
                None => Err(format!(
                    "unknown upstream {other:?} (http, gold-echo, pseudo-random, constant:<Label>)"
                )),
            },
        }
    }
}

impl std::fmt::Display for UpstreamKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UpstreamKind::Http => f.write_str("http"),
            UpstreamKind::GoldEcho => f.write_str("gold-echo"),
            UpstreamKind::Constant(l) => write!(f, "constant:{}", l.display_name()),
            UpstreamKind::PseudoRandom => f.write_str("pseudo-random"),
        }
    }
}

impl Serialize for UpstreamKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UpstreamKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub dir: PathBuf,
    pub split_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_model")]
    pub name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_embedding_model")]
    pub embedding_model: String,
}

fn default_model() -> String {
    ModelSettings::default().model_name
}
fn default_max_tokens() -> u32 {
    ModelSettings::default().max_output_tokens
}
fn default_embedding_model() -> String {
    "text-embedding-ada-002".to_string()
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            name: default_model(),
            temperature: 0.0,
            max_output_tokens: default_max_tokens(),
            embedding_model: default_embedding_model(),
        }
    }
}

impl ModelSection {
    pub fn settings(&self) -> ModelSettings {
        ModelSettings {
            model_name: self.name.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: Backend,
    #[serde(default = "default_upstream")]
    pub upstream: UpstreamKind,
    /// Response store; required for cache and replay, optional for live.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_api_base")]
    pub api_base: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Dimension of mock title embeddings.
    #[serde(default = "default_mock_dim")]
    pub mock_embedding_dim: usize,
}

fn default_upstream() -> UpstreamKind {
    UpstreamKind::Http
}
fn default_api_base() -> String {
    "https://api.openai.com/v1".to_string()
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}
fn default_max_in_flight() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}
fn default_mock_dim() -> usize {
    8
}

impl GatewaySection {
    pub fn mock(upstream: UpstreamKind) -> Self {
        GatewaySection {
            backend: Backend::Mock,
            upstream,
            cache_dir: None,
            api_base: default_api_base(),
            api_key_env: default_api_key_env(),
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout(),
            mock_embedding_dim: default_mock_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IclSection {
    pub strategy: SelectionStrategy,
    pub k: usize,
    #[serde(alias = "n")]
    pub n_rounds: u32,
    #[serde(default)]
    pub info: bool,
    #[serde(default)]
    pub essay: bool,
    #[serde(default)]
    pub fts: bool,
    #[serde(default = "default_mode")]
    pub mode: PromptMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_mode() -> PromptMode {
    PromptMode::AllAtOnce
}
fn default_retries() -> u32 {
    2
}

impl IclSection {
    pub fn config(&self) -> IclConfig {
        IclConfig {
            strategy: self.strategy,
            k: self.k,
            n_rounds: self.n_rounds,
            prompt: PromptConfig {
                include_info: self.info,
                include_essay: self.essay,
                include_fts: self.fts,
                mode: self.mode,
            },
            run_seed: self.seed,
            retries: self.retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// Declarative run description, normally read from TOML:
///
/// ```toml
/// [corpus]
/// dir = "data/brat-project-final"
/// split_file = "data/train-test-split.csv"
///
/// [model]
/// name = "gpt-4"
///
/// [gateway]
/// backend = "cache"          # live | cache | replay | mock
/// cache_dir = "store"
///
/// [icl]
/// strategy = "knn"           # knn | knn-len | krn
/// k = 5
/// n_rounds = 5
/// info = true
/// essay = true
///
/// [output]
/// dir = "runs/info-essay-5nn-5ens"
/// ```
///
/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    pub gateway: GatewaySection,
    pub icl: IclSection,
    pub output: OutputSection,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus.dir);
        resolve(base, &mut self.corpus.split_file);
        resolve(base, &mut self.output.dir);
        if let Some(dir) = self.gateway.cache_dir.as_mut() {
            resolve(base, dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Rejects unusable settings; returns warnings for nonstandard ones.
    pub fn validate(&self) -> Result<Vec<String>, ExperimentError> {
        let mut warnings = self.icl.config().validate()?;
        let g = &self.gateway;
        match g.backend {
            Backend::Cache | Backend::Replay if g.cache_dir.is_none() => {
                return Err(ExperimentError::Config(format!(
                    "backend {:?} needs gateway.cache_dir",
                    g.backend
                )))
            }
            Backend::Mock if g.upstream == UpstreamKind::Http => {
                return Err(ExperimentError::Config(
                    "mock backend needs a mock upstream (gold-echo, pseudo-random, constant:<Label>)".into(),
                ))
            }
            _ => {}
        }
        if g.backend == Backend::Live && g.upstream != UpstreamKind::Http {
            warnings.push(format!("live backend with mock upstream {}", g.upstream));
        }
        if self.model.temperature != 0.0 {
            warnings.push(format!("temperature {} makes cached answers order-dependent", self.model.temperature));
        }
        Ok(warnings)
    }

    /// SHA-256 over the fields that change what the model is asked or how
    /// answers are combined: model settings, the ICL configuration and the
    /// upstream kind. Paths, backend mode and concurrency are excluded, so
    /// a cached run and its replay share a digest.
    pub fn digest(&self) -> String {
        let semantic = serde_json::json!({
            "model": self.model,
            "icl": self.icl,
            "upstream": self.gateway.upstream.to_string(),
        });
        crate::gateway::digest_json(&semantic)
    }

    pub fn row_label(&self) -> String {
        self.icl.config().row_label()
    }
}

/// Answers prompts with gold labels looked up from the listed query
/// components.
fn gold_echo(corpus: &Corpus) -> impl Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync + 'static {
    let mut table: HashMap<String, Vec<Label>> = HashMap::new();
    for e in corpus.essays() {
        let key = e.components.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join("\n");
        table.entry(key).or_insert_with(|| e.gold_labels());
    }
    move |request| {
        let (components, index) = query_components(&request.user_text);
        let labels = table
            .get(&components.join("\n"))
            .ok_or_else(|| GatewayError::Script("query essay not found in corpus".into()))?;
        Ok(match index {
            Some(j) => format!("{j}. {}", labels[j - 1]),
            None => render_labels(labels),
        })
    }
}

fn answer_each(
    request: &ChatRequest,
    mut pick: impl FnMut(usize) -> Label,
) -> Result<String, GatewayError> {
    let (components, index) = query_components(&request.user_text);
    if components.is_empty() {
        return Err(GatewayError::Script("no query components in prompt".into()));
    }
    Ok(match index {
        Some(j) => format!("{j}. {}", pick(j)),
        None => render_labels(&(1..=components.len()).map(pick).collect::<Vec<_>>()),
    })
}

fn mock_upstream(kind: &UpstreamKind, corpus: &Corpus, dim: usize) -> MockUpstream {
    let upstream = match kind.clone() {
        UpstreamKind::GoldEcho => MockUpstream::from_fn(gold_echo(corpus)),
        UpstreamKind::Constant(label) => MockUpstream::from_fn(move |r| answer_each(r, |_| label)),
        UpstreamKind::PseudoRandom => MockUpstream::from_fn(|r| {
            let key = r.cache_key();
            answer_each(r, |j| {
                let h = Sha256::digest(format!("{key}/{j}"));
                Label::ALL[h[0] as usize % 3]
            })
        }),
        UpstreamKind::Http => unreachable!("http is not a mock upstream"),
    };
    upstream.with_embeddings(MockEmbeddings::hashed(dim))
}

/// Assembles the gateway described by `section`. Mock upstreams need the
/// corpus (gold-echo looks labels up in it).
pub fn build_gateway(section: &GatewaySection, model: &ModelSection, corpus: &Corpus) -> Result<Gateway, ExperimentError> {
    let upstream = || -> Result<Arc<dyn Upstream>, ExperimentError> {
        Ok(match section.upstream {
            UpstreamKind::Http => Arc::new(OpenAiCompatible::from_env(
                section.api_base.clone(),
                &section.api_key_env,
                Duration::from_secs(section.timeout_secs),
            )?),
            ref kind => Arc::new(mock_upstream(kind, corpus, section.mock_embedding_dim)),
        })
    };
    let store = || -> Result<ResponseStore, ExperimentError> {
        match &section.cache_dir {
            Some(dir) => Ok(ResponseStore::on_disk(dir.clone())?),
            None => Ok(ResponseStore::in_memory()),
        }
    };
    let gateway = match section.backend {
        Backend::Live => Gateway::live(upstream()?, store()?),
        Backend::Cache => Gateway::cached(upstream()?, store()?),
        Backend::Replay => Gateway::replay(store()?),
        Backend::Mock => Gateway::mock(upstream()?),
    };
    Ok(gateway
        .with_max_in_flight(section.max_in_flight)
        .with_embedding_model(model.embedding_model.clone()))
}

/// Request counts a run would issue, before retries and caching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DryRunEstimate {
    pub row_label: String,
    pub test_essays: usize,
    pub already_recorded: usize,
    pub chat_requests: usize,
    pub embedding_requests: usize,
}

impl std::fmt::Display for DryRunEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "run:                {}", self.row_label)?;
        writeln!(f, "test essays:        {} ({} already recorded)", self.test_essays, self.already_recorded)?;
        writeln!(f, "chat requests:      {}", self.chat_requests)?;
        write!(f, "embedding requests: {}", self.embedding_requests)
    }
}

pub fn estimate(config: &RunConfig, corpus: &Corpus) -> Result<DryRunEstimate, ExperimentError> {
    let done = read_records_if_present(&config.output.dir.join(RECORDS_FILE))?
        .into_iter()
        .map(|r| r.essay_id)
        .collect::<BTreeSet<_>>();
    let pending: Vec<&Essay> = corpus.test().into_iter().filter(|e| !done.contains(&e.essay_id)).collect();
    let per_round: usize = match config.icl.mode {
        PromptMode::AllAtOnce => pending.len(),
        PromptMode::OneByOne => pending.iter().map(|e| e.component_count()).sum(),
    };
    Ok(DryRunEstimate {
        row_label: config.row_label(),
        test_essays: corpus.test().len(),
        already_recorded: done.len(),
        chat_requests: per_round * config.icl.n_rounds as usize,
        embedding_requests: if config.icl.strategy == SelectionStrategy::TitleSimilarity {
            corpus.essays().len()
        } else {
            0
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub titles: usize,
    pub fetched: u64,
    pub reused: u64,
}

/// Embeds every essay title through `gateway`.
pub fn embed_titles(corpus: &Corpus, gateway: &Gateway) -> Result<(TitleIndex, EmbedSummary), ExperimentError> {
    let before = gateway.audit();
    let index = TitleIndex::build(corpus.essays(), gateway)?;
    let after = gateway.audit();
    let fetched = after.embedding_fetches - before.embedding_fetches;
    Ok((
        index,
        EmbedSummary {
            titles: corpus.essays().len(),
            fetched,
            reused: corpus.essays().len() as u64 - fetched.min(corpus.essays().len() as u64),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config_digest: String,
    pub row_label: String,
    pub run_seed: u64,
    pub config: RunConfig,
    pub backend_tags: Vec<BackendTag>,
    pub records_file: String,
    /// Essay ids in record order.
    pub essay_ids: Vec<String>,
    pub usage: Usage,
    pub audit: Audit,
    pub wall_clock_secs: f64,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    /// The recorded config switched to the replay backend.
    pub fn replay_config(&self, output_dir: PathBuf) -> Result<RunConfig, ExperimentError> {
        let mut config = self.config.clone();
        if config.gateway.cache_dir.is_none() {
            return Err(ExperimentError::Config("manifest run had no response store to replay".into()));
        }
        config.gateway.backend = Backend::Replay;
        config.output.dir = output_dir;
        Ok(config)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub report: EvaluationReport,
    pub records: Vec<PredictionRecord>,
    /// Essays skipped because an earlier run had recorded them.
    pub resumed: usize,
}

/// Reads `records.jsonl`, ignoring a torn final line from an interrupted
/// write.
pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("{}: dropping incomplete last record ({e})", path.display());
            }
            Err(e) => {
                return Err(ExperimentError::Io {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn read_records_if_present(path: &Path) -> Result<Vec<PredictionRecord>, ExperimentError> {
    if path.exists() {
        read_records(path)
    } else {
        Ok(Vec::new())
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn record_line(r: &PredictionRecord) -> String {
    serde_json::to_string(r).expect("record serializes") + "\n"
}

/// Runs the configured experiment over the test split, loading the corpus
/// from the config.
pub fn run_icl(config: &RunConfig) -> Result<RunOutcome, ExperimentError> {
    let corpus = load_corpus(&config.corpus.dir, &config.corpus.split_file)?;
    let gateway = build_gateway(&config.gateway, &config.model, &corpus)?;
    run_icl_with(config, &corpus, &gateway)
}

/// Runs over the test split of `corpus` with demonstrations from its train
/// split. Essays already in the run directory are skipped; new records are
/// appended as they finish, then the file is rewritten in id order.
pub fn run_icl_with(config: &RunConfig, corpus: &Corpus, gateway: &Gateway) -> Result<RunOutcome, ExperimentError> {
    let started = Instant::now();
    let warnings = config.validate()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let digest = config.digest();
    let out_dir = &config.output.dir;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let previous = RunManifest::load(&manifest_path)?;
        if previous.config_digest != digest {
            return Err(ExperimentError::DigestMismatch {
                dir: out_dir.clone(),
                expected: digest,
                found: previous.config_digest,
            });
        }
    }
    let records_path = out_dir.join(RECORDS_FILE);
    let existing = read_records_if_present(&records_path)?;
    if !existing.is_empty() && !manifest_path.exists() {
        return Err(ExperimentError::Config(format!(
            "{} has records but no manifest; refusing to mix runs",
            out_dir.display()
        )));
    }
    let done: BTreeSet<String> = existing.iter().map(|r| r.essay_id.clone()).collect();
    // rewrite what was read so a torn tail does not precede new appends
    let existing_text: String = existing.iter().map(record_line).collect();
    write_atomic(&records_path, existing_text.as_bytes())?;

    let icl = config.icl.config();
    let settings = config.model.settings();
    let train = corpus.train();
    let info = InfoBlock::new(ClassDefinitions::default(), &essays_stats(&train));
    let titles = if icl.strategy == SelectionStrategy::TitleSimilarity {
        let pending = corpus.test().into_iter().filter(|e| !done.contains(&e.essay_id));
        Some(TitleIndex::build(train.iter().copied().chain(pending), gateway)?)
    } else {
        None
    };
    let ctx = EnsembleContext {
        gateway,
        settings: &settings,
        info: icl.prompt.include_info.then_some(&info),
        titles: titles.as_ref(),
    };

    let pending: Vec<&Essay> = corpus.test().into_iter().filter(|e| !done.contains(&e.essay_id)).collect();
    log::info!(
        "{}: {} essays to run, {} already recorded",
        config.row_label(),
        pending.len(),
        done.len()
    );
    let appender = Mutex::new(
        OpenOptions::new()
            .append(true)
            .open(&records_path)
            .map_err(io_err(&records_path))?,
    );
    let results: Vec<Result<PredictionRecord, EnsembleError>> = pending
        .par_iter()
        .map(|essay| {
            let record = run_ensemble(essay, &train, &icl, ctx)?;
            let mut file = appender.lock().unwrap();
            if let Err(e) = file.write_all(record_line(&record).as_bytes()).and_then(|_| file.flush()) {
                log::error!("appending record for {}: {e}", record.essay_id);
            }
            Ok(record)
        })
        .collect();
    drop(appender);

    let mut records = existing;
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(record) => records.push(record),
            Err(e) => failures.push(e),
        }
    }
    records.sort_by(|a, b| a.essay_id.cmp(&b.essay_id));
    let sorted: String = records.iter().map(record_line).collect();
    write_atomic(&records_path, sorted.as_bytes())?;

    let audit = gateway.audit();
    let mut usage = Usage::default();
    for r in &records {
        usage += r.usage;
    }
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        config_digest: digest.clone(),
        row_label: config.row_label(),
        run_seed: config.icl.seed,
        config: config.clone(),
        backend_tags: record_tags(&records),
        records_file: RECORDS_FILE.to_string(),
        essay_ids: records.iter().map(|r| r.essay_id.clone()).collect(),
        usage,
        audit,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        warnings,
    };
    write_atomic(
        &manifest_path,
        (serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").as_bytes(),
    )?;

    if let Some(first) = failures.first() {
        return Err(ExperimentError::EssaysFailed {
            failed: failures.len(),
            total: pending.len(),
            first: first.to_string(),
        });
    }

    let report = aggregate_runs(&records, corpus)?.with_run(config.row_label(), digest);
    write_atomic(&out_dir.join(REPORT_JSON), report.to_json().as_bytes())?;
    write_atomic(&out_dir.join(REPORT_TXT), render_table(&[&report]).as_bytes())?;
    Ok(RunOutcome {
        manifest,
        report,
        records,
        resumed: done.len(),
    })
}

/// Distinct backend tags over every response in `records`.
pub fn record_tags(records: &[PredictionRecord]) -> Vec<BackendTag> {
    let mut tags: Vec<BackendTag> = records
        .iter()
        .flat_map(|r| r.rounds.iter())
        .flat_map(|round| round.responses.iter().map(|resp| resp.backend))
        .collect();
    tags.sort();
    tags.dedup();
    tags
}

/// Evaluates a records file against the corpus gold labels.
pub fn evaluate_records(path: &Path, corpus: &Corpus) -> Result<EvaluationReport, ExperimentError> {
    let records = read_records(path)?;
    Ok(aggregate_runs(&records, corpus)?)
}

/// Per-split component counts, as a quick sanity summary.
pub fn split_component_counts(corpus: &Corpus) -> BTreeMap<SplitSet, usize> {
    let mut out = BTreeMap::new();
    for e in corpus.essays() {
        if let Some(s) = corpus.split_of(&e.essay_id) {
            *out.entry(s).or_default() += e.component_count();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthSpec};

    fn spec() -> SynthSpec {
        SynthSpec {
            train: 24,
            test: 6,
            seed: 11,
        }
    }

    fn config(dir: &Path, upstream: UpstreamKind, strategy: SelectionStrategy) -> RunConfig {
        let (essays, split) = synth::write_corpus(&dir.join("data"), spec()).unwrap();
        RunConfig {
            corpus: CorpusSection {
                dir: essays,
                split_file: split,
            },
            model: ModelSection::default(),
            gateway: GatewaySection::mock(upstream),
            icl: IclSection {
                strategy,
                k: 3,
                n_rounds: 3,
                info: true,
                essay: true,
                fts: false,
                mode: PromptMode::AllAtOnce,
                seed: 5,
                retries: 2,
            },
            output: OutputSection { dir: dir.join("run") },
        }
    }

    #[test]
    fn toml_round_trip_and_relative_paths() {
        let text = r#"
[corpus]
dir = "data/essays"
split_file = "data/split.csv"

[gateway]
backend = "mock"
upstream = "constant:Premise"

[icl]
strategy = "knn-len"
k = 5
n = 3
info = true

[output]
dir = "out"
"#;
        let mut c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.gateway.upstream, UpstreamKind::Constant(Label::Premise));
        assert_eq!(c.icl.n_rounds, 3);
        assert_eq!(c.model.name, "gpt-4");
        c.resolve_paths(Path::new("/base"));
        assert_eq!(c.output.dir, Path::new("/base/out"));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(RunConfig::from_toml(&text.replace("k = 5", "k = 5\nbogus = 1")).is_err());
    }

    #[test]
    fn digest_tracks_semantic_fields_only() {
        let dir = tempfile::tempdir().unwrap();
        let base = config(dir.path(), UpstreamKind::GoldEcho, SelectionStrategy::TitleSimilarity);
        let d = base.digest();
        let mut same = base.clone();
        same.output.dir = "elsewhere".into();
        same.gateway.max_in_flight = 16;
        same.gateway.backend = Backend::Replay;
        same.corpus.dir = "x".into();
        assert_eq!(same.digest(), d);
        let changes: Vec<fn(&mut RunConfig)> = vec![
            |c| c.icl.k = 5,
            |c| c.icl.n_rounds = 5,
            |c| c.icl.info = false,
            |c| c.icl.essay = false,
            |c| c.icl.fts = true,
            |c| c.icl.seed = 6,
            |c| c.icl.mode = PromptMode::OneByOne,
            |c| c.icl.strategy = SelectionStrategy::Random,
            |c| c.model.name = "gpt-3.5-turbo".into(),
            |c| c.model.temperature = 0.5,
            |c| c.gateway.upstream = UpstreamKind::PseudoRandom,
        ];
        for change in changes {
            let mut c = base.clone();
            change(&mut c);
            assert_ne!(c.digest(), d, "{c:?}");
        }
    }

    #[test]
    fn gold_echo_run_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), UpstreamKind::GoldEcho, SelectionStrategy::TitleSimilarity);
        let out = run_icl(&c).unwrap();
        assert_eq!(out.report.macro_f1, 1.0);
        assert_eq!(out.records.len(), 6);
        assert_eq!(out.manifest.backend_tags, vec![BackendTag::Mock]);
        assert_eq!(out.manifest.row_label, "info + essay + 3NN + 3Ens");
        assert!(dir.path().join("run").join(REPORT_TXT).exists());
    }

    #[test]
    fn one_by_one_gold_echo_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), UpstreamKind::GoldEcho, SelectionStrategy::ComponentCount);
        c.icl.mode = PromptMode::OneByOne;
        c.icl.fts = true;
        c.icl.n_rounds = 1;
        assert_eq!(run_icl(&c).unwrap().report.macro_f1, 1.0);
    }

    #[test]
    fn resume_skips_recorded_essays_and_reproduces_report() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), UpstreamKind::PseudoRandom, SelectionStrategy::Random);
        let full = run_icl(&c).unwrap();
        let report = fs::read(c.output.dir.join(REPORT_JSON)).unwrap();
        let records_path = c.output.dir.join(RECORDS_FILE);
        let text = fs::read_to_string(&records_path).unwrap();
        // keep two records and a torn third line
        let lines: Vec<&str> = text.lines().collect();
        let torn = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
        fs::write(&records_path, torn).unwrap();
        let resumed = run_icl(&c).unwrap();
        assert_eq!(resumed.resumed, 2);
        assert_eq!(resumed.records, full.records);
        assert_eq!(fs::read(c.output.dir.join(REPORT_JSON)).unwrap(), report);
        assert_eq!(fs::read_to_string(&records_path).unwrap(), text);
    }

    #[test]
    fn changed_config_refuses_existing_run_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), UpstreamKind::GoldEcho, SelectionStrategy::ComponentCount);
        run_icl(&c).unwrap();
        c.icl.k = 5;
        assert!(matches!(run_icl(&c), Err(ExperimentError::DigestMismatch { .. })));
    }

    #[test]
    fn replay_reproduces_cached_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), UpstreamKind::PseudoRandom, SelectionStrategy::TitleSimilarity);
        c.gateway.backend = Backend::Cache;
        c.gateway.cache_dir = Some(dir.path().join("store"));
        let cached = run_icl(&c).unwrap();
        let manifest = RunManifest::load(&c.output.dir.join(MANIFEST_FILE)).unwrap();
        let replay = manifest.replay_config(dir.path().join("replay")).unwrap();
        let out = run_icl(&replay).unwrap();
        assert_eq!(out.report, cached.report);
        assert_eq!(out.manifest.backend_tags, vec![BackendTag::Replay]);
        assert_eq!(out.manifest.audit.network_calls(), 0);
        let finals = |rs: &[PredictionRecord]| rs.iter().map(|r| r.final_labels.clone()).collect::<Vec<_>>();
        assert_eq!(finals(&out.records), finals(&cached.records));
        let again = manifest.replay_config(dir.path().join("replay2")).unwrap();
        run_icl(&again).unwrap();
        for file in [RECORDS_FILE, REPORT_JSON] {
            assert_eq!(
                fs::read(replay.output.dir.join(file)).unwrap(),
                fs::read(again.output.dir.join(file)).unwrap()
            );
        }
    }

    #[test]
    fn estimate_counts_requests() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), UpstreamKind::GoldEcho, SelectionStrategy::TitleSimilarity);
        let corpus = load_corpus(&c.corpus.dir, &c.corpus.split_file).unwrap();
        let e = estimate(&c, &corpus).unwrap();
        assert_eq!((e.test_essays, e.chat_requests, e.embedding_requests), (6, 18, 30));
        c.icl.mode = PromptMode::OneByOne;
        let m: usize = corpus.test().iter().map(|e| e.component_count()).sum();
        assert_eq!(estimate(&c, &corpus).unwrap().chat_requests, 3 * m);
    }

    #[test]
    fn validation_rules() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), UpstreamKind::GoldEcho, SelectionStrategy::Random);
        assert!(c.validate().unwrap().is_empty());
        c.icl.k = 4;
        assert_eq!(c.validate().unwrap().len(), 1);
        c.gateway.backend = Backend::Replay;
        assert!(c.validate().is_err());
        c.gateway.backend = Backend::Mock;
        c.gateway.upstream = UpstreamKind::Http;
        assert!(c.validate().is_err());
    }
}
