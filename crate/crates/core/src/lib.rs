//! Argument type classification on persuasive essays with large language
//! models.
//!
//! The crate covers the whole offline-reproducible pipeline:
//!
//! - [`corpus`]: brat standoff parsing, the official train/test split and
//!   corpus statistics.
//! - [`features`]: structural and contextual component features and their
//!   textual rendering.
//! - [`gateway`]: chat-completion and embedding access with live, cached,
//!   replay and mock backends.
//! - [`selection`]: demonstration-essay selection (random, component-count
//!   neighbours, title-embedding neighbours) and k-of-N subsampling.
//! - [`prompting`]: prompt construction and response parsing.
//! - [`ensemble`]: n-round ensembling with component-wise majority vote.
//! - [`metrics`]: per-class precision/recall/F1 and macro F1.
//! - [`finetune`]: chat-format JSONL export for supervised fine-tuning.
//! - [`experiment`]: run configuration, manifests and the resumable runner
//!   used by the command-line tool.

pub mod corpus;
pub mod ensemble;
pub mod experiment;
pub mod features;
pub mod finetune;
pub mod gateway;
pub mod metrics;
pub mod prompting;
pub mod selection;
pub mod synth;

pub use corpus::{ArgumentComponent, Corpus, CorpusStats, Essay, Label, Span, SplitSet, StatsScope};
pub use ensemble::{majority_vote, run_ensemble, IclConfig, PredictionRecord};
pub use experiment::{RunConfig, RunManifest};
pub use features::{ContextualFeatures, StructuralFeatures};
pub use gateway::{BackendTag, ChatRequest, ChatResponse, EmbeddingVector, Gateway};
pub use metrics::{evaluate, EvaluationReport};
pub use prompting::{InfoBlock, Prompt, PromptConfig, PromptMode};
pub use selection::{SelectionOutcome, SelectionStrategy};
