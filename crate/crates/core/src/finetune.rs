//! Chat-format JSONL export of per-component training records for
//! supervised fine-tuning.
//!
//! Each line is one record:
//!
//! ```text
//! {"messages":[{"role":"system","content":...},{"role":"user","content":...},{"role":"assistant","content":"Premise"}]}
//! ```
//!
//! Essays are written in id order, components in document order. Without
//! features the user message is the component text alone. With features it
//! adds the essay title, the covering sentence, the paragraph number and the
//! four yes/no structural sentences.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ArgumentComponent, Corpus, Essay, Label, SplitSet};
use crate::features::{extract_contextual, extract_structural, render_featxt, FeatureError};

pub const FINETUNE_SYSTEM_TEXT: &str = "You classify argument components taken from persuasive essays. \
Answer with exactly one of: Major Claim, Claim, Premise.";

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub messages: Vec<ChatMessage>,
}

impl FinetuneRecord {
    pub fn new(system_text: &str, user_text: String, label: Label) -> Self {
        let msg = |role: &str, content: String| ChatMessage {
            role: role.to_string(),
            content,
        };
        FinetuneRecord {
            messages: vec![
                msg("system", system_text.to_string()),
                msg("user", user_text),
                msg("assistant", label.display_name().to_string()),
            ],
        }
    }

    pub fn user_text(&self) -> &str {
        &self.messages[1].content
    }

    pub fn assistant_text(&self) -> &str {
        &self.messages[2].content
    }
}

/// User message for one component.
pub fn user_text(essay: &Essay, component: &ArgumentComponent, featxt: bool) -> Result<String, FeatureError> {
    if !featxt {
        return Ok(component.text.clone());
    }
    let structural = extract_structural(essay, component)?;
    let contextual = extract_contextual(essay, component)?;
    Ok(format!(
        "Argument component: {}\nEssay title: {}\nSentence: {}\nParagraph number: {}\n{}",
        component.text,
        contextual.essay_title,
        contextual.covering_sentence,
        structural.paragraph_number,
        render_featxt(&structural),
    ))
}

pub fn records(corpus: &Corpus, split: SplitSet, featxt: bool) -> Result<Vec<FinetuneRecord>, FeatureError> {
    let mut out = Vec::new();
    // subset() follows corpus order, which is sorted by essay id
    for essay in corpus.subset(split) {
        for component in &essay.components {
            out.push(FinetuneRecord::new(
                FINETUNE_SYSTEM_TEXT,
                user_text(essay, component, featxt)?,
                component.gold_label,
            ));
        }
    }
    Ok(out)
}

/// Writes one JSON record per line to `out`; returns the record count.
pub fn export(corpus: &Corpus, split: SplitSet, featxt: bool, out: &Path) -> Result<usize, FinetuneError> {
    let recs = records(corpus, split, featxt)?;
    let io_err = |source| FinetuneError::Io {
        path: out.display().to_string(),
        source,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut w = BufWriter::new(File::create(out).map_err(io_err)?);
    for r in &recs {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(recs.len())
}
