//! Persuasive-essay corpus: brat standoff parsing, train/test split and
//! corpus statistics.
//!
//! Offsets in brat `.ann` files count Unicode scalar values, not bytes, so
//! every [`Span`] here is a character span. [`Essay`] keeps a char-to-byte
//! table to slice its raw text in O(1).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("essay {essay_id}: text file is empty")]
    EmptyText { essay_id: String },
    #[error("essay {essay_id}, annotation line {line}: {reason}")]
    MalformedAnnotation {
        essay_id: String,
        line: usize,
        reason: String,
    },
    #[error("missing .txt/.ann pair: {0}")]
    MissingPair(String),
    #[error("split mismatch: {0}")]
    SplitMismatch(String),
    #[error("split file line {line}: {reason}")]
    BadSplitFile { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Argument component class.
///
/// The derived order is the vote tie-break order: `Premise > Claim >
/// MajorClaim`, i.e. more frequent classes in the training data rank higher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    MajorClaim,
    Claim,
    Premise,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::MajorClaim, Label::Claim, Label::Premise];

    /// Position in [`Label::ALL`]; used to index per-class arrays.
    pub fn index(self) -> usize {
        match self {
            Label::MajorClaim => 0,
            Label::Claim => 1,
            Label::Premise => 2,
        }
    }

    /// Human-readable class name used in prompts and fine-tuning targets.
    pub fn display_name(self) -> &'static str {
        match self {
            Label::MajorClaim => "Major Claim",
            Label::Claim => "Claim",
            Label::Premise => "Premise",
        }
    }

    /// Column header used in evaluation tables.
    pub fn short_name(self) -> &'static str {
        match self {
            Label::MajorClaim => "MC",
            Label::Claim => "C",
            Label::Premise => "P",
        }
    }

    /// Tolerant match on free text: case-insensitive, ignores whitespace,
    /// underscores, hyphens and surrounding punctuation.
    pub fn from_loose(text: &str) -> Option<Label> {
        let norm: String = text
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match norm.as_str() {
            "majorclaim" => Some(Label::MajorClaim),
            "claim" => Some(Label::Claim),
            "premise" => Some(Label::Premise),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Parses the brat entity type token (`MajorClaim`, `Claim`, `Premise`).
impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MajorClaim" => Ok(Label::MajorClaim),
            "Claim" => Ok(Label::Claim),
            "Premise" => Ok(Label::Premise),
            other => Err(format!("unknown label token {other:?}")),
        }
    }
}

/// Half-open character range `[start, end)` into an essay's raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentComponent {
    pub id: String,
    pub span: Span,
    pub text: String,
    pub gold_label: Label,
    /// 0-based index into [`Essay::paragraphs`].
    pub paragraph_index: usize,
    /// 0-based position among the essay's components in document order.
    pub ordinal: usize,
}

#[derive(Debug, Clone)]
pub struct Essay {
    pub essay_id: String,
    pub title: String,
    /// Body paragraphs in document order; the title line is not included.
    pub paragraphs: Vec<Span>,
    pub components: Vec<ArgumentComponent>,
    raw_text: String,
    // byte offset of each char, plus a trailing entry for the text length
    byte_offsets: Vec<usize>,
}

impl Essay {
    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    /// Length of the raw text in characters.
    pub fn char_len(&self) -> usize {
        self.byte_offsets.len() - 1
    }

    /// Slices the raw text by a character span.
    ///
    /// Panics if the span is out of bounds.
    pub fn slice(&self, span: Span) -> &str {
        &self.raw_text[self.byte_offsets[span.start]..self.byte_offsets[span.end]]
    }

    pub fn paragraph_text(&self, index: usize) -> &str {
        self.slice(self.paragraphs[index])
    }

    /// Body text without the title line, paragraphs joined by newlines.
    pub fn body_text(&self) -> String {
        self.paragraphs
            .iter()
            .map(|p| self.slice(*p))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Number of argument components (`m`).
    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn gold_labels(&self) -> Vec<Label> {
        self.components.iter().map(|c| c.gold_label).collect()
    }

    /// Whether `component` is one of this essay's components.
    pub fn owns(&self, component: &ArgumentComponent) -> bool {
        self.components
            .get(component.ordinal)
            .is_some_and(|c| c.id == component.id && c.span == component.span)
    }
}

/// Parses one essay from its `.txt` and `.ann` contents.
///
/// Line 1 of the text is the title. Every following non-blank line is one
/// body paragraph. Only `T` lines of the annotation file are read; relation
/// (`R`), attribute (`A`) and any other lines are ignored.
pub fn parse_essay(text: &str, ann: &str, essay_id: &str) -> Result<Essay, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyText {
            essay_id: essay_id.to_string(),
        });
    }

    let mut byte_offsets: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    byte_offsets.push(text.len());
    let char_len = byte_offsets.len() - 1;

    let (title, paragraphs) = split_lines(text);

    let malformed = |line: usize, reason: String| CorpusError::MalformedAnnotation {
        essay_id: essay_id.to_string(),
        line,
        reason,
    };

    let mut components = Vec::new();
    for (lineno, line) in ann.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end_matches('\r');
        if !line.starts_with('T') {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let id = fields.next().unwrap_or_default();
        let (Some(head), Some(surface)) = (fields.next(), fields.next()) else {
            return Err(malformed(lineno, "expected 3 tab-separated fields".into()));
        };
        let mut head_parts = head.split(' ');
        let (Some(kind), Some(start), Some(end), None) = (
            head_parts.next(),
            head_parts.next(),
            head_parts.next(),
            head_parts.next(),
        ) else {
            return Err(malformed(
                lineno,
                format!("expected `<Type> <start> <end>`, got {head:?}"),
            ));
        };
        let gold_label: Label = kind.parse().map_err(|e| malformed(lineno, e))?;
        let parse_offset = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| malformed(lineno, format!("bad offset {s:?}")))
        };
        let span = Span::new(parse_offset(start)?, parse_offset(end)?);
        if span.start >= span.end || span.end > char_len {
            return Err(malformed(
                lineno,
                format!(
                    "offsets [{}, {}) out of range for text of {char_len} chars",
                    span.start, span.end
                ),
            ));
        }
        let slice = &text[byte_offsets[span.start]..byte_offsets[span.end]];
        if slice != surface {
            return Err(malformed(
                lineno,
                format!("surface {surface:?} does not match text slice {slice:?}"),
            ));
        }
        let paragraph_index = paragraphs
            .iter()
            .position(|p| p.contains(&span))
            .ok_or_else(|| malformed(lineno, format!("{id} is not inside a single paragraph")))?;
        components.push(ArgumentComponent {
            id: id.to_string(),
            span,
            text: surface.to_string(),
            gold_label,
            paragraph_index,
            ordinal: 0,
        });
    }

    components.sort_by_key(|c| (c.span.start, c.span.end));
    for pair in components.windows(2) {
        if pair[0].span.overlaps(&pair[1].span) {
            return Err(malformed(
                0,
                format!("components {} and {} overlap", pair[0].id, pair[1].id),
            ));
        }
    }
    for (ordinal, c) in components.iter_mut().enumerate() {
        c.ordinal = ordinal;
    }

    Ok(Essay {
        essay_id: essay_id.to_string(),
        title,
        paragraphs,
        components,
        raw_text: text.to_string(),
        byte_offsets,
    })
}

// Title is the first line; each later non-blank line is a paragraph whose
// span excludes surrounding whitespace.
fn split_lines(text: &str) -> (String, Vec<Span>) {
    let mut title = None;
    let mut paragraphs = Vec::new();
    let mut char_pos = 0;
    for line in text.split('\n') {
        let line_chars = line.chars().count();
        if title.is_none() {
            title = Some(line.trim().to_string());
        } else {
            let lead = line.chars().take_while(|c| c.is_whitespace()).count();
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let start = char_pos + lead;
                paragraphs.push(Span::new(start, start + trimmed.chars().count()));
            }
        }
        char_pos += line_chars + 1;
    }
    (title.unwrap_or_default(), paragraphs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SplitSet {
    Train,
    Test,
}

impl fmt::Display for SplitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitSet::Train => "TRAIN",
            SplitSet::Test => "TEST",
        })
    }
}

impl FromStr for SplitSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(SplitSet::Train),
            "TEST" => Ok(SplitSet::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Parses the two-column split file (`"essay001";"TRAIN"`). Both `;` and `,`
/// delimiters are accepted, quotes are optional and a header row is skipped.
pub fn parse_split(contents: &str) -> Result<BTreeMap<String, SplitSet>, CorpusError> {
    let mut split = BTreeMap::new();
    for (i, line) in contents.lines().enumerate() {
        let line = line.trim().trim_start_matches('\u{feff}');
        if line.is_empty() {
            continue;
        }
        let delim = if line.contains(';') { ';' } else { ',' };
        let cols: Vec<&str> = line.split(delim).map(|c| c.trim().trim_matches('"')).collect();
        if cols.len() != 2 {
            return Err(CorpusError::BadSplitFile {
                line: i + 1,
                reason: format!("expected 2 columns, got {}", cols.len()),
            });
        }
        match cols[1].parse::<SplitSet>() {
            Ok(set) => {
                if split.insert(cols[0].to_string(), set).is_some() {
                    return Err(CorpusError::BadSplitFile {
                        line: i + 1,
                        reason: format!("duplicate essay id {}", cols[0]),
                    });
                }
            }
            Err(_) if i == 0 || split.is_empty() => continue, // header
            Err(reason) => return Err(CorpusError::BadSplitFile { line: i + 1, reason }),
        }
    }
    Ok(split)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    essays: Vec<Essay>,
    split: BTreeMap<String, SplitSet>,
}

impl Corpus {
    /// Builds a corpus, checking that the split covers exactly the given
    /// essays. Essays are reordered by id.
    pub fn new(mut essays: Vec<Essay>, split: BTreeMap<String, SplitSet>) -> Result<Self, CorpusError> {
        essays.sort_by(|a, b| a.essay_id.cmp(&b.essay_id));
        for pair in essays.windows(2) {
            if pair[0].essay_id == pair[1].essay_id {
                return Err(CorpusError::SplitMismatch(format!(
                    "duplicate essay id {}",
                    pair[0].essay_id
                )));
            }
        }
        let unsplit: Vec<&str> = essays
            .iter()
            .map(|e| e.essay_id.as_str())
            .filter(|id| !split.contains_key(*id))
            .collect();
        if !unsplit.is_empty() {
            return Err(CorpusError::SplitMismatch(format!(
                "{} essay(s) missing from split file, e.g. {}",
                unsplit.len(),
                unsplit[0]
            )));
        }
        let absent: Vec<&str> = split
            .keys()
            .map(String::as_str)
            .filter(|id| essays.binary_search_by(|e| e.essay_id.as_str().cmp(id)).is_err())
            .collect();
        if !absent.is_empty() {
            return Err(CorpusError::SplitMismatch(format!(
                "{} essay(s) in split file not found on disk, e.g. {}",
                absent.len(),
                absent[0]
            )));
        }
        Ok(Corpus { essays, split })
    }

    pub fn essays(&self) -> &[Essay] {
        &self.essays
    }

    pub fn essay(&self, essay_id: &str) -> Option<&Essay> {
        self.essays
            .binary_search_by(|e| e.essay_id.as_str().cmp(essay_id))
            .ok()
            .map(|i| &self.essays[i])
    }

    pub fn split_of(&self, essay_id: &str) -> Option<SplitSet> {
        self.split.get(essay_id).copied()
    }

    pub fn split(&self) -> &BTreeMap<String, SplitSet> {
        &self.split
    }

    /// Essays of one split, ordered by id.
    pub fn subset(&self, set: SplitSet) -> Vec<&Essay> {
        self.essays
            .iter()
            .filter(|e| self.split[&e.essay_id] == set)
            .collect()
    }

    pub fn train(&self) -> Vec<&Essay> {
        self.subset(SplitSet::Train)
    }

    pub fn test(&self) -> Vec<&Essay> {
        self.subset(SplitSet::Test)
    }
}

/// Loads every `<id>.txt`/`<id>.ann` pair in `root_dir` and applies the
/// split file. Other files in the directory are ignored.
pub fn load_corpus(root_dir: &Path, split_file: &Path) -> Result<Corpus, CorpusError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };

    let mut txt = BTreeMap::new();
    let mut ann = BTreeMap::new();
    for entry in std::fs::read_dir(root_dir).map_err(io_err(root_dir))? {
        let path = entry.map_err(io_err(root_dir))?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        match ext {
            "txt" => txt.insert(stem.to_string(), path.clone()),
            "ann" => ann.insert(stem.to_string(), path.clone()),
            _ => None,
        };
    }
    if txt.is_empty() && ann.is_empty() {
        return Err(CorpusError::MissingPair(format!(
            "no .txt/.ann files in {}",
            root_dir.display()
        )));
    }
    if let Some(id) = txt.keys().find(|id| !ann.contains_key(*id)) {
        return Err(CorpusError::MissingPair(format!("{id}.txt has no {id}.ann")));
    }
    if let Some(id) = ann.keys().find(|id| !txt.contains_key(*id)) {
        return Err(CorpusError::MissingPair(format!("{id}.ann has no {id}.txt")));
    }

    let split_contents = std::fs::read_to_string(split_file).map_err(io_err(split_file))?;
    let split = parse_split(&split_contents)?;

    let essays = txt
        .par_iter()
        .map(|(id, txt_path)| {
            let ann_path = &ann[id];
            let text = std::fs::read_to_string(txt_path).map_err(io_err(txt_path))?;
            let annotations = std::fs::read_to_string(ann_path).map_err(io_err(ann_path))?;
            parse_essay(&text, &annotations, id)
        })
        .collect::<Result<Vec<_>, _>>()?;

    Corpus::new(essays, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsScope {
    All,
    Train,
    Test,
}

impl FromStr for StatsScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(StatsScope::All),
            "train" => Ok(StatsScope::Train),
            "test" => Ok(StatsScope::Test),
            other => Err(format!("unknown scope {other:?} (expected all, train or test)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub essays: usize,
    pub paragraphs: usize,
    pub sentences: usize,
    /// Word and punctuation tokens (see [`count_tokens`]).
    pub tokens: usize,
    /// Plain whitespace-separated tokens, reported for comparison.
    pub whitespace_tokens: usize,
    pub major_claims: usize,
    pub claims: usize,
    pub premises: usize,
    pub total_components: usize,
}

impl CorpusStats {
    pub fn label_count(&self, label: Label) -> usize {
        match label {
            Label::MajorClaim => self.major_claims,
            Label::Claim => self.claims,
            Label::Premise => self.premises,
        }
    }

    /// Two-column plain-text table.
    pub fn to_table(&self) -> String {
        let rows = [
            ("Essays", self.essays),
            ("Paragraphs", self.paragraphs),
            ("Sentences", self.sentences),
            ("Tokens", self.tokens),
            ("Tokens (whitespace)", self.whitespace_tokens),
            ("Major Claims", self.major_claims),
            ("Claims", self.claims),
            ("Premises", self.premises),
            ("Total components", self.total_components),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            out.push_str(&format!("{name:<20} {value:>9}\n"));
        }
        out
    }
}

/// Counts word and punctuation tokens: each whitespace-separated chunk
/// contributes one token for its alphanumeric core plus one per leading or
/// trailing punctuation character.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace()
        .map(|chunk| {
            let lead = chunk.chars().take_while(|c| !c.is_alphanumeric()).count();
            let total = chunk.chars().count();
            if lead == total {
                return total;
            }
            let trail = chunk.chars().rev().take_while(|c| !c.is_alphanumeric()).count();
            lead + trail + 1
        })
        .sum()
}

/// Statistics over the essays of `scope`. Sentences and tokens include the
/// title line.
pub fn compute_stats(corpus: &Corpus, scope: StatsScope) -> CorpusStats {
    let essays: Vec<&Essay> = match scope {
        StatsScope::All => corpus.essays().iter().collect(),
        StatsScope::Train => corpus.train(),
        StatsScope::Test => corpus.test(),
    };
    essays_stats(&essays)
}

pub fn essays_stats(essays: &[&Essay]) -> CorpusStats {
    let mut stats = CorpusStats {
        essays: essays.len(),
        ..Default::default()
    };
    for essay in essays {
        stats.paragraphs += essay.paragraphs.len();
        stats.sentences += features::segment_sentences(&essay.title).len();
        stats.tokens += count_tokens(&essay.title);
        stats.whitespace_tokens += essay.title.split_whitespace().count();
        for p in &essay.paragraphs {
            let text = essay.slice(*p);
            stats.sentences += features::segment_sentences(text).len();
            stats.tokens += count_tokens(text);
            stats.whitespace_tokens += text.split_whitespace().count();
        }
        for c in &essay.components {
            match c.gold_label {
                Label::MajorClaim => stats.major_claims += 1,
                Label::Claim => stats.claims += 1,
                Label::Premise => stats.premises += 1,
            }
        }
    }
    stats.total_components = stats.major_claims + stats.claims + stats.premises;
    stats
}
