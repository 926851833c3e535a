//! Prompt construction and response parsing.
//!
//! A prompt is a system text holding the task instructions and a user text
//! made of, in order: the optional info block (class definitions and
//! training-set statistics), the solved demonstration essays, the optional
//! full text of the query essay, and the numbered query components (each
//! optionally followed by its feature sentences). The model must answer with
//! one `<index>. <Label>` line per component.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStats, Essay, Label};
use crate::features::{extract_structural, render_featxt};
use crate::gateway::{BackendTag, ChatRequest, Gateway, GatewayError, Usage};

/// Section header that precedes the numbered query components.
pub const QUERY_COMPONENTS_HEADER: &str = "## Argument components to classify";

const DEFAULT_DEFINITIONS: &str = include_str!("../resources/class_definitions.txt");

const SYSTEM_TEXT: &str = "You are an expert annotator for argument mining. \
Your task is argument type classification: every argument component (AC) of a persuasive essay \
must be assigned exactly one of the classes Major Claim, Claim or Premise. \
You are shown solved example essays, each listing all of its argument components with their classes, \
followed by a new essay whose argument components you must classify.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt config includes the info block but no InfoBlock was supplied")]
    MissingInfoBlock,
    #[error("all-at-once classification needs at least one demonstration essay")]
    NoDemonstrations,
    #[error("essay {0} has no argument components")]
    NoComponents(String),
    #[error("class definitions: {0}")]
    Definitions(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("expected {expected} labelled lines, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("no class label recognized in line {0:?}")]
    UnknownLabel(String),
    #[error("expected component count must be at least 1")]
    NothingExpected,
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("response still unparseable after {attempts} attempts: {last}")]
    Unparseable { attempts: u32, last: ParseError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// One call predicts every component of the essay.
    #[default]
    AllAtOnce,
    /// One call per component.
    OneByOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PromptConfig {
    pub include_info: bool,
    pub include_essay: bool,
    pub include_fts: bool,
    #[serde(default)]
    pub mode: PromptMode,
}

/// Editable per-class definitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDefinitions(pub BTreeMap<Label, String>);

impl Default for ClassDefinitions {
    fn default() -> Self {
        Self::parse(DEFAULT_DEFINITIONS).expect("bundled class definitions are valid")
    }
}

impl ClassDefinitions {
    /// Parses the resource format: `[Label]` headers, each followed by its
    /// definition text. `#` lines are comments. All three labels are
    /// required.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut defs: BTreeMap<Label, String> = BTreeMap::new();
        let mut current: Option<Label> = None;
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let label = Label::from_loose(name)
                    .ok_or_else(|| PromptError::Definitions(format!("unknown section [{name}]")))?;
                if defs.insert(label, String::new()).is_some() {
                    return Err(PromptError::Definitions(format!("duplicate section [{name}]")));
                }
                current = Some(label);
            } else if !trimmed.is_empty() {
                let label = current
                    .ok_or_else(|| PromptError::Definitions("text before the first [Label] section".into()))?;
                let entry = defs.get_mut(&label).unwrap();
                if !entry.is_empty() {
                    entry.push(' ');
                }
                entry.push_str(trimmed);
            }
        }
        for label in Label::ALL {
            match defs.get(&label) {
                Some(d) if !d.is_empty() => {}
                _ => return Err(PromptError::Definitions(format!("missing definition for {label}"))),
            }
        }
        Ok(ClassDefinitions(defs))
    }

    pub fn get(&self, label: Label) -> &str {
        &self.0[&label]
    }
}

/// Class definitions plus per-class component counts of the training split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoBlock {
    pub class_definitions: ClassDefinitions,
    pub train_counts: [usize; 3],
}

impl InfoBlock {
    pub fn new(class_definitions: ClassDefinitions, train_stats: &CorpusStats) -> Self {
        InfoBlock {
            class_definitions,
            train_counts: Label::ALL.map(|l| train_stats.label_count(l)),
        }
    }

    fn render(&self, out: &mut String) {
        out.push_str("## Class definitions\n");
        for label in Label::ALL {
            let _ = writeln!(out, "{}: {}", label, self.class_definitions.get(label));
        }
        let total: usize = self.train_counts.iter().sum();
        out.push_str("\n## Class statistics in the training set\n");
        for label in Label::ALL {
            let n = self.train_counts[label.index()];
            let pct = if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 };
            let _ = writeln!(out, "{label}: {n} components ({pct:.1}%)");
        }
        let _ = writeln!(out, "Total: {total} components\n");
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    /// Task instructions.
    pub system_text: String,
    /// All-at-once: context plus the answer-format instruction. One-by-one:
    /// the shared context only; see [`Prompt::component_user_text`].
    pub user_text: String,
    pub demo_essay_ids: Vec<String>,
    pub component_count: usize,
    pub mode: PromptMode,
}

impl Prompt {
    /// User text of the single-component request for component `index`
    /// (1-based) in one-by-one mode.
    pub fn component_user_text(&self, index: usize) -> String {
        format!(
            "{}Classify argument component {index} only. Answer with a single line of the form \
             `{index}. <Label>` where <Label> is one of: Major Claim, Claim, Premise. Do not write anything else.\n",
            self.user_text
        )
    }
}

fn answer_instruction(m: usize) -> String {
    format!(
        "Classify each of the {m} argument components above. Answer with exactly {m} lines, one per component \
         and in the same order, each of the form `<index>. <Label>` where <Label> is one of: Major Claim, Claim, \
         Premise. Do not write anything else.\n"
    )
}

fn render_demo(out: &mut String, number: usize, essay: &Essay) {
    let _ = writeln!(out, "### Example essay {number}");
    let _ = writeln!(out, "Title: {}", essay.title);
    for (i, c) in essay.components.iter().enumerate() {
        let _ = writeln!(out, "{}. {} → {}", i + 1, c.text, c.gold_label);
    }
    out.push('\n');
}

/// Builds the prompt for `query` with `demos` as solved examples, in the
/// given order. Pure and byte-deterministic.
pub fn build_prompt(
    query: &Essay,
    demos: &[&Essay],
    config: &PromptConfig,
    info: Option<&InfoBlock>,
) -> Result<Prompt, PromptError> {
    if query.components.is_empty() {
        return Err(PromptError::NoComponents(query.essay_id.clone()));
    }
    if demos.is_empty() && config.mode == PromptMode::AllAtOnce {
        return Err(PromptError::NoDemonstrations);
    }
    let mut user = String::new();
    if config.include_info {
        info.ok_or(PromptError::MissingInfoBlock)?.render(&mut user);
    }
    if !demos.is_empty() {
        user.push_str("## Solved examples\n\n");
        for (i, demo) in demos.iter().enumerate() {
            render_demo(&mut user, i + 1, demo);
        }
    }
    user.push_str("## Essay to classify\n");
    let _ = writeln!(user, "Title: {}", query.title);
    if config.include_essay {
        let _ = writeln!(user, "\nFull text of the essay:\n{}", query.raw_text().trim());
    }
    user.push('\n');
    user.push_str(QUERY_COMPONENTS_HEADER);
    user.push('\n');
    for (i, c) in query.components.iter().enumerate() {
        let _ = writeln!(user, "{}. {}", i + 1, c.text);
        if config.include_fts {
            let sf = extract_structural(query, c).expect("component belongs to its essay");
            let _ = writeln!(user, "   {}", render_featxt(&sf));
        }
    }
    user.push('\n');
    if config.mode == PromptMode::AllAtOnce {
        user.push_str(&answer_instruction(query.components.len()));
    }
    Ok(Prompt {
        system_text: SYSTEM_TEXT.to_string(),
        user_text: user,
        demo_essay_ids: demos.iter().map(|d| d.essay_id.clone()).collect(),
        component_count: query.components.len(),
        mode: config.mode,
    })
}

/// Canonical answer format: `1. Major Claim\n2. Premise`.
pub fn render_labels(labels: &[Label]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}. {}", i + 1, l))
        .collect::<Vec<_>>()
        .join("\n")
}

fn list_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[-*•>]+\s*)?(?:\(?#?\d+\s*[.):\]]?\s+|\(?#?\d+\s*[.):\]])?").unwrap())
}

/// Recognizes the class in one answer line.
pub fn parse_label_line(line: &str) -> Option<Label> {
    let rest = list_marker().replace(line.trim(), "");
    if let Some(label) = Label::from_loose(&rest) {
        return Some(label);
    }
    // "AC text → Label" or "Component 3: Label"
    rest.rsplit(['→', ':', '='])
        .next()
        .map(|tail| tail.trim_start_matches('>'))
        .and_then(Label::from_loose)
}

/// Parses a model answer into exactly `m` labels. Blank lines are ignored;
/// every other line must name a class.
pub fn parse_response(text: &str, m: usize) -> Result<Vec<Label>, ParseError> {
    if m == 0 {
        return Err(ParseError::NothingExpected);
    }
    let labels = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| parse_label_line(l).ok_or_else(|| ParseError::UnknownLabel(l.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if labels.len() != m {
        return Err(ParseError::CountMismatch {
            expected: m,
            found: labels.len(),
        });
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            model_name: "gpt-4".to_string(),
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

/// One model answer, as received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLog {
    /// 1-based component index in one-by-one mode.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub component: Option<usize>,
    pub attempt: u32,
    pub backend: BackendTag,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub labels: Vec<Label>,
    pub responses: Vec<ResponseLog>,
    pub usage: Usage,
}

fn format_reminder(attempt: u32, expected: usize) -> String {
    format!(
        "\nFormat reminder (attempt {attempt}): your previous answer could not be parsed. Reply with exactly \
         {expected} line(s) of the form `<index>. <Label>` using only the labels Major Claim, Claim and Premise.\n"
    )
}

/// Asks the model for `expected` labels, retrying up to `retries` times with
/// a format reminder when the answer does not parse.
#[allow(clippy::too_many_arguments)]
fn ask(
    gateway: &Gateway,
    settings: &ModelSettings,
    system: &str,
    user: &str,
    expected: usize,
    retries: u32,
    component: Option<usize>,
    log: &mut Classification,
) -> Result<Vec<Label>, ClassifyError> {
    let mut last = ParseError::NothingExpected;
    for attempt in 1..=retries + 1 {
        let mut user_text = user.to_string();
        if attempt > 1 {
            user_text.push_str(&format_reminder(attempt, expected));
        }
        let request = ChatRequest {
            system_text: system.to_string(),
            user_text,
            model_name: settings.model_name.clone(),
            temperature: settings.temperature,
            max_output_tokens: settings.max_output_tokens,
        };
        let response = gateway.chat(&request)?;
        log.usage += response.usage;
        log.responses.push(ResponseLog {
            component,
            attempt,
            backend: response.backend_tag,
            text: response.text.clone(),
        });
        match parse_response(&response.text, expected) {
            Ok(labels) => return Ok(labels),
            Err(e) => {
                log::debug!("unparseable answer (attempt {attempt}): {e}");
                last = e;
            }
        }
    }
    Err(ClassifyError::Unparseable {
        attempts: retries + 1,
        last,
    })
}

/// Classifies every component of `query` using `demos` as in-context
/// examples. Returns exactly `m` labels or an error.
pub fn classify_essay(
    query: &Essay,
    demos: &[&Essay],
    config: &PromptConfig,
    info: Option<&InfoBlock>,
    gateway: &Gateway,
    settings: &ModelSettings,
    retries: u32,
) -> Result<Classification, ClassifyError> {
    let prompt = build_prompt(query, demos, config, info)?;
    let mut log = Classification {
        labels: Vec::with_capacity(prompt.component_count),
        responses: Vec::new(),
        usage: Usage::default(),
    };
    match config.mode {
        PromptMode::AllAtOnce => {
            let labels = ask(
                gateway,
                settings,
                &prompt.system_text,
                &prompt.user_text,
                prompt.component_count,
                retries,
                None,
                &mut log,
            )?;
            log.labels = labels;
        }
        PromptMode::OneByOne => {
            for index in 1..=prompt.component_count {
                let user = prompt.component_user_text(index);
                let labels = ask(gateway, settings, &prompt.system_text, &user, 1, retries, Some(index), &mut log)?;
                log.labels.push(labels[0]);
            }
        }
    }
    debug_assert_eq!(log.labels.len(), query.component_count());
    Ok(log)
}

/// Recovers the numbered query components listed in a prompt's user text,
/// and the requested component index for one-by-one requests. Mock
/// backends use this to answer without access to the corpus structure.
pub fn query_components(user_text: &str) -> (Vec<String>, Option<usize>) {
    static ITEM: OnceLock<Regex> = OnceLock::new();
    static SINGLE: OnceLock<Regex> = OnceLock::new();
    let item = ITEM.get_or_init(|| Regex::new(r"^(\d+)\. (.*)$").unwrap());
    let single = SINGLE.get_or_init(|| Regex::new(r"Classify argument component (\d+) only\.").unwrap());
    let mut components = Vec::new();
    if let Some(start) = user_text.rfind(QUERY_COMPONENTS_HEADER) {
        for line in user_text[start..].lines().skip(1) {
            if line.is_empty() {
                break;
            }
            if let Some(cap) = item.captures(line) {
                components.push(cap[2].to_string());
            }
        }
    }
    let index = single
        .captures(user_text)
        .and_then(|c| c[1].parse().ok());
    (components, index)
}
