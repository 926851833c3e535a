//! Structural and contextual features of argument components, and their
//! rendering as plain-text feature sentences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ArgumentComponent, Essay, Span};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("component {component_id} does not belong to essay {essay_id}")]
    ForeignComponent {
        essay_id: String,
        component_id: String,
    },
}

/// Version tag of the rule-based sentence segmenter. Bump it whenever the
/// boundary rules or [`ABBREVIATIONS`] change, since sentence counts and
/// covering sentences depend on them.
pub const SEGMENTER_VERSION: &str = "rules-v1";

/// Lower-cased tokens whose final period never ends a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "etc.", "mr.", "mrs.", "ms.", "dr.", "prof.", "vs.", "cf.", "u.s.", "u.k.",
    "a.m.", "p.m.",
];

const CLOSERS: &[char] = &['"', '\'', '”', '’', ')', ']'];
const OPENERS: &[char] = &['"', '\'', '“', '‘', '(', '['];

/// Splits text into sentences.
///
/// A boundary follows `.`, `!` or `?` (plus any closing quotes or brackets)
/// when the next character is whitespace or the end of the text, unless the
/// token ending in `.` is a listed abbreviation. Returned spans are character
/// offsets relative to `text`, trimmed of surrounding whitespace; together
/// they cover every non-whitespace character.
pub fn segment_sentences(text: &str) -> Vec<Span> {
    let chars: Vec<char> = text.chars().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut last_non_ws = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        start.get_or_insert(i);
        last_non_ws = i;
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && CLOSERS.contains(&chars[j]) {
                j += 1;
            }
            let at_break = j == chars.len() || chars[j].is_whitespace();
            if at_break && !(c == '.' && ends_with_abbreviation(&chars[..=i])) {
                spans.push(Span::new(start.take().unwrap_or(i), j));
                last_non_ws = j - 1;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    if let Some(s) = start {
        spans.push(Span::new(s, last_non_ws + 1));
    }
    spans
}

fn ends_with_abbreviation(prefix: &[char]) -> bool {
    let token_start = prefix
        .iter()
        .rposition(|c| c.is_whitespace())
        .map_or(0, |p| p + 1);
    let token: String = prefix[token_start..]
        .iter()
        .skip_while(|c| OPENERS.contains(c))
        .flat_map(|c| c.to_lowercase())
        .collect();
    ABBREVIATIONS.contains(&token.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuralFeatures {
    pub is_first_in_paragraph: bool,
    pub is_last_in_paragraph: bool,
    /// Component lies in the first body paragraph.
    pub in_introduction: bool,
    /// Component lies in the last body paragraph. In a single-paragraph
    /// essay both this and `in_introduction` are true.
    pub in_conclusion: bool,
    /// 1-based body paragraph number.
    pub paragraph_number: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextualFeatures {
    pub essay_title: String,
    /// Smallest run of whole sentences containing the component.
    pub covering_sentence: String,
}

fn check_owner(essay: &Essay, component: &ArgumentComponent) -> Result<(), FeatureError> {
    if essay.owns(component) {
        Ok(())
    } else {
        Err(FeatureError::ForeignComponent {
            essay_id: essay.essay_id.clone(),
            component_id: component.id.clone(),
        })
    }
}

pub fn extract_structural(
    essay: &Essay,
    component: &ArgumentComponent,
) -> Result<StructuralFeatures, FeatureError> {
    check_owner(essay, component)?;
    let para = component.paragraph_index;
    let mut siblings = essay.components.iter().filter(|c| c.paragraph_index == para);
    let first = siblings.next().map(|c| c.ordinal);
    let last = siblings.next_back().map(|c| c.ordinal).or(first);
    Ok(StructuralFeatures {
        is_first_in_paragraph: first == Some(component.ordinal),
        is_last_in_paragraph: last == Some(component.ordinal),
        in_introduction: para == 0,
        in_conclusion: para + 1 == essay.paragraphs.len(),
        paragraph_number: para + 1,
    })
}

pub fn extract_contextual(
    essay: &Essay,
    component: &ArgumentComponent,
) -> Result<ContextualFeatures, FeatureError> {
    check_owner(essay, component)?;
    let para_span = essay.paragraphs[component.paragraph_index];
    let local = Span::new(
        component.span.start - para_span.start,
        component.span.end - para_span.start,
    );
    let sentences = segment_sentences(essay.slice(para_span));
    let mut covering = sentences.iter().filter(|s| s.overlaps(&local));
    let covering_span = match (covering.next(), covering.next_back()) {
        (Some(first), Some(last)) => Span::new(first.start, last.end),
        (Some(only), None) => *only,
        _ => local,
    };
    let absolute = Span::new(
        para_span.start + covering_span.start.min(local.start),
        para_span.start + covering_span.end.max(local.end),
    );
    Ok(ContextualFeatures {
        essay_title: essay.title.clone(),
        covering_sentence: essay.slice(absolute).to_string(),
    })
}

fn yes_no(flag: bool) -> &'static str {
    if flag {
        "yes"
    } else {
        "no"
    }
}

/// The four yes/no feature sentences, in fixed order.
pub fn render_featxt(features: &StructuralFeatures) -> String {
    format!(
        "Is the AC first in its paragraph: {}. Is the AC last in its paragraph: {}. \
         Is the AC in the introduction of the essay: {}. Is the AC in the conclusion of the essay: {}.",
        yes_no(features.is_first_in_paragraph),
        yes_no(features.is_last_in_paragraph),
        yes_no(features.in_introduction),
        yes_no(features.in_conclusion),
    )
}
