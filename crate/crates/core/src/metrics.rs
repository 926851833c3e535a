//! Per-class precision/recall/F1 and macro F1 over the three component
//! classes.
//!
//! Conventions: any 0/0 ratio (precision, recall or F1) is 0, and the macro
//! average always runs over all three classes, present or not.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Label, SplitSet};
use crate::ensemble::PredictionRecord;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction/gold length mismatch ({pred} vs {gold}){}", context.as_ref().map(|c| format!(" for {c}")).unwrap_or_default())]
    LengthMismatch {
        pred: usize,
        gold: usize,
        context: Option<String>,
    },
    #[error("nothing to evaluate")]
    Empty,
    #[error("essay {0} is not in the test split")]
    SplitViolation(String),
    #[error("essay {0} not found in corpus")]
    MissingEssay(String),
    #[error("essay {0} appears in more than one record")]
    DuplicateEssay(String),
}

/// Counts indexed `[gold][predicted]` in [`Label::ALL`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; 3]; 3]);

impl ConfusionMatrix {
    pub fn from_pairs(pred: &[Label], gold: &[Label]) -> Self {
        let mut m = ConfusionMatrix::default();
        for (p, g) in pred.iter().zip(gold) {
            m.0[g.index()][p.index()] += 1;
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    /// Gold count of `label` (row sum).
    pub fn support(&self, label: Label) -> u64 {
        self.0[label.index()].iter().sum()
    }

    /// Predicted count of `label` (column sum).
    pub fn predicted(&self, label: Label) -> u64 {
        self.0.iter().map(|row| row[label.index()]).sum()
    }

    pub fn true_positives(&self, label: Label) -> u64 {
        self.0[label.index()][label.index()]
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub averaging: String,
    pub major_claim: ClassScores,
    pub claim: ClassScores,
    pub premise: ClassScores,
    pub macro_f1: f64,
    pub total: u64,
    pub confusion: ConfusionMatrix,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub row_label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_digest: Option<String>,
}

impl EvaluationReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let scores = Label::ALL.map(|label| {
            let tp = confusion.true_positives(label) as f64;
            let precision = ratio(tp, confusion.predicted(label) as f64);
            let recall = ratio(tp, confusion.support(label) as f64);
            ClassScores {
                precision,
                recall,
                f1: ratio(2.0 * precision * recall, precision + recall),
                support: confusion.support(label),
            }
        });
        EvaluationReport {
            averaging: "macro".to_string(),
            major_claim: scores[0],
            claim: scores[1],
            premise: scores[2],
            macro_f1: (scores[0].f1 + scores[1].f1 + scores[2].f1) / 3.0,
            total: confusion.total(),
            confusion,
            row_label: None,
            config_digest: None,
        }
    }

    pub fn scores(&self, label: Label) -> &ClassScores {
        match label {
            Label::MajorClaim => &self.major_claim,
            Label::Claim => &self.claim,
            Label::Premise => &self.premise,
        }
    }

    pub fn with_run(mut self, row_label: impl Into<String>, config_digest: impl Into<String>) -> Self {
        self.row_label = Some(row_label.into());
        self.config_digest = Some(config_digest.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn evaluate(pred: &[Label], gold: &[Label]) -> Result<EvaluationReport, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
            context: None,
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(EvaluationReport::from_confusion(ConfusionMatrix::from_pairs(pred, gold)))
}

/// Flattens the final predictions of test-split records against gold labels
/// and evaluates them as one sequence.
pub fn aggregate_runs(records: &[PredictionRecord], corpus: &Corpus) -> Result<EvaluationReport, MetricsError> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut seen = HashSet::new();
    for record in records {
        let essay = corpus
            .essay(&record.essay_id)
            .ok_or_else(|| MetricsError::MissingEssay(record.essay_id.clone()))?;
        if corpus.split_of(&essay.essay_id) != Some(SplitSet::Test) {
            return Err(MetricsError::SplitViolation(record.essay_id.clone()));
        }
        if !seen.insert(record.essay_id.as_str()) {
            return Err(MetricsError::DuplicateEssay(record.essay_id.clone()));
        }
        if record.final_labels.len() != essay.component_count() {
            return Err(MetricsError::LengthMismatch {
                pred: record.final_labels.len(),
                gold: essay.component_count(),
                context: Some(record.essay_id.clone()),
            });
        }
        pred.extend_from_slice(&record.final_labels);
        gold.extend(essay.gold_labels());
    }
    evaluate(&pred, &gold)
}

/// Plain-text table with columns `MC C P F1`, one row per report.
pub fn render_table(rows: &[&EvaluationReport]) -> String {
    let names: Vec<&str> = rows
        .iter()
        .map(|r| r.row_label.as_deref().unwrap_or("(unnamed)"))
        .collect();
    let width = names.iter().map(|n| n.chars().count()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "Prompt", "MC", "C", "P", "F1");
    for (name, r) in names.iter().zip(rows) {
        let _ = writeln!(
            out,
            "{name:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}",
            r.major_claim.f1, r.claim.f1, r.premise.f1, r.macro_f1
        );
    }
    out.push_str("(F1 = unweighted macro average over MC, C, P)\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-4
    }

    #[test]
    fn perfect_predictions() {
        let gold = [MajorClaim, Claim, Premise, Premise, Claim];
        let r = evaluate(&gold, &gold).unwrap();
        for l in Label::ALL {
            assert_eq!(r.scores(l).f1, 1.0);
        }
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn all_premise() {
        let gold = [MajorClaim, MajorClaim, Claim, Claim, Premise, Premise, Premise, Premise];
        let r = evaluate(&[Premise; 8], &gold).unwrap();
        assert!(close(r.premise.f1, 0.6667));
        assert!(close(r.premise.precision, 0.5));
        assert_eq!(r.major_claim.f1, 0.0);
        assert_eq!(r.claim.f1, 0.0);
        assert!(close(r.macro_f1, 0.2222));
    }

    #[test]
    fn mixed_errors() {
        let r = evaluate(&[Claim, Claim, Premise, MajorClaim], &[MajorClaim, Claim, Premise, Premise]).unwrap();
        assert_eq!(r.major_claim.f1, 0.0);
        assert!(close(r.claim.f1, 0.6667));
        assert!(close(r.premise.f1, 0.6667));
        assert!(close(r.macro_f1, 0.4444));
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let r = evaluate(&[Claim, Premise], &[Claim, Premise]).unwrap();
        assert_eq!(r.major_claim.f1, 0.0);
        assert_eq!(r.major_claim.support, 0);
        assert!(close(r.macro_f1, 0.6667));
    }

    #[test]
    fn asymmetric_fixture() {
        let gold = [Premise, Premise, Premise, Premise, Claim, Claim, MajorClaim];
        let pred = [Premise, Premise, Claim, MajorClaim, Claim, Premise, MajorClaim];
        let r = evaluate(&pred, &gold).unwrap();
        assert!(close(r.major_claim.f1, 0.6667));
        assert!(close(r.claim.f1, 0.5));
        assert!(close(r.premise.f1, 4.0 / 7.0));
        assert!(close(r.macro_f1, 0.579365));
        assert_eq!(r.confusion.0[Premise.index()], [1, 1, 2]);
    }

    #[test]
    fn error_cases() {
        assert_eq!(evaluate(&[], &[]).unwrap_err(), MetricsError::Empty);
        assert!(matches!(evaluate(&[Claim], &[]), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn table_columns() {
        let r = evaluate(&[Claim], &[Claim]).unwrap().with_run("info + essay + 5NN + 5Ens", "abc");
        let table = render_table(&[&r]);
        let header = table.lines().next().unwrap();
        assert!(header.starts_with("Prompt"));
        assert!(header.split_whitespace().eq(["Prompt", "MC", "C", "P", "F1"]));
        assert!(table.contains("info + essay + 5NN + 5Ens"));
        assert!(table.lines().nth(1).unwrap().ends_with("0.333"));
    }

    fn labels() -> impl Strategy<Value = Vec<(Label, Label)>> {
        proptest::collection::vec((0usize..3, 0usize..3), 1..60)
            .prop_map(|v| v.into_iter().map(|(a, b)| (Label::ALL[a], Label::ALL[b])).collect())
    }

    proptest! {
        #[test]
        fn permutation_equivariant(pairs in labels(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (pred, gold): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (sp, sg): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            prop_assert_eq!(evaluate(&pred, &gold).unwrap(), evaluate(&sp, &sg).unwrap());
        }

        #[test]
        fn macro_between_class_extremes_and_marginals_hold(pairs in labels()) {
            let (pred, gold): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let r = evaluate(&pred, &gold).unwrap();
            let f1s = [r.major_claim.f1, r.claim.f1, r.premise.f1];
            let lo = f1s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-12 <= r.macro_f1 && r.macro_f1 <= hi + 1e-12);
            for l in Label::ALL {
                prop_assert_eq!(r.scores(l).support as usize, gold.iter().filter(|g| **g == l).count());
                prop_assert_eq!(r.confusion.predicted(l) as usize, pred.iter().filter(|p| **p == l).count());
                prop_assert!((0.0..=1.0).contains(&r.scores(l).f1));
            }
            prop_assert_eq!(r.total as usize, pred.len());
        }
    }
}
