//! n-round ensembling: repeat selection and classification with per-round
//! seeds, then take a component-wise majority vote.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Essay, Label};
use crate::gateway::{Gateway, Usage};
use crate::prompting::{classify_essay, ClassifyError, InfoBlock, ModelSettings, PromptConfig, PromptMode, ResponseLog};
use crate::selection::{derive_round_seed, select_demonstrations, SelectionError, SelectionStrategy, TitleIndex};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("majority vote over zero votes")]
    EmptyVotes,
    #[error("invalid ICL configuration: {0}")]
    Config(String),
    #[error("essay {essay_id}: selection failed: {source}")]
    Selection {
        essay_id: String,
        #[source]
        source: SelectionError,
    },
    #[error("essay {essay_id}, round {round}: {source}")]
    RoundFailed {
        essay_id: String,
        round: u32,
        #[source]
        source: ClassifyError,
    },
    #[error("essay {essay_id}: {source}")]
    Classify {
        essay_id: String,
        #[source]
        source: ClassifyError,
    },
}

/// Most frequent label; ties go to the higher label in the tie-break order
/// `Premise > Claim > MajorClaim`.
pub fn majority_vote(votes: &[Label]) -> Result<Label, EnsembleError> {
    let tally = VoteTally::count(votes);
    tally.winner().ok_or(EnsembleError::EmptyVotes)
}

/// Vote counts for one component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub major_claim: usize,
    pub claim: usize,
    pub premise: usize,
}

impl VoteTally {
    pub fn count(votes: &[Label]) -> Self {
        let mut t = VoteTally::default();
        for v in votes {
            *t.get_mut(*v) += 1;
        }
        t
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::MajorClaim => self.major_claim,
            Label::Claim => self.claim,
            Label::Premise => self.premise,
        }
    }

    fn get_mut(&mut self, label: Label) -> &mut usize {
        match label {
            Label::MajorClaim => &mut self.major_claim,
            Label::Claim => &mut self.claim,
            Label::Premise => &mut self.premise,
        }
    }

    pub fn total(&self) -> usize {
        self.major_claim + self.claim + self.premise
    }

    pub fn winner(&self) -> Option<Label> {
        if self.total() == 0 {
            return None;
        }
        // max_by_key returns the last maximum; ALL is in ascending tie-break order
        Label::ALL.into_iter().max_by_key(|l| self.get(*l))
    }
}

/// Full configuration of one in-context-learning experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclConfig {
    pub strategy: SelectionStrategy,
    /// Demonstrations per prompt; `N = 2k` neighbours are ranked.
    pub k: usize,
    pub n_rounds: u32,
    pub prompt: PromptConfig,
    pub run_seed: u64,
    /// Extra attempts after an unparseable answer.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_retries() -> u32 {
    2
}

impl IclConfig {
    pub fn n_neighbors(&self) -> usize {
        2 * self.k
    }

    /// Rejects unusable values; returns warnings for values outside the
    /// published grid (`k ∈ {3, 5}`, `n ∈ {1, 3, 5}`).
    pub fn validate(&self) -> Result<Vec<String>, EnsembleError> {
        if self.k == 0 {
            return Err(EnsembleError::Config("k must be at least 1".into()));
        }
        if self.n_rounds == 0 {
            return Err(EnsembleError::Config("n_rounds must be at least 1".into()));
        }
        let mut warnings = Vec::new();
        if ![3, 5].contains(&self.k) {
            warnings.push(format!("nonstandard k = {} (published grid uses 3 or 5)", self.k));
        }
        if ![1, 3, 5].contains(&self.n_rounds) {
            warnings.push(format!(
                "nonstandard n_rounds = {} (published grid uses 3 or 5, or 1 without ensembling)",
                self.n_rounds
            ));
        }
        Ok(warnings)
    }

    /// Result-table row name, e.g. `info + essay + 5NN + 5Ens`.
    pub fn row_label(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if self.prompt.include_info {
            parts.push("info".into());
        }
        if self.prompt.include_essay {
            parts.push("essay".into());
        }
        if self.prompt.include_fts {
            parts.push("fts".into());
        }
        parts.push(format!("{}{}", self.k, self.strategy.row_suffix()));
        if self.n_rounds > 1 {
            parts.push(format!("{}Ens", self.n_rounds));
        }
        let mut label = parts.join(" + ");
        if self.prompt.mode == PromptMode::OneByOne {
            label.push_str(" (one-by-one)");
        }
        label
    }
}

/// Borrowed inputs shared by every essay of a run.
#[derive(Clone, Copy)]
pub struct EnsembleContext<'a> {
    pub gateway: &'a Gateway,
    pub settings: &'a ModelSettings,
    pub info: Option<&'a InfoBlock>,
    pub titles: Option<&'a TitleIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub seed: u64,
    pub neighbor_ids: Vec<String>,
    pub demo_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub responses: Vec<ResponseLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub essay_id: String,
    pub component_ids: Vec<String>,
    pub rounds: Vec<RoundRecord>,
    #[serde(rename = "final")]
    pub final_labels: Vec<Label>,
    pub tallies: Vec<VoteTally>,
    pub usage: Usage,
}

/// Combines per-round label sequences component by component.
pub fn aggregate_rounds(rounds: &[Vec<Label>]) -> Result<(Vec<Label>, Vec<VoteTally>), EnsembleError> {
    let m = rounds.first().ok_or(EnsembleError::EmptyVotes)?.len();
    let mut final_labels = Vec::with_capacity(m);
    let mut tallies = Vec::with_capacity(m);
    for j in 0..m {
        let votes: Vec<Label> = rounds.iter().map(|r| r[j]).collect();
        let tally = VoteTally::count(&votes);
        final_labels.push(tally.winner().ok_or(EnsembleError::EmptyVotes)?);
        tallies.push(tally);
    }
    Ok((final_labels, tallies))
}

/// Runs `n_rounds` selection+classification rounds for `query` against
/// `pool` and aggregates them by majority vote. Any failed round fails the
/// whole essay.
pub fn run_ensemble(
    query: &Essay,
    pool: &[&Essay],
    config: &IclConfig,
    ctx: EnsembleContext<'_>,
) -> Result<PredictionRecord, EnsembleError> {
    config.validate()?;
    let by_id: HashMap<&str, &Essay> = pool.iter().map(|e| (e.essay_id.as_str(), *e)).collect();
    let mut rounds = Vec::with_capacity(config.n_rounds as usize);
    let mut usage = Usage::default();
    for round in 1..=config.n_rounds {
        let seed = derive_round_seed(config.run_seed, &query.essay_id, round);
        let outcome = select_demonstrations(query, pool, config.strategy, config.k, seed, ctx.titles).map_err(
            |source| EnsembleError::Selection {
                essay_id: query.essay_id.clone(),
                source,
            },
        )?;
        let demos: Vec<&Essay> = outcome.chosen_ids.iter().map(|id| by_id[id.as_str()]).collect();
        let classification = classify_essay(
            query,
            &demos,
            &config.prompt,
            ctx.info,
            ctx.gateway,
            ctx.settings,
            config.retries,
        )
        .map_err(|source| match source {
            ClassifyError::Unparseable { .. } => EnsembleError::RoundFailed {
                essay_id: query.essay_id.clone(),
                round,
                source,
            },
            source => EnsembleError::Classify {
                essay_id: query.essay_id.clone(),
                source,
            },
        })?;
        usage += classification.usage;
        rounds.push(RoundRecord {
            round,
            seed,
            neighbor_ids: outcome.neighbor_ids,
            demo_ids: outcome.chosen_ids,
            labels: classification.labels,
            responses: classification.responses,
        });
    }
    let label_rounds: Vec<Vec<Label>> = rounds.iter().map(|r| r.labels.clone()).collect();
    let (final_labels, tallies) = aggregate_rounds(&label_rounds)?;
    Ok(PredictionRecord {
        essay_id: query.essay_id.clone(),
        component_ids: query.components.iter().map(|c| c.id.clone()).collect(),
        rounds,
        final_labels,
        tallies,
        usage,
    })
}
