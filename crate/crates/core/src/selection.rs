//! Demonstration-essay selection: rank `N` neighbour essays of a query, then
//! draw `k = N/2` of them at random.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Essay;
use crate::gateway::{cosine_similarity, EmbeddingVector, Gateway, GatewayError};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("pool has {available} candidate essays, {needed} needed")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("neighbour count must be a positive even number, got {0}")]
    BadNeighborCount(usize),
    #[error("k must equal N/2 (k = {k}, N = {n})")]
    BadK { k: usize, n: usize },
    #[error("title embedding unavailable for {0}")]
    EmbeddingUnavailable(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// How the `N` candidate demonstration essays are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionStrategy {
    /// Uniform random sample of the pool (kRN).
    #[serde(rename = "krn")]
    Random,
    /// Essays whose component count is closest to the query's (kNN^len).
    #[serde(rename = "knn-len")]
    ComponentCount,
    /// Essays whose title embedding is most cosine-similar to the query's
    /// (kNN).
    #[serde(rename = "knn")]
    TitleSimilarity,
}

impl SelectionStrategy {
    /// Suffix used in result-table row names, e.g. `5NN^len`.
    pub fn row_suffix(self) -> &'static str {
        match self {
            SelectionStrategy::Random => "RN",
            SelectionStrategy::ComponentCount => "NN^len",
            SelectionStrategy::TitleSimilarity => "NN",
        }
    }

    /// Whether the neighbour ranking itself consumes randomness.
    pub fn is_randomized(self) -> bool {
        self == SelectionStrategy::Random
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionStrategy::Random => "krn",
            SelectionStrategy::ComponentCount => "knn-len",
            SelectionStrategy::TitleSimilarity => "knn",
        })
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "krn" | "random" => Ok(SelectionStrategy::Random),
            "knn-len" | "knnlen" | "knn_len" => Ok(SelectionStrategy::ComponentCount),
            "knn" | "knn-title" => Ok(SelectionStrategy::TitleSimilarity),
            other => Err(format!("unknown selection strategy {other:?} (krn, knn-len, knn)")),
        }
    }
}

/// Title embeddings by essay id.
#[derive(Debug, Clone, Default)]
pub struct TitleIndex {
    vectors: HashMap<String, EmbeddingVector>,
}

impl TitleIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Embeds the title of every essay through the gateway.
    pub fn build<'a>(essays: impl IntoIterator<Item = &'a Essay>, gateway: &Gateway) -> Result<Self, GatewayError> {
        let mut index = TitleIndex::new();
        for essay in essays {
            index.insert(&essay.essay_id, gateway.embed(&essay.title)?);
        }
        Ok(index)
    }

    pub fn insert(&mut self, essay_id: &str, vector: EmbeddingVector) {
        self.vectors.insert(essay_id.to_string(), vector);
    }

    pub fn get(&self, essay_id: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(essay_id)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    /// The `N` ranked neighbours, best first (sampling order for kRN).
    pub neighbor_ids: Vec<String>,
    /// The `k` demonstrations, in prompt order.
    pub chosen_ids: Vec<String>,
    pub seed: u64,
}

/// Per-round seed: SHA-256 of `(run_seed, essay_id, round)`, so rounds of
/// one essay differ while the whole run stays reproducible.
pub fn derive_round_seed(run_seed: u64, essay_id: &str, round: u32) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"amicl/round-seed/v1\0");
    hasher.update(run_seed.to_le_bytes());
    hasher.update(essay_id.as_bytes());
    hasher.update([0]);
    hasher.update(round.to_le_bytes());
    u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
}

// splitmix64 finalizer; decorrelates the subsample stream from the ranking
// stream when both are seeded from one round seed.
fn mix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ranks `n_neighbors` candidate demonstration essays for `query`.
///
/// The query essay is never returned, even if it appears in `pool`. Ties in
/// the deterministic strategies are broken by ascending essay id.
pub fn rank_neighbors(
    query: &Essay,
    pool: &[&Essay],
    strategy: SelectionStrategy,
    n_neighbors: usize,
    seed: u64,
    titles: Option<&TitleIndex>,
) -> Result<Vec<String>, SelectionError> {
    if n_neighbors == 0 || n_neighbors % 2 != 0 {
        return Err(SelectionError::BadNeighborCount(n_neighbors));
    }
    let mut candidates: Vec<&Essay> = pool
        .iter()
        .copied()
        .filter(|e| e.essay_id != query.essay_id)
        .collect();
    if candidates.len() < n_neighbors {
        return Err(SelectionError::PoolTooSmall {
            needed: n_neighbors,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| a.essay_id.cmp(&b.essay_id));

    let ids: Vec<String> = match strategy {
        SelectionStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, candidates.len(), n_neighbors)
                .into_iter()
                .map(|i| candidates[i].essay_id.clone())
                .collect()
        }
        SelectionStrategy::ComponentCount => {
            let m = query.component_count();
            candidates.sort_by_key(|e| e.component_count().abs_diff(m));
            candidates[..n_neighbors].iter().map(|e| e.essay_id.clone()).collect()
        }
        SelectionStrategy::TitleSimilarity => {
            let titles = titles.ok_or_else(|| SelectionError::EmbeddingUnavailable("no title index".into()))?;
            let lookup = |id: &str| {
                titles
                    .get(id)
                    .ok_or_else(|| SelectionError::EmbeddingUnavailable(id.to_string()))
            };
            let query_vec = lookup(&query.essay_id)?;
            let mut scored = candidates
                .iter()
                .map(|e| Ok((cosine_similarity(query_vec, lookup(&e.essay_id)?)?, &e.essay_id)))
                .collect::<Result<Vec<_>, SelectionError>>()?;
            // stable sort keeps ascending-id order among equal similarities
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            scored[..n_neighbors].iter().map(|(_, id)| (*id).clone()).collect()
        }
    };
    Ok(ids)
}

/// Draws `k = N/2` of the `N` neighbours uniformly without replacement. The
/// returned order is the sampling order.
pub fn subsample(neighbor_ids: &[String], k: usize, seed: u64) -> Result<Vec<String>, SelectionError> {
    let n = neighbor_ids.len();
    if k == 0 || n % 2 != 0 || k * 2 != n {
        return Err(SelectionError::BadK { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, k)
        .into_iter()
        .map(|i| neighbor_ids[i].clone())
        .collect())
}

/// One selection round: rank `2k` neighbours, then subsample `k`.
pub fn select_demonstrations(
    query: &Essay,
    pool: &[&Essay],
    strategy: SelectionStrategy,
    k: usize,
    seed: u64,
    titles: Option<&TitleIndex>,
) -> Result<SelectionOutcome, SelectionError> {
    if k == 0 {
        return Err(SelectionError::BadK { k, n: 0 });
    }
    let neighbor_ids = rank_neighbors(query, pool, strategy, 2 * k, seed, titles)?;
    let chosen_ids = subsample(&neighbor_ids, k, mix(seed))?;
    Ok(SelectionOutcome {
        neighbor_ids,
        chosen_ids,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::essay_with_counts;

    fn vec_of(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector {
            values: values.to_vec(),
            model_name: "mock".into(),
            source_text_digest: String::new(),
        }
    }

    #[test]
    fn component_count_neighbours() {
        let query = essay_with_counts("q", 7);
        let pool: Vec<Essay> = [("a", 7), ("b", 3), ("c", 8), ("d", 12)]
            .iter()
            .map(|(id, m)| essay_with_counts(id, *m))
            .collect();
        let refs: Vec<&Essay> = pool.iter().collect();
        let ids = rank_neighbors(&query, &refs, SelectionStrategy::ComponentCount, 2, 0, None).unwrap();
        assert_eq!(ids, ["a", "c"]);
    }

    #[test]
    fn component_count_ties_by_id() {
        let query = essay_with_counts("q", 5);
        let pool: Vec<Essay> = [("z", 4), ("y", 6), ("x", 9), ("w", 5)]
            .iter()
            .map(|(id, m)| essay_with_counts(id, *m))
            .collect();
        let refs: Vec<&Essay> = pool.iter().rev().collect();
        let ids = rank_neighbors(&query, &refs, SelectionStrategy::ComponentCount, 4, 0, None).unwrap();
        assert_eq!(ids, ["w", "y", "z", "x"]);
    }

    #[test]
    fn identical_title_embedding_ranks_first() {
        let query = essay_with_counts("q", 3);
        let pool: Vec<Essay> = ["a", "b", "c"].iter().map(|id| essay_with_counts(id, 3)).collect();
        let refs: Vec<&Essay> = pool.iter().collect();
        let mut titles = TitleIndex::new();
        titles.insert("q", vec_of(&[1.0, 2.0, 0.0]));
        titles.insert("a", vec_of(&[0.0, 1.0, 1.0]));
        titles.insert("b", vec_of(&[2.0, 4.0, 0.0]));
        titles.insert("c", vec_of(&[1.0, 0.0, 0.0]));
        let ids = rank_neighbors(&query, &refs, SelectionStrategy::TitleSimilarity, 2, 0, Some(&titles)).unwrap();
        assert_eq!(ids[0], "b");
        assert!(matches!(
            rank_neighbors(&query, &refs, SelectionStrategy::TitleSimilarity, 2, 0, None),
            Err(SelectionError::EmbeddingUnavailable(_))
        ));
    }

    #[test]
    fn query_is_excluded_and_pool_size_checked() {
        let pool: Vec<Essay> = ["a", "b", "q"].iter().map(|id| essay_with_counts(id, 2)).collect();
        let refs: Vec<&Essay> = pool.iter().collect();
        let query = &pool[2];
        for seed in 0..50 {
            let ids = rank_neighbors(query, &refs, SelectionStrategy::Random, 2, seed, None).unwrap();
            assert!(!ids.contains(&"q".to_string()));
        }
        assert!(matches!(
            rank_neighbors(query, &refs, SelectionStrategy::Random, 4, 0, None),
            Err(SelectionError::PoolTooSmall { needed: 4, available: 2 })
        ));
        assert!(matches!(
            rank_neighbors(query, &refs, SelectionStrategy::Random, 3, 0, None),
            Err(SelectionError::BadNeighborCount(3))
        ));
    }

    #[test]
    fn subsample_contract() {
        let two = vec!["x".to_string(), "y".to_string()];
        let once = subsample(&two, 1, 42).unwrap();
        assert_eq!(once.len(), 1);
        assert!(two.contains(&once[0]));
        assert_eq!(subsample(&two, 1, 42).unwrap(), once);

        let ten: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        assert!(matches!(subsample(&ten, 3, 0), Err(SelectionError::BadK { k: 3, n: 10 })));
        let five = subsample(&ten, 5, 7).unwrap();
        let mut dedup = five.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
    }

    #[test]
    fn round_seeds_differ_and_are_stable() {
        let a = derive_round_seed(1, "essay001", 1);
        assert_eq!(a, derive_round_seed(1, "essay001", 1));
        assert_ne!(a, derive_round_seed(1, "essay001", 2));
        assert_ne!(a, derive_round_seed(1, "essay002", 1));
        assert_ne!(a, derive_round_seed(2, "essay001", 1));
    }

    #[test]
    fn selection_is_deterministic_and_chosen_within_neighbours() {
        let pool: Vec<Essay> = (0..12).map(|i| essay_with_counts(&format!("e{i:02}"), i + 1)).collect();
        let refs: Vec<&Essay> = pool.iter().collect();
        let query = essay_with_counts("q", 6);
        for strategy in [SelectionStrategy::Random, SelectionStrategy::ComponentCount] {
            let a = select_demonstrations(&query, &refs, strategy, 3, 99, None).unwrap();
            let b = select_demonstrations(&query, &refs, strategy, 3, 99, None).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.neighbor_ids.len(), 6);
            assert_eq!(a.chosen_ids.len(), 3);
            assert!(a.chosen_ids.iter().all(|id| a.neighbor_ids.contains(id)));
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            SelectionStrategy::Random,
            SelectionStrategy::ComponentCount,
            SelectionStrategy::TitleSimilarity,
        ] {
            assert_eq!(s.to_string().parse::<SelectionStrategy>().unwrap(), s);
        }
    }
}
