use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use amicl_core::corpus::{Essay, Label};
use amicl_core::gateway::{Gateway, MockEmbeddings, MockUpstream};
use amicl_core::metrics::evaluate;
use amicl_core::prompting::{parse_response, render_labels};
use amicl_core::selection::{rank_neighbors, SelectionStrategy, TitleIndex};
use amicl_core::synth::{self, SynthSpec};
use amicl_core::majority_vote;

fn labels(n: usize) -> Vec<Label> {
    (0..n).map(|i| Label::ALL[(i * 7 + i / 3) % 3]).collect()
}

fn vote(c: &mut Criterion) {
    let votes = labels(5);
    c.bench_function("majority_vote/5", |b| b.iter(|| majority_vote(black_box(&votes))));
}

fn knn(c: &mut Criterion) {
    let corpus = synth::corpus(SynthSpec {
        train: 322,
        test: 80,
        seed: 1,
    });
    let gateway = Gateway::mock(std::sync::Arc::new(
        MockUpstream::constant("").with_embeddings(MockEmbeddings::hashed(1536)),
    ));
    let titles = TitleIndex::build(corpus.essays(), &gateway).unwrap();
    let pool: Vec<&Essay> = corpus.train();
    let query = corpus.test()[0];
    c.bench_function("rank_neighbors/title/322x1536", |b| {
        b.iter(|| rank_neighbors(query, &pool, SelectionStrategy::TitleSimilarity, 10, 0, Some(&titles)))
    });
    c.bench_function("rank_neighbors/len/322", |b| {
        b.iter(|| rank_neighbors(query, &pool, SelectionStrategy::ComponentCount, 10, 0, None))
    });
}

fn parse(c: &mut Criterion) {
    let text = render_labels(&labels(25));
    c.bench_function("parse_response/25", |b| b.iter(|| parse_response(black_box(&text), 25)));
}

fn metrics(c: &mut Criterion) {
    let gold = labels(1266);
    let mut pred = gold.clone();
    pred.rotate_left(1);
    c.bench_function("evaluate/1266", |b| b.iter(|| evaluate(black_box(&pred), black_box(&gold))));
}

criterion_group!(benches, vote, knn, parse, metrics);
criterion_main!(benches);
