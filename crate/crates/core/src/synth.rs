//! Deterministic synthetic corpora laid out like the persuasive-essays
//! distribution (`essayNNN.txt`, `essayNNN.ann`, split CSV).
//!
//! Used by tests, benchmarks and demos; the text is word salad but the
//! structure (title, introduction with a major claim, body paragraphs of
//! claims and premises, conclusion) mirrors the real essays.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_essay, Corpus, Essay, Label, SplitSet};

const WORDS: &[&str] = &[
    "students", "teachers", "society", "technology", "government", "children", "people", "money",
    "education", "family", "work", "cities", "travel", "culture", "health", "science", "sports",
    "internet", "advertising", "tourism", "schools", "parents", "friends", "skills", "knowledge",
    "environment", "communities", "museums", "animals", "jobs", "competition", "cooperation",
];
const VERBS: &[&str] = &[
    "improve", "harm", "support", "change", "shape", "limit", "encourage", "reduce", "protect",
    "influence", "strengthen", "weaken",
];
const ADJS: &[&str] = &[
    "important", "harmful", "necessary", "beneficial", "essential", "costly", "valuable",
    "dangerous", "useful", "popular",
];
const OPENERS: &[&str] = &[
    "In my opinion,", "Firstly,", "Moreover,", "For example,", "However,", "Therefore,",
    "In addition,", "Consequently,", "To sum up,", "Admittedly,",
];

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train: 40,
            test: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthEssay {
    pub essay_id: String,
    pub text: String,
    pub ann: String,
    pub split: SplitSet,
}

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let a = WORDS.choose(rng).unwrap();
    let v = VERBS.choose(rng).unwrap();
    let b = WORDS.choose(rng).unwrap();
    match rng.random_range(0..3) {
        0 => format!("{a} {v} {b}"),
        1 => format!("{a} can {v} the {} {b}", ADJS.choose(rng).unwrap()),
        _ => format!("{a} are {} for {b}", ADJS.choose(rng).unwrap()),
    }
}

struct Builder {
    text: String,
    chars: usize,
    ann: Vec<String>,
    next_id: usize,
}

impl Builder {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    fn component(&mut self, label: Label, surface: &str) {
        let start = self.chars;
        self.push(surface);
        let token = match label {
            Label::MajorClaim => "MajorClaim",
            Label::Claim => "Claim",
            Label::Premise => "Premise",
        };
        self.next_id += 1;
        self.ann
            .push(format!("T{}\t{token} {start} {}\t{surface}", self.next_id, self.chars));
    }

    /// Sentence with an opener, an embedded component and a trailing clause.
    fn sentence(&mut self, rng: &mut ChaCha8Rng, label: Label) {
        self.push(OPENERS.choose(rng).unwrap());
        self.push(" ");
        let surface = phrase(rng);
        self.component(label, &surface);
        if rng.random_bool(0.4) {
            self.push(&format!(", since {}", phrase(rng)));
        }
        self.push(". ");
    }

    fn filler(&mut self, rng: &mut ChaCha8Rng) {
        let p = phrase(rng);
        let mut chars = p.chars();
        let first = chars.next().unwrap().to_uppercase().collect::<String>();
        self.push(&format!("{first}{}. ", chars.as_str()));
    }

    fn end_paragraph(&mut self) {
        while self.text.ends_with(' ') {
            self.text.pop();
            self.chars -= 1;
        }
        self.push("\n");
    }
}

/// Builds the raw `.txt` and `.ann` contents of one essay with the given
/// label sequence laid out over introduction, body and conclusion.
fn render(rng: &mut ChaCha8Rng, title: &str, paragraphs: &[Vec<Label>]) -> (String, String) {
    let mut b = Builder {
        text: String::new(),
        chars: 0,
        ann: Vec::new(),
        next_id: 0,
    };
    b.push(title);
    b.push("\n\n");
    for labels in paragraphs {
        if rng.random_bool(0.3) {
            b.filler(rng);
        }
        for &label in labels {
            b.sentence(rng, label);
        }
        b.end_paragraph();
    }
    // annotation order in brat files is not document order
    b.ann.reverse();
    b.ann.push("A1\tStance T1 For".to_string());
    (b.text, b.ann.join("\n") + "\n")
}

fn random_layout(rng: &mut ChaCha8Rng) -> Vec<Vec<Label>> {
    let body = rng.random_range(1..=4);
    let mut paragraphs = vec![vec![Label::MajorClaim]];
    for _ in 0..body {
        let mut p = vec![Label::Claim];
        for _ in 0..rng.random_range(0..=4) {
            p.push(Label::Premise);
        }
        if rng.random_bool(0.3) {
            p.insert(0, Label::Premise);
        }
        paragraphs.push(p);
    }
    let mut conclusion = vec![Label::MajorClaim];
    if rng.random_bool(0.5) {
        conclusion.push(Label::Claim);
    }
    paragraphs.push(conclusion);
    paragraphs
}

fn title(rng: &mut ChaCha8Rng) -> String {
    format!(
        "Should {} be {} for {}?",
        WORDS.choose(rng).unwrap(),
        ADJS.choose(rng).unwrap(),
        WORDS.choose(rng).unwrap()
    )
}

/// Generates `spec.train + spec.test` essays. Test essays are spread
/// through the id range rather than appended at the end.
pub fn generate(spec: SynthSpec) -> Vec<SynthEssay> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train + spec.test;
    let mut test_slots: Vec<usize> = rand::seq::index::sample(&mut rng, total, spec.test).into_vec();
    test_slots.sort_unstable();
    (0..total)
        .map(|i| {
            let title = title(&mut rng);
            let layout = random_layout(&mut rng);
            let (text, ann) = render(&mut rng, &title, &layout);
            SynthEssay {
                essay_id: format!("essay{:03}", i + 1),
                text,
                ann,
                split: if test_slots.binary_search(&i).is_ok() {
                    SplitSet::Test
                } else {
                    SplitSet::Train
                },
            }
        })
        .collect()
}

/// Generates a corpus in memory.
pub fn corpus(spec: SynthSpec) -> Corpus {
    let essays = generate(spec);
    let split: BTreeMap<String, SplitSet> = essays.iter().map(|e| (e.essay_id.clone(), e.split)).collect();
    let parsed = essays
        .iter()
        .map(|e| parse_essay(&e.text, &e.ann, &e.essay_id).expect("synthetic essays are well-formed"))
        .collect();
    Corpus::new(parsed, split).expect("synthetic split is consistent")
}

/// Writes a corpus in distribution layout: `<dir>/brat-project-final/*.txt|ann`
/// and `<dir>/train-test-split.csv`. Returns `(essay_dir, split_file)`.
pub fn write_corpus(dir: &Path, spec: SynthSpec) -> io::Result<(PathBuf, PathBuf)> {
    let essay_dir = dir.join("brat-project-final");
    std::fs::create_dir_all(&essay_dir)?;
    let mut split = String::from("\"ID\";\"SET\"\n");
    for e in generate(spec) {
        std::fs::write(essay_dir.join(format!("{}.txt", e.essay_id)), &e.text)?;
        std::fs::write(essay_dir.join(format!("{}.ann", e.essay_id)), &e.ann)?;
        split.push_str(&format!("\"{}\";\"{}\"\n", e.essay_id, e.split));
    }
    let split_file = dir.join("train-test-split.csv");
    std::fs::write(&split_file, split)?;
    Ok((essay_dir, split_file))
}

/// A single essay with exactly `m` components (one major claim, then
/// claims and premises), for selection tests.
pub fn essay_with_counts(essay_id: &str, m: usize) -> Essay {
    let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
    let mut paragraphs = vec![vec![Label::MajorClaim]];
    let mut body = Vec::new();
    for i in 1..m {
        body.push(if i % 3 == 1 { Label::Claim } else { Label::Premise });
    }
    if !body.is_empty() {
        paragraphs.push(body);
    }
    let (text, ann) = render(&mut rng, &format!("Essay {essay_id}"), &paragraphs);
    let essay = parse_essay(&text, &ann, essay_id).expect("fixture essay is well-formed");
    debug_assert_eq!(essay.component_count(), m);
    essay
}
