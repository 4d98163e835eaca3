//! Seeded synthetic corpus: topic-clustered documents of pseudo-words mixed
//! with common English filler, plus held-out rule-based evaluation queries.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{derive_seed, rule_queries, GenerationKind, Lexicon};
use crate::corpus::{Corpus, IdfTable, Query, DEFAULT_MAX_DOC_TOKENS};
use crate::error::Result;

pub const TOY_DOCS: usize = 200;
pub const TOY_TOPICS: usize = 20;
pub const TOY_SEED: u64 = 20_240_501;
/// Seed of the held-out evaluation queries; distinct from any training seed.
pub const TOY_QUERY_SEED: u64 = 7_919;

const TOPIC_WORDS: usize = 8;
const FILLER_WORDS: usize = 90;
const SENTENCES: usize = 5;

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "", "n", "r", "l", "x"];
const STOPS: [&str; 12] = [
    "the", "a", "of", "and", "to", "in", "with", "for", "on", "by", "from", "at",
];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    let lex = Lexicon::bundled();
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).expect("nonempty"));
            w.push_str(VOWELS.choose(rng).expect("nonempty"));
        }
        w.push_str(CODAS.choose(rng).expect("nonempty"));
        if lex.synonyms(&w).is_empty() && !lex.is_stopword(&w) && taken.insert(w.clone()) {
            return w;
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// `(doc_key, text)` records of the synthetic corpus.
pub fn generate_toy_records(n_docs: usize, n_topics: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    let topics: Vec<Vec<String>> = (0..n_topics)
        .map(|_| (0..TOPIC_WORDS).map(|_| pseudo_word(&mut rng, &mut taken)).collect())
        .collect();
    let filler: Vec<&str> = Lexicon::bundled().words().take(FILLER_WORDS).collect();
    (0..n_docs)
        .map(|i| {
            let topic = &topics[i % n_topics];
            let own = pseudo_word(&mut rng, &mut taken);
            let sentences: Vec<String> = (0..SENTENCES)
                .map(|s| {
                    let mut words: Vec<String> = Vec::new();
                    words.extend(topic.choose_multiple(&mut rng, 2).cloned());
                    if s % 2 == 0 {
                        words.push(own.clone());
                    }
                    words.extend(filler.choose_multiple(&mut rng, 3).map(|w| w.to_string()));
                    words.extend(STOPS.choose_multiple(&mut rng, 2).map(|w| w.to_string()));
                    words.shuffle(&mut rng);
                    words[0] = capitalize(&words[0]);
                    let end = match rng.random_range(0..10) {
                        0 => "!",
                        1 => "?",
                        _ => ".",
                    };
                    format!("{}{end}", words.join(" "))
                })
                .collect();
            (format!("doc{i:03}"), sentences.join(" "))
        })
        .collect()
}

/// The bundled 200-document corpus.
pub fn toy_corpus() -> Result<Corpus> {
    Corpus::from_records(
        generate_toy_records(TOY_DOCS, TOY_TOPICS, TOY_SEED),
        1,
        DEFAULT_MAX_DOC_TOKENS,
    )
}

/// `per_doc` held-out queries for every document, each labeled with its source.
pub fn toy_eval_queries(corpus: &Corpus, per_doc: usize, seed: u64) -> Result<Vec<Query>> {
    let idf = IdfTable::from_corpus(corpus);
    let mut out = Vec::new();
    for doc in corpus.documents() {
        let s = derive_seed(seed, &doc.doc_key, GenerationKind::PseudoQuery);
        for (j, text) in rule_queries(doc, corpus.vocab(), &idf, per_doc, s)?
            .into_iter()
            .enumerate()
        {
            out.push(Query::new(format!("{}-q{j}", doc.doc_key), text, corpus.vocab()).with_relevant(&doc.doc_key));
        }
    }
    Ok(out)
}
