//! Noisy documents and pseudo-queries.
//!
//! The rule-based generator is deterministic given a seed. The external
//! backend posts the prompt text to a JSON-over-HTTP completion service.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    tokenize_capped, Corpus, Document, IdfTable, Vocabulary, DEFAULT_MAX_DOC_TOKENS, DEFAULT_MAX_QUERY_TOKENS,
    MASK_LITERAL, RESERVED,
};
use crate::error::{Error, Result};
use crate::objectives::TrainingStores;

pub const DEFAULT_QUERIES_PER_DOC: usize = 5;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

const SYNONYM_PERCENT: usize = 10;
const REMOVE_PERCENT: usize = 20;
const MASK_PERCENT: usize = 15;
const QUERY_POOL: usize = 10;
const QUERY_RETRIES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStrategy {
    SynonymReplace,
    SentenceRemove,
    SentenceShuffle,
    WordMask,
}

impl NoiseStrategy {
    pub const ALL: [NoiseStrategy; 4] = [
        NoiseStrategy::SynonymReplace,
        NoiseStrategy::SentenceRemove,
        NoiseStrategy::SentenceShuffle,
        NoiseStrategy::WordMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseStrategy::SynonymReplace => "synonym_replace",
            NoiseStrategy::SentenceRemove => "sentence_remove",
            NoiseStrategy::SentenceShuffle => "sentence_shuffle",
            NoiseStrategy::WordMask => "word_mask",
        }
    }
}

/// What a generation request produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GenerationKind {
    Noise(NoiseStrategy),
    PseudoQuery,
}

impl GenerationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GenerationKind::Noise(s) => s.as_str(),
            GenerationKind::PseudoQuery => "pseudo_query",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyDocument {
    pub source_key: String,
    pub strategy: NoiseStrategy,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoQuery {
    pub source_key: String,
    /// 1-based position among the document's queries.
    pub index: usize,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalBackend {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub max_tokens: usize,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorBackend {
    RuleBased,
    External(ExternalBackend),
}

/// The generation prompt with `{d}` (and `{X}`) filled in.
pub fn render_prompt(kind: GenerationKind, doc_text: &str, x: usize) -> String {
    match kind {
        GenerationKind::Noise(NoiseStrategy::SynonymReplace) => format!(
            "Replace some words in the following document with their synonyms while maintaining the overall semantic meaning: {doc_text}."
        ),
        GenerationKind::Noise(NoiseStrategy::SentenceRemove) => format!(
            "Remove one or more sentences from the following document, while maintaining the overall semantic meaning: {doc_text}."
        ),
        GenerationKind::Noise(NoiseStrategy::SentenceShuffle) => format!(
            "Rearrange the sentences in the following document to create a new flow, while maintaining the overall semantic meaning: {doc_text}."
        ),
        GenerationKind::Noise(NoiseStrategy::WordMask) => format!(
            "Mask some words with [Masked] in the following document, while maintaining the overall semantic meaning: {doc_text}."
        ),
        GenerationKind::PseudoQuery => format!(
            "Given the following document {doc_text}, generate {x} insightful queries that a reader might have after reading the content. Ensure the queries cover key concepts."
        ),
    }
}

/// Bundled stopwords and synonym groups.
pub struct Lexicon {
    stopwords: BTreeSet<String>,
    synonyms: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn bundled() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| {
            Lexicon::parse(
                include_str!("../data/stopwords.txt"),
                include_str!("../data/synonyms.txt"),
            )
        })
    }

    fn parse(stopwords: &str, synonyms: &str) -> Lexicon {
        let stopwords = stopwords.split_whitespace().map(str::to_string).collect();
        let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for line in synonyms.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            for w in &words {
                let entry = groups.entry(w.to_string()).or_default();
                entry.extend(words.iter().filter(|o| *o != w).map(|o| o.to_string()));
            }
        }
        let synonyms = groups.into_iter().map(|(w, s)| (w, s.into_iter().collect())).collect();
        Lexicon { stopwords, synonyms }
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(word)
    }

    pub fn synonyms(&self, word: &str) -> &[String] {
        self.synonyms.get(word).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Words that appear in at least one synonym group, sorted.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.synonyms.keys().map(String::as_str)
    }

    /// A lowercase token that carries meaning: not a stopword, not reserved,
    /// longer than one character and not purely numeric.
    pub fn is_content(&self, word: &str) -> bool {
        word.chars().count() > 1
            && !word.chars().all(|c| c.is_numeric())
            && !self.is_stopword(word)
            && !RESERVED.contains(&word)
    }
}

/// Sentences split after `.`, `!` or `?` runs followed by whitespace or the end.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        let terminal = matches!(c, '.' | '!' | '?');
        let boundary = chars.peek().is_none_or(|n| n.is_whitespace());
        if terminal && boundary {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

/// Byte ranges of the tokens the tokenizer would produce, and whether each
/// is the mask literal.
fn token_spans(text: &str) -> Vec<(Range<usize>, bool)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if rest.len() >= MASK_LITERAL.len()
            && rest.is_char_boundary(MASK_LITERAL.len())
            && rest[..MASK_LITERAL.len()].eq_ignore_ascii_case(MASK_LITERAL)
        {
            if let Some(s) = start.take() {
                spans.push((s..i, false));
            }
            spans.push((i..i + MASK_LITERAL.len(), true));
            i += MASK_LITERAL.len();
            continue;
        }
        let ch = rest.chars().next().expect("in bounds");
        if ch.is_alphanumeric() {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            spans.push((s..i, false));
        }
        i += ch.len_utf8();
    }
    if let Some(s) = start {
        spans.push((s..text.len(), false));
    }
    spans
}

fn replace_spans(text: &str, replacements: &BTreeMap<usize, (Range<usize>, String)>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (range, with) in replacements.values() {
        out.push_str(&text[last..range.start]);
        out.push_str(with);
        last = range.end;
    }
    out.push_str(&text[last..]);
    out
}

fn ceil_percent(n: usize, percent: usize) -> usize {
    (n * percent).div_ceil(100)
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut chars = replacement.chars();
        match chars.next() {
            Some(f) => f.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    } else {
        replacement.to_string()
    }
}

/// Seed for one (document, kind) pair derived from the run seed.
pub fn derive_seed(seed: u64, doc_key: &str, kind: GenerationKind) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in doc_key.bytes().chain([0xff]).chain(kind.as_str().bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Rule-based noisy version of `text`.
pub fn rule_noise(text: &str, strategy: NoiseStrategy, seed: u64) -> Result<String> {
    let sentences = split_sentences(text);
    if sentences.is_empty() {
        return Err(Error::EmptyInput("document has no sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match strategy {
        NoiseStrategy::SynonymReplace => {
            let lex = Lexicon::bundled();
            let spans = token_spans(text);
            let content: Vec<(Range<usize>, String)> = spans
                .into_iter()
                .filter(|(_, mask)| !mask)
                .map(|(r, _)| {
                    let w = text[r.clone()].to_lowercase();
                    (r, w)
                })
                .filter(|(_, w)| lex.is_content(w))
                .collect();
            let n = ceil_percent(content.len(), SYNONYM_PERCENT);
            // words with synonyms go first so the replacement is visible
            let (mut with, mut without): (Vec<usize>, Vec<usize>) =
                (0..content.len()).partition(|&i| !lex.synonyms(&content[i].1).is_empty());
            with.shuffle(&mut rng);
            without.shuffle(&mut rng);
            let mut chosen = BTreeMap::new();
            for i in with.into_iter().chain(without).take(n) {
                let (range, word) = &content[i];
                let replacement = lex
                    .synonyms(word)
                    .choose(&mut rng)
                    .map(|s| match_case(&text[range.clone()], s))
                    .unwrap_or_else(|| text[range.clone()].to_string());
                chosen.insert(range.start, (range.clone(), replacement));
            }
            replace_spans(text, &chosen)
        }
        NoiseStrategy::SentenceRemove => {
            let n = sentences.len();
            let remove = ceil_percent(n, REMOVE_PERCENT).min(n - 1);
            let dropped: BTreeSet<usize> = index::sample(&mut rng, n, remove).into_iter().collect();
            sentences
                .iter()
                .enumerate()
                .filter(|(i, _)| !dropped.contains(i))
                .map(|(_, s)| s.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        }
        NoiseStrategy::SentenceShuffle => {
            let mut order: Vec<usize> = (0..sentences.len()).collect();
            order.shuffle(&mut rng);
            if order.len() >= 2 && order.iter().enumerate().all(|(i, &o)| i == o) {
                order.swap(0, 1);
            }
            order
                .iter()
                .map(|&i| sentences[i].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        }
        NoiseStrategy::WordMask => {
            let spans = token_spans(text);
            let open: Vec<Range<usize>> = spans.iter().filter(|(_, mask)| !mask).map(|(r, _)| r.clone()).collect();
            let n = ceil_percent(spans.len(), MASK_PERCENT).min(open.len());
            let chosen = index::sample(&mut rng, open.len(), n)
                .into_iter()
                .map(|i| (open[i].start, (open[i].clone(), MASK_LITERAL.to_string())))
                .collect();
            replace_spans(text, &chosen)
        }
    };
    Ok(out)
}

/// Rule-based pseudo-queries: seeded samples of the document's most
/// corpus-specific content tokens.
pub fn rule_queries(doc: &Document, vocab: &Vocabulary, idf: &IdfTable, x: usize, seed: u64) -> Result<Vec<String>> {
    if x == 0 {
        return Err(Error::Config("queries per document must be at least 1".into()));
    }
    let lex = Lexicon::bundled();
    let distinct: BTreeSet<u32> = doc.tokens.iter().copied().collect();
    let mut pool: Vec<(u32, &str)> = distinct
        .into_iter()
        .filter_map(|t| vocab.token(t).map(|s| (t, s)))
        .filter(|(_, s)| lex.is_content(s))
        .collect();
    if pool.len() < 2 {
        return Err(Error::Generation {
            kind: GenerationKind::PseudoQuery.as_str().into(),
            doc_key: doc.doc_key.clone(),
            message: format!("only {} distinct content tokens, need 2", pool.len()),
        });
    }
    pool.sort_by(|a, b| idf.idf(b.0).total_cmp(&idf.idf(a.0)).then(a.1.cmp(b.1)));
    pool.truncate(QUERY_POOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(x);
    while out.len() < x {
        let mut picked = None;
        for _ in 0..QUERY_RETRIES {
            let len = rng.random_range(2..=pool.len().min(5));
            let words: Vec<&str> = index::sample(&mut rng, pool.len(), len)
                .into_iter()
                .map(|i| pool[i].1)
                .collect();
            let mut key = words.clone();
            key.sort_unstable();
            let fresh = seen.insert(key);
            picked = Some(words);
            if fresh {
                break;
            }
        }
        out.push(picked.expect("at least one attempt").join(" "));
    }
    Ok(out)
}

/// Parses one query per line, dropping blank lines and list markers.
pub fn parse_query_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit())
                .trim_start_matches(['.', ')', '-', '*', ':'])
                .trim()
                .to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

impl ExternalBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout: Duration::from_secs(60),
            max_tokens: 512,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into()
    }

    fn complete(&self, agent: &ureq::Agent, prompt: &str) -> std::result::Result<String, String> {
        let request = CompletionRequest {
            model: &self.model,
            prompt,
            max_tokens: self.max_tokens,
        };
        let response: CompletionResponse = agent
            .post(&self.endpoint)
            .send_json(&request)
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json()
            .map_err(|e| e.to_string())?;
        if response.text.trim().is_empty() {
            return Err("empty generation".into());
        }
        Ok(response.text)
    }

    /// Runs the requests with at most `max_in_flight` outstanding, returning
    /// results in request order.
    fn complete_all(&self, prompts: &[String]) -> Vec<std::result::Result<String, String>> {
        let agent = self.agent();
        let next = AtomicUsize::new(0);
        let results = Mutex::new(vec![None; prompts.len()]);
        let workers = self.max_in_flight.clamp(1, prompts.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let r = self.complete(&agent, &prompts[i]);
                    results.lock().expect("worker panicked")[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .expect("worker panicked")
            .into_iter()
            .map(|r| r.expect("every request is answered"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub source_key: String,
    pub kind: String,
    pub seed: u64,
    pub text: String,
}

/// Append-only JSONL store of generated texts keyed by (source_key, kind, seed).
#[derive(Debug)]
pub struct GenerationCache {
    path: PathBuf,
    entries: HashMap<(String, String, u64), String>,
}

impl GenerationCache {
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                entries.insert((rec.source_key, rec.kind, rec.seed), rec.text);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, source_key: &str, kind: GenerationKind, seed: u64) -> Option<&str> {
        self.entries
            .get(&(source_key.to_string(), kind.as_str().to_string(), seed))
            .map(String::as_str)
    }

    pub fn append(&mut self, records: Vec<CacheRecord>) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut w = BufWriter::new(file);
        for rec in records {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io(&self.path, e))?;
            self.entries.insert((rec.source_key, rec.kind, rec.seed), rec.text);
        }
        w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub queries_per_doc: usize,
    pub seed: u64,
    pub max_doc_tokens: usize,
    pub max_query_tokens: usize,
    pub backend: GeneratorBackend,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            queries_per_doc: DEFAULT_QUERIES_PER_DOC,
            seed: 0,
            max_doc_tokens: DEFAULT_MAX_DOC_TOKENS,
            max_query_tokens: DEFAULT_MAX_QUERY_TOKENS,
            backend: GeneratorBackend::RuleBased,
        }
    }
}

/// Noisy documents and pseudo-queries for a whole corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Augmentation {
    pub noisy: Vec<NoisyDocument>,
    pub queries: Vec<PseudoQuery>,
}

fn noisy_document(
    doc: &Document,
    strategy: NoiseStrategy,
    text: String,
    vocab: &Vocabulary,
    cap: usize,
) -> Result<NoisyDocument> {
    let tokens = tokenize_capped(&text, vocab, cap);
    if tokens.is_empty() {
        return Err(Error::Generation {
            kind: strategy.as_str().into(),
            doc_key: doc.doc_key.clone(),
            message: "generation has no tokens".into(),
        });
    }
    Ok(NoisyDocument {
        source_key: doc.doc_key.clone(),
        strategy,
        text,
        tokens,
    })
}

fn pseudo_queries(
    doc: &Document,
    lines: Vec<String>,
    x: usize,
    vocab: &Vocabulary,
    cap: usize,
) -> Result<Vec<PseudoQuery>> {
    let fail = |message: String| Error::Generation {
        kind: GenerationKind::PseudoQuery.as_str().into(),
        doc_key: doc.doc_key.clone(),
        message,
    };
    if lines.len() < x {
        return Err(fail(format!("expected {x} queries, got {}", lines.len())));
    }
    lines
        .into_iter()
        .take(x)
        .enumerate()
        .map(|(i, text)| {
            let tokens = tokenize_capped(&text, vocab, cap);
            if tokens.is_empty() {
                return Err(fail(format!("query {} has no tokens", i + 1)));
            }
            Ok(PseudoQuery {
                source_key: doc.doc_key.clone(),
                index: i + 1,
                text,
                tokens,
            })
        })
        .collect()
}

/// One noisy version of `doc`.
pub fn make_noisy(
    doc: &Document,
    strategy: NoiseStrategy,
    backend: &GeneratorBackend,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<NoisyDocument> {
    let kind = GenerationKind::Noise(strategy);
    let text = match backend {
        GeneratorBackend::RuleBased => rule_noise(&doc.text, strategy, derive_seed(seed, &doc.doc_key, kind))?,
        GeneratorBackend::External(ext) => {
            ext.complete(&ext.agent(), &render_prompt(kind, &doc.text, 0))
                .map_err(|message| Error::Generation {
                    kind: strategy.as_str().into(),
                    doc_key: doc.doc_key.clone(),
                    message,
                })?
        }
    };
    noisy_document(doc, strategy, text, vocab, DEFAULT_MAX_DOC_TOKENS)
}

/// `x` pseudo-queries for `doc`.
pub fn make_pseudo_queries(
    doc: &Document,
    x: usize,
    backend: &GeneratorBackend,
    seed: u64,
    vocab: &Vocabulary,
    idf: &IdfTable,
) -> Result<Vec<PseudoQuery>> {
    let kind = GenerationKind::PseudoQuery;
    let lines = match backend {
        GeneratorBackend::RuleBased => rule_queries(doc, vocab, idf, x, derive_seed(seed, &doc.doc_key, kind))?,
        GeneratorBackend::External(ext) => {
            let text = ext
                .complete(&ext.agent(), &render_prompt(kind, &doc.text, x))
                .map_err(|message| Error::Generation {
                    kind: kind.as_str().into(),
                    doc_key: doc.doc_key.clone(),
                    message,
                })?;
            parse_query_lines(&text)
        }
    };
    pseudo_queries(doc, lines, x, vocab, DEFAULT_MAX_QUERY_TOKENS)
}

/// Generates four noisy versions and `queries_per_doc` pseudo-queries for
/// every document. Texts found in `cache` are reused; new ones are added.
pub fn augment_corpus(
    corpus: &Corpus,
    config: &AugmentConfig,
    cache: Option<&mut GenerationCache>,
) -> Result<Augmentation> {
    if config.queries_per_doc == 0 {
        return Err(Error::Config("queries per document must be at least 1".into()));
    }
    let idf = IdfTable::from_corpus(corpus);
    let kinds: Vec<GenerationKind> = NoiseStrategy::ALL
        .iter()
        .map(|&s| GenerationKind::Noise(s))
        .chain([GenerationKind::PseudoQuery])
        .collect();

    // (doc index, kind) -> raw text; pseudo-queries are stored newline-joined
    let mut texts: BTreeMap<(usize, GenerationKind), String> = BTreeMap::new();
    let mut missing = Vec::new();
    for (i, doc) in corpus.documents().iter().enumerate() {
        for &kind in &kinds {
            match cache.as_deref().and_then(|c| c.get(&doc.doc_key, kind, config.seed)) {
                Some(t) => {
                    texts.insert((i, kind), t.to_string());
                }
                None => missing.push((i, kind)),
            }
        }
    }
    log::info!(
        "augmenting {} documents: {} cached, {} to generate",
        corpus.len(),
        texts.len(),
        missing.len()
    );

    let generated: Vec<String> = match &config.backend {
        GeneratorBackend::RuleBased => missing
            .iter()
            .map(|&(i, kind)| {
                let doc = &corpus.documents()[i];
                let seed = derive_seed(config.seed, &doc.doc_key, kind);
                match kind {
                    GenerationKind::Noise(s) => rule_noise(&doc.text, s, seed),
                    GenerationKind::PseudoQuery => {
                        rule_queries(doc, corpus.vocab(), &idf, config.queries_per_doc, seed).map(|q| q.join("\n"))
                    }
                }
            })
            .collect::<Result<_>>()?,
        GeneratorBackend::External(ext) => {
            let prompts: Vec<String> = missing
                .iter()
                .map(|&(i, kind)| render_prompt(kind, &corpus.documents()[i].text, config.queries_per_doc))
                .collect();
            ext.complete_all(&prompts)
                .into_iter()
                .zip(&missing)
                .map(|(r, &(i, kind))| {
                    r.map_err(|message| Error::Generation {
                        kind: kind.as_str().into(),
                        doc_key: corpus.documents()[i].doc_key.clone(),
                        message,
                    })
                })
                .collect::<Result<_>>()?
        }
    };

    let mut records = Vec::with_capacity(missing.len());
    for (&(i, kind), text) in missing.iter().zip(generated) {
        records.push(CacheRecord {
            source_key: corpus.documents()[i].doc_key.clone(),
            kind: kind.as_str().into(),
            seed: config.seed,
            text: text.clone(),
        });
        texts.insert((i, kind), text);
    }
    if let Some(c) = cache {
        c.append(records)?;
    }

    let mut out = Augmentation::default();
    for ((i, kind), text) in texts {
        let doc = &corpus.documents()[i];
        match kind {
            GenerationKind::Noise(s) => {
                out.noisy
                    .push(noisy_document(doc, s, text, corpus.vocab(), config.max_doc_tokens)?)
            }
            GenerationKind::PseudoQuery => out.queries.extend(pseudo_queries(
                doc,
                parse_query_lines(&text),
                config.queries_per_doc,
                corpus.vocab(),
                config.max_query_tokens,
            )?),
        }
    }
    Ok(out)
}

impl Augmentation {
    /// Token-level stores keyed by source doc_key.
    pub fn stores(&self) -> TrainingStores {
        let mut stores = TrainingStores::default();
        for n in &self.noisy {
            stores
                .noisy
                .entry(n.source_key.clone())
                .or_default()
                .push(n.tokens.clone());
        }
        for q in &self.queries {
            stores
                .queries
                .entry(q.source_key.clone())
                .or_default()
                .push(q.tokens.clone());
        }
        stores
    }

    /// Writes `noisy.jsonl` and `queries.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join("noisy.jsonl"), &self.noisy)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)
    }

    /// Reads the files written by [`Augmentation::save`], re-tokenizing with
    /// `vocab` and the caps of `config`.
    pub fn load(dir: &Path, vocab: &Vocabulary, config: &AugmentConfig) -> Result<Self> {
        let mut noisy: Vec<NoisyDocument> = read_jsonl(&dir.join("noisy.jsonl"))?;
        for n in &mut noisy {
            n.tokens = tokenize_capped(&n.text, vocab, config.max_doc_tokens);
        }
        let mut queries: Vec<PseudoQuery> = read_jsonl(&dir.join("queries.jsonl"))?;
        for q in &mut queries {
            q.tokens = tokenize_capped(&q.text, vocab, config.max_query_tokens);
        }
        Ok(Self { noisy, queries })
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
