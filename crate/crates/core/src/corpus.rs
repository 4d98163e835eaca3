//! Corpus and query loading, tokenization, and the text-token vocabulary.
//!
//! Docid tokens are deliberately absent from [`Vocabulary`]; they live in
//! [`crate::pq::DocidVocabulary`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;

/// Token strings of the reserved ids, in id order.
pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "[masked]"];

/// Literal placed in texts by word masking; tokenizes to [`MASK`].
pub const MASK_LITERAL: &str = "[Masked]";

pub const DEFAULT_MAX_DOC_TOKENS: usize = 512;
pub const DEFAULT_MAX_QUERY_TOKENS: usize = 64;

/// Bijective token-string ↔ id map. Ids are contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Builds a vocabulary from raw texts.
///
/// Ids are assigned by descending frequency, then lexicographically, after
/// the five reserved ids.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], min_count: usize) -> Result<Vocabulary> {
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in split_tokens(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let reserved: HashSet<&str> = RESERVED.iter().copied().collect();
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !reserved.contains(t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Ok(Vocabulary::from_tokens(tokens))
}

/// Splits text into lowercase token strings.
///
/// Alphanumeric runs are tokens; whitespace and punctuation separate them.
/// The mask literal survives as the single token `[masked]`.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mask = RESERVED[MASK as usize];
    let mut out = Vec::new();
    let mut current = String::new();
    let mut rest = lower.as_str();
    while let Some(ch) = rest.chars().next() {
        if ch == '[' && rest.starts_with(mask) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(mask.to_string());
            rest = &rest[mask.len()..];
            continue;
        }
        if ch.is_alphanumeric() {
            current.push(ch);
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
        rest = &rest[ch.len_utf8()..];
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Tokenizes with the default document cap of 512 tokens.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    tokenize_capped(text, vocab, DEFAULT_MAX_DOC_TOKENS)
}

/// Tokenizes, mapping out-of-vocabulary tokens to [`UNK`] and truncating at `cap`.
pub fn tokenize_capped(text: &str, vocab: &Vocabulary, cap: usize) -> Vec<u32> {
    split_tokens(text)
        .iter()
        .take(cap)
        .map(|t| vocab.id(t).unwrap_or(UNK))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_key: String,
    pub text: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DocumentRecord {
    doc_key: String,
    text: String,
}

/// An ordered, immutable document collection with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    vocab: Vocabulary,
    key_index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus from `(doc_key, text)` pairs. The line number reported
    /// in errors is the 1-based position in `records`.
    pub fn from_records<I, K, T>(records: I, min_count: usize, max_doc_tokens: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (K, T)>,
        K: Into<String>,
        T: Into<String>,
    {
        let mut raw: Vec<(String, String)> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for (i, (key, text)) in records.into_iter().enumerate() {
            let key = key.into();
            if !seen.insert(key.clone()) {
                return Err(Error::DuplicateKey { key, line: i + 1 });
            }
            raw.push((key, text.into()));
        }
        let texts: Vec<&str> = raw.iter().map(|(_, t)| t.as_str()).collect();
        let vocab = build_vocab(&texts, min_count)?;
        let mut documents = Vec::with_capacity(raw.len());
        let mut key_index = HashMap::with_capacity(raw.len());
        for (i, (doc_key, text)) in raw.into_iter().enumerate() {
            let tokens = tokenize_capped(&text, &vocab, max_doc_tokens);
            if tokens.is_empty() {
                return Err(Error::Malformed {
                    line: i + 1,
                    message: format!("document {doc_key} has no tokens"),
                });
            }
            key_index.insert(doc_key.clone(), i);
            documents.push(Document { doc_key, text, tokens });
        }
        Ok(Self {
            documents,
            vocab,
            key_index,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_key: &str) -> Option<&Document> {
        self.key_index.get(doc_key).map(|&i| &self.documents[i])
    }

    pub fn position(&self, doc_key: &str) -> Option<usize> {
        self.key_index.get(doc_key).copied()
    }

    /// Writes the corpus back out as JSON Lines in document order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for doc in &self.documents {
            let rec = DocumentRecord {
                doc_key: doc.doc_key.clone(),
                text: doc.text.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON Lines corpus with `doc_key` and `text` string fields.
pub fn ingest_jsonl(path: &Path, limit: Option<usize>) -> Result<Corpus> {
    ingest_jsonl_with(path, limit, 1, DEFAULT_MAX_DOC_TOKENS)
}

pub fn ingest_jsonl_with(path: &Path, limit: Option<usize>, min_count: usize, max_doc_tokens: usize) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        if limit.is_some_and(|l| records.len() >= l) {
            break;
        }
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.doc_key.clone()) {
            return Err(Error::DuplicateKey {
                key: rec.doc_key,
                line: i + 1,
            });
        }
        records.push((rec.doc_key, rec.text));
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::from_records(records, min_count, max_doc_tokens)
}

/// A query, optionally labeled with its single relevant document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub relevant: Option<String>,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>, vocab: &Vocabulary) -> Self {
        let text = text.into();
        let tokens = tokenize_capped(&text, vocab, DEFAULT_MAX_QUERY_TOKENS);
        Self {
            query_id: query_id.into(),
            text,
            tokens,
            relevant: None,
        }
    }

    pub fn with_relevant(mut self, doc_key: impl Into<String>) -> Self {
        self.relevant = Some(doc_key.into());
        self
    }
}

/// Reads a TSV query file: `query_id`, `query_text`, optional `relevant_doc_key`.
pub fn read_queries(path: &Path, vocab: &Vocabulary) -> Result<Vec<Query>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(Error::Malformed {
                line: i + 1,
                message: format!("expected 2 or 3 tab-separated columns, got {}", cols.len()),
            });
        }
        let mut q = Query::new(cols[0], cols[1], vocab);
        if let Some(rel) = cols.get(2).filter(|s| !s.is_empty()) {
            q.relevant = Some(rel.to_string());
        }
        out.push(q);
    }
    Ok(out)
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in queries {
        let line = match &q.relevant {
            Some(rel) => format!("{}\t{}\t{}\n", q.query_id, q.text, rel),
            None => format!("{}\t{}\n", q.query_id, q.text),
        };
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Document frequency statistics over a corpus, used to rank salient tokens.
#[derive(Debug, Clone)]
pub struct IdfTable {
    idf: BTreeMap<u32, f64>,
}

impl IdfTable {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let n = corpus.len() as f64;
        let mut df: BTreeMap<u32, usize> = BTreeMap::new();
        for doc in corpus.documents() {
            let uniq: HashSet<u32> = doc.tokens.iter().copied().collect();
            for t in uniq {
                *df.entry(t).or_default() += 1;
            }
        }
        let idf = df
            .into_iter()
            .map(|(t, d)| (t, ((n + 1.0) / (d as f64 + 1.0)).ln() + 1.0))
            .collect();
        Self { idf }
    }

    pub fn idf(&self, token: u32) -> f64 {
        self.idf.get(&token).copied().unwrap_or(0.0)
    }
}
