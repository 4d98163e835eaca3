//! Prefix trie over docids and trie-constrained beam search.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{DecodeState, ModelParams};
use crate::pq::{Docid, DocidTable};
use crate::tensor::log_sum_exp;

pub const DEFAULT_BEAM: usize = 20;
pub const EXHAUSTIVE_LIMIT: usize = 100_000;
const WARMUP_QUERIES: usize = 3;

/// How per-step log-probabilities treat codes outside the allowed set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepNormalization {
    /// Log-softmax over the allowed children only.
    #[default]
    Renormalized,
    /// Log-softmax over all `k` codes; disallowed codes are merely skipped.
    Masked,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    code: u32,
    child: u32,
}

#[derive(Debug, Clone, Default)]
struct Node {
    edges: Vec<Edge>,
    leaf: Option<u32>,
}

/// Trie of all docid code paths; every leaf sits at depth `groups`.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    groups: usize,
    nodes: Vec<Node>,
    keys: Vec<String>,
    docids: Vec<Docid>,
}

impl PrefixTrie {
    pub fn build(table: &DocidTable) -> Self {
        let mut trie = PrefixTrie {
            groups: table.groups(),
            nodes: vec![Node::default()],
            keys: Vec::with_capacity(table.len()),
            docids: Vec::with_capacity(table.len()),
        };
        // docid order is lexicographic, so children arrive in ascending code order
        for (docid, key) in table.iter_by_docid() {
            let mut node = 0usize;
            for &code in docid.codes() {
                let existing = trie.nodes[node]
                    .edges
                    .last()
                    .filter(|e| e.code == code)
                    .map(|e| e.child);
                node = match existing {
                    Some(c) => c as usize,
                    None => {
                        let child = trie.nodes.len() as u32;
                        trie.nodes.push(Node::default());
                        trie.nodes[node].edges.push(Edge { code, child });
                        child as usize
                    }
                };
            }
            trie.nodes[node].leaf = Some(trie.keys.len() as u32);
            trie.keys.push(key.to_string());
            trie.docids.push(docid.clone());
        }
        trie
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Nodes with more than one child, by depth.
    pub fn branch_depths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, 0usize)];
        while let Some((n, depth)) = stack.pop() {
            if self.nodes[n].edges.len() > 1 {
                out.push(depth);
            }
            for e in &self.nodes[n].edges {
                stack.push((e.child as usize, depth + 1));
            }
        }
        out.sort_unstable();
        out
    }

    /// Every root-to-leaf path with its doc_key, in code order.
    pub fn paths(&self) -> Vec<(Docid, String)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, codes)) = stack.pop() {
            if let Some(l) = self.nodes[n].leaf {
                out.push((Docid::from_codes(codes.clone()), self.keys[l as usize].clone()));
            }
            for e in self.nodes[n].edges.iter().rev() {
                let mut c = codes.clone();
                c.push(e.code);
                stack.push((e.child as usize, c));
            }
        }
        out
    }

    /// Approximate heap footprint: nodes, edges and leaf keys.
    pub fn memory_bytes(&self) -> usize {
        let edges: usize = self.nodes.iter().map(|n| n.edges.len()).sum();
        self.nodes.len() * std::mem::size_of::<Node>()
            + edges * std::mem::size_of::<Edge>()
            + self
                .keys
                .iter()
                .map(|k| k.len() + std::mem::size_of::<String>())
                .sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEntry {
    pub doc_key: String,
    pub docid: Docid,
    pub log_likelihood: f64,
}

/// Results ordered by descending score, ties by ascending code sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based rank of `doc_key`, if present.
    pub fn rank_of(&self, doc_key: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.doc_key == doc_key).map(|p| p + 1)
    }
}

fn ranking_order(a: (f64, &[u32]), b: (f64, &[u32])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn step_log_probs(logits: &[f64], allowed: &[u32], mode: StepNormalization) -> Vec<f64> {
    let lse = match mode {
        StepNormalization::Renormalized => {
            let sub: Vec<f64> = allowed.iter().map(|&c| logits[c as usize]).collect();
            log_sum_exp(&sub)
        }
        StepNormalization::Masked => log_sum_exp(logits),
    };
    allowed.iter().map(|&c| logits[c as usize] - lse).collect()
}

struct Hypothesis {
    node: usize,
    codes: Vec<u32>,
    state: DecodeState,
    score: f64,
}

/// Beam search over `trie`, allowing only existing docid continuations.
pub fn constrained_beam_search(
    params: &ModelParams,
    query: &[u32],
    trie: &PrefixTrie,
    beam: usize,
    mode: StepNormalization,
) -> Result<RankedList> {
    if query.is_empty() {
        return Err(Error::EmptyInput("query has no tokens".into()));
    }
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if trie.is_empty() {
        return Err(Error::EmptyInput("trie has no docids".into()));
    }
    let encoded = params.encode(query)?;
    let mut beams = vec![Hypothesis {
        node: 0,
        codes: Vec::new(),
        state: params.start_state(&encoded),
        score: 0.0,
    }];
    for t in 0..trie.groups {
        // (score, parent, edge index)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (b, hyp) in beams.iter().enumerate() {
            let logits = params.step_logits(&hyp.state)?;
            let edges = &trie.nodes[hyp.node].edges;
            let allowed: Vec<u32> = edges.iter().map(|e| e.code).collect();
            for (i, lp) in step_log_probs(&logits, &allowed, mode).into_iter().enumerate() {
                candidates.push((hyp.score + lp, b, i));
            }
        }
        let code_of = |&(_, b, i): &(f64, usize, usize)| trie.nodes[beams[b].node].edges[i].code;
        candidates.sort_by(|x, y| {
            y.0.total_cmp(&x.0).then_with(|| {
                beams[x.1]
                    .codes
                    .iter()
                    .chain([code_of(x)].iter())
                    .cmp(beams[y.1].codes.iter().chain([code_of(y)].iter()))
            })
        });
        candidates.truncate(beam);
        let last = t + 1 == trie.groups;
        beams = candidates
            .iter()
            .map(|c @ &(score, b, i)| {
                let parent = &beams[b];
                let code = code_of(c);
                let mut codes = parent.codes.clone();
                codes.push(code);
                let state = if last {
                    parent.state.clone()
                } else {
                    params.advance(&parent.state, code)?
                };
                Ok(Hypothesis {
                    node: trie.nodes[parent.node].edges[i].child as usize,
                    codes,
                    state,
                    score,
                })
            })
            .collect::<Result<_>>()?;
    }
    let entries = beams
        .into_iter()
        .map(|h| {
            let leaf = trie.nodes[h.node].leaf.expect("depth-g nodes are leaves") as usize;
            RankedEntry {
                doc_key: trie.keys[leaf].clone(),
                docid: trie.docids[leaf].clone(),
                log_likelihood: h.score,
            }
        })
        .collect();
    Ok(RankedList { entries })
}

/// Scores every docid in `table` and sorts; the reference for beam search.
///
/// Allowed sets for the renormalized mode are recomputed from the table
/// directly, without the trie.
pub fn exhaustive_rank(
    params: &ModelParams,
    query: &[u32],
    table: &DocidTable,
    mode: StepNormalization,
) -> Result<RankedList> {
    if table.len() > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge {
            size: table.len(),
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    if query.is_empty() {
        return Err(Error::EmptyInput("query has no tokens".into()));
    }
    let encoded = params.encode(query)?;
    let mut allowed: BTreeMap<&[u32], Vec<u32>> = BTreeMap::new();
    if mode == StepNormalization::Renormalized {
        for (docid, _) in table.iter_by_docid() {
            let c = docid.codes();
            for t in 0..c.len() {
                let set = allowed.entry(&c[..t]).or_default();
                if set.last() != Some(&c[t]) {
                    set.push(c[t]);
                }
            }
        }
    }
    let mut entries = Vec::with_capacity(table.len());
    for (docid, key) in table.iter_by_docid() {
        let codes = docid.codes();
        let score = match mode {
            StepNormalization::Masked => params.score_encoded(&encoded, codes)?.log_likelihood,
            StepNormalization::Renormalized => {
                let mut state = params.start_state(&encoded);
                let mut total = 0.0;
                for (t, &code) in codes.iter().enumerate() {
                    let logits = params.step_logits(&state)?;
                    let set = &allowed[&codes[..t]];
                    let lps = step_log_probs(&logits, set, mode);
                    total += lps[set.binary_search(&code).expect("code is in its own allowed set")];
                    if t + 1 < codes.len() {
                        state = params.advance(&state, code)?;
                    }
                }
                total
            }
        };
        entries.push(RankedEntry {
            doc_key: key.to_string(),
            docid: docid.clone(),
            log_likelihood: score,
        });
    }
    entries.sort_by(|a, b| ranking_order((a.log_likelihood, a.docid.codes()), (b.log_likelihood, b.docid.codes())));
    Ok(RankedList { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub queries: usize,
    pub beam: usize,
    pub mean_ms: f64,
    pub trie_nodes: usize,
    pub trie_memory_bytes: usize,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        format!(
            "queries,beam,latency_ms,memory_bytes,trie_nodes\n{},{},{:.4},{},{}\n",
            self.queries, self.beam, self.mean_ms, self.trie_memory_bytes, self.trie_nodes
        )
    }
}

/// Mean wall-clock decoding time per query after three warm-up queries.
pub fn measure_latency(
    params: &ModelParams,
    queries: &[Vec<u32>],
    trie: &PrefixTrie,
    beam: usize,
    mode: StepNormalization,
) -> Result<LatencyReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("no queries to time".into()));
    }
    for q in queries.iter().cycle().take(WARMUP_QUERIES) {
        constrained_beam_search(params, q, trie, beam, mode)?;
    }
    let start = Instant::now();
    for q in queries {
        constrained_beam_search(params, q, trie, beam, mode)?;
    }
    let elapsed = start.elapsed().as_secs_f64() * 1000.0;
    Ok(LatencyReport {
        queries: queries.len(),
        beam,
        // a timer tick of zero would misreport; clamp to the smallest positive value
        mean_ms: (elapsed / queries.len() as f64).max(f64::MIN_POSITIVE),
        trie_nodes: trie.node_count(),
        trie_memory_bytes: trie.memory_bytes(),
    })
}

/// TSV rows: query_id, rank, doc_key, log_likelihood.
pub fn write_ranked(path: &Path, results: &[(String, RankedList)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "query_id\trank\tdoc_key\tlog_likelihood").map_err(io)?;
    for (qid, list) in results {
        for (i, e) in list.entries.iter().enumerate() {
            writeln!(w, "{qid}\t{}\t{}\t{}", i + 1, e.doc_key, e.log_likelihood).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
