//! Pre-training losses and the two batch types they consume.
//!
//! Every loss is a function of encoder outputs and of docid sequence
//! log-likelihoods `ℓ(id | x)`. Evaluation runs in three passes: encode all
//! inputs, decode the (input, docid) pairs the active terms need, then push
//! `∂L/∂ℓ` and `∂L/∂Enc` back through the model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{DecodeTrace, EncoderOutput, Gradients, ModelParams};
use crate::pq::{Docid, DocidTable};
use crate::tensor::{accumulate_cosine_grad, cosine, log_sum_exp};

/// Number of noisy variants per document.
pub const NOISE_VARIANTS: usize = 4;

/// How a sequence log-likelihood enters the contrastive softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `exp(ℓ / τ)`
    #[default]
    LogLikelihood,
    /// `exp(P / τ)` with `P = exp(ℓ)`.
    RawProb,
}

impl ScoreMode {
    fn transform(self, ll: f64) -> (f64, f64) {
        match self {
            ScoreMode::LogLikelihood => (ll, 1.0),
            ScoreMode::RawProb => {
                let p = ll.exp();
                (p, p)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub lambda: f64,
    pub tau: f64,
    pub contrastive_score: ScoreMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            rho: 2.0,
            lambda: 1.0,
            tau: 0.2,
            contrastive_score: ScoreMode::LogLikelihood,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("rho", self.rho),
            ("lambda", self.lambda),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Multipliers on the six raw loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermCoefficients {
    pub sc: f64,
    pub c1: f64,
    pub c2: f64,
    pub rp: f64,
    pub id: f64,
    pub re: f64,
}

impl TermCoefficients {
    /// The joint pre-training objective `γ·L_CI + ρ·L_RP + λ·L_ID + λ·L_RE`.
    pub fn pretraining(w: &LossWeights) -> Self {
        Self {
            sc: w.gamma,
            c1: w.gamma * w.alpha,
            c2: w.gamma * w.beta,
            rp: w.rho,
            id: w.lambda,
            re: w.lambda,
        }
    }

    pub fn mle_only() -> Self {
        Self {
            id: 1.0,
            re: 1.0,
            ..Self::default()
        }
    }
}

/// Raw (unweighted) term values. Terms that were not evaluated are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sc: f64,
    pub c1: f64,
    pub c2: f64,
    pub rp: f64,
    pub id: f64,
    pub re: f64,
}

impl LossBreakdown {
    pub fn weighted(&self, c: &TermCoefficients) -> f64 {
        c.sc * self.sc + c.c1 * self.c1 + c.c2 * self.c2 + c.rp * self.rp + c.id * self.id + c.re * self.re
    }

    fn is_finite(&self) -> bool {
        [self.sc, self.c1, self.c2, self.rp, self.id, self.re]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// `N` documents with their docids and (optionally) their noisy variants.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexingBatch {
    pub doc_keys: Vec<String>,
    pub docs: Vec<Vec<u32>>,
    /// `noisy[i]` holds the variants of `docs[i]`; empty when noise is disabled.
    pub noisy: Vec<Vec<Vec<u32>>>,
    pub docids: Vec<Docid>,
}

/// `N` documents' pseudo-queries paired with the documents' docids.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalBatch {
    pub doc_keys: Vec<String>,
    pub queries: Vec<Vec<Vec<u32>>>,
    pub docids: Vec<Docid>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Indexing(IndexingBatch),
    Retrieval(RetrievalBatch),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Indexing,
    Retrieval,
}

impl BatchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchKind::Indexing => "indexing",
            BatchKind::Retrieval => "retrieval",
        }
    }
}

impl Batch {
    pub fn kind(&self) -> BatchKind {
        match self {
            Batch::Indexing(_) => BatchKind::Indexing,
            Batch::Retrieval(_) => BatchKind::Retrieval,
        }
    }

    pub fn docids(&self) -> &[Docid] {
        match self {
            Batch::Indexing(b) => &b.docids,
            Batch::Retrieval(b) => &b.docids,
        }
    }
}

/// One encoded input and the docid candidates it must be scored against.
struct ScoredInput<'a> {
    tokens: &'a [u32],
    owner: usize,
    encoded: EncoderOutput,
    traces: Vec<(usize, DecodeTrace)>,
    /// `∂L/∂ℓ` per entry of `traces`.
    d_scores: Vec<f64>,
    d_vector: Vec<f64>,
}

impl<'a> ScoredInput<'a> {
    fn new(params: &ModelParams, tokens: &'a [u32], owner: usize) -> Result<Self> {
        let encoded = params.encode(tokens)?;
        Ok(Self {
            tokens,
            owner,
            d_vector: vec![0.0; encoded.doc_vector.len()],
            encoded,
            traces: Vec::new(),
            d_scores: Vec::new(),
        })
    }

    fn score(&mut self, params: &ModelParams, docids: &[Docid], all: bool) -> Result<()> {
        let candidates: Vec<usize> = if all {
            (0..docids.len()).collect()
        } else {
            vec![self.owner]
        };
        for j in candidates {
            let trace = params.trace(&self.encoded, docids[j].codes())?;
            self.traces.push((j, trace));
        }
        self.d_scores = vec![0.0; self.traces.len()];
        Ok(())
    }

    fn owner_ll(&self) -> f64 {
        self.traces
            .iter()
            .find(|(j, _)| *j == self.owner)
            .map(|(_, t)| t.score.log_likelihood)
            .expect("owner docid is always scored")
    }

    /// `−log softmax_j(s_j/τ)[owner]`; accumulates `coef · ∂/∂ℓ_j` when asked.
    fn contrastive(&mut self, tau: f64, mode: ScoreMode, coef: f64, want_grad: bool) -> f64 {
        let (scaled, dtrans): (Vec<f64>, Vec<f64>) = self
            .traces
            .iter()
            .map(|(_, t)| {
                let (s, ds) = mode.transform(t.score.log_likelihood);
                (s / tau, ds)
            })
            .unzip();
        let lse = log_sum_exp(&scaled);
        let owner_pos = self
            .traces
            .iter()
            .position(|(j, _)| *j == self.owner)
            .expect("owner docid is always scored");
        if want_grad && coef != 0.0 {
            for (pos, (s, ds)) in scaled.iter().zip(&dtrans).enumerate() {
                let delta = if pos == owner_pos { 1.0 } else { 0.0 };
                self.d_scores[pos] += coef * ((s - lse).exp() - delta) / tau * ds;
            }
        }
        lse - scaled[owner_pos]
    }

    fn mle(&mut self, coef: f64, want_grad: bool) -> f64 {
        if want_grad && coef != 0.0 {
            let pos = self
                .traces
                .iter()
                .position(|(j, _)| *j == self.owner)
                .expect("owner docid is always scored");
            self.d_scores[pos] -= coef;
        }
        -self.owner_ll()
    }

    fn backprop(&mut self, params: &ModelParams, docids: &[Docid], grads: &mut Gradients) {
        for ((j, trace), &coef) in self.traces.iter().zip(&self.d_scores) {
            if coef == 0.0 {
                continue;
            }
            let dh = params.backprop_sequence(trace, docids[*j].codes(), coef, grads);
            for (a, b) in self.d_vector.iter_mut().zip(dh) {
                *a += b;
            }
        }
        if self.d_vector.iter().any(|&x| x != 0.0) {
            params.backprop_encoder(self.tokens, &self.encoded, &self.d_vector, grads);
        }
    }
}

fn check_batch(n: usize, docids: usize, inputs: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyInput(format!("{what} batch has no documents")));
    }
    if docids != n || inputs != n {
        return Err(Error::Shape(format!(
            "{what} batch: {n} documents, {docids} docids, {inputs} input groups"
        )));
    }
    Ok(())
}

fn evaluate_indexing(
    params: &ModelParams,
    batch: &IndexingBatch,
    coef: &TermCoefficients,
    weights: &LossWeights,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    let n = batch.docs.len();
    check_batch(n, batch.docids.len(), batch.noisy.len(), "indexing")?;
    let want_grad = grads.is_some();
    let mut originals = batch
        .docs
        .iter()
        .enumerate()
        .map(|(i, d)| ScoredInput::new(params, d, i))
        .collect::<Result<Vec<_>>>()?;
    let mut noisy = Vec::new();
    for (i, variants) in batch.noisy.iter().enumerate() {
        for v in variants {
            noisy.push(ScoredInput::new(params, v, i)?);
        }
    }

    let mut out = LossBreakdown::default();
    if coef.sc != 0.0 {
        for nz in noisy.iter_mut() {
            let orig = &mut originals[nz.owner];
            let a = &orig.encoded.doc_vector;
            let b = &nz.encoded.doc_vector;
            out.sc += 1.0 - cosine(a, b);
            if want_grad {
                accumulate_cosine_grad(a, b, -coef.sc, &mut orig.d_vector);
                accumulate_cosine_grad(b, a, -coef.sc, &mut nz.d_vector);
            }
        }
    }

    let need_orig = coef.c1 != 0.0 || coef.id != 0.0;
    let need_noisy = coef.c2 != 0.0 || coef.id != 0.0;
    for (inputs, needed, c_coef) in [(&mut originals, need_orig, coef.c1), (&mut noisy, need_noisy, coef.c2)] {
        if !needed {
            continue;
        }
        for inp in inputs.iter_mut() {
            inp.score(params, &batch.docids, c_coef != 0.0)?;
        }
    }
    for inp in originals.iter_mut().filter(|_| coef.c1 != 0.0) {
        out.c1 += inp.contrastive(weights.tau, weights.contrastive_score, coef.c1, want_grad);
    }
    for inp in noisy.iter_mut().filter(|_| coef.c2 != 0.0) {
        out.c2 += inp.contrastive(weights.tau, weights.contrastive_score, coef.c2, want_grad);
    }
    if coef.id != 0.0 {
        for inp in originals.iter_mut().chain(noisy.iter_mut()) {
            out.id += inp.mle(coef.id, want_grad);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("indexing loss {out:?}")));
    }
    if let Some(g) = grads {
        for inp in originals.iter_mut().chain(noisy.iter_mut()) {
            inp.backprop(params, &batch.docids, g);
        }
    }
    Ok(out)
}

fn evaluate_retrieval(
    params: &ModelParams,
    batch: &RetrievalBatch,
    coef: &TermCoefficients,
    weights: &LossWeights,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    let n = batch.queries.len();
    check_batch(n, batch.docids.len(), batch.doc_keys.len(), "retrieval")?;
    let want_grad = grads.is_some();
    let mut out = LossBreakdown::default();
    if coef.rp == 0.0 && coef.re == 0.0 {
        return Ok(out);
    }
    let mut inputs = Vec::new();
    for (i, qs) in batch.queries.iter().enumerate() {
        for q in qs {
            let mut inp = ScoredInput::new(params, q, i)?;
            inp.score(params, &batch.docids, coef.rp != 0.0)?;
            inputs.push(inp);
        }
    }
    for inp in inputs.iter_mut() {
        if coef.rp != 0.0 {
            out.rp += inp.contrastive(weights.tau, weights.contrastive_score, coef.rp, want_grad);
        }
        if coef.re != 0.0 {
            out.re += inp.mle(coef.re, want_grad);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("retrieval loss {out:?}")));
    }
    if let Some(g) = grads {
        for inp in inputs.iter_mut() {
            inp.backprop(params, &batch.docids, g);
        }
    }
    Ok(out)
}

/// Term values of a batch under `coef`, without gradients.
pub fn evaluate_batch(
    params: &ModelParams,
    batch: &Batch,
    coef: &TermCoefficients,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    match batch {
        Batch::Indexing(b) => evaluate_indexing(params, b, coef, weights, None),
        Batch::Retrieval(b) => evaluate_retrieval(params, b, coef, weights, None),
    }
}

/// Term values and the exact gradient of `Σ coef · term`.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &Batch,
    coef: &TermCoefficients,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let mut grads = params.zero_grads();
    let out = match batch {
        Batch::Indexing(b) => evaluate_indexing(params, b, coef, weights, Some(&mut grads))?,
        Batch::Retrieval(b) => evaluate_retrieval(params, b, coef, weights, Some(&mut grads))?,
    };
    Ok((out, grads))
}

/// Semantic consistency: `Σ_i Σ_h 1 − cos(Enc(d_i), Enc(d̃_i^h))`.
pub fn loss_semantic_consistency(params: &ModelParams, batch: &IndexingBatch) -> Result<f64> {
    let coef = TermCoefficients {
        sc: 1.0,
        ..Default::default()
    };
    Ok(evaluate_indexing(params, batch, &coef, &LossWeights::default(), None)?.sc)
}

/// In-batch contrastive loss over original documents.
pub fn loss_contrastive_indexing(params: &ModelParams, batch: &IndexingBatch, weights: &LossWeights) -> Result<f64> {
    let coef = TermCoefficients {
        c1: 1.0,
        ..Default::default()
    };
    Ok(evaluate_indexing(params, batch, &coef, weights, None)?.c1)
}

/// In-batch contrastive loss over noisy documents.
pub fn loss_contrastive_noisy(params: &ModelParams, batch: &IndexingBatch, weights: &LossWeights) -> Result<f64> {
    let coef = TermCoefficients {
        c2: 1.0,
        ..Default::default()
    };
    Ok(evaluate_indexing(params, batch, &coef, weights, None)?.c2)
}

/// `L_SC + α·L_C1 + β·L_C2`
pub fn loss_corpus_indexing(params: &ModelParams, batch: &IndexingBatch, weights: &LossWeights) -> Result<f64> {
    let coef = Objective::CorpusIndexing.coefficients(weights);
    Ok(evaluate_indexing(params, batch, &coef, weights, None)?.weighted(&coef))
}

/// In-batch contrastive loss over pseudo-queries.
pub fn loss_relevance_prediction(params: &ModelParams, batch: &RetrievalBatch, weights: &LossWeights) -> Result<f64> {
    let coef = TermCoefficients {
        rp: 1.0,
        ..Default::default()
    };
    Ok(evaluate_retrieval(params, batch, &coef, weights, None)?.rp)
}

/// MLE over original and noisy document-docid pairs.
pub fn loss_mle_indexing(params: &ModelParams, batch: &IndexingBatch) -> Result<f64> {
    let coef = TermCoefficients {
        id: 1.0,
        ..Default::default()
    };
    Ok(evaluate_indexing(params, batch, &coef, &LossWeights::default(), None)?.id)
}

/// MLE over query-docid pairs.
pub fn loss_mle_retrieval(params: &ModelParams, batch: &RetrievalBatch) -> Result<f64> {
    let coef = TermCoefficients {
        re: 1.0,
        ..Default::default()
    };
    Ok(evaluate_retrieval(params, batch, &coef, &LossWeights::default(), None)?.re)
}

/// `γ·L_CI + ρ·L_RP + λ·L_ID + λ·L_RE` over one batch of each type.
pub fn loss_pretrain_total(
    params: &ModelParams,
    indexing: &IndexingBatch,
    retrieval: &RetrievalBatch,
    weights: &LossWeights,
) -> Result<f64> {
    let coef = TermCoefficients::pretraining(weights);
    let a = evaluate_indexing(params, indexing, &coef, weights, None)?;
    let b = evaluate_retrieval(params, retrieval, &coef, weights, None)?;
    Ok(a.weighted(&coef) + b.weighted(&coef))
}

/// The individually differentiable objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    SemanticConsistency,
    ContrastiveIndexing,
    ContrastiveNoisy,
    CorpusIndexing,
    RelevancePrediction,
    MleIndexing,
    MleRetrieval,
    PretrainTotal,
}

impl Objective {
    pub const ALL: [Objective; 8] = [
        Objective::SemanticConsistency,
        Objective::ContrastiveIndexing,
        Objective::ContrastiveNoisy,
        Objective::CorpusIndexing,
        Objective::RelevancePrediction,
        Objective::MleIndexing,
        Objective::MleRetrieval,
        Objective::PretrainTotal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::SemanticConsistency => "L_SC",
            Objective::ContrastiveIndexing => "L_C1",
            Objective::ContrastiveNoisy => "L_C2",
            Objective::CorpusIndexing => "L_CI",
            Objective::RelevancePrediction => "L_RP",
            Objective::MleIndexing => "L_ID",
            Objective::MleRetrieval => "L_RE",
            Objective::PretrainTotal => "L_Pre",
        }
    }

    pub fn coefficients(self, w: &LossWeights) -> TermCoefficients {
        let zero = TermCoefficients::default();
        match self {
            Objective::SemanticConsistency => TermCoefficients { sc: 1.0, ..zero },
            Objective::ContrastiveIndexing => TermCoefficients { c1: 1.0, ..zero },
            Objective::ContrastiveNoisy => TermCoefficients { c2: 1.0, ..zero },
            Objective::CorpusIndexing => TermCoefficients {
                sc: 1.0,
                c1: w.alpha,
                c2: w.beta,
                ..zero
            },
            Objective::RelevancePrediction => TermCoefficients { rp: 1.0, ..zero },
            Objective::MleIndexing => TermCoefficients { id: 1.0, ..zero },
            Objective::MleRetrieval => TermCoefficients { re: 1.0, ..zero },
            Objective::PretrainTotal => TermCoefficients::pretraining(w),
        }
    }
}

/// Value and exact gradient of `objective` summed over the given batches.
pub fn backward(
    params: &ModelParams,
    objective: Objective,
    indexing: Option<&IndexingBatch>,
    retrieval: Option<&RetrievalBatch>,
    weights: &LossWeights,
) -> Result<(f64, Gradients)> {
    let coef = objective.coefficients(weights);
    let mut grads = params.zero_grads();
    let mut value = 0.0;
    if let Some(b) = indexing {
        value += evaluate_indexing(params, b, &coef, weights, Some(&mut grads))?.weighted(&coef);
    }
    if let Some(b) = retrieval {
        value += evaluate_retrieval(params, b, &coef, weights, Some(&mut grads))?.weighted(&coef);
    }
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{} = {value}", objective.name())));
    }
    Ok((value, grads))
}

/// Token-level noisy documents and pseudo-queries keyed by source doc_key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingStores {
    pub noisy: BTreeMap<String, Vec<Vec<u32>>>,
    pub queries: BTreeMap<String, Vec<Vec<u32>>>,
}

/// Where a [`BatchStream`] stands; enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPosition {
    pub epoch: u64,
    pub chunk: usize,
    pub next: BatchKind,
}

/// Alternating indexing/retrieval batches over seeded per-epoch shuffles.
///
/// Each chunk of `N` shuffled documents is emitted once as an indexing batch
/// and then as a retrieval batch. Docids are looked up in whatever table is
/// passed to [`BatchStream::next_batch`].
#[derive(Debug, Clone)]
pub struct BatchStream {
    seed: u64,
    batch_n: usize,
    use_noisy: bool,
    position: StreamPosition,
    chunks: Vec<Vec<usize>>,
}

impl BatchStream {
    pub fn new(corpus: &Corpus, stores: &TrainingStores, batch_n: usize, seed: u64, use_noisy: bool) -> Result<Self> {
        if batch_n < 2 {
            return Err(Error::Config("batch_n must be at least 2".into()));
        }
        if corpus.len() < 2 {
            return Err(Error::Config("contrastive batches need at least 2 documents".into()));
        }
        if stores.queries.is_empty() {
            return Err(Error::EmptyInput("pseudo-query store is empty".into()));
        }
        if use_noisy && stores.noisy.is_empty() {
            return Err(Error::EmptyInput("noisy-document store is empty".into()));
        }
        for doc in corpus.documents() {
            if stores.queries.get(&doc.doc_key).is_none_or(Vec::is_empty) {
                return Err(Error::EmptyInput(format!("no pseudo-queries for {}", doc.doc_key)));
            }
        }
        let position = StreamPosition {
            epoch: 0,
            chunk: 0,
            next: BatchKind::Indexing,
        };
        Ok(Self {
            seed,
            batch_n,
            use_noisy,
            chunks: epoch_chunks(corpus.len(), batch_n, seed, 0),
            position,
        })
    }

    pub fn position(&self) -> StreamPosition {
        self.position
    }

    pub fn seek(&mut self, corpus: &Corpus, position: StreamPosition) {
        self.chunks = epoch_chunks(corpus.len(), self.batch_n, self.seed, position.epoch);
        self.position = position;
    }

    pub fn next_batch(&mut self, corpus: &Corpus, table: &DocidTable, stores: &TrainingStores) -> Result<Batch> {
        let members = &self.chunks[self.position.chunk];
        let docs: Vec<_> = members.iter().map(|&i| &corpus.documents()[i]).collect();
        let doc_keys: Vec<String> = docs.iter().map(|d| d.doc_key.clone()).collect();
        let docids = doc_keys
            .iter()
            .map(|k| table.docid(k).cloned().ok_or_else(|| Error::UnknownDocKey(k.clone())))
            .collect::<Result<Vec<_>>>()?;
        let batch = match self.position.next {
            BatchKind::Indexing => Batch::Indexing(IndexingBatch {
                docs: docs.iter().map(|d| d.tokens.clone()).collect(),
                noisy: doc_keys
                    .iter()
                    .map(|k| match self.use_noisy {
                        true => stores.noisy.get(k).cloned().unwrap_or_default(),
                        false => Vec::new(),
                    })
                    .collect(),
                doc_keys,
                docids,
            }),
            BatchKind::Retrieval => Batch::Retrieval(RetrievalBatch {
                queries: doc_keys
                    .iter()
                    .map(|k| stores.queries.get(k).cloned().unwrap_or_default())
                    .collect(),
                doc_keys,
                docids,
            }),
        };
        self.advance(corpus.len());
        Ok(batch)
    }

    fn advance(&mut self, n_docs: usize) {
        match self.position.next {
            BatchKind::Indexing => self.position.next = BatchKind::Retrieval,
            BatchKind::Retrieval => {
                self.position.next = BatchKind::Indexing;
                self.position.chunk += 1;
                if self.position.chunk == self.chunks.len() {
                    self.position.epoch += 1;
                    self.position.chunk = 0;
                    self.chunks = epoch_chunks(n_docs, self.batch_n, self.seed, self.position.epoch);
                }
            }
        }
    }
}

/// Shuffled document indices for one epoch, cut into chunks of `batch_n`.
/// A trailing singleton joins the previous chunk.
pub fn epoch_chunks(n_docs: usize, batch_n: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_docs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    order.shuffle(&mut rng);
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_n).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let last = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(last);
    }
    chunks
}
