//! Bootstrapped pre-training: alternate parameter updates under frozen docids
//! with docid refreshes from the updated encoder, then MLE fine-tuning.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{derive_seed, rule_queries, GenerationKind};
use crate::corpus::{tokenize_capped, Corpus, IdfTable, Query, DEFAULT_MAX_QUERY_TOKENS};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, UpdateRule};
use crate::objectives::{
    batch_gradients, Batch, BatchKind, BatchStream, LossBreakdown, LossWeights, RetrievalBatch, StreamPosition,
    TermCoefficients, TrainingStores,
};
use crate::pq::{
    build_docid_table, encode_corpus, read_json, train_codebook, update_docids, write_json, Codebook, DocidTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationSchedule {
    pub total_steps: usize,
    pub first_refresh_step: usize,
    pub refresh_every: usize,
    pub learning_rate: f64,
    pub batch_n: usize,
    pub max_iterations: usize,
}

impl Default for IterationSchedule {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            first_refresh_step: 500,
            refresh_every: 300,
            learning_rate: 3e-3,
            batch_n: 8,
            max_iterations: 7,
        }
    }
}

impl IterationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.first_refresh_step == 0 || self.first_refresh_step > self.total_steps {
            return Err(Error::Config(format!(
                "first_refresh_step must be in 1..={}, got {}",
                self.total_steps, self.first_refresh_step
            )));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("refresh_every must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        if self.batch_n < 2 {
            return Err(Error::Config("batch_n must be at least 2".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("invalid learning_rate {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Optimizer steps of each pre-training iteration, in order.
    pub fn iteration_steps(&self) -> Vec<usize> {
        let mut out = vec![self.first_refresh_step.min(self.total_steps)];
        let mut done = out[0];
        while done < self.total_steps && out.len() < self.max_iterations {
            let n = self.refresh_every.min(self.total_steps - done);
            out.push(n);
            done += n;
        }
        out
    }

    /// Docid refreshes between iterations.
    pub fn refreshes(&self) -> usize {
        self.iteration_steps().len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub groups: usize,
    pub clusters: usize,
    pub weights: LossWeights,
    pub schedule: IterationSchedule,
    pub update_rule: UpdateRule,
    pub warm_start: bool,
    pub reset_optimizer_on_refresh: bool,
    pub use_noisy: bool,
    /// Skip refreshes entirely (fixed-docid baseline).
    pub dynamic_docids: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            groups: 8,
            clusters: 16,
            weights: LossWeights::default(),
            schedule: IterationSchedule::default(),
            update_rule: UpdateRule::Adam,
            warm_start: true,
            reset_optimizer_on_refresh: false,
            use_noisy: true,
            dynamic_docids: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            groups: self.groups,
            clusters: self.clusters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.schedule.validate()?;
        self.model_config(crate::corpus::RESERVED.len() + 1).validate()
    }
}

/// Everything a run needs to continue exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub codebook: Codebook,
    pub table: DocidTable,
    /// Completed pre-training iterations.
    pub iteration: usize,
    pub global_step: usize,
    /// Steps already run inside the current iteration.
    pub iteration_step: usize,
    pub stream: StreamPosition,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    iteration: usize,
    global_step: usize,
    iteration_step: usize,
    stream: StreamPosition,
}

impl TrainState {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("model.ckpt"))?;
        self.codebook.save(&dir.join("codebook.json"))?;
        self.table.save(&dir.join("docids.json"))?;
        write_json(
            &dir.join("state.json"),
            &StateHeader {
                iteration: self.iteration,
                global_step: self.global_step,
                iteration_step: self.iteration_step,
                stream: self.stream,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: StateHeader = read_json(&dir.join("state.json"))?;
        Ok(Self {
            params: ModelParams::load(&dir.join("model.ckpt"))?,
            codebook: Codebook::load(&dir.join("codebook.json"))?,
            table: DocidTable::load(&dir.join("docids.json"))?,
            iteration: header.iteration,
            global_step: header.global_step,
            iteration_step: header.iteration_step,
            stream: header.stream,
        })
    }
}

/// θ⁰ and the initial docids derived from its encoder.
pub fn initialize(corpus: &Corpus, config: &TrainConfig) -> Result<TrainState> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.validate()?;
    let params = ModelParams::init(config.model_config(corpus.vocab().len()), config.seed)?;
    let vectors = encode_corpus(corpus, &params)?;
    let codebook = train_codebook(&vectors, config.groups, config.clusters, config.seed, None)?;
    let table = build_docid_table(corpus, &params, &codebook)?;
    Ok(TrainState {
        params,
        codebook,
        table,
        iteration: 0,
        global_step: 0,
        iteration_step: 0,
        stream: StreamPosition {
            epoch: 0,
            chunk: 0,
            next: BatchKind::Indexing,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTraceRow {
    pub step: usize,
    pub iteration: usize,
    pub batch: BatchKind,
    pub terms: LossBreakdown,
    pub total: f64,
}

pub fn write_loss_trace(path: &Path, rows: &[LossTraceRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "step,iteration,batch_type,l_sc,l_c1,l_c2,l_rp,l_id,l_re,total").map_err(io)?;
    for r in rows {
        let t = &r.terms;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.iteration,
            r.batch.as_str(),
            t.sc,
            t.c1,
            t.c2,
            t.rp,
            t.id,
            t.re,
            r.total
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Runs `steps` optimizer steps of the joint objective with docids frozen.
/// Stops early (leaving the iteration open) after `limit` steps when given.
fn run_steps(
    state: &mut TrainState,
    corpus: &Corpus,
    stores: &TrainingStores,
    config: &TrainConfig,
    steps: usize,
    limit: Option<usize>,
    trace: &mut Vec<LossTraceRow>,
) -> Result<bool> {
    let mut stream = BatchStream::new(corpus, stores, config.schedule.batch_n, config.seed, config.use_noisy)?;
    stream.seek(corpus, state.stream);
    let coef = TermCoefficients::pretraining(&config.weights);
    let mut budget = limit.unwrap_or(usize::MAX);
    while state.iteration_step < steps {
        if budget == 0 {
            state.stream = stream.position();
            return Ok(false);
        }
        budget -= 1;
        let batch = stream.next_batch(corpus, &state.table, stores)?;
        let (terms, grads) = batch_gradients(&state.params, &batch, &coef, &config.weights)
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", state.global_step + 1)))?;
        let total = terms.weighted(&coef);
        state
            .params
            .optimizer_step(&grads, config.schedule.learning_rate, config.update_rule)
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", state.global_step + 1)))?;
        state.global_step += 1;
        state.iteration_step += 1;
        trace.push(LossTraceRow {
            step: state.global_step,
            iteration: state.iteration + 1,
            batch: batch.kind(),
            terms,
            total,
        });
    }
    state.stream = stream.position();
    Ok(true)
}

/// One pre-training iteration of `steps` optimizer steps under the current
/// docid table. The table is not touched.
pub fn pretrain_iteration(
    state: &mut TrainState,
    corpus: &Corpus,
    stores: &TrainingStores,
    config: &TrainConfig,
    steps: usize,
    trace: &mut Vec<LossTraceRow>,
) -> Result<()> {
    run_steps(state, corpus, stores, config, steps, None, trace)?;
    state.iteration += 1;
    state.iteration_step = 0;
    Ok(())
}

/// A document whose docid changed at a refresh.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocidChange {
    pub doc_key: String,
    pub old: Vec<u32>,
    pub new: Vec<u32>,
}

/// Re-derives docids from the current encoder and returns what changed.
pub fn bootstrap_refresh(state: &mut TrainState, corpus: &Corpus, config: &TrainConfig) -> Result<Vec<DocidChange>> {
    if state.iteration == 0 {
        return Err(Error::Config(
            "refresh requires at least one completed iteration".into(),
        ));
    }
    let seed = config.seed ^ (state.iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let (codebook, mut table) = update_docids(corpus, &state.params, &state.codebook, seed, config.warm_start)?;
    table.iteration_tag = state.iteration as u64;
    let changes = state
        .table
        .iter()
        .filter_map(|(key, old)| {
            let new = table.docid(key)?;
            (new != old).then(|| DocidChange {
                doc_key: key.to_string(),
                old: old.codes().to_vec(),
                new: new.codes().to_vec(),
            })
        })
        .collect();
    state.codebook = codebook;
    state.table = table;
    if config.reset_optimizer_on_refresh {
        state.params.reset_optimizer();
    }
    Ok(changes)
}

pub fn write_change_log(path: &Path, changes: &[DocidChange]) -> Result<()> {
    let fmt = |c: &[u32]| c.iter().map(u32::to_string).collect::<Vec<_>>().join("-");
    let mut out = String::from("doc_key\told_codes\tnew_codes\n");
    for c in changes {
        out.push_str(&format!("{}\t{}\t{}\n", c.doc_key, fmt(&c.old), fmt(&c.new)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub steps: usize,
    pub end_step: usize,
    pub table_fingerprint: u64,
    /// Documents whose docid changed at the refresh after this iteration.
    pub changed_docs: Option<usize>,
}

/// Output of a complete bootstrap run.
#[derive(Debug, Clone)]
pub struct BootstrapRun {
    /// State after the first iteration, before any refresh.
    pub bs: TrainState,
    /// State after the last iteration.
    pub mt: TrainState,
    pub reports: Vec<IterationReport>,
    pub changes: Vec<Vec<DocidChange>>,
    pub trace: Vec<LossTraceRow>,
}

/// initialize → (pretrain_iteration → refresh)* → final iteration.
///
/// `on_iteration` sees the state at the end of every iteration, before the
/// refresh that may follow it.
pub fn run_bootstrap(
    corpus: &Corpus,
    stores: &TrainingStores,
    config: &TrainConfig,
    mut on_iteration: impl FnMut(&TrainState) -> Result<()>,
) -> Result<BootstrapRun> {
    let state = initialize(corpus, config)?;
    resume_bootstrap(state, corpus, stores, config, None, &mut on_iteration).map(|r| r.expect("no step limit"))
}

/// Continues a run from `state`. With `step_limit`, stops after that many
/// optimizer steps and returns `None` along with the paused state in `paused`.
///
/// A run resumed after its first iteration has no record of that snapshot;
/// its `bs` is then the final state. Keep the paused run's `iter-01` instead.
pub fn resume_bootstrap(
    mut state: TrainState,
    corpus: &Corpus,
    stores: &TrainingStores,
    config: &TrainConfig,
    step_limit: Option<(usize, &mut Option<TrainState>)>,
    on_iteration: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<Option<BootstrapRun>> {
    config.validate()?;
    let plan = config.schedule.iteration_steps();
    let mut trace = Vec::new();
    let mut reports = Vec::new();
    let mut changes = Vec::new();
    let mut bs = None;
    let (mut limit, paused) = match step_limit {
        Some((n, slot)) => (Some(n), Some(slot)),
        None => (None, None),
    };
    while state.iteration < plan.len() {
        let steps = plan[state.iteration];
        let before = state.iteration_step;
        let finished = run_steps(&mut state, corpus, stores, config, steps, limit, &mut trace)?;
        if let Some(l) = limit.as_mut() {
            *l -= state.iteration_step - before;
        }
        if !finished {
            if let Some(slot) = paused {
                *slot = Some(state);
            }
            return Ok(None);
        }
        state.iteration += 1;
        state.iteration_step = 0;
        on_iteration(&state)?;
        if state.iteration == 1 {
            bs = Some(state.clone());
        }
        let mut report = IterationReport {
            iteration: state.iteration,
            steps,
            end_step: state.global_step,
            table_fingerprint: state.table.fingerprint(),
            changed_docs: None,
        };
        if state.iteration < plan.len() && config.dynamic_docids {
            let c = bootstrap_refresh(&mut state, corpus, config)?;
            log::info!("iteration {}: {} docids changed", state.iteration, c.len());
            report.changed_docs = Some(c.len());
            changes.push(c);
        }
        reports.push(report);
    }
    let bs = bs.unwrap_or_else(|| state.clone());
    Ok(Some(BootstrapRun {
        bs,
        mt: state,
        reports,
        changes,
        trace,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pseudo_queries_per_doc: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 3e-3,
            batch_size: 16,
            pseudo_queries_per_doc: 10,
            seed: 0,
        }
    }
}

/// MLE fine-tuning on document-docid pairs, labeled query-docid pairs and
/// generated pseudo-queries. The docid table is left as is.
///
/// With no labeled queries the pre-trained state is returned unchanged.
pub fn finetune(
    state: &TrainState,
    corpus: &Corpus,
    labeled: &[Query],
    config: &FinetuneConfig,
    update_rule: UpdateRule,
) -> Result<(TrainState, Vec<LossTraceRow>)> {
    let mut examples: Vec<(Vec<u32>, String)> = Vec::new();
    for q in labeled {
        if let Some(key) = &q.relevant {
            if corpus.get(key).is_none() {
                return Err(Error::UnknownDocKey(key.clone()));
            }
            examples.push((q.tokens.clone(), key.clone()));
        }
    }
    if examples.is_empty() {
        log::info!("no labeled queries, keeping the pre-trained model");
        return Ok((state.clone(), Vec::new()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("finetune batch_size must be positive".into()));
    }
    let idf = IdfTable::from_corpus(corpus);
    for doc in corpus.documents() {
        examples.push((doc.tokens.clone(), doc.doc_key.clone()));
        if config.pseudo_queries_per_doc > 0 {
            let seed = derive_seed(config.seed ^ 0xF1, &doc.doc_key, GenerationKind::PseudoQuery);
            for text in rule_queries(doc, corpus.vocab(), &idf, config.pseudo_queries_per_doc, seed)? {
                examples.push((
                    tokenize_capped(&text, corpus.vocab(), DEFAULT_MAX_QUERY_TOKENS),
                    doc.doc_key.clone(),
                ));
            }
        }
    }
    let mut out = state.clone();
    let mut trace = Vec::with_capacity(config.steps);
    let coef = TermCoefficients::mle_only();
    let weights = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=config.steps {
        if order.len() < config.batch_size {
            let mut fresh: Vec<usize> = (0..examples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picked: Vec<usize> = order.drain(..config.batch_size.min(examples.len())).collect();
        let batch = RetrievalBatch {
            doc_keys: picked.iter().map(|&i| examples[i].1.clone()).collect(),
            queries: picked.iter().map(|&i| vec![examples[i].0.clone()]).collect(),
            docids: picked
                .iter()
                .map(|&i| {
                    out.table
                        .docid(&examples[i].1)
                        .cloned()
                        .ok_or_else(|| Error::UnknownDocKey(examples[i].1.clone()))
                })
                .collect::<Result<_>>()?,
        };
        let batch = Batch::Retrieval(batch);
        let (terms, grads) = batch_gradients(&out.params, &batch, &coef, &weights)?;
        out.params.optimizer_step(&grads, config.learning_rate, update_rule)?;
        trace.push(LossTraceRow {
            step,
            iteration: out.iteration,
            batch: BatchKind::Retrieval,
            terms,
            total: terms.weighted(&coef),
        });
    }
    Ok((out, trace))
}
