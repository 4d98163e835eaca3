//! Hits@K / MRR@K, ablation and iteration-sweep harnesses, embedding export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objectives::TrainingStores;
use crate::pq::DocidTable;
use crate::retrieval::{constrained_beam_search, exhaustive_rank, PrefixTrie, RankedList, StepNormalization};
use crate::trainer::{finetune, initialize, run_bootstrap, FinetuneConfig, TrainConfig, TrainState};

/// 1 if `relevant` is within the top `k`, else 0.
pub fn hits_at_k(ranked: &RankedList, relevant: &str, k: usize) -> f64 {
    match ranked.rank_of(relevant) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1/rank` if `relevant` is within the top `k`, else 0.
pub fn mrr_at_k(ranked: &RankedList, relevant: &str, k: usize) -> f64 {
    match ranked.rank_of(relevant) {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

/// query_id → relevant doc_key.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QRels(pub BTreeMap<String, String>);

impl QRels {
    pub fn from_queries(queries: &[Query]) -> Self {
        QRels(
            queries
                .iter()
                .filter_map(|q| Some((q.query_id.clone(), q.relevant.clone()?)))
                .collect(),
        )
    }

    /// Reads a TSV of `query_id`, `doc_key`.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut out = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 {
                return Err(Error::Malformed {
                    line: i + 1,
                    message: format!("expected query_id<TAB>doc_key, got {} columns", cols.len()),
                });
            }
            out.insert(cols[0].to_string(), cols[1].to_string());
        }
        Ok(QRels(out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (q, d) in &self.0 {
            s.push_str(&format!("{q}\t{d}\n"));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        match self.0.values().find(|d| corpus.get(d).is_none()) {
            Some(d) => Err(Error::UnknownDocKey(d.clone())),
            None => Ok(()),
        }
    }
}

/// How a query is turned into a ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ranker {
    Beam { width: usize, mode: StepNormalization },
    Exhaustive { mode: StepNormalization },
}

impl Default for Ranker {
    fn default() -> Self {
        Ranker::Beam {
            width: crate::retrieval::DEFAULT_BEAM,
            mode: StepNormalization::Renormalized,
        }
    }
}

impl Ranker {
    pub fn rank(
        &self,
        params: &ModelParams,
        table: &DocidTable,
        trie: &PrefixTrie,
        query: &[u32],
    ) -> Result<RankedList> {
        match *self {
            Ranker::Beam { width, mode } => constrained_beam_search(params, query, trie, width, mode),
            Ranker::Exhaustive { mode } => exhaustive_rank(params, query, table, mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub query_id: String,
    pub relevant: String,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub hits_at_1: f64,
    pub hits_at_10: f64,
    pub mrr_at_3: f64,
    pub mrr_at_20: f64,
    pub rows: Vec<QueryResult>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "queries,hits@1,hits@10,mrr@3,mrr@20";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.queries, self.hits_at_1, self.hits_at_10, self.mrr_at_3, self.mrr_at_20
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn summary(&self) -> String {
        format!(
            "queries={} Hits@1={:.4} Hits@10={:.4} MRR@3={:.4} MRR@20={:.4}",
            self.queries, self.hits_at_1, self.hits_at_10, self.mrr_at_3, self.mrr_at_20
        )
    }

    /// Per-query detail: query_id, relevant doc_key, rank (empty when not retrieved).
    pub fn rows_tsv(&self) -> String {
        let mut s = String::from("query_id\trelevant\trank\n");
        for r in &self.rows {
            let rank = r.rank.map(|x| x.to_string()).unwrap_or_default();
            s.push_str(&format!("{}\t{}\t{rank}\n", r.query_id, r.relevant));
        }
        s
    }

    fn from_rankings(rows: Vec<(QueryResult, RankedList)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("no queries to evaluate".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&RankedList, &str) -> f64| rows.iter().map(|(q, r)| f(r, &q.relevant)).sum::<f64>() / n;
        Ok(Self {
            queries: rows.len(),
            hits_at_1: mean(&|r, d| hits_at_k(r, d, 1)),
            hits_at_10: mean(&|r, d| hits_at_k(r, d, 10)),
            mrr_at_3: mean(&|r, d| mrr_at_k(r, d, 3)),
            mrr_at_20: mean(&|r, d| mrr_at_k(r, d, 20)),
            rows: rows.into_iter().map(|(q, _)| q).collect(),
        })
    }
}

/// Decodes every query and averages the per-query metrics.
pub fn evaluate(
    params: &ModelParams,
    table: &DocidTable,
    queries: &[Query],
    qrels: &QRels,
    ranker: Ranker,
) -> Result<MetricsReport> {
    let trie = PrefixTrie::build(table);
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let relevant = qrels
            .0
            .get(&q.query_id)
            .ok_or_else(|| Error::EmptyInput(format!("no relevance judgment for query {}", q.query_id)))?;
        if table.docid(relevant).is_none() {
            return Err(Error::UnknownDocKey(relevant.clone()));
        }
        let ranked = ranker.rank(params, table, &trie, &q.tokens)?;
        for e in &ranked.entries {
            debug_assert!(table.doc_key(&e.docid).is_some());
        }
        rows.push((
            QueryResult {
                query_id: q.query_id.clone(),
                relevant: relevant.clone(),
                rank: ranked.rank_of(relevant),
            },
            ranked,
        ));
    }
    MetricsReport::from_rankings(rows)
}

pub fn evaluate_state(state: &TrainState, queries: &[Query], qrels: &QRels, ranker: Ranker) -> Result<MetricsReport> {
    evaluate(&state.params, &state.table, queries, qrels, ranker)
}

/// The full model and the ablated configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    FullMt,
    WithoutDynamicIdentifiers,
    FullBs,
    WithoutPretraining,
    WithoutRetrievalPrediction,
    WithoutCorpusIndexing,
    WithoutNoisyDocuments,
    WithoutContrastiveLosses,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::FullMt,
        Variant::WithoutDynamicIdentifiers,
        Variant::FullBs,
        Variant::WithoutPretraining,
        Variant::WithoutRetrievalPrediction,
        Variant::WithoutCorpusIndexing,
        Variant::WithoutNoisyDocuments,
        Variant::WithoutContrastiveLosses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullMt => "full_mt",
            Variant::WithoutDynamicIdentifiers => "wo_dynamic_identifiers",
            Variant::FullBs => "full_bs",
            Variant::WithoutPretraining => "wo_pretraining",
            Variant::WithoutRetrievalPrediction => "wo_retrieval_prediction",
            Variant::WithoutCorpusIndexing => "wo_corpus_indexing",
            Variant::WithoutNoisyDocuments => "wo_noisy_documents",
            Variant::WithoutContrastiveLosses => "wo_contrastive_losses",
        }
    }

    /// Training configuration for the variants that run their own pre-training.
    fn train_config(self, base: &TrainConfig) -> Option<TrainConfig> {
        let mut c = base.clone();
        let one_iteration = |c: &mut TrainConfig| c.schedule.max_iterations = 1;
        match self {
            Variant::FullMt | Variant::FullBs | Variant::WithoutPretraining => return None,
            Variant::WithoutDynamicIdentifiers => c.dynamic_docids = false,
            Variant::WithoutRetrievalPrediction => {
                one_iteration(&mut c);
                c.weights.rho = 0.0;
            }
            Variant::WithoutCorpusIndexing => {
                one_iteration(&mut c);
                c.weights.gamma = 0.0;
            }
            Variant::WithoutNoisyDocuments => {
                one_iteration(&mut c);
                c.use_noisy = false;
            }
            Variant::WithoutContrastiveLosses => {
                one_iteration(&mut c);
                c.weights.alpha = 0.0;
                c.weights.beta = 0.0;
                c.weights.rho = 0.0;
            }
        }
        Some(c)
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub seeds: Vec<u64>,
    pub ranker: Ranker,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Runs every [`Variant`] per seed: pre-train, fine-tune on `labeled`, and
/// evaluate on `eval_queries`.
pub fn run_ablation(
    corpus: &Corpus,
    stores: &TrainingStores,
    labeled: &[Query],
    eval_queries: &[Query],
    qrels: &QRels,
    config: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let base = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let ft = FinetuneConfig {
            seed,
            ..config.finetune.clone()
        };
        let full = run_bootstrap(corpus, stores, &base, |_| Ok(()))?;
        for variant in Variant::ALL {
            let pretrained = match variant {
                Variant::FullMt => full.mt.clone(),
                Variant::FullBs => full.bs.clone(),
                Variant::WithoutPretraining => initialize(corpus, &base)?,
                other => {
                    let cfg = other.train_config(&base).expect("pre-training variant");
                    run_bootstrap(corpus, stores, &cfg, |_| Ok(()))?.mt
                }
            };
            let (tuned, _) = finetune(&pretrained, corpus, labeled, &ft, base.update_rule)?;
            let report = evaluate_state(&tuned, eval_queries, qrels, config.ranker)?;
            log::info!("seed {seed} {}: {}", variant.name(), report.summary());
            rows.push(AblationRow {
                variant: variant.name(),
                seed,
                report,
            });
        }
    }
    Ok(rows)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per (variant, seed), then one `mean±stdev` row per variant.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,hits@1,hits@10,mrr@3,mrr@20\n");
    for r in rows {
        let m = &r.report;
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant, r.seed, m.hits_at_1, m.hits_at_10, m.mrr_at_3, m.mrr_at_20
        ));
    }
    for v in Variant::ALL {
        let of: Vec<&MetricsReport> = rows
            .iter()
            .filter(|r| r.variant == v.name())
            .map(|r| &r.report)
            .collect();
        if of.is_empty() {
            continue;
        }
        let cell = |f: fn(&MetricsReport) -> f64| {
            let (m, sd) = mean_std(&of.iter().map(|r| f(r)).collect::<Vec<_>>());
            format!("{m:.6}±{sd:.6}")
        };
        s.push_str(&format!(
            "{},mean,{},{},{},{}\n",
            v.name(),
            cell(|r| r.hits_at_1),
            cell(|r| r.hits_at_10),
            cell(|r| r.mrr_at_3),
            cell(|r| r.mrr_at_20)
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub iteration: usize,
    pub global_step: usize,
    pub report: MetricsReport,
}

/// Evaluates the snapshot at the end of every iteration of one run.
pub fn iteration_sweep(
    corpus: &Corpus,
    stores: &TrainingStores,
    config: &TrainConfig,
    eval_queries: &[Query],
    qrels: &QRels,
    ranker: Ranker,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::new();
    run_bootstrap(corpus, stores, config, |state| {
        let report = evaluate_state(state, eval_queries, qrels, ranker)?;
        log::info!("iteration {}: {}", state.iteration, report.summary());
        points.push(SweepPoint {
            iteration: state.iteration,
            global_step: state.global_step,
            report,
        });
        Ok(())
    })?;
    Ok(points)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("iteration,global_step,hits@1,hits@10,mrr@3,mrr@20\n");
    for p in points {
        let m = &p.report;
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            p.iteration, p.global_step, m.hits_at_1, m.hits_at_10, m.mrr_at_3, m.mrr_at_20
        ));
    }
    s
}

/// Writes `key<TAB>v1<TAB>…<TAB>vD` rows of encoder outputs.
pub fn export_embeddings(params: &ModelParams, items: &[(String, Vec<u32>)], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (key, tokens) in items {
        let v = params.encode(tokens)?.doc_vector;
        let cols: Vec<String> = v.iter().map(f64::to_string).collect();
        writeln!(w, "{key}\t{}", cols.join("\t")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A stored (key, vector) row as written by [`export_embeddings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub key: String,
    pub vector: Vec<f64>,
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let mut cols = line.split('\t');
            let key = cols.next().unwrap_or_default().to_string();
            let vector = cols
                .map(|c| {
                    c.parse::<f64>().map_err(|e| Error::Malformed {
                        line: i + 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(EmbeddingRow { key, vector })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pq::Docid;
    use crate::retrieval::RankedEntry;

    fn ranked(keys: &[&str]) -> RankedList {
        RankedList {
            entries: keys
                .iter()
                .enumerate()
                .map(|(i, k)| RankedEntry {
                    doc_key: k.to_string(),
                    docid: Docid::new(vec![i as u32], 64).unwrap(),
                    log_likelihood: -(i as f64),
                })
                .collect(),
        }
    }

    #[test]
    fn hits_examples() {
        let keys: Vec<String> = (0..12).map(|i| format!("d{i}")).collect();
        let refs: Vec<&str> = keys.iter().map(String::as_str).collect();
        let r = ranked(&refs);
        assert_eq!(hits_at_k(&r, "d0", 1), 1.0);
        assert_eq!(hits_at_k(&r, "d10", 10), 0.0);
        assert_eq!(hits_at_k(&r, "zz", 10), 0.0);
    }

    #[test]
    fn mrr_examples() {
        let r = ranked(&["a", "b", "c", "d"]);
        assert_eq!(mrr_at_k(&r, "b", 3), 0.5);
        assert_eq!(mrr_at_k(&r, "d", 3), 0.0);
        assert_eq!(mrr_at_k(&r, "a", 3), 1.0);
    }

    #[test]
    fn aggregate_example() {
        let rows = vec![
            (
                QueryResult {
                    query_id: "q1".into(),
                    relevant: "a".into(),
                    rank: Some(1),
                },
                ranked(&["a", "b"]),
            ),
            (
                QueryResult {
                    query_id: "q2".into(),
                    relevant: "b".into(),
                    rank: Some(2),
                },
                ranked(&["a", "b"]),
            ),
        ];
        let m = MetricsReport::from_rankings(rows).unwrap();
        assert_eq!(m.hits_at_1, 0.5);
        assert_eq!(m.mrr_at_3, 0.75);
    }

    #[test]
    fn stdev_is_sample_stdev() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
