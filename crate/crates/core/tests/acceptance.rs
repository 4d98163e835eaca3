//! End-to-end acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{max_relative_error, tiny_batches, tiny_config};
use genret::augment::{augment_corpus, AugmentConfig};
use genret::corpus::{Corpus, Query};
use genret::evaluation::{
    ablation_csv, evaluate_state, hits_at_k, iteration_sweep, mrr_at_k, run_ablation, sweep_csv, AblationConfig, QRels,
    Ranker, Variant,
};
use genret::model::{ModelConfig, ModelParams, Weights};
use genret::objectives::{
    backward, evaluate_batch, loss_contrastive_indexing, loss_contrastive_noisy, loss_mle_indexing, loss_mle_retrieval,
    loss_relevance_prediction, loss_semantic_consistency, Batch, LossWeights, Objective, TrainingStores,
    NOISE_VARIANTS,
};
use genret::pq::{assign_docid, build_docid_table, encode_corpus, train_codebook, Codebook, Docid, DocidTable};
use genret::retrieval::{
    constrained_beam_search, exhaustive_rank, PrefixTrie, RankedEntry, RankedList, StepNormalization,
};
use genret::toy::{toy_corpus, toy_eval_queries, TOY_QUERY_SEED};
use genret::trainer::{
    finetune, initialize, resume_bootstrap, run_bootstrap, write_loss_trace, FinetuneConfig, IterationSchedule,
    TrainConfig, TrainState,
};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn report(line: &str) {
    // straight to the handle so the line survives libtest output capture
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

fn criterion(n: usize, name: &str, check: impl FnOnce() -> String) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check));
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            report(&format!("PASS criterion {n:>2} {name} ({secs:.1}s): {detail}"));
            true
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            report(&format!(
                "FAIL criterion {n:>2} {name} ({secs:.1}s): {}",
                msg.replace('\n', " ")
            ));
            false
        }
    }
}

struct Toy {
    corpus: Corpus,
    stores: TrainingStores,
    eval: Vec<Query>,
    qrels: QRels,
    labeled: Vec<Query>,
}

fn toy() -> Toy {
    let corpus = toy_corpus().unwrap();
    let stores = augment_corpus(&corpus, &AugmentConfig::default(), None)
        .unwrap()
        .stores();
    let eval = toy_eval_queries(&corpus, 1, TOY_QUERY_SEED).unwrap();
    let qrels = QRels::from_queries(&eval);
    let labeled = toy_eval_queries(&corpus, 1, TOY_QUERY_SEED ^ 0x5EED).unwrap();
    Toy {
        corpus,
        stores,
        eval,
        qrels,
        labeled,
    }
}

fn schedule(total: usize, first: usize, every: usize, max_iterations: usize) -> IterationSchedule {
    IterationSchedule {
        total_steps: total,
        first_refresh_step: first,
        refresh_every: every,
        max_iterations,
        ..IterationSchedule::default()
    }
}

// 1 ------------------------------------------------------------------------

fn gradients() -> String {
    let start = Instant::now();
    let params = ModelParams::init(tiny_config(3), 5).unwrap();
    let (ib, rb) = tiny_batches(2, 2, 3, 9);
    let weights = LossWeights::default();
    let mut worst = Vec::new();
    for objective in Objective::ALL {
        let (value, grads) = backward(&params, objective, Some(&ib), Some(&rb), &weights).unwrap();
        let coef = objective.coefficients(&weights);
        let loss = |p: &ModelParams| {
            let a = evaluate_batch(p, &Batch::Indexing(ib.clone()), &coef, &weights).unwrap();
            let b = evaluate_batch(p, &Batch::Retrieval(rb.clone()), &coef, &weights).unwrap();
            a.weighted(&coef) + b.weighted(&coef)
        };
        assert!(
            (loss(&params) - value).abs() < 1e-12,
            "{} value mismatch",
            objective.name()
        );
        let err = max_relative_error(&params, &grads, loss);
        assert!(err < 1e-4, "{} max relative error {err:e}", objective.name());
        worst.push(format!("{}={err:.1e}", objective.name()));
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    format!("max relative error per loss: {}", worst.join(" "))
}

// 2 ------------------------------------------------------------------------

fn closed_forms() -> String {
    let (n, x) = (3usize, 2usize);
    let mut zero = ModelParams::init(tiny_config(3), 9).unwrap();
    zero.weights = Weights::zeros(&zero.config);
    let (ib, rb) = tiny_batches(n, x, 3, 4);
    let w = LossWeights::default();
    let ln_n = (n as f64).ln();
    let c1 = loss_contrastive_indexing(&zero, &ib, &w).unwrap();
    let c2 = loss_contrastive_noisy(&zero, &ib, &w).unwrap();
    let rp = loss_relevance_prediction(&zero, &rb, &w).unwrap();
    assert!((c1 - n as f64 * ln_n).abs() < 1e-9, "L_C1 {c1}");
    assert!((c2 - 4.0 * n as f64 * ln_n).abs() < 1e-9, "L_C2 {c2}");
    assert!((rp - (n * x) as f64 * ln_n).abs() < 1e-9, "L_RP {rp}");

    let params = ModelParams::init(tiny_config(3), 2).unwrap();
    let (mut same, _) = tiny_batches(3, 1, 3, 5);
    same.noisy = same.docs.iter().map(|d| vec![d.clone(); NOISE_VARIANTS]).collect();
    let sc = loss_semantic_consistency(&params, &same).unwrap();
    assert!(sc.abs() < 1e-12, "L_SC {sc}");

    let single = ModelParams::init(tiny_config(1), 19).unwrap();
    let (ib1, rb1) = tiny_batches(1, 3, 1, 20);
    let id = loss_mle_indexing(&single, &ib1).unwrap();
    let re = loss_mle_retrieval(&single, &rb1).unwrap();
    assert_eq!(id, 0.0);
    assert_eq!(re, 0.0);
    format!("L_C1={c1:.9} L_C2={c2:.9} L_RP={rp:.9} (N={n}, X={x}); L_SC={sc:.1e}; k=1 L_ID={id} L_RE={re}")
}

// 3 ------------------------------------------------------------------------

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn scan_nearest(cb: &Codebook, group: usize, v: &[f64]) -> u32 {
    let sub = &v[group * cb.subdim..(group + 1) * cb.subdim];
    let mut best = (0u32, f64::INFINITY);
    for c in 0..cb.clusters {
        let d = sq(sub, cb.centroid(group, c));
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best.0
}

fn lloyd_fixpoint(cb: &Codebook, vectors: &[Vec<f64>]) {
    for g in 0..cb.groups {
        let assign: Vec<u32> = vectors.iter().map(|v| scan_nearest(cb, g, v)).collect();
        for c in 0..cb.clusters {
            let members: Vec<&[f64]> = vectors
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a as usize == c)
                .map(|(v, _)| &v[g * cb.subdim..(g + 1) * cb.subdim])
                .collect();
            assert!(!members.is_empty(), "group {g} cluster {c} empty");
            for d in 0..cb.subdim {
                let mean = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                assert!(
                    (cb.centroid(g, c)[d] - mean).abs() < 1e-9,
                    "group {g} cluster {c} is not its mean"
                );
            }
        }
    }
}

fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn pq_oracle() -> String {
    let vectors = random_vectors(1000, 16, 2);
    let cb = train_codebook(&vectors, 8, 16, 3, None).unwrap();
    lloyd_fixpoint(&cb, &vectors);

    for probe in random_vectors(1000, 16, 6) {
        let id = assign_docid(&cb, &probe).unwrap();
        for g in 0..cb.groups {
            assert_eq!(
                id.codes()[g],
                scan_nearest(&cb, g, &probe),
                "probe disagrees in group {g}"
            );
        }
    }

    let corpus = toy_corpus().unwrap();
    let mut records: Vec<(String, String)> = corpus
        .documents()
        .iter()
        .map(|d| (d.doc_key.clone(), d.text.clone()))
        .collect();
    for i in 0..10 {
        let text = records[i * 7].1.clone();
        records.push((format!("dup{i}"), text));
    }
    records.push(("dup-again".into(), records[0].1.clone()));
    let dups = Corpus::from_records(records, 1, 512).unwrap();
    let params = ModelParams::init(
        ModelConfig {
            vocab_size: dups.vocab().len(),
            embed_dim: 16,
            hidden_dim: 32,
            groups: 4,
            clusters: 8,
        },
        4,
    )
    .unwrap();
    let cb = train_codebook(&encode_corpus(&dups, &params).unwrap(), 4, 8, 5, None).unwrap();
    let table = build_docid_table(&dups, &params, &cb).unwrap();
    assert_eq!(table.len(), dups.len());
    let mut seen = BTreeSet::new();
    for doc in dups.documents() {
        let id = table.docid(&doc.doc_key).unwrap();
        assert_eq!(table.doc_key(id), Some(doc.doc_key.as_str()));
        assert!(seen.insert(id.clone()), "docid {id} assigned twice");
    }
    format!(
        "Lloyd conditions hold on 1000 vectors (g=8, k=16); 1000 probes match the scan; bijection over {} docs with 11 duplicates",
        dups.len()
    )
}

// 4 ------------------------------------------------------------------------

fn random_table(n: usize, groups: usize, clusters: usize, seed: u64) -> DocidTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = clusters.pow(groups as u32);
    let entries = index::sample(&mut rng, space, n)
        .into_iter()
        .enumerate()
        .map(|(i, mut code)| {
            let mut codes = vec![0u32; groups];
            for t in (0..groups).rev() {
                codes[t] = (code % clusters) as u32;
                code /= clusters;
            }
            (format!("doc{i:02}"), Docid::new(codes, clusters).unwrap())
        });
    DocidTable::from_entries(groups, clusters, entries, 0).unwrap()
}

fn decoding_oracle() -> String {
    let mut compared = 0;
    for (n, groups, clusters) in [(16usize, 3usize, 4usize), (32, 4, 4), (64, 4, 8)] {
        let table = random_table(n, groups, clusters, n as u64);
        let trie = PrefixTrie::build(&table);
        let mut params = ModelParams::init(
            ModelConfig {
                vocab_size: 40,
                embed_dim: 6,
                hidden_dim: 2 * groups,
                groups,
                clusters,
            },
            n as u64 + 1,
        )
        .unwrap();
        for w in params.weights.out_w.iter_mut() {
            w.as_mut_slice().iter_mut().for_each(|x| *x *= 25.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64 + 2);
        for _ in 0..25 {
            let len = rng.random_range(1..6);
            let q: Vec<u32> = (0..len).map(|_| rng.random_range(5..40)).collect();
            for mode in [StepNormalization::Renormalized, StepNormalization::Masked] {
                let beam = constrained_beam_search(&params, &q, &trie, n, mode).unwrap();
                let full = exhaustive_rank(&params, &q, &table, mode).unwrap();
                assert_eq!(beam, full, "n={n} {mode:?}");
                assert_eq!(full.entries.len(), n);
                // tie rule: descending score, then ascending code sequence
                assert!(full.entries.windows(2).all(|w| {
                    w[0].log_likelihood > w[1].log_likelihood
                        || (w[0].log_likelihood == w[1].log_likelihood && w[0].docid.codes() < w[1].docid.codes())
                }));
                if mode == StepNormalization::Masked {
                    for e in &full.entries {
                        assert_eq!(
                            e.log_likelihood,
                            params.score_docid(&q, e.docid.codes()).unwrap().log_likelihood
                        );
                    }
                }
                compared += 1;
            }
        }
    }

    let corpus = toy_corpus().unwrap();
    let state = initialize(&corpus, &TrainConfig::default()).unwrap();
    let trie = PrefixTrie::build(&state.table);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let vocab = corpus.vocab().len() as u32;
    for _ in 0..1000 {
        let len = rng.random_range(1..8);
        let q: Vec<u32> = (0..len).map(|_| rng.random_range(5..vocab)).collect();
        let list = constrained_beam_search(&state.params, &q, &trie, 20, StepNormalization::Renormalized).unwrap();
        assert_eq!(list.entries.len(), 20);
        for e in &list.entries {
            assert_eq!(
                state.table.doc_key(&e.docid),
                Some(e.doc_key.as_str()),
                "decoded docid outside the table"
            );
        }
    }
    format!(
        "{compared} beam/exhaustive comparisons identical on 16/32/64 docs; 1000 queries at beam 20 stay in the table"
    )
}

// 5 ------------------------------------------------------------------------

fn metrics() -> String {
    let list = RankedList {
        entries: (0..12)
            .map(|i| RankedEntry {
                doc_key: format!("d{i}"),
                docid: Docid::new(vec![i], 64).unwrap(),
                log_likelihood: -(i as f64),
            })
            .collect(),
    };
    assert_eq!(hits_at_k(&list, "d0", 1), 1.0);
    assert_eq!(hits_at_k(&list, "d10", 10), 0.0);
    assert_eq!(hits_at_k(&list, "absent", 10), 0.0);
    assert_eq!(mrr_at_k(&list, "d1", 3), 0.5);
    assert_eq!(mrr_at_k(&list, "d3", 3), 0.0);
    assert_eq!(mrr_at_k(&list, "d0", 20), 1.0);

    let corpus = toy_corpus().unwrap();
    let state = initialize(&corpus, &TrainConfig::default()).unwrap();
    let queries = toy_eval_queries(&corpus, 1, TOY_QUERY_SEED).unwrap();
    let exhaustive = Ranker::Exhaustive {
        mode: StepNormalization::Renormalized,
    };
    let rank =
        |q: &Query| exhaustive_rank(&state.params, &q.tokens, &state.table, StepNormalization::Renormalized).unwrap();
    let mut qrels = QRels::default();
    qrels.0.insert(
        queries[0].query_id.clone(),
        rank(&queries[0]).entries[0].doc_key.clone(),
    );
    qrels.0.insert(
        queries[1].query_id.clone(),
        rank(&queries[1]).entries[1].doc_key.clone(),
    );
    let two = evaluate_state(&state, &queries[..2], &qrels, exhaustive).unwrap();
    assert_eq!(two.hits_at_1, 0.5);
    assert_eq!(two.mrr_at_3, 0.75);

    let qrels = QRels::from_queries(&queries);
    let mut runs = 0;
    for width in [1, 3, 10, 20, 50] {
        let r = evaluate_state(
            &state,
            &queries,
            &qrels,
            Ranker::Beam {
                width,
                mode: StepNormalization::Renormalized,
            },
        )
        .unwrap();
        assert!(
            r.hits_at_1 <= r.hits_at_10 && r.mrr_at_3 <= r.mrr_at_20,
            "beam {width}: {}",
            r.summary()
        );
        runs += 1;
    }
    format!("unit examples exact; two-query aggregate Hits@1=0.5 MRR@3=0.75; monotone on {runs} evaluation runs")
}

// 6 ------------------------------------------------------------------------

fn bootstrapping_direction(t: &Toy) -> String {
    let start = Instant::now();
    let seeds = [1u64, 2, 3, 4, 5];
    let mut deltas = Vec::new();
    let mut lines = Vec::new();
    let (mut boot_sum, mut fixed_sum) = (0.0, 0.0);
    for seed in seeds {
        let mut hits = [0.0; 2];
        for (slot, dynamic) in [(0, true), (1, false)] {
            let cfg = TrainConfig {
                seed,
                dynamic_docids: dynamic,
                schedule: schedule(1100, 500, 200, 7),
                ..TrainConfig::default()
            };
            let run = run_bootstrap(&t.corpus, &t.stores, &cfg, |_| Ok(())).unwrap();
            assert_eq!(run.mt.global_step, 1100);
            assert_eq!(run.changes.len(), if dynamic { 3 } else { 0 });
            let n = run.trace.len();
            let tenth = n / 10;
            let mean =
                |rows: &[genret::trainer::LossTraceRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
            let (first, last) = (mean(&run.trace[..tenth]), mean(&run.trace[n - tenth..]));
            assert!(
                last < first,
                "seed {seed} dynamic={dynamic}: loss {first:.3} -> {last:.3}"
            );
            hits[slot] = evaluate_state(&run.mt, &t.eval, &t.qrels, Ranker::default())
                .unwrap()
                .hits_at_10;
        }
        boot_sum += hits[0];
        fixed_sum += hits[1];
        deltas.push(hits[0] - hits[1]);
        lines.push(format!(
            "seed {seed}: {:.3} vs {:.3} ({:+.3})",
            hits[0],
            hits[1],
            hits[0] - hits[1]
        ));
    }
    let k = seeds.len() as f64;
    let mean_delta = deltas.iter().sum::<f64>() / k;
    let elapsed = start.elapsed();
    report(&format!(
        "  bootstrapped vs fixed Hits@10 per seed: {}",
        lines.join("; ")
    ));
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    assert!(mean_delta >= 0.0, "mean Hits@10 delta {mean_delta:+.4}");
    format!(
        "mean Hits@10 bootstrapped {:.4} vs fixed {:.4}, delta {mean_delta:+.4}; loss decreases in all 10 runs",
        boot_sum / k,
        fixed_sum / k
    )
}

// 7 ------------------------------------------------------------------------

fn sweep(t: &Toy) -> String {
    let cfg = TrainConfig {
        schedule: schedule(100 + 7 * 50, 100, 50, 8),
        ..TrainConfig::default()
    };
    let points = iteration_sweep(&t.corpus, &t.stores, &cfg, &t.eval, &t.qrels, Ranker::default()).unwrap();
    assert_eq!(
        points.iter().map(|p| p.iteration).collect::<Vec<_>>(),
        (1..=8).collect::<Vec<_>>()
    );
    let csv = sweep_csv(&points);
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("iteration,global_step,hits@1,hits@10,mrr@3,mrr@20\n"));
    for line in csv.lines() {
        report(&format!("  sweep: {line}"));
    }
    let curve: Vec<String> = points.iter().map(|p| format!("{:.3}", p.report.hits_at_10)).collect();
    format!("8 iterations evaluated; Hits@10 by iteration: {}", curve.join(" "))
}

// 8 ------------------------------------------------------------------------

fn ablation(t: &Toy) -> String {
    let config = AblationConfig {
        train: TrainConfig {
            schedule: schedule(60, 30, 15, 7),
            ..TrainConfig::default()
        },
        finetune: FinetuneConfig {
            steps: 20,
            ..FinetuneConfig::default()
        },
        seeds: vec![1, 2],
        ranker: Ranker::default(),
    };
    let rows = run_ablation(&t.corpus, &t.stores, &t.labeled, &t.eval, &t.qrels, &config).unwrap();
    assert_eq!(rows.len(), Variant::ALL.len() * 2);
    for v in Variant::ALL {
        for seed in [1, 2] {
            assert!(
                rows.iter().any(|r| r.variant == v.name() && r.seed == seed),
                "{} seed {seed} missing",
                v.name()
            );
        }
    }
    let csv = ablation_csv(&rows);
    assert_eq!(csv.lines().count(), 1 + rows.len() + Variant::ALL.len());
    assert!(csv.lines().any(|l| l.starts_with("wo_pretraining,mean,")));
    for line in csv.lines().filter(|l| l.contains(",mean,") || l.starts_with("variant")) {
        report(&format!("  ablation: {line}"));
    }
    format!(
        "{} variants x 2 seeds ran end to end; CSV has {} rows",
        Variant::ALL.len(),
        csv.lines().count()
    )
}

// 9 ------------------------------------------------------------------------

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        schedule: schedule(60, 30, 15, 7),
        ..TrainConfig::default()
    }
}

/// augment → pretrain → finetune → evaluate, written under `dir`.
fn pipeline(dir: &Path, seed: u64) {
    let corpus = toy_corpus().unwrap();
    let aug = augment_corpus(
        &corpus,
        &AugmentConfig {
            seed,
            ..AugmentConfig::default()
        },
        None,
    )
    .unwrap();
    std::fs::create_dir_all(dir.join("augment")).unwrap();
    aug.save(&dir.join("augment")).unwrap();
    let cfg = small_config(seed);
    let run = run_bootstrap(&corpus, &aug.stores(), &cfg, |_| Ok(())).unwrap();
    run.bs.save(&dir.join("bs")).unwrap();
    run.mt.save(&dir.join("mt")).unwrap();
    write_loss_trace(&dir.join("loss_trace.csv"), &run.trace).unwrap();
    let labeled = toy_eval_queries(&corpus, 1, TOY_QUERY_SEED ^ 0x5EED).unwrap();
    let ft = FinetuneConfig {
        steps: 20,
        seed,
        ..FinetuneConfig::default()
    };
    let (tuned, _) = finetune(&run.mt, &corpus, &labeled, &ft, cfg.update_rule).unwrap();
    tuned.save(&dir.join("finetune")).unwrap();
    let eval = toy_eval_queries(&corpus, 1, TOY_QUERY_SEED).unwrap();
    let report = evaluate_state(&tuned, &eval, &QRels::from_queries(&eval), Ranker::default()).unwrap();
    std::fs::write(dir.join("metrics.csv"), report.to_csv()).unwrap();
    std::fs::write(dir.join("per_query.tsv"), report.rows_tsv()).unwrap();
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn same_state(a: &TrainState, b: &TrainState) -> bool {
    let pairs = |t: &DocidTable| t.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<Vec<_>>();
    a.params == b.params
        && a.codebook == b.codebook
        && pairs(&a.table) == pairs(&b.table)
        && (a.iteration, a.global_step, a.iteration_step, a.stream)
            == (b.iteration, b.global_step, b.iteration_step, b.stream)
}

fn determinism(t: &Toy) -> String {
    let tmp = TempDir::new().unwrap();
    pipeline(&tmp.path().join("a"), 11);
    pipeline(&tmp.path().join("b"), 11);
    let a = files(&tmp.path().join("a"));
    let b = files(&tmp.path().join("b"));
    assert_eq!(
        a.iter().map(|f| &f.0).collect::<Vec<_>>(),
        b.iter().map(|f| &f.0).collect::<Vec<_>>()
    );
    for (fa, fb) in a.iter().zip(&b) {
        assert!(fa.1 == fb.1, "{} differs between identical runs", fa.0);
    }

    let cfg = small_config(12);
    let full = run_bootstrap(&t.corpus, &t.stores, &cfg, |_| Ok(())).unwrap();
    let mut slot = None;
    let start = initialize(&t.corpus, &cfg).unwrap();
    assert!(resume_bootstrap(
        start,
        &t.corpus,
        &t.stores,
        &cfg,
        Some((37, &mut slot)),
        &mut |_| Ok(())
    )
    .unwrap()
    .is_none());
    let paused = slot.unwrap();
    let ckpt = tmp.path().join("paused");
    paused.save(&ckpt).unwrap();
    let loaded = TrainState::load(&ckpt).unwrap();
    assert!(same_state(&loaded, &paused), "reloaded checkpoint differs");
    let resumed = resume_bootstrap(loaded, &t.corpus, &t.stores, &cfg, None, &mut |_| Ok(()))
        .unwrap()
        .unwrap();
    assert!(same_state(&resumed.mt, &full.mt), "resumed run diverged");
    assert_eq!(resumed.trace[..], full.trace[37..]);
    format!(
        "{} output files byte-identical across two pipeline runs; resume from step 37 checkpoint is bit-exact",
        a.len()
    )
}

// 10 -----------------------------------------------------------------------

fn zero_shot(t: &Toy) -> String {
    let cfg = small_config(13);
    let run = run_bootstrap(&t.corpus, &t.stores, &cfg, |_| Ok(())).unwrap();
    let (same, trace) = finetune(&run.mt, &t.corpus, &[], &FinetuneConfig::default(), cfg.update_rule).unwrap();
    assert!(trace.is_empty() && same_state(&same, &run.mt));
    let r = evaluate_state(&run.mt, &t.eval, &t.qrels, Ranker::default()).unwrap();
    assert_eq!(r.queries, t.eval.len());
    for v in [r.hits_at_1, r.hits_at_10, r.mrr_at_3, r.mrr_at_20] {
        assert!((0.0..=1.0).contains(&v));
    }
    format!("pre-trained snapshot with zero labeled queries: {}", r.summary())
}

#[test]
fn acceptance() {
    let t = toy();
    let results = [
        criterion(1, "gradient correctness", gradients),
        criterion(2, "closed-form loss values", closed_forms),
        criterion(3, "PQ/k-means oracle", pq_oracle),
        criterion(4, "constrained decoding oracle", decoding_oracle),
        criterion(5, "metric correctness", metrics),
        criterion(6, "bootstrapping direction", || bootstrapping_direction(&t)),
        criterion(7, "iteration sweep", || sweep(&t)),
        criterion(8, "ablation harness", || ablation(&t)),
        criterion(9, "determinism and persistence", || determinism(&t)),
        criterion(10, "zero-shot path", || zero_shot(&t)),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    report(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len());
}
