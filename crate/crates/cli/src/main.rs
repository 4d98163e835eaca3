mod run_dir;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use genret::augment::{augment_corpus, Augmentation, GenerationCache};
use genret::config::{BackendKind, RunConfig};
use genret::corpus::{ingest_jsonl_with, read_queries, write_queries, Corpus, Query};
use genret::evaluation::{
    ablation_csv, evaluate_state, export_embeddings, iteration_sweep, run_ablation, sweep_csv, AblationConfig, QRels,
};
use genret::objectives::TrainingStores;
use genret::retrieval::{measure_latency, write_ranked, PrefixTrie};
use genret::toy::{generate_toy_records, toy_eval_queries, TOY_DOCS, TOY_QUERY_SEED, TOY_SEED, TOY_TOPICS};
use genret::trainer::{finetune, run_bootstrap, write_change_log, write_loss_trace, TrainState};

use run_dir::{publish_dir, publish_file, require, CliError, RunLock};

#[derive(Parser)]
#[command(
    name = "genret",
    version,
    about = "Generative retrieval with bootstrapped pre-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Rule,
    External,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Snapshot {
    /// The fine-tuned model if present, else the final pre-trained one.
    Auto,
    Finetune,
    Mt,
    Bs,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy corpus with held-out and training queries.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        eval_per_doc: usize,
        #[arg(long, default_value_t = 1)]
        train_per_doc: usize,
    },
    /// Tokenize a JSONL corpus into a new run directory.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Generate noisy documents and pseudo-queries.
    Augment {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<Backend>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Bootstrapped pre-training.
    Pretrain {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune the pre-trained model on labeled queries.
    Finetune {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank documents for every query.
    Retrieve {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, value_enum, default_value_t = Snapshot::Auto)]
        snapshot: Snapshot,
    },
    /// Decode every query and report Hits@k and MRR@k.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Defaults to the third column of the query file.
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, value_enum, default_value_t = Snapshot::Auto)]
        snapshot: Snapshot,
    },
    /// Train and evaluate every ablation variant over several seeds.
    Ablate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Evaluation queries.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: Option<PathBuf>,
        /// Labeled fine-tuning queries; without them every variant is evaluated zero-shot.
        #[arg(long)]
        train_queries: Option<PathBuf>,
    },
    /// Evaluate the snapshot after every pre-training iteration.
    Sweep {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time decoding and measure the prefix trie.
    Bench {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, value_enum, default_value_t = Snapshot::Auto)]
        snapshot: Snapshot,
    },
    /// Dump encoder vectors of documents (and queries) as TSV.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Snapshot::Auto)]
        snapshot: Snapshot,
    },
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<genret::Error>() {
        e.kind()
    } else if let Some(e) = err.downcast_ref::<CliError>() {
        e.kind
    } else {
        "internal"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {}: {msg}", error_kind(&err));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenToy {
            out,
            eval_per_doc,
            train_per_doc,
        } => gen_toy(&out, eval_per_doc, train_per_doc),
        Command::Ingest {
            corpus,
            out,
            config,
            limit,
        } => ingest(&corpus, &out, config.as_deref(), limit),
        Command::Augment { run, backend, seed } => locked(&run, |run| augment(run, backend, seed)),
        Command::Pretrain { run, config, seed } => locked(&run, |run| pretrain(run, config.as_deref(), seed)),
        Command::Finetune { run, queries, seed } => locked(&run, |run| finetune_cmd(run, &queries, seed)),
        Command::Retrieve {
            run,
            queries,
            beam,
            snapshot,
        } => locked(&run, |run| retrieve(run, &queries, beam, snapshot)),
        Command::Evaluate {
            run,
            queries,
            qrels,
            beam,
            snapshot,
        } => locked(&run, |run| {
            evaluate_cmd(run, &queries, qrels.as_deref(), beam, snapshot)
        }),
        Command::Ablate {
            run,
            seeds,
            queries,
            qrels,
            train_queries,
        } => locked(&run, |run| {
            ablate(run, seeds, &queries, qrels.as_deref(), train_queries.as_deref())
        }),
        Command::Sweep {
            run,
            queries,
            qrels,
            seed,
        } => locked(&run, |run| sweep(run, &queries, qrels.as_deref(), seed)),
        Command::Bench {
            run,
            queries,
            beam,
            snapshot,
        } => locked(&run, |run| bench(run, &queries, beam, snapshot)),
        Command::Export { run, queries, snapshot } => locked(&run, |run| export(run, queries.as_deref(), snapshot)),
    }
}

fn locked(run: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    require(&run.join(run_dir::CORPUS), "ingest")?;
    let _lock = RunLock::acquire(run)?;
    f(run)
}

fn load_config(run: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let path = run.join(run_dir::CONFIG);
    let cfg = if path.exists() {
        RunConfig::load(&path)?
    } else {
        RunConfig::default()
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_corpus(run: &Path, cfg: &RunConfig) -> Result<Corpus> {
    Ok(ingest_jsonl_with(
        &run.join(run_dir::CORPUS),
        None,
        cfg.min_count,
        cfg.max_doc_tokens,
    )?)
}

fn load_stores(run: &Path, corpus: &Corpus, cfg: &RunConfig) -> Result<TrainingStores> {
    let dir = run.join(run_dir::AUGMENT);
    require(&dir, "augment")?;
    Ok(Augmentation::load(&dir, corpus.vocab(), &cfg.augment_config()?)?.stores())
}

fn load_snapshot(run: &Path, which: Snapshot) -> Result<TrainState> {
    let dir = match which {
        Snapshot::Auto if run.join(run_dir::FINETUNE).exists() => run.join(run_dir::FINETUNE),
        Snapshot::Auto | Snapshot::Mt => run.join(run_dir::PRETRAIN).join("mt"),
        Snapshot::Bs => run.join(run_dir::PRETRAIN).join("bs"),
        Snapshot::Finetune => run.join(run_dir::FINETUNE),
    };
    let hint = if which == Snapshot::Finetune {
        "finetune"
    } else {
        "pretrain"
    };
    require(&dir, hint)?;
    TrainState::load(&dir).with_context(|| format!("loading snapshot {}", dir.display()))
}

fn load_queries(path: &Path, corpus: &Corpus) -> Result<Vec<Query>> {
    let queries = read_queries(path, corpus.vocab()).with_context(|| format!("reading {}", path.display()))?;
    if queries.is_empty() {
        return Err(genret::Error::EmptyInput(format!("no queries in {}", path.display())).into());
    }
    Ok(queries)
}

fn load_qrels(path: Option<&Path>, queries: &[Query], corpus: &Corpus) -> Result<QRels> {
    let qrels = match path {
        Some(p) => QRels::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => QRels::from_queries(queries),
    };
    qrels.validate(corpus)?;
    Ok(qrels)
}

fn gen_toy(out: &Path, eval_per_doc: usize, train_per_doc: usize) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let records = generate_toy_records(TOY_DOCS, TOY_TOPICS, TOY_SEED);
    let corpus = Corpus::from_records(records, 1, genret::corpus::DEFAULT_MAX_DOC_TOKENS)?;
    corpus.write_jsonl(&out.join("corpus.jsonl"))?;
    let eval = toy_eval_queries(&corpus, eval_per_doc, TOY_QUERY_SEED)?;
    write_queries(&out.join("queries.tsv"), &eval)?;
    QRels::from_queries(&eval).save(&out.join("qrels.tsv"))?;
    if train_per_doc > 0 {
        let train: Vec<Query> = toy_eval_queries(&corpus, train_per_doc, TOY_QUERY_SEED ^ 0x5EED)?
            .into_iter()
            .map(|mut q| {
                q.query_id = format!("train-{}", q.query_id);
                q
            })
            .collect();
        write_queries(&out.join("train_queries.tsv"), &train)?;
    }
    println!(
        "wrote {} documents and {} evaluation queries to {}",
        corpus.len(),
        eval.len(),
        out.display()
    );
    Ok(())
}

fn ingest(corpus_path: &Path, out: &Path, config: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let _lock = RunLock::acquire(out)?;
    let corpus = ingest_jsonl_with(corpus_path, limit, cfg.min_count, cfg.max_doc_tokens)
        .with_context(|| format!("ingesting {}", corpus_path.display()))?;
    let tmp = out.join(".corpus.jsonl.tmp");
    corpus.write_jsonl(&tmp)?;
    fs::rename(&tmp, out.join(run_dir::CORPUS)).context("renaming corpus into place")?;
    publish_file(&out.join(run_dir::CONFIG), cfg.to_text().as_bytes())?;
    println!(
        "ingested {} documents, vocabulary {} into {}",
        corpus.len(),
        corpus.vocab().len(),
        out.display()
    );
    Ok(())
}

fn augment(run: &Path, backend: Option<Backend>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(run, seed)?;
    if let Some(b) = backend {
        cfg.backend = match b {
            Backend::Rule => BackendKind::Rule,
            Backend::External => BackendKind::External,
        };
    }
    let corpus = load_corpus(run, &cfg)?;
    let acfg = cfg.augment_config()?;
    let mut cache = GenerationCache::open(&run.join(run_dir::AUGMENT_CACHE))?;
    let aug = augment_corpus(&corpus, &acfg, Some(&mut cache))?;
    publish_dir(run, run_dir::AUGMENT, |dir| Ok(aug.save(dir)?))?;
    println!(
        "generated {} noisy documents and {} pseudo-queries",
        aug.noisy.len(),
        aug.queries.len()
    );
    Ok(())
}

fn pretrain(run: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => load_config(run, None)?,
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let corpus = load_corpus(run, &cfg)?;
    let stores = load_stores(run, &corpus, &cfg)?;
    publish_dir(run, run_dir::PRETRAIN, |dir| {
        fs::write(dir.join(run_dir::CONFIG), cfg.to_text())?;
        let iter_root = dir.join("iterations");
        let result = run_bootstrap(&corpus, &stores, &cfg.train, |state| {
            state.save(&iter_root.join(format!("iter-{:02}", state.iteration)))
        })?;
        for (i, changes) in result.changes.iter().enumerate() {
            write_change_log(
                &iter_root.join(format!("iter-{:02}", i + 1)).join("changes.tsv"),
                changes,
            )?;
        }
        result.bs.save(&dir.join("bs"))?;
        result.mt.save(&dir.join("mt"))?;
        write_loss_trace(&dir.join("loss_trace.csv"), &result.trace)?;
        let mut csv = String::from("iteration,steps,end_step,table_fingerprint,changed_docs\n");
        for r in &result.reports {
            csv.push_str(&format!(
                "{},{},{},{:016x},{}\n",
                r.iteration,
                r.steps,
                r.end_step,
                r.table_fingerprint,
                r.changed_docs.map(|c| c.to_string()).unwrap_or_default()
            ));
        }
        fs::write(dir.join("iterations.csv"), csv)?;
        println!(
            "pre-trained {} iterations, {} steps, {} docid refreshes",
            result.reports.len(),
            result.mt.global_step,
            result.changes.len()
        );
        Ok(())
    })?;
    Ok(())
}

fn finetune_cmd(run: &Path, queries: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(run, seed)?;
    let corpus = load_corpus(run, &cfg)?;
    let labeled = load_queries(queries, &corpus)?;
    let state = load_snapshot(run, Snapshot::Mt)?;
    let (tuned, trace) = finetune(&state, &corpus, &labeled, &cfg.finetune, cfg.train.update_rule)?;
    publish_dir(run, run_dir::FINETUNE, |dir| {
        tuned.save(dir)?;
        write_loss_trace(&dir.join("loss_trace.csv"), &trace)?;
        Ok(())
    })?;
    println!("fine-tuned for {} steps", trace.len());
    Ok(())
}

fn retrieve(run: &Path, queries: &Path, beam: Option<usize>, snapshot: Snapshot) -> Result<()> {
    let mut cfg = load_config(run, None)?;
    if let Some(b) = beam {
        cfg.beam = b;
    }
    let corpus = load_corpus(run, &cfg)?;
    let queries = load_queries(queries, &corpus)?;
    let state = load_snapshot(run, snapshot)?;
    let trie = PrefixTrie::build(&state.table);
    let ranker = cfg.ranker();
    let results = queries
        .iter()
        .map(|q| {
            Ok((
                q.query_id.clone(),
                ranker.rank(&state.params, &state.table, &trie, &q.tokens)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    publish_dir(run, "retrieve", |dir| {
        Ok(write_ranked(&dir.join("ranked.tsv"), &results)?)
    })?;
    println!("ranked {} queries with beam {}", results.len(), cfg.beam);
    Ok(())
}

fn evaluate_cmd(
    run: &Path,
    queries: &Path,
    qrels: Option<&Path>,
    beam: Option<usize>,
    snapshot: Snapshot,
) -> Result<()> {
    let mut cfg = load_config(run, None)?;
    if let Some(b) = beam {
        cfg.beam = b;
    }
    let corpus = load_corpus(run, &cfg)?;
    let queries = load_queries(queries, &corpus)?;
    let qrels = load_qrels(qrels, &queries, &corpus)?;
    let state = load_snapshot(run, snapshot)?;
    let report = evaluate_state(&state, &queries, &qrels, cfg.ranker())?;
    publish_dir(run, "evaluate", |dir| {
        fs::write(dir.join("metrics.csv"), report.to_csv())?;
        fs::write(dir.join("per_query.tsv"), report.rows_tsv())?;
        Ok(())
    })?;
    println!("{}", report.summary());
    Ok(())
}

fn ablate(run: &Path, seeds: u64, queries: &Path, qrels: Option<&Path>, train_queries: Option<&Path>) -> Result<()> {
    if seeds == 0 {
        return Err(CliError::new("usage", "--seeds must be at least 1").into());
    }
    let cfg = load_config(run, None)?;
    let corpus = load_corpus(run, &cfg)?;
    let stores = load_stores(run, &corpus, &cfg)?;
    let eval = load_queries(queries, &corpus)?;
    let qrels = load_qrels(qrels, &eval, &corpus)?;
    let labeled = match train_queries {
        Some(p) => load_queries(p, &corpus)?,
        None => Vec::new(),
    };
    let acfg = AblationConfig {
        train: cfg.train.clone(),
        finetune: cfg.finetune.clone(),
        seeds: (0..seeds).map(|i| cfg.train.seed + i).collect(),
        ranker: cfg.ranker(),
    };
    let rows = run_ablation(&corpus, &stores, &labeled, &eval, &qrels, &acfg)?;
    let csv = ablation_csv(&rows);
    publish_dir(run, "ablate", |dir| Ok(fs::write(dir.join("ablation.csv"), &csv)?))?;
    print!("{csv}");
    Ok(())
}

fn sweep(run: &Path, queries: &Path, qrels: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(run, seed)?;
    let corpus = load_corpus(run, &cfg)?;
    let stores = load_stores(run, &corpus, &cfg)?;
    let eval = load_queries(queries, &corpus)?;
    let qrels = load_qrels(qrels, &eval, &corpus)?;
    let points = iteration_sweep(&corpus, &stores, &cfg.train, &eval, &qrels, cfg.ranker())?;
    let csv = sweep_csv(&points);
    publish_dir(run, "sweep", |dir| Ok(fs::write(dir.join("sweep.csv"), &csv)?))?;
    print!("{csv}");
    Ok(())
}

fn bench(run: &Path, queries: &Path, beam: Option<usize>, snapshot: Snapshot) -> Result<()> {
    let cfg = load_config(run, None)?;
    let corpus = load_corpus(run, &cfg)?;
    let queries = load_queries(queries, &corpus)?;
    let state = load_snapshot(run, snapshot)?;
    let trie = PrefixTrie::build(&state.table);
    let tokens: Vec<Vec<u32>> = queries.into_iter().map(|q| q.tokens).collect();
    let report = measure_latency(
        &state.params,
        &tokens,
        &trie,
        beam.unwrap_or(cfg.beam),
        cfg.normalization,
    )?;
    publish_dir(run, "bench", |dir| {
        Ok(fs::write(dir.join("latency.csv"), report.to_csv())?)
    })?;
    print!("{}", report.to_csv());
    Ok(())
}

fn export(run: &Path, queries: Option<&Path>, snapshot: Snapshot) -> Result<()> {
    let cfg = load_config(run, None)?;
    let corpus = load_corpus(run, &cfg)?;
    let state = load_snapshot(run, snapshot)?;
    let docs: Vec<(String, Vec<u32>)> = corpus
        .documents()
        .iter()
        .map(|d| (d.doc_key.clone(), d.tokens.clone()))
        .collect();
    let qs: Vec<(String, Vec<u32>)> = match queries {
        Some(p) => load_queries(p, &corpus)?
            .into_iter()
            .map(|q| (q.query_id, q.tokens))
            .collect(),
        None => Vec::new(),
    };
    publish_dir(run, "export", |dir| {
        export_embeddings(&state.params, &docs, &dir.join("documents.tsv"))?;
        if !qs.is_empty() {
            export_embeddings(&state.params, &qs, &dir.join("queries.tsv"))?;
        }
        Ok(())
    })?;
    println!("exported {} document vectors", docs.len());
    Ok(())
}
