use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_SCHEDULE: &str = "total_steps = 40\nfirst_refresh_step = 20\nrefresh_every = 10\nfinetune_steps = 10\n";

fn genret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genret"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn genret")
}

fn ok(args: &[&str]) -> String {
    let out = genret(args);
    assert!(
        out.status.success(),
        "genret {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// The single `error: kind: message` line a failing command prints last.
fn failure(args: &[&str]) -> String {
    let out = genret(args);
    assert!(!out.status.success(), "genret {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last = stderr.lines().last().unwrap_or_default().to_string();
    assert!(last.starts_with("error: "), "unexpected stderr: {stderr}");
    last
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: TempDir,
    data: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-toy", "--out", s(&data)]);
    fs::write(tmp.path().join("config.txt"), SMALL_SCHEDULE).unwrap();
    Fixture {
        root: tmp.path().to_path_buf(),
        _tmp: tmp,
        data,
    }
}

impl Fixture {
    fn ingest(&self, name: &str) -> PathBuf {
        let run = self.root.join(name);
        let cfg = self.root.join("config.txt");
        ok(&[
            "ingest",
            "--corpus",
            s(&self.data.join("corpus.jsonl")),
            "--out",
            s(&run),
            "--config",
            s(&cfg),
        ]);
        run
    }

    fn pipeline(&self, name: &str, seed: &str) -> PathBuf {
        let run = self.ingest(name);
        ok(&["augment", "--run", s(&run), "--seed", seed]);
        ok(&["pretrain", "--run", s(&run), "--seed", seed]);
        ok(&[
            "finetune",
            "--run",
            s(&run),
            "--queries",
            s(&self.data.join("train_queries.tsv")),
            "--seed",
            seed,
        ]);
        ok(&[
            "evaluate",
            "--run",
            s(&run),
            "--queries",
            s(&self.data.join("queries.tsv")),
            "--qrels",
            s(&self.data.join("qrels.tsv")),
        ]);
        run
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_writes_run_layout_and_is_deterministic() {
    let f = fixture();
    let a = f.pipeline("a", "3");
    let b = f.pipeline("b", "3");

    for rel in [
        "config.txt",
        "corpus.jsonl",
        "augment/noisy.jsonl",
        "augment/queries.jsonl",
        "pretrain/config.txt",
        "pretrain/loss_trace.csv",
        "pretrain/iterations.csv",
        "pretrain/iterations/iter-01/changes.tsv",
        "pretrain/iterations/iter-01/docids.json",
        "pretrain/bs/model.ckpt",
        "pretrain/mt/docids.json",
        "finetune/model.ckpt",
        "finetune/loss_trace.csv",
        "evaluate/metrics.csv",
        "evaluate/per_query.tsv",
    ] {
        assert_eq!(
            read(&a.join(rel)),
            read(&b.join(rel)),
            "{rel} differs between identical runs"
        );
    }
    assert!(!a.join(".lock").exists());

    // three iterations, two refreshes
    let iterations = String::from_utf8(read(&a.join("pretrain/iterations.csv"))).unwrap();
    assert_eq!(iterations.lines().count(), 4);
    assert!(!a.join("pretrain/iterations/iter-03/changes.tsv").exists());

    let trace = String::from_utf8(read(&a.join("pretrain/loss_trace.csv"))).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        "step,iteration,batch_type,l_sc,l_c1,l_c2,l_rp,l_id,l_re,total"
    );
    assert_eq!(trace.lines().count(), 41);

    let metrics = String::from_utf8(read(&a.join("evaluate/metrics.csv"))).unwrap();
    assert!(metrics.starts_with("queries,hits@1,hits@10,mrr@3,mrr@20\n200,"));
}

#[test]
fn seed_flag_changes_training() {
    let f = fixture();
    let a = f.ingest("a");
    let b = f.ingest("b");
    for (run, seed) in [(&a, "1"), (&b, "2")] {
        ok(&["augment", "--run", s(run), "--seed", seed]);
        ok(&["pretrain", "--run", s(run), "--seed", seed]);
    }
    assert_ne!(
        read(&a.join("pretrain/loss_trace.csv")),
        read(&b.join("pretrain/loss_trace.csv"))
    );
}

#[test]
fn retrieve_bench_export_on_pretrained_run() {
    let f = fixture();
    let run = f.ingest("r");
    ok(&["augment", "--run", s(&run)]);
    ok(&["pretrain", "--run", s(&run)]);
    let queries = f.data.join("queries.tsv");

    ok(&["retrieve", "--run", s(&run), "--queries", s(&queries), "--beam", "5"]);
    let ranked = String::from_utf8(read(&run.join("retrieve/ranked.tsv"))).unwrap();
    let mut lines = ranked.lines();
    assert_eq!(lines.next(), Some("query_id\trank\tdoc_key\tlog_likelihood"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 200 * 5);
    assert!(rows[0].starts_with("doc000-q0\t1\tdoc"));

    // evaluate reads labels from the query file when no qrels are given
    let summary = ok(&[
        "evaluate",
        "--run",
        s(&run),
        "--queries",
        s(&queries),
        "--snapshot",
        "bs",
    ]);
    assert!(summary.starts_with("queries=200 Hits@1="), "{summary}");

    let bench = ok(&["bench", "--run", s(&run), "--queries", s(&queries)]);
    assert!(bench.starts_with("queries,beam,latency_ms,memory_bytes,trie_nodes\n200,20,"));

    ok(&["export", "--run", s(&run), "--queries", s(&queries)]);
    let docs = String::from_utf8(read(&run.join("export/documents.tsv"))).unwrap();
    assert_eq!(docs.lines().count(), 200);
    // hidden_dim defaults to 64
    assert_eq!(docs.lines().next().unwrap().split('\t').count(), 65);
    assert!(run.join("export/queries.tsv").exists());
}

#[test]
fn errors_are_one_line_with_kind() {
    let f = fixture();
    let missing = f.root.join("nowhere");
    let line = failure(&["pretrain", "--run", s(&missing)]);
    assert!(line.starts_with("error: missing: "), "{line}");

    let bad_corpus = f.root.join("bad.jsonl");
    fs::write(&bad_corpus, "{\"doc_key\":\"a\",\"text\":\"x y\"}\nnot json\n").unwrap();
    let line = failure(&["ingest", "--corpus", s(&bad_corpus), "--out", s(&f.root.join("bad"))]);
    assert!(line.starts_with("error: malformed: "), "{line}");

    let dup = f.root.join("dup.jsonl");
    fs::write(
        &dup,
        "{\"doc_key\":\"a\",\"text\":\"x\"}\n{\"doc_key\":\"a\",\"text\":\"y\"}\n",
    )
    .unwrap();
    let line = failure(&["ingest", "--corpus", s(&dup), "--out", s(&f.root.join("dup"))]);
    assert!(line.starts_with("error: duplicate_key: "), "{line}");

    let run = f.ingest("e");
    let cfg = f.root.join("broken.txt");
    fs::write(&cfg, "bogus = 1\nbatch_n = 1\n").unwrap();
    let line = failure(&["pretrain", "--run", s(&run), "--config", s(&cfg)]);
    assert!(line.starts_with("error: config: "), "{line}");
    assert!(
        line.contains("bogus") && line.contains("batch_n"),
        "both problems reported: {line}"
    );

    let line = failure(&["pretrain", "--run", s(&run)]);
    assert!(
        line.starts_with("error: missing: ") && line.contains("augment"),
        "{line}"
    );
}

#[test]
fn lock_blocks_concurrent_commands() {
    let f = fixture();
    let run = f.ingest("l");
    fs::write(run.join(".lock"), "1\n").unwrap();
    let line = failure(&["augment", "--run", s(&run)]);
    assert!(line.starts_with("error: locked: "), "{line}");
    assert!(!run.join("augment").exists());
    fs::remove_file(run.join(".lock")).unwrap();
    ok(&["augment", "--run", s(&run)]);
}

#[test]
fn failed_command_keeps_previous_output() {
    let f = fixture();
    let run = f.ingest("k");
    ok(&["augment", "--run", s(&run)]);
    ok(&["pretrain", "--run", s(&run)]);
    let queries = f.data.join("queries.tsv");
    ok(&["evaluate", "--run", s(&run), "--queries", s(&queries)]);
    let before = read(&run.join("evaluate/metrics.csv"));

    let qrels = f.root.join("unknown_qrels.tsv");
    fs::write(&qrels, "doc000-q0\tno-such-doc\n").unwrap();
    let line = failure(&[
        "evaluate",
        "--run",
        s(&run),
        "--queries",
        s(&queries),
        "--qrels",
        s(&qrels),
    ]);
    assert!(line.starts_with("error: unknown_doc_key: "), "{line}");
    assert_eq!(read(&run.join("evaluate/metrics.csv")), before);
    assert!(!run.join(".evaluate.tmp").exists());
    assert!(!run.join(".lock").exists());
}
