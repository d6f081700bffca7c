//! End-to-end runs of the `mmfl` binary on a small synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mmfl::eval::{cosine_distance, rank_ascending, EmbeddingStore};
use serde_json::Value;

struct Fixture {
    dir: PathBuf,
    manifest: PathBuf,
    checkpoint: PathBuf,
}

fn mmfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfl"))
        .args(args)
        .env_remove("MMFL_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = mmfl(args);
    assert!(
        out.status.success(),
        "mmfl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_args<'a>(manifest: &'a str, out: &'a str) -> Vec<String> {
    [
        "train",
        "--out",
        out,
        "preset=tiny",
        "train.epochs=1",
        "optim.milestones=[]",
        "train.eval_period=1",
    ]
    .iter()
    .map(|a| a.to_string())
    .chain([format!("data.manifest={manifest}")])
    .collect()
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let data = dir.join("data");
        ok(&["gen-data", "--pids", "8", "--per-domain", "2", "--size", "48", "--holdout", "3", "--out", s(&data)]);
        let manifest = data.join("manifest.jsonl");
        let run = dir.join("run");
        let args = train_args(s(&manifest), s(&run));
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let summary = ok(&args);
        assert_eq!(summary["epochs"], 1);
        Fixture {
            checkpoint: run.join("last.safetensors"),
            manifest,
            dir,
        }
    })
}

fn first_log_line(run: &Path) -> Value {
    let text = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn train_writes_run_directory() {
    let f = fixture();
    let run = f.dir.join("run");
    for file in ["config.json", "provenance.json", "train_log.jsonl", "history.json", "last.safetensors"] {
        assert!(run.join(file).is_file(), "{file} missing");
    }
    let line = first_log_line(&run);
    for key in ["epoch", "step", "lr", "lsr", "ce", "triplet", "center", "total"] {
        assert!(line.get(key).is_some(), "log line lacks {key}: {line}");
    }
    let history: Value = serde_json::from_str(&std::fs::read_to_string(run.join("history.json")).unwrap()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), 1);
}

#[test]
fn same_seed_gives_identical_first_step() {
    let f = fixture();
    let again = f.dir.join("run-again");
    let args = train_args(s(&f.manifest), s(&again));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args);
    assert_eq!(first_log_line(&f.dir.join("run")), first_log_line(&again));
}

#[test]
fn unknown_config_key_is_named() {
    let f = fixture();
    let out = mmfl(&["train", "--out", s(&f.dir.join("bad")), "preset=tiny", "optim.lrr=0.1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("optim.lrr"));
}

#[test]
fn missing_checkpoint_fails_with_path() {
    let f = fixture();
    let ghost = f.dir.join("nope.safetensors");
    let out = mmfl(&["eval", "--checkpoint", s(&ghost), "--manifest", s(&f.manifest), "--out", s(&f.dir.join("e0"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.safetensors"));
}

#[test]
fn eval_reports_monotone_cmc_and_lambda_one_keeps_map() {
    let f = fixture();
    let base = [
        "eval",
        "--checkpoint",
        s(&f.checkpoint),
        "--manifest",
        s(&f.manifest),
    ];
    let mut plain_args = base.to_vec();
    let plain_out = f.dir.join("eval-plain");
    plain_args.extend(["--out", s(&plain_out)]);
    let plain = ok(&plain_args);
    assert!(plain_out.join("eval.json").is_file());
    assert_eq!(plain["num_query"], 6);
    assert_eq!(plain["num_gallery"], 6);
    let cmc: Vec<f64> = plain["cmc"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(cmc.windows(2).all(|w| w[0] <= w[1]));

    let mut rr_args = base.to_vec();
    let rr_out = f.dir.join("eval-rerank");
    rr_args.extend(["--out", s(&rr_out), "--rerank", "eval.lambda=1", "eval.k1=4", "eval.k2=2"]);
    let rr = ok(&rr_args);
    assert_eq!(rr["reranked"], true);
    assert_eq!(rr["mAP"], plain["mAP"]);
    assert_eq!(rr["cmc"], plain["cmc"]);
}

#[test]
fn extract_round_trips_and_handles_empty_split() {
    let f = fixture();
    let out = f.dir.join("extract");
    let summary = ok(&[
        "extract",
        "--checkpoint",
        s(&f.checkpoint),
        "--manifest",
        s(&f.manifest),
        "--split",
        "gallery",
        "--out",
        s(&out),
    ]);
    assert_eq!(summary["rows"], 6);
    let store = EmbeddingStore::read(&out.join("gallery.emb")).unwrap();
    assert_eq!(store.len(), 6);
    assert!(store.normalized);
    store.validate().unwrap();

    // a manifest holding only training records has no query rows
    let text = std::fs::read_to_string(&f.manifest).unwrap();
    let train_only: Vec<&str> = text.lines().filter(|l| l.contains("\"train\"")).collect();
    let tm = f.manifest.with_file_name("train_only.jsonl");
    std::fs::write(&tm, train_only.join("\n")).unwrap();
    let empty = ok(&[
        "extract",
        "--checkpoint",
        s(&f.checkpoint),
        "--manifest",
        s(&tm),
        "--split",
        "query",
        "--out",
        s(&out),
    ]);
    assert_eq!(empty["rows"], 0);
    assert!(EmbeddingStore::read(&out.join("query.emb")).unwrap().is_empty());
}

#[test]
fn index_and_query() {
    let f = fixture();
    let out = f.dir.join("indexed");
    ok(&[
        "extract",
        "--checkpoint",
        s(&f.checkpoint),
        "--manifest",
        s(&f.manifest),
        "--split",
        "all",
        "--out",
        s(&out),
    ]);
    let store_path = out.join("all.emb");
    let store = EmbeddingStore::read(&store_path).unwrap();
    let idx = ok(&["index", "--store", s(&store_path), "--clusters", "4", "--probe", "2", "--out", s(&out)]);
    let sizes: u64 = idx["cluster_sizes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(sizes as usize, store.len());
    let index_path = out.join("index.json");

    // a stored row finds itself first
    let q = ok(&["query", "--index", s(&index_path), "--row", "5", "--topk", "3", "--out", s(&out)]);
    let hits = q["results"].as_array().unwrap();
    assert_eq!(hits[0]["row"], 5);
    assert!(hits[0]["distance"].as_f64().unwrap() < 1e-5);

    // probing every cluster with topk beyond the store returns the exhaustive ranking
    let n = store.len();
    let topk = (n + 10).to_string();
    let q = ok(&["query", "--index", s(&index_path), "--row", "2", "--probe", "4", "--topk", &topk, "--out", s(&out)]);
    let got: Vec<usize> = q["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["row"].as_u64().unwrap() as usize)
        .collect();
    let d: Vec<f64> = (0..n).map(|i| cosine_distance(store.row(2), store.row(i))).collect();
    assert_eq!(got, rank_ascending(&d));

    // image queries go through the checkpoint
    let img = f.manifest.parent().unwrap().join(&store.meta[3].path);
    let q = ok(&[
        "query",
        "--index",
        s(&index_path),
        "--image",
        s(&img),
        "--checkpoint",
        s(&f.checkpoint),
        "--probe",
        "4",
        "--topk",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(q["results"][0]["row"], 3);
}

#[test]
fn stats_and_attribute_metrics() {
    let f = fixture();
    let stats = ok(&["stats", "--preset", "tiny", "--classes", "5", "--runs", "1", "--out", s(&f.dir.join("stats"))]);
    assert!(stats.to_string().contains("param"));
    let attrs = ok(&[
        "metrics-attr",
        "--checkpoint",
        s(&f.checkpoint),
        "--manifest",
        s(&f.manifest),
        "--out",
        s(&f.dir.join("attrs")),
    ]);
    assert!(f.dir.join("attrs/attributes.json").is_file());
    assert!(!attrs.is_null());
}

#[test]
fn gen_data_is_deterministic() {
    let f = fixture();
    let a = f.dir.join("gen-a");
    let b = f.dir.join("gen-b");
    for d in [&a, &b] {
        ok(&["gen-data", "--pids", "3", "--per-domain", "1", "--size", "16", "--seed", "9", "--out", s(d)]);
    }
    assert_eq!(
        std::fs::read(a.join("manifest.jsonl")).unwrap(),
        std::fs::read(b.join("manifest.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("images/0002_shop_0.png")).unwrap(),
        std::fs::read(b.join("images/0002_shop_0.png")).unwrap()
    );
}
