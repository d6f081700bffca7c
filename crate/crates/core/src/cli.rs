//! Command-line entry points. Every command writes its artifacts under `--out`
//! and prints a JSON summary to stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::manifest::filter_split;
use crate::data::{generate_synthetic_dataset, load_manifest, AttributeSchema, ImageRecord, Split, SyntheticOptions};
use crate::error::{MmflError, Result};
use crate::eval::{
    attribute_metrics, build_index, evaluate_stores, extract_from_disk, query_index, report_model_stats, retrieval_protocol, subset,
    EmbeddingStore, RetrievalIndex,
};
use crate::eval::index::IndexFile;
use crate::settings::{self, resolve, RunConfig};
use crate::train::{load_checkpoint, Checkpoint, Dataset, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mmfl", version, about = "Multi-scale multi-granularity fashion retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes config, logs, history and checkpoints.
    Train(TrainArgs),
    /// Embed one manifest split into an embedding store file.
    Extract(ExtractArgs),
    /// Retrieval mAP and CMC of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Cluster an embedding store for probed search.
    Index(IndexArgs),
    /// Search an index with a store row or an image.
    Query(QueryArgs),
    /// Render a synthetic dataset with manifest.
    GenData(GenDataArgs),
    /// Parameter count, multiply-adds and latency of a configuration.
    Stats(StatsArgs),
    /// Attribute prediction metrics of a checkpoint on a manifest.
    MetricsAttr(MetricsAttrArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config file; the preset defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Dotted `key=value` overrides, e.g. `optim.lr=0.0001`.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, query, gallery or all.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Image root; defaults to the manifest's directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value = "runs/extract")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Apply k-reciprocal re-ranking.
    #[arg(long)]
    pub rerank: bool,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
    /// Overrides of the checkpoint's config, e.g. `eval.lambda=1`.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Embedding store file written by `extract`.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub clusters: usize,
    #[arg(long, default_value_t = 3)]
    pub probe: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/index")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Index file written by `index`.
    #[arg(long)]
    pub index: PathBuf,
    /// Query with this row of the indexed store.
    #[arg(long, conflicts_with = "image")]
    pub row: Option<usize>,
    /// Query with an image file; needs `--checkpoint`.
    #[arg(long, requires = "checkpoint")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    /// Clusters to search; defaults to the index's setting.
    #[arg(long)]
    pub probe: Option<usize>,
    #[arg(long, default_value = "runs/query")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    pub pids: usize,
    #[arg(long, default_value_t = 4)]
    pub per_domain: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Identities moved to the query/gallery splits.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long, default_value = "runs/data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, default_value = "full")]
    pub preset: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Classifier rows; the PID heads are part of the parameter count.
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    #[arg(long, default_value = "runs/stats")]
    pub out: PathBuf,
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MetricsAttrArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub topk: usize,
    #[arg(long, default_value = "runs/metrics-attr")]
    pub out: PathBuf,
}

/// Parses the process arguments, runs the command and maps errors to a nonzero exit.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Index(a) => cmd_index(&a),
        Command::Query(a) => cmd_query(&a),
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::MetricsAttr(a) => cmd_metrics_attr(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MmflError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| MmflError::io(path, e))
}

fn manifest_root(manifest: &Path, root: Option<&PathBuf>) -> PathBuf {
    root.cloned()
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn select_split(records: Vec<ImageRecord>, split: &str) -> Result<Vec<ImageRecord>> {
    if split == "all" {
        Ok(records)
    } else {
        Ok(filter_split(&records, split.parse::<Split>()?))
    }
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path, &Device::Cpu)
}

pub fn cmd_train(a: &TrainArgs) -> Result<Value> {
    create_dir(&a.out)?;
    let (trainer, provenance) = match &a.resume {
        Some(path) => {
            let ckpt = open_checkpoint(path)?;
            let base = serde_json::to_value(&ckpt.meta.config)?;
            let resolved = resolve(Some(&base), None, &a.overrides)?;
            let data = Dataset::load(&resolved.config, ckpt.meta.schema.clone())?;
            (Trainer::resume_with(&ckpt, data, resolved.config.clone())?, resolved.provenance)
        }
        None => {
            let resolved = settings::load(a.config.as_deref(), &a.overrides)?;
            let data = Dataset::load(&resolved.config, AttributeSchema::default())?;
            (Trainer::new(resolved.config.clone(), data)?, resolved.provenance)
        }
    };
    write_json(&a.out.join("provenance.json"), &provenance)?;
    let mut trainer = trainer;
    let summary = trainer.fit(Some(&a.out))?;
    Ok(json!({
        "out": a.out,
        "epochs": summary.epochs,
        "steps": summary.steps,
        "best_map": summary.best_map,
        "last_checkpoint": summary.last_checkpoint,
        "best_checkpoint": summary.best_checkpoint,
        "final": summary.history.last(),
    }))
}

pub fn cmd_extract(a: &ExtractArgs) -> Result<Value> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let net = ckpt.restore_model(&Device::Cpu)?;
    let records = select_split(load_manifest(&a.manifest, &ckpt.meta.schema)?, &a.split)?;
    let root = manifest_root(&a.manifest, a.root.as_ref());
    let batch = a.batch_size.unwrap_or(ckpt.meta.config.eval.batch_size);
    let ex = extract_from_disk(&net, &ckpt.meta.preprocessor, &records, &root, batch)?;
    create_dir(&a.out)?;
    let path = a.out.join(format!("{}.emb", a.split));
    ex.store.write(&path)?;
    Ok(json!({ "store": path, "rows": ex.store.len(), "dim": ex.store.dim }))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let base = serde_json::to_value(&ckpt.meta.config)?;
    let mut overrides = a.overrides.clone();
    if a.rerank {
        overrides.push("eval.rerank=true".into());
    }
    let config = resolve(Some(&base), None, &overrides)?.config;
    let net = ckpt.restore_model(&Device::Cpu)?;
    let records = load_manifest(&a.manifest, &ckpt.meta.schema)?;
    let (protocol, q, g) = retrieval_protocol(&records);
    let rows: Vec<usize> = q.iter().chain(&g).copied().collect();
    let picked: Vec<ImageRecord> = rows.iter().map(|&i| records[i].clone()).collect();
    let root = manifest_root(&a.manifest, a.root.as_ref());
    let ex = extract_from_disk(&net, &ckpt.meta.preprocessor, &picked, &root, config.eval.batch_size)?;
    let qs = subset(&ex.store, &(0..q.len()).collect::<Vec<_>>())?;
    let gs = subset(&ex.store, &(q.len()..rows.len()).collect::<Vec<_>>())?;
    let report = evaluate_stores(protocol, &qs, &gs, &config.eval)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("eval.json"), &report)?;
    let r = report.primary();
    Ok(json!({
        "protocol": report.protocol,
        "num_query": report.num_query,
        "num_gallery": report.num_gallery,
        "reranked": report.reranked.is_some(),
        "mAP": r.map,
        "acc@1": r.acc_at(1),
        "acc@10": r.acc_at(10),
        "acc@20": r.acc_at(20),
        "acc@50": r.acc_at(50),
        "cmc": r.cmc,
    }))
}

pub fn cmd_index(a: &IndexArgs) -> Result<Value> {
    let store = EmbeddingStore::read(&a.store)?;
    let mut index = build_index(store, a.clusters, a.seed)?;
    if a.probe == 0 || a.probe > a.clusters {
        return Err(MmflError::Argument(format!("probe must lie in 1..={}", a.clusters)));
    }
    index.probe = a.probe;
    create_dir(&a.out)?;
    let store_path = std::fs::canonicalize(&a.store).map_err(|e| MmflError::io(&a.store, e))?;
    let file = IndexFile {
        store: store_path,
        centroids: index.centroids.clone(),
        assignments: index.assignments.clone(),
        probe: index.probe,
    };
    let path = a.out.join("index.json");
    write_json(&path, &file)?;
    let mut sizes = vec![0usize; a.clusters];
    for &c in &index.assignments {
        sizes[c] += 1;
    }
    Ok(json!({ "index": path, "rows": index.store.len(), "cluster_sizes": sizes }))
}

/// Reads an index file together with the store it points to.
pub fn read_index(path: &Path) -> Result<RetrievalIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| MmflError::io(path, e))?;
    let file: IndexFile = serde_json::from_str(&text)?;
    let store = EmbeddingStore::read(&file.store)?;
    if file.assignments.len() != store.len() {
        return Err(MmflError::Shape(format!(
            "index has {} assignments but the store has {} rows",
            file.assignments.len(),
            store.len()
        )));
    }
    Ok(RetrievalIndex {
        store,
        centroids: file.centroids,
        assignments: file.assignments,
        probe: file.probe,
    })
}

pub fn cmd_query(a: &QueryArgs) -> Result<Value> {
    let index = read_index(&a.index)?;
    let embedding: Vec<f32> = match (a.row, &a.image) {
        (Some(r), _) => {
            if r >= index.store.len() {
                return Err(MmflError::Argument(format!("row {r} is outside the store ({} rows)", index.store.len())));
            }
            index.store.row(r).to_vec()
        }
        (None, Some(img)) => {
            let ckpt_path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| MmflError::Argument("--image needs --checkpoint".into()))?;
            let ckpt = open_checkpoint(ckpt_path)?;
            let net = ckpt.restore_model(&Device::Cpu)?;
            let image = image::open(img)?.to_rgb8();
            let x = ckpt
                .meta
                .preprocessor
                .batch_tensor(&[&image], None, net.dtype(), net.device())?;
            let e = net.embed(&x)?.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
            e.into_iter().next().unwrap_or_default()
        }
        (None, None) => return Err(MmflError::Argument("give --row or --image".into())),
    };
    let hits = query_index(&index, &embedding, a.topk, a.probe.unwrap_or(index.probe))?;
    let results: Vec<Value> = hits
        .iter()
        .enumerate()
        .map(|(rank, h)| {
            let m = &index.store.meta[h.row];
            json!({ "rank": rank + 1, "row": h.row, "distance": h.distance, "pid": m.pid, "domain": m.domain, "path": m.path })
        })
        .collect();
    create_dir(&a.out)?;
    write_json(&a.out.join("query.json"), &results)?;
    Ok(json!({ "results": results }))
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Value> {
    let opts = SyntheticOptions {
        num_pids: a.pids,
        imgs_per_domain: a.per_domain,
        image_size: a.size,
        seed: a.seed,
        holdout_pids: a.holdout,
    };
    let records = generate_synthetic_dataset(&opts, &AttributeSchema::default(), &a.out)?;
    Ok(json!({ "manifest": a.out.join("manifest.jsonl"), "images": records.len() }))
}

pub fn cmd_stats(a: &StatsArgs) -> Result<Value> {
    let config: RunConfig = match &a.config {
        Some(p) => settings::load(Some(p), &a.overrides)?.config,
        None => {
            let mut o = vec![format!("preset={}", a.preset)];
            o.extend(a.overrides.iter().cloned());
            resolve(None, None, &o)?.config
        }
    };
    let stats = report_model_stats(&config.model, a.classes, a.runs, config.seed)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("stats.json"), &stats)?;
    Ok(serde_json::to_value(&stats)?)
}

pub fn cmd_metrics_attr(a: &MetricsAttrArgs) -> Result<Value> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let net = ckpt.restore_model(&Device::Cpu)?;
    let schema = &ckpt.meta.schema;
    let records = select_split(load_manifest(&a.manifest, schema)?, &a.split)?;
    let root = manifest_root(&a.manifest, a.root.as_ref());
    let ex = extract_from_disk(&net, &ckpt.meta.preprocessor, &records, &root, ckpt.meta.config.eval.batch_size)?;
    let mut targets = vec![Vec::with_capacity(records.len()); schema.num_types()];
    for r in &records {
        for (t, v) in schema.dense_targets(r.attributes.as_ref()).into_iter().enumerate() {
            targets[t].push(v);
        }
    }
    let metrics = attribute_metrics(&ex.attribute_scores, &targets, schema, a.topk)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("attributes.json"), &metrics)?;
    Ok(serde_json::to_value(&metrics)?)
}
