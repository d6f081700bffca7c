//! Run configuration: preset defaults, file values, environment and dotted
//! command-line overrides, with the origin of every resolved key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::ModelConfig;
use crate::data::AugmentConfig;
use crate::error::{MmflError, Result};
use crate::losses::LossWeights;

pub const SEED_ENV: &str = "MMFL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub manifest: Option<PathBuf>,
    /// Directory image paths are relative to; defaults to the manifest's directory.
    pub root: Option<PathBuf>,
    /// Identities per batch minus one.
    pub p: usize,
    /// Images per identity and domain.
    pub k: usize,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Beta parameter of mixup; mixup is off when absent.
    pub mixup_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub center_lr: f64,
    pub center_momentum: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    /// Evaluate every this many epochs (and after the last one); 0 disables evaluation.
    pub eval_period: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub k_max: usize,
    pub batch_size: usize,
    pub rerank: bool,
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
    pub n_clusters: usize,
    pub probe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub data: DataSettings,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimSettings,
    pub train: TrainSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn full() -> Self {
        Self {
            preset: "full".into(),
            seed: 0,
            data: DataSettings {
                manifest: None,
                root: None,
                p: 3,
                k: 4,
                augment: true,
                augmentation: AugmentConfig::default(),
                mixup_alpha: None,
            },
            model: ModelConfig::full(),
            loss: LossWeights::default(),
            optim: OptimSettings {
                lr: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 5e-4,
                center_lr: 0.5,
                center_momentum: 0.9,
                milestones: vec![50, 100],
                gamma: 0.1,
            },
            train: TrainSettings {
                epochs: 120,
                eval_period: 10,
            },
            eval: EvalSettings {
                k_max: 50,
                batch_size: 16,
                rerank: false,
                k1: 20,
                k2: 6,
                lambda: 0.3,
                n_clusters: 16,
                probe: 3,
            },
        }
    }

    /// Desk-scale settings used by the synthetic overfit run.
    pub fn tiny() -> Self {
        let mut c = Self::full();
        c.preset = "tiny".into();
        c.model = ModelConfig::tiny();
        c.optim.lr = 2e-2;
        c.optim.milestones = vec![20];
        c.train.epochs = 30;
        c.eval.batch_size = 32;
        c.eval.n_clusters = 4;
        c.eval.probe = 2;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(MmflError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if o.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MmflError::Config("optim.milestones must be strictly increasing".into()));
        }
        if self.train.epochs > 0 && o.milestones.iter().any(|&m| m >= self.train.epochs) {
            return Err(MmflError::Config(format!(
                "optim.milestones {:?} must all be below train.epochs {}",
                o.milestones, self.train.epochs
            )));
        }
        if !(o.lr >= 0.0) || !(o.center_lr >= 0.0) || !(o.gamma > 0.0) {
            return Err(MmflError::Config("learning rates must be >= 0 and gamma > 0".into()));
        }
        if self.data.p == 0 || self.data.k == 0 {
            return Err(MmflError::Config("data.p and data.k must be at least 1".into()));
        }
        if let Some(a) = self.data.mixup_alpha {
            if !(a > 0.0) {
                return Err(MmflError::Config(format!("data.mixup_alpha must be > 0, got {a}")));
            }
        }
        let e = &self.eval;
        if e.k_max == 0 || e.batch_size == 0 {
            return Err(MmflError::Config("eval.k_max and eval.batch_size must be positive".into()));
        }
        if e.k1 <= e.k2 {
            return Err(MmflError::Config("eval.k1 must exceed eval.k2".into()));
        }
        if !(0.0..=1.0).contains(&e.lambda) {
            return Err(MmflError::Config("eval.lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Image root: explicit `data.root`, else the manifest's directory.
    pub fn data_root(&self) -> Option<PathBuf> {
        self.data.root.clone().or_else(|| {
            self.data
                .manifest
                .as_ref()
                .map(|m| m.parent().map(Path::to_path_buf).unwrap_or_default())
        })
    }
}

/// Where a resolved key's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Env,
    Override,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

impl ResolvedConfig {
    /// Canonical JSON snapshot; resolving it as a config file reproduces `config`.
    pub fn snapshot(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.config)?)
    }
}

fn leaves(value: &Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(v, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Merges `src` into `dst`, refusing keys absent from `dst`; records leaf origins.
fn merge(dst: &mut Value, src: &Value, prefix: &str, source: Source, prov: &mut BTreeMap<String, Source>) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let Some(slot) = d.get_mut(k) else {
                    let mut ls = Vec::new();
                    leaves(v, &path, &mut ls);
                    let key = ls.into_iter().next().unwrap_or(path);
                    return Err(MmflError::Config(format!("unknown config key {key:?}")));
                };
                merge(slot, v, &path, source, prov)?;
            }
            Ok(())
        }
        (d, s) => {
            if d.is_object() {
                return Err(MmflError::Config(format!(
                    "config key {prefix:?} is a section and cannot be set to a scalar"
                )));
            }
            *d = s.clone();
            let mut ls = Vec::new();
            leaves(s, prefix, &mut ls);
            for l in ls {
                prov.insert(l, source);
            }
            prov.insert(prefix.to_string(), source);
            Ok(())
        }
    }
}

/// Parses `a.b.c=value` into a nested object; the value is JSON when it parses, else a string.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| MmflError::Argument(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(MmflError::Argument(format!("override {text:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut nested = value;
    for seg in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(seg.to_string(), nested);
        nested = Value::Object(m);
    }
    Ok((key.to_string(), nested))
}

/// Resolves defaults < file < `MMFL_SEED` < overrides.
pub fn resolve(
    file: Option<&Value>,
    env_seed: Option<&str>,
    overrides: &[String],
) -> Result<ResolvedConfig> {
    let parsed: Vec<(String, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
    let preset_of = |v: &Value| v.get("preset").and_then(Value::as_str).map(str::to_string);
    let preset = parsed
        .iter()
        .rev()
        .find_map(|(_, v)| preset_of(v))
        .or_else(|| file.and_then(preset_of))
        .unwrap_or_else(|| "full".to_string());

    let mut tree = serde_json::to_value(RunConfig::preset(&preset)?)?;
    let mut prov = BTreeMap::new();
    let mut all = Vec::new();
    leaves(&tree, "", &mut all);
    for l in all {
        prov.insert(l, Source::Default);
    }
    if let Some(f) = file {
        if !f.is_object() {
            return Err(MmflError::Config("config file must hold a JSON object".into()));
        }
        merge(&mut tree, f, "", Source::File, &mut prov)?;
    }
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| MmflError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        merge(&mut tree, &serde_json::json!({ "seed": seed }), "", Source::Env, &mut prov)?;
    }
    for (_, v) in &parsed {
        merge(&mut tree, v, "", Source::Override, &mut prov)?;
    }
    let config: RunConfig =
        serde_json::from_value(tree).map_err(|e| MmflError::Config(format!("invalid config: {e}")))?;
    config.validate()?;
    Ok(ResolvedConfig { config, provenance: prov })
}

/// Reads a config file and resolves it with the process environment and `overrides`.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| MmflError::io(p, e))?;
            Some(serde_json::from_str::<Value>(&text)?)
        }
        None => None,
    };
    let env = std::env::var(SEED_ENV).ok();
    resolve(file.as_ref(), env.as_deref(), overrides)
}
