//! The training loop: PK batches, multi-task loss, Adam plus center SGD,
//! periodic retrieval evaluation and checkpointing.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::imageops::channel_mean;
use crate::data::{derive_seed, load_images, load_manifest, mixup, AttributeSchema, BatchPlan, ImageRecord, PkSampler, Preprocessor, Split};
use crate::error::{MmflError, Result};
use crate::eval::{evaluate_stores, extract, retrieval_protocol, subset, EvalReport};
use crate::losses::{attribute_loss, center_loss, compute_losses, pid_loss, total_loss, trihard_loss, BatchTargets, CenterState, LossComponents, LossReport};
use crate::model::MmflNet;
use crate::nn::layers::l2_normalize;
use crate::settings::RunConfig;
use crate::train::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::train::optim::{center_step, Adam, AdamConfig};
use crate::train::schedule::lr_at;

const MIXUP_TAG: u64 = u64::MAX;

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Headline retrieval numbers of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub acc_at_1: f64,
    pub acc_at_10: f64,
    pub acc_at_20: f64,
    pub acc_at_50: f64,
}

impl EvalSummary {
    pub fn from_report(r: &EvalReport) -> Self {
        let e = r.primary();
        Self {
            map: e.map,
            acc_at_1: e.acc_at(1),
            acc_at_10: e.acc_at(10),
            acc_at_20: e.acc_at(20),
            acc_at_50: e.acc_at(50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: LossReport,
    pub eval: Option<EvalSummary>,
}

/// Training records with their decoded images, aligned by index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub images: Vec<RgbImage>,
    pub schema: AttributeSchema,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>, images: Vec<RgbImage>, schema: AttributeSchema) -> Result<Self> {
        if records.len() != images.len() {
            return Err(MmflError::Shape(format!(
                "{} records but {} images",
                records.len(),
                images.len()
            )));
        }
        Ok(Self { records, images, schema })
    }

    /// Reads the configured manifest and every image it lists.
    pub fn load(config: &RunConfig, schema: AttributeSchema) -> Result<Self> {
        let manifest = config
            .data
            .manifest
            .as_ref()
            .ok_or_else(|| MmflError::Config("data.manifest is not set".into()))?;
        let records = load_manifest(manifest, &schema)?;
        let root = config.data_root().unwrap_or_default();
        let images = load_images(&records, &root)?;
        Self::new(records, images, schema)
    }

    /// Sorted distinct training pids; row `i` of every classifier is `class_map[i]`.
    pub fn class_map(&self) -> Vec<u64> {
        let mut pids: Vec<u64> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.pid)
            .collect();
        pids.sort_unstable();
        pids.dedup();
        pids
    }

    pub fn train_fill(&self) -> [u8; 3] {
        channel_mean(
            self.records
                .iter()
                .zip(&self.images)
                .filter(|(r, _)| r.split == Split::Train)
                .map(|(_, i)| i),
        )
    }
}

/// Final state of a `fit` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs: usize,
    pub steps: usize,
    pub best_map: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub net: MmflNet,
    pub centers: CenterState,
    pub adam: Adam,
    pub preprocessor: Preprocessor,
    pub class_map: Vec<u64>,
    pub data: Dataset,
    pub sampler: PkSampler,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub best_map: Option<f64>,
    pub history: Vec<EpochRecord>,
    label_of: HashMap<u64, usize>,
}

fn adam_config(c: &RunConfig) -> AdamConfig {
    AdamConfig {
        beta1: c.optim.beta1,
        beta2: c.optim.beta2,
        eps: c.optim.eps,
        weight_decay: c.optim.weight_decay,
    }
}

impl Trainer {
    pub fn new(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let class_map = data.class_map();
        let net = MmflNet::new(&config.model, &data.schema, class_map.len(), config.seed, DType::F32, &device)?;
        let centers = CenterState::new(
            class_map.len(),
            config.model.metric_dim(),
            derive_seed(config.seed, &[1]),
            DType::F32,
            &device,
        )?;
        let adam = Adam::new(&net.store, adam_config(&config))?;
        let preprocessor = Preprocessor::new(config.model.input_size, data.train_fill());
        Self::assemble(config, data, net, centers, adam, preprocessor, class_map, 0, 0, None, Vec::new())
    }

    /// Continues from a checkpoint; `data` must be the dataset it was trained on.
    pub fn resume(ckpt: &Checkpoint, data: Dataset) -> Result<Self> {
        Self::resume_with(ckpt, data, ckpt.meta.config.clone())
    }

    /// As `resume`, with a replacement config (e.g. more epochs).
    pub fn resume_with(ckpt: &Checkpoint, data: Dataset, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let m = &ckpt.meta;
        if data.class_map() != m.class_map {
            return Err(MmflError::Checkpoint("dataset pids differ from the checkpoint's class map".into()));
        }
        let net = ckpt.restore_model(&device)?;
        let centers = ckpt.restore_centers()?;
        let adam = ckpt.restore_adam(&net, adam_config(&config))?;
        Self::assemble(
            config,
            data,
            net,
            centers,
            adam,
            m.preprocessor.clone(),
            m.class_map.clone(),
            m.epoch,
            m.step,
            m.best_map,
            m.history.clone(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: RunConfig,
        data: Dataset,
        net: MmflNet,
        centers: CenterState,
        adam: Adam,
        preprocessor: Preprocessor,
        class_map: Vec<u64>,
        epoch: usize,
        step: usize,
        best_map: Option<f64>,
        history: Vec<EpochRecord>,
    ) -> Result<Self> {
        let sampler = PkSampler::new(&data.records, config.data.p, config.data.k, config.seed)?;
        let label_of = class_map.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Ok(Self {
            config,
            net,
            centers,
            adam,
            preprocessor,
            class_map,
            data,
            sampler,
            epoch,
            step,
            best_map,
            history,
            label_of,
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let o = &self.config.optim;
        lr_at(epoch, o.lr, &o.milestones, o.gamma)
    }

    pub fn targets(&self, plan: &BatchPlan) -> Result<BatchTargets> {
        let labels = plan
            .pids
            .iter()
            .map(|p| {
                self.label_of
                    .get(p)
                    .copied()
                    .ok_or_else(|| MmflError::Argument(format!("pid {p} is not a training class")))
            })
            .collect::<Result<_>>()?;
        let attributes = plan
            .indices
            .iter()
            .map(|&i| self.data.schema.dense_targets(self.data.records[i].attributes.as_ref()))
            .collect();
        Ok(BatchTargets {
            pids: plan.pids.clone(),
            labels,
            attributes,
        })
    }

    /// Images of a batch, augmented with per-sample seeds derived from `(epoch, batch, slot)`.
    pub fn batch_images(&self, plan: &BatchPlan, epoch: usize, batch: usize) -> Result<Tensor> {
        let imgs: Vec<&RgbImage> = plan.indices.iter().map(|&i| &self.data.images[i]).collect();
        let seeds: Vec<u64> = (0..plan.len())
            .map(|s| derive_seed(self.config.seed, &[epoch as u64, batch as u64, s as u64]))
            .collect();
        let aug = self
            .config
            .data
            .augment
            .then_some((&self.config.data.augmentation, seeds.as_slice()));
        self.preprocessor
            .batch_tensor(&imgs, aug, self.net.dtype(), self.net.device())
    }

    /// Forward, losses, backward and both optimizer updates for one batch.
    pub fn train_step(&mut self, plan: &BatchPlan, epoch: usize, batch: usize) -> Result<StepReport> {
        let lr = self.lr(epoch);
        let targets = self.targets(plan)?;
        let x = self.batch_images(plan, epoch, batch)?;
        let weights = self.config.loss;
        let (loss, report) = match self.config.data.mixup_alpha {
            None => {
                let out = self.net.forward(&x, true)?;
                compute_losses(&out, &targets, &self.centers, &weights)?
            }
            Some(alpha) => {
                let seed = derive_seed(self.config.seed, &[epoch as u64, batch as u64, MIXUP_TAG]);
                let mixed = mixup(&x, alpha, seed)?;
                let lam = mixed.lambda;
                let partner = BatchTargets {
                    pids: mixed.partner_targets(&targets.pids),
                    labels: mixed.partner_targets(&targets.labels),
                    attributes: mixed.partner_targets(&targets.attributes),
                };
                let cls = self.net.forward(&mixed.images, true)?;
                let lsr = ((attribute_loss(&cls, &targets, weights.epsilon)? * lam)?
                    + (attribute_loss(&cls, &partner, weights.epsilon)? * (1.0 - lam))?)?;
                let ce = ((pid_loss(&cls, &targets.labels)? * lam)? + (pid_loss(&cls, &partner.labels)? * (1.0 - lam))?)?;
                let clean = self.net.forward(&x, true)?;
                let f = l2_normalize(&clean.bundle.f_metric)?;
                let components = LossComponents {
                    lsr,
                    ce,
                    triplet: trihard_loss(&f, &targets.pids, weights.margin)?,
                    center: center_loss(&f, &targets.labels, self.centers.centers.as_tensor())?,
                };
                total_loss(&components, &weights)?
            }
        };
        if !report.is_finite() {
            let paths: Vec<&str> = plan
                .indices
                .iter()
                .map(|&i| self.data.records[i].image_path.as_str())
                .collect();
            return Err(MmflError::NonFinite {
                epoch,
                step: self.step,
                diagnostic: format!("losses {report:?}; pids {:?}; images {paths:?}", plan.pids),
            });
        }
        let grads = loss.backward()?;
        self.adam.step(&self.net.store, &grads, lr)?;
        center_step(
            &mut self.centers,
            &grads,
            &targets.labels,
            self.config.optim.center_lr,
            self.config.optim.center_momentum,
            weights.beta_center * plan.len() as f64,
        )?;
        self.step += 1;
        Ok(StepReport {
            epoch,
            step: self.step,
            batch,
            lr,
            loss: report,
        })
    }

    /// Runs the next epoch; `on_step` sees every step report.
    pub fn run_epoch(&mut self, on_step: &mut dyn FnMut(&StepReport) -> Result<()>) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let plans = self.sampler.epoch(epoch);
        let mut sum = LossReport::default();
        for (b, plan) in plans.iter().enumerate() {
            let r = self.train_step(plan, epoch, b)?;
            on_step(&r)?;
            sum.lsr += r.loss.lsr;
            sum.ce += r.loss.ce;
            sum.triplet += r.loss.triplet;
            sum.center += r.loss.center;
            sum.total += r.loss.total;
        }
        let n = plans.len().max(1) as f64;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            lr: self.lr(epoch),
            mean_loss: LossReport {
                lsr: sum.lsr / n,
                ce: sum.ce / n,
                triplet: sum.triplet / n,
                center: sum.center / n,
                total: sum.total / n,
            },
            eval: None,
        })
    }

    /// Retrieval evaluation over the dataset's query/gallery protocol.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let (protocol, q, g) = retrieval_protocol(&self.data.records);
        let rows: Vec<usize> = q.iter().chain(&g).copied().collect();
        let recs: Vec<ImageRecord> = rows.iter().map(|&i| self.data.records[i].clone()).collect();
        let imgs: Vec<RgbImage> = rows.iter().map(|&i| self.data.images[i].clone()).collect();
        let ex = extract(&self.net, &self.preprocessor, &recs, &imgs, self.config.eval.batch_size)?;
        let qs = subset(&ex.store, &(0..q.len()).collect::<Vec<_>>())?;
        let gs = subset(&ex.store, &(q.len()..rows.len()).collect::<Vec<_>>())?;
        evaluate_stores(protocol, &qs, &gs, &self.config.eval)
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            step: self.step,
            adam_step: self.adam.step,
            config: self.config.clone(),
            class_map: self.class_map.clone(),
            preprocessor: self.preprocessor.clone(),
            schema: self.data.schema.clone(),
            best_map: self.best_map,
            history: self.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.net, &self.centers, &self.adam, &self.checkpoint_meta())
    }

    fn due_for_eval(&self, epoch: usize) -> bool {
        let period = self.config.train.eval_period;
        period > 0 && ((epoch + 1) % period == 0 || epoch + 1 == self.config.train.epochs)
    }

    /// Trains until `train.epochs` epochs are complete. With `out_dir`, writes
    /// `config.json`, `train_log.jsonl`, `history.json`, `last.safetensors` and `best.safetensors`.
    pub fn fit(&mut self, out_dir: Option<&Path>) -> Result<FitSummary> {
        let mut log: Option<File> = None;
        let (mut last, mut best) = (None, None);
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| MmflError::io(dir, e))?;
            let cfg_path = dir.join("config.json");
            std::fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?)
                .map_err(|e| MmflError::io(&cfg_path, e))?;
            let log_path = dir.join("train_log.jsonl");
            let f = OpenOptions::new()
                .create(true)
                .append(self.epoch > 0)
                .write(true)
                .truncate(self.epoch == 0)
                .open(&log_path)
                .map_err(|e| MmflError::io(&log_path, e))?;
            log = Some(f);
            let b = dir.join("best.safetensors");
            if b.is_file() {
                best = Some(b);
            }
        }
        while self.epoch < self.config.train.epochs {
            let epoch = self.epoch;
            let mut write_step = |r: &StepReport| -> Result<()> {
                log::debug!("epoch {} step {} total {:.5}", r.epoch, r.step, r.loss.total);
                if let Some(f) = log.as_mut() {
                    serde_json::to_writer(&mut *f, r)?;
                    f.write_all(b"\n").map_err(|e| MmflError::io("train_log.jsonl", e))?;
                }
                Ok(())
            };
            let mut record = self.run_epoch(&mut write_step)?;
            let mut improved = false;
            if self.due_for_eval(epoch) {
                let report = self.evaluate()?;
                let summary = EvalSummary::from_report(&report);
                log::info!(
                    "epoch {epoch}: mAP {:.4} Acc@1 {:.4} loss {:.4}",
                    summary.map,
                    summary.acc_at_1,
                    record.mean_loss.total
                );
                if self.best_map.is_none_or(|b| summary.map > b) {
                    self.best_map = Some(summary.map);
                    improved = true;
                }
                record.eval = Some(summary);
            } else {
                let l = &record.mean_loss;
                log::info!(
                    "epoch {epoch}: loss {:.4} (lsr {:.4} ce {:.4} triplet {:.4} center {:.4})",
                    l.total,
                    l.lsr,
                    l.ce,
                    l.triplet,
                    l.center
                );
            }
            self.history.push(record);
            if let Some(dir) = out_dir {
                let p = dir.join("last.safetensors");
                self.save(&p)?;
                last = Some(p);
                if improved {
                    let b = dir.join("best.safetensors");
                    self.save(&b)?;
                    best = Some(b);
                }
                write_history(dir, &self.history)?;
            }
        }
        if let Some(dir) = out_dir {
            if last.is_none() {
                let p = dir.join("last.safetensors");
                self.save(&p)?;
                last = Some(p);
            }
            write_history(dir, &self.history)?;
        }
        Ok(FitSummary {
            epochs: self.epoch,
            steps: self.step,
            best_map: self.best_map,
            history: self.history.clone(),
            last_checkpoint: last,
            best_checkpoint: best,
        })
    }
}

fn write_history(dir: &Path, history: &[EpochRecord]) -> Result<()> {
    let p = dir.join("history.json");
    std::fs::write(&p, serde_json::to_string_pretty(history)?).map_err(|e| MmflError::io(&p, e))
}

/// Loads the configured dataset and trains from scratch.
pub fn fit(config: &RunConfig, schema: AttributeSchema, out_dir: Option<&Path>) -> Result<(Trainer, FitSummary)> {
    let data = Dataset::load(config, schema)?;
    let mut trainer = Trainer::new(config.clone(), data)?;
    let summary = trainer.fit(out_dir)?;
    Ok((trainer, summary))
}
