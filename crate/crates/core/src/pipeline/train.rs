use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::optim::{AdamW, AdamWConfig};
use super::ImageModel;
use crate::config::ModelConfig;
use crate::datagen::{Image, ImagePair};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossTerm};
use crate::metrics;

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, C, H, W)`.
    pub lr: Tensor,
    /// `(B, C, 2H, 2W)`.
    pub hr: Tensor,
    pub targets: Vec<Vec<u32>>,
}

impl Batch {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a ImagePair>) -> Result<Self> {
        let pairs: Vec<&ImagePair> = pairs.into_iter().collect();
        if pairs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(Self {
            lr: Image::stack(pairs.iter().map(|p| &p.lr))?,
            hr: Image::stack(pairs.iter().map(|p| &p.hr))?,
            targets: pairs.iter().map(|p| p.label.indices.clone()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total number of optimizer steps, counted from initialization.
    pub steps: u64,
    pub seed: u64,
    /// Reshuffle the sample order every epoch (seeded by `seed` and the epoch index).
    pub shuffle: bool,
    /// 0 disables the corresponding action.
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            shuffle: true,
            log_every: 1,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainOptions {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Dataset indices of the batch used at `step`. The sample stream is the
/// concatenation of per-epoch orders, so the batch depends only on the step
/// index, which makes resumed runs replay the same data.
pub fn batch_indices(n: usize, batch_size: usize, step: u64, seed: u64, shuffle: bool) -> Vec<usize> {
    let start = step as usize * batch_size;
    let mut order: Option<(usize, Vec<usize>)> = None;
    (start..start + batch_size)
        .map(|pos| {
            let epoch = pos / n;
            if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut idx: Vec<usize> = (0..n).collect();
                if shuffle {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    idx.shuffle(&mut rng);
                }
                order = Some((epoch, idx));
            }
            order.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub sr_loss: f64,
    pub rec_loss: f64,
    pub total: f64,
    pub per_term: Vec<LossTerm>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_word_accuracy: Option<f64>,
}

pub struct Trainer {
    pub model: ImageModel,
    pub opt: AdamW,
    pub seed: u64,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, seed: u64, opt: AdamWConfig) -> Result<Self> {
        Ok(Self {
            model: ImageModel::new(cfg, seed)?,
            opt: AdamW::new(opt),
            seed,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut opt = AdamW::new(ckpt.optimizer);
        opt.restore(&model.store, ckpt.step, ckpt.adam_m.clone(), ckpt.adam_v.clone())?;
        Ok(Self {
            model,
            opt,
            seed: ckpt.seed,
        })
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.model, &self.opt, self.seed)
    }

    /// Forward in training mode, batch-mean objective, one optimizer update.
    /// Aborts before updating if any loss term is not finite.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let trace = self.model.forward(&batch.lr, true)?;
        let objective = total_loss(&trace, &batch.hr, &batch.targets)?;
        if let Some(t) = objective.report.first_non_finite() {
            return Err(Error::NonFinite(format!("{}[{}] = {}", t.name, t.index, t.value)));
        }
        let grads = objective.total.backward()?;
        self.opt.apply(&self.model.store, &grads)?;
        Ok(objective.report)
    }

    /// Trains until `opts.steps` total steps. Writes `train_log.jsonl`, periodic
    /// `ckpt_NNNNNN.safetensors` and `final.safetensors` into `out_dir` when given.
    pub fn run(
        &mut self,
        dataset: &[ImagePair],
        opts: &TrainOptions,
        out_dir: Option<&Path>,
        mut on_record: impl FnMut(&LogRecord),
    ) -> Result<Vec<LogRecord>> {
        if dataset.is_empty() {
            return Err(Error::Dataset {
                line: 0,
                msg: "training set is empty".into(),
            });
        }
        if opts.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                let file = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(self.step() > 0)
                    .truncate(self.step() == 0)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, file))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step() < opts.steps {
            let step = self.step();
            let idx = batch_indices(dataset.len(), opts.batch_size, step, opts.seed, opts.shuffle);
            let batch = Batch::from_pairs(idx.iter().map(|&i| &dataset[i]))?;
            let report = self.train_step(&batch)?;
            let done = self.step();
            let eval_now = opts.eval_every > 0 && done.is_multiple_of(opts.eval_every);
            let log_now = (opts.log_every > 0 && done.is_multiple_of(opts.log_every)) || eval_now || done == opts.steps;
            if log_now {
                let eval_word_accuracy = if eval_now {
                    Some(metrics::training_accuracy(&self.model, dataset, opts.batch_size)?)
                } else {
                    None
                };
                let rec = LogRecord {
                    step: done,
                    sr_loss: report.sr_loss,
                    rec_loss: report.rec_loss,
                    total: report.total,
                    per_term: report.per_term,
                    eval_word_accuracy,
                };
                if let Some((path, file)) = log.as_mut() {
                    let line = serde_json::to_string(&rec).expect("log record serializes");
                    writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
                }
                on_record(&rec);
                records.push(rec);
            }
            if let Some(dir) = out_dir {
                if opts.checkpoint_every > 0 && done.is_multiple_of(opts.checkpoint_every) {
                    save_checkpoint(&self.checkpoint()?, &dir.join(format!("ckpt_{done:06}.safetensors")))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&self.checkpoint()?, &dir.join("final.safetensors"))?;
        }
        Ok(records)
    }
}

/// Trains a fresh model on `dataset` and returns its final checkpoint and log.
pub fn fit(dataset: &[ImagePair], cfg: &ModelConfig, opts: &TrainOptions, out_dir: Option<&Path>) -> Result<(Checkpoint, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(cfg.clone(), opts.seed, opts.optimizer())?;
    let records = trainer.run(dataset, opts, out_dir, |_| {})?;
    Ok((trainer.checkpoint()?, records))
}
