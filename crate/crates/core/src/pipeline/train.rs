use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::data::{Dataset, Sample};
use super::loss::topk_cross_entropy;
use super::metrics::{ConfusionMatrix, IouReport};
use super::optim::{poly_lr, AdamW};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub backbone_lr_mult: f64,
    pub topk_frac: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub poly_power: f64,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 3000,
            weight_decay: 0.05,
            backbone_lr_mult: 0.1,
            topk_frac: 0.2,
            batch_size: 8,
            seed: 7,
            poly_power: 0.9,
            eval_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.topk_frac > 0.0 && self.topk_frac <= 1.0) {
            return Err(Error::config("topk_frac", format!("{} is not in (0, 1]", self.topk_frac)));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::config("warmup_steps", "must be smaller than total_steps"));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::config("base_lr", "must be a non-negative number"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be a non-negative number"));
        }
        if !(self.backbone_lr_mult.is_finite() && self.backbone_lr_mult >= 0.0) {
            return Err(Error::config("backbone_lr_mult", "must be a non-negative number"));
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return Err(Error::config("poly_power", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        poly_lr(step, self.base_lr, self.warmup_steps, self.total_steps, self.poly_power)
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// One line of `eval.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Model, parameters and optimizer state of a training run.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub opt: AdamW,
    /// Completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = model_cfg.init_params(cfg.seed)?;
        Ok(Trainer { model: Model::new(model_cfg)?, cfg, params, opt: AdamW::default(), step: 0 })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(model_cfg: ModelConfig, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg)?;
        let fresh = model.cfg.init_params(cfg.seed)?;
        for (name, t) in fresh.iter() {
            let have = ckpt.params.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::config(name, format!("checkpoint shape {:?}, model {:?}", have.shape(), t.shape())));
            }
        }
        let step = ckpt.meta.get("step").map_or(0, |&s| s as usize);
        Ok(Trainer { model, cfg, params: ckpt.params.clone(), opt: ckpt.optimizer.clone().unwrap_or_default(), step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.optimizer = Some(self.opt.clone());
        ck.meta.insert("step".into(), self.step as f32);
        ck.set_model_config(&self.model.cfg);
        ck
    }

    /// Sample indices of the batch for `step`, a pure function of `(seed, step)`.
    pub fn batch_indices(&self, step: usize, n_samples: usize) -> Vec<usize> {
        let mut r = rng::substream(self.cfg.seed, rng::stream::BATCHES, step as u64);
        rand::seq::index::sample(&mut r, n_samples, self.cfg.batch_size.min(n_samples)).into_vec()
    }

    /// Loss of one sample; adds `scale * dloss/dparams` into the parameter grads.
    fn accumulate_sample(&mut self, sample: &Sample, scale: f64) -> Result<f64> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let out = self.model.forward(tape.constant(sample.image_tensor()), &p)?;
        let labels: Arc<[u32]> = sample.label_ids().into();
        let loss = topk_cross_entropy(out.logits, labels, self.cfg.topk_frac)?;
        let value = f64::from(loss.item());
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(loss.scale(scale)?)?;
        self.params.accumulate(&p, &grads)?;
        Ok(value)
    }

    /// One optimizer step on the batch for the current step.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
        }
        let step = self.step;
        let batch = self.batch_indices(step, data.len());
        let scale = 1.0 / batch.len() as f64;
        self.params.zero_grads();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let l = match self.accumulate_sample(&data.samples[i], scale) {
                Err(Error::NonFinite { op }) => {
                    return Err(self.diverged(step, &batch, &losses, &format!("non-finite values in {op}")))
                }
                other => other?,
            };
            if !l.is_finite() {
                losses.push(l);
                return Err(self.diverged(step, &batch, &losses, "non-finite loss"));
            }
            losses.push(l);
        }
        let loss = losses.iter().sum::<f64>() * scale;
        let lr = self.cfg.lr(step);
        self.opt.update(&mut self.params, lr, self.cfg.weight_decay, self.cfg.backbone_lr_mult)?;
        self.step += 1;
        Ok(StepRecord { step, lr, loss })
    }

    fn diverged(&self, step: usize, batch: &[usize], losses: &[f64], what: &str) -> Error {
        let max_abs = self.params.iter().flat_map(|(_, t)| t.data().iter()).fold(0f32, |m, v| m.max(v.abs()));
        let detail = format!(
            "{what}; batch samples {batch:?}; per-sample losses so far {losses:?}; max |param| {max_abs}; optimizer step {}",
            self.opt.step
        );
        Error::Diverged { step: step as u64, detail }
    }

    pub fn evaluate(&self, data: &Dataset, threads: usize) -> Result<IouReport> {
        evaluate(&self.model, &self.params, data, threads)
    }
}

/// Predicted label map of one sample.
pub fn predict_labels(model: &Model, params: &ParamStore<f32>, sample: &Sample) -> Result<Vec<u32>> {
    Ok(model.predict(params, &sample.image_tensor())?.0.labels)
}

/// Dataset mIoU. Samples are sharded over up to `threads` threads; each shard
/// accumulates its own confusion matrix and the shards are summed.
pub fn evaluate(model: &Model, params: &ParamStore<f32>, data: &Dataset, threads: usize) -> Result<IouReport> {
    let n = data.len();
    let threads = threads.clamp(1, n.max(1));
    let chunk = n.div_ceil(threads).max(1);
    let shards: Vec<Result<ConfusionMatrix>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .samples
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut cm = ConfusionMatrix::new(data.n_classes);
                    for sample in part {
                        cm.add(&predict_labels(model, params, sample)?, &sample.label_ids());
                    }
                    Ok(cm)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Internal("evaluation thread panicked".into()))))
            .collect()
    });
    let mut total = ConfusionMatrix::new(data.n_classes);
    for cm in shards {
        total.merge(&cm?);
    }
    Ok(total.report())
}

/// Where a run writes its logs and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    pub eval_threads: usize,
}

pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub checkpoint: Checkpoint,
}

/// Runs `trainer` until `total_steps`, logging and evaluating along the way.
///
/// With an output directory this writes `metrics.jsonl`, `eval.jsonl` and
/// `checkpoint.spx` (refreshed at every evaluation and at the end). A
/// divergence writes `diverged.txt` before returning the error.
pub fn run(trainer: &mut Trainer, train: &Dataset, val: Option<&Dataset>, out: &RunOutput) -> Result<TrainSummary> {
    let resuming = trainer.step > 0;
    let mut metrics = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(JsonLines::open(&dir.join("metrics.jsonl"), resuming)?)
        }
        None => None,
    };
    let mut eval_log = match &out.dir {
        Some(dir) => Some(JsonLines::open(&dir.join("eval.jsonl"), resuming)?),
        None => None,
    };
    let total = trainer.cfg.total_steps;
    let mut records = Vec::new();
    let mut evals = Vec::new();
    let mut last_miou = None;
    while trainer.step < total {
        let rec = match trainer.train_step(train) {
            Ok(r) => r,
            Err(e @ Error::Diverged { .. }) => {
                if let Some(dir) = &out.dir {
                    let path = dir.join("diverged.txt");
                    if let Err(io) = fs::write(&path, format!("{e}\n")) {
                        warn!("could not write {}: {io}", path.display());
                    }
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(m) = metrics.as_mut() {
            m.write(&rec)?;
        }
        if rec.step % 50 == 0 {
            info!("step {} lr {:.3e} loss {:.4}", rec.step, rec.lr, rec.loss);
        }
        records.push(rec);
        let done = trainer.step;
        let interval = trainer.cfg.eval_interval;
        if let Some(v) = val {
            if (interval > 0 && done.is_multiple_of(interval)) || done == total {
                let report = trainer.evaluate(v, out.eval_threads)?;
                info!("step {done} val mIoU {:.4}", report.mean);
                let rec = EvalRecord { step: done, miou: report.mean, per_class: report.per_class };
                if let Some(l) = eval_log.as_mut() {
                    l.write(&rec)?;
                }
                last_miou = Some(rec.miou);
                evals.push(rec);
                if let Some(dir) = &out.dir {
                    with_miou(trainer.checkpoint(), last_miou).save(&dir.join("checkpoint.spx"))?;
                }
            }
        }
    }
    let checkpoint = with_miou(trainer.checkpoint(), last_miou);
    if let Some(dir) = &out.dir {
        checkpoint.save(&dir.join("checkpoint.spx"))?;
    }
    Ok(TrainSummary { records, evals, checkpoint })
}

fn with_miou(mut ck: Checkpoint, miou: Option<f64>) -> Checkpoint {
    if let Some(m) = miou {
        ck.meta.insert("eval_miou".into(), m as f32);
    }
    ck
}

struct JsonLines {
    path: PathBuf,
    w: BufWriter<File>,
}

impl JsonLines {
    /// Truncates for a fresh run; appends when continuing one.
    fn open(path: &Path, append: bool) -> Result<Self> {
        let f = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(JsonLines { path: path.to_path_buf(), w: BufWriter::new(f) })
    }

    fn write<S: Serialize>(&mut self, rec: &S) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::format(&self.path, e.to_string()))?;
        writeln!(self.w, "{line}").and_then(|_| self.w.flush()).map_err(|e| Error::io(&self.path, e))
    }
}
