//! End-to-end training through both channels.
//!
//! Every batch draws fresh messages and noise from an rng derived from
//! `(seed, batch index)`, so a run resumed from a checkpoint replays exactly
//! the batches an uninterrupted run would have seen.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::archive::{self, TensorFile};
use crate::autodiff::Var;
use crate::channel::{derive_seed, rng_from_seed};
use crate::codec::{jpsd_logits, run_ipse, MessageBatch, Noise, Snrs};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::networks::{freeze_stats, Model, NormMode};
use crate::tensor::{Scalar, Tensor};

/// Cross-entropy of the true class, summed over the blocks of a message and
/// averaged over `batch` messages.
///
/// The loss selects the logit of the true label `y_i`; an indicator written
/// as `1{y_i != c}` would reward the wrong classes and is not what a
/// cross-entropy classifier loss means.
pub fn cross_entropy_loss<S: Scalar>(logits: &Var<S>, labels: &[usize], batch: usize) -> Var<S> {
    logits.cross_entropy(labels, batch)
}

/// Forward and feedback SNRs in effect at `batch_index`.
///
/// Segments run back to back and interpolate linearly in dB; once all
/// segments are exhausted the target SNRs apply.
pub fn curriculum_snrs(batch_index: u64, train: &TrainConfig, target: Snrs) -> Snrs {
    let mut start = 0u64;
    for seg in &train.curriculum {
        if batch_index < start + seg.length {
            let f = (batch_index - start) as f64 / seg.length as f64;
            return Snrs::new(
                seg.ff_start_db + f * (seg.ff_end_db - seg.ff_start_db),
                seg.fb_start_db + f * (seg.fb_end_db - seg.fb_start_db),
            );
        }
        start += seg.length;
    }
    target
}

/// Polynomial decay: `lr_init * (1 - t / total)^power + lr_final`.
pub fn lr_at(batch_index: u64, train: &TrainConfig) -> f64 {
    let total = train.total_batches.max(1) as f64;
    let frac = (batch_index as f64 / total).min(1.0);
    train.lr_init * (1.0 - frac).powf(train.lr_decay.power) + train.lr_decay.lr_final
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = S::from_f64_lossy(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

pub fn global_norm<S: Scalar>(tensors: &[Tensor<S>]) -> f64 {
    tensors
        .iter()
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Adam with decoupled weight decay applied to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(train: &TrainConfig, params: &[Tensor<S>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamW {
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.adam_eps,
            weight_decay: train.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = S::from_f64_lossy(1.0 - lr * self.weight_decay);
        let (b1, b2) = (S::from_f64_lossy(self.beta1), S::from_f64_lossy(self.beta2));
        let (one, eps) = (S::one(), S::from_f64_lossy(self.eps));
        let step = S::from_f64_lossy(lr / bc1);
        let bc2_sqrt = S::from_f64_lossy(bc2.sqrt());
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                p[i] = p[i] * decay;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] = p[i] - step * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepReport {
    /// Zero-based index of the batch just processed.
    pub batch_index: u64,
    pub lr: f64,
    pub snr_ff_db: f64,
    pub snr_fb_db: f64,
    /// Loss per message.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Training state: model, optimizer moments and position in the schedule.
pub struct Trainer<S: Scalar> {
    pub model: Model<S>,
    pub optimizer: AdamW<S>,
    pub batch_index: u64,
    pub best_loss: f64,
    pub loss_history: Vec<f64>,
}

/// Everything the trainer holds when a step produces a non-finite loss.
#[derive(Debug, Serialize)]
pub struct DiagnosticDump {
    pub batch_index: u64,
    pub lr: f64,
    pub snr_ff_db: f64,
    pub snr_fb_db: f64,
    pub loss: f64,
    pub non_finite_params: Vec<String>,
    pub param_norms: Vec<(String, f64)>,
    pub recent_losses: Vec<f64>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let model = Model::<S>::new(config, derive_seed(config.train.seed, "init"))?;
        Ok(Self::from_model(model))
    }

    pub fn from_model(model: Model<S>) -> Self {
        let optimizer = AdamW::new(&model.config.train, model.params.tensors());
        Trainer {
            model,
            optimizer,
            batch_index: 0,
            best_loss: f64::INFINITY,
            loss_history: Vec::new(),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.model.config
    }

    /// Loss and parameter gradients on the batch with the given index, without
    /// updating anything.
    pub fn loss_and_grads(&self, batch_index: u64, snrs: Snrs) -> Result<(f64, Vec<Tensor<S>>)> {
        let cfg = &self.model.config;
        let proto = &cfg.protocol;
        let mut rng = rng_from_seed(derive_seed(cfg.train.seed, &format!("train-batch-{batch_index}")));
        let batch = cfg.train.batch_size;
        let messages = MessageBatch::random(batch, proto.message_bits, &mut rng);
        let noise = Noise::sample(&proto.layout(), batch, &mut rng);
        let params = self.model.params.bind(true);
        let episode = run_ipse(&self.model, &params, &messages, snrs, &noise, NormMode::Train)?;
        let logits = jpsd_logits(&self.model, &params, &episode)?;
        let loss = cross_entropy_loss(&logits, &messages.labels(proto.m), batch);
        let value = loss.value().get(0, 0).as_f64();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        drop(episode);
        drop(logits);
        let grads = loss.backward();
        Ok((value, params.vars().iter().map(|v| grads.get_or_zeros(v)).collect()))
    }

    /// One optimizer step on the next batch of the schedule.
    pub fn step(&mut self) -> Result<StepReport> {
        let cfg = self.model.config.clone();
        let index = self.batch_index;
        let snrs = curriculum_snrs(index, &cfg.train, Snrs::from_protocol(&cfg.protocol));
        let lr = lr_at(index, &cfg.train);
        let (loss, mut grads) = self.loss_and_grads(index, snrs)?;
        let report = |grad_norm| StepReport {
            batch_index: index,
            lr,
            snr_ff_db: snrs.ff_db,
            snr_fb_db: snrs.fb_db,
            loss,
            grad_norm,
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss} at batch {index}")));
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.train.grad_clip_threshold);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm at batch {index}")));
        }
        self.optimizer.update(self.model.params.tensors_mut(), &grads, lr);
        self.batch_index += 1;
        self.loss_history.push(loss);
        Ok(report(grad_norm))
    }

    pub fn diagnostic_dump(&self, loss: f64) -> DiagnosticDump {
        let cfg = &self.model.config;
        let snrs = curriculum_snrs(self.batch_index, &cfg.train, Snrs::from_protocol(&cfg.protocol));
        DiagnosticDump {
            batch_index: self.batch_index,
            lr: lr_at(self.batch_index, &cfg.train),
            snr_ff_db: snrs.ff_db,
            snr_fb_db: snrs.fb_db,
            loss,
            non_finite_params: self
                .model
                .params
                .iter()
                .filter(|(_, t)| !t.all_finite())
                .map(|(n, _)| n.to_string())
                .collect(),
            param_norms: self
                .model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.sum_sq().as_f64().sqrt()))
                .collect(),
            recent_losses: self.loss_history.iter().rev().take(20).rev().copied().collect(),
        }
    }

    /// Writes `model.wt` and `optimizer.wt` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let mut meta = toml::Table::new();
        meta.insert("batch_index".into(), toml::Value::Integer(self.batch_index as i64));
        meta.insert("optimizer_step".into(), toml::Value::Integer(self.optimizer.step as i64));
        meta.insert("best_loss".into(), toml::Value::Float(self.best_loss));
        archive::save_model(&self.model, &dir.join("model.wt"), meta.clone())?;
        let names = self.model.params.names();
        let mut tensors: Vec<(String, &Tensor<S>)> = Vec::new();
        for (i, name) in names.iter().enumerate() {
            tensors.push((format!("m.{name}"), &self.optimizer.m[i]));
            tensors.push((format!("v.{name}"), &self.optimizer.v[i]));
        }
        archive::write_tensors(&dir.join("optimizer.wt"), &self.model.config, &tensors, (false, false), meta)
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let (model, file) = archive::load_model::<S>(&dir.join("model.wt"))?;
        let opt_file = TensorFile::read(&dir.join("optimizer.wt"))?;
        let int = |f: &TensorFile, key: &str| -> Result<u64> {
            f.manifest
                .metadata
                .get(key)
                .and_then(|v| v.as_integer())
                .map(|v| v as u64)
                .ok_or_else(|| Error::Archive {
                    entry: key.to_string(),
                    reason: "missing checkpoint counter".into(),
                })
        };
        let mut trainer = Trainer::from_model(model);
        trainer.batch_index = int(&file, "batch_index")?;
        trainer.optimizer.step = int(&opt_file, "optimizer_step")?;
        trainer.best_loss = file
            .manifest
            .metadata
            .get("best_loss")
            .and_then(|v| v.as_float())
            .unwrap_or(f64::INFINITY);
        for (i, name) in trainer.model.params.names().to_vec().iter().enumerate() {
            for (prefix, dst) in [("m", &mut trainer.optimizer.m[i]), ("v", &mut trainer.optimizer.v[i])] {
                let entry = format!("{prefix}.{name}");
                let t = opt_file.tensor::<S>(&entry)?;
                if t.shape() != dst.shape() {
                    return Err(Error::Archive {
                        entry,
                        reason: format!("shape {:?}, expected {:?}", t.shape(), dst.shape()),
                    });
                }
                *dst = t;
            }
        }
        Ok(trainer)
    }
}

pub const METRICS_HEADER: &str = "batch,lr,snr_ff_db,snr_fb_db,loss";

/// Where a training run writes and how chatty it is.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Print a progress line every this many batches (0 = silent).
    pub log_every: u64,
    /// Stop after this batch index instead of `total_batches` (the final
    /// freeze and archive are skipped when stopping early).
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub trainer: Trainer<S>,
    pub archive: Option<PathBuf>,
    pub metrics: PathBuf,
}

fn checkpoint_dirs(out: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut dirs = Vec::new();
    if !out.exists() {
        return Ok(dirs);
    }
    for entry in fs::read_dir(out).map_err(|e| Error::io(out, e))? {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("ckpt_").and_then(|s| s.parse::<u64>().ok()) {
            dirs.push((n, entry.path()));
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Rewrites the metrics log keeping rows up to and including `batches`
/// batches, so a resumed run appends where the checkpoint left off.
fn prepare_metrics(path: &Path, batches: u64) -> Result<fs::File> {
    let mut kept = vec![METRICS_HEADER.to_string()];
    if batches > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|b| b.parse::<u64>().ok()).is_some_and(|b| b <= batches))
                    .map(str::to_string),
            );
        }
    }
    let mut body = kept.join("\n");
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

/// Runs the full schedule, checkpointing along the way, then freezes the
/// normalization statistics and writes `model.wt` to the output directory.
pub fn train_loop<S: Scalar>(config: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome<S>> {
    config.validate().into_result()?;
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match &opts.resume {
        Some(dir) => {
            let t = Trainer::<S>::load_checkpoint(dir)?;
            if t.model.config != *config {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint {} was written with config {}, not {}",
                    dir.display(),
                    t.model.config.hash(),
                    config.hash()
                )));
            }
            t
        }
        None => Trainer::<S>::new(config)?,
    };
    let train = config.train.clone();
    let metrics_path = out.join("metrics.csv");
    let mut metrics = prepare_metrics(&metrics_path, trainer.batch_index)?;
    let end = opts.stop_after.unwrap_or(train.total_batches).min(train.total_batches);
    let mut window = Vec::new();

    while trainer.batch_index < end {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(Error::Numerical(msg)) => {
                let dump = trainer.diagnostic_dump(f64::NAN);
                let path = out.join("diagnostic.json");
                let text = serde_json::to_string_pretty(&dump).unwrap_or_default();
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                return Err(Error::Numerical(format!("{msg}; state dumped to {}", path.display())));
            }
            Err(e) => return Err(e),
        };
        writeln!(
            metrics,
            "{},{},{},{},{}",
            report.batch_index + 1,
            report.lr,
            report.snr_ff_db,
            report.snr_fb_db,
            report.loss
        )
        .map_err(|e| Error::io(&metrics_path, e))?;
        window.push(report.loss);
        if opts.log_every > 0 && trainer.batch_index % opts.log_every == 0 {
            eprintln!(
                "batch {:>7}  lr {:.2e}  snr ({:+.2}, {:+.2}) dB  loss {:.4}  |g| {:.3}",
                trainer.batch_index, report.lr, report.snr_ff_db, report.snr_fb_db, report.loss, report.grad_norm
            );
        }
        if train.checkpoint_interval > 0 && trainer.batch_index % train.checkpoint_interval == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let improved = mean < trainer.best_loss;
            if improved {
                trainer.best_loss = mean;
            }
            trainer.save_checkpoint(&out.join(format!("ckpt_{}", trainer.batch_index)))?;
            if improved {
                trainer.save_checkpoint(&out.join("ckpt_best"))?;
            }
            let dirs = checkpoint_dirs(out)?;
            let excess = dirs.len().saturating_sub(train.keep_last.max(1));
            for (_, dir) in &dirs[..excess] {
                fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let archive = if trainer.batch_index >= train.total_batches {
        let mut rng = rng_from_seed(derive_seed(train.seed, "freeze"));
        freeze_stats(&mut trainer.model, config.eval.calibration_batch, &mut rng)?;
        let path = out.join("model.wt");
        let mut meta = toml::Table::new();
        meta.insert("batch_index".into(), toml::Value::Integer(trainer.batch_index as i64));
        archive::save_model(&trainer.model, &path, meta)?;
        Some(path)
    } else {
        None
    };
    Ok(TrainOutcome {
        trainer,
        archive,
        metrics: metrics_path,
    })
}

/// Reads the loss column of a metrics log.
pub fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.rsplit(',').next().and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                what: path.display().to_string(),
                reason: format!("bad metrics row `{l}`"),
            })
        })
        .collect()
}

impl<S: Scalar> std::fmt::Debug for Trainer<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("batch_index", &self.batch_index)
            .field("best_loss", &self.best_loss)
            .finish_non_exhaustive()
    }
}
