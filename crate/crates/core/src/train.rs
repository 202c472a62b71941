//! Seeded training loop, checkpoints and the JSON-lines training log.
//!
//! Every source of randomness is derived from the training seed and a
//! position (epoch for the shuffle, step for latent sampling), so resuming
//! from a checkpoint replays exactly the steps a straight run would take.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionSample;
use crate::error::{io_err, HoiError, Result};
use crate::losses::LossWeights;
use crate::model::{Model, ModelConfig};
use crate::nn::{Binding, ParamEntry};
use crate::optim::{AdamW, AdamWConfig};

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            lr: adam.lr,
            epochs: 75,
            batch_size: 32,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(HoiError::Config("lr must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HoiError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(HoiError::Config("invalid optimizer hyper-parameters".into()));
        }
        self.loss.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_t: f64,
    pub loss_h: f64,
    pub loss_p: f64,
    pub loss_c: f64,
    pub loss_m: f64,
    pub deq_iters: Option<usize>,
    pub deq_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Vec<ParamEntry>,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub step: usize,
    /// Mean training loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let text = serde_json::to_string(self).expect("plain data serialises");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let ckpt: Checkpoint = serde_path_to_error::deserialize(de).map_err(|e| HoiError::Schema {
            path: format!("{}:{}", path.display(), e.path()),
            message: e.inner().to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(HoiError::Checkpoint(format!("unsupported checkpoint version `{}`", ckpt.version)));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.model_config, self.train_config.seed)?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

fn derived_seed(seed: u64, stream: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ index.wrapping_mul(0x94d0_49bb_1331_11eb)
}

const SHUFFLE_STREAM: u64 = 1;
const LATENT_STREAM: u64 = 2;

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub epochs_done: usize,
    pub step: usize,
    pub epoch_losses: Vec<f64>,
    pub log: Vec<LogRecord>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        let opt = AdamW::new(cfg.optimizer(), &model.store);
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            opt,
            epochs_done: 0,
            step: 0,
            epoch_losses: Vec::new(),
            log: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        ckpt.train_config.validate()?;
        let model = ckpt.model()?;
        if ckpt.optimizer.m.len() != model.store.len() {
            return Err(HoiError::Checkpoint("optimizer state does not match the parameters".into()));
        }
        Ok(Trainer {
            model,
            cfg: ckpt.train_config.clone(),
            opt: ckpt.optimizer.clone(),
            epochs_done: ckpt.epochs_done,
            step: ckpt.step,
            epoch_losses: ckpt.epoch_losses.clone(),
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION.into(),
            model_config: self.model.cfg.clone(),
            train_config: self.cfg.clone(),
            params: self.model.store.entries().to_vec(),
            optimizer: self.opt.clone(),
            epochs_done: self.epochs_done,
            step: self.step,
            epoch_losses: self.epoch_losses.clone(),
        }
    }

    /// One optimizer step on `samples`. A non-finite loss leaves the model
    /// untouched and reports the step.
    pub fn train_step(&mut self, samples: &[&InteractionSample]) -> Result<LogRecord> {
        let batch = self.model.batch(samples)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(self.cfg.seed, LATENT_STREAM, self.step as u64));
        let (stats, grads) = {
            let p = Binding::new(&self.model.store, true);
            let (loss, stats) = self.model.loss(&p, &batch, &self.cfg.loss, &mut rng)?;
            if !stats.loss.total.is_finite() {
                return Err(HoiError::NonFiniteLoss { step: self.step });
            }
            loss.backward()?;
            (stats, p.grads())
        };
        self.opt.step(&mut self.model.store, &grads);
        let l = stats.loss;
        let record = LogRecord {
            step: self.step,
            epoch: self.epochs_done,
            loss_total: l.total,
            loss_t: l.trend,
            loss_h: l.hotspot,
            loss_p: l.pose,
            loss_c: l.contact,
            loss_m: l.mani,
            deq_iters: stats.deq_iters,
            deq_residual: stats.deq_residual,
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs one epoch over `data` in a seeded order; returns its mean loss.
    pub fn run_epoch(&mut self, data: &[InteractionSample], mut sink: Option<&mut dyn Write>) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derived_seed(self.cfg.seed, SHUFFLE_STREAM, self.epochs_done as u64)));
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples: Vec<&InteractionSample> = chunk.iter().map(|&i| &data[i]).collect();
            let record = self.train_step(&samples)?;
            total += record.loss_total * samples.len() as f64;
            count += samples.len();
            if let Some(w) = sink.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&record).expect("plain data serialises")).map_err(|source| HoiError::Io {
                    path: "training log".into(),
                    source,
                })?;
            }
            self.log.push(record);
        }
        let mean = total / count.max(1) as f64;
        self.epoch_losses.push(mean);
        self.epochs_done += 1;
        log::info!("epoch {} loss {mean:.5}", self.epochs_done);
        Ok(mean)
    }
}

/// Files written by [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainArtifacts {
    pub log: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl TrainArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        TrainArtifacts {
            log: dir.join("train_log.jsonl"),
            best: dir.join("checkpoint_best.json"),
            last: dir.join("checkpoint_final.json"),
        }
    }

    pub fn last_good(dir: &Path) -> PathBuf {
        dir.join("checkpoint_last_good.json")
    }
}

/// Trains until `trainer.cfg.epochs` epochs are done. With `out`, writes
/// the log, the best-epoch and final checkpoints, and on a non-finite loss
/// or a diverged equilibrium the last good checkpoint before returning the
/// error.
pub fn fit(trainer: &mut Trainer, data: &[InteractionSample], out: Option<&Path>) -> Result<()> {
    if data.is_empty() {
        return Err(HoiError::Config("training split is empty".into()));
    }
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = TrainArtifacts::in_dir(dir).log;
            let f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    while trainer.epochs_done < trainer.cfg.epochs {
        let sink = log_file.as_mut().map(|w| w as &mut dyn Write);
        match trainer.run_epoch(data, sink) {
            Ok(mean) => {
                if out.is_some() && best.as_ref().is_none_or(|(b, _)| mean < *b) {
                    best = Some((mean, trainer.checkpoint()));
                }
            }
            Err(e @ (HoiError::NonFiniteLoss { .. } | HoiError::Diverged { .. })) => {
                if let Some(dir) = out {
                    let path = TrainArtifacts::last_good(dir);
                    trainer.checkpoint().save(&path)?;
                    log::error!("{e}; last good checkpoint written to {}", path.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(dir) = out {
        if let Some(w) = log_file.as_mut() {
            w.flush().map_err(io_err(dir))?;
        }
        let files = TrainArtifacts::in_dir(dir);
        trainer.checkpoint().save(&files.last)?;
        if let Some((_, ckpt)) = best {
            ckpt.save(&files.best)?;
        }
    }
    Ok(())
}
