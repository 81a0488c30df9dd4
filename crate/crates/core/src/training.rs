//! Mini-batch training with Adam, a halving learning-rate schedule and
//! early stopping on the validation loss.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, ParamStore};
use crate::error::{Error, Result};
use crate::loss::{knowledge_loss, knowledge_loss_value, normalized_future, plain_loss, plain_loss_value, LossTarget};
use crate::network::{ForwardCtx, ModelConfig, ModelInput, Mstformer};
use crate::preprocess::{Dataset, NormStats, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epoch budget; `None` means `ceil(train_windows / batch_size)`.
    pub epochs: Option<usize>,
    pub early_stop_alpha: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            base_lr: 5e-6,
            epochs: None,
            early_stop_alpha: 0.5,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.early_stop_alpha >= 0.0) {
            return Err(Error::Config("early_stop_alpha must be >= 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.epochs == Some(0) {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn epoch_budget(&self, train_windows: usize) -> usize {
        self.epochs.unwrap_or_else(|| train_windows.div_ceil(self.batch_size).max(1))
    }
}

pub fn lr_schedule(base_lr: f64, epoch: usize) -> f64 {
    assert!(epoch >= 1, "epochs are numbered from 1");
    base_lr * 0.5f64.powi(epoch as i32 - 1)
}

/// True once the latest validation loss exceeds the best so far by more than `alpha`.
pub fn should_stop(val_history: &[f64], alpha: f64) -> bool {
    let Some(&latest) = val_history.last() else {
        return false;
    };
    let best = val_history.iter().copied().fold(f64::INFINITY, f64::min);
    latest > best + alpha
}

/// SplitMix64 finaliser over two words, for deriving per-purpose seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn best_val(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Mstformer,
    /// Parameters of the best validation epoch.
    pub params: ParamStore,
    pub log: TrainLog,
}

struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = &grads[i];
            ndarray::Zip::from(p).and(&mut self.m[i]).and(&mut self.v[i]).and(g).for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            });
        }
    }
}

/// Loss target and graph loss selected by the model's ablation flags.
fn sample_loss(
    g: &mut Graph,
    out: crate::autodiff::Var,
    sample: &Sample,
    stats: &NormStats,
    cfg: &ModelConfig,
) -> Result<crate::autodiff::Var> {
    if cfg.use_knowledge_loss {
        knowledge_loss(g, out, &LossTarget::from_sample(sample, stats, cfg.loss_correction))
    } else {
        plain_loss(g, out, &normalized_future(sample, stats))
    }
}

/// Loss of a finished prediction, matching the training objective.
pub fn loss_value(pred: &Mat, sample: &Sample, stats: &NormStats, cfg: &ModelConfig) -> Result<f64> {
    if cfg.use_knowledge_loss {
        knowledge_loss_value(pred, &LossTarget::from_sample(sample, stats, cfg.loss_correction))
    } else {
        plain_loss_value(pred, &normalized_future(sample, stats))
    }
}

fn sample_gradients(
    net: &Mstformer,
    params: &ParamStore,
    sample: &Sample,
    stats: &NormStats,
    seed: u64,
) -> Result<(f64, Vec<Option<Mat>>)> {
    let input = ModelInput::from_sample(sample, &net.cfg);
    let mut g = Graph::new(params);
    let mut ctx = ForwardCtx::train(seed);
    let out = net.forward(&mut g, &input, &mut ctx)?;
    let loss = sample_loss(&mut g, out, sample, stats, &net.cfg)?;
    let value = g.scalar(loss);
    Ok((value, g.backward(loss).into_params()))
}

/// Seed used for the sampler when evaluating sample `index`.
pub fn eval_seed(root: u64, index: usize) -> u64 {
    mix_seed(root ^ 0xE7A1, index as u64)
}

/// Evaluation-mode predictions for every sample, in order.
pub fn predict_all(net: &Mstformer, params: &ParamStore, samples: &[Sample], seed: u64) -> Result<Vec<Mat>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| net.predict(params, &ModelInput::from_sample(s, &net.cfg), eval_seed(seed, i)))
        .collect()
}

/// Mean training objective over `samples` in evaluation mode.
pub fn evaluate_loss(net: &Mstformer, params: &ParamStore, samples: &[Sample], stats: &NormStats, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let preds = predict_all(net, params, samples, seed)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += loss_value(p, s, stats, &net.cfg)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    epoch: usize,
    batch: usize,
    loss: f64,
    seed: u64,
    windows: Vec<(&'a str, usize)>,
}

fn dump_batch(dir: &Path, epoch: usize, batch: usize, loss: f64, seed: u64, samples: &[&Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dump = DivergenceDump {
        epoch,
        batch,
        loss,
        seed,
        windows: samples.iter().map(|s| (s.vessel_id.as_str(), s.start)).collect(),
    };
    let path = dir.join(format!("divergence_e{epoch}_b{batch}.json"));
    let json = serde_json::to_string_pretty(&dump).map_err(|e| Error::Format(e.to_string()))?;
    crate::io_util::write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

/// Trains from a fresh initialisation; see [`train_with`].
pub fn train(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(ds, model_cfg, cfg, dump_dir, &mut |_| {})
}

/// Trains and reports each finished epoch to `progress`.
///
/// Gradients of one batch are computed in parallel but summed in sample
/// order, so results do not depend on the thread count.
pub fn train_with(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dump_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Config(format!(
            "training needs train and validation windows, got {} and {}",
            ds.train.len(),
            ds.val.len()
        )));
    }
    let model_cfg = model_cfg.clone().with_spec(&ds.spec);
    let (net, mut params) = Mstformer::new(model_cfg, mix_seed(cfg.seed, 1))?;
    let stats = ds.stats;
    let mut adam = Adam::new(&params);
    let mut best = params.clone();
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best_epoch = 0;
    let mut stop_reason = StopReason::Budget;
    let budget = cfg.epoch_budget(ds.train.len());
    let mut order: Vec<usize> = (0..ds.train.len()).collect();

    for epoch in 1..=budget {
        let started = Instant::now();
        let lr = lr_schedule(cfg.base_lr, epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1000 + epoch as u64)));
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &ds.train[i]).collect();
            let results: Vec<Result<(f64, Vec<Option<Mat>>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let seed = mix_seed(mix_seed(cfg.seed, epoch as u64), i as u64);
                    sample_gradients(&net, &params, &ds.train[i], &stats, seed)
                })
                .collect();
            let mut sum: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
            let mut batch_loss = 0.0;
            for r in results {
                let (l, grads) = r?;
                batch_loss += l;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        *acc += &g;
                    }
                }
            }
            let n = chunk.len() as f64;
            batch_loss /= n;
            let mut norm2 = 0.0;
            for acc in &mut sum {
                *acc /= n;
                norm2 += acc.iter().map(|v| v * v).sum::<f64>();
            }
            if !batch_loss.is_finite() || !norm2.is_finite() {
                if let Some(dir) = dump_dir {
                    dump_batch(dir, epoch, b, batch_loss, cfg.seed, &batch)?;
                }
                return Err(Error::Divergence { epoch, batch: b, loss: batch_loss });
            }
            let norm = norm2.sqrt();
            if norm > cfg.clip_norm {
                let k = cfg.clip_norm / norm;
                sum.iter_mut().for_each(|g| *g *= k);
            }
            adam.step(&mut params, &sum, lr, cfg);
            epoch_loss += batch_loss * n;
        }
        let val_loss = evaluate_loss(&net, &params, &ds.val, &stats, cfg.seed)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: usize::MAX, loss: val_loss });
        }
        if records.iter().all(|r| val_loss < r.val_loss) {
            best = params.clone();
            best_epoch = epoch;
        }
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_loss / ds.train.len() as f64,
            val_loss,
            lr,
            wall_s: started.elapsed().as_secs_f64(),
        };
        progress(&rec);
        records.push(rec);
        let history: Vec<f64> = records.iter().map(|r| r.val_loss).collect();
        if should_stop(&history, cfg.early_stop_alpha) {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    Ok(TrainOutcome { net, params: best, log: TrainLog { epochs: records, best_epoch, stop_reason } })
}
