//! Dual-head BCE training with decoupled weight decay, per-epoch
//! validation and best-IoU checkpointing.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, make_batch, AugmentConfig, SamplePair};
use crate::error::{Error, Result};
use crate::metrics::{accumulate, compute_metrics, ConfusionCounts, MetricSet};
use crate::model::{threshold_logits, LcdNet};
use crate::params::{ParamKind, ParamStore, Session, SessionMode};
use crate::tensor::{Element, Tensor, Var};

/// AdamW with weight decay applied only to [`ParamKind::Weight`] tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Consumes the gradients accumulated in `store` and updates every
    /// trainable tensor.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            if !p.kind.trainable() {
                continue;
            }
            let g = p.tensor.take_grad().ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = if p.kind == ParamKind::Weight { self.lr * self.weight_decay } else { 0.0 };
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mut x = w.as_f64();
                x -= decay * x;
                x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = T::from_f64(x);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seed for shuffling and augmentation.
    pub seed: u64,
    pub threshold: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 5e-4,
            weight_decay: 2.5e-3,
            seed: 0,
            threshold: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("lr {} / weight decay {}", self.lr, self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        self.augment.validate()
    }
}

/// Sum of the mean BCE of both heads.
pub fn dual_bce<T: Element>(s: &mut Session<'_, T>, l0: Var, l1: Var, label: &Tensor<T>) -> Result<Var> {
    let a = s.graph.bce_with_logits(l0, label)?;
    let b = s.graph.bce_with_logits(l1, label)?;
    s.graph.add(a, b)
}

/// One forward/backward/update on a batch; returns the loss.
pub fn train_step<T: Element>(model: &mut LcdNet<T>, opt: &mut AdamW, t1: &Tensor<T>, t2: &Tensor<T>, label: &Tensor<T>) -> Result<f64> {
    model.params.zero_grads();
    let loss = {
        let mut s = Session::new(&mut model.params, SessionMode::TRAIN);
        let x1 = s.input(t1.clone());
        let x2 = s.input(t2.clone());
        let (l0, l1) = model.net.forward(&mut s, x1, x2)?;
        let loss = dual_bce(&mut s, l0, l1, label)?;
        let value = s.graph.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Ok(value);
        }
        s.backward(loss)?;
        value
    };
    opt.step(&mut model.params)?;
    Ok(loss)
}

/// Confusion counts of head 0 over `pairs`, batch norms in inference mode.
pub fn evaluate<T: Element>(model: &mut LcdNet<T>, pairs: &[SamplePair], batch_size: usize, threshold: f64) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let b = make_batch::<T>(&refs)?;
        let (l0, _) = model.forward(&b.t1, &b.t2)?;
        let pred = threshold_logits(&l0, threshold);
        let label: Vec<u8> = chunk.iter().flat_map(|p| p.label.data.iter().copied()).collect();
        counts += accumulate(&pred, &label)?;
    }
    Ok(counts)
}

/// One epoch's summary; validation scores are empty without a validation
/// split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub pc: Option<f64>,
    pub rc: Option<f64>,
    pub f1: Option<f64>,
    pub oa: Option<f64>,
    pub kappa: Option<f64>,
    pub iou: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_iou: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Path of the best checkpoint, when an output directory was given.
    pub best_checkpoint: Option<PathBuf>,
    pub final_metrics: Option<MetricSet>,
}

pub const BEST_CHECKPOINT: &str = "best.lcdn";
pub const LAST_CHECKPOINT: &str = "last.lcdn";
pub const TRAIN_LOG: &str = "train_log.csv";

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 32));
    rng.set_stream(index as u64);
    rng
}

/// Trains for `cfg.epochs`, validating after each epoch. With `out_dir`,
/// the best-IoU weights, the last weights and a CSV log are written there.
pub fn fit<T: Element>(
    model: &mut LcdNet<T>,
    train: &[SamplePair],
    val: &[SamplePair],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(csv::Writer::from_path(dir.join(TRAIN_LOG))?)
        }
        None => None,
    };
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = sample_rng(cfg.seed, epoch, usize::MAX);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples = idx
                .iter()
                .map(|&i| augment(&train[i], &cfg.augment, &mut sample_rng(cfg.seed, epoch, i)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SamplePair> = samples.iter().collect();
            let b = make_batch::<T>(&refs)?;
            let loss = match train_step(model, &mut opt, &b.t1, &b.t2, &b.label) {
                // an op rejected a non-finite intermediate before the loss existed
                Err(Error::NonFinite { .. }) => f64::NAN,
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss });
            }
            total += loss;
            batches += 1;
        }
        let metrics = if val.is_empty() {
            None
        } else {
            Some(compute_metrics(&evaluate(model, val, cfg.batch_size, cfg.threshold)?)?)
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            pc: metrics.and_then(|m| m.pc),
            rc: metrics.and_then(|m| m.rc),
            f1: metrics.and_then(|m| m.f1),
            oa: metrics.and_then(|m| m.oa),
            kappa: metrics.and_then(|m| m.kappa_standard),
            iou: metrics.and_then(|m| m.iou),
            seconds: start.elapsed().as_secs_f64(),
        };
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        log::info!(
            "epoch {epoch}: loss {:.4} f1 {} iou {} ({:.1}s)",
            rec.train_loss,
            show(rec.f1),
            show(rec.iou),
            rec.seconds
        );
        if let Some(iou) = rec.iou {
            if report.best_iou.is_none_or(|b| iou > b) {
                report.best_iou = Some(iou);
                report.best_epoch = Some(epoch);
                if let Some(dir) = out_dir {
                    let path = dir.join(BEST_CHECKPOINT);
                    model.save_checkpoint(&path, epoch, Some(iou))?;
                    report.best_checkpoint = Some(path);
                }
            }
        }
        if let Some(w) = log.as_mut() {
            w.serialize(&rec)?;
            w.flush().map_err(|e| Error::io(out_dir.expect("log implies dir").join(TRAIN_LOG), e))?;
        }
        report.final_metrics = metrics;
        report.epochs.push(rec);
    }
    if let Some(dir) = out_dir {
        model.save_checkpoint(&dir.join(LAST_CHECKPOINT), cfg.epochs, report.best_iou)?;
    }
    Ok(report)
}
