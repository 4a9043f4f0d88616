//! Training loop, split evaluation and throughput measurement.

use std::fs;
use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::lossfn::{batch_frequencies, capped_weights, weighted_ce_loss, LossWeights, DEFAULT_CAP_RATIO, DEFAULT_EPSILON};
use crate::maskcore::LabelMask;
use crate::metrics::{image_metrics, summarize, AggregationMode, ImageMetrics, MetricsReport};
use crate::nets::{argmax_masks, Model};
use crate::optim::{adam_step, adamw_step, LrSchedule, OptimState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    #[default]
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` uses the five-tier schedule spread over `epochs`.
    pub schedule: Option<LrSchedule>,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub cap_ratio: f64,
    /// Drives batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 50,
            schedule: None,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 1e-4,
            epsilon: DEFAULT_EPSILON,
            cap_ratio: DEFAULT_CAP_RATIO,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch size and epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!("weight decay {} is invalid", self.weight_decay)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule.clone().unwrap_or_else(|| LrSchedule::tiered(self.epochs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_weighted_dice: f64,
    pub train_weighted_iou: f64,
    pub val_weighted_dice: f64,
    pub val_weighted_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Earliest epoch with the highest validation weighted IoU.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_weighted_iou >= r.val_weighted_iou => Some(b),
                _ => Some(r),
            })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(dir) = path.as_ref().parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What the logging hook sees after every batch.
#[derive(Debug, Clone)]
pub struct BatchLog<'a> {
    /// 0-based.
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub weights: &'a LossWeights,
}

pub struct TrainOutcome {
    /// Model at its best validation epoch.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub history: TrainHistory,
    /// Optimizer state after the last epoch.
    pub optimizer: OptimState,
}

/// Packs images into an NCHW tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyInput("image batch"))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = vec![0.0; images.len() * 3 * h * w];
    for (b, img) in images.iter().enumerate() {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::DimensionMismatch {
                left: format!("{w}x{h}"),
                right: format!("{}x{}", img.width(), img.height()),
            });
        }
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[((b * 3 + c) * h * w) + i] = px.0[c] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec([images.len(), 3, h, w], data)
}

fn check_samples(model: &Model, samples: &[Sample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySplit(what.into()));
    }
    let c = model.config().num_classes;
    for s in samples {
        if s.mask.num_classes() != c {
            return Err(Error::ShapeMismatch(format!(
                "{what} sample {} has {} classes, model predicts {c}",
                s.id,
                s.mask.num_classes()
            )));
        }
    }
    Ok(())
}

pub fn train(
    config: &TrainConfig,
    model: Model,
    train_set: &[Sample],
    val_set: &[Sample],
    mut hook: Option<&mut dyn FnMut(&BatchLog)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_samples(&model, train_set, "train")?;
    check_samples(&model, val_set, "val")?;
    let schedule = config.schedule();
    let mode = AggregationMode::weighted();
    let mut model = model;
    let mut opt = OptimState::for_params(model.params(), schedule.lr_at(0), config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;

    for epoch in 0..config.epochs {
        opt.lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut train_items: Vec<ImageMetrics> = Vec::with_capacity(train_set.len());
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&RgbImage> = idx.iter().map(|&i| &train_set[i].image).collect();
            let masks: Vec<LabelMask> = idx.iter().map(|&i| train_set[i].mask.clone()).collect();
            let x = images_to_tensor(&images)?;
            let (logits, tape) = model.forward_train(&x)?;
            let weights = capped_weights(&batch_frequencies(&masks)?, config.epsilon, config.cap_ratio)?;
            let value = weighted_ce_loss(&logits, &masks, &weights, true)?;
            if !value.loss.is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }
            if let Some(h) = hook.as_mut() {
                h(&BatchLog {
                    epoch,
                    batch,
                    loss: value.loss,
                    weights: &weights,
                });
            }
            for (pred, gt) in argmax_masks(&logits)?.iter().zip(&masks) {
                train_items.push(image_metrics(pred, gt, mode)?);
            }
            let grads = model.backward(&tape, value.grad.as_ref().expect("gradient requested"));
            match config.optimizer {
                OptimizerKind::Adam => adam_step(&mut opt, model.params_mut(), &grads)?,
                OptimizerKind::AdamW => adamw_step(&mut opt, model.params_mut(), &grads)?,
            }
            if model.params().iter().flatten().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch, batch });
            }
            loss_sum += value.loss;
        }
        let n_batches = train_set.len().div_ceil(config.batch_size);
        let train_report = summarize(&train_items, mode)?;
        let val_report = evaluate(&model, val_set, mode)?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr: opt.lr,
            train_loss: loss_sum / n_batches as f64,
            train_weighted_dice: train_report.dice,
            train_weighted_iou: train_report.iou,
            val_weighted_dice: val_report.dice,
            val_weighted_iou: val_report.iou,
        });
        if best.as_ref().is_none_or(|(_, iou, _)| val_report.iou > *iou) {
            best = Some((epoch + 1, val_report.iou, model.params().to_vec()));
        }
    }

    let (best_epoch, best_val_iou, params) = best.expect("at least one epoch ran");
    model.set_params(params);
    Ok(TrainOutcome {
        best: model,
        best_epoch,
        best_val_iou,
        history,
        optimizer: opt,
    })
}

const EVAL_BATCH: usize = 8;

/// Argmax predictions for every sample, in order.
pub fn predict_samples(model: &Model, samples: &[Sample]) -> Result<Vec<LabelMask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        out.extend(model.predict(&images_to_tensor(&images)?)?);
    }
    Ok(out)
}

/// Per-image metrics averaged over the split.
pub fn evaluate(model: &Model, samples: &[Sample], aggregation: AggregationMode) -> Result<MetricsReport> {
    check_samples(model, samples, "evaluation")?;
    let preds = predict_samples(model, samples)?;
    let items = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| image_metrics(p, &s.mask, aggregation))
        .collect::<Result<Vec<_>>>()?;
    summarize(&items, aggregation)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Images per second.
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub batch_size: usize,
    pub iters: usize,
    pub train: Throughput,
    pub inference: Throughput,
}

fn stats(rates: &[f64]) -> Throughput {
    Throughput {
        mean: rates.iter().sum::<f64>() / rates.len() as f64,
        min: rates.iter().copied().fold(f64::INFINITY, f64::min),
        max: rates.iter().copied().fold(0.0, f64::max),
    }
}

/// Times full train steps (forward, loss, backward, AdamW) and plain
/// inference on random inputs at the model's configured size.
pub fn benchmark_throughput(model: &Model, batch_size: usize, warmup: usize, iters: usize, seed: u64) -> Result<ThroughputReport> {
    if iters == 0 || batch_size == 0 {
        return Err(Error::InvalidConfig("iters and batch size must be at least 1".into()));
    }
    let cfg = model.config();
    let s = cfg.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(
        [batch_size, cfg.in_channels, s, s],
        (0..batch_size * cfg.in_channels * s * s).map(|_| rng.gen::<f64>()).collect(),
    )?;
    let masks = (0..batch_size)
        .map(|_| {
            let labels = (0..s * s).map(|_| rng.gen_range(0..cfg.num_classes) as u8).collect();
            LabelMask::new(s, s, cfg.num_classes, labels)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut work = model.clone();
    let mut opt = OptimState::for_params(work.params(), 1e-3, 1e-4);
    let mut train_step = || -> Result<()> {
        let (logits, tape) = work.forward_train(&x)?;
        let weights = capped_weights(&batch_frequencies(&masks)?, DEFAULT_EPSILON, DEFAULT_CAP_RATIO)?;
        let v = weighted_ce_loss(&logits, &masks, &weights, true)?;
        let grads = work.backward(&tape, v.grad.as_ref().expect("gradient requested"));
        adamw_step(&mut opt, work.params_mut(), &grads)
    };
    let time = |f: &mut dyn FnMut() -> Result<()>| -> Result<Throughput> {
        for _ in 0..warmup {
            f()?;
        }
        let mut rates = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t = Instant::now();
            f()?;
            rates.push(batch_size as f64 / t.elapsed().as_secs_f64().max(1e-9));
        }
        Ok(stats(&rates))
    };
    let train = time(&mut train_step)?;
    let inference = time(&mut || model.predict(&x).map(|_| ()))?;
    Ok(ThroughputReport {
        batch_size,
        iters,
        train,
        inference,
    })
}
