//! Minibatch training and evaluation over an on-disk dataset index.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, DatasetIndex, TokenSource};
use crate::error::{Error, Result};
use crate::mem;
use crate::metrics::{accuracy, auc};
use crate::models::{LowmemOpts, Mode, Model};
use crate::numerics::bce_with_logits;
use crate::optim::AdamW;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub merge_regions: bool,
    pub concat_regions: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 10,
            seed: 0,
            mode: Mode::Lowmem,
            merge_regions: false,
            concat_regions: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn lowmem_opts(&self) -> LowmemOpts {
        LowmemOpts {
            merge: self.merge_regions,
            concat: self.concat_regions,
            workers: self.workers.max(1),
        }
    }
}

/// One line of training telemetry, serialized as JSON per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub samples: usize,
    pub skipped: usize,
    pub peak_activation_bytes: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub samples: usize,
    pub skipped: usize,
}

fn forward_backward(
    model: &mut Model,
    src: &TokenSource,
    label: u8,
    scale: f32,
    mode: Mode,
    opts: &LowmemOpts,
) -> Result<(f64, f32)> {
    let (loss, logit) = match mode {
        Mode::Dense => {
            let tokens = src.materialize()?;
            let (logit, state) = model.dense_forward(&tokens)?;
            let (loss, dl) = bce_with_logits(logit, label);
            model.dense_backward(dl * scale, &state)?;
            (loss, logit)
        }
        Mode::Lowmem => {
            let (logit, state) = model.lowmem_forward(src, opts)?;
            let (loss, dl) = bce_with_logits(logit, label);
            model.lowmem_backward(dl * scale, &state)?;
            (loss, logit)
        }
    };
    if !loss.is_finite() || !logit.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok((loss as f64, logit))
}

/// Run one epoch of shuffled minibatch SGD; gradients are averaged within
/// each batch. Unreadable samples are skipped with a warning on stderr.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut AdamW,
    index: &DatasetIndex,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let start = Instant::now();
    mem::reset_peak();
    let opts = cfg.lowmem_opts();
    let order = epoch_order(index.records.len(), cfg.seed, epoch);
    let min_len = model.min_token_len();
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut loss_sum = 0.0f64;
    let mut skipped = 0usize;
    for batch in order.chunks(cfg.batch_size.max(1)) {
        model.zero_grads();
        let mut in_batch = 0usize;
        let scale = 1.0 / batch.len() as f32;
        for &i in batch {
            let rec = &index.records[i];
            let src = match TokenSource::open(&rec.path, min_len) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("warning: skipping {}: {e}", rec.path.display());
                    skipped += 1;
                    continue;
                }
            };
            let (loss, logit) =
                forward_backward(model, &src, rec.label, scale, cfg.mode, &opts)?;
            loss_sum += loss;
            logits.push(logit);
            labels.push(rec.label as f32);
            in_batch += 1;
        }
        if in_batch > 0 {
            opt.step(model)?;
        }
    }
    let samples = logits.len();
    Ok(EpochRecord {
        epoch,
        loss: if samples > 0 { loss_sum / samples as f64 } else { 0.0 },
        accuracy: accuracy(&logits, &labels),
        auc: auc(&logits, &labels),
        samples,
        skipped,
        peak_activation_bytes: mem::peak_bytes(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Train for `cfg.epochs`, invoking `on_epoch` after each (return false to
/// stop early).
pub fn train(
    model: &mut Model,
    opt: &mut AdamW,
    index: &DatasetIndex,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> bool,
) -> Result<Vec<EpochRecord>> {
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let rec = train_epoch(model, opt, index, cfg, epoch)?;
        let go_on = on_epoch(&rec);
        records.push(rec);
        if !go_on {
            break;
        }
    }
    Ok(records)
}

/// Forward-only pass over a dataset.
pub fn evaluate(
    model: &Model,
    index: &DatasetIndex,
    mode: Mode,
    opts: &LowmemOpts,
) -> Result<EvalReport> {
    let min_len = model.min_token_len();
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut loss_sum = 0.0f64;
    let mut skipped = 0usize;
    for rec in &index.records {
        let src = match TokenSource::open(&rec.path, min_len) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", rec.path.display());
                skipped += 1;
                continue;
            }
        };
        let logit = model.predict(&src, mode, opts)?;
        loss_sum += bce_with_logits(logit, rec.label).0 as f64;
        logits.push(logit);
        labels.push(rec.label as f32);
    }
    Ok(EvalReport {
        loss: if logits.is_empty() { 0.0 } else { loss_sum / logits.len() as f64 },
        accuracy: accuracy(&logits, &labels),
        auc: auc(&logits, &labels),
        samples: logits.len(),
        skipped,
    })
}
