use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{clip_grad_norm, AdamConfig, AdamState, Bound, ParamSet, Tape, Tensor, Var};
use crate::represent::{GraphSample, GridSample, Normalizer, SeriesSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epoch budget; `None` picks 50 for series models and 200 for graph/grid.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Hold out this fraction of the training days for early stopping.
    pub validation_frac: Option<f64>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: None,
            batch_size: 32,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            validation_frac: None,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if let Some(f) = self.validation_frac {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("train.validation_frac must lie in (0, 1), got {f}")));
            }
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean masked loss (normalized units) per epoch.
    pub losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub wall_clock_s: f64,
    pub seed: u64,
}

impl TrainReport {
    pub fn write_curve_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss"])?;
        for (e, l) in self.losses.iter().enumerate() {
            out.write_record([e.to_string(), l.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// What the training loop needs from a sample.
pub trait Sample {
    fn anchor(&self) -> usize;
    fn target(&self) -> &[f64];
    fn mask(&self) -> &[bool];
    /// Pollutant index of target entry `i`.
    fn pollutant_at(&self, i: usize) -> usize;
}

impl Sample for SeriesSample {
    fn anchor(&self) -> usize {
        self.anchor
    }
    fn target(&self) -> &[f64] {
        &self.target
    }
    fn mask(&self) -> &[bool] {
        &self.mask
    }
    fn pollutant_at(&self, i: usize) -> usize {
        i % 2
    }
}

impl Sample for GraphSample {
    fn anchor(&self) -> usize {
        self.anchor
    }
    fn target(&self) -> &[f64] {
        &self.target
    }
    fn mask(&self) -> &[bool] {
        &self.mask
    }
    fn pollutant_at(&self, i: usize) -> usize {
        i % 2
    }
}

impl Sample for GridSample {
    fn anchor(&self) -> usize {
        self.anchor
    }
    fn target(&self) -> &[f64] {
        &self.target
    }
    fn mask(&self) -> &[bool] {
        &self.mask
    }
    fn pollutant_at(&self, i: usize) -> usize {
        (i / (self.shape.0 * self.shape.1)) % 2
    }
}

/// Concatenated normalized targets and masks of a batch.
pub(crate) fn batch_targets<T: Sample>(norm: &Normalizer, batch: &[&T]) -> (Arc<Tensor>, Arc<[bool]>, usize) {
    let mut t = Vec::new();
    let mut m = Vec::new();
    for s in batch {
        for (i, (&v, &k)) in s.target().iter().zip(s.mask()).enumerate() {
            let p = s.pollutant_at(i);
            t.push(if k { (v - norm.target_mean[p]) / norm.target_std[p] } else { 0.0 });
            m.push(k);
        }
    }
    let n = m.iter().filter(|&&k| k).count();
    let len = t.len();
    (
        Arc::new(Tensor::new([len], t).expect("flat tensor")),
        m.into(),
        n,
    )
}

/// Masked MSE of `pred` (any shape whose flat layout matches the batch
/// targets) against the normalized targets.
pub(crate) fn batch_loss<T: Sample>(tape: &mut Tape, norm: &Normalizer, pred: Var, batch: &[&T]) -> Result<(Var, usize)> {
    let (t, m, n) = batch_targets(norm, batch);
    let flat = tape.reshape(pred, [t.len()])?;
    Ok((tape.masked_mse(flat, t, m)?, n))
}

/// Mean masked loss over `samples` with frozen parameters.
fn evaluate_loss<T: Sample>(
    params: &ParamSet,
    samples: &[T],
    batch_size: usize,
    norm: &Normalizer,
    forward: &mut impl FnMut(&mut Tape, &Bound, &[&T]) -> Result<Var>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in samples.chunks(batch_size) {
        let batch: Vec<&T> = chunk.iter().collect();
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let pred = forward(&mut tape, &p, &batch)?;
        let (loss, n) = batch_loss(&mut tape, norm, pred, &batch)?;
        total += tape.value(loss).item() * n as f64;
        count += n;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Adam over shuffled mini-batches. Keeps the parameters of the epoch with
/// the lowest training loss, or the lowest validation loss when samples
/// with targets past `val_cutoff` are held out.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_params<T: Sample + Clone>(
    params: &mut ParamSet,
    samples: &[T],
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
    norm: &Normalizer,
    horizon: usize,
    val_cutoff: Option<usize>,
    mut forward: impl FnMut(&mut Tape, &Bound, &[&T]) -> Result<Var>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, val): (Vec<T>, Vec<T>) = match val_cutoff {
        Some(cut) => samples.iter().cloned().partition(|s| s.anchor() + horizon <= cut),
        None => (samples.to_vec(), Vec::new()),
    };
    if train.is_empty() && epochs > 0 {
        return Err(Error::Empty("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let mut adam = AdamState::new(params, cfg.adam);
    let mut report = TrainReport {
        seed,
        ..TrainReport::default()
    };
    let mut best: Option<(f64, ParamSet)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&T> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let pred = forward(&mut tape, &p, &batch)?;
            let (loss, n) = batch_loss(&mut tape, norm, pred, &batch)?;
            if n == 0 {
                continue;
            }
            let l = tape.value(loss).item();
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss: l });
            }
            let mut g = tape.backward(loss)?;
            let mut grads = p.grads(&tape, &mut g);
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            adam.update(params, &grads)?;
            total += l * n as f64;
            count += n;
        }
        let train_loss = if count == 0 { 0.0 } else { total / count as f64 };
        report.losses.push(train_loss);
        let monitor = if val.is_empty() {
            train_loss
        } else {
            let v = evaluate_loss(params, &val, cfg.batch_size, norm, &mut forward)?;
            report.val_losses.push(v);
            if v.is_nan() { train_loss } else { v }
        };
        if best.as_ref().is_none_or(|(b, _)| monitor < *b) {
            best = Some((monitor, params.clone()));
            report.best_epoch = Some(epoch);
        }
        if !val.is_empty() && report.best_epoch.is_some_and(|b| epoch - b >= cfg.patience) {
            break;
        }
    }
    if let Some((_, p)) = best {
        *params = p;
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(report)
}
