//! Training: joint BCE over both heads, Adam with bias correction, step
//! learning-rate decay, a seeded 90/10 train/validation split and
//! checkpoint selection on the validation sub-class score.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, LabelSet};
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::metrics::{self, MetricsReport, TaskBLabels};
use crate::model::{self, backward_acc, forward, init_params, Dims, Input, Mode, ModelParams, ParamGroup, Thresholds};
use crate::real::Real;
use crate::seed::{self, Stream};

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Full training recipe. Defaults are the reference recipe: Adam at
/// 1e-4, batches of 64, at most 20 epochs, learning rate halved every 5
/// epochs, dropout 0.2, 10% of the training split held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_halving_period: usize,
    pub dropout_rate: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub task_b_loss_weight: f64,
    pub hidden: usize,
    pub fused: usize,
    pub thresholds: Thresholds,
    pub task_b_labels: TaskBLabels,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            batch_size: 64,
            max_epochs: 20,
            lr_halving_period: 5,
            dropout_rate: 0.2,
            val_fraction: 0.10,
            seed: 0,
            adam: AdamConfig::default(),
            task_b_loss_weight: 1.0,
            hidden: 256,
            fused: 256,
            thresholds: Thresholds::default(),
            task_b_labels: TaskBLabels::Four,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.max_epochs == 0 || self.lr_halving_period == 0 {
            return bad("max_epochs and lr_halving_period must be >= 1".into());
        }
        if !(self.task_b_loss_weight >= 0.0 && self.task_b_loss_weight.is_finite()) {
            return bad(format!("task_b_loss_weight must be >= 0, got {}", self.task_b_loss_weight));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        self.thresholds.check()
    }

    pub fn dims_for(&self, ds: &Dataset) -> Dims {
        Dims {
            token_dim: ds.token_dim,
            image_dim: ds.image_dim,
            hidden: self.hidden,
            fused: self.fused,
            n_subclasses: Label::SUBCLASSES.len(),
        }
    }
}

/// Stable binary cross-entropy on a logit:
/// `max(z, 0) − z·y + ln(1 + e^(−|z|))`, with gradient `σ(z) − y`.
pub fn bce_with_logits<T: Real>(logit: T, target: bool) -> Result<(T, T)> {
    if !logit.is_finite() {
        return Err(Error::Numeric(format!("non-finite logit {logit}")));
    }
    let y = if target { T::one() } else { T::zero() };
    let loss = logit.max(T::zero()) - logit * y + (-logit.abs()).exp().ln_1p();
    Ok((loss, sigmoid(logit) - y))
}

/// `bce(task A) + w_b · mean(bce over the four sub-classes)` and its
/// gradient with respect to the five logits.
pub fn sample_loss<T: Real>(logits: &[T; 5], labels: LabelSet, w_b: T) -> Result<(T, [T; 5])> {
    if !labels.is_consistent() {
        return Err(Error::data(None, format!("inconsistent labels {:?}", labels.bools())));
    }
    let targets = labels.bools();
    let (mut loss, ga) = bce_with_logits(logits[0], targets[0])?;
    let mut grad = [T::zero(); 5];
    grad[0] = ga;
    let per = w_b / T::from_f64(4.0);
    let mut sub = T::zero();
    for k in 1..5 {
        let (l, g) = bce_with_logits(logits[k], targets[k])?;
        sub = sub + l;
        grad[k] = per * g;
    }
    loss = loss + per * sub;
    Ok((loss, grad))
}

/// `lr0 · 0.5^⌊(epoch − 1) / period⌋` for 1-based epochs.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let halvings = (epoch.max(1) - 1) / cfg.lr_halving_period.max(1);
    cfg.lr0 * 0.5f64.powi(halvings as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(dims: Dims) -> Result<Self> {
        Ok(Self {
            m: ModelParams::zeros(dims)?,
            v: ModelParams::zeros(dims)?,
            t: 0,
        })
    }
}

/// Bias-corrected Adam update of one flat tensor. `t` is the step number
/// after incrementing (first step is 1).
pub fn adam_update<T: Real>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig, lr: f64) {
    debug_assert!(t >= 1);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let c1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let c2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let d = params.dims();
    for other in [grads.dims(), state.m.dims(), state.v.dims()] {
        if other != d {
            return Err(Error::shape("adam_step", d, other));
        }
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    state.t += 1;
    for g in ParamGroup::ALL {
        adam_update(
            params.group_mut(g),
            grads.group(g),
            state.m.group_mut(g),
            state.v.group_mut(g),
            state.t,
            cfg,
            lr,
        );
    }
    Ok(())
}

/// Seeded shuffle, then the first `round(n · val_fraction)` samples become
/// the validation set. Both sides keep their shuffled order.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    let n = ds.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Config(format!(
            "val_fraction {val_fraction} on {n} samples leaves an empty side ({} train / {n_val} val)",
            n - n_val
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, Stream::Split, &[]));
    let (val, train) = order.split_at(n_val);
    Ok((ds.subset(train), ds.subset(val)))
}

/// Mean loss and mean gradient over a batch. Samples are processed and
/// accumulated strictly in slice order; `dropout_seeds[i]` drives sample
/// `i`'s dropout masks in train mode.
pub fn batch_gradient<T: Real>(
    params: &ModelParams<T>,
    inputs: &[Input<'_, T>],
    labels: &[LabelSet],
    mode: Mode,
    dropout_seeds: &[u64],
    w_b: f64,
    grads: &mut ModelParams<T>,
) -> Result<T> {
    if inputs.len() != labels.len() || inputs.len() != dropout_seeds.len() || inputs.is_empty() {
        return Err(Error::shape(
            "batch_gradient",
            format!("{} inputs", inputs.len()),
            format!("{} labels / {} seeds", labels.len(), dropout_seeds.len()),
        ));
    }
    grads.fill_zero();
    let w_b = T::from_f64(w_b);
    let mut total = T::zero();
    for ((input, &lab), &s) in inputs.iter().zip(labels).zip(dropout_seeds) {
        let mut rng = seed::Rng::seed_from_u64(s);
        let (out, cache) = forward(params, *input, mode, &mut rng)?;
        let (loss, g) = sample_loss(&out.logits, lab, w_b)
            .map_err(|e| match e {
                Error::Data { message, .. } => Error::data(Some(input.id), message),
                other => other,
            })?;
        total = total + loss;
        backward_acc(params, &cache, &g, grads)?;
    }
    let inv = T::one() / T::from_f64(inputs.len() as f64);
    grads.scale(inv);
    Ok(total * inv)
}

/// Thresholded eval-mode predictions for every sample.
pub fn predict_all(params: &ModelParams<f32>, ds: &Dataset, thresholds: &Thresholds) -> Result<Vec<LabelSet>> {
    ds.samples
        .iter()
        .map(|s| model::predict(params, s.input(), thresholds))
        .collect()
}

/// Predicts `ds` and scores it against its labels.
pub fn score(params: &ModelParams<f32>, ds: &Dataset, thresholds: &Thresholds, set: TaskBLabels) -> Result<MetricsReport> {
    let preds = predict_all(params, ds, thresholds)?;
    let gold: Vec<LabelSet> = ds.samples.iter().map(|s| s.labels).collect();
    metrics::evaluate(&preds, &gold, set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_task_a_macro_f1: f64,
    /// `None` when the validation split has no gold sub-class positives.
    pub val_task_b_weighted_f1: Option<f64>,
}

impl EpochRecord {
    /// Checkpoint selection key: the validation sub-class score, or the
    /// binary score when the former is undefined on this validation split.
    fn selection_score(&self) -> f64 {
        self.val_task_b_weighted_f1.unwrap_or(self.val_task_a_macro_f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// One JSON object per epoch, then a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e).expect("plain data"));
            s.push('\n');
        }
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "checkpoint": self.checkpoint,
        });
        s.push_str(&summary.to_string());
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("epoch\tlr\ttrain_loss\tval_task_a_macro_f1\tval_task_b_weighted_f1\tbest\n");
        for e in &self.epochs {
            let b = e.val_task_b_weighted_f1.map_or("NA".to_string(), |v| v.to_string());
            let mark = if e.epoch == self.best_epoch { "*" } else { "" };
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{b}\t{mark}", e.epoch, e.lr, e.train_loss, e.val_task_a_macro_f1);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the end of the selected epoch.
    pub best: ModelParams<f32>,
    /// Parameters after the final epoch.
    pub last: ModelParams<f32>,
    pub report: TrainReport,
    pub train_set: Dataset,
    pub val_set: Dataset,
}

/// Runs the full recipe on `ds`. `on_epoch` sees each epoch's record as
/// soon as it is computed.
pub fn train(ds: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.check()?;
    if let Some((i, s)) = ds.samples.iter().enumerate().find(|(_, s)| !s.labels.is_consistent()) {
        return Err(Error::data(Some(&s.id), format!("record {i}: sub-class labels on a non-misogynous sample")));
    }
    let dims = cfg.dims_for(ds);
    let (train_set, val_set) = split_train_val(ds, cfg.val_fraction, cfg.seed)?;

    let mut params: ModelParams<f32> = init_params(cfg.seed, dims)?;
    let mut adam = AdamState::new(dims)?;
    let mut grads = ModelParams::zeros(dims)?;
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let mut records = Vec::with_capacity(cfg.max_epochs);
    let mode = Mode::Train {
        dropout: cfg.dropout_rate,
    };

    for epoch in 1..=cfg.max_epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, Stream::Shuffle, &[epoch as u64]));

        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Input<'_, f32>> = chunk.iter().map(|&i| train_set.samples[i].input()).collect();
            let labels: Vec<LabelSet> = chunk.iter().map(|&i| train_set.samples[i].labels).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|k| seed::derive(cfg.seed, Stream::Dropout, &[epoch as u64, (b * cfg.batch_size + k) as u64]))
                .collect();
            let diverged = |loss: f64| Error::Divergence { epoch, batch: b + 1, loss };
            let loss = match batch_gradient(&params, &inputs, &labels, mode, &seeds, cfg.task_b_loss_weight, &mut grads) {
                Ok(l) => l as f64,
                Err(Error::Numeric(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || loss > DIVERGENCE_LOSS || !grads.is_finite() {
                return Err(diverged(loss));
            }
            loss_sum += loss * chunk.len() as f64;
            adam_step(&mut params, &grads, &mut adam, &cfg.adam, lr)?;
        }

        let preds = predict_all(&params, &val_set, &cfg.thresholds)?;
        let gold: Vec<LabelSet> = val_set.samples.iter().map(|s| s.labels).collect();
        let pa: Vec<bool> = preds.iter().map(|p| p.misogynous()).collect();
        let ga: Vec<bool> = gold.iter().map(|g| g.misogynous()).collect();
        let val_b = match metrics::task_b_weighted_f1(&preds, &gold, cfg.task_b_labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_task_a_macro_f1: metrics::task_a_macro_f1(&pa, &ga)?,
            val_task_b_weighted_f1: val_b,
        };
        on_epoch(&rec);
        let key = rec.selection_score();
        if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
            best = Some((key, epoch, params.clone()));
        }
        records.push(rec);
    }

    let (_, best_epoch, best_params) = best.expect("max_epochs >= 1");
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        report: TrainReport {
            n_train: train_set.len(),
            n_val: val_set.len(),
            epochs: records,
            best_epoch,
            checkpoint: None,
        },
        train_set,
        val_set,
    })
}
