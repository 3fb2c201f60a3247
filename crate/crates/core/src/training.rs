//! SGD-with-momentum training, fitness-based early stopping, evaluation and
//! patient-grouped cross-validation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{class_weight, grouped_kfold, train_val_split, Annotation, ClassLabel, DatasetError, DatasetManifest, FoldSplit};
use crate::imaging::{resize, scale_box, BBox, GrayImage, ImagingError};
use crate::losses::{detection_loss_grad, multitask_loss_grad, LossBreakdown, LossWeights};
use crate::metrics::{detection_fitness, multitask_fitness, EvalItem, EvalReport, MetricsError};
use crate::model::{decode_image, select_top, target_assignment, AnchorTarget, Mode, Model, ModelConfig, ModelError, Prediction};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Image(#[from] ImagingError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: LossBreakdown },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Minimum confidence of detections considered during evaluation.
pub const EVAL_CONF_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Distended loss weight; derived from the training split when absent.
    #[serde(default)]
    pub w_pos: Option<f64>,
}

impl TrainConfig {
    /// Defaults tuned for the tiny model trained from scratch on phantoms.
    pub fn for_mode(mode: Mode) -> Self {
        let loss_weights = match mode {
            Mode::DetectionTwoClass => LossWeights {
                alpha: 5.0,
                beta: 100.0,
                gamma: 2.0,
                delta: 0.0,
            },
            Mode::MultiTask => LossWeights {
                alpha: 5.0,
                beta: 100.0,
                gamma: 0.0,
                delta: 0.5,
            },
        };
        Self {
            max_epochs: 300,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            patience: 100,
            seed: 0,
            loss_weights,
            w_pos: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be >= 1");
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad("patience must lie in [1, max_epochs]");
        }
        let w = &self.loss_weights;
        if [w.alpha, w.beta, w.gamma, w.delta].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: LossBreakdown,
    pub val_fitness: f64,
    pub val_metrics: EvalReport,
}

/// `velocity' = momentum * velocity + gradients; weights' = weights - lr * velocity'`.
pub fn sgd_momentum_step(
    weights: &mut [f64],
    gradients: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<(), TrainingError> {
    if weights.len() != gradients.len() || weights.len() != velocity.len() {
        return Err(TrainingError::Shape(format!(
            "weights {}, gradients {}, velocity {}",
            weights.len(),
            gradients.len(),
            velocity.len()
        )));
    }
    for ((w, &g), v) in weights.iter_mut().zip(gradients).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Patience-based stopping on strictly improving fitness.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            epoch: 0,
        }
    }

    /// Records the fitness of the next epoch; returns true when training should stop.
    pub fn update(&mut self, fitness: f64) -> bool {
        let e = self.epoch;
        self.epoch += 1;
        match self.best {
            Some((_, b)) if fitness <= b || fitness.is_nan() => {}
            _ => self.best = Some((e, fitness)),
        }
        e - self.best_epoch() >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best.map_or(0, |(e, _)| e)
    }

    pub fn best_fitness(&self) -> Option<f64> {
        self.best.map(|(_, f)| f)
    }

    /// True if the most recent update set a new best.
    pub fn improved_last(&self) -> bool {
        self.epoch > 0 && self.best_epoch() == self.epoch - 1
    }
}

/// Replays `history` through an [`EarlyStopper`]: `(stop, best epoch)`, where
/// `stop` reports whether the criterion fired at or before the last entry.
pub fn early_stopper(history: &[f64], patience: usize) -> (bool, usize) {
    let mut s = EarlyStopper::new(patience);
    for &f in history {
        if s.update(f) {
            return (true, s.best_epoch());
        }
    }
    (false, s.best_epoch())
}

/// A preprocessed image with its training target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub image: GrayImage,
    pub label: ClassLabel,
    pub gt_box: BBox,
}

impl Sample {
    /// Resizes the image and box to the model input size when needed.
    pub fn new(annotation: &Annotation, image: GrayImage, input_size: usize) -> Self {
        let (w, h) = (image.width(), image.height());
        let gt = scale_box(&annotation.sqr_box, annotation.width, annotation.height, w, h);
        let (image, gt_box) = if w == input_size && h == input_size {
            (image, gt)
        } else {
            (resize(&image, input_size, input_size), scale_box(&gt, w, h, input_size, input_size))
        };
        Self {
            image_id: annotation.image_id.clone(),
            image,
            label: annotation.label,
            gt_box,
        }
    }
}

/// Loads every manifest image (in manifest order).
pub fn load_samples(manifest: &DatasetManifest, input_size: usize) -> Result<Vec<Sample>, TrainingError> {
    manifest
        .entries()
        .par_iter()
        .map(|a| {
            let img = GrayImage::load_png(manifest.image_path(a))?;
            Ok(Sample::new(a, img, input_size))
        })
        .collect()
}

/// Anything trainable by [`train`]: a flat parameter vector, a loss gradient
/// and a validation fitness.
pub trait Learner {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn loss_and_grad(
        &self,
        batch: &[&Sample],
        dropout_seed: u64,
        weights: &LossWeights,
        w_pos: f64,
    ) -> Result<(LossBreakdown, Vec<f64>), TrainingError>;
    /// `(fitness, report)` on a held-out set.
    fn validate(&self, samples: &[&Sample]) -> Result<(f64, EvalReport), TrainingError>;
}

fn targets_for(model: &Model, batch: &[&Sample]) -> (Vec<AnchorTarget>, Vec<ClassLabel>) {
    batch
        .iter()
        .map(|s| (target_assignment(&s.gt_box, Some(s.label), model.config()), s.label))
        .unzip()
}

impl Learner for Model {
    fn params(&self) -> &[f64] {
        Model::params(self)
    }

    fn params_mut(&mut self) -> &mut [f64] {
        Model::params_mut(self)
    }

    fn loss_and_grad(
        &self,
        batch: &[&Sample],
        dropout_seed: u64,
        weights: &LossWeights,
        w_pos: f64,
    ) -> Result<(LossBreakdown, Vec<f64>), TrainingError> {
        let images: Vec<&GrayImage> = batch.iter().map(|s| &s.image).collect();
        let (targets, labels) = targets_for(self, batch);
        let fwd = self.forward_batch(&images, Some(dropout_seed))?;
        Ok(match self.config().mode {
            Mode::DetectionTwoClass => {
                let (loss, d_raw) = detection_loss_grad(&fwd.raw, &targets, self.config(), weights, true);
                let grads = self.backward_batch(&fwd, &d_raw.expect("gradient requested"), None);
                (loss, grads)
            }
            Mode::MultiTask => {
                let logits = fwd.cls_logits.as_ref().expect("multi-task model has a classifier");
                let (loss, d_raw, d_logits) =
                    multitask_loss_grad(&fwd.raw, logits, &targets, &labels, self.config(), weights, w_pos);
                let grads = self.backward_batch(&fwd, &d_raw, Some(&d_logits));
                (loss, grads)
            }
        })
    }

    fn validate(&self, samples: &[&Sample]) -> Result<(f64, EvalReport), TrainingError> {
        let report = evaluate(self, samples)?;
        Ok((fitness(self.config().mode, &report), report))
    }
}

/// The early-stopping fitness of a mode.
pub fn fitness(mode: Mode, report: &EvalReport) -> f64 {
    match mode {
        Mode::DetectionTwoClass => detection_fitness(report.map50, report.map5095),
        Mode::MultiTask => multitask_fitness(report.balanced_accuracy, report.map50),
    }
}

const EVAL_BATCH: usize = 32;

/// Per-image predictions of `model` on `samples`.
pub fn predict_samples(model: &Model, samples: &[&Sample]) -> Result<Vec<Prediction>, TrainingError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        let fwd = model.forward_batch(&images, None)?;
        let probs = fwd.cls_probs();
        for b in 0..chunk.len() {
            let dets = decode_image(&fwd.raw, b, model.config(), EVAL_CONF_THRESHOLD);
            let top = select_top(&dets).ok();
            out.push(Prediction::new(model.config().mode, top, probs.as_ref().map(|p| p[b])));
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Model, samples: &[&Sample]) -> Result<EvalReport, TrainingError> {
    let preds = predict_samples(model, samples)?;
    let items: Vec<EvalItem> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| EvalItem {
            image_id: s.image_id.clone(),
            predicted: p.label,
            confidence: p.confidence,
            detection: p.detection,
            gt_box: s.gt_box,
            gt_label: s.label,
        })
        .collect();
    Ok(EvalReport::from_items(
        &items,
        model.config().mode == Mode::DetectionTwoClass,
    )?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_fitness: f64,
    pub w_pos: f64,
}

/// Ratio of NonDistended to Distended samples.
pub fn sample_class_weight(samples: &[&Sample]) -> Result<f64, TrainingError> {
    let pos = samples.iter().filter(|s| s.label.is_positive()).count();
    if pos == 0 {
        return Err(DatasetError::NoPositiveSamples.into());
    }
    Ok((samples.len() - pos) as f64 / pos as f64)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains `learner` in place, leaving it at the parameters of the best
/// validation epoch. `on_epoch` sees every record as it is produced.
pub fn train<L: Learner>(
    learner: &mut L,
    train_set: &[&Sample],
    val_set: &[&Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainingError> {
    config.validate()?;
    let train_ids: BTreeSet<&str> = train_set.iter().map(|s| s.image_id.as_str()).collect();
    if let Some(s) = val_set.iter().find(|s| train_ids.contains(s.image_id.as_str())) {
        return Err(TrainingError::Config(format!("image {} is in both train and validation sets", s.image_id)));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainingError::Config("train and validation sets must be non-empty".into()));
    }
    let computed = sample_class_weight(train_set)?;
    let w_pos = match config.w_pos {
        Some(w) if (w - computed).abs() > 1e-9 => {
            return Err(TrainingError::Config(format!(
                "w_pos {w} does not match the training split ratio {computed}"
            )))
        }
        _ => computed,
    };

    let mut velocity = vec![0.0; learner.params().len()];
    let mut best_params = learner.params().to_vec();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.max_epochs {
        let eseed = epoch_seed(config.seed, epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(eseed));
        let mut losses = Vec::new();
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train_set[i]).collect();
            let (loss, mut grads) = learner.loss_and_grad(&batch, eseed.wrapping_add(bi as u64), &config.loss_weights, w_pos)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainingError::NonFiniteLoss { epoch, batch: bi, loss });
            }
            if config.weight_decay > 0.0 {
                grads
                    .iter_mut()
                    .zip(learner.params())
                    .for_each(|(g, w)| *g += config.weight_decay * w);
            }
            sgd_momentum_step(learner.params_mut(), &grads, &mut velocity, config.learning_rate, config.momentum)?;
            losses.push(loss);
        }
        let (val_fitness, val_metrics) = learner.validate(val_set)?;
        let stop = stopper.update(val_fitness);
        if stopper.improved_last() {
            best_params.copy_from_slice(learner.params());
        }
        let record = EpochRecord {
            epoch,
            train_loss: LossBreakdown::mean(&losses),
            val_fitness,
            val_metrics,
        };
        on_epoch(&record);
        history.push(record);
        if stop {
            break;
        }
    }
    learner.params_mut().copy_from_slice(&best_params);
    Ok(TrainOutcome {
        best_epoch: stopper.best_epoch(),
        best_fitness: stopper.best_fitness().unwrap_or(f64::NAN),
        history,
        w_pos,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.windows(2).all(|w| w[0] == w[1]) {
            return Self {
                mean: values.first().copied().unwrap_or(f64::NAN),
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub balanced_accuracy: MeanStd,
    pub specificity: MeanStd,
    pub sensitivity: MeanStd,
    pub mean_iou: MeanStd,
    pub frac_iou_ge_05: MeanStd,
    pub map50: MeanStd,
    pub map5095: MeanStd,
}

impl CvSummary {
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        let m = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            balanced_accuracy: m(|r| r.balanced_accuracy),
            specificity: m(|r| r.specificity),
            sensitivity: m(|r| r.sensitivity),
            mean_iou: m(|r| r.mean_iou),
            frac_iou_ge_05: m(|r| r.frac_iou_ge_05),
            map50: m(|r| r.map50),
            map5095: m(|r| r.map5095),
        }
    }

    /// Text table with the four clinical columns, one row per `(fold, report)`
    /// plus the mean.
    pub fn table(&self, label: &str, folds: &[(usize, &EvalReport)]) -> String {
        let mut s = format!(
            "{:<12} {:>17} {:>17} {:>17} {:>17}\n",
            label, "Balanced accuracy", "Specificity", "Sensitivity", "IoU"
        );
        for &(i, r) in folds {
            s += &format!(
                "{:<12} {:>17.3} {:>17.3} {:>17.3} {:>17.3}\n",
                format!("fold {i}"),
                r.balanced_accuracy,
                r.specificity,
                r.sensitivity,
                r.mean_iou
            );
        }
        let f = |m: MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
        s += &format!(
            "{:<12} {:>17} {:>17} {:>17} {:>17}\n",
            "mean",
            f(self.balanced_accuracy),
            f(self.specificity),
            f(self.sensitivity),
            f(self.mean_iou)
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Best validation fitness reached during training.
    pub val_fitness: f64,
    pub w_pos: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub mode: Mode,
    pub folds: Vec<FoldResult>,
    pub summary: CvSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    /// Fraction of each fold's training patients kept for training (the rest validates).
    pub train_ratio: f64,
    pub split_seed: u64,
    pub model_seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            train_ratio: 0.8,
            split_seed: 0,
            model_seed: 0,
        }
    }
}

/// Trains and evaluates one fold whose validation set has already been carved out.
pub fn run_fold(
    manifest: &DatasetManifest,
    samples: &[Sample],
    split: &FoldSplit,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    model_seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, FoldResult), TrainingError> {
    let pick = |ids: &BTreeSet<String>| -> Vec<&Sample> { samples.iter().filter(|s| ids.contains(&s.image_id)).collect() };
    let train_set = pick(&split.train_ids);
    let val_set = pick(&split.val_ids);
    let test_set = pick(&split.test_ids);
    let w_pos = class_weight(&split.train_ids, manifest)?;
    let config = TrainConfig {
        w_pos: Some(w_pos),
        ..train_config.clone()
    };
    let mut model = Model::new(model_config.clone(), model_seed)?;
    let outcome = train(&mut model, &train_set, &val_set, &config, on_epoch)?;
    let report = evaluate(&model, &test_set)?;
    Ok((
        model,
        FoldResult {
            fold: split.fold_index,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            val_fitness: outcome.best_fitness,
            w_pos: outcome.w_pos,
            report,
        },
    ))
}

/// Patient-grouped k-fold cross-validation; `samples` must cover the manifest.
pub fn cross_validate(
    manifest: &DatasetManifest,
    samples: &[Sample],
    cv: &CvConfig,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut on_fold: impl FnMut(&FoldResult),
) -> Result<CvReport, TrainingError> {
    let folds = grouped_kfold(manifest, cv.k, cv.split_seed)?;
    let mut results = Vec::with_capacity(folds.len());
    for fold in &folds {
        let split = train_val_split(fold, manifest, cv.train_ratio, cv.split_seed);
        let (_, result) = run_fold(manifest, samples, &split, model_config, train_config, cv.model_seed, |_| {})?;
        on_fold(&result);
        results.push(result);
    }
    let reports: Vec<EvalReport> = results.iter().map(|r| r.report.clone()).collect();
    Ok(CvReport {
        mode: model_config.mode,
        summary: CvSummary::from_reports(&reports),
        folds: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut w = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        sgd_momentum_step(&mut w, &[0.5, -1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(w, vec![0.95, 2.1]);
        let mut w2 = vec![3.0];
        let mut v2 = vec![0.0];
        sgd_momentum_step(&mut w2, &[0.0], &mut v2, 0.5, 0.9).unwrap();
        assert_eq!(w2, vec![3.0]);
        let mut w3 = vec![0.0];
        let mut v3 = vec![0.0];
        for _ in 0..2 {
            sgd_momentum_step(&mut w3, &[2.0], &mut v3, 1.0, 0.5).unwrap();
        }
        assert_eq!(w3, vec![-5.0]);
        assert!(sgd_momentum_step(&mut w3, &[1.0, 2.0], &mut v3, 1.0, 0.5).is_err());
    }

    #[test]
    fn stopper_examples() {
        assert_eq!(early_stopper(&[0.1, 0.2, 0.3, 0.4, 0.5], 1), (false, 4));
        let s = [0.5, 0.6, 0.6, 0.6, 0.6];
        assert_eq!(early_stopper(&s[..4], 3), (false, 1));
        assert_eq!(early_stopper(&s, 3), (true, 1));
        assert_eq!(early_stopper(&[0.3, 0.3], 1), (true, 0));
        assert_eq!(early_stopper(&[0.3], 1), (false, 0));
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[0.7, 0.7, 0.7]);
        assert_eq!((m.mean, m.std), (0.7, 0.0));
        let m = MeanStd::of(&[1.0, 3.0]);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-12);
    }
}
