//! Shared convolutional feature extractor with a grid detection head and an
//! optional whole-image classification branch.
//!
//! Two operating modes:
//! * `DetectionTwoClass`: the head predicts Distended / NonDistended boxes.
//! * `MultiTask`: the head predicts a single `Recess` class and a separate
//!   classifier (adaptive pooling, two hidden layers, softmax) labels the image.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, ClassLabel};
use crate::imaging::{iou, BBox, GrayImage, Label, LabeledBox};
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, relu_backward, relu_inplace, sigmoid, softmax, Conv2d, ConvCache,
    GroupNorm, Linear, NormCache, ParamAllocator, ParamSpec, Real, Shape3,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("operation not available in {0:?} mode")]
    Mode(Mode),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("no recess detected")]
    NoDetection,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    DetectionTwoClass,
    MultiTask,
}

impl Mode {
    /// Number of detection classes.
    pub fn classes(self) -> usize {
        match self {
            Mode::DetectionTwoClass => 2,
            Mode::MultiTask => 1,
        }
    }
}

/// Scalar type of the convolutional part. Parameters are always stored in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub input_size: usize,
    /// Output channels of each stride-2 stage.
    pub backbone_channels: Vec<usize>,
    /// Convolutions per stage (the first one strided).
    pub stage_depths: Vec<usize>,
    pub norm_groups: usize,
    pub grid_size: usize,
    /// Anchor priors `(w, h)` in input pixels; one anchor per prior and cell.
    pub anchor_priors: Vec<(f64, f64)>,
    pub classifier_hidden: (usize, usize),
    pub dropout_rate: f64,
    pub pooled_size: (usize, usize),
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// Full-size layout: four stages of two convolutions, 16x16 grid, three anchors.
    pub fn standard(mode: Mode) -> Self {
        Self {
            mode,
            input_size: 256,
            backbone_channels: vec![16, 32, 64, 128],
            stage_depths: vec![2, 2, 2, 2],
            norm_groups: 4,
            grid_size: 16,
            anchor_priors: vec![(96.0, 10.0), (104.0, 22.0), (112.0, 36.0)],
            classifier_hidden: (1024, 512),
            dropout_rate: 0.1,
            pooled_size: (8, 8),
            precision: Precision::F32,
        }
    }

    /// Narrow variant of [`ModelConfig::standard`] for CPU training, with a
    /// single anchor prior shared by both recess classes.
    pub fn tiny(mode: Mode) -> Self {
        Self {
            backbone_channels: vec![8, 16, 24, 32],
            stage_depths: vec![1, 1, 2, 4],
            anchor_priors: vec![(104.0, 16.0)],
            ..Self::standard(mode)
        }
    }

    /// Same layout at another input size; grid and anchor priors scale along.
    pub fn with_input_size(mut self, input_size: usize) -> Self {
        let f = input_size as f64 / self.input_size as f64;
        self.anchor_priors.iter_mut().for_each(|p| *p = (p.0 * f, p.1 * f));
        self.grid_size = input_size >> self.backbone_channels.len();
        self.input_size = input_size;
        self
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_priors.len()
    }

    pub fn classes(&self) -> usize {
        self.mode.classes()
    }

    /// Values per anchor: four box parameters, objectness and class logits.
    pub fn anchor_width(&self) -> usize {
        5 + self.classes()
    }

    pub fn stride(&self) -> f64 {
        self.input_size as f64 / self.grid_size as f64
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.stage_depths.len() {
            return bad("backbone_channels and stage_depths must be non-empty and of equal length".into());
        }
        if self.stage_depths.contains(&0) || self.backbone_channels.contains(&0) {
            return bad("stage depths and channel counts must be >= 1".into());
        }
        if let Some(c) = self.backbone_channels.iter().find(|&&c| c % self.norm_groups.max(1) != 0) {
            return bad(format!("norm_groups {} does not divide {c} channels", self.norm_groups));
        }
        let down = 1usize << self.backbone_channels.len();
        if self.input_size == 0 || self.input_size % down != 0 || self.input_size / down != self.grid_size {
            return bad(format!(
                "input_size {} with {} stride-2 stages does not give grid_size {}",
                self.input_size,
                self.backbone_channels.len(),
                self.grid_size
            ));
        }
        if self.anchor_priors.is_empty() || self.anchor_priors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return bad("anchor priors must be non-empty with positive sizes".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)".into());
        }
        if self.pooled_size.0 == 0 || self.pooled_size.1 == 0 || self.classifier_hidden.0 == 0 || self.classifier_hidden.1 == 0
        {
            return bad("pooled_size and classifier_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Final backbone stage for a batch, `(batch, channels, S, S)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub batch: usize,
    pub channels: usize,
    pub grid: usize,
    pub data: Vec<f64>,
}

impl FeatureMaps {
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.grid, self.grid)
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.channels * self.grid * self.grid;
        &self.data[b * n..(b + 1) * n]
    }
}

/// Raw head output `(batch, S, S, A, 5 + C)`: `tx, ty, tw, th`, objectness
/// logit, then class logits. No activation is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub batch: usize,
    pub grid: usize,
    pub anchors: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl RawPrediction {
    pub fn zeros(batch: usize, grid: usize, anchors: usize, classes: usize) -> Self {
        Self {
            batch,
            grid,
            anchors,
            classes,
            data: vec![0.0; batch * grid * grid * anchors * (5 + classes)],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize, usize) {
        (self.batch, self.grid, self.grid, self.anchors, 5 + self.classes)
    }

    pub fn per_image(&self) -> usize {
        self.grid * self.grid * self.anchors * (5 + self.classes)
    }

    pub fn image(&self, b: usize) -> &[f64] {
        let n = self.per_image();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn index(&self, b: usize, row: usize, col: usize, a: usize) -> usize {
        (((b * self.grid + row) * self.grid + col) * self.anchors + a) * (5 + self.classes)
    }

    pub fn anchor(&self, b: usize, row: usize, col: usize, a: usize) -> &[f64] {
        let i = self.index(b, row, col, a);
        &self.data[i..i + 5 + self.classes]
    }

    pub fn anchor_mut(&mut self, b: usize, row: usize, col: usize, a: usize) -> &mut [f64] {
        let i = self.index(b, row, col, a);
        &mut self.data[i..i + 5 + self.classes]
    }
}

/// Training target for one image: the single positive anchor and its
/// regression targets (the inverse of [`decode_predictions`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub class_index: usize,
    pub gt: BBox,
}

// IoU of two boxes sharing a centre
fn shape_iou(w0: f64, h0: f64, w1: f64, h1: f64) -> f64 {
    let inter = w0.min(w1) * h0.min(h1);
    inter / (w0 * h0 + w1 * h1 - inter)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Positive anchor for `gt`: the cell containing its centre and the prior
/// with the highest centred IoU (first one on ties).
pub fn target_assignment(gt: &BBox, class: Option<ClassLabel>, config: &ModelConfig) -> AnchorTarget {
    let stride = config.stride();
    let (cx, cy) = gt.center();
    let col = ((cx / stride).floor().max(0.0) as usize).min(config.grid_size - 1);
    let row = ((cy / stride).floor().max(0.0) as usize).min(config.grid_size - 1);
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (a, &(pw, ph)) in config.anchor_priors.iter().enumerate() {
        let v = shape_iou(gt.width(), gt.height(), pw, ph);
        if v > best_iou {
            best_iou = v;
            best = a;
        }
    }
    let (pw, ph) = config.anchor_priors[best];
    AnchorTarget {
        row,
        col,
        anchor: best,
        tx: logit(cx / stride - col as f64),
        ty: logit(cy / stride - row as f64),
        tw: (gt.width() / pw).ln(),
        th: (gt.height() / ph).ln(),
        class_index: match (config.mode, class) {
            (Mode::DetectionTwoClass, Some(c)) => c.index(),
            _ => 0,
        },
        gt: *gt,
    }
}

/// Largest box-size exponent accepted when decoding.
pub const MAX_LOG_SCALE: f64 = 8.0;

/// Unclipped `(cx, cy, w, h)` of one anchor.
pub fn decode_box_params(values: &[f64], row: usize, col: usize, prior: (f64, f64), stride: f64) -> (f64, f64, f64, f64) {
    let cx = (col as f64 + sigmoid(values[0])) * stride;
    let cy = (row as f64 + sigmoid(values[1])) * stride;
    let w = prior.0 * values[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = prior.1 * values[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    (cx, cy, w, h)
}

fn label_for(mode: Mode, class_index: usize) -> Label {
    match mode {
        Mode::MultiTask => Label::Recess,
        Mode::DetectionTwoClass => ClassLabel::from_index(class_index).into(),
    }
}

/// Decodes one image's anchors into boxes with confidence
/// `sigmoid(objectness) * max class probability`, dropping those below
/// `conf_threshold`, sorted by confidence (stable, descending).
pub fn decode_image(raw: &RawPrediction, b: usize, config: &ModelConfig, conf_threshold: f64) -> Vec<LabeledBox> {
    let stride = config.stride();
    let size = config.input_size as f64;
    let mut out = Vec::new();
    for row in 0..raw.grid {
        for col in 0..raw.grid {
            for a in 0..raw.anchors {
                let v = raw.anchor(b, row, col, a);
                let (class_index, class_prob) = if raw.classes == 1 {
                    (0, 1.0)
                } else {
                    let p = softmax(&v[5..]);
                    p.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &pi)| if pi > best.1 { (i, pi) } else { best })
                };
                let confidence = (sigmoid(v[4]) * class_prob).clamp(0.0, 1.0);
                if confidence < conf_threshold {
                    continue;
                }
                let (cx, cy, w, h) = decode_box_params(v, row, col, config.anchor_priors[a], stride);
                let w = w.min(size);
                let h = h.min(size);
                let bbox = BBox::from_center(cx, cy, w, h)
                    .ok()
                    .and_then(|bb| bb.clip(size, size))
                    .unwrap_or_else(|| BBox::from_center(cx, cy, 1e-6, 1e-6).expect("finite centre"));
                out.push(LabeledBox {
                    bbox,
                    label: label_for(config.mode, class_index),
                    confidence,
                });
            }
        }
    }
    out.sort_by(|x, y| y.confidence.total_cmp(&x.confidence));
    out
}

pub fn decode_predictions(raw: &RawPrediction, config: &ModelConfig, conf_threshold: f64) -> Vec<Vec<LabeledBox>> {
    (0..raw.batch).map(|b| decode_image(raw, b, config, conf_threshold)).collect()
}

/// Highest-confidence detection; the first one in order on ties.
pub fn select_top(detections: &[LabeledBox]) -> Result<LabeledBox, ModelError> {
    detections
        .iter()
        .enumerate()
        .fold(None::<(usize, &LabeledBox)>, |best, (i, d)| match best {
            Some((_, b)) if b.confidence >= d.confidence => best,
            _ => Some((i, d)),
        })
        .map(|(_, d)| *d)
        .ok_or(ModelError::NoDetection)
}

#[derive(Debug, Clone)]
struct Stage {
    convs: Vec<(Conv2d, GroupNorm)>,
}

#[derive(Debug, Clone)]
struct Classifier {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

/// Per-sample activations kept for the backward pass.
struct SampleCache<T> {
    layers: Vec<(ConvCache<T>, NormCache<T>, Vec<T>, Shape3)>,
    head: ConvCache<T>,
}

enum SampleCaches {
    /// Conv parameters rounded to `f32` plus the caches computed with them.
    F32(Vec<f32>, Vec<SampleCache<f32>>),
    F64(Vec<SampleCache<f64>>),
}

pub struct ClassifierCache {
    batch: usize,
    pooled: Vec<f64>,
    h1: Vec<f64>,
    mask: Option<Vec<f64>>,
    h1_dropped: Vec<f64>,
    h2: Vec<f64>,
}

/// Forward results of a batch with everything needed to backpropagate.
pub struct BatchForward {
    pub raw: RawPrediction,
    pub features: Vec<Vec<f64>>,
    /// Classifier logits `(NonDistended, Distended)` per image (multi-task only).
    pub cls_logits: Option<Vec<[f64; 2]>>,
    samples: SampleCaches,
    classifier: Option<ClassifierCache>,
}

impl BatchForward {
    pub fn cls_probs(&self) -> Option<Vec<[f64; 2]>> {
        self.cls_logits.as_ref().map(|l| {
            l.iter()
                .map(|z| {
                    let p = softmax(z);
                    [p[0], p[1]]
                })
                .collect()
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<f64>,
    stages: Vec<Stage>,
    head: Conv2d,
    classifier: Option<Classifier>,
    conv_params: usize,
}

/// Initial objectness bias; starts every anchor at a low object probability.
const OBJ_BIAS_INIT: f64 = -5.0;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::layout(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = std::mem::take(&mut model.params);
        for stage in &model.stages {
            for (conv, norm) in &stage.convs {
                conv.init(&mut params, &mut rng);
                norm.init(&mut params);
            }
        }
        model.head.init(&mut params, &mut rng);
        let head_w = model.head.weight..model.head.weight + model.head.out_c * model.head.in_c;
        params[head_w].iter_mut().for_each(|w| *w *= 0.1);
        let width = model.config.anchor_width();
        for a in 0..model.config.anchors_per_cell() {
            params[model.head.bias + a * width + 4] = OBJ_BIAS_INIT;
        }
        if let Some(cls) = &model.classifier {
            cls.fc1.init(&mut params, &mut rng, 1.0);
            cls.fc2.init(&mut params, &mut rng, 1.0);
            cls.fc3.init(&mut params, &mut rng, 0.1);
        }
        model.params = params;
        Ok(model)
    }

    fn layout(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut alloc = ParamAllocator::default();
        let mut stages = Vec::new();
        let mut in_c = 1;
        for (s, (&out_c, &depth)) in config.backbone_channels.iter().zip(&config.stage_depths).enumerate() {
            let mut convs = Vec::new();
            for d in 0..depth {
                let name = format!("backbone.{s}.{d}");
                let conv = Conv2d::new(&mut alloc, &format!("{name}.conv"), in_c, out_c, 3, if d == 0 { 2 } else { 1 });
                let norm = GroupNorm::new(&mut alloc, &format!("{name}.norm"), out_c, config.norm_groups);
                convs.push((conv, norm));
                in_c = out_c;
            }
            stages.push(Stage { convs });
        }
        let head = Conv2d::new(
            &mut alloc,
            "head.conv",
            in_c,
            config.anchors_per_cell() * config.anchor_width(),
            1,
            1,
        );
        let conv_params = alloc.total;
        let classifier = (config.mode == Mode::MultiTask).then(|| {
            let (ph, pw) = config.pooled_size;
            let (h1, h2) = config.classifier_hidden;
            Classifier {
                fc1: Linear::new(&mut alloc, "classifier.fc1", in_c * ph * pw, h1),
                fc2: Linear::new(&mut alloc, "classifier.fc2", h1, h2),
                fc3: Linear::new(&mut alloc, "classifier.fc3", h2, 2),
            }
        });
        Ok(Self {
            params: vec![0.0; alloc.total],
            specs: alloc.specs,
            config,
            stages,
            head,
            classifier,
            conv_params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Width of the classifier input after pooling and flattening.
    pub fn classifier_input_width(&self) -> Option<usize> {
        self.classifier.as_ref().map(|c| c.fc1.in_f)
    }

    fn check_image(&self, img: &GrayImage) -> Result<(), ModelError> {
        let n = self.config.input_size;
        if img.width() != n || img.height() != n {
            return Err(ModelError::Shape(format!(
                "expected {n}x{n} input, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    fn conv_params_f32(&self) -> Vec<f32> {
        self.params[..self.conv_params].iter().map(|&v| v as f32).collect()
    }

    fn forward_sample<T: Real>(&self, params: &[T], img: &GrayImage) -> (Vec<f64>, Vec<f64>, SampleCache<T>) {
        let n = self.config.input_size;
        let mut x: Vec<T> = img.pixels().iter().map(|&v| T::from_f64(v as f64)).collect();
        let mut s = Shape3 { c: 1, h: n, w: n };
        let mut layers = Vec::new();
        for stage in &self.stages {
            for (conv, norm) in &stage.convs {
                let (y, o, cc) = conv.forward(params, &x, s);
                let (mut z, nc) = norm.forward(params, &y, o);
                relu_inplace(&mut z);
                x = z.clone();
                s = o;
                layers.push((cc, nc, z, o));
            }
        }
        let (head_out, _, head_cache) = self.head.forward(params, &x, s);
        // channel-major head output -> (row, col, anchor, value)
        let g = self.config.grid_size;
        let width = self.config.anchor_width();
        let anchors = self.config.anchors_per_cell();
        let mut raw = vec![0.0; g * g * anchors * width];
        for a in 0..anchors {
            for k in 0..width {
                let plane = &head_out[(a * width + k) * g * g..][..g * g];
                for (cell, &v) in plane.iter().enumerate() {
                    raw[(cell * anchors + a) * width + k] = v.to_f64();
                }
            }
        }
        let cache = SampleCache {
            layers,
            head: head_cache,
        };
        (x.iter().map(|v| v.to_f64()).collect(), raw, cache)
    }

    // gradient of the conv-part parameters for one sample
    fn backward_sample<T: Real>(
        &self,
        params: &[T],
        cache: &SampleCache<T>,
        d_raw: &[f64],
        d_features: Option<&[f64]>,
    ) -> Vec<f64> {
        let g = self.config.grid_size;
        let width = self.config.anchor_width();
        let anchors = self.config.anchors_per_cell();
        let mut d_head = vec![T::ZERO; g * g * anchors * width];
        for a in 0..anchors {
            for k in 0..width {
                let plane = &mut d_head[(a * width + k) * g * g..][..g * g];
                for (cell, v) in plane.iter_mut().enumerate() {
                    *v = T::from_f64(d_raw[(cell * anchors + a) * width + k]);
                }
            }
        }
        let mut grads = vec![T::ZERO; self.conv_params];
        let mut dx = self
            .head
            .backward(params, &cache.head, &d_head, &mut grads, true)
            .expect("input gradient requested");
        if let Some(df) = d_features {
            dx.iter_mut().zip(df).for_each(|(a, &b)| *a += T::from_f64(b));
        }
        let convs: Vec<&(Conv2d, GroupNorm)> = self.stages.iter().flat_map(|s| s.convs.iter()).collect();
        for (i, ((conv, norm), (cc, nc, out, o))) in convs.iter().zip(&cache.layers).enumerate().rev() {
            relu_backward(out, &mut dx);
            let dy = norm.backward(params, nc, &dx, *o, &mut grads);
            match conv.backward(params, cc, &dy, &mut grads, i > 0) {
                Some(d) => dx = d,
                None => break,
            }
        }
        grads.iter().map(|v| v.to_f64()).collect()
    }

    /// Features, raw head output and caches for every image.
    fn forward_samples(&self, images: &[&GrayImage], keep_cache: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Option<SampleCaches>) {
        fn run<T: Real>(
            model: &Model,
            params: &[T],
            images: &[&GrayImage],
        ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<SampleCache<T>>) {
            let outs: Vec<_> = images.par_iter().map(|img| model.forward_sample(params, img)).collect();
            let mut feats = Vec::with_capacity(outs.len());
            let mut raws = Vec::with_capacity(outs.len());
            let mut caches = Vec::with_capacity(outs.len());
            for (f, r, c) in outs {
                feats.push(f);
                raws.push(r);
                caches.push(c);
            }
            (feats, raws, caches)
        }
        match self.config.precision {
            Precision::F32 => {
                let p = self.conv_params_f32();
                let (f, r, c) = run(self, &p, images);
                (f, r, keep_cache.then(|| SampleCaches::F32(p, c)))
            }
            Precision::F64 => {
                let (f, r, c) = run(self, &self.params, images);
                (f, r, keep_cache.then_some(SampleCaches::F64(c)))
            }
        }
    }

    fn classifier_forward_batch(
        &self,
        cls: &Classifier,
        features: &[Vec<f64>],
        dropout_seed: Option<u64>,
    ) -> (Vec<[f64; 2]>, ClassifierCache) {
        let g = self.config.grid_size;
        let s = Shape3 {
            c: self.config.feature_channels(),
            h: g,
            w: g,
        };
        let (ph, pw) = self.config.pooled_size;
        let batch = features.len();
        let pooled: Vec<f64> = features.iter().flat_map(|f| adaptive_avg_pool(f, s, ph, pw)).collect();
        let mut h1 = cls.fc1.forward(&self.params, &pooled, batch);
        relu_inplace(&mut h1);
        let rate = self.config.dropout_rate;
        let mask = dropout_seed.filter(|_| rate > 0.0).map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 / (1.0 - rate);
            (0..h1.len())
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect::<Vec<f64>>()
        });
        let h1_dropped = match &mask {
            Some(m) => h1.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => h1.clone(),
        };
        let mut h2 = cls.fc2.forward(&self.params, &h1_dropped, batch);
        relu_inplace(&mut h2);
        let logits = cls.fc3.forward(&self.params, &h2, batch);
        let out = logits.chunks(2).map(|z| [z[0], z[1]]).collect();
        (
            out,
            ClassifierCache {
                batch,
                pooled,
                h1,
                mask,
                h1_dropped,
                h2,
            },
        )
    }

    fn classifier_backward_batch(
        &self,
        cls: &Classifier,
        cache: &ClassifierCache,
        d_logits: &[[f64; 2]],
        grads: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let batch = cache.batch;
        let dz: Vec<f64> = d_logits.iter().flat_map(|d| d.iter().copied()).collect();
        let mut dh2 = cls.fc3.backward(&self.params, &cache.h2, &dz, batch, grads);
        relu_backward(&cache.h2, &mut dh2);
        let mut dh1 = cls.fc2.backward(&self.params, &cache.h1_dropped, &dh2, batch, grads);
        if let Some(m) = &cache.mask {
            dh1.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }
        relu_backward(&cache.h1, &mut dh1);
        let dpooled = cls.fc1.backward(&self.params, &cache.pooled, &dh1, batch, grads);
        let g = self.config.grid_size;
        let s = Shape3 {
            c: self.config.feature_channels(),
            h: g,
            w: g,
        };
        let (ph, pw) = self.config.pooled_size;
        dpooled
            .chunks(cls.fc1.in_f)
            .map(|d| adaptive_avg_pool_backward(d, s, ph, pw))
            .collect()
    }

    /// Full forward pass keeping caches. Dropout is active iff `dropout_seed` is set.
    pub fn forward_batch(&self, images: &[&GrayImage], dropout_seed: Option<u64>) -> Result<BatchForward, ModelError> {
        for img in images {
            self.check_image(img)?;
        }
        let (features, raws, samples) = self.forward_samples(images, true);
        let samples = samples.expect("caches requested");
        let g = self.config.grid_size;
        let mut raw = RawPrediction::zeros(images.len(), g, self.config.anchors_per_cell(), self.config.classes());
        raw.data = raws.concat();
        let (cls_logits, classifier) = match &self.classifier {
            Some(cls) => {
                let (l, c) = self.classifier_forward_batch(cls, &features, dropout_seed);
                (Some(l), Some(c))
            }
            None => (None, None),
        };
        Ok(BatchForward {
            raw,
            features,
            cls_logits,
            samples,
            classifier,
        })
    }

    /// Backpropagates gradients of the raw head output and (multi-task) the
    /// classifier logits; returns the gradient of every parameter.
    pub fn backward_batch(&self, fwd: &BatchForward, d_raw: &RawPrediction, d_cls_logits: Option<&[[f64; 2]]>) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        let d_features = match (&self.classifier, &fwd.classifier, d_cls_logits) {
            (Some(cls), Some(cache), Some(d)) => Some(self.classifier_backward_batch(cls, cache, d, &mut grads)),
            _ => None,
        };
        let d_feat = |b: usize| d_features.as_ref().map(|d| d[b].as_slice());
        let per_sample: Vec<Vec<f64>> = match &fwd.samples {
            SampleCaches::F32(p, caches) => caches
                .par_iter()
                .enumerate()
                .map(|(b, cache)| self.backward_sample(p, cache, d_raw.image(b), d_feat(b)))
                .collect(),
            SampleCaches::F64(caches) => caches
                .par_iter()
                .enumerate()
                .map(|(b, cache)| self.backward_sample(&self.params, cache, d_raw.image(b), d_feat(b)))
                .collect(),
        };
        // fixed summation order keeps results independent of thread scheduling
        for g in &per_sample {
            grads[..self.conv_params].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        grads
    }

    pub fn backbone_forward(&self, images: &[&GrayImage]) -> Result<FeatureMaps, ModelError> {
        for img in images {
            self.check_image(img)?;
        }
        let (feats, _, _) = self.forward_samples(images, false);
        Ok(FeatureMaps {
            batch: images.len(),
            channels: self.config.feature_channels(),
            grid: self.config.grid_size,
            data: feats.concat(),
        })
    }

    fn check_features(&self, f: &FeatureMaps) -> Result<(), ModelError> {
        if f.channels != self.config.feature_channels() || f.grid != self.config.grid_size {
            return Err(ModelError::Shape(format!(
                "features {:?} do not match channels {} / grid {}",
                f.shape(),
                self.config.feature_channels(),
                self.config.grid_size
            )));
        }
        Ok(())
    }

    pub fn detection_head_forward(&self, features: &FeatureMaps) -> Result<RawPrediction, ModelError> {
        self.check_features(features)?;
        let g = self.config.grid_size;
        let s = Shape3 {
            c: features.channels,
            h: g,
            w: g,
        };
        let width = self.config.anchor_width();
        let anchors = self.config.anchors_per_cell();
        let mut raw = RawPrediction::zeros(features.batch, g, anchors, self.config.classes());
        for b in 0..features.batch {
            let out: Vec<f64> = match self.config.precision {
                Precision::F32 => {
                    let p = &self.conv_params_f32();
                    let x: Vec<f32> = features.sample(b).iter().map(|&v| v as f32).collect();
                    self.head.forward(p, &x, s).0.iter().map(|&v| v as f64).collect()
                }
                Precision::F64 => self.head.forward(&self.params, features.sample(b), s).0,
            };
            for a in 0..anchors {
                for k in 0..width {
                    for cell in 0..g * g {
                        let i = raw.index(b, cell / g, cell % g, a) + k;
                        raw.data[i] = out[(a * width + k) * g * g + cell];
                    }
                }
            }
        }
        Ok(raw)
    }

    /// Class probabilities `(p_nondistended, p_distended)` per image.
    /// Dropout is applied only when `training` is set, drawing from `seed`.
    pub fn classifier_forward(&self, features: &FeatureMaps, training: bool, seed: u64) -> Result<Vec<[f64; 2]>, ModelError> {
        let cls = self.classifier.as_ref().ok_or(ModelError::Mode(self.config.mode))?;
        self.check_features(features)?;
        let feats: Vec<Vec<f64>> = (0..features.batch).map(|b| features.sample(b).to_vec()).collect();
        let (logits, _) = self.classifier_forward_batch(cls, &feats, training.then_some(seed));
        Ok(logits
            .iter()
            .map(|z| {
                let p = softmax(z);
                [p[0], p[1]]
            })
            .collect())
    }

    /// Inference on a batch: the top detection (if any) and, in multi-task
    /// mode, the classifier probabilities.
    pub fn predict(&self, images: &[&GrayImage], conf_threshold: f64) -> Result<Vec<Prediction>, ModelError> {
        for img in images {
            self.check_image(img)?;
        }
        let (features, raws, _) = self.forward_samples(images, false);
        let g = self.config.grid_size;
        let mut raw = RawPrediction::zeros(images.len(), g, self.config.anchors_per_cell(), self.config.classes());
        raw.data = raws.concat();
        let probs = self.classifier.as_ref().map(|cls| {
            let (logits, _) = self.classifier_forward_batch(cls, &features, None);
            logits
                .iter()
                .map(|z| {
                    let p = softmax(z);
                    [p[0], p[1]]
                })
                .collect::<Vec<_>>()
        });
        Ok((0..images.len())
            .map(|b| {
                let dets = decode_image(&raw, b, &self.config, conf_threshold);
                let top = select_top(&dets).ok();
                let class_probs = probs.as_ref().map(|p| p[b]);
                Prediction::new(self.config.mode, top, class_probs)
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<(), ModelError> {
        let path = path.as_ref();
        let bytes = encode_checkpoint(self, extra);
        let mut f = fs::File::create(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(&bytes).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value), ModelError> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| ModelError::Io {
                path: path.display().to_string(),
                source,
            })?;
        decode_checkpoint(&bytes)
    }
}

/// Image-level decision derived from a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub detection: Option<LabeledBox>,
    pub class_probs: Option<[f64; 2]>,
    pub label: ClassLabel,
    pub confidence: f64,
}

impl Prediction {
    /// Multi-task images take the classifier's decision; detection-only
    /// images take the label of the top box. No detection means NonDistended.
    pub fn new(mode: Mode, detection: Option<LabeledBox>, class_probs: Option<[f64; 2]>) -> Self {
        let (label, confidence) = match (mode, class_probs, detection) {
            (Mode::MultiTask, Some(p), _) => {
                if p[1] >= 0.5 {
                    (ClassLabel::Distended, p[1])
                } else {
                    (ClassLabel::NonDistended, p[0])
                }
            }
            (_, _, Some(d)) => (
                if d.label == Label::Distended {
                    ClassLabel::Distended
                } else {
                    ClassLabel::NonDistended
                },
                d.confidence,
            ),
            _ => (ClassLabel::NonDistended, 0.0),
        };
        Self {
            detection,
            class_probs,
            label,
            confidence,
        }
    }

    pub fn iou_with(&self, gt: &Annotation) -> f64 {
        self.detection.map_or(0.0, |d| iou(&d.bbox, &gt.sqr_box))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RCADCKPT";
pub const CHECKPOINT_FORMAT: &str = "recess-cad-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    tensors: Vec<ParamSpec>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Layout: magic, little-endian `u64` header length, JSON header, then every
/// tensor as little-endian `f32` in header order.
pub fn encode_checkpoint(model: &Model, extra: serde_json::Value) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config.clone(),
        tensors: model.specs.clone(),
        extra,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.params.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for spec in &model.specs {
        for &v in &model.params[spec.range()] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, serde_json::Value), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic tag"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!("unsupported format {:?}", header.format)));
    }
    let mut model = Model::layout(header.config)?;
    let mut cursor = 16 + hlen;
    for spec in &header.tensors {
        let target = model
            .specs
            .iter()
            .find(|s| s.name == spec.name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {}", spec.name)))?
            .clone();
        if target.shape != spec.shape {
            return Err(ModelError::Checkpoint(format!("tensor {} has shape {:?}, expected {:?}", spec.name, spec.shape, target.shape)));
        }
        let n = target.len();
        let data = bytes.get(cursor..cursor + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        for (dst, chunk) in model.params[target.range()].iter_mut().zip(data.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
        cursor += 4 * n;
    }
    if header.tensors.len() != model.specs.len() {
        return Err(bad("checkpoint is missing tensors"));
    }
    Ok((model, header.extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: Mode) -> ModelConfig {
        ModelConfig::tiny(mode)
    }

    #[test]
    fn backbone_shape_contract() {
        let model = Model::new(ModelConfig::standard(Mode::MultiTask), 0).unwrap();
        let imgs: Vec<GrayImage> = (0..4).map(|i| GrayImage::filled(256, 256, i as f32 * 0.2).unwrap()).collect();
        let refs: Vec<&GrayImage> = imgs.iter().collect();
        let f = model.backbone_forward(&refs).unwrap();
        assert_eq!(f.shape(), (4, 128, 16, 16));
        assert_eq!(model.classifier_input_width(), Some(8 * 8 * 128));
        let wrong = GrayImage::filled(128, 128, 0.0).unwrap();
        assert!(matches!(model.backbone_forward(&[&wrong]), Err(ModelError::Shape(_))));
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut model = Model::new(cfg(Mode::DetectionTwoClass), 1).unwrap();
        let specs = model.param_specs().to_vec();
        for s in specs.iter().filter(|s| s.name.starts_with("backbone") && !s.name.ends_with("gamma")) {
            model.params_mut()[s.range()].fill(0.0);
        }
        let img = GrayImage::new(256, 256).unwrap();
        let f = model.backbone_forward(&[&img]).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let model = Model::new(cfg(Mode::MultiTask), 2).unwrap();
        let a = GrayImage::from_fn(256, 256, |x, y| ((x * 3 + y) % 17) as f32 / 17.0).unwrap();
        let b = GrayImage::filled(256, 256, 0.3).unwrap();
        let f = model.backbone_forward(&[&a, &b, &a]).unwrap();
        assert_eq!(f.sample(0), f.sample(2));
        let single = model.backbone_forward(&[&a]).unwrap();
        assert_eq!(single.sample(0), f.sample(0));
    }

    #[test]
    fn head_shapes_per_mode() {
        let img = GrayImage::filled(256, 256, 0.5).unwrap();
        for (mode, width) in [(Mode::MultiTask, 6), (Mode::DetectionTwoClass, 7)] {
            let model = Model::new(cfg(mode), 0).unwrap();
            let f = model.backbone_forward(&[&img]).unwrap();
            let raw = model.detection_head_forward(&f).unwrap();
            assert_eq!(raw.shape(), (1, 16, 16, 1, width));
            let fwd = model.forward_batch(&[&img], None).unwrap();
            assert_eq!(fwd.raw, raw);
        }
    }

    #[test]
    fn classifier_probabilities() {
        let model = Model::new(cfg(Mode::MultiTask), 3).unwrap();
        let img = GrayImage::from_fn(256, 256, |x, _| (x % 7) as f32 / 7.0).unwrap();
        let f = model.backbone_forward(&[&img]).unwrap();
        let p = model.classifier_forward(&f, false, 0).unwrap();
        assert!((p[0][0] + p[0][1] - 1.0).abs() < 1e-6);
        assert_eq!(p, model.classifier_forward(&f, false, 99).unwrap());
        let det = Model::new(cfg(Mode::DetectionTwoClass), 3).unwrap();
        let f = det.backbone_forward(&[&img]).unwrap();
        assert!(matches!(det.classifier_forward(&f, false, 0), Err(ModelError::Mode(_))));
    }

    #[test]
    fn decode_hand_example() {
        let mut c = ModelConfig::tiny(Mode::MultiTask);
        c.anchor_priors = vec![(32.0, 32.0)];
        let mut raw = RawPrediction::zeros(1, 16, 1, 1);
        for v in raw.data.chunks_mut(6) {
            v[4] = -1e4;
        }
        raw.anchor_mut(0, 3, 5, 0)[4] = 10.0;
        let dets = decode_image(&raw, 0, &c, 0.5);
        assert_eq!(dets.len(), 1);
        let (cx, cy) = dets[0].bbox.center();
        assert!((cx - 88.0).abs() < 1e-9 && (cy - 56.0).abs() < 1e-9);
        assert!((dets[0].bbox.width() - 32.0).abs() < 1e-9 && (dets[0].bbox.height() - 32.0).abs() < 1e-9);
        assert_eq!(dets[0].label, Label::Recess);

        for v in raw.data.chunks_mut(6) {
            v[4] = -1e4;
        }
        assert!(decode_image(&raw, 0, &c, 1e-9).is_empty());
        assert_eq!(decode_image(&raw, 0, &c, 0.0).len(), 16 * 16);
    }

    #[test]
    fn target_assignment_examples() {
        let mut c = ModelConfig::tiny(Mode::MultiTask);
        c.anchor_priors = vec![(16.0, 16.0), (32.0, 32.0), (64.0, 64.0)];
        let gt = BBox::from_center(88.0, 56.0, 32.0, 32.0).unwrap();
        let t = target_assignment(&gt, None, &c);
        assert_eq!((t.row, t.col, t.anchor), (3, 5, 1));
        let mut raw = RawPrediction::zeros(1, 16, 3, 1);
        raw.data.chunks_mut(6).for_each(|v| v[4] = -1e4);
        let v = raw.anchor_mut(0, t.row, t.col, t.anchor);
        v.copy_from_slice(&[t.tx, t.ty, t.tw, t.th, 10.0, 0.0]);
        let top = select_top(&decode_image(&raw, 0, &c, 0.0)).unwrap();
        for (a, b) in <[f64; 4]>::from(top.bbox).iter().zip(<[f64; 4]>::from(gt).iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn select_top_examples() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let d = |c: f64| LabeledBox {
            bbox: b,
            label: Label::Recess,
            confidence: c,
        };
        assert_eq!(select_top(&[d(0.2), d(0.9), d(0.5)]).unwrap().confidence, 0.9);
        assert_eq!(select_top(&[d(0.4)]).unwrap(), d(0.4));
        assert!(matches!(select_top(&[]), Err(ModelError::NoDetection)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Model::new(cfg(Mode::MultiTask), 5).unwrap();
        let bytes = encode_checkpoint(&model, serde_json::json!({"epoch": 3}));
        let (back, extra) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(extra["epoch"], 3);
        assert_eq!(back.config(), model.config());
        for (a, b) in back.params().iter().zip(model.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(decode_checkpoint(b"NOTACKPT........").is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(Mode::MultiTask);
        c.grid_size = 8;
        assert!(Model::new(c, 0).is_err());
        let mut c = ModelConfig::tiny(Mode::MultiTask);
        c.norm_groups = 3;
        assert!(Model::new(c, 0).is_err());
    }
}
