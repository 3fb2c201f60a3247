//! Classification and detection metrics, COCO-style mAP and the composite
//! fitness functions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ClassLabel;
use crate::imaging::{iou, BBox, Label, LabeledBox};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({preds}) and ground truths ({gts}) differ in length")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("{0} is undefined: the class is absent")]
    UndefinedMetric(&'static str),
    #[error("no images to evaluate")]
    EmptySet,
}

/// Counts with Distended as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn confusion(preds: &[ClassLabel], gts: &[ClassLabel]) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (p, g) in preds.iter().zip(gts) {
        match (p.is_positive(), g.is_positive()) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// `(sensitivity, specificity, balanced_accuracy)`.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<(f64, f64, f64), MetricsError> {
    if cm.tp + cm.fn_ == 0 {
        return Err(MetricsError::UndefinedMetric("sensitivity"));
    }
    if cm.tn + cm.fp == 0 {
        return Err(MetricsError::UndefinedMetric("specificity"));
    }
    let sens = cm.tp as f64 / (cm.tp + cm.fn_) as f64;
    let spec = cm.tn as f64 / (cm.tn + cm.fp) as f64;
    Ok((sens, spec, (sens + spec) / 2.0))
}

/// `(mean IoU, fraction with IoU >= 0.5)`; a missing prediction counts as IoU 0.
pub fn detection_metrics(pairs: &[(Option<BBox>, BBox)]) -> Result<(f64, f64), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let ious: Vec<f64> = pairs.iter().map(|(p, g)| p.map_or(0.0, |p| iou(&p, g))).collect();
    Ok(mean_and_hit_rate(&ious))
}

fn mean_and_hit_rate(ious: &[f64]) -> (f64, f64) {
    let n = ious.len() as f64;
    let mean = ious.iter().sum::<f64>() / n;
    let hits = ious.iter().filter(|&&v| v >= 0.5).count() as f64;
    (mean, hits / n)
}

/// Number of recall sample points of the interpolated AP.
pub const AP_RECALL_POINTS: usize = 101;

/// Area under the interpolated precision-recall curve, sampled at recall
/// `0, 0.01, ..., 1`. `points` are `(recall, precision)` pairs.
pub fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut sum = 0.0;
    for i in 0..AP_RECALL_POINTS {
        let r = i as f64 / (AP_RECALL_POINTS - 1) as f64;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|&(_, prec)| prec)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / AP_RECALL_POINTS as f64
}

// AP of one class; detections must already be filtered to that class
fn class_ap(dets: &[(&str, &LabeledBox)], gts: &BTreeMap<String, (BBox, Label)>, class: Label, thr: f64) -> f64 {
    let n_gt = gts.values().filter(|(_, l)| *l == class).count();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.confidence.total_cmp(&dets[a].1.confidence));
    let mut matched: BTreeMap<&str, bool> = BTreeMap::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let (id, det) = dets[i];
        let hit = match gts.get(id) {
            Some((g, l)) if *l == class && !matched.contains_key(id) && iou(&det.bbox, g) >= thr => {
                matched.insert(id, true);
                true
            }
            _ => false,
        };
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        // equal confidences form one operating point
        let last_of_group = order
            .get(k + 1)
            .map_or(true, |&j| dets[j].1.confidence != det.confidence);
        if last_of_group {
            points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    interpolated_ap(&points)
}

/// Mean over ground-truth classes of the per-class AP at `iou_threshold`.
pub fn average_precision(
    detections: &[(String, LabeledBox)],
    gts: &BTreeMap<String, (BBox, Label)>,
    iou_threshold: f64,
) -> f64 {
    let mut classes: Vec<Label> = gts.values().map(|(_, l)| *l).collect();
    classes.sort_by_key(|l| *l as u8);
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let dets: Vec<(&str, &LabeledBox)> = detections
                .iter()
                .filter(|(_, d)| d.label == c)
                .map(|(id, d)| (id.as_str(), d))
                .collect();
            class_ap(&dets, gts, c, iou_threshold)
        })
        .sum();
    total / classes.len() as f64
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// `(mAP@0.5, mAP@0.5:0.95)`.
pub fn map_range(detections: &[(String, LabeledBox)], gts: &BTreeMap<String, (BBox, Label)>) -> (f64, f64) {
    let maps: Vec<f64> = coco_thresholds()
        .iter()
        .map(|&t| average_precision(detections, gts, t))
        .collect();
    (maps[0], maps.iter().sum::<f64>() / maps.len() as f64)
}

pub fn detection_fitness(map50: f64, map5095: f64) -> f64 {
    0.1 * map50 + 0.9 * map5095
}

pub fn multitask_fitness(balanced_accuracy: f64, map50: f64) -> f64 {
    0.7 * balanced_accuracy + 0.3 * map50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub label: ClassLabel,
    pub ground_truth: ClassLabel,
    pub confidence: f64,
    pub bbox: Option<BBox>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub mean_iou: f64,
    pub frac_iou_ge_05: f64,
    pub map50: f64,
    pub map5095: f64,
    pub confusion: ConfusionMatrix,
    pub per_image: Vec<ImageResult>,
}

/// One evaluated image: the predicted label, the selected detection (if
/// any) and the ground truth.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub image_id: String,
    pub predicted: ClassLabel,
    pub confidence: f64,
    pub detection: Option<LabeledBox>,
    pub gt_box: BBox,
    pub gt_label: ClassLabel,
}

impl EvalReport {
    /// Builds a report; `detection_labels` selects whether mAP matches the
    /// two clinical classes (detection mode) or the single recess class.
    ///
    /// When one class is absent, the undefined rate is replaced by the
    /// defined one so the balanced accuracy stays meaningful.
    pub fn from_items(items: &[EvalItem], detection_labels: bool) -> Result<Self, MetricsError> {
        if items.is_empty() {
            return Err(MetricsError::EmptySet);
        }
        let preds: Vec<ClassLabel> = items.iter().map(|i| i.predicted).collect();
        let gts: Vec<ClassLabel> = items.iter().map(|i| i.gt_label).collect();
        let cm = confusion(&preds, &gts)?;
        let (sensitivity, specificity, balanced_accuracy) = match classification_metrics(&cm) {
            Ok(v) => v,
            Err(_) => {
                let acc = (cm.tp + cm.tn) as f64 / items.len() as f64;
                (acc, acc, acc)
            }
        };
        let pairs: Vec<(Option<BBox>, BBox)> = items.iter().map(|i| (i.detection.map(|d| d.bbox), i.gt_box)).collect();
        let (mean_iou, frac_iou_ge_05) = detection_metrics(&pairs)?;
        let gt_label = |l: ClassLabel| if detection_labels { l.into() } else { Label::Recess };
        let gt_map: BTreeMap<String, (BBox, Label)> = items
            .iter()
            .map(|i| (i.image_id.clone(), (i.gt_box, gt_label(i.gt_label))))
            .collect();
        let dets: Vec<(String, LabeledBox)> = items
            .iter()
            .filter_map(|i| i.detection.map(|d| (i.image_id.clone(), d)))
            .collect();
        let (map50, map5095) = map_range(&dets, &gt_map);
        let per_image = items
            .iter()
            .map(|i| ImageResult {
                image_id: i.image_id.clone(),
                label: i.predicted,
                ground_truth: i.gt_label,
                confidence: i.confidence,
                bbox: i.detection.map(|d| d.bbox),
                iou: i.detection.map_or(0.0, |d| iou(&d.bbox, &i.gt_box)),
            })
            .collect();
        Ok(Self {
            balanced_accuracy,
            sensitivity,
            specificity,
            mean_iou,
            frac_iou_ge_05,
            map50,
            map5095,
            confusion: cm,
            per_image,
        })
    }
}
