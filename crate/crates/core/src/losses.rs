//! Training losses: CIoU box regression, BCE objectness / class terms and the
//! imbalance-weighted image classification term, with analytic gradients.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::imaging::{iou, BBox};
use crate::model::{AnchorTarget, ModelConfig, RawPrediction, MAX_LOG_SCALE};
use crate::nn::{sigmoid, softmax};

/// Probability clamp used by every BCE term.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_c: f64,
    pub l_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(l_box: f64, l_obj: f64, l_c: f64, l_cls: f64, w: &LossWeights) -> Self {
        Self {
            l_box,
            l_obj,
            l_c,
            l_cls,
            total: w.alpha * l_box + w.beta * l_obj + w.gamma * l_c + w.delta * l_cls,
        }
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = items.iter().fold(Self::default(), |a, b| Self {
            l_box: a.l_box + b.l_box,
            l_obj: a.l_obj + b.l_obj,
            l_c: a.l_c + b.l_c,
            l_cls: a.l_cls + b.l_cls,
            total: a.total + b.total,
        });
        m.l_box /= n;
        m.l_obj /= n;
        m.l_c /= n;
        m.l_cls /= n;
        m.total /= n;
        m
    }

    pub fn is_finite(&self) -> bool {
        [self.l_box, self.l_obj, self.l_c, self.l_cls, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

// forward-mode dual number over the four box parameters (cx, cy, w, h)
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn scale(self, k: f64) -> Self {
        Self {
            v: self.v * k,
            d: self.d.map(|x| x * k),
        }
    }

    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }

    fn atan(self) -> Self {
        let k = 1.0 / (1.0 + self.v * self.v);
        Self {
            v: self.v.atan(),
            d: self.d.map(|x| x * k),
        }
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Dual { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        self + o.scale(-1.0)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; 4];
        for (i, di) in d.iter_mut().enumerate() {
            *di = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let mut d = [0.0; 4];
        for (i, di) in d.iter_mut().enumerate() {
            *di = (self.d[i] * o.v - self.v * o.d[i]) / (o.v * o.v);
        }
        Dual { v: self.v / o.v, d }
    }
}

fn ciou_dual(cx: Dual, cy: Dual, w: Dual, h: Dual, gt: &BBox) -> Dual {
    let half = |x: Dual| x.scale(0.5);
    let (x1, x2) = (cx - half(w), cx + half(w));
    let (y1, y2) = (cy - half(h), cy + half(h));
    let c = Dual::constant;
    let (gx1, gy1, gx2, gy2) = (c(gt.x_min), c(gt.y_min), c(gt.x_max), c(gt.y_max));
    let zero = c(0.0);
    let iw = (x2.min(gx2) - x1.max(gx1)).max(zero);
    let ih = (y2.min(gy2) - y1.max(gy1)).max(zero);
    let inter = iw * ih;
    let union = w * h + c(gt.area()) - inter;
    let iou = inter / union;
    let (gcx, gcy) = gt.center();
    let rho2 = (cx - c(gcx)).square() + (cy - c(gcy)).square();
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let c2 = cw.square() + ch.square();
    let v = (c((gt.width() / gt.height()).atan()) - (w / h).atan()).square().scale(4.0 / (PI * PI));
    let denom = c(1.0) - iou + v;
    let av = if denom.v > 0.0 { v / denom * v } else { zero };
    c(1.0) - iou + rho2 / c2 + av
}

/// Complete-IoU loss: `1 - IoU + rho^2 / c^2 + a v`.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    // corner form, so identical boxes give exactly zero
    let iou = iou(pred, gt);
    let ((pcx, pcy), (gcx, gcy)) = (pred.center(), gt.center());
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let cw = pred.x_max.max(gt.x_max) - pred.x_min.min(gt.x_min);
    let ch = pred.y_max.max(gt.y_max) - pred.y_min.min(gt.y_min);
    let c2 = cw * cw + ch * ch;
    let v = 4.0 / (PI * PI) * ((gt.width() / gt.height()).atan() - (pred.width() / pred.height()).atan()).powi(2);
    let denom = 1.0 - iou + v;
    let av = if denom > 0.0 { v * v / denom } else { 0.0 };
    (1.0 - iou + rho2 / c2 + av).max(0.0)
}

/// CIoU loss of a `(cx, cy, w, h)` prediction and its gradient with respect
/// to those four values.
pub fn ciou_loss_grad(pred: (f64, f64, f64, f64), gt: &BBox) -> (f64, [f64; 4]) {
    let (cx, cy, w, h) = pred;
    let r = ciou_dual(Dual::var(cx, 0), Dual::var(cy, 1), Dual::var(w, 2), Dual::var(h, 3), gt);
    (r.v.max(0.0), r.d)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

pub fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

// d bce / dp, zero where the clamp is active
fn bce_dp(p: f64, y: f64) -> f64 {
    if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
        0.0
    } else {
        (p - y) / (p * (1.0 - p))
    }
}

/// BCE of `sigmoid(z)` and its derivative with respect to `z`.
pub fn bce_with_logit(z: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let g = if p <= BCE_EPS || p >= 1.0 - BCE_EPS { 0.0 } else { p - y };
    (bce(p, y), g)
}

/// BCE on the Distended probability, multiplied by `w_pos` for Distended images.
pub fn weighted_cls_loss(p_distended: f64, label: ClassLabel, w_pos: f64) -> f64 {
    let y = if label.is_positive() { 1.0 } else { 0.0 };
    let weight = if label.is_positive() { w_pos } else { 1.0 };
    weight * bce(p_distended, y)
}

struct ImageTerms {
    l_box: f64,
    l_obj: f64,
    l_c: f64,
}

// box, objectness and class terms of one image, accumulating `scale`-weighted
// gradients into `grad` when given
fn image_terms(
    values: &[f64],
    target: &AnchorTarget,
    config: &ModelConfig,
    classes: usize,
    anchors: usize,
    w: &LossWeights,
    with_class_term: bool,
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> ImageTerms {
    let width = 5 + classes;
    let n = values.len() / width;
    let pos = (target.row * config.grid_size + target.col) * anchors + target.anchor;

    let mut l_obj = 0.0;
    for i in 0..n {
        let y = if i == pos { 1.0 } else { 0.0 };
        let (l, g) = bce_with_logit(values[i * width + 4], y);
        l_obj += l;
        if let Some(gr) = grad.as_deref_mut() {
            gr[i * width + 4] += scale * w.beta * g / n as f64;
        }
    }
    l_obj /= n as f64;

    let v = &values[pos * width..(pos + 1) * width];
    let stride = config.stride();
    let (pw, ph) = config.anchor_priors[target.anchor];
    let sx = sigmoid(v[0]);
    let sy = sigmoid(v[1]);
    let cx = (target.col as f64 + sx) * stride;
    let cy = (target.row as f64 + sy) * stride;
    let bw = pw * v[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let bh = ph * v[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let (l_box, dbox) = ciou_loss_grad((cx, cy, bw, bh), &target.gt);

    let mut l_c = 0.0;
    let mut dclass = vec![0.0; classes];
    if with_class_term {
        let p = softmax(&v[5..]);
        let mut dp = vec![0.0; classes];
        for k in 0..classes {
            let y = if k == target.class_index { 1.0 } else { 0.0 };
            l_c += bce(p[k], y);
            dp[k] = bce_dp(p[k], y) / classes as f64;
        }
        l_c /= classes as f64;
        for j in 0..classes {
            dclass[j] = (0..classes)
                .map(|k| dp[k] * p[k] * (if k == j { 1.0 } else { 0.0 } - p[j]))
                .sum();
        }
    }

    if let Some(gr) = grad {
        let g = &mut gr[pos * width..(pos + 1) * width];
        let in_range = |t: f64| (-MAX_LOG_SCALE..=MAX_LOG_SCALE).contains(&t);
        g[0] += scale * w.alpha * dbox[0] * stride * sx * (1.0 - sx);
        g[1] += scale * w.alpha * dbox[1] * stride * sy * (1.0 - sy);
        if in_range(v[2]) {
            g[2] += scale * w.alpha * dbox[2] * bw;
        }
        if in_range(v[3]) {
            g[3] += scale * w.alpha * dbox[3] * bh;
        }
        for (gk, dk) in g[5..].iter_mut().zip(&dclass) {
            *gk += scale * w.gamma * dk;
        }
    }
    ImageTerms { l_box, l_obj, l_c }
}

fn check_batch(raw: &RawPrediction, targets: &[AnchorTarget]) {
    assert_eq!(raw.batch, targets.len(), "one target per image required");
}

/// Detection-mode loss averaged over the batch.
pub fn detection_loss(raw: &RawPrediction, targets: &[AnchorTarget], config: &ModelConfig, w: &LossWeights) -> LossBreakdown {
    detection_loss_grad(raw, targets, config, w, false).0
}

/// Detection-mode loss and, if requested, its gradient with respect to `raw`.
pub fn detection_loss_grad(
    raw: &RawPrediction,
    targets: &[AnchorTarget],
    config: &ModelConfig,
    w: &LossWeights,
    want_grad: bool,
) -> (LossBreakdown, Option<RawPrediction>) {
    check_batch(raw, targets);
    let w = LossWeights { delta: 0.0, ..*w };
    let mut grad = want_grad.then(|| RawPrediction { data: vec![0.0; raw.data.len()], ..*raw });
    let scale = 1.0 / raw.batch.max(1) as f64;
    let per = raw.per_image();
    let items: Vec<LossBreakdown> = targets
        .iter()
        .enumerate()
        .map(|(b, t)| {
            let g = grad.as_mut().map(|g| &mut g.data[b * per..(b + 1) * per]);
            let terms = image_terms(raw.image(b), t, config, raw.classes, raw.anchors, &w, raw.classes > 1, scale, g);
            LossBreakdown::weighted(terms.l_box, terms.l_obj, terms.l_c, 0.0, &w)
        })
        .collect();
    (LossBreakdown::mean(&items), grad)
}

/// Multi-task loss averaged over the batch; `p_distended` holds the
/// classifier's Distended probability per image.
pub fn multitask_loss(
    raw: &RawPrediction,
    p_distended: &[f64],
    targets: &[AnchorTarget],
    labels: &[ClassLabel],
    config: &ModelConfig,
    w: &LossWeights,
    w_pos: f64,
) -> LossBreakdown {
    check_batch(raw, targets);
    let w = LossWeights { gamma: 0.0, ..*w };
    let items: Vec<LossBreakdown> = (0..raw.batch)
        .map(|b| {
            let t = image_terms(raw.image(b), &targets[b], config, raw.classes, raw.anchors, &w, false, 0.0, None);
            let l_cls = weighted_cls_loss(p_distended[b], labels[b], w_pos);
            LossBreakdown::weighted(t.l_box, t.l_obj, 0.0, l_cls, &w)
        })
        .collect();
    LossBreakdown::mean(&items)
}

/// Multi-task loss from classifier logits `(NonDistended, Distended)`, with
/// gradients for the raw head output and the logits.
pub fn multitask_loss_grad(
    raw: &RawPrediction,
    cls_logits: &[[f64; 2]],
    targets: &[AnchorTarget],
    labels: &[ClassLabel],
    config: &ModelConfig,
    w: &LossWeights,
    w_pos: f64,
) -> (LossBreakdown, RawPrediction, Vec<[f64; 2]>) {
    check_batch(raw, targets);
    let w = LossWeights { gamma: 0.0, ..*w };
    let mut grad = RawPrediction { data: vec![0.0; raw.data.len()], ..*raw };
    let scale = 1.0 / raw.batch.max(1) as f64;
    let per = raw.per_image();
    let mut d_logits = Vec::with_capacity(raw.batch);
    let mut items = Vec::with_capacity(raw.batch);
    for b in 0..raw.batch {
        let g = &mut grad.data[b * per..(b + 1) * per];
        let t = image_terms(raw.image(b), &targets[b], config, raw.classes, raw.anchors, &w, false, scale, Some(g));
        let p = softmax(&cls_logits[b])[1];
        let label = labels[b];
        let l_cls = weighted_cls_loss(p, label, w_pos);
        let y = if label.is_positive() { 1.0 } else { 0.0 };
        let weight = if label.is_positive() { w_pos } else { 1.0 };
        let dz1 = scale * w.delta * weight * bce_dp(p, y) * p * (1.0 - p);
        d_logits.push([-dz1, dz1]);
        items.push(LossBreakdown::weighted(t.l_box, t.l_obj, 0.0, l_cls, &w));
    }
    (LossBreakdown::mean(&items), grad, d_logits)
}
