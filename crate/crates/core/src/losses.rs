//! Sigmoid focal loss, smooth-L1 box loss, and the combined detection
//! objective with analytic gradients.

use crate::boxes::{encode, BBox, MatchLabel, Matching, Object};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal loss needs alpha in [0, 1] and gamma >= 0, got {} and {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

/// `ln(1 + e^v)` without overflow.
fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Loss and d(loss)/d(logit) of one element.
///
/// With `u = +z` for positives and `-z` for negatives, `p_t = sigmoid(u)`,
/// `ln p_t = -softplus(-u)` and `1 - p_t = exp(-softplus(u))`.
fn focal_element(logit: f64, positive: bool, p: &FocalParams) -> (f64, f64) {
    let (sign, alpha_t) = if positive { (1.0, p.alpha) } else { (-1.0, 1.0 - p.alpha) };
    let u = sign * logit;
    let neg_log_pt = softplus(-u);
    let log_one_minus = -softplus(u);
    let pt = (-neg_log_pt).exp();
    let one_minus = log_one_minus.exp();
    let modulator = if p.gamma == 0.0 { 1.0 } else { (p.gamma * log_one_minus).exp() };
    let loss = alpha_t * modulator * neg_log_pt;
    let dloss_du = alpha_t * modulator * (-p.gamma * pt * neg_log_pt - one_minus);
    (loss, sign * dloss_du)
}

fn check_targets(logits: &[f32], targets: &[f32]) -> Result<()> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Target(format!("focal targets must be 0 or 1, got {t}")));
    }
    Ok(())
}

/// `sum -alpha_t (1 - p_t)^gamma ln(p_t)` over all elements.
pub fn focal_loss(logits: &[f32], targets: &[f32], p: &FocalParams) -> Result<f64> {
    check_targets(logits, targets)?;
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| focal_element(z as f64, t == 1.0, p).0)
        .sum())
}

pub fn focal_loss_with_grad(logits: &[f32], targets: &[f32], p: &FocalParams) -> Result<(f64, Vec<f32>)> {
    check_targets(logits, targets)?;
    let mut total = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let (l, g) = focal_element(z as f64, t == 1.0, p);
            total += l;
            g as f32
        })
        .collect();
    Ok((total, grad))
}

fn smooth_l1_element(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Smooth-L1 with transition at 1, summed.
pub fn smooth_l1(pred: &[f32], target: &[f32]) -> Result<f64> {
    Ok(smooth_l1_with_grad(pred, target)?.0)
}

pub fn smooth_l1_with_grad(pred: &[f32], target: &[f32]) -> Result<(f64, Vec<f32>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let (l, g) = smooth_l1_element(p as f64 - t as f64);
            total += l;
            g as f32
        })
        .collect();
    Ok((total, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    pub localization: f64,
    pub total: f64,
    /// Matched anchors the two terms are divided by (before `max(1, _)`).
    pub normalizer: usize,
}

/// Per-image inputs to the detection objective. Predictions are flattened
/// anchor-major: `class_logits[a * K + k]`, `box_encodings[a * 4 + j]`.
#[derive(Clone, Copy, Debug)]
pub struct LossInput<'a> {
    pub class_logits: &'a [f32],
    pub box_encodings: &'a [f32],
    pub matching: &'a Matching,
    pub anchors: &'a [BBox],
    pub groundtruth: &'a [Object],
}

/// Gradients of the objective with respect to each image's predictions.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub class_logits: Vec<Vec<f32>>,
    pub box_encodings: Vec<Vec<f32>>,
}

fn class_targets(input: &LossInput<'_>, num_classes: usize) -> Result<Vec<f32>> {
    let n = input.anchors.len();
    if input.class_logits.len() != n * num_classes || input.box_encodings.len() != n * 4 {
        return Err(Error::Shape(format!(
            "predictions for {} anchors do not match {n} anchors x {num_classes} classes",
            input.box_encodings.len() / 4
        )));
    }
    if input.matching.labels.len() != n {
        return Err(Error::Shape(format!(
            "matching covers {} anchors, expected {n}",
            input.matching.labels.len()
        )));
    }
    let mut targets = vec![0.0f32; n * num_classes];
    for (a, label) in input.matching.labels.iter().enumerate() {
        if let MatchLabel::Matched(g) = *label {
            let obj = input
                .groundtruth
                .get(g)
                .ok_or_else(|| Error::Target(format!("anchor {a} matched to missing groundtruth {g}")))?;
            if obj.class >= num_classes {
                return Err(Error::Target(format!(
                    "groundtruth class {} out of range for {num_classes} classes",
                    obj.class
                )));
            }
            targets[a * num_classes + obj.class] = 1.0;
        }
    }
    Ok(targets)
}

/// Focal loss over every anchor plus smooth-L1 over matched anchors on
/// encoded targets, both divided by `max(1, matched anchors in the batch)`.
pub fn total_loss_with_grad(
    inputs: &[LossInput<'_>],
    num_classes: usize,
    p: &FocalParams,
) -> Result<(LossBreakdown, LossGrads)> {
    p.validate()?;
    let matched: usize = inputs.iter().map(|i| i.matching.num_matched()).sum();
    let norm = matched.max(1) as f64;
    let mut cls_sum = 0.0;
    let mut loc_sum = 0.0;
    let mut grads = LossGrads {
        class_logits: Vec::with_capacity(inputs.len()),
        box_encodings: Vec::with_capacity(inputs.len()),
    };
    for input in inputs {
        let targets = class_targets(input, num_classes)?;
        let (cls, mut gc) = focal_loss_with_grad(input.class_logits, &targets, p)?;
        cls_sum += cls;
        gc.iter_mut().for_each(|g| *g = (*g as f64 / norm) as f32);
        let mut gb = vec![0.0f32; input.box_encodings.len()];
        for (a, label) in input.matching.labels.iter().enumerate() {
            if let MatchLabel::Matched(g) = *label {
                let target = encode(&input.groundtruth[g].bbox, &input.anchors[a]);
                let (l, d) = smooth_l1_with_grad(&input.box_encodings[a * 4..a * 4 + 4], &target)?;
                loc_sum += l;
                for (o, v) in gb[a * 4..a * 4 + 4].iter_mut().zip(d) {
                    *o = (v as f64 / norm) as f32;
                }
            }
        }
        grads.class_logits.push(gc);
        grads.box_encodings.push(gb);
    }
    let classification = cls_sum / norm;
    let localization = loc_sum / norm;
    Ok((
        LossBreakdown {
            classification,
            localization,
            total: classification + localization,
            normalizer: matched,
        },
        grads,
    ))
}

pub fn total_loss(inputs: &[LossInput<'_>], num_classes: usize, p: &FocalParams) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(inputs, num_classes, p)?.0)
}
