//! Toy-scale training (momentum SGD), post-processing, AP evaluation and
//! the per-level score calibration report.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_pcg::Pcg64;

use crate::boxes::{decode, iou, match_anchors, nms, AnchorSet, BBox, Detection, Matching, Object};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{total_loss_with_grad, FocalParams, LossBreakdown, LossGrads, LossInput};
use crate::model::Detector;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Levels with fewer true positives are left out of the calibration spread.
pub const MIN_TPS_FOR_SPREAD: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f32,
    /// Gradients are rescaled when their global L2 norm exceeds this.
    pub clip_norm: f32,
    pub match_iou: f32,
    pub focal: FocalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.01,
            batch_size: 8,
            seed: 0,
            momentum: 0.9,
            clip_norm: 10.0,
            match_iou: 0.5,
            focal: FocalParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return Err(Error::Config(format!("match_iou must be in (0, 1], got {}", self.match_iou)));
        }
        self.focal.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: WeightStore,
    /// One entry per step, measured before that step's update.
    pub losses: Vec<LossBreakdown>,
}

/// Concatenates one image's predictions over levels, anchor-major.
fn flatten_image(levels: &[&Tensor], image: usize) -> Vec<f32> {
    let mut out = vec![];
    for t in levels {
        let per = t.len() / t.batch();
        out.extend_from_slice(&t.data()[image * per..(image + 1) * per]);
    }
    out
}

/// Splits per-image flat gradients back into one tensor per level.
fn unflatten(grads: &[Vec<f32>], like: &[&Tensor]) -> Result<Vec<Tensor>> {
    let mut out: Vec<Vec<f32>> = like.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for g in grads {
        let mut offset = 0;
        for (o, t) in out.iter_mut().zip(like) {
            let per = t.len() / t.batch();
            o.extend_from_slice(&g[offset..offset + per]);
            offset += per;
        }
    }
    out.into_iter().zip(like).map(|(d, t)| Tensor::new(t.dims(), d)).collect()
}

/// Loss and parameter gradients for one minibatch.
pub fn loss_and_grads(
    detector: &Detector,
    weights: &WeightStore,
    anchors: &AnchorSet,
    images: &Tensor,
    groundtruth: &[&[Object]],
    matchings: &[&Matching],
    focal: &FocalParams,
) -> Result<(LossBreakdown, WeightStore)> {
    let graph = detector.graph();
    let trace = graph.forward_trace(weights, images)?;
    let levels = detector.levels();
    let class_t = levels
        .iter()
        .map(|l| graph.trace_endpoint(&trace, &l.class_endpoint))
        .collect::<Result<Vec<_>>>()?;
    let box_t = levels
        .iter()
        .map(|l| graph.trace_endpoint(&trace, &l.box_endpoint))
        .collect::<Result<Vec<_>>>()?;
    let n = images.batch();
    let class_flat: Vec<Vec<f32>> = (0..n).map(|i| flatten_image(&class_t, i)).collect();
    let box_flat: Vec<Vec<f32>> = (0..n).map(|i| flatten_image(&box_t, i)).collect();
    let inputs: Vec<LossInput<'_>> = (0..n)
        .map(|i| LossInput {
            class_logits: &class_flat[i],
            box_encodings: &box_flat[i],
            matching: matchings[i],
            anchors: &anchors.boxes,
            groundtruth: groundtruth[i],
        })
        .collect();
    let (loss, LossGrads { class_logits, box_encodings }) =
        total_loss_with_grad(&inputs, detector.config().num_classes, focal)?;
    let mut cots = BTreeMap::new();
    for ((l, c), b) in levels
        .iter()
        .zip(unflatten(&class_logits, &class_t)?)
        .zip(unflatten(&box_encodings, &box_t)?)
    {
        cots.insert(l.class_endpoint.clone(), c);
        cots.insert(l.box_endpoint.clone(), b);
    }
    let grads = graph.backward(weights, &trace, &cots)?;
    Ok((loss, grads.params))
}

/// Trains from the detector's seeded initialization.
pub fn train(detector: &Detector, anchors: &AnchorSet, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(detector, detector.init_weights(cfg.seed), anchors, dataset, cfg)
}

pub fn train_from(
    detector: &Detector,
    mut weights: WeightStore,
    anchors: &AnchorSet,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(TrainOutcome { weights, losses: vec![] });
    }
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if anchors.len() != detector.num_anchors() {
        return Err(Error::Shape(format!(
            "{} anchors for a detector predicting {}",
            anchors.len(),
            detector.num_anchors()
        )));
    }
    let gt_boxes: Vec<Vec<BBox>> = dataset.objects.iter().map(|o| o.iter().map(|o| o.bbox).collect()).collect();
    let matchings: Vec<Matching> = gt_boxes.iter().map(|g| match_anchors(&anchors.boxes, g, cfg.match_iou)).collect();
    // separate stream from the weight init so both stay fixed per seed
    let mut rng = Pcg64::new(cfg.seed as u128, 0xda3e_39cb_94b9_5bdb);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut velocity = weights.zeros_like();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let images = dataset.batch(&batch)?;
        let gt: Vec<&[Object]> = batch.iter().map(|&i| dataset.objects[i].as_slice()).collect();
        let m: Vec<&Matching> = batch.iter().map(|&i| &matchings[i]).collect();
        let (loss, mut grads) = loss_and_grads(detector, &weights, anchors, &images, &gt, &m, &cfg.focal)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss is {}", loss.total),
            });
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("gradient norm is {norm}"),
            });
        }
        if norm > cfg.clip_norm as f64 {
            let s = (cfg.clip_norm as f64 / norm) as f32;
            grads.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        for (((_, w), (_, v)), (_, g)) in weights.iter_mut().zip(velocity.iter_mut()).zip(grads.iter()) {
            for ((w, v), g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.learning_rate * *v;
            }
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { weights, losses })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            nms_iou: 0.6,
            max_detections: 100,
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

/// Sigmoid scores, threshold, decode and per-class NMS for every image in
/// the batch.
pub fn detect(
    detector: &Detector,
    weights: &WeightStore,
    anchors: &AnchorSet,
    images: &Tensor,
    post: &PostprocessConfig,
) -> Result<Vec<Vec<Detection>>> {
    let preds = detector.forward(weights, images)?;
    let k = detector.config().num_classes;
    let class_t: Vec<&Tensor> = preds.iter().map(|p| &p.class_logits).collect();
    let box_t: Vec<&Tensor> = preds.iter().map(|p| &p.box_encodings).collect();
    let mut out = Vec::with_capacity(images.batch());
    for i in 0..images.batch() {
        let logits = flatten_image(&class_t, i);
        let enc = flatten_image(&box_t, i);
        let mut cands = vec![];
        for (a, anchor) in anchors.boxes.iter().enumerate() {
            let mut decoded = None;
            for c in 0..k {
                let score = sigmoid(logits[a * k + c]);
                if score >= post.score_threshold {
                    let t = [enc[a * 4], enc[a * 4 + 1], enc[a * 4 + 2], enc[a * 4 + 3]];
                    let bbox = *decoded.get_or_insert_with(|| decode(&t, anchor));
                    cands.push(Detection {
                        bbox,
                        score,
                        class: c,
                        level: anchors.level_of(a),
                    });
                }
            }
        }
        out.push(nms(&cands, post.nms_iou, post.max_detections));
    }
    Ok(out)
}

/// Runs [`detect`] over a whole dataset in fixed-size batches.
pub fn detect_dataset(
    detector: &Detector,
    weights: &WeightStore,
    anchors: &AnchorSet,
    dataset: &Dataset,
    post: &PostprocessConfig,
    batch_size: usize,
) -> Result<Vec<Vec<Detection>>> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        out.extend(detect(detector, weights, anchors, &dataset.batch(chunk)?, post)?);
    }
    Ok(out)
}

/// Per-detection true-positive flags, computed per class: detections are
/// ranked by score and each claims the unclaimed groundtruth it overlaps
/// most when that IoU reaches `iou_threshold`.
pub fn assign_true_positives(detections: &[Vec<Detection>], groundtruth: &[Vec<Object>], iou_threshold: f32) -> Vec<Vec<bool>> {
    let mut flags: Vec<Vec<bool>> = detections.iter().map(|d| vec![false; d.len()]).collect();
    let mut claimed: Vec<Vec<bool>> = groundtruth.iter().map(|g| vec![false; g.len()]).collect();
    let mut order: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&(ia, ja), &(ib, jb)| detections[ib][jb].score.total_cmp(&detections[ia][ja].score));
    for (i, j) in order {
        let det = &detections[i][j];
        let Some(gts) = groundtruth.get(i) else { continue };
        let best = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class == det.class)
            .map(|(g, o)| (g, iou(&det.bbox, &o.bbox)))
            .fold(None, |acc: Option<(usize, f32)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            if v >= iou_threshold && !claimed[i][g] {
                claimed[i][g] = true;
                flags[i][j] = true;
            }
        }
    }
    flags
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// `None` for classes without groundtruth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that have groundtruth; 0 when none do.
    pub mean: f64,
}

/// Area under the precision-recall curve with all-points interpolation.
pub fn average_precision(ranked_tp: &[bool], num_groundtruth: usize) -> f64 {
    if num_groundtruth == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_groundtruth as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

pub fn evaluate_ap(
    detections: &[Vec<Detection>],
    groundtruth: &[Vec<Object>],
    num_classes: usize,
    iou_threshold: f32,
) -> ApReport {
    let flags = assign_true_positives(detections, groundtruth, iou_threshold);
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let n_gt = groundtruth.iter().flatten().filter(|o| o.class == c).count();
            if n_gt == 0 {
                return None;
            }
            let mut ranked: Vec<(f32, bool)> = detections
                .iter()
                .zip(&flags)
                .flat_map(|(d, f)| d.iter().zip(f))
                .filter(|(d, _)| d.class == c)
                .map(|(d, &f)| (d.score, f))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let tp: Vec<bool> = ranked.into_iter().map(|(_, f)| f).collect();
            Some(average_precision(&tp, n_gt))
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApReport { per_class, mean }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelCalibration {
    pub level: usize,
    pub tp_count: usize,
    /// 0 when the level has no true positives.
    pub mean_score: f64,
    /// Population standard deviation; 0 when the level has no true positives.
    pub std_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub levels: Vec<LevelCalibration>,
    /// Max minus min of the mean TP score over levels with at least
    /// [`MIN_TPS_FOR_SPREAD`] true positives; 0 when fewer than two qualify.
    pub spread: f64,
}

impl CalibrationReport {
    pub fn total_tps(&self) -> usize {
        self.levels.iter().map(|l| l.tp_count).sum()
    }

    pub fn qualifying_levels(&self) -> usize {
        self.levels.iter().filter(|l| l.tp_count >= MIN_TPS_FOR_SPREAD).count()
    }
}

pub fn calibration_report(
    detections: &[Vec<Detection>],
    groundtruth: &[Vec<Object>],
    num_levels: usize,
    iou_threshold: f32,
) -> CalibrationReport {
    let flags = assign_true_positives(detections, groundtruth, iou_threshold);
    let mut scores: Vec<Vec<f64>> = vec![vec![]; num_levels];
    for (d, f) in detections.iter().zip(&flags) {
        for (det, &tp) in d.iter().zip(f) {
            if tp {
                scores[det.level].push(det.score as f64);
            }
        }
    }
    let levels: Vec<LevelCalibration> = scores
        .iter()
        .enumerate()
        .map(|(level, s)| {
            let n = s.len();
            let (mean, std) = if n == 0 {
                (0.0, 0.0)
            } else {
                let mean = s.iter().sum::<f64>() / n as f64;
                let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            };
            LevelCalibration {
                level,
                tp_count: n,
                mean_score: mean,
                std_score: std,
            }
        })
        .collect();
    let means: Vec<f64> = levels
        .iter()
        .filter(|l| l.tp_count >= MIN_TPS_FOR_SPREAD)
        .map(|l| l.mean_score)
        .collect();
    let spread = if means.len() < 2 {
        0.0
    } else {
        means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min)
    };
    CalibrationReport { levels, spread }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ap: ApReport,
    pub calibration: CalibrationReport,
    pub num_images: usize,
    pub num_detections: usize,
}

pub fn evaluate(
    detector: &Detector,
    weights: &WeightStore,
    anchors: &AnchorSet,
    dataset: &Dataset,
    post: &PostprocessConfig,
    iou_threshold: f32,
) -> Result<EvalReport> {
    let dets = detect_dataset(detector, weights, anchors, dataset, post, 16)?;
    Ok(EvalReport {
        ap: evaluate_ap(&dets, &dataset.objects, detector.config().num_classes, iou_threshold),
        calibration: calibration_report(&dets, &dataset.objects, detector.levels().len(), iou_threshold),
        num_images: dataset.len(),
        num_detections: dets.iter().map(Vec::len).sum(),
    })
}
