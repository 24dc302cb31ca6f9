//! Boxes in normalized `[ymin, xmin, ymax, xmax]` form: SSD anchor
//! generation, IoU, the center-size box coder, anchor matching, and
//! per-class greedy NMS.

use std::ops::Range;

use crate::error::{Error, Result};

/// Scale factors of the box coder for `(ty, tx, th, tw)`.
pub const CODER_SCALES: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
/// Encoded log-size offsets are clamped to this magnitude before `exp`.
pub const MAX_LOG_SCALE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub ymin: f32,
    pub xmin: f32,
    pub ymax: f32,
    pub xmax: f32,
}

impl BBox {
    pub fn new(ymin: f32, xmin: f32, ymax: f32, xmax: f32) -> Self {
        Self { ymin, xmin, ymax, xmax }
    }

    pub fn from_center(cy: f64, cx: f64, h: f64, w: f64) -> Self {
        Self {
            ymin: (cy - h / 2.0) as f32,
            xmin: (cx - w / 2.0) as f32,
            ymax: (cy + h / 2.0) as f32,
            xmax: (cx + w / 2.0) as f32,
        }
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.ymin, self.xmin, self.ymax, self.xmax]
    }

    pub fn height(&self) -> f32 {
        self.ymax - self.ymin
    }

    pub fn width(&self) -> f32 {
        self.xmax - self.xmin
    }

    pub fn area(&self) -> f64 {
        (self.height().max(0.0) as f64) * (self.width().max(0.0) as f64)
    }

    /// `(cy, cx, h, w)`.
    pub fn center_size(&self) -> [f64; 4] {
        let (ymin, xmin, ymax, xmax) = (self.ymin as f64, self.xmin as f64, self.ymax as f64, self.xmax as f64);
        [(ymin + ymax) / 2.0, (xmin + xmax) / 2.0, ymax - ymin, xmax - xmin]
    }

    pub fn clipped(&self) -> Self {
        Self {
            ymin: self.ymin.clamp(0.0, 1.0),
            xmin: self.xmin.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
        }
    }

    /// Ordered corners inside the unit square.
    pub fn is_valid(&self) -> bool {
        let inside = |v: f32| (0.0..=1.0).contains(&v);
        self.ymin <= self.ymax
            && self.xmin <= self.xmax
            && inside(self.ymin)
            && inside(self.xmin)
            && inside(self.ymax)
            && inside(self.xmax)
    }
}

/// A labeled groundtruth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub bbox: BBox,
    pub class: usize,
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0) as f64;
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0) as f64;
    let inter = ih * iw;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union) as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub min_scale: f64,
    pub max_scale: f64,
    pub aspect_ratios: Vec<f64>,
    pub interpolated_scale_anchor: bool,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            min_scale: 0.2,
            max_scale: 0.95,
            aspect_ratios: vec![1.0, 2.0, 3.0, 0.5, 1.0 / 3.0],
            interpolated_scale_anchor: true,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return Err(Error::Config(format!(
                "anchor scales need 0 < min <= max <= 1, got {} and {}",
                self.min_scale, self.max_scale
            )));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(Error::Config("aspect ratios must be a non-empty list of positive numbers".into()));
        }
        Ok(())
    }

    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len() + usize::from(self.interpolated_scale_anchor)
    }

    /// `s_k = min + (max - min) * k / (L - 1)` for `k = 0..L`.
    pub fn scales(&self, num_levels: usize) -> Vec<f64> {
        if num_levels == 1 {
            return vec![self.min_scale];
        }
        (0..num_levels)
            .map(|k| self.min_scale + (self.max_scale - self.min_scale) * k as f64 / (num_levels - 1) as f64)
            .collect()
    }
}

/// Anchors of every level, concatenated level-major, then row, column, and
/// anchor index within a cell; the same order as the predictor channels.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub level_ranges: Vec<Range<usize>>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn level_of(&self, anchor: usize) -> usize {
        self.level_ranges
            .iter()
            .position(|r| r.contains(&anchor))
            .expect("anchor index in range")
    }
}

pub fn generate_anchors(cfg: &AnchorConfig, level_shapes: &[(usize, usize)], num_levels: usize) -> Result<AnchorSet> {
    cfg.validate()?;
    if level_shapes.is_empty() {
        return Err(Error::Config("anchor generation needs at least one level".into()));
    }
    if level_shapes.len() != num_levels {
        return Err(Error::Config(format!(
            "{} level shapes for {num_levels} levels",
            level_shapes.len()
        )));
    }
    let mut scales = cfg.scales(num_levels);
    scales.push(1.0);
    let mut boxes = vec![];
    let mut level_ranges = vec![];
    for (k, &(h, w)) in level_shapes.iter().enumerate() {
        let (s, next) = (scales[k], scales[k + 1]);
        let mut shapes: Vec<(f64, f64)> = cfg
            .aspect_ratios
            .iter()
            .map(|&a| (s / a.sqrt(), s * a.sqrt()))
            .collect();
        if cfg.interpolated_scale_anchor {
            let si = (s * next).sqrt();
            shapes.push((si, si));
        }
        let start = boxes.len();
        for i in 0..h {
            for j in 0..w {
                let cy = (i as f64 + 0.5) / h as f64;
                let cx = (j as f64 + 0.5) / w as f64;
                for &(ah, aw) in &shapes {
                    boxes.push(BBox::from_center(cy, cx, ah, aw).clipped());
                }
            }
        }
        level_ranges.push(start..boxes.len());
    }
    Ok(AnchorSet { boxes, level_ranges })
}

/// Encodes `bbox` relative to `anchor` as `(ty, tx, th, tw)`.
pub fn encode(bbox: &BBox, anchor: &BBox) -> [f32; 4] {
    let [cy, cx, h, w] = bbox.center_size();
    let [acy, acx, ah, aw] = anchor.center_size();
    [
        ((cy - acy) / ah * CODER_SCALES[0]) as f32,
        ((cx - acx) / aw * CODER_SCALES[1]) as f32,
        ((h / ah).ln() * CODER_SCALES[2]) as f32,
        ((w / aw).ln() * CODER_SCALES[3]) as f32,
    ]
}

/// Inverse of [`encode`], clipped to the unit square.
pub fn decode(t: &[f32; 4], anchor: &BBox) -> BBox {
    decode_unclipped(t, anchor).clipped()
}

pub fn decode_unclipped(t: &[f32; 4], anchor: &BBox) -> BBox {
    let [acy, acx, ah, aw] = anchor.center_size();
    let cy = t[0] as f64 / CODER_SCALES[0] * ah + acy;
    let cx = t[1] as f64 / CODER_SCALES[1] * aw + acx;
    let th = (t[2] as f64).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let tw = (t[3] as f64).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let h = (th / CODER_SCALES[2]).exp() * ah;
    let w = (tw / CODER_SCALES[3]).exp() * aw;
    BBox::from_center(cy, cx, h, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    Matched(usize),
    Negative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub labels: Vec<MatchLabel>,
    pub iou_threshold: f32,
}

impl Matching {
    pub fn num_matched(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, MatchLabel::Matched(_))).count()
    }
}

/// Assigns every anchor its best groundtruth when the IoU reaches
/// `threshold`. Each groundtruth then claims its best still-unclaimed anchor
/// with positive IoU, which overrides the threshold assignment; lower
/// groundtruth indices claim first.
pub fn match_anchors(anchors: &[BBox], groundtruth: &[BBox], threshold: f32) -> Matching {
    let mut labels = vec![MatchLabel::Negative; anchors.len()];
    if groundtruth.is_empty() {
        return Matching { labels, iou_threshold: threshold };
    }
    let ious: Vec<Vec<f32>> = anchors
        .iter()
        .map(|a| groundtruth.iter().map(|g| iou(a, g)).collect())
        .collect();
    for (label, row) in labels.iter_mut().zip(&ious) {
        let (best, best_iou) = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        if best_iou >= threshold {
            *label = MatchLabel::Matched(best);
        }
    }
    let mut claimed = vec![false; anchors.len()];
    for j in 0..groundtruth.len() {
        let mut best: Option<(usize, f32)> = None;
        for (i, row) in ious.iter().enumerate() {
            if claimed[i] || row[j] <= 0.0 {
                continue;
            }
            if best.is_none_or(|(_, b)| row[j] > b) {
                best = Some((i, row[j]));
            }
        }
        if let Some((i, _)) = best {
            claimed[i] = true;
            labels[i] = MatchLabel::Matched(j);
        }
    }
    Matching { labels, iou_threshold: threshold }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
    pub class: usize,
    /// Prediction level (pyramid index) that produced the detection.
    pub level: usize,
}

/// Descending score, then ascending original index.
fn rank_order(dets: &[Detection], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
}

/// Greedy NMS run independently per class; the survivors of all classes are
/// merged by score and truncated to `max_out`.
pub fn nms(dets: &[Detection], iou_threshold: f32, max_out: usize) -> Vec<Detection> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept: Vec<usize> = vec![];
    for class in classes {
        let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
        rank_order(dets, &mut idx);
        let mut selected: Vec<usize> = vec![];
        for i in idx {
            if selected.iter().all(|&s| iou(&dets[s].bbox, &dets[i].bbox) <= iou_threshold) {
                selected.push(i);
            }
        }
        kept.extend(selected);
    }
    rank_order(dets, &mut kept);
    kept.truncate(max_out);
    kept.into_iter().map(|i| dets[i]).collect()
}
