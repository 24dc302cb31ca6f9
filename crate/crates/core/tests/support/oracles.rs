//! Brute-force references for NMS and anchor matching, and the randomized
//! comparisons run against the library implementations.

use ppn_core::boxes::{self, iou, BBox, Detection, MatchLabel};
use ppn_core::losses::{self, FocalParams};
use rand::Rng;
use rand_pcg::Pcg64;

/// Classic NMS: repeatedly take the best remaining detection of a class and
/// drop every remaining one overlapping it by more than the threshold.
pub fn nms_reference(dets: &[Detection], iou_threshold: f32, max_out: usize) -> Vec<Detection> {
    let mut kept = vec![];
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if dets[i].score > dets[best].score || (dets[i].score == dets[best].score && i < best) {
                best = i;
            }
        }
        kept.push(best);
        remaining.retain(|&i| {
            i != best && !(dets[i].class == dets[best].class && iou(&dets[i].bbox, &dets[best].bbox) > iou_threshold)
        });
    }
    kept.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    kept.truncate(max_out);
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Matching from the full IoU table: threshold argmax per anchor, then each
/// groundtruth in turn force-claims its best unclaimed anchor.
pub fn match_reference(anchors: &[BBox], gt: &[BBox], threshold: f32) -> Vec<MatchLabel> {
    let table: Vec<Vec<f32>> = anchors.iter().map(|a| gt.iter().map(|g| iou(a, g)).collect()).collect();
    let mut labels: Vec<MatchLabel> = table
        .iter()
        .map(|row| {
            let mut best: Option<usize> = None;
            for j in 0..row.len() {
                if best.is_none_or(|b| row[j] > row[b]) {
                    best = Some(j);
                }
            }
            match best {
                Some(j) if row[j] >= threshold => MatchLabel::Matched(j),
                _ => MatchLabel::Negative,
            }
        })
        .collect();
    let mut claimed = vec![false; anchors.len()];
    for j in 0..gt.len() {
        let mut cands: Vec<usize> = (0..anchors.len()).filter(|&i| !claimed[i] && table[i][j] > 0.0).collect();
        cands.sort_by(|&a, &b| table[b][j].total_cmp(&table[a][j]).then(a.cmp(&b)));
        if let Some(&i) = cands.first() {
            claimed[i] = true;
            labels[i] = MatchLabel::Matched(j);
        }
    }
    labels
}

/// Boxes on a coarse grid so exact IoU and score ties actually occur.
pub fn grid_box(rng: &mut Pcg64) -> BBox {
    let q = |v: u32| v as f32 / 10.0;
    let (y, x) = (rng.random_range(0..9), rng.random_range(0..9));
    let (h, w) = (rng.random_range(1..=10 - y), rng.random_range(1..=10 - x));
    BBox::new(q(y), q(x), q(y + h), q(x + w))
}

pub fn random_box(rng: &mut Pcg64) -> BBox {
    sized_box(rng, 0.01)
}

fn sized_box(rng: &mut Pcg64, min_side: f32) -> BBox {
    let (y, x) = (rng.random_range(0.0..1.0 - min_side), rng.random_range(0.0..1.0 - min_side));
    let (h, w) = (rng.random_range(min_side..=1.0 - y), rng.random_range(min_side..=1.0 - x));
    BBox::new(y, x, y + h, x + w)
}

fn any_box(rng: &mut Pcg64) -> BBox {
    if rng.random_bool(0.5) {
        grid_box(rng)
    } else {
        random_box(rng)
    }
}

/// Instances where the library NMS disagrees with the reference.
pub fn nms_mismatches(instances: usize, seed: u64) -> usize {
    let mut rng = Pcg64::new(seed as u128, 11);
    (0..instances)
        .filter(|_| {
            let n = rng.random_range(0..=50);
            let dets: Vec<Detection> = (0..n)
                .map(|_| Detection {
                    bbox: any_box(&mut rng),
                    score: rng.random_range(1..=10) as f32 / 10.0,
                    class: rng.random_range(0..3),
                    level: rng.random_range(0..6),
                })
                .collect();
            let thr = [0.3, 0.5, 0.6, 0.7][rng.random_range(0..4)];
            let max_out = rng.random_range(1..=60);
            boxes::nms(&dets, thr, max_out) != nms_reference(&dets, thr, max_out)
        })
        .count()
}

/// Instances where the library matcher disagrees with the reference.
pub fn matching_mismatches(instances: usize, seed: u64) -> usize {
    let mut rng = Pcg64::new(seed as u128, 13);
    (0..instances)
        .filter(|_| {
            let anchors: Vec<BBox> = (0..rng.random_range(1..=50)).map(|_| any_box(&mut rng)).collect();
            let gt: Vec<BBox> = (0..rng.random_range(0..=10)).map(|_| any_box(&mut rng)).collect();
            let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
            boxes::match_anchors(&anchors, &gt, thr).labels != match_reference(&anchors, &gt, thr)
        })
        .count()
}

/// Worst coordinate error of `decode(encode(b, a), a)` and of
/// `encode(decode(t, a), a)` over random non-degenerate pairs. Sides of at
/// least 0.05 keep size ratios within 20, inside the decoder's log clamp.
pub fn coder_round_trip_error(instances: usize, seed: u64) -> f64 {
    let mut rng = Pcg64::new(seed as u128, 17);
    let mut worst = 0f64;
    for _ in 0..instances {
        let (b, a) = (sized_box(&mut rng, 0.05), sized_box(&mut rng, 0.05));
        let back = boxes::decode_unclipped(&boxes::encode(&b, &a), &a);
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            worst = worst.max((x - y).abs() as f64);
        }
        let t: [f32; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let again = boxes::encode(&boxes::decode_unclipped(&t, &a), &a);
        for (x, y) in again.iter().zip(t) {
            worst = worst.max((x - y).abs() as f64);
        }
    }
    worst
}

/// Worst difference between focal loss at gamma 0 and alpha-weighted sigmoid
/// cross-entropy written out naively.
pub fn focal_gamma0_error(instances: usize, seed: u64) -> f64 {
    let mut rng = Pcg64::new(seed as u128, 19);
    let mut worst = 0f64;
    for _ in 0..instances {
        let alpha = rng.random_range(0.0..1.0);
        let z: f32 = rng.random_range(-10.0..10.0);
        let t = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let p = 1.0 / (1.0 + (-(z as f64)).exp());
        let ce = -(alpha * t * p.ln() + (1.0 - alpha) * (1.0 - t) * (1.0 - p).ln());
        let fl = losses::focal_loss(&[z], &[t as f32], &FocalParams { alpha, gamma: 0.0 }).unwrap();
        worst = worst.max((fl - ce).abs());
    }
    worst
}
