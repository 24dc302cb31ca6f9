//! Central finite differences against the analytic vector-Jacobian
//! products. Each check draws a random instance, contracts the output with a
//! random cotangent, and compares numeric and analytic gradients of that
//! scalar by norm-wise relative error.

use ppn_core::boxes::{match_anchors, BBox, Object};
use ppn_core::losses::{self, FocalParams, LossInput};
use ppn_core::tensor::{self, ConvGeometry, Padding, PoolParams, Tensor};
use rand::Rng;
use rand_pcg::Pcg64;

pub const TOLERANCE: f64 = 1e-3;

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Numeric gradient of `f` with respect to every element of every argument.
/// The step is measured on the rounded f32 values so it matches exactly
/// what `f` sees.
pub fn numeric_grad(f: &dyn Fn(&[Vec<f32>]) -> f64, args: &[Vec<f32>], eps: f32) -> Vec<Vec<f64>> {
    let mut work = args.to_vec();
    let mut out = vec![];
    for a in 0..args.len() {
        let mut g = vec![0.0; args[a].len()];
        for i in 0..args[a].len() {
            let x = args[a][i];
            let (hi, lo) = (x + eps, x - eps);
            work[a][i] = hi;
            let fh = f(&work);
            work[a][i] = lo;
            let fl = f(&work);
            work[a][i] = x;
            g[i] = (fh - fl) / (hi as f64 - lo as f64);
        }
        out.push(g);
    }
    out
}

/// Worst relative error over all arguments.
pub fn compare(numeric: &[Vec<f64>], analytic: &[Vec<f32>]) -> f64 {
    numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| rel_err(n, &a.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .fold(0.0, f64::max)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn uniform(rng: &mut Pcg64, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn padding(rng: &mut Pcg64, kernel: usize, h: usize, w: usize) -> Padding {
    if rng.random_bool(0.5) && kernel <= h.min(w) {
        Padding::Valid
    } else {
        Padding::Same
    }
}

fn dims(rng: &mut Pcg64, max_c: usize) -> [usize; 4] {
    [
        rng.random_range(1..=2),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
        rng.random_range(1..=max_c),
    ]
}

pub fn check_conv2d(rng: &mut Pcg64) -> f64 {
    let [n, h, w, c_in] = dims(rng, 3);
    let k = rng.random_range(1..=3);
    let g = ConvGeometry::new(k, c_in, rng.random_range(1..=3), rng.random_range(1..=2), padding(rng, k, h, w)).unwrap();
    let x = uniform(rng, n * h * w * c_in, -1.0, 1.0);
    let wt = uniform(rng, g.weight_len(), -1.0, 1.0);
    let b = uniform(rng, g.c_out, -1.0, 1.0);
    let (oh, ow) = g.output_hw(h, w).unwrap();
    let cot = uniform(rng, n * oh * ow * g.c_out, -1.0, 1.0);
    let f = |a: &[Vec<f32>]| {
        let y = tensor::conv2d(&Tensor::new([n, h, w, c_in], a[0].clone()).unwrap(), &g, &a[1], &a[2]).unwrap();
        dot(y.data(), &cot)
    };
    let args = vec![x, wt, b];
    let cot_t = Tensor::new([n, oh, ow, g.c_out], cot.clone()).unwrap();
    let an = tensor::conv2d_vjp(&Tensor::new([n, h, w, c_in], args[0].clone()).unwrap(), &g, &args[1], &args[2], &cot_t).unwrap();
    compare(&numeric_grad(&f, &args, 1e-2), &[an.input.into_data(), an.weights, an.bias])
}

pub fn check_depthwise(rng: &mut Pcg64) -> f64 {
    let [n, h, w, c] = dims(rng, 4);
    let k = rng.random_range(1..=3);
    let g = ConvGeometry::depthwise(k, c, rng.random_range(1..=2), padding(rng, k, h, w)).unwrap();
    let x = uniform(rng, n * h * w * c, -1.0, 1.0);
    let wt = uniform(rng, g.depthwise_weight_len(), -1.0, 1.0);
    let b = uniform(rng, c, -1.0, 1.0);
    let (oh, ow) = g.output_hw(h, w).unwrap();
    let cot = uniform(rng, n * oh * ow * c, -1.0, 1.0);
    let f = |a: &[Vec<f32>]| {
        let y = tensor::depthwise_conv2d(&Tensor::new([n, h, w, c], a[0].clone()).unwrap(), &g, &a[1], &a[2]).unwrap();
        dot(y.data(), &cot)
    };
    let args = vec![x, wt, b];
    let cot_t = Tensor::new([n, oh, ow, c], cot.clone()).unwrap();
    let an = tensor::depthwise_conv2d_vjp(&Tensor::new([n, h, w, c], args[0].clone()).unwrap(), &g, &args[1], &args[2], &cot_t).unwrap();
    compare(&numeric_grad(&f, &args, 1e-2), &[an.input.into_data(), an.weights, an.bias])
}

pub fn check_maxpool(rng: &mut Pcg64) -> f64 {
    let [n, h, w, c] = dims(rng, 3);
    let k = rng.random_range(1..=3);
    let p = PoolParams::new(k, rng.random_range(1..=2), padding(rng, k, h, w)).unwrap();
    // distinct values 0.05 apart, so no window is near a tie
    let len = n * h * w * c;
    let mut levels: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        levels.swap(i, rng.random_range(0..=i));
    }
    let x: Vec<f32> = levels.iter().map(|&l| l as f32 * 0.05 - 1.0 + rng.random_range(0.0..0.01)).collect();
    let (oh, ow) = p.output_hw(h, w).unwrap();
    let cot = uniform(rng, n * oh * ow * c, -1.0, 1.0);
    let f = |a: &[Vec<f32>]| {
        let y = tensor::maxpool2d(&Tensor::new([n, h, w, c], a[0].clone()).unwrap(), &p).unwrap();
        dot(y.data(), &cot)
    };
    let xt = Tensor::new([n, h, w, c], x.clone()).unwrap();
    let an = tensor::maxpool2d_vjp(&xt, &p, &Tensor::new([n, oh, ow, c], cot.clone()).unwrap()).unwrap();
    compare(&numeric_grad(&f, &[x], 1e-3), &[an.into_data()])
}

pub fn check_relu6(rng: &mut Pcg64) -> f64 {
    let d = dims(rng, 4);
    let len = d.iter().product();
    // stay clear of the kinks at 0 and 6
    let x: Vec<f32> = (0..len)
        .map(|_| loop {
            let v: f32 = rng.random_range(-2.0..8.0);
            if v.abs() > 0.01 && (v - 6.0).abs() > 0.01 {
                break v;
            }
        })
        .collect();
    let cot = uniform(rng, len, -1.0, 1.0);
    let f = |a: &[Vec<f32>]| dot(tensor::relu6(&Tensor::new(d, a[0].clone()).unwrap()).data(), &cot);
    let an = tensor::relu6_vjp(&Tensor::new(d, x.clone()).unwrap(), &Tensor::new(d, cot.clone()).unwrap()).unwrap();
    compare(&numeric_grad(&f, &[x], 1e-3), &[an.into_data()])
}

pub fn check_affine(rng: &mut Pcg64) -> f64 {
    let d = dims(rng, 4);
    let len = d.iter().product();
    let x = uniform(rng, len, -1.0, 1.0);
    let s = uniform(rng, d[3], 0.5, 1.5);
    let o = uniform(rng, d[3], -1.0, 1.0);
    let cot = uniform(rng, len, -1.0, 1.0);
    let f = |a: &[Vec<f32>]| {
        let y = tensor::affine_channel(&Tensor::new(d, a[0].clone()).unwrap(), &a[1], &a[2]).unwrap();
        dot(y.data(), &cot)
    };
    let args = vec![x, s, o];
    let an = tensor::affine_channel_vjp(
        &Tensor::new(d, args[0].clone()).unwrap(),
        &args[1],
        &args[2],
        &Tensor::new(d, cot.clone()).unwrap(),
    )
    .unwrap();
    compare(&numeric_grad(&f, &args, 1e-2), &[an.input.into_data(), an.scale, an.offset])
}

pub fn check_focal(rng: &mut Pcg64) -> f64 {
    let len = rng.random_range(1..=40);
    let x = uniform(rng, len, -6.0, 6.0);
    let t: Vec<f32> = (0..len).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let p = FocalParams {
        alpha: rng.random_range(0.1..0.9),
        gamma: [0.0, 0.5, 1.0, 2.0, 3.0][rng.random_range(0..5)],
    };
    let f = |a: &[Vec<f32>]| losses::focal_loss(&a[0], &t, &p).unwrap();
    let (_, g) = losses::focal_loss_with_grad(&x, &t, &p).unwrap();
    compare(&numeric_grad(&f, &[x], 1e-3), &[g])
}

pub fn check_smooth_l1(rng: &mut Pcg64) -> f64 {
    let len = rng.random_range(1..=40);
    let target = uniform(rng, len, -2.0, 2.0);
    // keep |pred - target| away from the quadratic/linear switch at 1
    let pred: Vec<f32> = target
        .iter()
        .map(|&t| loop {
            let v = t + rng.random_range(-3.0f32..3.0);
            if ((v - t).abs() - 1.0).abs() > 0.01 {
                break v;
            }
        })
        .collect();
    let f = |a: &[Vec<f32>]| losses::smooth_l1(&a[0], &target).unwrap();
    let (_, g) = losses::smooth_l1_with_grad(&pred, &target).unwrap();
    compare(&numeric_grad(&f, &[pred], 1e-3), &[g])
}

/// The combined, normalized objective over a small batch.
pub fn check_detection_loss(rng: &mut Pcg64) -> f64 {
    let k = rng.random_range(1..=3);
    let grid = rng.random_range(2..=4);
    let anchors: Vec<BBox> = (0..grid * grid)
        .map(|i| {
            let (y, x) = ((i / grid) as f64, (i % grid) as f64);
            let s = 1.0 / grid as f64;
            BBox::from_center((y + 0.5) * s, (x + 0.5) * s, s * 1.2, s * 0.9)
        })
        .collect();
    let images = rng.random_range(1..=2);
    let gts: Vec<Vec<Object>> = (0..images)
        .map(|_| {
            (0..rng.random_range(0..=2))
                .map(|_| {
                    let (y, x) = (rng.random_range(0.0..0.6f32), rng.random_range(0.0..0.6f32));
                    let (h, w) = (rng.random_range(0.15..0.4f32), rng.random_range(0.15..0.4f32));
                    Object { bbox: BBox::new(y, x, y + h, x + w), class: rng.random_range(0..k) }
                })
                .collect()
        })
        .collect();
    let matchings: Vec<_> = gts
        .iter()
        .map(|g| match_anchors(&anchors, &g.iter().map(|o| o.bbox).collect::<Vec<_>>(), 0.5))
        .collect();
    // box encodings stay within 0.9 of their targets, clear of the smooth-L1 switch
    let mut args = vec![];
    for (g, m) in gts.iter().zip(&matchings) {
        args.push(uniform(rng, anchors.len() * k, -4.0, 4.0));
        let mut enc = uniform(rng, anchors.len() * 4, -2.0, 2.0);
        for (a, label) in m.labels.iter().enumerate() {
            if let ppn_core::boxes::MatchLabel::Matched(j) = *label {
                let t = ppn_core::boxes::encode(&g[j].bbox, &anchors[a]);
                for (e, tv) in enc[a * 4..a * 4 + 4].iter_mut().zip(t) {
                    *e = tv + rng.random_range(-0.9..0.9);
                }
            }
        }
        args.push(enc);
    }
    let p = FocalParams::default();
    let eval = |a: &[Vec<f32>]| {
        let inputs: Vec<LossInput<'_>> = (0..images)
            .map(|i| LossInput {
                class_logits: &a[2 * i],
                box_encodings: &a[2 * i + 1],
                matching: &matchings[i],
                anchors: &anchors,
                groundtruth: &gts[i],
            })
            .collect();
        losses::total_loss_with_grad(&inputs, k, &p).unwrap()
    };
    let (_, grads) = eval(&args);
    let analytic: Vec<Vec<f32>> = (0..images)
        .flat_map(|i| [grads.class_logits[i].clone(), grads.box_encodings[i].clone()])
        .collect();
    let f = |a: &[Vec<f32>]| eval(a).0.total;
    compare(&numeric_grad(&f, &args, 1e-3), &analytic)
}

pub type Check = fn(&mut Pcg64) -> f64;

pub const CHECKS: [(&str, Check); 8] = [
    ("conv2d", check_conv2d),
    ("depthwise_conv2d", check_depthwise),
    ("maxpool2d", check_maxpool),
    ("relu6", check_relu6),
    ("affine_channel", check_affine),
    ("focal_loss", check_focal),
    ("smooth_l1", check_smooth_l1),
    ("detection_loss", check_detection_loss),
];

/// `(name, instances, worst relative error)` for every check.
pub fn run_suite(instances: usize, seed: u64) -> Vec<(&'static str, usize, f64)> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(name, check))| {
            let mut rng = Pcg64::new(seed as u128, 2 * i as u128 + 1);
            let worst = (0..instances).map(|_| check(&mut rng)).fold(0.0, f64::max);
            (name, instances, worst)
        })
        .collect()
}
