use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ppn_core::analyzer::{self, ModelStats};
use ppn_core::boxes::{generate_anchors, AnchorSet};
use ppn_core::data::{self, Dataset};
use ppn_core::harness::{self, EvalReport};
use ppn_core::model::Detector;
use ppn_core::weights::WeightStore;
use ppn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::Serialize;

use crate::{CliError, RunConfig};

fn runtime(context: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

pub struct Model {
    pub config: RunConfig,
    pub detector: Detector,
    pub anchors: AnchorSet,
}

impl Model {
    pub fn load(config: &Path) -> Result<Self, CliError> {
        Self::new(RunConfig::load(config)?)
    }

    pub fn new(config: RunConfig) -> Result<Self, CliError> {
        let detector = Detector::new(config.model.clone())?;
        let anchors = generate_anchors(&config.anchors, &detector.level_shapes(), config.model.num_levels)?;
        Ok(Self { config, detector, anchors })
    }

    /// Loads weights and checks they cover exactly this graph's parameters.
    pub fn load_weights(&self, path: &Path) -> Result<WeightStore, CliError> {
        let w = WeightStore::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let expected = self.detector.graph().param_shapes();
        for (name, dims) in &expected {
            w.expect(name, dims)?;
        }
        if w.len() != expected.len() {
            let extra: Vec<&str> = w
                .iter()
                .map(|(n, _)| n)
                .filter(|n| !expected.iter().any(|(e, _)| e == n))
                .collect();
            return Err(CliError::Input(format!(
                "{} holds tensors this model does not use: {}",
                path.display(),
                extra.join(", ")
            )));
        }
        Ok(w)
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<(), CliError> {
        if ds.image_size != self.config.model.input_size {
            return Err(CliError::Input(format!(
                "dataset images are {0}x{0} but the model expects {1}x{1}",
                ds.image_size, self.config.model.input_size
            )));
        }
        if let Some(o) = ds.objects.iter().flatten().find(|o| o.class >= self.config.model.num_classes) {
            return Err(CliError::Input(format!(
                "dataset class {} out of range for {} classes",
                o.class, self.config.model.num_classes
            )));
        }
        Ok(())
    }

    fn dataset(&self, dir: Option<&Path>, held_out: bool) -> Result<Dataset, CliError> {
        let ds = match dir {
            Some(d) => Dataset::load(d).map_err(|e| CliError::Input(format!("{}: {e}", d.display())))?,
            None if held_out => data::generate_dataset(&self.config.eval_scene())?,
            None => data::generate_dataset(&self.config.train_scene())?,
        };
        self.check_dataset(&ds)?;
        Ok(ds)
    }
}

pub fn analyze(config: &Path, compare: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let report = |path: &Path, out: &mut dyn Write| -> Result<ModelStats, CliError> {
        let m = Model::load(path)?;
        let stats = analyzer::analyze(m.detector.graph());
        writeln!(out, "# {}", path.display())
            .and_then(|_| write!(out, "{stats}"))
            .and_then(|_| write!(out, "{}", stats.key_values()))
            .map_err(runtime("writing report"))?;
        Ok(stats)
    };
    let a = report(config, out)?;
    if let Some(other) = compare {
        let b = report(other, out)?;
        // ratios read as compared / base, e.g. SSD over PPN
        let c = analyzer::compare(&b, &a);
        writeln!(out, "# {} vs {}", other.display(), config.display())
            .and_then(|_| write!(out, "{c}"))
            .and_then(|_| write!(out, "{}", c.key_values()))
            .map_err(runtime("writing report"))?;
    }
    Ok(())
}

/// Where the per-step loss log of a weights file goes.
pub fn loss_log_path(weights: &Path) -> PathBuf {
    weights.with_extension("loss.csv")
}

pub fn train(config: &Path, out: &Path, dataset: Option<&Path>, steps: Option<usize>) -> Result<(), CliError> {
    let mut m = Model::load(config)?;
    if let Some(s) = steps {
        m.config.train.steps = s;
    }
    let ds = m.dataset(dataset, false)?;
    let result = harness::train(&m.detector, &m.anchors, &ds, &m.config.train)?;
    result.weights.save(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let mut csv = String::from("step,total,classification,localization,normalizer\n");
    for (i, l) in result.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{},{}\n", l.total, l.classification, l.localization, l.normalizer));
    }
    let log = loss_log_path(out);
    fs::write(&log, csv).map_err(runtime(&log.display().to_string()))?;
    Ok(())
}

#[derive(Serialize)]
struct LevelJson {
    level: usize,
    tp_count: usize,
    mean_score: f64,
    std_score: f64,
}

#[derive(Serialize)]
struct CalibrationJson {
    levels: Vec<LevelJson>,
    spread: f64,
    min_tps_for_spread: usize,
}

#[derive(Serialize)]
struct EvalJson {
    mode: &'static str,
    num_images: usize,
    num_detections: usize,
    iou_threshold: f32,
    /// `null` for classes absent from the groundtruth.
    per_class_ap: Vec<Option<f64>>,
    map: f64,
    calibration: CalibrationJson,
}

fn eval_json(mode: &'static str, iou: f32, r: EvalReport) -> EvalJson {
    EvalJson {
        mode,
        num_images: r.num_images,
        num_detections: r.num_detections,
        iou_threshold: iou,
        per_class_ap: r.ap.per_class,
        map: r.ap.mean,
        calibration: CalibrationJson {
            levels: r
                .calibration
                .levels
                .into_iter()
                .map(|l| LevelJson {
                    level: l.level,
                    tp_count: l.tp_count,
                    mean_score: l.mean_score,
                    std_score: l.std_score,
                })
                .collect(),
            spread: r.calibration.spread,
            min_tps_for_spread: harness::MIN_TPS_FOR_SPREAD,
        },
    }
}

/// Without `dataset`, evaluates on the config's held-out synthetic set.
pub fn eval(config: &Path, weights: &Path, dataset: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let m = Model::load(config)?;
    let w = m.load_weights(weights)?;
    let ds = m.dataset(dataset, true)?;
    let r = harness::evaluate(&m.detector, &w, &m.anchors, &ds, &m.config.postprocess, m.config.eval_iou)?;
    let json = eval_json(m.config.model.mode.name(), m.config.eval_iou, r);
    let text = serde_json::to_string_pretty(&json).expect("report serializes");
    writeln!(out, "{text}").map_err(runtime("writing report"))
}

#[derive(Serialize)]
struct DetectionJson {
    #[serde(rename = "box")]
    bbox: [f32; 4],
    score: f32,
    class: usize,
    level: usize,
}

pub fn infer(config: &Path, weights: &Path, image: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let m = Model::load(config)?;
    let w = m.load_weights(weights)?;
    let img = data::read_ppm(image).map_err(|e| CliError::Input(format!("{}: {e}", image.display())))?;
    let size = m.config.model.input_size;
    if img.width != size || img.height != size {
        return Err(CliError::Input(format!(
            "{} is {}x{}, the model expects {size}x{size}",
            image.display(),
            img.width,
            img.height
        )));
    }
    let dets = harness::detect(&m.detector, &w, &m.anchors, &img.to_tensor(), &m.config.postprocess)?;
    for d in &dets[0] {
        let line = serde_json::to_string(&DetectionJson {
            bbox: d.bbox.to_array(),
            score: d.score,
            class: d.class,
            level: d.level,
        })
        .expect("detection serializes");
        writeln!(out, "{line}").map_err(runtime("writing detections"))?;
    }
    Ok(())
}

/// Writes the config's synthetic train (or held-out) set to `dir`.
pub fn dataset(config: &Path, dir: &Path, held_out: bool) -> Result<(), CliError> {
    let m = Model::load(config)?;
    let ds = m.dataset(None, held_out)?;
    ds.save(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn median(xs: &mut [Duration]) -> Duration {
    xs.sort();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub repeat: usize,
    /// `(layer, median)` in execution order.
    pub layers: Vec<(String, Duration)>,
    /// `(stage, median of per-run stage sums)` in first-appearance order.
    pub stages: Vec<(String, Duration)>,
    /// Sum of the stage medians.
    pub total: Duration,
}

/// One untimed warm-up pass, then `repeat` timed forward passes on a
/// fixed random image.
pub fn run_bench(m: &Model, weights: &WeightStore, repeat: usize) -> Result<BenchReport, CliError> {
    if repeat == 0 {
        return Err(CliError::Input("--repeat must be at least 1".into()));
    }
    let s = m.config.model.input_size;
    let mut rng = Pcg64::seed_from_u64(0);
    let image = Tensor::from_fn([1, s, s, 3], |_| rng.random_range(-1.0..1.0));
    let graph = m.detector.graph();
    graph.execute(weights, &image)?;
    let names: Vec<&str> = graph.layers().iter().map(|l| l.name.as_str()).collect();
    let mut stage_names: Vec<&str> = vec![];
    for n in &names {
        let st = analyzer::stage_of(n);
        if !stage_names.contains(&st) {
            stage_names.push(st);
        }
    }
    let mut per_layer: Vec<Vec<Duration>> = vec![Vec::with_capacity(repeat); names.len()];
    let mut per_stage: Vec<Vec<Duration>> = vec![Vec::with_capacity(repeat); stage_names.len()];
    for _ in 0..repeat {
        let (_, times) = graph.execute_profiled(weights, &image)?;
        let mut sums = vec![Duration::ZERO; stage_names.len()];
        for (i, t) in times.iter().enumerate() {
            per_layer[i].push(*t);
            let st = stage_names.iter().position(|s| *s == analyzer::stage_of(names[i])).expect("known stage");
            sums[st] += *t;
        }
        for (acc, t) in per_stage.iter_mut().zip(sums) {
            acc.push(t);
        }
    }
    let layers = names.iter().zip(per_layer.iter_mut()).map(|(n, t)| (n.to_string(), median(t))).collect();
    let stages: Vec<(String, Duration)> = stage_names
        .iter()
        .zip(per_stage.iter_mut())
        .map(|(n, t)| (n.to_string(), median(t)))
        .collect();
    let total = stages.iter().map(|(_, t)| *t).sum();
    Ok(BenchReport { repeat, layers, stages, total })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn bench(config: &Path, weights: Option<&Path>, repeat: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let m = Model::load(config)?;
    let w = match weights {
        Some(p) => m.load_weights(p)?,
        None => m.detector.init_weights(m.config.train.seed),
    };
    let r = run_bench(&m, &w, repeat)?;
    let width = r.layers.iter().map(|(n, _)| n.len()).max().unwrap_or(5);
    let mut text = format!("{:<width$}  {:>10}\n", "layer", "median_ms");
    for (n, t) in &r.layers {
        text.push_str(&format!("{n:<width$}  {:>10.3}\n", ms(*t)));
    }
    text.push_str(&format!("repeat={}\n", r.repeat));
    for (n, t) in &r.stages {
        text.push_str(&format!("stage.{n}.median_ms={:.6}\n", ms(*t)));
    }
    text.push_str(&format!("total.median_ms={:.6}\n", ms(r.total)));
    out.write_all(text.as_bytes()).map_err(runtime("writing report"))
}
