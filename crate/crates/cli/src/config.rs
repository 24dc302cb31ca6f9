//! `key = value` run configs. One setting per line, `#` starts a comment,
//! unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ppn_core::backbone::Backbone;
use ppn_core::boxes::AnchorConfig;
use ppn_core::data::SyntheticSceneConfig;
use ppn_core::harness::{PostprocessConfig, TrainConfig};
use ppn_core::losses::FocalParams;
use ppn_core::model::{DetectorConfig, HeadMode};

use crate::CliError;

/// Every accepted key. `true` marks keys without a default.
const KEYS: &[(&str, bool)] = &[
    ("model.mode", true),
    ("model.backbone", true),
    ("model.depth_multiplier", false),
    ("model.base_channels", false),
    ("model.input_size", true),
    ("model.num_levels", true),
    ("model.anchors_per_location", true),
    ("model.num_classes", true),
    ("model.predictor_depth", false),
    ("model.transform_depth", false),
    ("anchor.min_scale", false),
    ("anchor.max_scale", false),
    ("anchor.aspect_ratios", false),
    ("anchor.interpolated_scale", false),
    ("loss.alpha", false),
    ("loss.gamma", false),
    ("loss.match_iou", false),
    ("train.steps", false),
    ("train.lr", false),
    ("train.seed", false),
    ("train.batch", false),
    ("train.momentum", false),
    ("train.clip_norm", false),
    ("data.distribution", false),
    ("data.num_images", false),
    ("data.seed", false),
    ("data.eval_images", false),
    ("data.eval_seed", false),
    ("postprocess.nms_iou", false),
    ("postprocess.score_threshold", false),
    ("postprocess.max_detections", false),
    ("eval.iou", false),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    Balanced,
    Skewed,
}

/// How synthetic train/eval sets are drawn when no dataset dir is given.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub distribution: Distribution,
    pub num_images: usize,
    pub seed: u64,
    pub eval_images: usize,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DetectorConfig,
    pub anchors: AnchorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub postprocess: PostprocessConfig,
    pub eval_iou: f32,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(line, v)| (*line, v.as_str()))
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| bad(format!("line {line}: cannot parse `{v}` for {key}"))),
        }
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let (line, v) = self.raw(key).ok_or_else(|| bad(format!("missing required key {key}")))?;
        v.parse().map_err(|_| bad(format!("line {line}: cannot parse `{v}` for {key}")))
    }

    fn positive(&self, key: &str, default: Option<usize>) -> Result<usize, CliError> {
        let v = match default {
            Some(d) => self.get(key, d)?,
            None => self.required(key)?,
        };
        if v == 0 {
            return Err(bad(format!("{key} must be positive")));
        }
        Ok(v)
    }

    fn in_unit(&self, key: &str, default: f64) -> Result<f64, CliError> {
        let v: f64 = self.get(key, default)?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(bad(format!("{key} must be in (0, 1], got {v}")));
        }
        Ok(v)
    }
}

fn tokenize(text: &str) -> Result<Entries, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {n}: expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(known, _)| *known == k) {
            return Err(bad(format!("line {n}: unknown key `{k}`")));
        }
        if v.is_empty() {
            return Err(bad(format!("line {n}: empty value for {k}")));
        }
        if map.insert(k.to_string(), (n, v.to_string())).is_some() {
            return Err(bad(format!("line {n}: duplicate key {k}")));
        }
    }
    for (k, required) in KEYS {
        if *required && !map.contains_key(*k) {
            return Err(bad(format!("missing required key {k}")));
        }
    }
    Ok(Entries { map })
}

fn parse_ratios(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|r| {
            let r = r.trim();
            // `1/3` reads more naturally than 0.333 in configs
            let v = match r.split_once('/') {
                Some((a, b)) => a.trim().parse::<f64>().ok().zip(b.trim().parse::<f64>().ok()).map(|(a, b)| a / b),
                None => r.parse().ok(),
            };
            v.filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| bad(format!("bad aspect ratio `{r}`")))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let e = tokenize(text)?;
        let mode = match e.required::<String>("model.mode")?.as_str() {
            "ppn" => HeadMode::Ppn,
            "ssd" => HeadMode::Ssd,
            other => return Err(bad(format!("model.mode must be ppn or ssd, got `{other}`"))),
        };
        let backbone = match e.required::<String>("model.backbone")?.as_str() {
            "mobilenet_v1" => {
                if e.raw("model.base_channels").is_some() {
                    return Err(bad("model.base_channels only applies to the tiny backbone"));
                }
                let dm: f64 = e.get("model.depth_multiplier", 1.0)?;
                if !(dm.is_finite() && dm > 0.0) {
                    return Err(bad(format!("model.depth_multiplier must be positive, got {dm}")));
                }
                Backbone::MobileNetV1 { depth_multiplier: dm }
            }
            "tiny" => {
                if e.raw("model.depth_multiplier").is_some() {
                    return Err(bad("model.depth_multiplier only applies to mobilenet_v1"));
                }
                Backbone::Tiny { base_channels: e.positive("model.base_channels", Some(8))? }
            }
            other => return Err(bad(format!("model.backbone must be mobilenet_v1 or tiny, got `{other}`"))),
        };
        let transform_depth = match e.raw("model.transform_depth") {
            None => None,
            Some(_) => Some(e.positive("model.transform_depth", None)?),
        };
        let model = DetectorConfig {
            backbone,
            input_size: e.positive("model.input_size", None)?,
            mode,
            num_levels: e.positive("model.num_levels", None)?,
            anchors_per_location: e.positive("model.anchors_per_location", None)?,
            num_classes: e.positive("model.num_classes", None)?,
            predictor_depth: e.get("model.predictor_depth", 0)?,
            transform_depth,
        };
        let defaults = AnchorConfig::default();
        let anchors = AnchorConfig {
            min_scale: e.get("anchor.min_scale", defaults.min_scale)?,
            max_scale: e.get("anchor.max_scale", defaults.max_scale)?,
            aspect_ratios: match e.raw("anchor.aspect_ratios") {
                Some((_, v)) => parse_ratios(v)?,
                None => defaults.aspect_ratios,
            },
            interpolated_scale_anchor: e.get("anchor.interpolated_scale", defaults.interpolated_scale_anchor)?,
        };
        anchors.validate().map_err(|err| bad(err.to_string()))?;
        if anchors.anchors_per_location() != model.anchors_per_location {
            return Err(bad(format!(
                "model.anchors_per_location is {} but the anchor settings give {} boxes per cell",
                model.anchors_per_location,
                anchors.anchors_per_location()
            )));
        }
        model.validate().map_err(|err| bad(err.to_string()))?;

        let td = TrainConfig::default();
        let fd = FocalParams::default();
        let train = TrainConfig {
            steps: e.get("train.steps", td.steps)?,
            learning_rate: e.get("train.lr", td.learning_rate)?,
            batch_size: e.positive("train.batch", Some(td.batch_size))?,
            seed: e.get("train.seed", td.seed)?,
            momentum: e.get("train.momentum", td.momentum)?,
            clip_norm: e.get("train.clip_norm", td.clip_norm)?,
            match_iou: e.in_unit("loss.match_iou", td.match_iou as f64)? as f32,
            focal: FocalParams {
                alpha: e.get("loss.alpha", fd.alpha)?,
                gamma: e.get("loss.gamma", fd.gamma)?,
            },
        };
        train.validate().map_err(|err| bad(err.to_string()))?;

        let seed: u64 = e.get("data.seed", 0)?;
        let data = DataConfig {
            distribution: match e.get::<String>("data.distribution", "balanced".into())?.as_str() {
                "balanced" => Distribution::Balanced,
                "skewed" => Distribution::Skewed,
                other => return Err(bad(format!("data.distribution must be balanced or skewed, got `{other}`"))),
            },
            num_images: e.positive("data.num_images", Some(500))?,
            seed,
            eval_images: e.positive("data.eval_images", Some(200))?,
            eval_seed: e.get("data.eval_seed", seed.wrapping_add(1000))?,
        };

        let pd = PostprocessConfig::default();
        let postprocess = PostprocessConfig {
            score_threshold: e.get("postprocess.score_threshold", pd.score_threshold)?,
            nms_iou: e.in_unit("postprocess.nms_iou", pd.nms_iou as f64)? as f32,
            max_detections: e.positive("postprocess.max_detections", Some(pd.max_detections))?,
        };
        if !(0.0..=1.0).contains(&postprocess.score_threshold) {
            return Err(bad(format!(
                "postprocess.score_threshold must be in [0, 1], got {}",
                postprocess.score_threshold
            )));
        }
        let eval_iou = e.in_unit("eval.iou", 0.5)? as f32;
        Ok(Self { model, anchors, train, data, postprocess, eval_iou })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|err| bad(format!("cannot read {}: {err}", path.display())))?;
        Self::parse(&text).map_err(|err| bad(format!("{}: {err}", path.display())))
    }

    fn scene(&self, num_images: usize, seed: u64) -> SyntheticSceneConfig {
        let size = self.model.input_size;
        let base = match self.data.distribution {
            Distribution::Balanced => SyntheticSceneConfig::balanced(size, num_images, seed),
            Distribution::Skewed => SyntheticSceneConfig::skewed(size, num_images, seed),
        };
        SyntheticSceneConfig { num_classes: self.model.num_classes, ..base }
    }

    pub fn train_scene(&self) -> SyntheticSceneConfig {
        self.scene(self.data.num_images, self.data.seed)
    }

    /// A held-out set drawn with its own seed.
    pub fn eval_scene(&self) -> SyntheticSceneConfig {
        self.scene(self.data.eval_images, self.data.eval_seed)
    }
}
