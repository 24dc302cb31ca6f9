//! Full detector graphs: a backbone plus either the pooling-pyramid head
//! with one shared predictor, or the SSD head with convolutional extra
//! layers and one predictor per scale.

use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::graph::{GraphSpec, LayerKind};
use crate::head::{self, ExtraStage, LevelPrediction, Predictor, PredictorParams};
use crate::tensor::{ConvGeometry, ConvParams, Padding, Tensor};
use crate::weights::WeightStore;

/// Prior foreground probability used to initialise the class-head bias.
pub const CLASS_PRIOR: f64 = 0.01;

pub fn class_prior_bias() -> f32 {
    (-((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln()) as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// Max-pool pyramid with a shared predictor.
    Ppn,
    /// Convolutional extra layers with per-scale predictors.
    Ssd,
}

impl HeadMode {
    pub fn name(&self) -> &'static str {
        match self {
            HeadMode::Ppn => "ppn",
            HeadMode::Ssd => "ssd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub backbone: Backbone,
    pub input_size: usize,
    pub mode: HeadMode,
    pub num_levels: usize,
    pub anchors_per_location: usize,
    pub num_classes: usize,
    /// Width of the `1x1` conv in front of the class/box heads; 0 drops it.
    pub predictor_depth: usize,
    /// Output width of the PPN transform conv; `None` keeps the base width.
    pub transform_depth: Option<usize>,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(Error::Config("num_levels must be at least 1".into()));
        }
        if self.anchors_per_location == 0 || self.num_classes == 0 {
            return Err(Error::Config("anchors_per_location and num_classes must be positive".into()));
        }
        if self.mode == HeadMode::Ssd && self.num_levels < 2 {
            return Err(Error::Config("ssd mode predicts from at least the two backbone maps".into()));
        }
        if self.transform_depth == Some(0) {
            return Err(Error::Config("transform_depth must be positive".into()));
        }
        Ok(())
    }

    /// Channel widths of the SSD extra stages.
    pub fn ssd_extra_channels(&self) -> Vec<usize> {
        let n = self.num_levels.saturating_sub(2);
        match self.backbone {
            Backbone::MobileNetV1 { .. } => (0..n)
                .map(|i| head::SSD_EXTRA_CHANNELS[i.min(head::SSD_EXTRA_CHANNELS.len() - 1)])
                .collect(),
            Backbone::Tiny { base_channels } => vec![4 * base_channels; n],
        }
    }
}

/// Graph layers that produce one prediction level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutputs {
    /// Layer whose output the predictor reads.
    pub feature_layer: String,
    pub class_endpoint: String,
    pub box_endpoint: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    graph: GraphSpec,
    levels: Vec<LevelOutputs>,
}

fn conv1x1(c_in: usize, c_out: usize) -> Result<LayerKind> {
    Ok(LayerKind::Conv(ConvGeometry::new(1, c_in, c_out, 1, Padding::Same)?))
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let full = config.backbone.build(config.input_size)?;
        let (mut b, features) = match config.mode {
            HeadMode::Ppn => {
                let base = config.backbone.pyramid_base();
                let base_layer = full.endpoint(base).expect("backbone exposes its pyramid base").layer.clone();
                let [h, w, c] = full.endpoint_shape(base)?;
                head::pyramid_sizes(h.max(w), config.num_levels)?;
                let mut b = full.prune(&[base])?.into_builder();
                let depth = config.transform_depth.unwrap_or(c);
                let t = b.add("transform/conv", conv1x1(c, depth)?, &base_layer)?;
                let mut x = b.add("transform/relu6", LayerKind::Relu6, &t)?;
                let mut features = vec![x.clone()];
                for i in 1..config.num_levels {
                    x = b.add(format!("pyramid/pool{i}"), LayerKind::MaxPool(head::pyramid_pool()), &x)?;
                    features.push(x.clone());
                }
                (b, features)
            }
            HeadMode::Ssd => {
                let sources = config.backbone.ssd_sources();
                let mut features: Vec<String> = sources
                    .iter()
                    .map(|s| full.endpoint(s).expect("backbone exposes ssd sources").layer.clone())
                    .collect();
                let c_in = full.endpoint_shape(sources[1])?[2];
                let mut b = full.prune(&sources)?.into_builder();
                let mut x = features[1].clone();
                for (i, (g1, g2)) in head::ssd_extra_geometries(c_in, &config.ssd_extra_channels())?
                    .into_iter()
                    .enumerate()
                {
                    let prefix = format!("extras/stage{}", i + 1);
                    let c = b.add(format!("{prefix}/bottleneck"), LayerKind::Conv(g1), &x)?;
                    let r = b.add(format!("{prefix}/bottleneck_relu6"), LayerKind::Relu6, &c)?;
                    let d = b.add(format!("{prefix}/downsample"), LayerKind::Conv(g2), &r)?;
                    x = b.add(format!("{prefix}/downsample_relu6"), LayerKind::Relu6, &d)?;
                    features.push(x.clone());
                }
                (b, features)
            }
        };

        let shared = config.mode == HeadMode::Ppn;
        let (a, k, depth) = (config.anchors_per_location, config.num_classes, config.predictor_depth);
        let mut levels = vec![];
        for (i, feature) in features.iter().enumerate() {
            let [h, w, c] = b.shape_of(feature)?;
            let group = |name: &str| {
                if shared {
                    format!("predictor/{name}")
                } else {
                    format!("predictor/level{i}/{name}")
                }
            };
            let mut x = feature.clone();
            let mut width = c;
            if depth > 0 {
                let p = b.add_shared(format!("predictor/level{i}/pre_conv"), conv1x1(c, depth)?, &x, &group("pre_conv"))?;
                x = b.add(format!("predictor/level{i}/pre_relu6"), LayerKind::Relu6, &p)?;
                width = depth;
            }
            let cl = b.add_shared(format!("predictor/level{i}/class"), conv1x1(width, a * k)?, &x, &group("class"))?;
            let bx = b.add_shared(format!("predictor/level{i}/box"), conv1x1(width, a * 4)?, &x, &group("box"))?;
            let class_endpoint = format!("level{i}/class_logits");
            let box_endpoint = format!("level{i}/box_encodings");
            b.endpoint(class_endpoint.clone(), &cl)?;
            b.endpoint(box_endpoint.clone(), &bx)?;
            levels.push(LevelOutputs {
                feature_layer: feature.clone(),
                class_endpoint,
                box_endpoint,
                height: h,
                width: w,
                channels: c,
            });
        }
        let graph = b.build()?;
        let keep: Vec<&str> = levels
            .iter()
            .flat_map(|l| [l.class_endpoint.as_str(), l.box_endpoint.as_str()])
            .collect();
        let graph = graph.prune(&keep)?;
        Ok(Self { config, graph, levels })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn levels(&self) -> &[LevelOutputs] {
        &self.levels
    }

    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.height, l.width)).collect()
    }

    pub fn num_anchors(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum::<usize>() * self.config.anchors_per_location
    }

    /// Seeded init: fan-in uniform convs, and class-head biases at the
    /// foreground prior.
    pub fn init_weights(&self, seed: u64) -> WeightStore {
        let mut rng = Pcg64::seed_from_u64(seed);
        let mut w = self.graph.init_weights(&mut rng, 1.0);
        let prior = class_prior_bias();
        for (name, p) in w.iter_mut() {
            if name.starts_with("predictor/") && name.ends_with("class/bias") {
                p.data_mut().iter_mut().for_each(|v| *v = prior);
            }
        }
        w
    }

    /// Runs the graph and returns per-level predictions.
    pub fn forward(&self, weights: &WeightStore, images: &Tensor) -> Result<Vec<LevelPrediction>> {
        let mut out = self.graph.execute(weights, images)?;
        Ok(self
            .levels
            .iter()
            .map(|l| LevelPrediction {
                class_logits: out.remove(&l.class_endpoint).expect("endpoint"),
                box_encodings: out.remove(&l.box_endpoint).expect("endpoint"),
            })
            .collect())
    }

    fn conv_params(&self, weights: &WeightStore, group: &str) -> Result<ConvParams> {
        let layer = self
            .graph
            .layers()
            .iter()
            .find(|l| l.params.as_deref() == Some(group))
            .ok_or_else(|| Error::MissingWeight(group.to_string()))?;
        let LayerKind::Conv(g) = layer.kind else {
            return Err(Error::Graph(format!("`{group}` is not a convolution")));
        };
        let w = weights.expect(&format!("{group}/weights"), &[g.kernel_h, g.kernel_w, g.c_in, g.c_out])?;
        let b = weights.expect(&format!("{group}/bias"), &[g.c_out])?;
        ConvParams::new(g, w.to_vec(), b.to_vec())
    }

    fn predictor(&self, weights: &WeightStore, prefix: &str) -> Result<Predictor> {
        Ok(Predictor {
            pre_conv: if self.config.predictor_depth > 0 {
                Some(self.conv_params(weights, &format!("{prefix}/pre_conv"))?)
            } else {
                None
            },
            class_head: self.conv_params(weights, &format!("{prefix}/class"))?,
            box_head: self.conv_params(weights, &format!("{prefix}/box"))?,
        })
    }

    /// The head's predictor parameters in tensor-level form.
    pub fn predictor_params(&self, weights: &WeightStore) -> Result<PredictorParams> {
        match self.config.mode {
            HeadMode::Ppn => Ok(PredictorParams::Shared(self.predictor(weights, "predictor")?)),
            HeadMode::Ssd => Ok(PredictorParams::PerScale(
                (0..self.levels.len())
                    .map(|i| self.predictor(weights, &format!("predictor/level{i}")))
                    .collect::<Result<_>>()?,
            )),
        }
    }

    /// SSD extra stages in tensor-level form (empty in PPN mode).
    pub fn extra_stages(&self, weights: &WeightStore) -> Result<Vec<ExtraStage>> {
        (1..=self.config.ssd_extra_channels().len())
            .filter(|_| self.config.mode == HeadMode::Ssd)
            .map(|i| {
                Ok(ExtraStage {
                    bottleneck: self.conv_params(weights, &format!("extras/stage{i}/bottleneck"))?,
                    downsample: self.conv_params(weights, &format!("extras/stage{i}/downsample"))?,
                })
            })
            .collect()
    }
}
