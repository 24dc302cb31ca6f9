//! Detection heads over tensors: the max-pool pyramid, the SSD extra
//! layers, and the box predictor in shared or per-scale form.
//!
//! [`crate::model`] expresses the same heads as graph layers; the functions
//! here are the direct tensor-level route and the two are tested against
//! each other.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, ConvParams, Padding, PoolParams, Tensor};

/// Output channels of the four SSD extra stages on MobileNet-v1.
pub const SSD_EXTRA_CHANNELS: [usize; 4] = [512, 256, 256, 128];

/// The pooling step between pyramid levels: 2x2, stride 2, SAME.
pub fn pyramid_pool() -> PoolParams {
    PoolParams {
        kernel: 2,
        stride: 2,
        padding: Padding::Same,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub level_index: usize,
    pub feature: Tensor,
}

impl PyramidLevel {
    pub fn spatial(&self) -> (usize, usize) {
        (self.feature.height(), self.feature.width())
    }
}

/// Side lengths of a pyramid built from a `base` x `base` map.
///
/// A 1x1 map pools to 1x1, so asking for more levels than it takes to reach
/// 1x1 is an error.
pub fn pyramid_sizes(base: usize, num_levels: usize) -> Result<Vec<usize>> {
    if num_levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    if base == 0 {
        return Err(Error::Shape("pyramid base must be non-empty".into()));
    }
    let mut sizes = vec![base];
    while sizes.len() < num_levels {
        let last = *sizes.last().expect("non-empty");
        if last == 1 {
            return Err(Error::Config(format!(
                "a {base}x{base} base supports at most {} pyramid levels, {num_levels} requested",
                sizes.len()
            )));
        }
        sizes.push(last.div_ceil(2));
    }
    Ok(sizes)
}

/// Level 0 is `base`; each further level max-pools the previous one.
pub fn build_max_pool_pyramid(base: &Tensor, num_levels: usize) -> Result<Vec<PyramidLevel>> {
    let (h, w) = (base.height(), base.width());
    let deepest = pyramid_sizes(h.max(w), num_levels)?;
    debug_assert_eq!(deepest.len(), num_levels);
    let pool = pyramid_pool();
    let mut levels = vec![PyramidLevel {
        level_index: 0,
        feature: base.clone(),
    }];
    for i in 1..num_levels {
        let next = tensor::maxpool2d(&levels[i - 1].feature, &pool)?;
        levels.push(PyramidLevel {
            level_index: i,
            feature: next,
        });
    }
    Ok(levels)
}

/// `(bottleneck, downsample)` geometries of SSD extra stages: a 1x1 conv to
/// half the stage width, then a 3x3 stride-2 conv.
pub fn ssd_extra_geometries(c_in: usize, channels: &[usize]) -> Result<Vec<(ConvGeometry, ConvGeometry)>> {
    let mut prev = c_in;
    channels
        .iter()
        .map(|&c| {
            let mid = (c / 2).max(1);
            let g = (
                ConvGeometry::new(1, prev, mid, 1, Padding::Same)?,
                ConvGeometry::new(3, mid, c, 2, Padding::Same)?,
            );
            prev = c;
            Ok(g)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtraStage {
    pub bottleneck: ConvParams,
    pub downsample: ConvParams,
}

/// Runs the SSD extra stages (each conv followed by relu6) on the last
/// backbone map and returns every stage output.
pub fn build_ssd_extra_layers(c13: &Tensor, stages: &[ExtraStage]) -> Result<Vec<Tensor>> {
    let mut x = c13.clone();
    let mut out = Vec::with_capacity(stages.len());
    for (i, s) in stages.iter().enumerate() {
        if x.channels() != s.bottleneck.geometry.c_in {
            return Err(Error::Shape(format!(
                "extra stage {i} expects {} channels, got {}",
                s.bottleneck.geometry.c_in,
                x.channels()
            )));
        }
        let y = tensor::relu6(&s.bottleneck.forward(&x)?);
        x = tensor::relu6(&s.downsample.forward(&y)?);
        out.push(x.clone());
    }
    Ok(out)
}

/// One box predictor: optional `1x1 conv + relu6`, then the class and box
/// 1x1 heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub pre_conv: Option<ConvParams>,
    pub class_head: ConvParams,
    pub box_head: ConvParams,
}

impl Predictor {
    pub fn input_channels(&self) -> usize {
        self.pre_conv
            .as_ref()
            .map_or(self.class_head.geometry.c_in, |p| p.geometry.c_in)
    }

    pub fn apply(&self, feature: &Tensor) -> Result<LevelPrediction> {
        let x = match &self.pre_conv {
            Some(p) => tensor::relu6(&p.forward(feature)?),
            None => feature.clone(),
        };
        Ok(LevelPrediction {
            class_logits: self.class_head.forward(&x)?,
            box_encodings: self.box_head.forward(&x)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PredictorParams {
    Shared(Predictor),
    PerScale(Vec<Predictor>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelPrediction {
    /// `N x h x w x (A * K)`.
    pub class_logits: Tensor,
    /// `N x h x w x (A * 4)`.
    pub box_encodings: Tensor,
}

pub fn predict(levels: &[PyramidLevel], params: &PredictorParams) -> Result<Vec<LevelPrediction>> {
    match params {
        PredictorParams::Shared(p) => levels
            .iter()
            .map(|l| {
                if l.feature.channels() != p.input_channels() {
                    return Err(Error::Shape(format!(
                        "shared predictor expects {} channels but level {} has {}",
                        p.input_channels(),
                        l.level_index,
                        l.feature.channels()
                    )));
                }
                p.apply(&l.feature)
            })
            .collect(),
        PredictorParams::PerScale(ps) => {
            if ps.len() != levels.len() {
                return Err(Error::Config(format!(
                    "{} per-scale predictors for {} levels",
                    ps.len(),
                    levels.len()
                )));
            }
            levels.iter().zip(ps).map(|(l, p)| p.apply(&l.feature)).collect()
        }
    }
}
