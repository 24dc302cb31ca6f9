//! Feature extractors: MobileNet-v1 and a four-stage "tiny" network for
//! quick training runs.

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, GraphSpec, LayerKind, GRAPH_INPUT};
use crate::tensor::{ConvGeometry, Padding};

/// Pointwise output channels of the 13 depthwise-separable blocks.
pub const MOBILENET_V1_CHANNELS: [usize; 13] = [64, 128, 128, 256, 256, 512, 512, 512, 512, 512, 512, 1024, 1024];
/// Depthwise strides of the 13 blocks.
pub const MOBILENET_V1_STRIDES: [usize; 13] = [1, 2, 1, 2, 1, 2, 1, 1, 1, 1, 1, 2, 1];

pub fn scaled_channels(channels: usize, depth_multiplier: f64) -> usize {
    ((channels as f64 * depth_multiplier).round() as usize).max(8)
}

/// Adds `conv -> affine -> relu6` under `prefix` and returns the relu6 layer.
fn conv_block(b: &mut GraphBuilder, prefix: &str, kind: LayerKind, input: &str) -> Result<String> {
    let (suffix, channels) = match kind {
        LayerKind::Conv(g) => ("conv", g.c_out),
        LayerKind::DepthwiseConv(g) => ("depthwise", g.c_out),
        _ => unreachable!("conv_block takes a convolution"),
    };
    let c = b.add(format!("{prefix}/{suffix}"), kind, input)?;
    let a = b.add(format!("{prefix}/affine"), LayerKind::Affine { channels }, &c)?;
    b.add(format!("{prefix}/relu6"), LayerKind::Relu6, &a)
}

/// MobileNet-v1 trunk. Every pointwise block is exposed as an endpoint
/// named `Conv2d_<i>_pointwise`.
pub fn build_mobilenet_v1(depth_multiplier: f64, input_size: usize) -> Result<GraphSpec> {
    if !(depth_multiplier.is_finite() && depth_multiplier > 0.0) {
        return Err(Error::Config(format!(
            "depth multiplier must be positive, got {depth_multiplier}"
        )));
    }
    if input_size == 0 {
        return Err(Error::Config("input size must be positive".into()));
    }
    let mut b = GraphBuilder::new([input_size, input_size, 3]);
    let mut channels = scaled_channels(32, depth_multiplier);
    let stem = ConvGeometry::new(3, 3, channels, 2, Padding::Same)?;
    let mut x = conv_block(&mut b, "backbone/Conv2d_0", LayerKind::Conv(stem), GRAPH_INPUT)?;
    b.endpoint("Conv2d_0", &x)?;
    for (i, (&out, &stride)) in MOBILENET_V1_CHANNELS.iter().zip(&MOBILENET_V1_STRIDES).enumerate() {
        let block = i + 1;
        let dw = ConvGeometry::depthwise(3, channels, stride, Padding::Same)?;
        x = conv_block(&mut b, &format!("backbone/Conv2d_{block}_depthwise"), LayerKind::DepthwiseConv(dw), &x)?;
        let out = scaled_channels(out, depth_multiplier);
        let pw = ConvGeometry::new(1, channels, out, 1, Padding::Same)?;
        x = conv_block(&mut b, &format!("backbone/Conv2d_{block}_pointwise"), LayerKind::Conv(pw), &x)?;
        b.endpoint(format!("Conv2d_{block}_pointwise"), &x)?;
        channels = out;
    }
    b.build()
}

/// Four stride-2 `3x3 conv -> affine -> relu6` stages with channels
/// `c, 2c, 4c, 4c`. Endpoints `stage1`..`stage4`; `stage4` sits at
/// `input_size / 16`.
pub fn build_tiny_backbone(input_size: usize, base_channels: usize) -> Result<GraphSpec> {
    if input_size == 0 || input_size % 16 != 0 {
        return Err(Error::Config(format!(
            "tiny backbone input size must be a positive multiple of 16, got {input_size}"
        )));
    }
    if base_channels == 0 {
        return Err(Error::Config("tiny backbone needs at least one base channel".into()));
    }
    let mut b = GraphBuilder::new([input_size, input_size, 3]);
    let mut x = GRAPH_INPUT.to_string();
    let mut c_in = 3;
    for (i, mult) in [1, 2, 4, 4].into_iter().enumerate() {
        let c_out = base_channels * mult;
        let g = ConvGeometry::new(3, c_in, c_out, 2, Padding::Same)?;
        x = conv_block(&mut b, &format!("backbone/stage{}", i + 1), LayerKind::Conv(g), &x)?;
        b.endpoint(format!("stage{}", i + 1), &x)?;
        c_in = c_out;
    }
    b.build()
}

/// Backbone choice plus the endpoints each head reads from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Backbone {
    MobileNetV1 { depth_multiplier: f64 },
    Tiny { base_channels: usize },
}

impl Backbone {
    pub fn build(&self, input_size: usize) -> Result<GraphSpec> {
        match *self {
            Backbone::MobileNetV1 { depth_multiplier } => build_mobilenet_v1(depth_multiplier, input_size),
            Backbone::Tiny { base_channels } => build_tiny_backbone(input_size, base_channels),
        }
    }

    /// Base feature map of the pooling pyramid.
    pub fn pyramid_base(&self) -> &'static str {
        match self {
            Backbone::MobileNetV1 { .. } => "Conv2d_11_pointwise",
            Backbone::Tiny { .. } => "stage3",
        }
    }

    /// The two backbone maps the SSD head predicts from directly, before
    /// its extra layers.
    pub fn ssd_sources(&self) -> [&'static str; 2] {
        match self {
            Backbone::MobileNetV1 { .. } => ["Conv2d_11_pointwise", "Conv2d_13_pointwise"],
            Backbone::Tiny { .. } => ["stage3", "stage4"],
        }
    }
}
