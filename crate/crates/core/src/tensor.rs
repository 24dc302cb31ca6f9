//! Dense NHWC tensors and the small differentiable op set used by the
//! backbones and detection heads.
//!
//! All reductions accumulate in `f64` with a fixed order per output cell, so
//! results are bitwise reproducible.

use crate::error::{Error, Result};

/// Rank-4 `f32` tensor in NHWC layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    for c in 0..dims[3] {
                        data.push(f([b, y, x, c]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.dims[1] + y) * self.dims[2] + x) * self.dims[3] + c
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(b, y, x, c)]
    }

    /// Spatial pixel `(b, y, x)` as a channel slice.
    #[inline]
    pub fn pixel(&self, b: usize, y: usize, x: usize) -> &[f32] {
        let start = self.offset(b, y, x, 0);
        &self.data[start..start + self.dims[3]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Extracts batch items `[start, start + count)`.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        if start + count > self.dims[0] {
            return Err(Error::Shape(format!(
                "batch slice {start}..{} out of range for batch {}",
                start + count,
                self.dims[0]
            )));
        }
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor::new(
            [count, self.dims[1], self.dims[2], self.dims[3]],
            self.data[start * per..(start + count) * per].to_vec(),
        )
    }

    fn check_same_dims(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{what}: expected dims {:?}, got {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Valid,
}

/// Output length and leading pad for one spatial axis.
///
/// SAME pads asymmetrically with the odd element on the bottom/right.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config("kernel and stride must be positive".into()));
    }
    if input == 0 {
        return Err(Error::Shape("spatial extent must be positive".into()));
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                return Err(Error::Shape(format!(
                    "VALID window {kernel} larger than input {input}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// Geometry of a dense or depthwise convolution. Weights are laid out
/// `(kh, kw, c_in, c_out)`; depthwise kernels use `c_out == c_in` with a
/// multiplier of one and are stored `(kh, kw, c_in, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(kernel: usize, c_in: usize, c_out: usize, stride: usize, padding: Padding) -> Result<Self> {
        let g = Self {
            kernel_h: kernel,
            kernel_w: kernel,
            c_in,
            c_out,
            stride,
            padding,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn depthwise(kernel: usize, channels: usize, stride: usize, padding: Padding) -> Result<Self> {
        Self::new(kernel, channels, channels, stride, padding)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Config(format!("degenerate convolution {self:?}")));
        }
        if self.stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.c_in * self.c_out
    }

    pub fn depthwise_weight_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.c_in
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (oh, _) = output_extent(h, self.kernel_h, self.stride, self.padding)?;
        let (ow, _) = output_extent(w, self.kernel_w, self.stride, self.padding)?;
        Ok((oh, ow))
    }
}

/// Owned convolution parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub geometry: ConvGeometry,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvParams {
    pub fn new(geometry: ConvGeometry, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if weights.len() != geometry.weight_len() {
            return Err(Error::Shape(format!(
                "conv weights need {} values, got {}",
                geometry.weight_len(),
                weights.len()
            )));
        }
        if bias.len() != geometry.c_out {
            return Err(Error::Shape(format!(
                "conv bias needs {} values, got {}",
                geometry.c_out,
                bias.len()
            )));
        }
        Ok(Self { geometry, weights, bias })
    }

    pub fn zeros(geometry: ConvGeometry) -> Self {
        Self {
            geometry,
            weights: vec![0.0; geometry.weight_len()],
            bias: vec![0.0; geometry.c_out],
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.geometry, &self.weights, &self.bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl PoolParams {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("pool kernel and stride must be positive".into()));
        }
        Ok(Self { kernel, stride, padding })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (oh, _) = output_extent(h, self.kernel, self.stride, self.padding)?;
        let (ow, _) = output_extent(w, self.kernel, self.stride, self.padding)?;
        Ok((oh, ow))
    }
}

struct Window {
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Window {
    fn new(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        let (out_h, pad_top) = output_extent(h, kh, stride, padding)?;
        let (out_w, pad_left) = output_extent(w, kw, stride, padding)?;
        Ok(Self { out_h, out_w, pad_top, pad_left })
    }

    /// Input coordinate for output `o` and tap `k`, if it lands inside `[0, n)`.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < n).then_some(pos)
    }
}

fn check_conv_args(input: &Tensor, g: &ConvGeometry, weight_len: usize, weights: &[f32], bias: &[f32]) -> Result<()> {
    g.validate()?;
    if input.channels() != g.c_in {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            g.c_in,
            input.channels()
        )));
    }
    if weights.len() != weight_len {
        return Err(Error::Shape(format!(
            "conv weights need {weight_len} values, got {}",
            weights.len()
        )));
    }
    if bias.len() != g.c_out {
        return Err(Error::Shape(format!(
            "conv bias needs {} values, got {}",
            g.c_out,
            bias.len()
        )));
    }
    Ok(())
}

/// Dense 2-D convolution.
pub fn conv2d(input: &Tensor, g: &ConvGeometry, weights: &[f32], bias: &[f32]) -> Result<Tensor> {
    check_conv_args(input, g, g.weight_len(), weights, bias)?;
    let [n, h, w, _] = input.dims();
    let win = Window::new(h, w, g.kernel_h, g.kernel_w, g.stride, g.padding)?;
    let (c_in, c_out) = (g.c_in, g.c_out);
    let mut out = Tensor::zeros([n, win.out_h, win.out_w, c_out]);
    let mut acc = vec![0f64; c_out];
    let src = input.data();
    for b in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                for (a, &bv) in acc.iter_mut().zip(bias) {
                    *a = bv as f64;
                }
                for ky in 0..g.kernel_h {
                    let Some(iy) = Window::source(oy, ky, g.stride, win.pad_top, h) else {
                        continue;
                    };
                    for kx in 0..g.kernel_w {
                        let Some(ix) = Window::source(ox, kx, g.stride, win.pad_left, w) else {
                            continue;
                        };
                        let xo = ((b * h + iy) * w + ix) * c_in;
                        let xs = &src[xo..xo + c_in];
                        let wo = (ky * g.kernel_w + kx) * c_in * c_out;
                        let taps = &weights[wo..wo + c_in * c_out];
                        for (&xv, wrow) in xs.iter().zip(taps.chunks_exact(c_out)) {
                            let xv = xv as f64;
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv as f64;
                            }
                        }
                    }
                }
                let oo = out.offset(b, oy, ox, 0);
                for (o, &a) in out.data[oo..oo + c_out].iter_mut().zip(&acc) {
                    *o = a as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Depthwise 2-D convolution with a channel multiplier of one.
pub fn depthwise_conv2d(input: &Tensor, g: &ConvGeometry, weights: &[f32], bias: &[f32]) -> Result<Tensor> {
    if g.c_in != g.c_out {
        return Err(Error::Shape(format!(
            "depthwise conv needs c_in == c_out, got {} and {}",
            g.c_in, g.c_out
        )));
    }
    check_conv_args(input, g, g.depthwise_weight_len(), weights, bias)?;
    let [n, h, w, c] = input.dims();
    let win = Window::new(h, w, g.kernel_h, g.kernel_w, g.stride, g.padding)?;
    let mut out = Tensor::zeros([n, win.out_h, win.out_w, c]);
    let mut acc = vec![0f64; c];
    let src = input.data();
    for b in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                for (a, &bv) in acc.iter_mut().zip(bias) {
                    *a = bv as f64;
                }
                for ky in 0..g.kernel_h {
                    let Some(iy) = Window::source(oy, ky, g.stride, win.pad_top, h) else {
                        continue;
                    };
                    for kx in 0..g.kernel_w {
                        let Some(ix) = Window::source(ox, kx, g.stride, win.pad_left, w) else {
                            continue;
                        };
                        let xo = ((b * h + iy) * w + ix) * c;
                        let wo = (ky * g.kernel_w + kx) * c;
                        for ((a, &xv), &wv) in acc.iter_mut().zip(&src[xo..xo + c]).zip(&weights[wo..wo + c]) {
                            *a += xv as f64 * wv as f64;
                        }
                    }
                }
                let oo = out.offset(b, oy, ox, 0);
                for (o, &a) in out.data[oo..oo + c].iter_mut().zip(&acc) {
                    *o = a as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Max pooling. Padded cells never win; ties keep the first element in
/// row-major window order.
pub fn maxpool2d(input: &Tensor, p: &PoolParams) -> Result<Tensor> {
    Ok(maxpool2d_with_argmax(input, p)?.0)
}

/// Max pooling that also returns, per output element, the flat input index
/// that produced it.
pub fn maxpool2d_with_argmax(input: &Tensor, p: &PoolParams) -> Result<(Tensor, Vec<usize>)> {
    let [n, h, w, c] = input.dims();
    let win = Window::new(h, w, p.kernel, p.kernel, p.stride, p.padding)?;
    let mut out = Tensor::filled([n, win.out_h, win.out_w, c], f32::NEG_INFINITY);
    let mut argmax = vec![usize::MAX; out.len()];
    let src = input.data();
    for b in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let oo = out.offset(b, oy, ox, 0);
                for ky in 0..p.kernel {
                    let Some(iy) = Window::source(oy, ky, p.stride, win.pad_top, h) else {
                        continue;
                    };
                    for kx in 0..p.kernel {
                        let Some(ix) = Window::source(ox, kx, p.stride, win.pad_left, w) else {
                            continue;
                        };
                        let xo = ((b * h + iy) * w + ix) * c;
                        for ch in 0..c {
                            let v = src[xo + ch];
                            // Strict comparison keeps the first maximum.
                            if argmax[oo + ch] == usize::MAX || v > out.data[oo + ch] {
                                out.data[oo + ch] = v;
                                argmax[oo + ch] = xo + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn relu6(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.clamp(0.0, 6.0)).collect();
    Tensor { dims: input.dims(), data }
}

/// Per-channel `x * scale[c] + offset[c]`; the inference-folded form of
/// batch normalization.
pub fn affine_channel(input: &Tensor, scale: &[f32], offset: &[f32]) -> Result<Tensor> {
    let c = input.channels();
    if scale.len() != c || offset.len() != c {
        return Err(Error::Shape(format!(
            "affine expects {c} scale/offset values, got {}/{}",
            scale.len(),
            offset.len()
        )));
    }
    let mut out = input.clone();
    for px in out.data.chunks_exact_mut(c) {
        for ((v, &s), &o) in px.iter_mut().zip(scale).zip(offset) {
            *v = *v * s + o;
        }
    }
    Ok(out)
}

/// Gradients of a dense or depthwise convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

fn check_cotangent(cot: &Tensor, dims: [usize; 4]) -> Result<()> {
    if cot.dims() != dims {
        return Err(Error::Shape(format!(
            "cotangent dims {:?} do not match forward output {dims:?}",
            cot.dims()
        )));
    }
    Ok(())
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn conv2d_vjp(input: &Tensor, g: &ConvGeometry, weights: &[f32], bias: &[f32], cot: &Tensor) -> Result<ConvGrads> {
    check_conv_args(input, g, g.weight_len(), weights, bias)?;
    let [n, h, w, _] = input.dims();
    let win = Window::new(h, w, g.kernel_h, g.kernel_w, g.stride, g.padding)?;
    check_cotangent(cot, [n, win.out_h, win.out_w, g.c_out])?;
    let (c_in, c_out) = (g.c_in, g.c_out);
    let mut dx = vec![0f64; input.len()];
    let mut dw = vec![0f64; weights.len()];
    let mut db = vec![0f64; c_out];
    let src = input.data();
    for b in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let gs = cot.pixel(b, oy, ox);
                for (d, &gv) in db.iter_mut().zip(gs) {
                    *d += gv as f64;
                }
                for ky in 0..g.kernel_h {
                    let Some(iy) = Window::source(oy, ky, g.stride, win.pad_top, h) else {
                        continue;
                    };
                    for kx in 0..g.kernel_w {
                        let Some(ix) = Window::source(ox, kx, g.stride, win.pad_left, w) else {
                            continue;
                        };
                        let xo = ((b * h + iy) * w + ix) * c_in;
                        let wo = (ky * g.kernel_w + kx) * c_in * c_out;
                        for ci in 0..c_in {
                            let xv = src[xo + ci] as f64;
                            let row = wo + ci * c_out;
                            let wrow = &weights[row..row + c_out];
                            let dwrow = &mut dw[row..row + c_out];
                            let mut s = 0f64;
                            for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(gs) {
                                let gv = gv as f64;
                                s += wv as f64 * gv;
                                *dwv += xv * gv;
                            }
                            dx[xo + ci] += s;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.dims(), to_f32(&dx))?,
        weights: to_f32(&dw),
        bias: to_f32(&db),
    })
}

pub fn depthwise_conv2d_vjp(
    input: &Tensor,
    g: &ConvGeometry,
    weights: &[f32],
    bias: &[f32],
    cot: &Tensor,
) -> Result<ConvGrads> {
    check_conv_args(input, g, g.depthwise_weight_len(), weights, bias)?;
    let [n, h, w, c] = input.dims();
    let win = Window::new(h, w, g.kernel_h, g.kernel_w, g.stride, g.padding)?;
    check_cotangent(cot, [n, win.out_h, win.out_w, c])?;
    let mut dx = vec![0f64; input.len()];
    let mut dw = vec![0f64; weights.len()];
    let mut db = vec![0f64; c];
    let src = input.data();
    for b in 0..n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let gs = cot.pixel(b, oy, ox);
                for (d, &gv) in db.iter_mut().zip(gs) {
                    *d += gv as f64;
                }
                for ky in 0..g.kernel_h {
                    let Some(iy) = Window::source(oy, ky, g.stride, win.pad_top, h) else {
                        continue;
                    };
                    for kx in 0..g.kernel_w {
                        let Some(ix) = Window::source(ox, kx, g.stride, win.pad_left, w) else {
                            continue;
                        };
                        let xo = ((b * h + iy) * w + ix) * c;
                        let wo = (ky * g.kernel_w + kx) * c;
                        for ch in 0..c {
                            let gv = gs[ch] as f64;
                            dx[xo + ch] += weights[wo + ch] as f64 * gv;
                            dw[wo + ch] += src[xo + ch] as f64 * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.dims(), to_f32(&dx))?,
        weights: to_f32(&dw),
        bias: to_f32(&db),
    })
}

/// Routes each output cotangent to the element that won the forward max.
pub fn maxpool2d_vjp(input: &Tensor, p: &PoolParams, cot: &Tensor) -> Result<Tensor> {
    let (out, argmax) = maxpool2d_with_argmax(input, p)?;
    maxpool2d_vjp_from_argmax(input.dims(), &argmax, out.dims(), cot)
}

pub fn maxpool2d_vjp_from_argmax(
    input_dims: [usize; 4],
    argmax: &[usize],
    output_dims: [usize; 4],
    cot: &Tensor,
) -> Result<Tensor> {
    check_cotangent(cot, output_dims)?;
    let mut dx = vec![0f64; input_dims.iter().product()];
    for (&src, &gv) in argmax.iter().zip(cot.data()) {
        dx[src] += gv as f64;
    }
    Tensor::new(input_dims, to_f32(&dx))
}

pub fn relu6_vjp(input: &Tensor, cot: &Tensor) -> Result<Tensor> {
    check_cotangent(cot, input.dims())?;
    let data = input
        .data()
        .iter()
        .zip(cot.data())
        .map(|(&x, &g)| if x > 0.0 && x < 6.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.dims(), data)
}

#[derive(Clone, Debug)]
pub struct AffineGrads {
    pub input: Tensor,
    pub scale: Vec<f32>,
    pub offset: Vec<f32>,
}

pub fn affine_channel_vjp(input: &Tensor, scale: &[f32], offset: &[f32], cot: &Tensor) -> Result<AffineGrads> {
    let c = input.channels();
    if scale.len() != c || offset.len() != c {
        return Err(Error::Shape(format!(
            "affine expects {c} scale/offset values, got {}/{}",
            scale.len(),
            offset.len()
        )));
    }
    check_cotangent(cot, input.dims())?;
    let mut ds = vec![0f64; c];
    let mut doff = vec![0f64; c];
    let mut dx = Vec::with_capacity(input.len());
    for (xs, gs) in input.data().chunks_exact(c).zip(cot.data().chunks_exact(c)) {
        for ch in 0..c {
            let gv = gs[ch];
            ds[ch] += xs[ch] as f64 * gv as f64;
            doff[ch] += gv as f64;
            dx.push(gv * scale[ch]);
        }
    }
    Ok(AffineGrads {
        input: Tensor::new(input.dims(), dx)?,
        scale: to_f32(&ds),
        offset: to_f32(&doff),
    })
}

/// A single differentiable op bound to borrowed parameters.
#[derive(Clone, Copy, Debug)]
pub enum Op<'a> {
    Conv2d {
        geometry: ConvGeometry,
        weights: &'a [f32],
        bias: &'a [f32],
    },
    DepthwiseConv2d {
        geometry: ConvGeometry,
        weights: &'a [f32],
        bias: &'a [f32],
    },
    MaxPool(PoolParams),
    Relu6,
    AffineChannel {
        scale: &'a [f32],
        offset: &'a [f32],
    },
}

/// Reverse-mode gradients of an [`Op`]: the input cotangent plus one vector
/// per parameter, in the order the op borrows them.
#[derive(Clone, Debug)]
pub struct OpGrads {
    pub input: Tensor,
    pub params: Vec<Vec<f32>>,
}

impl Op<'_> {
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match *self {
            Op::Conv2d { geometry, weights, bias } => conv2d(input, &geometry, weights, bias),
            Op::DepthwiseConv2d { geometry, weights, bias } => depthwise_conv2d(input, &geometry, weights, bias),
            Op::MaxPool(p) => maxpool2d(input, &p),
            Op::Relu6 => Ok(relu6(input)),
            Op::AffineChannel { scale, offset } => affine_channel(input, scale, offset),
        }
    }

    pub fn vjp(&self, input: &Tensor, cot: &Tensor) -> Result<OpGrads> {
        match *self {
            Op::Conv2d { geometry, weights, bias } => {
                let g = conv2d_vjp(input, &geometry, weights, bias, cot)?;
                Ok(OpGrads { input: g.input, params: vec![g.weights, g.bias] })
            }
            Op::DepthwiseConv2d { geometry, weights, bias } => {
                let g = depthwise_conv2d_vjp(input, &geometry, weights, bias, cot)?;
                Ok(OpGrads { input: g.input, params: vec![g.weights, g.bias] })
            }
            Op::MaxPool(p) => Ok(OpGrads { input: maxpool2d_vjp(input, &p, cot)?, params: vec![] }),
            Op::Relu6 => Ok(OpGrads { input: relu6_vjp(input, cot)?, params: vec![] }),
            Op::AffineChannel { scale, offset } => {
                let g = affine_channel_vjp(input, scale, offset, cot)?;
                Ok(OpGrads { input: g.input, params: vec![g.scale, g.offset] })
            }
        }
    }
}

/// Elementwise `a += b`.
pub fn add_assign(a: &mut Tensor, b: &Tensor) -> Result<()> {
    a.check_same_dims(b, "add_assign")?;
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2x2() -> Tensor {
        Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn tensor_rejects_wrong_length() {
        assert!(Tensor::new([1, 2, 2, 1], vec![1.0; 3]).is_err());
    }

    #[test]
    fn identity_pointwise_conv() {
        let g = ConvGeometry::new(1, 4, 4, 1, Padding::Same).unwrap();
        let mut wts = vec![0.0; 16];
        for i in 0..4 {
            wts[i * 4 + i] = 1.0;
        }
        let x = Tensor::from_fn([2, 3, 5, 4], |[b, y, x, c]| (b * 7 + y * 3 + x * 11 + c) as f32 * 0.1 - 2.0);
        let y = conv2d(&x, &g, &wts, &[0.0; 4]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn valid_conv_sums_window() {
        let g = ConvGeometry::new(2, 1, 1, 1, Padding::Valid).unwrap();
        let y = conv2d(&t2x2(), &g, &[1.0; 4], &[0.0]).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn same_stride2_on_19_gives_10() {
        let g = ConvGeometry::new(3, 1, 1, 2, Padding::Same).unwrap();
        let y = conv2d(&Tensor::zeros([1, 19, 19, 1]), &g, &[0.0; 9], &[0.0]).unwrap();
        assert_eq!((y.height(), y.width()), (10, 10));
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_zero_stride() {
        let g = ConvGeometry::new(1, 3, 2, 1, Padding::Same).unwrap();
        assert!(conv2d(&Tensor::zeros([1, 2, 2, 4]), &g, &[0.0; 6], &[0.0; 2]).is_err());
        assert!(ConvGeometry::new(1, 3, 2, 0, Padding::Same).is_err());
        assert!(PoolParams::new(2, 0, Padding::Same).is_err());
    }

    #[test]
    fn depthwise_zero_and_single_channel() {
        let g = ConvGeometry::depthwise(3, 5, 1, Padding::Same).unwrap();
        let x = Tensor::from_fn([1, 4, 4, 5], |[_, y, x, c]| (y + x + c) as f32);
        let y = depthwise_conv2d(&x, &g, &vec![0.0; 45], &[0.0; 5]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g1 = ConvGeometry::depthwise(3, 1, 2, Padding::Same).unwrap();
        let w: Vec<f32> = (0..9).map(|i| i as f32 * 0.3 - 1.0).collect();
        let x1 = Tensor::from_fn([2, 5, 5, 1], |[b, y, x, _]| (b + 2 * y + 3 * x) as f32 * 0.25);
        assert_eq!(
            depthwise_conv2d(&x1, &g1, &w, &[0.5]).unwrap(),
            conv2d(&x1, &g1, &w, &[0.5]).unwrap()
        );
    }

    #[test]
    fn depthwise_valid_per_channel_sums() {
        let x = Tensor::from_fn([1, 3, 3, 2], |[_, y, x, c]| ((y * 3 + x) * (c + 1)) as f32);
        let g = ConvGeometry::depthwise(3, 2, 1, Padding::Valid).unwrap();
        let y = depthwise_conv2d(&x, &g, &[1.0; 18], &[0.0; 2]).unwrap();
        // Oracle: plain sum over every element of each channel.
        let mut sums = [0.0f32; 2];
        for (i, v) in x.data().iter().enumerate() {
            sums[i % 2] += v;
        }
        assert_eq!(y.data(), &sums);
    }

    #[test]
    fn maxpool_examples() {
        let p = PoolParams::new(2, 2, Padding::Same).unwrap();
        assert_eq!(maxpool2d(&t2x2(), &p).unwrap().data(), &[4.0]);
        let c = Tensor::filled([1, 7, 7, 3], 2.5);
        assert!(maxpool2d(&c, &p).unwrap().data().iter().all(|&v| v == 2.5));
        let mut t = Tensor::zeros([1, 19, 19, 1]);
        let mut sizes = vec![];
        for _ in 0..5 {
            t = maxpool2d(&t, &p).unwrap();
            sizes.push(t.height());
        }
        assert_eq!(sizes, [10, 5, 3, 2, 1]);
    }

    #[test]
    fn maxpool_padding_never_wins() {
        let p = PoolParams::new(2, 2, Padding::Same).unwrap();
        let x = Tensor::filled([1, 3, 3, 1], -5.0);
        assert!(maxpool2d(&x, &p).unwrap().data().iter().all(|&v| v == -5.0));
    }

    #[test]
    fn relu6_values() {
        let x = Tensor::new([1, 1, 1, 3], vec![-1.0, 3.0, 10.0]).unwrap();
        assert_eq!(relu6(&x).data(), &[0.0, 3.0, 6.0]);
        let g = relu6_vjp(&x, &Tensor::filled([1, 1, 1, 3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn affine_values() {
        let x = Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(affine_channel(&x, &[2.0], &[1.0]).unwrap().data(), &[7.0]);
        let y = Tensor::from_fn([1, 2, 2, 3], |[_, a, b, c]| (a + b * c) as f32);
        assert_eq!(affine_channel(&y, &[1.0; 3], &[0.0; 3]).unwrap(), y);
        assert!(affine_channel(&y, &[1.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax() {
        let p = PoolParams::new(2, 2, Padding::Same).unwrap();
        let g = maxpool2d_vjp(&t2x2(), &p, &Tensor::filled([1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
        // Ties go to the first element in row-major order.
        let tie = Tensor::filled([1, 2, 2, 1], 1.0);
        let g = maxpool2d_vjp(&tie, &p, &Tensor::filled([1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn vjp_rejects_bad_cotangent() {
        let p = PoolParams::new(2, 2, Padding::Same).unwrap();
        assert!(maxpool2d_vjp(&t2x2(), &p, &Tensor::zeros([1, 2, 2, 1])).is_err());
        assert!(relu6_vjp(&t2x2(), &Tensor::zeros([1, 1, 2, 2])).is_err());
    }
}
