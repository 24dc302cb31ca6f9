//! Declarative network graphs: an ordered list of single-input layers, each
//! optionally bound to a named parameter group in a [`WeightStore`].
//!
//! Several layers may reference the same parameter group; that is how the
//! shared box predictor is expressed. Shape inference, forward execution, and
//! reverse-mode gradients all run over the same spec.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    self, ConvGeometry, Op, PoolParams, Tensor,
};
use crate::weights::{Param, WeightStore};

/// Name by which the first layer refers to the graph input.
pub const GRAPH_INPUT: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv(ConvGeometry),
    DepthwiseConv(ConvGeometry),
    Affine { channels: usize },
    Relu6,
    MaxPool(PoolParams),
}

impl LayerKind {
    /// Parameter tensors this kind owns: `(suffix, dims)`.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Conv(g) => vec![
                ("weights", vec![g.kernel_h, g.kernel_w, g.c_in, g.c_out]),
                ("bias", vec![g.c_out]),
            ],
            LayerKind::DepthwiseConv(g) => vec![
                ("weights", vec![g.kernel_h, g.kernel_w, g.c_in, 1]),
                ("bias", vec![g.c_in]),
            ],
            LayerKind::Affine { channels } => vec![("scale", vec![channels]), ("offset", vec![channels])],
            LayerKind::Relu6 | LayerKind::MaxPool(_) => vec![],
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::DepthwiseConv(_) | LayerKind::Affine { .. })
    }

    /// Output `(h, w, c)` for an input of `(h, w, c)`.
    pub fn output_shape(&self, shape: Shape) -> Result<Shape> {
        let [h, w, c] = shape;
        match *self {
            LayerKind::Conv(g) => {
                check_channels(g.c_in, c, "conv")?;
                let (oh, ow) = g.output_hw(h, w)?;
                Ok([oh, ow, g.c_out])
            }
            LayerKind::DepthwiseConv(g) => {
                check_channels(g.c_in, c, "depthwise conv")?;
                if g.c_out != g.c_in {
                    return Err(Error::Graph("depthwise conv needs c_out == c_in".into()));
                }
                let (oh, ow) = g.output_hw(h, w)?;
                Ok([oh, ow, c])
            }
            LayerKind::Affine { channels } => {
                check_channels(channels, c, "affine")?;
                Ok(shape)
            }
            LayerKind::Relu6 => Ok(shape),
            LayerKind::MaxPool(p) => {
                let (oh, ow) = p.output_hw(h, w)?;
                Ok([oh, ow, c])
            }
        }
    }
}

fn check_channels(expected: usize, actual: usize, what: &str) -> Result<()> {
    if expected != actual {
        return Err(Error::Graph(format!(
            "{what} expects {expected} input channels, got {actual}"
        )));
    }
    Ok(())
}

/// `(height, width, channels)` of one activation, batch excluded.
pub type Shape = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input: String,
    /// Parameter group; `None` for parameter-free layers.
    pub params: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Endpoint {
    pub name: String,
    pub layer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    input_dims: Shape,
    layers: Vec<LayerSpec>,
    endpoints: Vec<Endpoint>,
    shapes: Vec<Shape>,
    inputs: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct GraphBuilder {
    input_dims: Shape,
    layers: Vec<LayerSpec>,
    endpoints: Vec<Endpoint>,
    shapes: Vec<Shape>,
    index: HashMap<String, usize>,
}

impl GraphBuilder {
    pub fn new(input_dims: Shape) -> Self {
        Self {
            input_dims,
            layers: vec![],
            endpoints: vec![],
            shapes: vec![],
            index: HashMap::new(),
        }
    }

    /// Output shape of a layer (or the graph input) already added.
    pub fn shape_of(&self, name: &str) -> Result<Shape> {
        if name == GRAPH_INPUT {
            return Ok(self.input_dims);
        }
        self.index
            .get(name)
            .map(|&i| self.shapes[i])
            .ok_or_else(|| Error::Graph(format!("unknown layer `{name}`")))
    }

    /// Adds a layer whose parameters (if any) are private to it.
    pub fn add(&mut self, name: impl Into<String>, kind: LayerKind, input: &str) -> Result<String> {
        let name = name.into();
        let params = kind.has_params().then(|| name.clone());
        self.push(name, kind, input, params)
    }

    /// Adds a layer bound to the parameter group `params`, which other
    /// layers may share.
    pub fn add_shared(&mut self, name: impl Into<String>, kind: LayerKind, input: &str, params: &str) -> Result<String> {
        if !kind.has_params() {
            return Err(Error::Graph(format!("{kind:?} has no parameters to share")));
        }
        self.push(name.into(), kind, input, Some(params.to_string()))
    }

    fn push(&mut self, name: String, kind: LayerKind, input: &str, params: Option<String>) -> Result<String> {
        if name == GRAPH_INPUT || self.index.contains_key(&name) {
            return Err(Error::Graph(format!("duplicate layer name `{name}`")));
        }
        let in_shape = self.shape_of(input)?;
        let out = kind
            .output_shape(in_shape)
            .map_err(|e| Error::Graph(format!("layer `{name}`: {e}")))?;
        if let Some(group) = &params {
            if let Some(other) = self.layers.iter().find(|l| l.params.as_deref() == Some(group)) {
                if other.kind.param_shapes() != kind.param_shapes() {
                    return Err(Error::Graph(format!(
                        "layer `{name}` shares `{group}` with `{}` but parameter shapes differ",
                        other.name
                    )));
                }
            }
        }
        self.index.insert(name.clone(), self.layers.len());
        self.layers.push(LayerSpec {
            name: name.clone(),
            kind,
            input: input.to_string(),
            params,
        });
        self.shapes.push(out);
        Ok(name)
    }

    pub fn endpoint(&mut self, name: impl Into<String>, layer: &str) -> Result<()> {
        let name = name.into();
        if !self.index.contains_key(layer) {
            return Err(Error::Graph(format!("endpoint `{name}` refers to unknown layer `{layer}`")));
        }
        if self.endpoints.iter().any(|e| e.name == name) {
            return Err(Error::Graph(format!("duplicate endpoint `{name}`")));
        }
        self.endpoints.push(Endpoint { name, layer: layer.to_string() });
        Ok(())
    }

    pub fn build(self) -> Result<GraphSpec> {
        let inputs = self
            .layers
            .iter()
            .map(|l| if l.input == GRAPH_INPUT { None } else { Some(self.index[&l.input]) })
            .collect();
        Ok(GraphSpec {
            input_dims: self.input_dims,
            layers: self.layers,
            endpoints: self.endpoints,
            shapes: self.shapes,
            inputs,
        })
    }
}

/// Activations recorded by [`GraphSpec::forward_trace`] for reverse mode.
#[derive(Clone, Debug)]
pub struct Trace {
    input: Tensor,
    outputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl Trace {
    pub fn layer_output(&self, index: usize) -> &Tensor {
        &self.outputs[index]
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: WeightStore,
    pub input: Tensor,
}

impl GraphSpec {
    pub fn input_dims(&self) -> Shape {
        self.input_dims
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    /// Output shape of every layer, computed without weights.
    pub fn layer_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Input shape of layer `i`.
    pub fn input_shape(&self, i: usize) -> Shape {
        self.inputs[i].map_or(self.input_dims, |j| self.shapes[j])
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn endpoint(&self, name: &str) -> Option<&Endpoint> {
        self.endpoints.iter().find(|e| e.name == name)
    }

    pub fn endpoint_shape(&self, name: &str) -> Result<Shape> {
        let e = self
            .endpoint(name)
            .ok_or_else(|| Error::Graph(format!("unknown endpoint `{name}`")))?;
        let i = self.layer_index(&e.layer).expect("endpoints validated at build");
        Ok(self.shapes[i])
    }

    /// Reopens the graph for extension.
    pub fn into_builder(self) -> GraphBuilder {
        let index = self.layers.iter().enumerate().map(|(i, l)| (l.name.clone(), i)).collect();
        GraphBuilder {
            input_dims: self.input_dims,
            layers: self.layers,
            endpoints: self.endpoints,
            shapes: self.shapes,
            index,
        }
    }

    /// Keeps only the layers needed to compute `keep`, which become the
    /// graph's endpoints.
    pub fn prune(&self, keep: &[&str]) -> Result<GraphSpec> {
        let mut needed = vec![false; self.layers.len()];
        for name in keep {
            let e = self
                .endpoint(name)
                .ok_or_else(|| Error::Graph(format!("unknown endpoint `{name}`")))?;
            needed[self.layer_index(&e.layer).expect("validated")] = true;
        }
        for i in (0..self.layers.len()).rev() {
            if needed[i] {
                if let Some(j) = self.inputs[i] {
                    needed[j] = true;
                }
            }
        }
        let mut b = GraphBuilder::new(self.input_dims);
        for (l, _) in self.layers.iter().zip(&needed).filter(|(_, &n)| n) {
            b.push(l.name.clone(), l.kind, &l.input, l.params.clone())?;
        }
        for e in self.endpoints.iter().filter(|e| keep.contains(&e.name.as_str())) {
            b.endpoint(e.name.clone(), &e.layer)?;
        }
        b.build()
    }

    /// Every distinct parameter tensor `(full name, dims)` in first-use order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut seen = HashSet::new();
        let mut out = vec![];
        for l in &self.layers {
            if let Some(group) = &l.params {
                if seen.insert(group.clone()) {
                    for (suffix, dims) in l.kind.param_shapes() {
                        out.push((format!("{group}/{suffix}"), dims));
                    }
                }
            }
        }
        out
    }

    /// Fan-in scaled uniform init: conv weights `U(-b, b)` with
    /// `b = gain * sqrt(3 / fan_in)`, zero biases and offsets, unit scales.
    pub fn init_weights<R: Rng>(&self, rng: &mut R, gain: f32) -> WeightStore {
        let mut store = WeightStore::new();
        for (name, dims) in self.param_shapes() {
            let n: usize = dims.iter().product();
            let data = if name.ends_with("/weights") {
                // (kh, kw, c_in, c_out): depthwise kernels have c_out == 1 and
                // a fan-in of kh*kw.
                let fan_in = if dims[3] == 1 { dims[0] * dims[1] } else { dims[0] * dims[1] * dims[2] };
                let bound = gain * (3.0 / fan_in as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else if name.ends_with("/scale") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            store.insert(name, Param::new(dims, data).expect("dims match"));
        }
        store
    }

    fn bind<'a>(&self, layer: &LayerSpec, weights: &'a WeightStore) -> Result<Op<'a>> {
        let group = layer.params.as_deref().unwrap_or("");
        let get = |suffix: &str, dims: &[usize]| weights.expect(&format!("{group}/{suffix}"), dims);
        Ok(match layer.kind {
            LayerKind::Conv(g) => Op::Conv2d {
                geometry: g,
                weights: get("weights", &[g.kernel_h, g.kernel_w, g.c_in, g.c_out])?,
                bias: get("bias", &[g.c_out])?,
            },
            LayerKind::DepthwiseConv(g) => Op::DepthwiseConv2d {
                geometry: g,
                weights: get("weights", &[g.kernel_h, g.kernel_w, g.c_in, 1])?,
                bias: get("bias", &[g.c_in])?,
            },
            LayerKind::Affine { channels } => Op::AffineChannel {
                scale: get("scale", &[channels])?,
                offset: get("offset", &[channels])?,
            },
            LayerKind::Relu6 => Op::Relu6,
            LayerKind::MaxPool(p) => Op::MaxPool(p),
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let [n, h, w, c] = input.dims();
        if n == 0 || [h, w, c] != self.input_dims {
            return Err(Error::Shape(format!(
                "graph expects input N x {:?}, got {:?}",
                self.input_dims,
                input.dims()
            )));
        }
        Ok(())
    }

    /// Number of later layers reading each layer, plus one per endpoint.
    fn consumers(&self) -> Vec<usize> {
        let mut uses = vec![0usize; self.layers.len()];
        for j in self.inputs.iter().flatten() {
            uses[*j] += 1;
        }
        for e in &self.endpoints {
            uses[self.layer_index(&e.layer).expect("validated")] += 1;
        }
        uses
    }

    /// Forward pass returning endpoint tensors by name.
    pub fn execute(&self, weights: &WeightStore, input: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        self.run(weights, input, None)
    }

    /// Forward pass that also reports the wall-clock time of every layer.
    pub fn execute_profiled(
        &self,
        weights: &WeightStore,
        input: &Tensor,
    ) -> Result<(BTreeMap<String, Tensor>, Vec<Duration>)> {
        let mut times = vec![Duration::ZERO; self.layers.len()];
        let out = self.run(weights, input, Some(&mut times))?;
        Ok((out, times))
    }

    fn run(
        &self,
        weights: &WeightStore,
        input: &Tensor,
        mut times: Option<&mut Vec<Duration>>,
    ) -> Result<BTreeMap<String, Tensor>> {
        self.check_input(input)?;
        let ops = self
            .layers
            .iter()
            .map(|l| self.bind(l, weights))
            .collect::<Result<Vec<_>>>()?;
        let mut remaining = self.consumers();
        let mut values: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        for (i, op) in ops.iter().enumerate() {
            let start = Instant::now();
            let x = match self.inputs[i] {
                None => input,
                Some(j) => values[j].as_ref().expect("input computed before use"),
            };
            let y = op.forward(x)?;
            if let Some(t) = times.as_deref_mut() {
                t[i] = start.elapsed();
            }
            if let Some(j) = self.inputs[i] {
                remaining[j] -= 1;
                if remaining[j] == 0 {
                    values[j] = None;
                }
            }
            values[i] = Some(y);
        }
        let mut out = BTreeMap::new();
        for e in &self.endpoints {
            let i = self.layer_index(&e.layer).expect("validated");
            out.insert(e.name.clone(), values[i].clone().expect("endpoint retained"));
        }
        Ok(out)
    }

    /// Forward pass keeping every activation for [`GraphSpec::backward`].
    pub fn forward_trace(&self, weights: &WeightStore, input: &Tensor) -> Result<Trace> {
        self.check_input(input)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let x = match self.inputs[i] {
                None => input,
                Some(j) => &outputs[j],
            };
            let (y, am) = match l.kind {
                LayerKind::MaxPool(p) => {
                    let (y, am) = tensor::maxpool2d_with_argmax(x, &p)?;
                    (y, Some(am))
                }
                _ => (self.bind(l, weights)?.forward(x)?, None),
            };
            outputs.push(y);
            argmax.push(am);
        }
        Ok(Trace {
            input: input.clone(),
            outputs,
            argmax,
        })
    }

    pub fn trace_endpoint<'t>(&self, trace: &'t Trace, name: &str) -> Result<&'t Tensor> {
        let e = self
            .endpoint(name)
            .ok_or_else(|| Error::Graph(format!("unknown endpoint `{name}`")))?;
        Ok(&trace.outputs[self.layer_index(&e.layer).expect("validated")])
    }

    /// Reverse-mode pass. `cotangents` maps endpoint names to the gradient of
    /// the objective with respect to that endpoint; missing endpoints
    /// contribute nothing. Gradients of shared parameter groups accumulate
    /// over every layer that uses them.
    pub fn backward(
        &self,
        weights: &WeightStore,
        trace: &Trace,
        cotangents: &BTreeMap<String, Tensor>,
    ) -> Result<Gradients> {
        let mut grads = self.zero_grads();
        let mut cots: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        for (name, cot) in cotangents {
            let e = self
                .endpoint(name)
                .ok_or_else(|| Error::Graph(format!("unknown endpoint `{name}`")))?;
            let i = self.layer_index(&e.layer).expect("validated");
            accumulate(&mut cots[i], cot)?;
        }
        let mut input_cot: Option<Tensor> = None;
        for i in (0..self.layers.len()).rev() {
            let Some(cot) = cots[i].take() else { continue };
            let layer = &self.layers[i];
            let x = match self.inputs[i] {
                None => &trace.input,
                Some(j) => &trace.outputs[j],
            };
            let (dx, dparams) = match layer.kind {
                LayerKind::MaxPool(_) => {
                    let am = trace.argmax[i].as_ref().expect("maxpool argmax traced");
                    let dx = tensor::maxpool2d_vjp_from_argmax(x.dims(), am, trace.outputs[i].dims(), &cot)?;
                    (dx, vec![])
                }
                _ => {
                    let g = self.bind(layer, weights)?.vjp(x, &cot)?;
                    (g.input, g.params)
                }
            };
            if let Some(group) = &layer.params {
                for ((suffix, _), d) in layer.kind.param_shapes().into_iter().zip(dparams) {
                    let p = grads
                        .get_mut(&format!("{group}/{suffix}"))
                        .expect("grad store covers every group");
                    for (a, b) in p.data_mut().iter_mut().zip(d) {
                        *a += b;
                    }
                }
            }
            match self.inputs[i] {
                None => accumulate(&mut input_cot, &dx)?,
                Some(j) => accumulate(&mut cots[j], &dx)?,
            }
        }
        let input = input_cot.unwrap_or_else(|| Tensor::zeros(trace.input.dims()));
        Ok(Gradients { params: grads, input })
    }

    fn zero_grads(&self) -> WeightStore {
        let mut store = WeightStore::new();
        for (name, dims) in self.param_shapes() {
            store.insert(name, Param::zeros(dims));
        }
        store
    }
}

fn accumulate(slot: &mut Option<Tensor>, value: &Tensor) -> Result<()> {
    match slot {
        Some(t) => tensor::add_assign(t, value),
        None => {
            *slot = Some(value.clone());
            Ok(())
        }
    }
}
