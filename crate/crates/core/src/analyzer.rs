//! Static parameter and FLOP accounting over a [`GraphSpec`].
//!
//! Conventions: a multiply-accumulate is 2 FLOPs; bias adds, affine,
//! activations and max pooling cost nothing. A parameter group shared by
//! several layers is counted at its first use only, while its compute is
//! counted at every use.

use std::collections::HashSet;
use std::fmt::{self, Write as _};

use crate::graph::{GraphSpec, LayerKind, Shape};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerStats {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelStats {
    pub layers: Vec<LayerStats>,
    pub total_params: u64,
    pub total_flops: u64,
}

pub fn layer_params(kind: &LayerKind) -> u64 {
    kind.param_shapes()
        .iter()
        .map(|(_, dims)| dims.iter().product::<usize>() as u64)
        .sum()
}

pub fn layer_flops(kind: &LayerKind, output: Shape) -> u64 {
    let [h, w, _] = output;
    let cells = (h * w) as u64;
    match *kind {
        LayerKind::Conv(g) => 2 * cells * (g.kernel_h * g.kernel_w * g.c_in * g.c_out) as u64,
        LayerKind::DepthwiseConv(g) => 2 * cells * (g.kernel_h * g.kernel_w * g.c_in) as u64,
        LayerKind::Affine { .. } | LayerKind::Relu6 | LayerKind::MaxPool(_) => 0,
    }
}

/// Parameters and inference FLOPs for a batch of one.
pub fn analyze(graph: &GraphSpec) -> ModelStats {
    let mut seen = HashSet::new();
    let layers: Vec<LayerStats> = graph
        .layers()
        .iter()
        .zip(graph.layer_shapes())
        .map(|(l, &shape)| {
            let first_use = l.params.as_ref().is_some_and(|g| seen.insert(g.clone()));
            LayerStats {
                name: l.name.clone(),
                params: if first_use { layer_params(&l.kind) } else { 0 },
                flops: layer_flops(&l.kind, shape),
            }
        })
        .collect();
    ModelStats::from_layers(layers)
}

pub fn count_params(graph: &GraphSpec) -> ModelStats {
    let mut s = analyze(graph);
    s.layers.iter_mut().for_each(|l| l.flops = 0);
    s.total_flops = 0;
    s
}

pub fn count_flops(graph: &GraphSpec) -> ModelStats {
    let mut s = analyze(graph);
    s.layers.iter_mut().for_each(|l| l.params = 0);
    s.total_params = 0;
    s
}

/// First path segment of a layer name (`backbone`, `pyramid`, ...).
pub fn stage_of(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

impl ModelStats {
    pub fn from_layers(layers: Vec<LayerStats>) -> Self {
        let total_params = layers.iter().map(|l| l.params).sum();
        let total_flops = layers.iter().map(|l| l.flops).sum();
        Self { layers, total_params, total_flops }
    }

    /// `(stage, params, flops)` in first-appearance order.
    pub fn stages(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = vec![];
        for l in &self.layers {
            let stage = stage_of(&l.name);
            match out.iter_mut().find(|(s, _, _)| s == stage) {
                Some(entry) => {
                    entry.1 += l.params;
                    entry.2 += l.flops;
                }
                None => out.push((stage.to_string(), l.params, l.flops)),
            }
        }
        out
    }

    /// Parameters of the box predictor(s).
    pub fn head_params(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| stage_of(&l.name) == "predictor")
            .map(|l| l.params)
            .sum()
    }

    /// `key=value` lines for scripts.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        writeln!(s, "param_total={}", self.total_params).unwrap();
        writeln!(s, "flop_total={}", self.total_flops).unwrap();
        writeln!(s, "head_params={}", self.head_params()).unwrap();
        for (stage, p, f) in self.stages() {
            writeln!(s, "stage.{stage}.params={p}").unwrap();
            writeln!(s, "stage.{stage}.flops={f}").unwrap();
        }
        s
    }
}

impl fmt::Display for ModelStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>12}  {:>16}", "layer", "params", "flops")?;
        for l in self.layers.iter().filter(|l| l.params > 0 || l.flops > 0) {
            writeln!(f, "{:<width$}  {:>12}  {:>16}", l.name, l.params, l.flops)?;
        }
        writeln!(f, "{:<width$}  {:>12}  {:>16}", "total", self.total_params, self.total_flops)?;
        writeln!(
            f,
            "total: {:.2}M params, {:.2}B FLOPs",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDelta {
    pub name: String,
    pub params: (u64, u64),
    pub flops: (u64, u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// `a.total_params / b.total_params`.
    pub param_ratio: f64,
    /// `a.total_flops / b.total_flops`.
    pub flop_ratio: f64,
    pub layers: Vec<LayerDelta>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if a == b {
        1.0
    } else if b == 0 {
        f64::INFINITY
    } else {
        a as f64 / b as f64
    }
}

/// Compares `a` against `b`; layers are matched by name, missing layers
/// count as zero.
pub fn compare(a: &ModelStats, b: &ModelStats) -> Comparison {
    let mut names: Vec<&str> = a.layers.iter().map(|l| l.name.as_str()).collect();
    let in_a: HashSet<&str> = names.iter().copied().collect();
    names.extend(b.layers.iter().map(|l| l.name.as_str()).filter(|n| !in_a.contains(n)));
    let find = |s: &ModelStats, n: &str| s.layers.iter().find(|l| l.name == n).map_or((0, 0), |l| (l.params, l.flops));
    let layers = names
        .into_iter()
        .map(|n| {
            let (pa, fa) = find(a, n);
            let (pb, fb) = find(b, n);
            LayerDelta {
                name: n.to_string(),
                params: (pa, pb),
                flops: (fa, fb),
            }
        })
        .collect();
    Comparison {
        param_ratio: ratio(a.total_params, b.total_params),
        flop_ratio: ratio(a.total_flops, b.total_flops),
        layers,
    }
}

impl Comparison {
    pub fn key_values(&self) -> String {
        format!("param_ratio={:.6}\nflop_ratio={:.6}\n", self.param_ratio, self.flop_ratio)
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        writeln!(
            f,
            "{:<width$}  {:>12}  {:>12}  {:>16}  {:>16}",
            "layer", "params(a)", "params(b)", "flops(a)", "flops(b)"
        )?;
        for l in self.layers.iter().filter(|l| l.params != (0, 0) || l.flops != (0, 0)) {
            writeln!(
                f,
                "{:<width$}  {:>12}  {:>12}  {:>16}  {:>16}",
                l.name, l.params.0, l.params.1, l.flops.0, l.flops.1
            )?;
        }
        writeln!(f, "param ratio a/b: {:.3}", self.param_ratio)?;
        writeln!(f, "flop ratio a/b: {:.3}", self.flop_ratio)
    }
}
