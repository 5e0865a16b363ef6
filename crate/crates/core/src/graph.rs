//! Declarative layer graph.
//!
//! Composite blocks (shuffle units, CSP dense blocks, SPP) are expanded into
//! primitive layers whose ids share the block's prefix, e.g.
//! `backbone.stage3.u2.pw1`. The pseudo-id [`INPUT`] names the graph input.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::error::{Error, Result};

pub const INPUT: &str = "input";

/// Spatial/channel extent of one feature map, batch excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct FeatShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        FeatShape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for FeatShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Batch-normed convolution with padding `kernel / 2`.
    Conv { c_out: usize, kernel: usize, stride: usize, groups: usize, leaky: bool },
    /// Batch-normed depthwise convolution, no activation.
    DwConv { kernel: usize, stride: usize },
    Shuffle { groups: usize },
    /// Channels `[start, start + len)` of the input.
    SplitTake { start: usize, len: usize },
    Concat,
    MaxPool { kernel: usize, stride: usize },
    Upsample,
    /// 1x1 prediction conv with bias; `anchors * (5 + classes)` outputs.
    Detect { anchors: usize, classes: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::DwConv { .. } => "dwconv",
            LayerKind::Shuffle { .. } => "shuffle",
            LayerKind::SplitTake { .. } => "split_take",
            LayerKind::Concat => "concat",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Upsample => "upsample",
            LayerKind::Detect { .. } => "detect",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::DwConv { .. } | LayerKind::Detect { .. })
    }

    /// Dims of the single weight entry backing this layer: one row per
    /// output channel holding the kernel followed by the folded affine
    /// (`scale, shift`) or, for detect layers, the bias.
    pub fn weight_dims(&self, input: FeatShape) -> Option<[usize; 2]> {
        match *self {
            LayerKind::Conv { c_out, kernel, groups, .. } => Some([c_out, input.c / groups * kernel * kernel + 2]),
            LayerKind::DwConv { kernel, .. } => Some([input.c, kernel * kernel + 2]),
            LayerKind::Detect { anchors, classes } => Some([anchors * (5 + classes), input.c + 1]),
            _ => None,
        }
    }

    /// Multiplicative kernel weights, i.e. parameters excluding affine/bias.
    pub fn kernel_weights(&self, input: FeatShape) -> usize {
        match *self {
            LayerKind::Conv { c_out, kernel, groups, .. } => input.c / groups * c_out * kernel * kernel,
            LayerKind::DwConv { kernel, .. } => input.c * kernel * kernel,
            LayerKind::Detect { anchors, classes } => input.c * anchors * (5 + classes),
            _ => 0,
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            LayerKind::Concat => n >= 2,
            _ => n == 1,
        }
    }

    fn hyperparams(&self) -> Vec<(&'static str, usize)> {
        match *self {
            LayerKind::Conv { c_out, kernel, stride, groups, leaky } => vec![
                ("c_out", c_out),
                ("k", kernel),
                ("s", stride),
                ("g", groups),
                ("leaky", leaky as usize),
            ],
            LayerKind::DwConv { kernel, stride } => vec![("k", kernel), ("s", stride)],
            LayerKind::Shuffle { groups } => vec![("g", groups)],
            LayerKind::SplitTake { start, len } => vec![("start", start), ("len", len)],
            LayerKind::Concat | LayerKind::Upsample => vec![],
            LayerKind::MaxPool { kernel, stride } => vec![("k", kernel), ("s", stride)],
            LayerKind::Detect { anchors, classes } => vec![("anchors", anchors), ("classes", classes)],
        }
    }

    fn from_parts(kind: &str, hp: &HashMap<&str, usize>) -> std::result::Result<Self, String> {
        let get = |k: &str| hp.get(k).copied().ok_or_else(|| format!("{kind}: missing hyperparameter `{k}`"));
        Ok(match kind {
            "conv" => LayerKind::Conv {
                c_out: get("c_out")?,
                kernel: get("k")?,
                stride: get("s")?,
                groups: get("g")?,
                leaky: get("leaky")? != 0,
            },
            "dwconv" => LayerKind::DwConv { kernel: get("k")?, stride: get("s")? },
            "shuffle" => LayerKind::Shuffle { groups: get("g")? },
            "split_take" => LayerKind::SplitTake { start: get("start")?, len: get("len")? },
            "concat" => LayerKind::Concat,
            "maxpool" => LayerKind::MaxPool { kernel: get("k")?, stride: get("s")? },
            "upsample" => LayerKind::Upsample,
            "detect" => LayerKind::Detect { anchors: get("anchors")?, classes: get("classes")? },
            other => return Err(format!("unknown layer kind `{other}`")),
        })
    }

    /// Output extent given the input extents, or why the layer cannot apply.
    pub fn output_shape(&self, inputs: &[FeatShape]) -> std::result::Result<FeatShape, String> {
        let x = inputs[0];
        let spatial = |k: usize, s: usize| -> std::result::Result<(usize, usize), String> {
            let pad = k / 2;
            let h = crate::ops::conv_out_dim(x.h, k, s, pad);
            let w = crate::ops::conv_out_dim(x.w, k, s, pad);
            match (h, w) {
                (Some(h), Some(w)) => Ok((h, w)),
                _ => Err(format!("kernel {k} stride {s} does not fit {x}")),
            }
        };
        match *self {
            LayerKind::Conv { c_out, kernel, stride, groups, .. } => {
                if kernel == 0 || stride == 0 || groups == 0 || c_out == 0 {
                    return Err("conv hyperparameters must be >= 1".into());
                }
                if x.c % groups != 0 || c_out % groups != 0 {
                    return Err(format!("groups {groups} must divide c_in {} and c_out {c_out}", x.c));
                }
                let (h, w) = spatial(kernel, stride)?;
                Ok(FeatShape::new(c_out, h, w))
            }
            LayerKind::DwConv { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err("dwconv hyperparameters must be >= 1".into());
                }
                let (h, w) = spatial(kernel, stride)?;
                Ok(FeatShape::new(x.c, h, w))
            }
            LayerKind::Shuffle { groups } => {
                if groups == 0 || x.c % groups != 0 {
                    return Err(format!("{} channels not divisible by {groups} groups", x.c));
                }
                Ok(x)
            }
            LayerKind::SplitTake { start, len } => {
                if len == 0 || start + len > x.c {
                    return Err(format!("channel range {start}..{} outside {} channels", start + len, x.c));
                }
                Ok(FeatShape::new(len, x.h, x.w))
            }
            LayerKind::Concat => {
                if let Some(bad) = inputs.iter().find(|s| (s.h, s.w) != (x.h, x.w)) {
                    return Err(format!("spatial mismatch {x} vs {bad}"));
                }
                Ok(FeatShape::new(inputs.iter().map(|s| s.c).sum(), x.h, x.w))
            }
            LayerKind::MaxPool { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err("maxpool hyperparameters must be >= 1".into());
                }
                let (h, w) = spatial(kernel, stride)?;
                Ok(FeatShape::new(x.c, h, w))
            }
            LayerKind::Upsample => Ok(FeatShape::new(x.c, 2 * x.h, 2 * x.w)),
            LayerKind::Detect { anchors, classes } => {
                if anchors == 0 || classes == 0 {
                    return Err("detect needs >= 1 anchor and class".into());
                }
                Ok(FeatShape::new(anchors * (5 + classes), x.h, x.w))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: Vec<String>) -> Self {
        LayerSpec { id: id.into(), kind, inputs }
    }
}

/// A validated, topologically ordered layer graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    layers: Vec<LayerSpec>,
    input: FeatShape,
    outputs: Vec<String>,
    shapes: Vec<FeatShape>,
    /// `inputs` resolved to layer indices; `None` is the graph input.
    edges: Vec<Vec<Option<usize>>>,
}

impl Graph {
    pub fn new(layers: Vec<LayerSpec>, input: FeatShape, outputs: Vec<String>) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::Graph("graph declares no outputs".into()));
        }
        if input.c == 0 || input.h == 0 || input.w == 0 {
            return Err(Error::Graph(format!("input shape {input} has a zero dimension")));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut shapes = Vec::with_capacity(layers.len());
        let mut edges = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            if layer.id == INPUT || index.insert(layer.id.as_str(), i).is_some() {
                return Err(Error::Graph(format!("duplicate or reserved layer id `{}`", layer.id)));
            }
            if !layer.kind.arity_ok(layer.inputs.len()) {
                return Err(Error::Graph(format!(
                    "layer `{}` ({}) has {} inputs",
                    layer.id,
                    layer.kind.name(),
                    layer.inputs.len()
                )));
            }
            let mut resolved = Vec::with_capacity(layer.inputs.len());
            let mut in_shapes = Vec::with_capacity(layer.inputs.len());
            for name in &layer.inputs {
                if name == INPUT {
                    resolved.push(None);
                    in_shapes.push(input);
                    continue;
                }
                match index.get(name.as_str()) {
                    Some(&j) if j < i => {
                        resolved.push(Some(j));
                        in_shapes.push(shapes[j]);
                    }
                    _ => {
                        return Err(Error::Graph(format!(
                            "layer `{}` reads `{name}`, which is not defined earlier",
                            layer.id
                        )))
                    }
                }
            }
            let out = layer
                .kind
                .output_shape(&in_shapes)
                .map_err(|m| Error::Graph(format!("layer `{}`: {m}", layer.id)))?;
            shapes.push(out);
            edges.push(resolved);
        }
        for o in &outputs {
            if !index.contains_key(o.as_str()) {
                return Err(Error::Graph(format!("output `{o}` is not a layer")));
            }
        }
        Ok(Graph { layers, input, outputs, shapes, edges })
    }

    /// The same topology re-validated for another input extent.
    pub fn with_input(&self, input: FeatShape) -> Result<Self> {
        Graph::new(self.layers.clone(), input, self.outputs.clone())
    }

    pub fn with_input_size(&self, size: usize) -> Result<Self> {
        self.with_input(FeatShape::new(self.input.c, size, size))
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> FeatShape {
        self.input
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    /// Output extent of every layer, aligned with [`Graph::layers`].
    pub fn shapes(&self) -> &[FeatShape] {
        &self.shapes
    }

    pub(crate) fn edges(&self) -> &[Vec<Option<usize>>] {
        &self.edges
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn input_shapes_of(&self, i: usize) -> Vec<FeatShape> {
        self.edges[i].iter().map(|e| e.map_or(self.input, |j| self.shapes[j])).collect()
    }

    pub fn parametric_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.kind.is_parametric())
    }

    /// Detect layers in declared output order, with their stride in input pixels.
    pub fn detect_outputs(&self) -> Vec<(usize, usize)> {
        self.outputs
            .iter()
            .filter_map(|o| self.layer_index(o))
            .filter(|&i| matches!(self.layers[i].kind, LayerKind::Detect { .. }))
            .map(|i| (i, self.input.h / self.shapes[i].h))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# yoffle graph v1").unwrap();
        writeln!(s, "input {} {} {}", self.input.c, self.input.h, self.input.w).unwrap();
        for l in &self.layers {
            let hp: Vec<String> = l.kind.hyperparams().iter().map(|(k, v)| format!("{k}={v}")).collect();
            let hp = if hp.is_empty() { "-".to_string() } else { hp.join(",") };
            writeln!(s, "{} {} {} <- {}", l.id, l.kind.name(), hp, l.inputs.join(",")).unwrap();
        }
        writeln!(s, "output {}", self.outputs.join(",")).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut input = None;
        let mut outputs = None;
        let mut layers = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("input ") {
                let dims: Vec<usize> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| err(format!("bad input dimension `{t}`"))))
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(err("input needs c h w".into()));
                }
                input = Some(FeatShape::new(dims[0], dims[1], dims[2]));
                continue;
            }
            if let Some(rest) = line.strip_prefix("output ") {
                outputs = Some(rest.trim().split(',').map(str::to_string).collect());
                continue;
            }
            let (head, ins) = line.split_once(" <- ").ok_or_else(|| err("expected `<-`".into()))?;
            let mut parts = head.split_whitespace();
            let (Some(id), Some(kind), Some(hp), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected `id kind hyperparams <- inputs`".into()));
            };
            let mut map = HashMap::new();
            if hp != "-" {
                for kv in hp.split(',') {
                    let (k, v) = kv.split_once('=').ok_or_else(|| err(format!("bad hyperparameter `{kv}`")))?;
                    map.insert(k, v.parse().map_err(|_| err(format!("bad value in `{kv}`")))?);
                }
            }
            let kind = LayerKind::from_parts(kind, &map).map_err(err)?;
            layers.push(LayerSpec::new(id, kind, ins.trim().split(',').map(str::to_string).collect()));
        }
        let input = input.ok_or_else(|| Error::Parse { line: 0, msg: "missing `input` line".into() })?;
        let outputs = outputs.ok_or_else(|| Error::Parse { line: 0, msg: "missing `output` line".into() })?;
        Graph::new(layers, input, outputs)
    }
}

/// Incremental graph construction that tracks shapes as layers are added.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    input: FeatShape,
    layers: Vec<LayerSpec>,
    shapes: HashMap<String, FeatShape>,
}

impl GraphBuilder {
    pub fn new(input: FeatShape) -> Self {
        let mut shapes = HashMap::new();
        shapes.insert(INPUT.to_string(), input);
        GraphBuilder { input, layers: Vec::new(), shapes }
    }

    pub fn shape(&self, id: &str) -> FeatShape {
        self.shapes[id]
    }

    pub fn channels(&self, id: &str) -> usize {
        self.shapes[id].c
    }

    pub fn add(&mut self, id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Result<String> {
        let id = id.into();
        if self.shapes.contains_key(&id) {
            return Err(Error::Graph(format!("duplicate layer id `{id}`")));
        }
        let in_shapes = inputs
            .iter()
            .map(|i| self.shapes.get(*i).copied().ok_or_else(|| Error::Graph(format!("unknown input `{i}` for `{id}`"))))
            .collect::<Result<Vec<_>>>()?;
        if !kind.arity_ok(in_shapes.len()) {
            return Err(Error::Graph(format!("layer `{id}` has {} inputs", in_shapes.len())));
        }
        let out = kind.output_shape(&in_shapes).map_err(|m| Error::Graph(format!("layer `{id}`: {m}")))?;
        self.shapes.insert(id.clone(), out);
        self.layers.push(LayerSpec::new(id.clone(), kind, inputs.iter().map(|s| s.to_string()).collect()));
        Ok(id)
    }

    pub fn conv(&mut self, id: impl Into<String>, input: &str, c_out: usize, kernel: usize, stride: usize) -> Result<String> {
        self.add(id, LayerKind::Conv { c_out, kernel, stride, groups: 1, leaky: true }, &[input])
    }

    pub fn dwconv(&mut self, id: impl Into<String>, input: &str, stride: usize) -> Result<String> {
        self.add(id, LayerKind::DwConv { kernel: 3, stride }, &[input])
    }

    pub fn concat(&mut self, id: impl Into<String>, inputs: &[&str]) -> Result<String> {
        self.add(id, LayerKind::Concat, inputs)
    }

    pub fn into_layers(self) -> Vec<LayerSpec> {
        self.layers
    }

    pub fn finish(self, outputs: Vec<String>) -> Result<Graph> {
        Graph::new(self.layers, self.input, outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Graph {
        let mut b = GraphBuilder::new(FeatShape::new(3, 8, 8));
        b.conv("c1", INPUT, 4, 3, 2).unwrap();
        b.add("up", LayerKind::Upsample, &["c1"]).unwrap();
        b.concat("cat", &["up", INPUT]).unwrap();
        b.add("det", LayerKind::Detect { anchors: 1, classes: 1 }, &["cat"]).unwrap();
        b.finish(vec!["det".into()]).unwrap()
    }

    #[test]
    fn shapes_follow_kinds() {
        let g = tiny();
        let s = g.shapes();
        assert_eq!(s[0], FeatShape::new(4, 4, 4));
        assert_eq!(s[1], FeatShape::new(4, 8, 8));
        assert_eq!(s[2], FeatShape::new(7, 8, 8));
        assert_eq!(s[3], FeatShape::new(6, 8, 8));
        assert_eq!(g.detect_outputs(), vec![(3, 1)]);
    }

    #[test]
    fn text_round_trip() {
        let g = tiny();
        let text = g.to_text();
        assert!(text.contains("c1 conv c_out=4,k=3,s=2,g=1,leaky=1 <- input"));
        assert_eq!(Graph::from_text(&text).unwrap(), g);
    }

    #[test]
    fn rejects_forward_references_and_bad_arity() {
        let input = FeatShape::new(3, 8, 8);
        let layers = vec![
            LayerSpec::new("a", LayerKind::Upsample, vec!["b".into()]),
            LayerSpec::new("b", LayerKind::Upsample, vec![INPUT.into()]),
        ];
        assert!(Graph::new(layers, input, vec!["a".into()]).is_err());

        let layers = vec![LayerSpec::new("a", LayerKind::Concat, vec![INPUT.into()])];
        assert!(Graph::new(layers, input, vec!["a".into()]).is_err());

        let layers = vec![LayerSpec::new("a", LayerKind::Upsample, vec![INPUT.into()])];
        assert!(Graph::new(layers.clone(), input, vec![]).is_err());
        assert!(Graph::new(layers, input, vec!["zzz".into()]).is_err());
    }

    #[test]
    fn rejects_channel_arithmetic_that_does_not_close() {
        let mut b = GraphBuilder::new(FeatShape::new(3, 8, 8));
        b.conv("c", INPUT, 4, 3, 2).unwrap();
        assert!(b.concat("bad", &["c", INPUT]).is_err());
        assert!(b.add("odd", LayerKind::Shuffle { groups: 3 }, &["c"]).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Graph::from_text("input 3 8 8\nc1 warp k=1 <- input\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
