//! Runs a [`Graph`] over tensors in topological order.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerKind};
use crate::ops::{self, Activation, ChannelAffine, ConvParams};
use crate::tensor::{Shape, Tensor};
use crate::weights::WeightStore;

/// A graph bound to validated, unpacked weights. Immutable and `Sync`;
/// `forward` may be called concurrently.
#[derive(Debug, Clone)]
pub struct Network {
    graph: Graph,
    params: Vec<Option<ConvParams>>,
    /// Index of the last layer reading each layer's output.
    last_use: Vec<usize>,
}

impl Network {
    pub fn new(graph: Graph, store: &WeightStore) -> Result<Self> {
        let mut params = vec![None; graph.layers().len()];
        for (i, layer) in graph.parametric_layers() {
            let input = graph.input_shapes_of(i)[0];
            let expected = layer.kind.weight_dims(input).expect("parametric");
            let entry = store.get(&layer.id).ok_or_else(|| Error::weights(&layer.id, "missing weights"))?;
            if entry.dims() != expected {
                return Err(Error::weights(
                    &layer.id,
                    format!("weight dims {:?}, layer needs {:?}", entry.dims(), expected),
                ));
            }
            params[i] = Some(unpack(&layer.id, &layer.kind, input.c, entry.data())?);
        }
        let parametric: HashSet<&str> = graph.parametric_layers().map(|(_, l)| l.id.as_str()).collect();
        if let Some(extra) = store.entries().iter().find(|e| !parametric.contains(e.name())) {
            return Err(Error::weights(extra.name(), "weight entry does not match any parametric layer"));
        }
        let n = graph.layers().len();
        let mut last_use: Vec<usize> = (0..n).collect();
        for (i, edges) in graph.edges().iter().enumerate() {
            for j in edges.iter().flatten() {
                last_use[*j] = last_use[*j].max(i);
            }
        }
        for o in graph.outputs() {
            let i = graph.layer_index(o).expect("validated output");
            last_use[i] = usize::MAX;
        }
        Ok(Network { graph, params, last_use })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.forward_observed(x, |_, _| {})
    }

    /// Like [`Network::forward`], reporting every layer output as it is produced.
    pub fn forward_observed(&self, x: &Tensor, mut observe: impl FnMut(usize, &Tensor)) -> Result<Vec<Tensor>> {
        let expected = self.graph.input_shape();
        let s = x.shape();
        if (s.c, s.h, s.w) != (expected.c, expected.h, expected.w) {
            return Err(Error::shape(
                "execute",
                format!("input {s} does not match graph input {expected} (c x h x w)"),
            ));
        }
        let layers = self.graph.layers();
        let mut values: Vec<Option<Tensor>> = vec![None; layers.len()];
        for (i, layer) in layers.iter().enumerate() {
            let out = {
                let inputs: Vec<&Tensor> = self.graph.edges()[i]
                    .iter()
                    .map(|e| match e {
                        None => x,
                        Some(j) => values[*j].as_ref().expect("producer still live"),
                    })
                    .collect();
                self.run_layer(i, &layer.kind, &inputs)
                    .map_err(|e| Error::shape(format!("layer `{}`", layer.id), e.to_string()))?
            };
            observe(i, &out);
            values[i] = Some(out);
            for j in self.graph.edges()[i].iter().flatten() {
                if self.last_use[*j] == i {
                    values[*j] = None;
                }
            }
        }
        Ok(self
            .graph
            .outputs()
            .iter()
            .map(|o| {
                let i = self.graph.layer_index(o).expect("validated output");
                values[i].clone().expect("outputs are retained")
            })
            .collect())
    }

    fn run_layer(&self, i: usize, kind: &LayerKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        match *kind {
            LayerKind::Conv { .. } | LayerKind::Detect { .. } => ops::conv2d(x, self.params[i].as_ref().expect("bound")),
            LayerKind::DwConv { .. } => ops::depthwise_conv2d(x, self.params[i].as_ref().expect("bound")),
            LayerKind::Shuffle { groups } => ops::channel_shuffle(x, groups),
            LayerKind::SplitTake { start, len } => ops::channel_slice(x, start, len),
            LayerKind::Concat => ops::concat_channels(inputs),
            LayerKind::MaxPool { kernel, stride } => ops::maxpool2d(x, kernel, stride, kernel / 2),
            LayerKind::Upsample => Ok(ops::upsample_nearest2x(x)),
        }
    }
}

/// Splits `[kernel | scale, shift]` rows (or `[kernel | bias]`) into conv parameters.
fn unpack(id: &str, kind: &LayerKind, c_in: usize, data: &[f32]) -> Result<ConvParams> {
    let (c_out, k, stride, groups, activation, affine_cols) = match *kind {
        LayerKind::Conv { c_out, kernel, stride, groups, leaky } => {
            let act = if leaky { Activation::leaky() } else { Activation::None };
            (c_out, kernel, stride, groups, act, 2)
        }
        LayerKind::DwConv { kernel, stride } => (c_in, kernel, stride, c_in, Activation::None, 2),
        LayerKind::Detect { anchors, classes } => (anchors * (5 + classes), 1, 1, 1, Activation::None, 1),
        _ => unreachable!("non-parametric layer"),
    };
    let cin_g = c_in / groups;
    let fan_in = cin_g * k * k;
    let row = fan_in + affine_cols;
    let mut kernel = Vec::with_capacity(c_out * fan_in);
    let mut scale = Vec::with_capacity(c_out);
    let mut shift = Vec::with_capacity(c_out);
    for r in data.chunks_exact(row) {
        kernel.extend_from_slice(&r[..fan_in]);
        if affine_cols == 2 {
            scale.push(r[fan_in]);
            shift.push(r[fan_in + 1]);
        } else {
            scale.push(1.0);
            shift.push(r[fan_in]);
        }
    }
    let weights = Tensor::new(Shape::new(c_out, cin_g, k, k), kernel)?;
    Ok(ConvParams::new(id, weights, ChannelAffine { scale, shift })
        .stride(stride)
        .padding(k / 2)
        .groups(groups)
        .activation(activation))
}

/// Binds `weights` to `g` and runs one forward pass.
pub fn execute(g: &Graph, weights: &WeightStore, x: &Tensor) -> Result<Vec<Tensor>> {
    Network::new(g.clone(), weights)?.forward(x)
}
