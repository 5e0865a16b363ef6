//! Parameter, multiply-accumulate and memory-traffic accounting.
//!
//! Memory access follows the ShuffleNetV2 element-traffic model: a layer
//! reads its inputs, writes its output and, if parametric, reads its kernel.
//! For a 1x1 conv that is `h*w*(c_in + c_out) + c_in*c_out`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{FeatShape, Graph};
use crate::weights::{predicted_file_size, DType};

pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub id: String,
    pub kind: &'static str,
    pub output: FeatShape,
    pub params: u64,
    pub macs: u64,
    /// Elements moved.
    pub memory_access: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub input: FeatShape,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_memory_access: u64,
    pub total_memory_access_bytes: u64,
    /// Exact size of the weight file at each storage precision.
    pub weight_bytes_fp32: u64,
    pub weight_bytes_fp16: u64,
}

pub fn analyze(g: &Graph) -> CostReport {
    let mut layers = Vec::with_capacity(g.layers().len());
    for (i, l) in g.layers().iter().enumerate() {
        let inputs = g.input_shapes_of(i);
        let out = g.shapes()[i];
        let kernel = l.kind.kernel_weights(inputs[0]) as u64;
        let params = l.kind.weight_dims(inputs[0]).map_or(0, |[r, c]| (r * c) as u64);
        let macs = kernel * (out.h * out.w) as u64;
        let traffic = inputs.iter().map(|s| s.numel() as u64).sum::<u64>() + out.numel() as u64 + kernel;
        layers.push(LayerCost { id: l.id.clone(), kind: l.kind.name(), output: out, params, macs, memory_access: traffic });
    }
    let layout = crate::weights::graph_layout(g);
    let size = |dtype| predicted_file_size(layout.iter().map(|(n, d)| (n.as_str(), d.as_slice())), dtype) as u64;
    let total_memory_access = layers.iter().map(|l| l.memory_access).sum();
    CostReport {
        input: g.input_shape(),
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        total_memory_access,
        total_memory_access_bytes: total_memory_access * BYTES_PER_ELEMENT,
        weight_bytes_fp32: size(DType::F32),
        weight_bytes_fp16: size(DType::F16),
        layers,
    }
}

impl CostReport {
    pub fn weight_bytes(&self, dtype: DType) -> u64 {
        match dtype {
            DType::F32 => self.weight_bytes_fp32,
            DType::F16 => self.weight_bytes_fp16,
        }
    }

    /// Summed costs of all layers whose id starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.layers
            .iter()
            .filter(|l| l.id.starts_with(prefix))
            .fold((0, 0), |(p, m), l| (p + l.params, m + l.macs))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per layer followed by a `TOTAL` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["id", "kind", "c", "h", "w", "params", "macs", "memory_access"]).map_err(csv_err)?;
        for l in &self.layers {
            w.write_record([
                l.id.clone(),
                l.kind.to_string(),
                l.output.c.to_string(),
                l.output.h.to_string(),
                l.output.w.to_string(),
                l.params.to_string(),
                l.macs.to_string(),
                l.memory_access.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.write_record([
            "TOTAL".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            self.total_params.to_string(),
            self.total_macs.to_string(),
            self.total_memory_access.to_string(),
        ])
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}
