//! End-to-end detection (forward, decode, NMS) and latency measurement.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Network;
use crate::graph::Graph;
use crate::head::{decode_image, nms, AnchorSet, Detection, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub confidence: f64,
    pub nms_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { confidence: DEFAULT_CONF_THRESHOLD, nms_iou: DEFAULT_NMS_IOU }
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    network: Network,
    anchors: AnchorSet,
    /// Stride of each graph output, in output order.
    strides: Vec<usize>,
    num_classes: usize,
    pub thresholds: Thresholds,
}

impl Detector {
    /// Binds weights and checks that `anchors` cover every detection output.
    pub fn new(graph: Graph, weights: &WeightStore, anchors: AnchorSet, thresholds: Thresholds) -> Result<Self> {
        let heads = graph.detect_outputs();
        if heads.len() != graph.outputs().len() {
            return Err(Error::Graph("every graph output must be a detect layer".into()));
        }
        let mut num_classes = None;
        let mut strides = Vec::with_capacity(heads.len());
        for &(i, stride) in &heads {
            let crate::graph::LayerKind::Detect { anchors: per, classes } = graph.layers()[i].kind else {
                unreachable!("detect_outputs returns detect layers");
            };
            let scale = anchors.scale_for_stride(stride).ok_or_else(|| {
                Error::InvalidArgument(format!("no anchors for the stride-{stride} head `{}`", graph.layers()[i].id))
            })?;
            if scale.dims.len() != per {
                return Err(Error::InvalidArgument(format!(
                    "head `{}` predicts {per} anchors but {} are configured for stride {stride}",
                    graph.layers()[i].id,
                    scale.dims.len()
                )));
            }
            num_classes = Some(classes);
            strides.push(stride);
        }
        let num_classes = num_classes.ok_or_else(|| Error::Graph("graph has no detection outputs".into()))?;
        Ok(Detector { network: Network::new(graph, weights)?, anchors, strides, num_classes, thresholds })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// Decoded candidates for image `n` of the raw head outputs.
    pub fn decode_all(&self, heads: &[Tensor], n: usize) -> Result<Vec<Detection>> {
        let mut out = Vec::new();
        for (head, &stride) in heads.iter().zip(&self.strides) {
            let scale = self.anchors.scale_for_stride(stride).expect("checked at construction");
            out.extend(decode_image(head, n, scale, self.num_classes)?);
        }
        Ok(out)
    }

    /// Post-NMS detections for each image of the batch, in input pixels.
    pub fn detect(&self, x: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let heads = self.network.forward(x)?;
        (0..x.shape().n)
            .map(|n| Ok(nms(&self.decode_all(&heads, n)?, self.thresholds.nms_iou, self.thresholds.confidence)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub iterations: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// `1000 / mean_ms`.
    pub fps: f64,
}

/// Nearest-rank percentile of ascending `sorted` samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Summary statistics of per-iteration latencies in milliseconds.
pub fn summarize(samples_ms: &[f64], warmup: usize) -> Result<LatencyReport> {
    if samples_ms.is_empty() {
        return Err(Error::InvalidArgument("at least one timed iteration is required".into()));
    }
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    Ok(LatencyReport {
        iterations: n,
        warmup,
        mean_ms: mean,
        median_ms: median,
        p95_ms: percentile(&sorted, 95.0),
        min_ms: sorted[0],
        max_ms: sorted[n - 1],
        fps: 1000.0 / mean,
    })
}

/// Times `warmup` untimed then `iterations` timed calls of `f`.
pub fn time_iterations(iterations: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencyReport> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    summarize(&samples, warmup)
}

/// Single-image forward, decode and NMS latency.
pub fn bench_detector(det: &Detector, x: &Tensor, iterations: usize, warmup: usize) -> Result<LatencyReport> {
    time_iterations(iterations, warmup, || det.detect(x).map(drop))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HostInfo {
    pub os: &'static str,
    pub arch: &'static str,
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
    pub threads: usize,
}

impl HostInfo {
    pub fn detect(threads: usize) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        });
        HostInfo {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
            threads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_yofflenet, Variant};
    use crate::graph::FeatShape;
    use crate::tensor::Shape;
    use crate::weights::{init_random, DType};

    #[test]
    fn order_statistics() {
        let r = summarize(&[4.0, 1.0, 3.0, 2.0], 0).unwrap();
        assert_eq!((r.min_ms, r.median_ms, r.max_ms, r.mean_ms), (1.0, 2.5, 4.0, 2.5));
        assert_eq!(r.p95_ms, 4.0);
        assert_eq!(r.fps, 400.0);
        let samples: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&samples, 95.0), 95.0);
        assert!(summarize(&[], 0).is_err());
    }

    #[test]
    fn small_detector_runs() {
        let g = build_yofflenet(Variant::SP, 3, 3).unwrap().with_input(FeatShape::new(3, 64, 64)).unwrap();
        let w = init_random(&g, 3, DType::F32);
        let anchors = AnchorSet::default_for(Variant::SP.strides()).unwrap();
        let det = Detector::new(g, &w, anchors, Thresholds { confidence: 0.0, nms_iou: 1.0 }).unwrap();
        let x = Tensor::filled(Shape::new(2, 3, 64, 64), 0.5);
        let out = det.detect(&x).unwrap();
        // 4x4 + 2x2 cells, three anchors each, nothing suppressed at IoU 1.0
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].len(), (16 + 4) * 3);
        assert_eq!(out[0], out[1]);
        let r = bench_detector(&det, &Tensor::filled(Shape::new(1, 3, 64, 64), 0.5), 3, 1).unwrap();
        assert_eq!((r.iterations, r.warmup), (3, 1));
    }

    #[test]
    fn anchors_must_cover_heads() {
        let g = build_yofflenet(Variant::S, 3, 3).unwrap().with_input(FeatShape::new(3, 64, 64)).unwrap();
        let w = init_random(&g, 0, DType::F32);
        let two = AnchorSet::default_for(&[16, 32]).unwrap();
        assert!(Detector::new(g, &w, two, Thresholds::default()).is_err());
    }
}
