//! Compressed single-stage object detector: tensor kernels, layer graphs,
//! cost analysis, weight files, detection head, KITTI data and evaluation.

pub mod anchors;
pub mod arch;
pub mod cost;
pub mod error;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod head;
pub mod kitti;
pub mod letterbox;
pub mod ops;
pub mod pipeline;
pub mod tensor;
pub mod weights;

pub use arch::{build_yofflenet, Variant};
pub use error::{Error, ErrorKind, Result};
pub use exec::Network;
pub use graph::{FeatShape, Graph};
pub use head::{AnchorSet, BBox, Detection};
pub use pipeline::{Detector, Thresholds};
pub use tensor::{Shape, Tensor};
pub use weights::{DType, WeightStore};
