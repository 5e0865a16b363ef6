//! Anchor-based decoding, box geometry, GIoU loss and non-maximum suppression.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Axis-aligned box in center format, input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        BBox { cx: (left + right) / 2.0, cy: (top + bottom) / 2.0, w: right - left, h: bottom - top }
    }

    /// `[left, top, right, bottom]`.
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox { cx: self.cx + dx, cy: self.cy + dy, ..*self }
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: &BBox, b: &BBox) -> Overlap {
    let [al, at, ar, ab] = a.corners();
    let [bl, bt, br, bb] = b.corners();
    let iw = (ar.min(br) - al.max(bl)).max(0.0);
    let ih = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ar.max(br) - al.min(bl)) * (ab.max(bb) - at.min(bt));
    Overlap { inter, union, enclosing }
}

/// Intersection over union; 0 for disjoint or zero-area pairs.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let o = overlap(a, b);
    if o.union <= 0.0 {
        0.0
    } else {
        o.inter / o.union
    }
}

/// `IoU - (|C| - |A u B|) / |C|` with `C` the smallest enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let o = overlap(a, b);
    if o.union <= 0.0 || o.enclosing <= 0.0 {
        return 0.0;
    }
    o.inter / o.union - (o.enclosing - o.union) / o.enclosing
}

/// `1 - giou(pred, gt)` and its gradient with respect to
/// `(cx, cy, w, h)` of `pred`.
///
/// Where an edge of `pred` coincides with an edge of `gt` the min/max
/// selecting intersection and enclosure edges is not differentiable; the
/// derivative used there is the one approached from below.
pub fn giou_loss_and_grad(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    if !(pred.w > 0.0 && pred.h > 0.0) {
        return Err(Error::InvalidArgument(format!("predicted box {pred:?} has no area")));
    }
    let [px1, py1, px2, py2] = pred.corners();
    let [gx1, gy1, gx2, gy2] = gt.corners();

    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let enclosing = cw * ch;
    let union = pred.area() + gt.area() - inter;

    let loss = 1.0 - (inter / union - (enclosing - union) / enclosing);

    // d/d(corner) of intersection, enclosure and pred area, ordered x1, x2, y1, y2.
    let bind = |c: bool| if c { 1.0 } else { 0.0 };
    let d_inter = if overlapping {
        [-ih * bind(px1 > gx1), ih * bind(px2 <= gx2), -iw * bind(py1 > gy1), iw * bind(py2 <= gy2)]
    } else {
        [0.0; 4]
    };
    let d_encl = [-ch * bind(px1 <= gx1), ch * bind(px2 > gx2), -cw * bind(py1 <= gy1), cw * bind(py2 > gy2)];
    let d_area = [-pred.h, pred.h, -pred.w, pred.w];

    let mut d = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enclosing - union * d_encl[k]) / (enclosing * enclosing);
        d[k] = -d_iou - d_ratio;
    }
    let [dx1, dx2, dy1, dy2] = d;
    Ok((loss, [dx1 + dx2, dy1 + dy2, (dx2 - dx1) / 2.0, (dy2 - dy1) / 2.0]))
}

/// Prior box sizes for one detection scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorScale {
    pub stride: usize,
    pub dims: Vec<(f64, f64)>,
}

/// Anchors for every scale, ascending stride.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorSet {
    scales: Vec<AnchorScale>,
}

impl AnchorSet {
    pub fn new(scales: Vec<AnchorScale>) -> Result<Self> {
        let per = scales.first().map(|s| s.dims.len()).unwrap_or(0);
        if per == 0 {
            return Err(Error::InvalidArgument("anchor set needs at least one anchor per scale".into()));
        }
        for pair in scales.windows(2) {
            if pair[0].stride >= pair[1].stride {
                return Err(Error::InvalidArgument("anchor scales must have strictly ascending strides".into()));
            }
        }
        for s in &scales {
            if s.dims.len() != per {
                return Err(Error::InvalidArgument("every scale needs the same number of anchors".into()));
            }
            if s.stride == 0 || s.dims.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
                return Err(Error::InvalidArgument(format!("invalid anchors for stride {}", s.stride)));
            }
        }
        Ok(AnchorSet { scales })
    }

    /// Sorts `dims` by area and deals them out to `strides` (ascending) in
    /// equal consecutive groups, smallest anchors on the finest scale.
    pub fn from_dims(mut dims: Vec<(f64, f64)>, strides: &[usize]) -> Result<Self> {
        if strides.is_empty() || dims.len() % strides.len() != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} anchors cannot be split evenly over {} scales",
                dims.len(),
                strides.len()
            )));
        }
        dims.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        let per = dims.len() / strides.len();
        let scales = strides
            .iter()
            .zip(dims.chunks(per))
            .map(|(&stride, d)| AnchorScale { stride, dims: d.to_vec() })
            .collect();
        Self::new(scales)
    }

    /// Common YOLO priors at 416x416: six for two scales, nine for three.
    pub fn default_for(strides: &[usize]) -> Result<Self> {
        let dims: &[(f64, f64)] = if strides.len() == 3 {
            &[
                (10.0, 13.0),
                (16.0, 30.0),
                (33.0, 23.0),
                (30.0, 61.0),
                (62.0, 45.0),
                (59.0, 119.0),
                (116.0, 90.0),
                (156.0, 198.0),
                (373.0, 326.0),
            ]
        } else {
            &[(10.0, 14.0), (23.0, 27.0), (37.0, 58.0), (81.0, 82.0), (135.0, 169.0), (344.0, 319.0)]
        };
        Self::from_dims(dims.to_vec(), strides)
    }

    pub fn scales(&self) -> &[AnchorScale] {
        &self.scales
    }

    pub fn anchors_per_scale(&self) -> usize {
        self.scales[0].dims.len()
    }

    pub fn scale_for_stride(&self, stride: usize) -> Option<&AnchorScale> {
        self.scales.iter().find(|s| s.stride == stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    pub class_id: usize,
    /// `objectness * class_scores[class_id]`.
    pub confidence: f64,
}

impl Detection {
    /// A detection whose only class score is 1, so confidence equals `objectness`.
    pub fn simple(bbox: BBox, class_id: usize, num_classes: usize, confidence: f64) -> Self {
        let mut class_scores = vec![0.0; num_classes];
        class_scores[class_id] = 1.0;
        Detection { bbox, objectness: confidence, class_scores, class_id, confidence }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes image `n` of a raw head tensor laid out as
/// `anchors x [tx, ty, tw, th, obj, cls...]` channels. Output order is
/// row, column, anchor.
pub fn decode_image(head: &Tensor, n: usize, anchors: &AnchorScale, num_classes: usize) -> Result<Vec<Detection>> {
    let s = head.shape();
    let per = 5 + num_classes;
    if s.c != anchors.dims.len() * per {
        return Err(Error::shape(
            "decode",
            format!("head has {} channels, expected {} anchors x {per}", s.c, anchors.dims.len()),
        ));
    }
    if n >= s.n {
        return Err(Error::shape("decode", format!("image {n} out of batch {}", s.n)));
    }
    let stride = anchors.stride as f64;
    let mut out = Vec::with_capacity(s.h * s.w * anchors.dims.len());
    for i in 0..s.h {
        for j in 0..s.w {
            for (a, &(pw, ph)) in anchors.dims.iter().enumerate() {
                let ch = |k: usize| head.at(n, a * per + k, i, j) as f64;
                let cx = (sigmoid(ch(0)) + j as f64) * stride;
                let cy = (sigmoid(ch(1)) + i as f64) * stride;
                let w = pw * ch(2).exp();
                let h = ph * ch(3).exp();
                let objectness = sigmoid(ch(4));
                let class_scores: Vec<f64> = (0..num_classes).map(|k| sigmoid(ch(5 + k))).collect();
                let (class_id, best) = class_scores
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
                out.push(Detection {
                    bbox: BBox::new(cx, cy, w, h),
                    objectness,
                    class_scores,
                    class_id,
                    confidence: objectness * best,
                });
            }
        }
    }
    Ok(out)
}

/// [`decode_image`] for a single-image head tensor.
pub fn decode(head: &Tensor, anchors: &AnchorScale, num_classes: usize) -> Result<Vec<Detection>> {
    if head.shape().n != 1 {
        return Err(Error::shape("decode", format!("expected a single image, batch is {}", head.shape().n)));
    }
    decode_image(head, 0, anchors, num_classes)
}

/// Per-class greedy suppression.
///
/// Boxes under `conf_threshold` are dropped. The rest are visited by
/// descending confidence (lower input index first on ties); a box survives
/// unless an already kept box of its class overlaps it with IoU above
/// `iou_threshold`. Survivors are returned in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64, conf_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].confidence >= conf_threshold).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == d.class_id && iou(&dets[k].bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}
