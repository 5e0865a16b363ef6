//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use yoffle_core::head::{BBox, Detection};
use yoffle_core::ops::{Activation, ChannelAffine, ConvParams};
use yoffle_core::{Shape, Tensor};

/// Direct convolution, accumulated in f64.
pub fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    affine: &ChannelAffine,
    stride: usize,
    pad: usize,
    groups: usize,
    slope: Option<f32>,
) -> Vec<f32> {
    let s = x.shape();
    let ws = w.shape();
    let (c_out, cin_g, k) = (ws.n, ws.c, ws.h);
    let cout_g = c_out / groups;
    let ho = (s.h + 2 * pad - k) / stride + 1;
    let wo = (s.w + 2 * pad - k) / stride + 1;
    let mut out = vec![0f32; s.n * c_out * ho * wo];
    for n in 0..s.n {
        for o in 0..c_out {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0f64;
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let xv = x.at(n, g * cin_g + ci, iy as usize, ix as usize) as f64;
                                acc += xv * w.at(o, ci, ky, kx) as f64;
                            }
                        }
                    }
                    let mut v = acc * affine.scale[o] as f64 + affine.shift[o] as f64;
                    if let Some(a) = slope {
                        if v < 0.0 {
                            v *= a as f64;
                        }
                    }
                    out[((n * c_out + o) * ho + oy) * wo + ox] = v as f32;
                }
            }
        }
    }
    out
}

pub fn random_tensor(rng: &mut impl Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// A random conv problem; `depthwise` forces `groups == c_in == c_out`.
pub fn random_conv_case(rng: &mut impl Rng, depthwise: bool) -> (Tensor, ConvParams, usize, Option<f32>) {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let pad = if rng.random_bool(0.8) { k / 2 } else { 0 };
    let (c_in, c_out, groups) = if depthwise {
        let c = rng.random_range(1..=12);
        (c, c, c)
    } else {
        let groups = [1, 1, 2, 3][rng.random_range(0..4)];
        (groups * rng.random_range(1..=6), groups * rng.random_range(1..=6), groups)
    };
    let h = rng.random_range(k.max(1)..=13);
    let w = rng.random_range(k.max(1)..=13);
    let n = rng.random_range(1..=2);
    let x = random_tensor(rng, Shape::new(n, c_in, h, w));
    let weights = random_tensor(rng, Shape::new(c_out, c_in / groups, k, k));
    let affine = ChannelAffine {
        scale: (0..c_out).map(|_| rng.random_range(0.5..1.5)).collect(),
        shift: (0..c_out).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let leaky = rng.random_bool(0.5);
    let slope = leaky.then_some(0.1);
    let p = ConvParams::new("case", weights, affine)
        .stride(stride)
        .padding(pad)
        .groups(groups)
        .activation(if leaky { Activation::leaky() } else { Activation::None });
    (x, p, pad, slope)
}

/// Largest absolute difference relative to the largest reference magnitude.
pub fn relative_error(got: &[f32], want: &[f32]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0f64, |m, v| m.max(v.abs() as f64)).max(1e-6);
    got.iter().zip(want).fold(0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs())) / scale
}

/// IoU written out from raw corner arithmetic.
pub fn corner_iou(a: &BBox, b: &BBox) -> f64 {
    let (al, at, ar, ab) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bl, bt, br, bb) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ar.min(br) - al.max(bl)).max(0.0);
    let ih = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Suppression by exhaustive search: the NMS result for one class is the
/// unique subset `K` of candidates such that no member of `K` overlaps a
/// higher-ranked member above the threshold, and every non-member does.
/// Enumerates every subset of each class and returns the indices of the
/// unique consistent one, ordered by rank.
pub fn exhaustive_nms(dets: &[Detection], iou_thr: f64, conf_thr: f64) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].confidence >= conf_thr).collect();
    ranked.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let classes: BTreeSet<usize> = ranked.iter().map(|&i| dets[i].class_id).collect();
    let mut kept = Vec::new();
    for c in classes {
        let members: Vec<usize> = ranked.iter().copied().filter(|&i| dets[i].class_id == c).collect();
        let m = members.len();
        assert!(m <= 16, "oracle limited to 16 boxes per class");
        let overlaps = |a: usize, b: usize| corner_iou(&dets[members[a]].bbox, &dets[members[b]].bbox) > iou_thr;
        let mut solutions = Vec::new();
        for mask in 0u32..(1 << m) {
            let inside = |j: usize| mask & (1 << j) != 0;
            let consistent = (0..m).all(|j| {
                let covered = (0..j).any(|h| inside(h) && overlaps(h, j));
                inside(j) != covered
            });
            if consistent {
                solutions.push(mask);
            }
        }
        assert_eq!(solutions.len(), 1, "suppression fixpoint must be unique");
        kept.extend((0..m).filter(|&j| solutions[0] & (1 << j) != 0).map(|j| members[j]));
    }
    kept.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    kept
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let l = rng.random_range(0.0..extent);
    let t = rng.random_range(0.0..extent);
    BBox::from_corners(l, t, l + rng.random_range(2.0..extent / 2.0), t + rng.random_range(2.0..extent / 2.0))
}

/// Clustered boxes so that suppression chains actually occur.
pub fn random_nms_instance(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<Detection> {
    let centers: Vec<BBox> = (0..4).map(|_| random_box(rng, 100.0)).collect();
    (0..n)
        .map(|i| {
            let c = centers[rng.random_range(0..centers.len())];
            let b = BBox::new(
                c.cx + rng.random_range(-8.0..8.0),
                c.cy + rng.random_range(-8.0..8.0),
                c.w * rng.random_range(0.7..1.3),
                c.h * rng.random_range(0.7..1.3),
            );
            Detection::simple(b, i % classes, classes, rng.random_range(0.0..1.0))
        })
        .collect()
}

/// Exact largest-remainder sizes for ratios given as integer weights.
pub fn rational_split_sizes(n: usize, weights: [usize; 3]) -> [usize; 3] {
    let total: usize = weights.iter().sum();
    let mut sizes = weights.map(|w| n * w / total);
    let rems = weights.map(|w| n * w % total);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        sizes[i] += 1;
    }
    sizes
}

/// Minimum over all 2-partitions of the summed `1 - IoU` to per-part
/// median centroids, and the partition (as a bitmask) attaining it.
pub fn exhaustive_two_partition(boxes: &[(f64, f64)]) -> (f64, u64) {
    assert!(boxes.len() <= 20);
    let cost_of = |part: &[(f64, f64)]| -> f64 {
        if part.is_empty() {
            return 0.0;
        }
        let med = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            if v.len() % 2 == 1 {
                v[m]
            } else {
                (v[m - 1] + v[m]) / 2.0
            }
        };
        let c = (med(part.iter().map(|b| b.0).collect()), med(part.iter().map(|b| b.1).collect()));
        part.iter()
            .map(|&(w, h)| {
                let inter = w.min(c.0) * h.min(c.1);
                1.0 - inter / (w * h + c.0 * c.1 - inter)
            })
            .sum()
    };
    let mut best = (f64::INFINITY, 0);
    // box 0 always in part A so each partition is visited once
    for mask in 0u64..(1 << (boxes.len() - 1)) {
        let mask = mask << 1;
        let (a, b): (Vec<_>, Vec<_>) = boxes.iter().enumerate().partition(|(i, _)| mask & (1 << i) == 0);
        let a: Vec<(f64, f64)> = a.into_iter().map(|(_, b)| *b).collect();
        let b: Vec<(f64, f64)> = b.into_iter().map(|(_, b)| *b).collect();
        if b.is_empty() {
            continue;
        }
        let cost = cost_of(&a) + cost_of(&b);
        if cost < best.0 {
            best = (cost, mask);
        }
    }
    best
}

/// Boxes scattered tightly around `modes`, `per_mode` each.
pub fn planted_boxes(rng: &mut impl Rng, modes: &[(f64, f64)], per_mode: usize, jitter: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(w, h) in modes {
        for _ in 0..per_mode {
            let mut jit = |v: f64| v * (1.0 + jitter * rng.random_range(-1.0..=1.0));
            let b = (jit(w), jit(h));
            out.push(b);
        }
    }
    out
}
