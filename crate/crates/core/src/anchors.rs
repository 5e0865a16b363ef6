//! Anchor selection by k-means over box sizes with `1 - IoU` distance.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;

/// IoU of two boxes sharing their top-left corner.
pub fn iou_wh(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    1.0 - iou_wh(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeansResult {
    /// Centroids sorted by ascending area.
    pub anchors: Vec<(f64, f64)>,
    /// Mean distance to the nearest centroid after seeding and after each iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Mean distance from each box to its nearest centroid.
pub fn objective(boxes: &[(f64, f64)], centroids: &[(f64, f64)]) -> f64 {
    boxes.iter().map(|&b| nearest(b, centroids).1).sum::<f64>() / boxes.len() as f64
}

/// Mean IoU between each box and its best-matching anchor.
pub fn mean_best_iou(boxes: &[(f64, f64)], anchors: &[(f64, f64)]) -> f64 {
    1.0 - objective(boxes, anchors)
}

fn nearest(b: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, distance(b, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn seed_centroids(boxes: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centroids = vec![boxes[rng.random_range(0..boxes.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = boxes.iter().map(|&b| nearest(b, &centroids).1.powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = weights.iter().rposition(|&w| w > 0.0).expect("a box lies off every centroid");
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        centroids.push(boxes[pick]);
    }
    centroids
}

/// Clusters `(w, h)` boxes into `k` anchors.
///
/// Seeding is k-means++ (each further centroid drawn with probability
/// proportional to squared distance), driven by a ChaCha8 stream seeded
/// with `seed`. Each Lloyd step assigns boxes to the nearest centroid and
/// moves a centroid to the per-axis median of its members only when that
/// does not raise the cluster's total distance; empty clusters restart at
/// the box farthest from its centroid. Iteration stops once assignments
/// repeat or after [`MAX_ITERATIONS`].
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if boxes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
        return Err(Error::InvalidArgument("box sizes must be positive and finite".into()));
    }
    let distinct: HashSet<(u64, u64)> = boxes.iter().map(|&(w, h)| (w.to_bits(), h.to_bits())).collect();
    if k > distinct.len() {
        return Err(Error::Data(format!("k = {k} exceeds the {} distinct box sizes", distinct.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(boxes, k, &mut rng);
    let mut trace = vec![objective(boxes, &centroids)];
    let mut assignment: Vec<usize> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MAX_ITERATIONS {
        let next: Vec<usize> = boxes.iter().map(|&b| nearest(b, &centroids).0).collect();
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        iterations += 1;

        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> =
                boxes.iter().zip(&assignment).filter(|&(_, &a)| a == c).map(|(&b, _)| b).collect();
            if members.is_empty() {
                continue;
            }
            let mut ws: Vec<f64> = members.iter().map(|m| m.0).collect();
            let mut hs: Vec<f64> = members.iter().map(|m| m.1).collect();
            let candidate = (median(&mut ws), median(&mut hs));
            let cost = |p| members.iter().map(|&m| distance(m, p)).sum::<f64>();
            if cost(candidate) <= cost(*centroid) {
                *centroid = candidate;
            }
        }
        for c in 0..k {
            if assignment.contains(&c) {
                continue;
            }
            let far = boxes
                .iter()
                .enumerate()
                .map(|(i, &b)| (i, distance(b, centroids[assignment[i]])))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            centroids[c] = boxes[far];
        }
        trace.push(objective(boxes, &centroids));
    }

    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    Ok(KMeansResult { anchors: centroids, objective_trace: trace, iterations, converged })
}

/// One anchor per line as `w h`.
pub fn format_anchors(anchors: &[(f64, f64)]) -> String {
    anchors.iter().map(|(w, h)| format!("{w} {h}\n")).collect()
}

pub fn parse_anchors(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = || Error::Parse { line: n + 1, msg: format!("expected `w h` with positive numbers, got `{line}`") };
        if fields.len() != 2 {
            return Err(err());
        }
        let w: f64 = fields[0].parse().map_err(|_| err())?;
        let h: f64 = fields[1].parse().map_err(|_| err())?;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(err());
        }
        out.push((w, h));
    }
    if out.is_empty() {
        return Err(Error::Parse { line: 1, msg: "anchor file is empty".into() });
    }
    Ok(out)
}

pub fn write_anchors(path: &Path, anchors: &[(f64, f64)]) -> Result<()> {
    fs::write(path, format_anchors(anchors)).map_err(|e| Error::io(path, e))
}

pub fn read_anchors(path: &Path) -> Result<Vec<(f64, f64)>> {
    parse_anchors(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
