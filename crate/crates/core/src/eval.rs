//! Detection matching, all-point average precision and mAP.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::head::{iou, BBox};
use crate::kitti::{self, GroundTruthBox, ObjectClass};

pub const DEFAULT_EVAL_IOU: f64 = 0.5;
/// KITTI's official overlap requirement for cars.
pub const KITTI_CAR_IOU: f64 = 0.7;
pub const DETECTION_EXTENSION: &str = "txt";

/// A ground-truth object reduced to what evaluation needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Labeled {
    pub class: usize,
    pub bbox: BBox,
}

impl From<&GroundTruthBox> for Labeled {
    fn from(g: &GroundTruthBox) -> Self {
        Labeled { class: g.class.index(), bbox: g.bbox() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scored {
    pub class: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

/// Indices of `dets` by descending confidence, input order on ties.
fn confidence_order(dets: &[Scored]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Labels each detection of one image as true (`true`) or false positive.
///
/// Detections are visited by descending confidence. Each takes the
/// unmatched ground truth of its class with the highest IoU, provided that
/// IoU reaches the class threshold (`thresholds[class]`, or the last entry
/// for classes beyond the slice). Each ground truth is matched at most once.
pub fn match_detections(dets: &[Scored], gts: &[Labeled], thresholds: &[f64]) -> Vec<bool> {
    let thr = |c: usize| thresholds.get(c).or(thresholds.last()).copied().unwrap_or(DEFAULT_EVAL_IOU);
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.class != d.class {
                continue;
            }
            let o = iou(&d.bbox, &gt.bbox);
            if o >= thr(d.class) && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp[i] = true;
        }
    }
    tp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// One point per detection, by descending confidence.
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// Precision/recall after each detection, ranked by descending confidence
/// (stable for ties), and the all-point interpolated AP.
pub fn pr_curve(records: &[(f64, bool)], num_gt: usize) -> PrCurve {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].0.total_cmp(&records[a].0).then(a.cmp(&b)));
    let mut points = Vec::with_capacity(records.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += records[i].1 as usize;
        points.push(PrPoint {
            confidence: records[i].0,
            precision: tp as f64 / (rank + 1) as f64,
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
        });
    }
    let ap = if num_gt == 0 {
        if records.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (p, env) in points.iter().zip(&envelope) {
            if p.recall > prev_recall {
                ap += (p.recall - prev_recall) * env;
                prev_recall = p.recall;
            }
        }
        ap
    };
    PrCurve { points, ap }
}

/// All-point interpolated AP of `(confidence, is_true_positive)` records.
/// With no ground truth the AP is 1 when there are also no detections, else 0.
pub fn average_precision(records: &[(f64, bool)], num_gt: usize) -> f64 {
    pr_curve(records, num_gt).ap
}

/// Unweighted mean; 0 for an empty slice.
pub fn mean_ap(per_class: &[f64]) -> f64 {
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub class_names: Vec<String>,
    pub iou_thresholds: Vec<f64>,
}

impl EvalConfig {
    pub fn uniform(class_names: Vec<String>, iou_threshold: f64) -> Self {
        let iou_thresholds = vec![iou_threshold; class_names.len()];
        EvalConfig { class_names, iou_thresholds }
    }

    /// The three KITTI classes at `iou_threshold`, or with cars at 0.7
    /// when `kitti_car` is set.
    pub fn kitti(iou_threshold: f64, kitti_car: bool) -> Self {
        let mut cfg = Self::uniform(ObjectClass::ALL.iter().map(|c| c.to_string()).collect(), iou_threshold);
        if kitti_car {
            cfg.iou_thresholds[ObjectClass::Car.index()] = KITTI_CAR_IOU;
        }
        cfg
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

/// Names used when the model is not trained on the KITTI class set.
pub fn class_names(num_classes: usize) -> Vec<String> {
    if num_classes == kitti::NUM_CLASSES {
        ObjectClass::ALL.iter().map(|c| c.to_string()).collect()
    } else {
        (0..num_classes).map(|i| format!("class{i}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassResult {
    pub class: String,
    pub iou_threshold: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub tp: usize,
    pub fp: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub classes: Vec<ClassResult>,
    pub map: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["class", "iou_threshold", "num_gt", "num_det", "tp", "fp", "ap"]).map_err(csv_err)?;
        for c in &self.classes {
            w.write_record([
                c.class.clone(),
                c.iou_threshold.to_string(),
                c.num_gt.to_string(),
                c.num_det.to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.ap.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.write_record(["mAP", "", "", "", "", "", &self.map.to_string()]).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:>6} {:>6} {:>6} {:>6} {:>8}\n", "class", "gt", "det", "tp", "fp", "AP");
        for c in &self.classes {
            s.push_str(&format!(
                "{:<12} {:>6} {:>6} {:>6} {:>6} {:>8.4}\n",
                c.class, c.num_gt, c.num_det, c.tp, c.fp, c.ap
            ));
        }
        s.push_str(&format!("mAP over {} images: {:.4}\n", self.images, self.map));
        s
    }
}

/// Evaluates detections against ground truth over the same image ids.
/// Records are pooled across images in id order before ranking.
pub fn evaluate(
    dets: &BTreeMap<String, Vec<Scored>>,
    gts: &BTreeMap<String, Vec<Labeled>>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let missing_dets: Vec<&str> = gts.keys().filter(|k| !dets.contains_key(*k)).map(String::as_str).collect();
    let missing_gts: Vec<&str> = dets.keys().filter(|k| !gts.contains_key(*k)).map(String::as_str).collect();
    if !missing_dets.is_empty() || !missing_gts.is_empty() {
        return Err(Error::Data(format!(
            "image ids differ: no detections for [{}]; no labels for [{}]",
            missing_dets.join(", "),
            missing_gts.join(", ")
        )));
    }
    let n = cfg.num_classes();
    if let Some(bad) = dets.values().flatten().map(|d| d.class).chain(gts.values().flatten().map(|g| g.class)).find(|&c| c >= n)
    {
        return Err(Error::Data(format!("class index {bad} outside the {n} evaluated classes")));
    }
    let mut records: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n];
    let mut num_gt = vec![0usize; n];
    for (id, image_gts) in gts {
        let image_dets = &dets[id];
        let tp = match_detections(image_dets, image_gts, &cfg.iou_thresholds);
        for i in confidence_order(image_dets) {
            records[image_dets[i].class].push((image_dets[i].confidence, tp[i]));
        }
        for g in image_gts {
            num_gt[g.class] += 1;
        }
    }
    let classes: Vec<ClassResult> = (0..n)
        .map(|c| {
            let tp = records[c].iter().filter(|r| r.1).count();
            ClassResult {
                class: cfg.class_names[c].clone(),
                iou_threshold: cfg.iou_thresholds[c],
                num_gt: num_gt[c],
                num_det: records[c].len(),
                tp,
                fp: records[c].len() - tp,
                ap: average_precision(&records[c], num_gt[c]),
            }
        })
        .collect();
    let map = mean_ap(&classes.iter().map(|c| c.ap).collect::<Vec<_>>());
    Ok(EvalReport { images: gts.len(), classes, map })
}

/// `class confidence left top right bottom`.
pub fn format_detection_line(class_name: &str, d: &Scored) -> String {
    let [l, t, r, b] = d.bbox.corners();
    format!("{class_name} {:.6} {l:.2} {t:.2} {r:.2} {b:.2}", d.confidence)
}

pub fn parse_detections(text: &str, cfg: &EvalConfig) -> Result<Vec<Scored>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        if fields.len() != 6 {
            return Err(err(format!("expected `class confidence l t r b`, got {} fields", fields.len())));
        }
        let class = cfg.class_index(fields[0]).ok_or_else(|| err(format!("unknown class `{}`", fields[0])))?;
        let mut v = [0.0; 5];
        for (k, raw) in fields[1..].iter().enumerate() {
            v[k] = raw.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| err(format!("`{raw}` is not a number")))?;
        }
        out.push(Scored { class, confidence: v[0], bbox: BBox::from_corners(v[1], v[2], v[3], v[4]) });
    }
    Ok(out)
}

/// Every `*.txt` detection file in `dir`, keyed by file stem.
pub fn read_detection_dir(dir: &Path, cfg: &EvalConfig) -> Result<BTreeMap<String, Vec<Scored>>> {
    let mut out = BTreeMap::new();
    for path in kitti::files_with_extension(dir, DETECTION_EXTENSION)? {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let dets = parse_detections(&text, cfg).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", path.display()) },
            other => other,
        })?;
        out.insert(kitti::file_stem(&path), dets);
    }
    Ok(out)
}

/// KITTI label directory converted for evaluation.
pub fn read_ground_truth_dir(dir: &Path) -> Result<BTreeMap<String, Vec<Labeled>>> {
    Ok(kitti::read_label_dir(dir)?.into_iter().map(|(id, b)| (id, b.iter().map(Labeled::from).collect())).collect())
}
