//! KITTI 2-D object labels and seeded dataset splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::head::BBox;

pub const NUM_CLASSES: usize = 3;
pub const DEFAULT_SPLIT: [f64; 3] = [0.5, 0.3, 0.2];
pub const LABEL_EXTENSION: &str = "txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; NUM_CLASSES] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }

    /// Folds a raw KITTI type into the evaluated classes; `None` means the
    /// object is ignored (`DontCare`, `Truck`, `Tram`, `Misc`, ...).
    pub fn from_kitti_type(t: &str) -> Option<Self> {
        match t {
            "Car" | "Van" => Some(ObjectClass::Car),
            "Pedestrian" | "Person_sitting" => Some(ObjectClass::Pedestrian),
            "Cyclist" => Some(ObjectClass::Cyclist),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class `{s}` (expected Car, Pedestrian or Cyclist)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruthBox {
    pub class: ObjectClass,
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
    pub image_id: String,
}

impl GroundTruthBox {
    pub fn bbox(&self) -> BBox {
        BBox::from_corners(self.left, self.top, self.right, self.bottom)
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }
}

/// Parses one KITTI label file. Blank lines are allowed; any other line
/// must carry a type, truncation, occlusion, alpha and four box corners.
pub fn parse_kitti_label(text: &str, image_id: &str) -> Result<Vec<GroundTruthBox>> {
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if fields.len() < 8 {
            return Err(err(format!("expected at least 8 fields, found {}", fields.len())));
        }
        let mut corners = [0.0; 4];
        for (k, raw) in fields[4..8].iter().enumerate() {
            corners[k] = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bbox field {} is not a number: `{raw}`", k + 1)))?;
        }
        let Some(class) = ObjectClass::from_kitti_type(fields[0]) else {
            continue;
        };
        let [left, top, right, bottom] = corners;
        if !(right > left && bottom > top) {
            return Err(err(format!("degenerate box ({left}, {top}, {right}, {bottom})")));
        }
        boxes.push(GroundTruthBox { class, left, top, right, bottom, image_id: image_id.to_string() });
    }
    Ok(boxes)
}

/// Writes boxes back as KITTI lines with the non-2-D fields set to the
/// dataset's "unknown" values.
pub fn serialize_kitti_label(boxes: &[GroundTruthBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{} 0.00 0 -10 {} {} {} {} -1 -1 -1 -1000 -1000 -1000 -10\n",
            b.class, b.left, b.top, b.right, b.bottom
        ));
    }
    out
}

/// Every `*.txt` label in `dir`, keyed by file stem.
pub fn read_label_dir(dir: &Path) -> Result<BTreeMap<String, Vec<GroundTruthBox>>> {
    let mut out = BTreeMap::new();
    for path in files_with_extension(dir, LABEL_EXTENSION)? {
        let id = file_stem(&path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let boxes = parse_kitti_label(&text, &id).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", path.display()) },
            other => other,
        })?;
        out.insert(id, boxes);
    }
    Ok(out)
}

/// Files in `dir` with extension `ext` (case-insensitive), sorted by path.
pub fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let matches = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext));
        if matches && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub const FILES: [&'static str; 3] = ["train.txt", "val.txt", "test.txt"];

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    fn parts(&self) -> [&Vec<String>; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Writes `train.txt`, `val.txt` and `test.txt`, one id per line.
    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ids) in Self::FILES.iter().zip(self.parts()) {
            let path = dir.join(name);
            let mut text = ids.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Self> {
        let mut parts = Vec::with_capacity(3);
        for name in Self::FILES {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            parts.push(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
        }
        let test = parts.pop().expect("three parts");
        let val = parts.pop().expect("three parts");
        let train = parts.pop().expect("three parts");
        Ok(DatasetSplit { train, val, test })
    }
}

/// Part sizes for `n` items: floors of `n * ratio`, with the leftover
/// items going to the largest fractional remainders (earlier parts win ties).
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    // snap products like 0.3 * 10 = 3.0000000000000004 back onto the integer
    let quotas = ratios.map(|r| {
        let q = n as f64 * r;
        if (q - q.round()).abs() <= 1e-9 * q.max(1.0) {
            q.round()
        } else {
            q
        }
    });
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Shuffles `ids` with a seeded ChaCha8 stream and cuts the result into
/// train, validation and test parts sized by [`split_sizes`].
pub fn split_dataset(ids: &[String], seed: u64, ratios: [f64; 3]) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty id list".into()));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate image id `{dup}`")));
    }
    let [n_train, n_val, _] = split_sizes(ids.len(), ratios)?;
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(DatasetSplit { train: shuffled, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_maps_classes() {
        let text = "Car 0.00 0 -1.57 100.0 120.0 200.0 180.0 1.5 1.6 3.9 1.0 1.7 20.0 -1.5\n\
                    Van 0.00 0 0 1 2 3 4\n\
                    DontCare -1 -1 -10 5 5 9 9 -1 -1 -1 -1000 -1000 -1000 -10\n\
                    \n\
                    Person_sitting 0 0 0 10 10 20 30\n\
                    Tram 0 0 0 1 1 2 2\n";
        let boxes = parse_kitti_label(text, "000001").unwrap();
        assert_eq!(boxes.len(), 3);
        assert_eq!(boxes[0].class, ObjectClass::Car);
        assert_eq!((boxes[0].left, boxes[0].top, boxes[0].right, boxes[0].bottom), (100.0, 120.0, 200.0, 180.0));
        assert_eq!(boxes[1].class, ObjectClass::Car);
        assert_eq!(boxes[2].class, ObjectClass::Pedestrian);
        assert!(boxes.iter().all(|b| b.image_id == "000001"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_kitti_label("Car 0 0 0 a 1 2 3", "x") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_kitti_label("Car 0 0 0 1 1 2 2\nCyclist 0 0", "x") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_kitti_label("Car 0 0 0 5 1 2 3", "x").is_err());
        // a malformed box is an error even on an ignored type
        assert!(parse_kitti_label("DontCare 0 0 0 x 1 2 3", "x").is_err());
    }

    #[test]
    fn serialize_round_trips() {
        let text = "Cyclist 0 0 0 0.1 2.25 30.5 40.125\nCar 0 0 0 1e-3 1 712.4 374\n";
        let boxes = parse_kitti_label(text, "a").unwrap();
        assert_eq!(parse_kitti_label(&serialize_kitti_label(&boxes), "a").unwrap(), boxes);
    }

    #[test]
    fn split_sizes_examples() {
        assert_eq!(split_sizes(7480, DEFAULT_SPLIT).unwrap(), [3740, 2244, 1496]);
        assert_eq!(split_sizes(10, DEFAULT_SPLIT).unwrap(), [5, 3, 2]);
        assert_eq!(split_sizes(1, DEFAULT_SPLIT).unwrap(), [1, 0, 0]);
        assert_eq!(split_sizes(3, [1.0 / 3.0; 3]).unwrap(), [1, 1, 1]);
        assert!(split_sizes(10, [0.5, 0.5, 0.5]).is_err());
        assert!(split_sizes(10, [1.5, -0.5, 0.0]).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let ids: Vec<String> = (0..50).map(|i| format!("{i:06}")).collect();
        let a = split_dataset(&ids, 7, DEFAULT_SPLIT).unwrap();
        assert_eq!(a, split_dataset(&ids, 7, DEFAULT_SPLIT).unwrap());
        let b = split_dataset(&ids, 8, DEFAULT_SPLIT).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.sizes(), b.sizes());
        assert!(split_dataset(&[], 0, DEFAULT_SPLIT).is_err());
        assert!(split_dataset(&["a".into(), "a".into()], 0, DEFAULT_SPLIT).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..7).map(|i| i.to_string()).collect();
        let split = split_dataset(&ids, 1, DEFAULT_SPLIT).unwrap();
        split.write_manifest(dir.path()).unwrap();
        assert_eq!(DatasetSplit::read_manifest(dir.path()).unwrap(), split);
    }
}
