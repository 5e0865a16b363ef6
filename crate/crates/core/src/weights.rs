//! `YOFW` weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "YOFW"                    4 bytes magic
//! version: u16              currently 1
//! count:   u32              number of entries
//! count x {
//!     name_len: u16, name: [u8; name_len]   UTF-8
//!     dtype: u8                             0 = f32, 1 = f16
//!     rank:  u8, dims: [u32; rank]
//!     payload: [f32 | f16; prod(dims)]
//! }
//! crc: u32                  CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Each parametric layer of a graph owns one rank-2 entry named after the
//! layer id, with one row per output channel: the flattened kernel followed
//! by the folded batch-norm `scale, shift` (or by the bias for detect layers).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerKind};

pub const MAGIC: [u8; 4] = *b"YOFW";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4;
pub const CRC_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            _ => None,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "fp32" => Ok(DType::F32),
            "f16" | "fp16" => Ok(DType::F16),
            other => Err(Error::InvalidArgument(format!("unknown dtype `{other}`; choose f32 or f16"))),
        }
    }
}

/// A named tensor. Values are held as `f32`; `F16` entries are rounded to
/// half precision on construction so that saving never loses information.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl WeightEntry {
    pub fn new(name: impl Into<String>, dtype: DType, dims: Vec<usize>, mut data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("entry name of {} bytes is too long", name.len())));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidArgument(format!("entry `{name}` dims {dims:?} not representable")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "entry `{name}`: {} values for dims {dims:?}",
                data.len()
            )));
        }
        if dtype == DType::F16 {
            for v in &mut data {
                *v = f16::from_f32(*v).to_f32();
            }
        }
        Ok(WeightEntry { name, dtype, dims, data })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn encoded_len(&self) -> usize {
        entry_encoded_len(self.name.len(), self.dims.len(), self.data.len(), self.dtype)
    }
}

fn entry_encoded_len(name_len: usize, rank: usize, numel: usize, dtype: DType) -> usize {
    2 + name_len + 1 + 1 + 4 * rank + numel * dtype.size()
}

/// Exact on-disk size of a store holding `(name, dims)` entries of one dtype.
pub fn predicted_file_size<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize])>, dtype: DType) -> usize {
    HEADER_LEN
        + entries
            .into_iter()
            .map(|(name, dims)| entry_encoded_len(name.len(), dims.len(), dims.iter().product(), dtype))
            .sum::<usize>()
        + CRC_LEN
}

/// `(layer id, entry dims)` for every parametric layer, in graph order.
pub fn graph_layout(g: &Graph) -> Vec<(String, Vec<usize>)> {
    g.parametric_layers()
        .map(|(i, l)| {
            let dims = l.kind.weight_dims(g.input_shapes_of(i)[0]).expect("parametric layer");
            (l.id.clone(), dims.to_vec())
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: WeightEntry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate entry name `{}`", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.entries.iter().map(WeightEntry::encoded_len).sum::<usize>() + CRC_LEN
    }

    /// CRC-32 of the serialized manifest and payload.
    pub fn checksum(&self) -> u32 {
        let bytes = self.to_bytes();
        u32::from_le_bytes(bytes[bytes.len() - CRC_LEN..].try_into().unwrap())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match e.dtype {
                DType::F32 => e.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F16 => e.data.iter().for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, end: bytes.len() };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u16("version")?;
        if version == VERSION.swap_bytes() {
            return Err(Error::ByteOrder);
        }
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(Error::Truncated { offset: bytes.len(), what: "header" });
        }
        r.end = bytes.len() - CRC_LEN;
        let count = r.u32("entry count")? as usize;
        let mut store = WeightStore::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "entry name")?)
                .map_err(|_| Error::Malformed(format!("entry name at byte {} is not UTF-8", r.pos - name_len)))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Malformed(format!("duplicate entry `{name}`")));
            }
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Malformed(format!("entry `{name}`: dtype tag {tag}")))?;
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
            let Some((numel, nbytes)) = numel else {
                return Err(Error::Malformed(format!("entry `{name}`: dims {dims:?} overflow")));
            };
            let raw = r.take(nbytes, "payload")?;
            let data: Vec<f32> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                DType::F16 => raw.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32()).collect(),
            };
            debug_assert_eq!(data.len(), numel);
            store.entries.push(WeightEntry { name, dtype, dims, data });
        }
        if r.pos != r.end {
            return Err(Error::Malformed(format!("{} trailing bytes before checksum", r.end - r.pos)));
        }
        let stored = u32::from_le_bytes(bytes[r.end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..r.end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return Err(Error::Truncated { offset: self.pos, what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// One entry per parametric layer: kernels uniform in `±1/sqrt(fan_in)`,
/// batch-norm scale 1 and shift 0, detect bias 0.
pub fn init_random(g: &Graph, seed: u64, dtype: DType) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for (i, layer) in g.parametric_layers() {
        let input = g.input_shapes_of(i)[0];
        let [rows, cols] = layer.kind.weight_dims(input).expect("parametric layer");
        let affine = if matches!(layer.kind, LayerKind::Detect { .. }) { 1 } else { 2 };
        let fan_in = cols - affine;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend((0..fan_in).map(|_| rng.random_range(-bound..bound)));
            if affine == 2 {
                data.extend_from_slice(&[1.0, 0.0]);
            } else {
                data.push(0.0);
            }
        }
        let entry = WeightEntry::new(layer.id.clone(), dtype, vec![rows, cols], data).expect("dims match data");
        store.push(entry).expect("layer ids are unique");
    }
    store
}
