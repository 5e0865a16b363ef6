//! Builders for the detector variants and the blocks they are made of.
//!
//! | variant    | backbone             | neck                          | heads |
//! |------------|----------------------|-------------------------------|-------|
//! | `base-csp` | CSP dense            | three-level PANet             | 3     |
//! | `s`        | ShuffleNetV2 1.0x    | three-level PANet             | 3     |
//! | `p`        | CSP dense            | simplified two-level PANet    | 2     |
//! | `s+p`      | ShuffleNetV2 1.0x    | simplified two-level PANet    | 2     |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{FeatShape, Graph, GraphBuilder, LayerKind, LayerSpec, INPUT};

pub const DEFAULT_INPUT_SIZE: usize = 416;
pub const DEFAULT_CLASSES: usize = 3;
pub const DEFAULT_ANCHORS_PER_SCALE: usize = 3;

/// ShuffleNetV2 1.0x: stem width, then (width, repeats) per stage.
const SHUFFLE_STEM: usize = 24;
const SHUFFLE_STAGES: [(usize, usize); 3] = [(116, 4), (232, 8), (464, 4)];

/// CSP backbone: stem width, then (width, dense convs) per stride-2 stage.
const CSP_STEM: usize = 16;
const CSP_STAGES: [(usize, usize); 5] = [(32, 1), (64, 1), (128, 2), (256, 2), (512, 2)];

/// Neck widths at strides 8, 16 and 32.
const NECK_WIDTHS: [usize; 3] = [48, 96, 192];
const SPP_KERNELS: [usize; 3] = [5, 9, 13];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// ShuffleNet backbone, full neck.
    S,
    /// CSP backbone, simplified neck.
    P,
    /// ShuffleNet backbone, simplified neck.
    SP,
    /// Cost skeleton of the uncompressed baseline.
    BaseCsp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SP, Variant::S, Variant::P, Variant::BaseCsp];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::S => "s",
            Variant::P => "p",
            Variant::SP => "s+p",
            Variant::BaseCsp => "base-csp",
        }
    }

    pub fn pyramid_levels(self) -> usize {
        match self {
            Variant::S | Variant::BaseCsp => 3,
            Variant::P | Variant::SP => 2,
        }
    }

    /// Strides of the detection heads, ascending.
    pub fn strides(self) -> &'static [usize] {
        match self.pyramid_levels() {
            3 => &[8, 16, 32],
            _ => &[16, 32],
        }
    }

    fn shuffle_backbone(self) -> bool {
        matches!(self, Variant::S | Variant::SP)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Variant::S),
            "p" => Ok(Variant::P),
            "s+p" | "sp" => Ok(Variant::SP),
            "base-csp" | "base" => Ok(Variant::BaseCsp),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}`; choose one of s, p, s+p, base-csp"
            ))),
        }
    }
}

fn pw(c_out: usize) -> LayerKind {
    LayerKind::Conv { c_out, kernel: 1, stride: 1, groups: 1, leaky: true }
}

/// Appends one ShuffleNetV2 unit reading `input` and returns the id of its output.
///
/// The basic unit keeps the first half of the channels as a shortcut and runs
/// 1x1 -> 3x3 depthwise -> 1x1 on the second half. The downsampling unit feeds
/// the whole input to both branches, each with a stride-2 depthwise conv, and
/// produces `c_out` channels.
fn shuffle_unit(b: &mut GraphBuilder, prefix: &str, input: &str, c_out: usize, downsample: bool) -> Result<String> {
    let c_in = b.channels(input);
    let id = |s: &str| format!("{prefix}.{s}");
    let (left, right) = if downsample {
        if c_out % 2 != 0 {
            return Err(Error::InvalidArgument(format!("shuffle unit output width {c_out} must be even")));
        }
        let half = c_out / 2;
        let l = b.dwconv(id("l.dw"), input, 2)?;
        let l = b.add(id("l.pw"), pw(half), &[&l])?;
        let r = b.add(id("r.pw1"), pw(half), &[input])?;
        let r = b.dwconv(id("r.dw"), &r, 2)?;
        let r = b.add(id("r.pw2"), pw(half), &[&r])?;
        (l, r)
    } else {
        if c_in % 2 != 0 || c_out != c_in {
            return Err(Error::InvalidArgument(format!(
                "basic shuffle unit needs an even width preserved end to end, got {c_in} -> {c_out}"
            )));
        }
        let half = c_in / 2;
        let l = b.add(id("split.l"), LayerKind::SplitTake { start: 0, len: half }, &[input])?;
        let r = b.add(id("split.r"), LayerKind::SplitTake { start: half, len: half }, &[input])?;
        let r = b.add(id("pw1"), pw(half), &[&r])?;
        let r = b.dwconv(id("dw"), &r, 1)?;
        let r = b.add(id("pw2"), pw(half), &[&r])?;
        (l, r)
    };
    let cat = b.concat(id("cat"), &[&left, &right])?;
    b.add(id("shuffle"), LayerKind::Shuffle { groups: 2 }, &[&cat])
}

/// Layers of a single ShuffleNetV2 unit on a `c`-channel input named
/// [`INPUT`]. The downsampling unit doubles the width.
pub fn build_shuffle_unit(c: usize, downsample: bool) -> Result<Vec<LayerSpec>> {
    let mut b = GraphBuilder::new(FeatShape::new(c, 52, 52));
    let c_out = if downsample { 2 * c } else { c };
    shuffle_unit(&mut b, "unit", INPUT, c_out, downsample)?;
    Ok(b.into_layers())
}

/// Appends a CSP dense block: half the channels cross the stage untouched,
/// the other half goes through `n_convs` densely connected 3x3 convs (each
/// adds `c/2` channels to the running concatenation), then both are
/// concatenated and fused back to `c` by a 1x1 conv.
fn csp_dense_block(b: &mut GraphBuilder, prefix: &str, input: &str, n_convs: usize) -> Result<String> {
    let c = b.channels(input);
    if c % 2 != 0 {
        return Err(Error::InvalidArgument(format!("CSP block width {c} must be even")));
    }
    if n_convs < 1 {
        return Err(Error::InvalidArgument("CSP block needs at least one dense conv".into()));
    }
    let half = c / 2;
    let id = |s: String| format!("{prefix}.{s}");
    let cross = b.add(id("split.cross".into()), LayerKind::SplitTake { start: 0, len: half }, &[input])?;
    let mut dense = b.add(id("split.dense".into()), LayerKind::SplitTake { start: half, len: half }, &[input])?;
    for i in 0..n_convs {
        let grown = b.conv(id(format!("dense{i}.conv")), &dense, half, 3, 1)?;
        dense = b.concat(id(format!("dense{i}.cat")), &[&dense, &grown])?;
    }
    let merged = b.concat(id("cat".into()), &[&cross, &dense])?;
    b.conv(id("fuse".into()), &merged, c, 1, 1)
}

/// Layers of one CSP dense block on a `c`-channel input named [`INPUT`].
pub fn build_csp_dense_block(c: usize, n_convs: usize) -> Result<Vec<LayerSpec>> {
    let mut b = GraphBuilder::new(FeatShape::new(c, 52, 52));
    csp_dense_block(&mut b, "csp", INPUT, n_convs)?;
    Ok(b.into_layers())
}

/// Wraps a block's layer list into a graph whose output is its last layer.
pub fn block_graph(layers: Vec<LayerSpec>, input: FeatShape) -> Result<Graph> {
    let last = layers.last().ok_or_else(|| Error::Graph("empty block".into()))?.id.clone();
    Graph::new(layers, input, vec![last])
}

/// Backbone features at strides 8, 16 and 32.
fn shufflenet_backbone(b: &mut GraphBuilder) -> Result<[String; 3]> {
    let stem = b.conv("backbone.stem", INPUT, SHUFFLE_STEM, 3, 2)?;
    let mut x = b.add("backbone.pool", LayerKind::MaxPool { kernel: 3, stride: 2 }, &[&stem])?;
    let mut feats = Vec::new();
    for (s, &(width, repeats)) in SHUFFLE_STAGES.iter().enumerate() {
        for u in 0..repeats {
            x = shuffle_unit(b, &format!("backbone.stage{}.u{u}", s + 2), &x, width, u == 0)?;
        }
        feats.push(x.clone());
    }
    Ok(feats.try_into().expect("three stages"))
}

fn csp_backbone(b: &mut GraphBuilder) -> Result<[String; 3]> {
    let mut x = b.conv("backbone.stem", INPUT, CSP_STEM, 3, 1)?;
    let mut feats = Vec::new();
    for (s, &(width, n)) in CSP_STAGES.iter().enumerate() {
        x = b.conv(format!("backbone.stage{}.down", s + 1), &x, width, 3, 2)?;
        x = csp_dense_block(b, &format!("backbone.stage{}.csp", s + 1), &x, n)?;
        if s >= 2 {
            feats.push(x.clone());
        }
    }
    Ok(feats.try_into().expect("three pyramid stages"))
}

/// 1x1 squeeze, parallel stride-1 max-pools, concat, 1x1 fuse.
fn spp(b: &mut GraphBuilder, input: &str, width: usize) -> Result<String> {
    let x = b.add("neck.spp.squeeze", pw(width), &[input])?;
    let mut branches = vec![x.clone()];
    for k in SPP_KERNELS {
        branches.push(b.add(format!("neck.spp.pool{k}"), LayerKind::MaxPool { kernel: k, stride: 1 }, &[&x])?);
    }
    let refs: Vec<&str> = branches.iter().map(String::as_str).collect();
    let cat = b.concat("neck.spp.cat", &refs)?;
    b.add("neck.spp.fuse", pw(width), &[&cat])
}

/// Alternating 1x1 (width) / 3x3 (2*width) stack of `n` convs, ending on 1x1.
fn conv_stack(b: &mut GraphBuilder, prefix: &str, input: &str, width: usize, n: usize) -> Result<String> {
    let mut x = input.to_string();
    for i in 0..n {
        x = if i % 2 == 0 {
            b.conv(format!("{prefix}.c{i}"), &x, width, 1, 1)?
        } else {
            b.conv(format!("{prefix}.c{i}"), &x, 2 * width, 3, 1)?
        };
    }
    Ok(x)
}

/// Simplified path aggregation over strides 16 and 32: one top-down
/// upsample+concat and one bottom-up stride-2 conv+concat.
fn neck_two_level(b: &mut GraphBuilder, c4: &str, c5: &str) -> Result<[String; 2]> {
    let [_, w4, w5] = NECK_WIDTHS;
    let p5 = spp(b, c5, w5)?;

    let td = b.conv("neck.td4.reduce", &p5, w4, 1, 1)?;
    let td = b.add("neck.td4.up", LayerKind::Upsample, &[&td])?;
    let lat = b.conv("neck.td4.lateral", c4, w4, 1, 1)?;
    let cat = b.concat("neck.td4.cat", &[&lat, &td])?;
    let n4 = b.conv("neck.td4.fuse", &cat, w4, 3, 1)?;

    let down = b.conv("neck.bu5.down", &n4, w5, 3, 2)?;
    let cat = b.concat("neck.bu5.cat", &[&down, &p5])?;
    let n5 = b.conv("neck.bu5.fuse", &cat, w5, 1, 1)?;
    Ok([n4, n5])
}

/// Full path aggregation over strides 8, 16 and 32 with five-conv fusion
/// stacks, SPP wrapped in three-conv stacks.
fn neck_three_level(b: &mut GraphBuilder, c3: &str, c4: &str, c5: &str) -> Result<[String; 3]> {
    let [w3, w4, w5] = NECK_WIDTHS;
    let pre = conv_stack(b, "neck.pre", c5, w5, 3)?;
    let spp_out = spp(b, &pre, w5)?;
    let p5 = conv_stack(b, "neck.post", &spp_out, w5, 3)?;

    let td = b.conv("neck.td4.reduce", &p5, w4, 1, 1)?;
    let td = b.add("neck.td4.up", LayerKind::Upsample, &[&td])?;
    let lat = b.conv("neck.td4.lateral", c4, w4, 1, 1)?;
    let cat = b.concat("neck.td4.cat", &[&lat, &td])?;
    let p4 = conv_stack(b, "neck.td4.stack", &cat, w4, 5)?;

    let td = b.conv("neck.td3.reduce", &p4, w3, 1, 1)?;
    let td = b.add("neck.td3.up", LayerKind::Upsample, &[&td])?;
    let lat = b.conv("neck.td3.lateral", c3, w3, 1, 1)?;
    let cat = b.concat("neck.td3.cat", &[&lat, &td])?;
    let n3 = conv_stack(b, "neck.td3.stack", &cat, w3, 5)?;

    let down = b.conv("neck.bu4.down", &n3, w4, 3, 2)?;
    let cat = b.concat("neck.bu4.cat", &[&down, &p4])?;
    let n4 = conv_stack(b, "neck.bu4.stack", &cat, w4, 5)?;

    let down = b.conv("neck.bu5.down", &n4, w5, 3, 2)?;
    let cat = b.concat("neck.bu5.cat", &[&down, &p5])?;
    let n5 = conv_stack(b, "neck.bu5.stack", &cat, w5, 5)?;
    Ok([n3, n4, n5])
}

fn heads(b: &mut GraphBuilder, feats: &[String], strides: &[usize], classes: usize, anchors: usize) -> Result<Vec<String>> {
    feats
        .iter()
        .zip(strides)
        .map(|(f, s)| {
            let c = b.channels(f);
            let x = b.conv(format!("head{s}.conv"), f, c, 3, 1)?;
            b.add(format!("head{s}.detect"), LayerKind::Detect { anchors, classes }, &[&x])
        })
        .collect()
}

/// Builds a variant at the default 416x416 input; use
/// [`Graph::with_input_size`] to retarget.
pub fn build_yofflenet(variant: Variant, num_classes: usize, anchors_per_scale: usize) -> Result<Graph> {
    if num_classes < 1 {
        return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
    }
    if anchors_per_scale < 1 {
        return Err(Error::InvalidArgument("anchors_per_scale must be >= 1".into()));
    }
    let mut b = GraphBuilder::new(FeatShape::new(3, DEFAULT_INPUT_SIZE, DEFAULT_INPUT_SIZE));
    let [c3, c4, c5] = if variant.shuffle_backbone() { shufflenet_backbone(&mut b)? } else { csp_backbone(&mut b)? };
    let feats: Vec<String> = if variant.pyramid_levels() == 3 {
        neck_three_level(&mut b, &c3, &c4, &c5)?.into()
    } else {
        neck_two_level(&mut b, &c4, &c5)?.into()
    };
    let outputs = heads(&mut b, &feats, variant.strides(), num_classes, anchors_per_scale)?;
    b.finish(outputs)
}
