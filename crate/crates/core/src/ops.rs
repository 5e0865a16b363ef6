//! Layer primitives for the forward pass.
//!
//! Convolution is lowered to a patch matrix and multiplied with `sgemm`;
//! depthwise convolution runs as a direct per-channel loop. Batch norm is
//! always folded into a per-channel affine before a kernel sees it.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const BN_EPSILON: f32 = 1e-5;
pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    None,
    LeakyRelu(f32),
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(LEAKY_SLOPE)
    }

    #[inline]
    fn apply(self, v: f32) -> f32 {
        match self {
            Activation::None => v,
            Activation::LeakyRelu(slope) => {
                if v >= 0.0 {
                    v
                } else {
                    v * slope
                }
            }
        }
    }
}

/// Training-time batch-norm statistics for one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta` as `scale * x + shift`.
    pub fn fold(&self) -> Result<ChannelAffine> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::InvalidArgument("batch-norm vectors differ in length".into()));
        }
        if let Some(i) = self.var.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument(format!("batch-norm variance of channel {i} is not positive")));
        }
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for i in 0..c {
            let s = self.gamma[i] / (self.var[i] + BN_EPSILON).sqrt();
            scale.push(s);
            shift.push(self.beta[i] - s * self.mean[i]);
        }
        Ok(ChannelAffine { scale, shift })
    }
}

/// Per-output-channel `scale * x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl ChannelAffine {
    pub fn identity(channels: usize) -> Self {
        ChannelAffine { scale: vec![1.0; channels], shift: vec![0.0; channels] }
    }

    /// Plain additive bias, as used by the detection convs.
    pub fn bias(bias: Vec<f32>) -> Self {
        ChannelAffine { scale: vec![1.0; bias.len()], shift: bias }
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }
}

/// A BN-folded convolution: weights of shape `(c_out, c_in/groups, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub name: String,
    pub weights: Tensor,
    pub affine: ChannelAffine,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub activation: Activation,
}

impl ConvParams {
    pub fn new(name: impl Into<String>, weights: Tensor, affine: ChannelAffine) -> Self {
        ConvParams {
            name: name.into(),
            weights,
            affine,
            stride: 1,
            padding: 0,
            groups: 1,
            activation: Activation::None,
        }
    }

    pub fn with_batch_norm(name: impl Into<String>, weights: Tensor, bn: &BatchNorm) -> Result<Self> {
        Ok(Self::new(name, weights, bn.fold()?))
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().c * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().h
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weights.shape();
        let err = |msg: String| Err(Error::shape(format!("conv `{}`", self.name), msg));
        if ws.h != ws.w {
            return err(format!("kernel must be square, got {}x{}", ws.h, ws.w));
        }
        if self.stride == 0 {
            return err("stride must be >= 1".into());
        }
        if self.groups == 0 || ws.n % self.groups != 0 {
            return err(format!("groups {} does not divide c_out {}", self.groups, ws.n));
        }
        if self.affine.scale.len() != ws.n || self.affine.shift.len() != ws.n {
            return err(format!("affine has {} channels, c_out is {}", self.affine.len(), ws.n));
        }
        Ok(())
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        let op = || format!("conv `{}`", self.name);
        if input.c != self.c_in() {
            return Err(Error::shape(
                op(),
                format!("input has {} channels, layer expects {} (groups {})", input.c, self.c_in(), self.groups),
            ));
        }
        let h = conv_out_dim(input.h, self.kernel(), self.stride, self.padding)
            .ok_or_else(|| Error::shape(op(), format!("kernel {} does not fit input {input}", self.kernel())))?;
        let w = conv_out_dim(input.w, self.kernel(), self.stride, self.padding)
            .ok_or_else(|| Error::shape(op(), format!("kernel {} does not fit input {input}", self.kernel())))?;
        Ok(Shape::new(input.n, self.c_out(), h, w))
    }
}

/// `floor((size + 2*pad - k) / stride) + 1`, or `None` if the kernel does not fit.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn finish_channel(out: &mut [f32], scale: f32, shift: f32, act: Activation) {
    for v in out {
        *v = act.apply(scale * *v + shift);
    }
}

/// Unfold one group of one image into a `(cin_g*k*k) x (h_out*w_out)` matrix.
fn im2col(x: &Tensor, n: usize, c_start: usize, c_len: usize, k: usize, stride: usize, pad: usize, out: Shape, col: &mut [f32]) {
    let s = x.shape();
    let cols = out.h * out.w;
    let mut row = 0;
    for c in c_start..c_start + c_len {
        let plane = x.channel(n, c);
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..out.h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * out.w..(oy + 1) * out.w];
                    if iy < 0 || iy >= s.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= s.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major `c = a * b` with `a: m x k`, `b: k x n`.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided ranges asserted above and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Grouped 2-D convolution with zero padding, followed by the folded
/// affine and the activation.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let out_shape = p.output_shape(x.shape())?;
    let k = p.kernel();
    let cin_g = p.c_in() / p.groups;
    let cout_g = p.c_out() / p.groups;
    let kk = cin_g * k * k;
    let cols = out_shape.plane();
    let pointwise = k == 1 && p.stride == 1 && p.padding == 0;

    let mut out = Tensor::zeros(out_shape);
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; kk * cols] };
    let weights = p.weights.data();

    for n in 0..out_shape.n {
        for g in 0..p.groups {
            let w_g = &weights[g * cout_g * kk..(g + 1) * cout_g * kk];
            let o_start = out.index(n, g * cout_g, 0, 0);
            let dst = &mut out.data_mut()[o_start..o_start + cout_g * cols];
            if pointwise {
                let i_start = x.index(n, g * cin_g, 0, 0);
                gemm(cout_g, kk, cols, w_g, &x.data()[i_start..i_start + kk * cols], dst);
            } else {
                im2col(x, n, g * cin_g, cin_g, k, p.stride, p.padding, out_shape, &mut col);
                gemm(cout_g, kk, cols, w_g, &col, dst);
            }
        }
        for c in 0..out_shape.c {
            finish_channel(out.channel_mut(n, c), p.affine.scale[c], p.affine.shift[c], p.activation);
        }
    }
    Ok(out)
}

/// Per-channel spatial convolution (`groups == c_in == c_out`).
pub fn depthwise_conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let c = x.shape().c;
    if p.groups != c || p.c_out() != c || p.weights.shape().c != 1 {
        return Err(Error::shape(
            format!("dwconv `{}`", p.name),
            format!("depthwise needs groups == c_in == c_out, got groups {} c_in {c} c_out {}", p.groups, p.c_out()),
        ));
    }
    let out_shape = p.output_shape(x.shape())?;
    let s = x.shape();
    let k = p.kernel();
    let (stride, pad) = (p.stride as isize, p.padding as isize);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for ch in 0..c {
            let src = x.channel(n, ch);
            let kern = &p.weights.data()[ch * k * k..(ch + 1) * k * k];
            let dst = out.channel_mut(n, ch);
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        let iy = oy as isize * stride + ky as isize - pad;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * s.w..];
                        for kx in 0..k {
                            let ix = ox as isize * stride + kx as isize - pad;
                            if ix >= 0 && ix < s.w as isize {
                                acc += kern[ky * k + kx] * row[ix as usize];
                            }
                        }
                    }
                    dst[oy * out_shape.w + ox] = acc;
                }
            }
            finish_channel(dst, p.affine.scale[ch], p.affine.shift[ch], p.activation);
        }
    }
    Ok(out)
}

/// Channels `[start, start + len)` of every batch item.
pub fn channel_slice(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::shape("channel_slice", format!("range {start}..{} outside {} channels", start + len, s.c)));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let from = x.index(n, start, 0, 0);
        data.extend_from_slice(&x.data()[from..from + len * plane]);
    }
    Tensor::new(Shape::new(s.n, len, s.h, s.w), data)
}

/// Split into the first and second half of the channels.
pub fn channel_split(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = x.shape().c;
    if c % 2 != 0 {
        return Err(Error::shape("channel_split", format!("channel count {c} is odd")));
    }
    Ok((channel_slice(x, 0, c / 2)?, channel_slice(x, c / 2, c / 2)?))
}

/// Reshape channels to `(groups, c/groups)`, transpose, flatten: input
/// channel `i` lands at `(i % (c / groups)) * groups + i / (c / groups)`.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let s = x.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::shape("channel_shuffle", format!("{} channels not divisible by {groups} groups", s.c)));
    }
    let per_group = s.c / groups;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for i in 0..s.c {
            let dst = (i % per_group) * groups + i / per_group;
            out.channel_mut(n, dst).copy_from_slice(x.channel(n, i));
        }
    }
    Ok(out)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?.shape();
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape("concat", format!("spatial/batch mismatch: {first} vs {s}")));
        }
    }
    let c: usize = xs.iter().map(|t| t.shape().c).sum();
    let plane = first.plane();
    let mut data = Vec::with_capacity(first.n * c * plane);
    for n in 0..first.n {
        for t in xs {
            let s = t.shape();
            let from = t.index(n, 0, 0, 0);
            data.extend_from_slice(&t.data()[from..from + s.c * plane]);
        }
    }
    Tensor::new(Shape::new(first.n, c, first.h, first.w), data)
}

/// Sliding-window maximum; padded cells count as negative infinity.
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    if k == 0 || stride == 0 {
        return Err(Error::shape("maxpool", format!("kernel {k} and stride {stride} must be >= 1")));
    }
    if pad >= k {
        return Err(Error::shape("maxpool", format!("padding {pad} must be smaller than kernel {k}")));
    }
    let s = x.shape();
    let oh = conv_out_dim(s.h, k, stride, pad).ok_or_else(|| Error::shape("maxpool", format!("kernel {k} does not fit {s}")))?;
    let ow = conv_out_dim(s.w, k, stride, pad).ok_or_else(|| Error::shape("maxpool", format!("kernel {k} does not fit {s}")))?;
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.channel(n, c);
            let dst = out.channel_mut(n, c);
            for oy in 0..oh {
                let y0 = (oy * stride).saturating_sub(pad);
                let y1 = (oy * stride + k - pad).min(s.h);
                for ox in 0..ow {
                    let x0 = (ox * stride).saturating_sub(pad);
                    let x1 = (ox * stride + k - pad).min(s.w);
                    let mut m = f32::NEG_INFINITY;
                    for yy in y0..y1 {
                        for &v in &src[yy * s.w + x0..yy * s.w + x1] {
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    dst[oy * ow + ox] = m;
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.channel(n, c);
            let dst = out.channel_mut(n, c);
            for y in 0..2 * s.h {
                let row = &src[(y / 2) * s.w..(y / 2 + 1) * s.w];
                for (xx, d) in dst[y * 2 * s.w..(y + 1) * 2 * s.w].iter_mut().enumerate() {
                    *d = row[xx / 2];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape) -> Tensor {
        Tensor::filled(shape, 1.0)
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = ones(Shape::new(1, 1, 3, 3));
        let p = ConvParams::new("c", ones(Shape::new(1, 1, 3, 3)), ChannelAffine::identity(1)).padding(1);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn identity_batch_norm_folds_to_near_unit_scale() {
        let a = BatchNorm::identity(2).fold().unwrap();
        let expected = 1.0 / (1.0f32 + BN_EPSILON).sqrt();
        assert_eq!(a.scale, vec![expected; 2]);
        assert_eq!(a.shift, vec![0.0; 2]);

        let bn = BatchNorm { gamma: vec![2.0], beta: vec![0.5], mean: vec![3.0], var: vec![4.0 - BN_EPSILON] };
        let a = bn.fold().unwrap();
        assert!((a.scale[0] - 1.0).abs() < 1e-6);
        assert!((a.shift[0] - (0.5 - 3.0)).abs() < 1e-6);
    }

    #[test]
    fn nonpositive_variance_rejected() {
        let mut bn = BatchNorm::identity(3);
        bn.var[1] = 0.0;
        assert!(bn.fold().is_err());
    }

    #[test]
    fn stem_conv_shape() {
        let x = Tensor::zeros(Shape::new(1, 3, 416, 416));
        let p = ConvParams::new("stem", Tensor::zeros(Shape::new(24, 3, 3, 3)), ChannelAffine::identity(24))
            .stride(2)
            .padding(1);
        assert_eq!(conv2d(&x, &p).unwrap().shape(), Shape::new(1, 24, 208, 208));
    }

    #[test]
    fn conv_errors_name_the_layer() {
        let x = Tensor::zeros(Shape::new(1, 5, 4, 4));
        let p = ConvParams::new("neck.lat4", Tensor::zeros(Shape::new(8, 4, 1, 1)), ChannelAffine::identity(8));
        let msg = conv2d(&x, &p).unwrap_err().to_string();
        assert!(msg.contains("neck.lat4"), "{msg}");

        let p = ConvParams::new("g", Tensor::zeros(Shape::new(6, 2, 3, 3)), ChannelAffine::identity(6)).groups(4);
        assert!(conv2d(&Tensor::zeros(Shape::new(1, 8, 4, 4)), &p).is_err());
    }

    #[test]
    fn leaky_activation_applies_after_affine() {
        let x = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap();
        let p = ConvParams::new("a", ones(Shape::new(1, 1, 1, 1)), ChannelAffine { scale: vec![2.0], shift: vec![-1.0] })
            .activation(Activation::leaky());
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[1.0, -0.5]);
    }

    #[test]
    fn depthwise_identity_kernel_is_identity() {
        let x = Tensor::from_fn(Shape::new(1, 3, 5, 4), |_, c, h, w| (c * 100 + h * 10 + w) as f32);
        let kern = Tensor::from_fn(Shape::new(3, 1, 3, 3), |_, _, h, w| if h == 1 && w == 1 { 1.0 } else { 0.0 });
        let p = ConvParams::new("dw", kern, ChannelAffine::identity(3)).padding(1).groups(3);
        assert_eq!(depthwise_conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn depthwise_stride_two_shape() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let p = ConvParams::new("dw", Tensor::zeros(Shape::new(2, 1, 3, 3)), ChannelAffine::identity(2))
            .stride(2)
            .padding(1)
            .groups(2);
        assert_eq!(depthwise_conv2d(&x, &p).unwrap().shape(), Shape::new(1, 2, 2, 2));
        let bad = p.clone().groups(1);
        assert!(depthwise_conv2d(&x, &bad).is_err());
    }

    #[test]
    fn split_halves() {
        let x = Tensor::zeros(Shape::new(1, 116, 2, 2));
        let (a, b) = channel_split(&x).unwrap();
        assert_eq!(a.shape().c, 58);
        assert_eq!(b.shape().c, 58);

        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![7.0, 9.0]).unwrap();
        let (a, b) = channel_split(&x).unwrap();
        assert_eq!((a.data(), b.data()), (&[7.0][..], &[9.0][..]));
        assert!(channel_split(&Tensor::zeros(Shape::new(1, 3, 1, 1))).is_err());
    }

    #[test]
    fn shuffle_interleaves_groups() {
        let x = Tensor::new(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(channel_shuffle(&x, 2).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        let six = Tensor::from_fn(Shape::new(1, 6, 1, 1), |_, c, _, _| c as f32);
        assert_eq!(channel_shuffle(&six, 2).unwrap().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(channel_shuffle(&six, 3).unwrap().data(), &[0.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
        assert!(channel_shuffle(&x, 3).is_err());
    }

    #[test]
    fn concat_in_argument_order() {
        let a = Tensor::filled(Shape::new(1, 1, 2, 2), 1.0);
        let b = Tensor::filled(Shape::new(1, 1, 2, 2), 2.0);
        let c = Tensor::filled(Shape::new(1, 1, 2, 2), 3.0);
        let y = concat_channels(&[&a, &b, &c]).unwrap();
        assert_eq!(y.channel(0, 0), &[1.0; 4]);
        assert_eq!(y.channel(0, 1), &[2.0; 4]);
        assert_eq!(y.channel(0, 2), &[3.0; 4]);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);

        let x = Tensor::zeros(Shape::new(1, 58, 26, 26));
        assert_eq!(concat_channels(&[&x, &x]).unwrap().shape(), Shape::new(1, 116, 26, 26));
        let odd = Tensor::zeros(Shape::new(1, 1, 3, 2));
        assert!(concat_channels(&[&a, &odd]).is_err());
    }

    #[test]
    fn spp_pool_preserves_shape_and_constants() {
        let x = Tensor::filled(Shape::new(1, 3, 13, 13), 0.25);
        for k in [5, 9, 13] {
            let y = maxpool2d(&x, k, 1, k / 2).unwrap();
            assert_eq!(y, x);
        }
        assert!(maxpool2d(&x, 0, 1, 0).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let x = Tensor::new(Shape::new(1, 1, 1, 1), vec![3.5]).unwrap();
        assert_eq!(upsample_nearest2x(&x).data(), &[3.5; 4]);
        let x = Tensor::zeros(Shape::new(1, 7, 13, 13));
        assert_eq!(upsample_nearest2x(&x).shape(), Shape::new(1, 7, 26, 26));
    }
}
