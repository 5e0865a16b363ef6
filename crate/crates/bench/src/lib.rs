//! Inputs and a reference kernel shared by the criterion benchmarks under `benches/`.

use yoffle_core::ops::{ChannelAffine, ConvParams};
use yoffle_core::{Shape, Tensor};

/// Deterministic, non-constant tensor so no kernel can shortcut on zeros.
pub fn patterned(shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |n, c, h, w| (((n * 7 + c * 13 + h * 3 + w) % 17) as f32 - 8.0) / 8.0)
}

/// Stride-1 "same" convolution with `c_in`->`c_out` channels and a `k`x`k` kernel.
pub fn conv_case(c_in: usize, c_out: usize, k: usize) -> ConvParams {
    let weights = patterned(Shape::new(c_out, c_in, k, k));
    ConvParams::new("bench", weights, ChannelAffine::identity(c_out)).padding(k / 2)
}

/// Direct seven-loop convolution (groups = 1, no affine), the baseline the
/// im2col kernel is compared against.
pub fn direct_conv(x: &Tensor, p: &ConvParams) -> Tensor {
    let xs = x.shape();
    let (k, s, pad) = (p.kernel(), p.stride, p.padding);
    let ho = (xs.h + 2 * pad - k) / s + 1;
    let wo = (xs.w + 2 * pad - k) / s + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, p.c_out(), ho, wo));
    for n in 0..xs.n {
        for co in 0..p.c_out() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ci in 0..xs.c {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && ix < xs.w as isize {
                                    acc += x.at(n, ci, iy as usize, ix as usize) * p.weights.at(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    let i = out.index(n, co, oy, ox);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}
