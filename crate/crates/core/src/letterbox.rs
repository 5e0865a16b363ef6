//! Image loading and aspect-preserving resize onto the square network input.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::head::BBox;
use crate::tensor::{Shape, Tensor};

pub const PAD_VALUE: f32 = 0.5;

/// Placement of the original image inside the letterboxed square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: usize,
    pub pad_y: usize,
    pub orig_w: u32,
    pub orig_h: u32,
    pub size: usize,
}

impl Letterbox {
    pub fn new(orig_w: u32, orig_h: u32, size: usize) -> Result<Self> {
        if orig_w == 0 || orig_h == 0 || size == 0 {
            return Err(Error::Data(format!("cannot letterbox a {orig_w}x{orig_h} image to {size}")));
        }
        let scale = (size as f64 / orig_w as f64).min(size as f64 / orig_h as f64);
        let (w, h) = Self::scaled(orig_w, orig_h, scale, size);
        Ok(Letterbox { scale, pad_x: (size - w) / 2, pad_y: (size - h) / 2, orig_w, orig_h, size })
    }

    fn scaled(w: u32, h: u32, scale: f64, size: usize) -> (usize, usize) {
        let f = |v: u32| ((v as f64 * scale).round() as usize).clamp(1, size);
        (f(w), f(h))
    }

    pub fn content_size(&self) -> (usize, usize) {
        Self::scaled(self.orig_w, self.orig_h, self.scale, self.size)
    }

    /// Maps a box from network-input pixels back to original-image pixels,
    /// clipped to the image.
    pub fn to_original(&self, b: &BBox) -> BBox {
        let [l, t, r, bt] = b.corners();
        let fx = |x: f64| ((x - self.pad_x as f64) / self.scale).clamp(0.0, self.orig_w as f64);
        let fy = |y: f64| ((y - self.pad_y as f64) / self.scale).clamp(0.0, self.orig_h as f64);
        BBox::from_corners(fx(l), fy(t), fx(r), fy(bt))
    }

    pub fn to_input(&self, b: &BBox) -> BBox {
        BBox::new(
            b.cx * self.scale + self.pad_x as f64,
            b.cy * self.scale + self.pad_y as f64,
            b.w * self.scale,
            b.h * self.scale,
        )
    }
}

/// Resizes `img` to fit a `size` square, centers it on gray and returns the
/// `(1, 3, size, size)` tensor with values in `[0, 1]`.
pub fn letterbox(img: &RgbImage, size: usize) -> Result<(Tensor, Letterbox)> {
    let lb = Letterbox::new(img.width(), img.height(), size)?;
    let (w, h) = lb.content_size();
    let resized = if (w, h) == (img.width() as usize, img.height() as usize) {
        img.clone()
    } else {
        imageops::resize(img, w as u32, h as u32, FilterType::Triangle)
    };
    let mut t = Tensor::filled(Shape::new(1, 3, size, size), PAD_VALUE);
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            let i = t.index(0, c, y as usize + lb.pad_y, x as usize + lb.pad_x);
            t.data_mut()[i] = px[c] as f32 / 255.0;
        }
    }
    Ok((t, lb))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

pub fn load_letterboxed(path: &Path, size: usize) -> Result<(Tensor, Letterbox)> {
    letterbox(&load_rgb(path)?, size)
}
