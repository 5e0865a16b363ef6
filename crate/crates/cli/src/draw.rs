use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];

pub fn class_color(class: usize) -> Rgb<u8> {
    Rgb(PALETTE[class % PALETTE.len()])
}

/// Hollow rectangle clipped to the image, `thickness` pixels inward.
pub fn draw_box(img: &mut RgbImage, corners: [f64; 4], color: Rgb<u8>, thickness: u32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return;
    }
    let clamp = |v: f64, hi: i64| (v.round() as i64).clamp(0, hi - 1);
    let (l, t, r, b) = (clamp(corners[0], w), clamp(corners[1], h), clamp(corners[2], w), clamp(corners[3], h));
    for k in 0..thickness as i64 {
        for x in l..=r {
            for y in [t + k, b - k] {
                if (t..=b).contains(&y) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
        for y in t..=b {
            for x in [l + k, r - k] {
                if (l..=r).contains(&x) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
}
