use std::io::Cursor;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use ndarray::ArrayView2;

/// Instance colours, cycled by id.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub const OVERLAY_ALPHA: f32 = 0.5;

pub fn instance_color(id: u32) -> [u8; 3] {
    PALETTE[(id as usize - 1) % PALETTE.len()]
}

fn gray(v: f32) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

/// PNG of a normalized slice. Without labelled pixels the image is 8-bit
/// grayscale; otherwise RGB with instance colours alpha-blended on top.
pub fn slice_png(slice: ArrayView2<f32>, overlay: Option<ArrayView2<u32>>) -> Vec<u8> {
    let (h, w) = slice.dim();
    let overlay = overlay.filter(|o| o.iter().any(|&l| l != 0));
    let (pixels, color) = match overlay {
        None => (slice.iter().map(|&v| gray(v)).collect::<Vec<u8>>(), ExtendedColorType::L8),
        Some(labels) => {
            let mut out = Vec::with_capacity(h * w * 3);
            for (&v, &l) in slice.iter().zip(labels.iter()) {
                let g = gray(v);
                if l == 0 {
                    out.extend([g, g, g]);
                } else {
                    for c in instance_color(l) {
                        let blended = (1.0 - OVERLAY_ALPHA) * g as f32 + OVERLAY_ALPHA * c as f32;
                        out.push(blended.round() as u8);
                    }
                }
            }
            (out, ExtendedColorType::Rgb8)
        }
    };
    let mut buf = Cursor::new(Vec::new());
    PngEncoder::new(&mut buf)
        .write_image(&pixels, w as u32, h as u32, color)
        .expect("encoding into memory cannot fail");
    buf.into_inner()
}
