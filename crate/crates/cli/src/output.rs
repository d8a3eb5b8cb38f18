//! PGM image grids and small CSV helpers.

use std::fmt::Write as _;

/// Binary PGM (P5) grid of square grayscale images with values in `[0, 1]`,
/// `cols` images per row and a one-pixel mid-gray border.
pub fn pgm_grid(images: &[Vec<f64>], side: usize, cols: usize) -> Vec<u8> {
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let (w, h) = (cols * (side + 1) + 1, rows * (side + 1) + 1);
    let mut px = vec![128u8; w * h];
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = ((i / cols) * (side + 1) + 1, (i % cols) * (side + 1) + 1);
        for y in 0..side {
            for x in 0..side {
                let v = img.get(y * side + x).copied().unwrap_or(0.0).clamp(0.0, 1.0);
                px[(r0 + y) * w + c0 + x] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    out
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV line: a label followed by the values.
pub fn vector_row(label: &str, values: &[f64]) -> String {
    let mut s = String::from(label);
    for v in values {
        let _ = write!(s, ",{}", fmt_f64(*v));
    }
    s
}
