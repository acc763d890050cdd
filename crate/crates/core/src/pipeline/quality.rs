//! Blockwise DCT quantization round trip emulating JPEG quality levels.
//!
//! Each 8×8 block of a channel (edge-replicated to a multiple of 8) is level
//! shifted by −128, transformed with the orthonormal 2-D DCT-II, quantized
//! with the libjpeg-scaled luminance table, dequantized, inverse
//! transformed, shifted back, rounded to the 8-bit sample grid and clamped
//! to `[0, 255]`. No entropy coding
//! or chroma handling is involved; only the pixel-domain degradation is
//! reproduced.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Standard JPEG luminance quantization table (row-major, natural order).
pub const LUMINANCE_TABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// The libjpeg quality scaling of [`LUMINANCE_TABLE`], in integer arithmetic.
pub fn quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::param("quality", format!("must lie in [1, 100], got {quality}")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(&LUMINANCE_TABLE) {
        *o = ((t * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (i, v) in row.iter_mut().enumerate() {
                *v = alpha * (((2 * i + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

/// `out = B · block · Bᵀ` (forward) or `Bᵀ · block · B` (inverse).
fn dct8x8(block: &[f64; 64], inverse: bool) -> [f64; 64] {
    let b = dct_basis();
    let coef = |r: usize, c: usize| if inverse { b[c][r] } else { b[r][c] };
    let mut tmp = [0.0; 64];
    for r in 0..8 {
        for c in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                s += coef(r, k) * block[k * 8 + c];
            }
            tmp[r * 8 + c] = s;
        }
    }
    let mut out = [0.0; 64];
    for r in 0..8 {
        for c in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                s += tmp[r * 8 + k] * coef(c, k);
            }
            out[r * 8 + c] = s;
        }
    }
    out
}

/// Degrades one `height × width` channel (values in `[0, 255]`, row-major)
/// to JPEG-like quality `quality`.
pub fn quality_transform(pixels: &[f64], width: usize, height: usize, quality: u32) -> Result<Vec<f64>> {
    if width == 0 || height == 0 || pixels.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "quality_transform",
            lhs: vec![pixels.len()],
            rhs: vec![height, width],
        });
    }
    let table = quant_table(quality)?;
    let mut out = vec![0.0; pixels.len()];
    for by in (0..height).step_by(8) {
        for bx in (0..width).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                let sy = (by + y).min(height - 1);
                for x in 0..8 {
                    let sx = (bx + x).min(width - 1);
                    block[y * 8 + x] = pixels[sy * width + sx] - 128.0;
                }
            }
            let mut coefs = dct8x8(&block, false);
            for (c, s) in coefs.iter_mut().zip(&table) {
                *c = (*c / s).round() * s;
            }
            let restored = dct8x8(&coefs, true);
            for y in 0..8.min(height - by) {
                for x in 0..8.min(width - bx) {
                    out[(by + y) * width + bx + x] = (restored[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_100_is_unit_table() {
        assert!(quant_table(100).unwrap().iter().all(|&s| s == 1.0));
        assert_eq!(quant_table(50).unwrap()[0], 16.0);
        // 5000 / 15 = 333; (16·333 + 50) / 100 = 53
        assert_eq!(quant_table(15).unwrap()[0], 53.0);
        assert_eq!(quant_table(1).unwrap()[63], 255.0);
        assert!(quant_table(0).is_err());
        assert!(quant_table(101).is_err());
    }

    #[test]
    fn dct_round_trip_is_identity() {
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 37) % 255) as f64 - 128.0);
        let back = dct8x8(&dct8x8(&block, false), true);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_image_survives_any_quality() {
        let img = vec![128.0; 13 * 9];
        for q in [1, 15, 50, 85, 100] {
            let out = quality_transform(&img, 13, 9, q).unwrap();
            assert!(out.iter().all(|v| (v - 128.0).abs() <= 1.0), "q = {q}");
        }
    }

    #[test]
    fn quality_100_stays_within_one_level_on_smooth_input() {
        let img: Vec<f64> = (0..20 * 12)
            .map(|i| (128.0 + 100.0 * ((i % 20) as f64 / 5.0).sin() * ((i / 20) as f64 / 7.0).cos()).round())
            .collect();
        let out = quality_transform(&img, 20, 12, 100).unwrap();
        let worst = img.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0, "max deviation {worst}");
    }

    #[test]
    fn rejects_out_of_range_quality() {
        assert!(quality_transform(&[0.0; 4], 2, 2, 0).is_err());
        assert!(quality_transform(&[0.0; 4], 2, 2, 101).is_err());
        assert!(quality_transform(&[0.0; 3], 2, 2, 50).is_err());
    }
}
