//! The `.spg` grid container and grayscale PNG export.
//!
//! Layout: magic `SPEC1` (5 bytes), `u32` LE rows, `u32` LE cols, then
//! `rows * cols` row-major `f32` LE cells. Masks store `0.0` / `1.0`.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SPEC1";
const HEADER_LEN: usize = 5 + 4 + 4;

pub fn encode(grid: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = grid.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in grid.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..5] != MAGIC {
        return Err(bad("missing SPEC1 header"));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols * 4 {
        return Err(bad(&format!(
            "expected {} cell bytes for {rows}x{cols}, found {}",
            rows * cols * 4,
            body.len()
        )));
    }
    let cells: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), cells).map_err(|e| bad(&e.to_string()))
}

pub fn write(path: &Path, grid: &Array2<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(grid)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Rounds every cell to `f32` precision, i.e. what a write/read cycle yields.
pub fn quantize(grid: &Array2<f64>) -> Array2<f64> {
    grid.mapv(|v| v as f32 as f64)
}

/// 8-bit grayscale rendering, `round(255 * cell)` with cells clamped to [0,1].
pub fn to_gray(grid: &Array2<f64>) -> GrayImage {
    let (rows, cols) = grid.dim();
    GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        let v = grid[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(255.0 * v).round() as u8])
    })
}

pub fn write_png(path: &Path, grid: &Array2<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_gray(grid).save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let g = Array2::from_shape_vec((2, 3), vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let bytes = encode(&g);
        assert_eq!(&bytes[..5], b"SPEC1");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &3u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &0.0f32.to_le_bytes());
        assert_eq!(&bytes[17..21], &0.25f32.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 6 * 4);
    }

    #[test]
    fn rejects_truncated_body() {
        let g = Array2::<f64>::zeros((4, 4));
        let mut bytes = encode(&g);
        bytes.pop();
        assert!(decode(&bytes, Path::new("x.spg")).is_err());
        assert!(decode(b"SPEC2\0\0\0\0\0\0\0\0", Path::new("x.spg")).is_err());
    }

    #[test]
    fn png_values_are_rounded() {
        let g = Array2::from_shape_vec((1, 3), vec![0.0, 0.5, 1.0]).unwrap();
        let img = to_gray(&g);
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(1, 0)[0], 128);
        assert_eq!(img.get_pixel(2, 0)[0], 255);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            let mut s = seed;
            let g = Array2::from_shape_fn((rows, cols), |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            });
            let back = decode(&encode(&g), Path::new("p.spg")).unwrap();
            prop_assert_eq!(back, quantize(&g));
        }
    }
}
