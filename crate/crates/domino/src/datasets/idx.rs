//! IDX (MNIST-style) ingestion.
//!
//! Images are unsigned bytes under magic 0x00000803 with big-endian dims;
//! labels are unsigned bytes under magic 0x00000801. Intensities are
//! rescaled to [0,1] and images resized to 32x32 with bilinear
//! interpolation.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use super::LabeledImageSet;
use crate::ndgrad::{Array, NdError};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Target side length after ingestion.
pub const SIDE: usize = 32;

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet, NdError> {
    let (n, h, w, pixels) = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if labels.len() != n {
        return Err(NdError::Format(format!(
            "{} images but {} labels ({} / {})",
            n,
            labels.len(),
            images_path.display(),
            labels_path.display()
        )));
    }
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    let mut resized = vec![0f32; SIDE * SIDE];
    for i in 0..n {
        let src: Vec<f32> = pixels[i * h * w..(i + 1) * h * w].iter().map(|&b| b as f32 / 255.0).collect();
        resize_bilinear(&src, h, w, SIDE, SIDE, &mut resized);
        data.extend_from_slice(&resized);
    }
    let name = images_path.file_stem().map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    LabeledImageSet::new(Array::new(vec![n, 1, SIDE, SIDE], data)?, labels, name)
}

fn read_u32_be(r: &mut impl Read) -> Result<u32, NdError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), NdError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r)?;
    if magic != IMAGE_MAGIC {
        return Err(NdError::Format(format!(
            "{}: magic {magic:#010x}, expected image magic {IMAGE_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let h = read_u32_be(&mut r)? as usize;
    let w = read_u32_be(&mut r)? as usize;
    if h == 0 || w == 0 {
        return Err(NdError::Format(format!("{}: zero image dimension {h}x{w}", path.display())));
    }
    let mut pixels = vec![0u8; n * h * w];
    r.read_exact(&mut pixels).map_err(|e| {
        NdError::Format(format!("{}: truncated pixel payload ({e})", path.display()))
    })?;
    Ok((n, h, w, pixels))
}

fn read_labels(path: &Path) -> Result<Vec<usize>, NdError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r)?;
    if magic != LABEL_MAGIC {
        return Err(NdError::Format(format!(
            "{}: magic {magic:#010x}, expected label magic {LABEL_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(|e| {
        NdError::Format(format!("{}: truncated label payload ({e})", path.display()))
    })?;
    Ok(bytes.into_iter().map(|b| b as usize).collect())
}

/// Bilinear resample with half-pixel-centered coordinates; border pixels are
/// clamped, so an identity resize is exact.
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize, dst: &mut [f32]) {
    debug_assert_eq!(src.len(), sh * sw);
    debug_assert_eq!(dst.len(), dh * dw);
    let sy_scale = sh as f32 / dh as f32;
    let sx_scale = sw as f32 / dw as f32;
    for dy in 0..dh {
        let fy = ((dy as f32 + 0.5) * sy_scale - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f32;
        for dx in 0..dw {
            let fx = ((dx as f32 + 0.5) * sx_scale - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            dst[dy * dw + dx] = top * (1.0 - wy) + bot * wy;
        }
    }
}
