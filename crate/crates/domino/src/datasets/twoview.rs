//! Two-view corruption: view 1 is a small random rotation of the source
//! image, view 2 mixes in unit uniform noise and min-max rescales per image.
//! Both corruptions are sampled once at construction, not per epoch.

use std::f32::consts::FRAC_PI_4;

use rand::Rng;

use super::{LabeledImageSet, PairKind, PairedDataset};
use crate::ndgrad::{Array, NdError};
use crate::rng::{seeded, stream};

pub fn make_two_view(set: &LabeledImageSet, seed: u64) -> Result<PairedDataset, NdError> {
    let (n, c, h, w) = (set.len(), set.channels(), set.height(), set.width());
    let chw = c * h * w;
    let mut rng = seeded(seed, stream::DATA);
    let mut v1 = Vec::with_capacity(n * chw);
    let mut v2 = Vec::with_capacity(n * chw);
    let mut rotated = vec![0f32; h * w];
    for i in 0..n {
        let img = set.image(i);
        // Per image: one angle draw, then h*w noise draws per channel. Keep
        // this order fixed; it is part of the determinism contract.
        let angle = rng.gen_range(-FRAC_PI_4..FRAC_PI_4);
        for ch in 0..c {
            rotate_bilinear(&img[ch * h * w..(ch + 1) * h * w], h, w, angle, &mut rotated);
            v1.extend_from_slice(&rotated);
        }
        for ch in 0..c {
            let plane = &img[ch * h * w..(ch + 1) * h * w];
            let noisy: Vec<f32> = plane.iter().map(|&v| v + rng.gen_range(0.0..1.0f32)).collect();
            v2.extend(minmax_rescale(&noisy));
        }
    }
    let shape = vec![n, c, h, w];
    let a = LabeledImageSet::new(
        Array::new(shape.clone(), v1)?,
        set.labels().to_vec(),
        format!("{}-view1", set.name()),
    )?;
    let b = LabeledImageSet::new(
        Array::new(shape, v2)?,
        set.labels().to_vec(),
        format!("{}-view2", set.name()),
    )?;
    PairedDataset::new(PairKind::TwoView, a, b)
}

/// Rotate about the image center by `angle`, bilinear resample, zero fill
/// outside the source.
pub fn rotate_bilinear(src: &[f32], h: usize, w: usize, angle: f32, dst: &mut [f32]) {
    debug_assert_eq!(src.len(), h * w);
    debug_assert_eq!(dst.len(), h * w);
    let (sin, cos) = angle.sin_cos();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    for y in 0..h {
        let dy = y as f32 - cy;
        for x in 0..w {
            let dx = x as f32 - cx;
            // Inverse map: rotate destination coordinates by -angle.
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            dst[y * w + x] = sample_bilinear_zero(src, h, w, sy, sx);
        }
    }
}

fn sample_bilinear_zero(src: &[f32], h: usize, w: usize, fy: f32, fx: f32) -> f32 {
    let y0 = fy.floor();
    let x0 = fx.floor();
    let wy = fy - y0;
    let wx = fx - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - wy), (1, wy)] {
        for (dx, wx) in [(0, 1.0 - wx), (1, wx)] {
            let yy = y0 as isize + dy;
            let xx = x0 as isize + dx;
            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                acc += wy * wx * src[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

fn minmax_rescale(plane: &[f32]) -> Vec<f32> {
    let min = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max > min {
        plane.iter().map(|&v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; plane.len()]
    }
}
