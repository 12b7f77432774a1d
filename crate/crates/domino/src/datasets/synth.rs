//! Procedural two-modality dataset, CI-sized: no downloads, deterministic,
//! and hard enough on modality 2 that cross-modal training matters.
//!
//! Modality 1 draws a class-positioned disc glyph: class k sits at angle
//! 2*pi*k/K on a fixed ring, with positional jitter. Raw pixels are nearly
//! linearly separable. Modality 2 is a sinusoidal grating whose frequency
//! and orientation encode the class, but random phase and heavy uniform
//! noise dominate instance identity, so within-modality contrastive
//! objectives tend to latch onto nuisance structure.

use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledImageSet, PairKind, PairedDataset};
use crate::ndgrad::{Array, NdError};
use crate::rng::{seeded_indexed, stream};

pub const SIDE: usize = 32;

/// Fraction of uniform noise mixed into modality 2.
const NOISE_MIX: f32 = 0.5;

pub fn synth_multimodal(n: usize, num_classes: usize, seed: u64) -> Result<PairedDataset, NdError> {
    synth_part(n, num_classes, seed, 0)
}

/// Train and holdout sets from disjoint RNG streams of one seed.
pub fn synth_split(
    n_train: usize,
    n_holdout: usize,
    num_classes: usize,
    seed: u64,
) -> Result<(PairedDataset, PairedDataset), NdError> {
    Ok((synth_part(n_train, num_classes, seed, 0)?, synth_part(n_holdout, num_classes, seed, 1)?))
}

fn synth_part(n: usize, num_classes: usize, seed: u64, part: u64) -> Result<PairedDataset, NdError> {
    if num_classes == 0 || n < num_classes {
        return Err(NdError::Invalid(format!("need n >= num_classes > 0, got n={n}, k={num_classes}")));
    }
    let mut rng = seeded_indexed(seed, stream::DATA, part);
    // Balanced labels, shuffled so any contiguous split stays mixed.
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);

    let mut m1 = Vec::with_capacity(n * SIDE * SIDE);
    let mut m2 = Vec::with_capacity(n * SIDE * SIDE);
    for &label in &labels {
        render_glyph(label, num_classes, &mut rng, &mut m1);
        render_grating(label, num_classes, &mut rng, &mut m2);
    }
    let shape = vec![n, 1, SIDE, SIDE];
    let a = LabeledImageSet::new(Array::new(shape.clone(), m1)?, labels.clone(), "synth-glyph")?;
    let b = LabeledImageSet::new(Array::new(shape, m2)?, labels, "synth-grating")?;
    PairedDataset::new(PairKind::Synthetic, a, b)
}

fn render_glyph(label: usize, num_classes: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let theta = 2.0 * PI * label as f32 / num_classes as f32;
    let ring = 9.0;
    let c = (SIDE as f32 - 1.0) / 2.0;
    let cx = c + ring * theta.cos() + rng.gen_range(-1.5..1.5f32);
    let cy = c + ring * theta.sin() + rng.gen_range(-1.5..1.5f32);
    let radius = 3.0 + rng.gen_range(-0.4..0.4f32);
    let peak = rng.gen_range(0.8..1.0f32);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            // Soft 1-px edge keeps the glyph anti-aliased.
            let disc = (radius + 0.5 - d).clamp(0.0, 1.0) * peak;
            let grain = rng.gen_range(0.0..0.03f32);
            out.push((disc + grain).clamp(0.0, 1.0));
        }
    }
}

fn render_grating(label: usize, num_classes: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    // Class determines spatial frequency and orientation; phase is nuisance.
    let cycles = 2.0 + label as f32;
    let alpha = PI * label as f32 / num_classes as f32;
    let (sin_a, cos_a) = alpha.sin_cos();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let omega = 2.0 * PI * cycles / SIDE as f32;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let t = x as f32 * cos_a + y as f32 * sin_a;
            let wave = 0.5 + 0.5 * (omega * t + phase).sin();
            let noise = rng.gen_range(0.0..1.0f32);
            out.push(((1.0 - NOISE_MIX) * wave + NOISE_MIX * noise).clamp(0.0, 1.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_histogram_uniform_within_one() {
        let ds = synth_multimodal(103, 10, 0).unwrap();
        let mut counts = vec![0usize; 10];
        for &l in ds.a.labels() {
            counts[l] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn same_seed_bit_identical() {
        let d1 = synth_multimodal(40, 5, 9).unwrap();
        let d2 = synth_multimodal(40, 5, 9).unwrap();
        assert_eq!(d1.a.images().data(), d2.a.images().data());
        assert_eq!(d1.b.images().data(), d2.b.images().data());
        assert_eq!(d1.a.labels(), d2.a.labels());
    }

    #[test]
    fn split_parts_are_disjoint_draws() {
        let (train, holdout) = synth_split(30, 30, 5, 4).unwrap();
        assert_ne!(train.a.images().data(), holdout.a.images().data());
    }

    #[test]
    fn intensities_in_unit_interval() {
        let ds = synth_multimodal(20, 4, 2).unwrap();
        for set in [&ds.a, &ds.b] {
            assert!(set.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
