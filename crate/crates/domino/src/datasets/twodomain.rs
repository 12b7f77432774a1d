//! Class-paired two-domain data: modality 2 samples are drawn per epoch from
//! the matching class bucket, so positives share a label but not an instance.
//!
//! External domains (e.g. SVHN crops) arrive preconverted in an NDCK
//! container holding `images` (N x C x 32 x 32, f32 in [0,1]) and `labels`
//! (N, integral values).

use std::collections::BTreeMap;
use std::path::Path;

use super::{labels_from_f32, LabeledImageSet, PairKind, PairedDataset};
use crate::ndgrad::{ndck, NdError};

/// Every class present in `a` must have at least one sample in `b`.
pub fn check_label_cover(a: &LabeledImageSet, b: &LabeledImageSet) -> Result<(), NdError> {
    let buckets = class_buckets(b);
    for &label in a.labels() {
        if !buckets.contains_key(&label) {
            return Err(NdError::Invalid(format!(
                "label {label} of {} has no samples in {}",
                a.name(),
                b.name()
            )));
        }
    }
    Ok(())
}

/// Indices of `set` grouped by label.
pub fn class_buckets(set: &LabeledImageSet) -> BTreeMap<usize, Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in set.labels().iter().enumerate() {
        buckets.entry(l).or_default().push(i);
    }
    buckets
}

pub fn pair_two_domain(a: LabeledImageSet, b: LabeledImageSet) -> Result<PairedDataset, NdError> {
    PairedDataset::new(PairKind::TwoDomain, a, b)
}

/// Read a converted single-domain set (`images` + `labels` arrays).
pub fn load_ndck_set(path: &Path) -> Result<LabeledImageSet, NdError> {
    let arrays = ndck::read_ndck(path)?;
    let images = arrays
        .get("images")
        .ok_or_else(|| NdError::Format(format!("{}: missing `images` array", path.display())))?
        .to_f32();
    let labels = labels_from_f32(
        &arrays
            .get("labels")
            .ok_or_else(|| NdError::Format(format!("{}: missing `labels` array", path.display())))?
            .to_f32(),
    )?;
    let name = path.file_stem().map_or_else(|| "ndck".to_string(), |s| s.to_string_lossy().into_owned());
    LabeledImageSet::new(images, labels, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Array;

    fn set_with_labels(labels: &[usize], name: &str) -> LabeledImageSet {
        let n = labels.len();
        let data: Vec<f32> = (0..n * 4).map(|i| (i % 5) as f32 / 4.0).collect();
        LabeledImageSet::new(Array::new(vec![n, 1, 2, 2], data).unwrap(), labels.to_vec(), name).unwrap()
    }

    #[test]
    fn paired_labels_always_equal() {
        let a = set_with_labels(&[0, 1, 2, 0, 1, 2], "a");
        let b = set_with_labels(&[2, 2, 1, 0, 0, 1], "b");
        let ds = pair_two_domain(a, b).unwrap();
        for epoch in 0..3 {
            for (i, j) in ds.epoch_pairs(9, epoch) {
                assert_eq!(ds.a.labels()[i], ds.b.labels()[j]);
            }
        }
    }

    #[test]
    fn pairing_is_seeded_and_epoch_dependent() {
        let a = set_with_labels(&[0, 1, 0, 1, 0, 1, 0, 1], "a");
        let b = set_with_labels(&[0, 0, 0, 1, 1, 1, 0, 1], "b");
        let ds = pair_two_domain(a, b).unwrap();
        assert_eq!(ds.epoch_pairs(1, 0), ds.epoch_pairs(1, 0));
        assert_ne!(ds.epoch_pairs(1, 0), ds.epoch_pairs(1, 1));
        assert_ne!(ds.epoch_pairs(1, 0), ds.epoch_pairs(2, 0));
    }

    #[test]
    fn missing_class_rejected() {
        let a = set_with_labels(&[0, 1, 2], "mnist-ish");
        let b = set_with_labels(&[0, 1, 1], "svhn-ish");
        let err = pair_two_domain(a, b).unwrap_err();
        assert!(err.to_string().contains("label 2"), "{err}");
    }
}
