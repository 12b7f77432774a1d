//! Paired two-view / two-domain image datasets and batch iteration.

pub mod idx;
pub mod synth;
pub mod twodomain;
pub mod twoview;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ndgrad::{ndck, Array, NdError, Scalar, StoredArray};
use crate::rng::{seeded_indexed, stream};

/// Environment variable naming the dataset root directory for relative paths.
pub const DATA_DIR_ENV: &str = "DOMINO_DATA_DIR";

/// Resolve a dataset path: absolute paths pass through, relative paths are
/// joined onto `$DOMINO_DATA_DIR` (or the working directory if unset).
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

/// A labeled image collection: N×C×H×W intensities in [0,1].
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    images: Array<f32>,
    labels: Vec<usize>,
    name: String,
}

impl LabeledImageSet {
    pub fn new(images: Array<f32>, labels: Vec<usize>, name: impl Into<String>) -> Result<Self, NdError> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(NdError::BadShape { what: format!("images must be N x C x H x W, got {shape:?}") });
        }
        if shape[0] != labels.len() {
            return Err(NdError::BadShape {
                what: format!("{} images but {} labels", shape[0], labels.len()),
            });
        }
        if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(NdError::Invalid(format!("image intensity {bad} outside [0,1]")));
        }
        Ok(LabeledImageSet { images, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn images(&self) -> &Array<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Pixels of image `i` (length C*H*W).
    pub fn image(&self, i: usize) -> &[f32] {
        let chw = self.channels() * self.height() * self.width();
        &self.images.data()[i * chw..(i + 1) * chw]
    }

    /// Copy out a subset of the set in the given index order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> LabeledImageSet {
        let chw = self.channels() * self.height() * self.width();
        let mut data = Vec::with_capacity(indices.len() * chw);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let shape = vec![indices.len(), self.channels(), self.height(), self.width()];
        LabeledImageSet {
            images: Array::new(shape, data).expect("subset shape consistent"),
            labels,
            name: name.into(),
        }
    }
}

/// How the two modalities of a paired dataset relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    TwoView,
    TwoDomain,
    Synthetic,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::TwoView => "two_view",
            PairKind::TwoDomain => "two_domain",
            PairKind::Synthetic => "synthetic",
        }
    }

    fn code(self) -> f32 {
        match self {
            PairKind::TwoView => 0.0,
            PairKind::TwoDomain => 1.0,
            PairKind::Synthetic => 2.0,
        }
    }

    fn from_code(code: f32) -> Option<PairKind> {
        match code as i64 {
            0 => Some(PairKind::TwoView),
            1 => Some(PairKind::TwoDomain),
            2 => Some(PairKind::Synthetic),
            _ => None,
        }
    }
}

/// One training batch: row k of `x1` and `x2` form a positive pair.
#[derive(Debug, Clone)]
pub struct MultimodalBatch<T: Scalar> {
    pub x1: Array<T>,
    pub x2: Array<T>,
    pub labels: Vec<usize>,
    pub pair_kind: PairKind,
}

impl<T: Scalar> MultimodalBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A paired dataset. For `TwoView`/`Synthetic` the two sets are index
/// aligned; for `TwoDomain` positives are resampled per epoch by class.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub kind: PairKind,
    pub a: LabeledImageSet,
    pub b: LabeledImageSet,
}

impl PairedDataset {
    pub fn new(kind: PairKind, a: LabeledImageSet, b: LabeledImageSet) -> Result<Self, NdError> {
        match kind {
            PairKind::TwoView | PairKind::Synthetic => {
                if a.len() != b.len() {
                    return Err(NdError::Invalid(format!(
                        "index-aligned pair with {} vs {} samples",
                        a.len(),
                        b.len()
                    )));
                }
                if a.labels() != b.labels() {
                    return Err(NdError::Invalid("index-aligned pair with differing labels".into()));
                }
            }
            PairKind::TwoDomain => {
                twodomain::check_label_cover(&a, &b)?;
            }
        }
        Ok(PairedDataset { kind, a, b })
    }

    /// Number of pairs emitted per epoch (= size of modality 1).
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.a.num_classes().max(self.b.num_classes())
    }

    pub fn modality(&self, m: usize) -> Result<&LabeledImageSet, NdError> {
        match m {
            0 => Ok(&self.a),
            1 => Ok(&self.b),
            _ => Err(NdError::Invalid(format!("modality index {m} out of range (expected 0 or 1)"))),
        }
    }

    /// Deterministic epoch plan: shuffled (a, b) index pairs covering every
    /// modality-1 sample exactly once.
    pub fn epoch_pairs(&self, seed: u64, epoch: u64) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = seeded_indexed(seed, stream::SHUFFLE, epoch);
        order.shuffle(&mut rng);
        match self.kind {
            PairKind::TwoView | PairKind::Synthetic => order.into_iter().map(|i| (i, i)).collect(),
            PairKind::TwoDomain => {
                let buckets = twodomain::class_buckets(&self.b);
                let mut pair_rng = seeded_indexed(seed, stream::PAIRING, epoch);
                order
                    .into_iter()
                    .map(|i| {
                        let bucket = &buckets[&self.a.labels()[i]];
                        (i, bucket[pair_rng.gen_range(0..bucket.len())])
                    })
                    .collect()
            }
        }
    }

    /// Materialize one batch from an `epoch_pairs` slice.
    pub fn gather<T: Scalar>(&self, pairs: &[(usize, usize)]) -> MultimodalBatch<T> {
        let gather_side = |set: &LabeledImageSet, pick: &dyn Fn(&(usize, usize)) -> usize| {
            let chw = set.channels() * set.height() * set.width();
            let mut data = Vec::with_capacity(pairs.len() * chw);
            for p in pairs {
                data.extend(set.image(pick(p)).iter().map(|&v| T::from_f64(v as f64)));
            }
            Array::new(vec![pairs.len(), set.channels(), set.height(), set.width()], data)
                .expect("gather shape consistent")
        };
        let x1 = gather_side(&self.a, &|p| p.0);
        let x2 = gather_side(&self.b, &|p| p.1);
        let labels = pairs.iter().map(|p| self.a.labels()[p.0]).collect();
        MultimodalBatch { x1, x2, labels, pair_kind: self.kind }
    }

    /// Serialize to an NDCK container.
    pub fn save(&self, path: &Path) -> Result<(), NdError> {
        let mut arrays = BTreeMap::new();
        arrays.insert("meta/kind".to_string(), StoredArray::F32(Array::from_vec(vec![self.kind.code()])));
        arrays.insert("a/images".to_string(), StoredArray::F32(self.a.images.clone()));
        arrays.insert("a/labels".to_string(), StoredArray::F32(labels_to_f32(self.a.labels())));
        arrays.insert("b/images".to_string(), StoredArray::F32(self.b.images.clone()));
        arrays.insert("b/labels".to_string(), StoredArray::F32(labels_to_f32(self.b.labels())));
        ndck::write_ndck(path, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self, NdError> {
        let arrays = ndck::read_ndck(path)?;
        let get = |name: &str| {
            arrays
                .get(name)
                .ok_or_else(|| NdError::Format(format!("{}: missing array {name}", path.display())))
        };
        let kind_arr = get("meta/kind")?.to_f32();
        let kind = kind_arr
            .data()
            .first()
            .and_then(|&c| PairKind::from_code(c))
            .ok_or_else(|| NdError::Format(format!("{}: bad pair kind", path.display())))?;
        let side = |prefix: &str| -> Result<LabeledImageSet, NdError> {
            let images = get(&format!("{prefix}/images"))?.to_f32();
            let labels = labels_from_f32(&get(&format!("{prefix}/labels"))?.to_f32())?;
            LabeledImageSet::new(images, labels, format!("{}:{prefix}", path.display()))
        };
        PairedDataset::new(kind, side("a")?, side("b")?)
    }
}

fn labels_to_f32(labels: &[usize]) -> Array<f32> {
    Array::from_vec(labels.iter().map(|&l| l as f32).collect())
}

fn labels_from_f32(arr: &Array<f32>) -> Result<Vec<usize>, NdError> {
    arr.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(NdError::Format(format!("non-integral label {v}")))
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

/// Batches for one epoch: chunks of `epoch_pairs`, tail batch included so
/// every sample appears exactly once.
pub fn epoch_batches<T: Scalar>(
    ds: &PairedDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<MultimodalBatch<T>> {
    assert!(batch_size > 0, "batch size must be positive");
    let pairs = ds.epoch_pairs(seed, epoch);
    pairs.chunks(batch_size).map(|chunk| ds.gather(chunk)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set(n: usize, label_of: impl Fn(usize) -> usize) -> LabeledImageSet {
        let chw = 1 * 4 * 4;
        let data: Vec<f32> = (0..n * chw).map(|i| (i % 7) as f32 / 10.0).collect();
        LabeledImageSet::new(
            Array::new(vec![n, 1, 4, 4], data).unwrap(),
            (0..n).map(label_of).collect(),
            "tiny",
        )
        .unwrap()
    }

    #[test]
    fn rejects_out_of_range_intensities() {
        let img = Array::new(vec![1, 1, 2, 2], vec![0.0, 0.5, 1.5, 1.0]).unwrap();
        assert!(LabeledImageSet::new(img, vec![0], "bad").is_err());
    }

    #[test]
    fn epoch_pairs_cover_every_sample_once() {
        let ds = PairedDataset::new(PairKind::Synthetic, tiny_set(10, |i| i % 3), tiny_set(10, |i| i % 3))
            .unwrap();
        let pairs = ds.epoch_pairs(3, 0);
        let mut seen: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        for (i, j) in pairs {
            assert_eq!(i, j, "index-aligned kinds pair identical indices");
        }
    }

    #[test]
    fn epoch_pairs_deterministic_and_epoch_dependent() {
        let ds = PairedDataset::new(PairKind::Synthetic, tiny_set(32, |i| i % 4), tiny_set(32, |i| i % 4))
            .unwrap();
        assert_eq!(ds.epoch_pairs(3, 1), ds.epoch_pairs(3, 1));
        assert_ne!(ds.epoch_pairs(3, 1), ds.epoch_pairs(3, 2));
        assert_ne!(ds.epoch_pairs(3, 1), ds.epoch_pairs(4, 1));
    }

    #[test]
    fn tail_batch_keeps_remainder() {
        let ds = PairedDataset::new(PairKind::Synthetic, tiny_set(10, |_| 0), tiny_set(10, |_| 0)).unwrap();
        let batches = epoch_batches::<f32>(&ds, 4, 0, 0);
        assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(batches[0].x1.shape(), &[4, 1, 4, 4]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.ndck");
        let ds = PairedDataset::new(PairKind::Synthetic, tiny_set(6, |i| i % 2), tiny_set(6, |i| i % 2))
            .unwrap();
        ds.save(&path).unwrap();
        let back = PairedDataset::load(&path).unwrap();
        assert_eq!(back.kind, PairKind::Synthetic);
        assert_eq!(back.a.images().data(), ds.a.images().data());
        assert_eq!(back.b.labels(), ds.b.labels());
    }
}
