//! Post-hoc representation similarity: the CCA measure, SVCCA, PWCCA and
//! linear CKA, plus a brute-force oracle used by the test-suite.

mod measures;

pub use measures::{
    cca_measure, cca_oracle, center_columns, cka_linear, orthonormal_centered_columns, pwcca,
    svcca, CcaOutcome, PwccaDetail, CCA_RIDGE, SVCCA_VARIANCE_KEEP,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageSet;
use crate::model::{bind, encode, EncoderConfig, ForwardCtx, ParamStore};
use crate::ndgrad::{Array, BatchNormMode, NdError, Tape};

/// Which half of a dataset a representation matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
        }
    }
}

/// n x d matrix of latent representations for one modality and split.
#[derive(Debug, Clone)]
pub struct RepMatrix {
    pub z: DMatrix<f64>,
    pub modality: usize,
    pub split: Split,
}

impl RepMatrix {
    pub fn new(z: DMatrix<f64>, modality: usize, split: Split) -> Result<RepMatrix, NdError> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(NdError::Invalid("representation matrix has non-finite entries".into()));
        }
        Ok(RepMatrix { z, modality, split })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }
}

/// Caveats attached to a similarity report.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeasureFlags {
    /// Features were column-centered before every measure.
    pub centered: bool,
    /// Some CCA-family measure fell back to the ridge-regularized path.
    pub degenerate: bool,
    /// CKA was undefined (zero matrix); its value is NaN.
    pub cka_undefined: bool,
}

/// All similarity measures between two representation matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub model: String,
    pub split: String,
    pub cca: f64,
    pub svcca: f64,
    pub pwcca_ij: f64,
    pub pwcca_ji: f64,
    pub cka: f64,
    pub flags: MeasureFlags,
}

fn into_unit_interval(name: &str, v: f64) -> Result<f64, NdError> {
    if !v.is_finite() || !(-1e-8..=1.0 + 1e-8).contains(&v) {
        return Err(NdError::Invalid(format!("{name} out of [0,1]: {v}")));
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Runs every measure on a pair of representation matrices.
pub fn compute_report(
    model: &str,
    zi: &RepMatrix,
    zj: &RepMatrix,
) -> Result<SimilarityReport, NdError> {
    if zi.split != zj.split {
        return Err(NdError::Invalid(format!(
            "cannot compare representations across splits ({} vs {})",
            zi.split.as_str(),
            zj.split.as_str()
        )));
    }
    let cca = cca_measure(&zi.z, &zj.z)?;
    let sv = svcca(&zi.z, &zj.z, SVCCA_VARIANCE_KEEP)?;
    let pw_ij = pwcca(&zi.z, &zj.z)?;
    let pw_ji = pwcca(&zj.z, &zi.z)?;
    let cka = cka_linear(&zi.z, &zj.z)?;
    let cka_undefined = cka.is_nan();
    Ok(SimilarityReport {
        model: model.to_string(),
        split: zi.split.as_str().to_string(),
        cca: into_unit_interval("cca", cca.value)?,
        svcca: into_unit_interval("svcca", sv.value)?,
        pwcca_ij: into_unit_interval("pwcca_ij", pw_ij.value)?,
        pwcca_ji: into_unit_interval("pwcca_ji", pw_ji.value)?,
        cka: if cka_undefined { f64::NAN } else { into_unit_interval("cka", cka)? },
        flags: MeasureFlags {
            centered: true,
            degenerate: cca.degenerate || sv.degenerate || pw_ij.degenerate || pw_ji.degenerate,
            cka_undefined,
        },
    })
}

/// Latents for every sample of `set`, in order, with batchnorm in eval mode.
/// Deterministic: the same store and set produce bit-identical output.
pub fn collect_representations(
    store: &ParamStore<f64>,
    cfg: &EncoderConfig,
    m: usize,
    set: &LabeledImageSet,
    split: Split,
    batch_size: usize,
) -> Result<RepMatrix, NdError> {
    if batch_size == 0 {
        return Err(NdError::Invalid("batch_size must be positive".into()));
    }
    let n = set.len();
    let d = cfg.latent_dim;
    let (c, h, w) = (set.channels(), set.height(), set.width());
    let mut flat = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let count = batch_size.min(n - start);
        let mut data = Vec::with_capacity(count * c * h * w);
        for i in start..start + count {
            data.extend(set.image(i).iter().map(|&v| v as f64));
        }
        let x = Array::new(vec![count, c, h, w], data)?;
        let mut tape = Tape::new();
        let binding = bind(&mut tape, store, |_| false);
        let mut ctx = ForwardCtx::new(&mut tape, &binding, BatchNormMode::Eval);
        let xr = ctx.tape.leaf(&x);
        let out = encode(&mut ctx, m, cfg, xr)?;
        flat.extend_from_slice(tape.values(out.z));
        start += count;
    }
    RepMatrix::new(DMatrix::from_row_slice(n, d, &flat), m, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth::synth_multimodal;
    use crate::model::init_encoder;
    use crate::rng::{seeded, stream};

    #[test]
    fn collect_is_deterministic_and_sized() {
        let cfg = EncoderConfig { in_channels: 1, base_channels: 8, latent_dim: 16 };
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(40, stream::INIT);
        init_encoder(&mut store, &mut rng, 0, &cfg);
        let ds = synth_multimodal(10, 5, 41).unwrap();
        let set = ds.modality(0).unwrap();
        let a = collect_representations(&store, &cfg, 0, set, Split::Train, 4).unwrap();
        let b = collect_representations(&store, &cfg, 0, set, Split::Train, 4).unwrap();
        assert_eq!(a.n(), 10);
        assert_eq!(a.d(), 16);
        assert_eq!(a.z.as_slice(), b.z.as_slice(), "bit-identical reruns");
        // Batch size must not affect eval-mode latents.
        let c = collect_representations(&store, &cfg, 0, set, Split::Train, 10).unwrap();
        let max_diff = a
            .z
            .iter()
            .zip(c.z.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12, "{max_diff}");
    }

    #[test]
    fn self_report_is_perfect_similarity() {
        let cfg = EncoderConfig { in_channels: 1, base_channels: 8, latent_dim: 8 };
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(42, stream::INIT);
        init_encoder(&mut store, &mut rng, 0, &cfg);
        let ds = synth_multimodal(24, 4, 43).unwrap();
        let set = ds.modality(0).unwrap();
        let reps = collect_representations(&store, &cfg, 0, set, Split::Train, 8).unwrap();
        let report = compute_report("untrained", &reps, &reps).unwrap();
        assert_eq!(report.cka, 1.0);
        assert!((report.cca - 1.0).abs() < 1e-6);
        assert!((report.pwcca_ij - 1.0).abs() < 1e-6);
        assert!(report.flags.centered);
        assert!(!report.flags.cka_undefined);
    }

    #[test]
    fn report_rejects_split_mismatch() {
        let z = nalgebra::DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let a = RepMatrix::new(z.clone(), 0, Split::Train).unwrap();
        let b = RepMatrix::new(z, 1, Split::Holdout).unwrap();
        assert!(compute_report("m", &a, &b).is_err());
    }

    #[test]
    fn missing_params_are_rejected() {
        let cfg = EncoderConfig { in_channels: 1, base_channels: 8, latent_dim: 16 };
        let store = ParamStore::<f64>::new();
        let ds = synth_multimodal(4, 2, 44).unwrap();
        let set = ds.modality(0).unwrap();
        assert!(collect_representations(&store, &cfg, 0, set, Split::Train, 4).is_err());
    }
}
