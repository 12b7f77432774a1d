//! The InfoNCE bound with a separable critic, score clipping, and the
//! squared-score penalty.

use crate::ndgrad::{NdError, Scalar, Tape, ValueRef};

/// Critic hyperparameters. `d` is the shared embedding dimension, `clip`
/// bounds scores via c*tanh(s/c), and `lambda` weights the mean squared raw
/// score penalty.
#[derive(Debug, Clone, Copy)]
pub struct CriticConfig {
    pub d: usize,
    pub clip: f64,
    pub lambda: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig { d: 64, clip: 20.0, lambda: 4e-2 }
    }
}

impl CriticConfig {
    pub fn with_d(d: usize) -> Self {
        CriticConfig { d, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), NdError> {
        if self.clip <= 0.0 {
            return Err(NdError::Invalid(format!("critic clip must be positive, got {}", self.clip)));
        }
        if self.lambda < 0.0 {
            return Err(NdError::Invalid(format!("critic lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Scaled dot-product scores: raw[l,k] = <u_l, v_k> / sqrt(d) and their
/// clipped counterpart c*tanh(raw/c).
pub fn critic_scores<T: Scalar>(
    tape: &mut Tape<T>,
    u: ValueRef,
    v: ValueRef,
    cfg: &CriticConfig,
) -> Result<(ValueRef, ValueRef), NdError> {
    cfg.validate()?;
    let (us, vs) = (tape.shape(u).to_vec(), tape.shape(v).to_vec());
    if us.len() != 2 || vs.len() != 2 || us[1] != vs[1] || us[1] != cfg.d {
        return Err(NdError::ShapeMismatch {
            op: "critic_scores",
            detail: format!("embeddings {us:?} and {vs:?} with configured d={}", cfg.d),
        });
    }
    let vt = tape.transpose(v)?;
    let prod = tape.matmul(u, vt)?;
    let raw = tape.scale(prod, 1.0 / (cfg.d as f64).sqrt())?;
    let squeezed = tape.scale(raw, 1.0 / cfg.clip)?;
    let squashed = tape.tanh(squeezed)?;
    let clipped = tape.scale(squashed, cfg.clip)?;
    Ok((raw, clipped))
}

/// One-directional InfoNCE over a precomputed raw score matrix (N x N, row
/// l of U against every row of V; diagonal = positives):
///
///   loss = -(1/N) sum_l [ s+_l - log( sum_{k!=l} exp(s_lk) + exp(-c) ) ]
///          + lambda * mean(raw^2)
///
/// where s = clipped scores. The exp(-c) floor stands in for the
/// saturated-positive replacement term and keeps the log argument positive.
pub fn infonce_from_raw<T: Scalar>(
    tape: &mut Tape<T>,
    raw: ValueRef,
    cfg: &CriticConfig,
) -> Result<ValueRef, NdError> {
    cfg.validate()?;
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(NdError::ShapeMismatch {
            op: "infonce",
            detail: format!("expected a square score matrix, got {shape:?}"),
        });
    }
    if shape[0] < 2 {
        return Err(NdError::Invalid(format!("infonce needs N >= 2 for negatives, got N={}", shape[0])));
    }
    let squeezed = tape.scale(raw, 1.0 / cfg.clip)?;
    let squashed = tape.tanh(squeezed)?;
    let clipped = tape.scale(squashed, cfg.clip)?;
    let bound = bound_mean(tape, clipped, cfg)?;
    let mut loss = tape.scale(bound, -1.0)?;
    if cfg.lambda != 0.0 {
        let sq = tape.mul(raw, raw)?;
        let pen = tape.mean(sq)?;
        let pen = tape.scale(pen, cfg.lambda)?;
        loss = tape.add(loss, pen)?;
    }
    Ok(loss)
}

/// mean_l [ s+_l - lse_negatives_l ] of a clipped score matrix.
fn bound_mean<T: Scalar>(tape: &mut Tape<T>, clipped: ValueRef, cfg: &CriticConfig) -> Result<ValueRef, NdError> {
    let pos = tape.take_diag(clipped)?;
    let neg = tape.lse_negatives(clipped, -cfg.clip)?;
    let diff = tape.sub(pos, neg)?;
    tape.mean(diff)
}

/// One-directional InfoNCE on embeddings (row l of `u` pairs with row l of
/// `v`).
pub fn infonce<T: Scalar>(
    tape: &mut Tape<T>,
    u: ValueRef,
    v: ValueRef,
    cfg: &CriticConfig,
) -> Result<ValueRef, NdError> {
    if tape.shape(u) != tape.shape(v) {
        return Err(NdError::ShapeMismatch {
            op: "infonce",
            detail: format!("{:?} vs {:?}", tape.shape(u), tape.shape(v)),
        });
    }
    let (raw, _) = critic_scores(tape, u, v, cfg)?;
    infonce_from_raw(tape, raw, cfg)
}

/// InfoNCE averaged over both contrast directions. The score matrix and the
/// penalty are shared; only the negative sets differ (rows vs columns).
pub fn infonce_symmetric<T: Scalar>(
    tape: &mut Tape<T>,
    u: ValueRef,
    v: ValueRef,
    cfg: &CriticConfig,
) -> Result<ValueRef, NdError> {
    if tape.shape(u) != tape.shape(v) {
        return Err(NdError::ShapeMismatch {
            op: "infonce",
            detail: format!("{:?} vs {:?}", tape.shape(u), tape.shape(v)),
        });
    }
    let n = tape.shape(u)[0];
    if n < 2 {
        return Err(NdError::Invalid(format!("infonce needs N >= 2 for negatives, got N={n}")));
    }
    let (raw, clipped) = critic_scores(tape, u, v, cfg)?;
    let fwd = bound_mean(tape, clipped, cfg)?;
    let clipped_t = tape.transpose(clipped)?;
    let bwd = bound_mean(tape, clipped_t, cfg)?;
    let both = tape.add(fwd, bwd)?;
    let mut loss = tape.scale(both, -0.5)?;
    if cfg.lambda != 0.0 {
        let sq = tape.mul(raw, raw)?;
        let pen = tape.mean(sq)?;
        let pen = tape.scale(pen, cfg.lambda)?;
        loss = tape.add(loss, pen)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Array;
    use crate::rng::{seeded, stream};
    use rand::Rng;

    fn eval_infonce(u: &Array<f64>, v: &Array<f64>, cfg: &CriticConfig) -> f64 {
        let mut tape = Tape::new();
        let ur = tape.leaf(u);
        let vr = tape.leaf(v);
        let loss = infonce(&mut tape, ur, vr, cfg).unwrap();
        tape.values(loss)[0]
    }

    #[test]
    fn unit_basis_raw_score() {
        // u = v = e1 in d=4: raw = 1/sqrt(4) = 0.5.
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(&[1, 4], &[1.0, 0.0, 0.0, 0.0]);
        let cfg = CriticConfig::with_d(4);
        let (raw, _) = critic_scores(&mut tape, u, u, &cfg).unwrap();
        assert!((tape.values(raw)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_matches_tanh_and_stays_bounded() {
        let mut tape = Tape::<f64>::new();
        // raw = 30 needs <u,v> = 30*sqrt(1) with d=1.
        let u = tape.constant(&[1, 1], &[30.0]);
        let v = tape.constant(&[1, 1], &[1.0]);
        let cfg = CriticConfig { d: 1, clip: 20.0, lambda: 0.0 };
        let (_, clipped) = critic_scores(&mut tape, u, v, &cfg).unwrap();
        let s = tape.values(clipped)[0];
        assert!((s - 20.0 * (1.5f64).tanh()).abs() < 1e-10);
        assert!((s - 18.102965072897328).abs() < 1e-9);
        assert!(s.abs() < 20.0);
    }

    #[test]
    fn zero_scores_two_samples() {
        let cfg = CriticConfig { d: 3, clip: 20.0, lambda: 0.0 };
        let u = Array::zeros(vec![2, 3]);
        let loss = eval_infonce(&u, &u, &cfg);
        let expect = (1.0 + (-20.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        assert!((loss - 2.06e-9).abs() < 1e-10);
    }

    #[test]
    fn zero_scores_eight_samples() {
        let cfg = CriticConfig { d: 3, clip: 20.0, lambda: 0.0 };
        let u = Array::zeros(vec![8, 3]);
        let loss = eval_infonce(&u, &u, &cfg);
        let expect = (7.0 + (-20.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn saturated_positive_approaches_minus_clip() {
        // Huge diagonal raw scores, zero raw negatives: the clipped positive
        // saturates at +20 while each negative row contributes
        // log(1 + exp(-20)) ~ 2e-9.
        let cfg = CriticConfig { d: 1, clip: 20.0, lambda: 0.0 };
        let mut scores = vec![0.0; 4];
        scores[0] = 1e6;
        scores[3] = 1e6;
        let mut tape = Tape::new();
        let raw = tape.constant(&[2, 2], &scores);
        let loss_ref = infonce_from_raw(&mut tape, raw, &cfg).unwrap();
        let loss = tape.values(loss_ref)[0];
        let expect = -20.0 + (1.0 + (-20.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        assert!((loss + 20.0).abs() < 1e-6);
    }

    #[test]
    fn penalty_shifts_loss_by_lambda() {
        // All raw scores exactly 1: the positive and the negative terms
        // cancel as in the zero-score case, leaving +lambda.
        let d = 4;
        let base_cfg = CriticConfig { d, clip: 20.0, lambda: 0.0 };
        let pen_cfg = CriticConfig { d, clip: 20.0, lambda: 4e-2 };
        // All-equal scores: u_l = ones/sqrt(d) * sqrt(d) scaled so raw = 1.
        // <u, v> = sqrt(d) for every pair -> raw = 1.
        let u = Array::full(vec![8, d], 1.0 / (d as f64).sqrt());
        let v = Array::full(vec![8, d], 1.0);
        let zero = Array::zeros(vec![8, d]);
        let baseline = eval_infonce(&zero, &zero, &base_cfg);
        let with_pen = eval_infonce(&u, &v, &pen_cfg);
        assert!((with_pen - (baseline + 0.04)).abs() < 1e-6, "{with_pen} vs {}", baseline + 0.04);
    }

    #[test]
    fn needs_two_samples() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(&[1, 2], &[0.0, 0.0]);
        let err = infonce(&mut tape, u, u, &CriticConfig::with_d(2)).unwrap_err();
        assert!(err.to_string().contains("N >= 2"), "{err}");
    }

    #[test]
    fn chance_level_for_random_embeddings() {
        let cfg = CriticConfig::with_d(64);
        let mut rng = seeded(0, stream::GRADCHECK);
        let mut total = 0.0;
        let trials = 20;
        for _ in 0..trials {
            let unit_rows = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut data = vec![0.0f64; 64 * 64];
                for row in data.chunks_exact_mut(64) {
                    let mut norm = 0.0;
                    for v in row.iter_mut() {
                        *v = rng.gen_range(-1.0..1.0f64);
                        norm += *v * *v;
                    }
                    let inv = 1.0 / norm.sqrt();
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                Array::new(vec![64, 64], data).unwrap()
            };
            let u = unit_rows(&mut rng);
            let v = unit_rows(&mut rng);
            total += eval_infonce(&u, &v, &cfg);
        }
        let mean = total / trials as f64;
        let chance = (63.0f64).ln();
        assert!((mean - chance).abs() < 0.2, "mean {mean} vs chance {chance}");
    }

    #[test]
    fn raising_positive_scores_lowers_loss() {
        let cfg = CriticConfig { d: 4, clip: 20.0, lambda: 0.0 };
        let mut rng = seeded(1, stream::GRADCHECK);
        let n = 6;
        let base: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut boosted = base.clone();
        for l in 0..n {
            boosted[l * n + l] += 0.5;
        }
        let eval_raw = |scores: &[f64]| {
            let mut tape = Tape::new();
            let raw = tape.constant(&[n, n], scores);
            let loss = infonce_from_raw(&mut tape, raw, &cfg).unwrap();
            tape.values(loss)[0]
        };
        assert!(eval_raw(&boosted) < eval_raw(&base));
    }

    #[test]
    fn symmetric_direction_matters_only_for_asymmetric_scores() {
        let cfg = CriticConfig { d: 3, clip: 20.0, lambda: 0.0 };
        let mut rng = seeded(2, stream::GRADCHECK);
        let data: Vec<f64> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data2: Vec<f64> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = Array::new(vec![5, 3], data).unwrap();
        let v = Array::new(vec![5, 3], data2).unwrap();
        let mut tape = Tape::new();
        let ur = tape.leaf(&u);
        let vr = tape.leaf(&v);
        let sym = infonce_symmetric(&mut tape, ur, vr, &cfg).unwrap();
        let sym_val = tape.values(sym)[0];
        let expect = 0.5 * (eval_infonce(&u, &v, &cfg) + eval_infonce(&v, &u, &cfg));
        assert!((sym_val - expect).abs() < 1e-12, "{sym_val} vs {expect}");
    }

    #[test]
    fn infonce_gradients_pass_finite_differences() {
        use crate::ndgrad::{grad_check, GradCheckOpts};
        let cfg = CriticConfig { d: 16, clip: 20.0, lambda: 4e-2 };
        let mut rng = seeded(3, stream::GRADCHECK);
        // 8 x 16 embeddings, as in the module contract example.
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Array::new(vec![8, 16], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
                .unwrap()
                .with_grad()
        };
        let leaves = vec![mk(&mut rng), mk(&mut rng)];
        let report = grad_check(&leaves, &GradCheckOpts::default(), |tape, refs| {
            infonce(tape, refs[0], refs[1], &cfg)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
