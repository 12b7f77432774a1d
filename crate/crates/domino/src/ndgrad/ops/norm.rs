//! 2-D batch normalization.
//!
//! Train mode takes (x, gamma, beta) and normalizes with batch statistics,
//! saving the per-channel mean and biased variance for the backward pass and
//! for the caller's running-average update. Eval mode takes
//! (x, gamma, beta, running_mean, running_var) and is a pure affine map.

use super::{arity, mismatch, BatchNormMode, ForwardOut, Input, InputGrads, Saved};
use crate::ndgrad::array::Scalar;
use crate::ndgrad::NdError;

fn check<T: Scalar>(inputs: &[Input<'_, T>], mode: BatchNormMode) -> Result<(usize, usize, usize), NdError> {
    let expected = match mode {
        BatchNormMode::Train => 3,
        BatchNormMode::Eval => 5,
    };
    arity("batchnorm2d", inputs, expected)?;
    let xs = inputs[0].shape;
    if xs.len() != 4 {
        return Err(mismatch("batchnorm2d", format!("expected NCHW input, got {xs:?}")));
    }
    let c = xs[1];
    for inp in &inputs[1..] {
        if inp.shape != [c] {
            return Err(mismatch(
                "batchnorm2d",
                format!("per-channel parameter {:?} does not match {c} channels", inp.shape),
            ));
        }
    }
    Ok((xs[0], c, xs[2] * xs[3]))
}

pub(super) fn batchnorm_forward<T: Scalar>(
    inputs: &[Input<'_, T>],
    eps: f64,
    mode: BatchNormMode,
) -> Result<ForwardOut<T>, NdError> {
    let (n, c, hw) = check(inputs, mode)?;
    let x = inputs[0].values;
    let gamma = inputs[1].values;
    let beta = inputs[2].values;
    let epsilon = T::from_f64(eps);
    let mut values = vec![T::zero(); x.len()];

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        BatchNormMode::Train => {
            let m = T::from_f64((n * hw) as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    s += x[base..base + hw].iter().copied().sum();
                }
                mean[ch] = s / m;
                let mut sq = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for &v in &x[base..base + hw] {
                        let d = v - mean[ch];
                        sq += d * d;
                    }
                }
                var[ch] = sq / m;
            }
            (mean, var)
        }
        BatchNormMode::Eval => (inputs[3].values.to_vec(), inputs[4].values.to_vec()),
    };

    for ch in 0..c {
        let inv_std = T::one() / (var[ch] + epsilon).sqrt();
        let g = gamma[ch];
        let b = beta[ch];
        let mu = mean[ch];
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for (out, &v) in values[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                *out = g * (v - mu) * inv_std + b;
            }
        }
    }

    let saved = match mode {
        BatchNormMode::Train => Saved::BatchStats { mean, var },
        BatchNormMode::Eval => Saved::None,
    };
    Ok(ForwardOut { shape: inputs[0].shape.to_vec(), values, saved })
}

pub(super) fn batchnorm_backward<T: Scalar>(
    inputs: &[Input<'_, T>],
    saved: &Saved<T>,
    d_out: &[T],
    eps: f64,
    mode: BatchNormMode,
    grads: &mut InputGrads<T>,
) {
    let (n, c, hw) = check(inputs, mode).expect("shapes validated in forward");
    let x = inputs[0].values;
    let gamma = inputs[1].values;
    let epsilon = T::from_f64(eps);

    match mode {
        BatchNormMode::Train => {
            let (mean, var) = match saved {
                Saved::BatchStats { mean, var } => (mean, var),
                _ => unreachable!("batchnorm train saves batch stats"),
            };
            let m = T::from_f64((n * hw) as f64);
            for ch in 0..c {
                let inv_std = T::one() / (var[ch] + epsilon).sqrt();
                let mu = mean[ch];
                // First pass: reduce d_out and d_out * x_hat over the channel.
                let mut sum_dy = T::zero();
                let mut sum_dy_xhat = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for (&dy, &v) in d_out[base..base + hw].iter().zip(&x[base..base + hw]) {
                        sum_dy += dy;
                        sum_dy_xhat += dy * (v - mu) * inv_std;
                    }
                }
                if let Some(dg) = grads[1].as_deref_mut() {
                    dg[ch] += sum_dy_xhat;
                }
                if let Some(db) = grads[2].as_deref_mut() {
                    db[ch] += sum_dy;
                }
                if let Some(dx) = grads[0].as_deref_mut() {
                    let scale = gamma[ch] * inv_std / m;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for ((g, &dy), &v) in
                            dx[base..base + hw].iter_mut().zip(&d_out[base..base + hw]).zip(&x[base..base + hw])
                        {
                            let xhat = (v - mu) * inv_std;
                            *g += scale * (m * dy - sum_dy - xhat * sum_dy_xhat);
                        }
                    }
                }
            }
        }
        BatchNormMode::Eval => {
            let rmean = inputs[3].values;
            let rvar = inputs[4].values;
            for ch in 0..c {
                let inv_std = T::one() / (rvar[ch] + epsilon).sqrt();
                let mu = rmean[ch];
                let mut sum_dy = T::zero();
                let mut sum_dy_xhat = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for (&dy, &v) in d_out[base..base + hw].iter().zip(&x[base..base + hw]) {
                        sum_dy += dy;
                        sum_dy_xhat += dy * (v - mu) * inv_std;
                    }
                }
                if let Some(dx) = grads[0].as_deref_mut() {
                    let scale = gamma[ch] * inv_std;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        for (g, &dy) in dx[base..base + hw].iter_mut().zip(&d_out[base..base + hw]) {
                            *g += scale * dy;
                        }
                    }
                }
                if let Some(dg) = grads[1].as_deref_mut() {
                    dg[ch] += sum_dy_xhat;
                }
                if let Some(db) = grads[2].as_deref_mut() {
                    db[ch] += sum_dy;
                }
                // Running statistics are inputs too, so eval mode still
                // reports exact derivatives for them.
                if let Some(dm) = grads[3].as_deref_mut() {
                    dm[ch] -= gamma[ch] * inv_std * sum_dy;
                }
                if let Some(dv) = grads[4].as_deref_mut() {
                    let half = T::from_f64(0.5);
                    dv[ch] -= half * gamma[ch] * inv_std * inv_std * sum_dy_xhat;
                }
            }
        }
    }
}
