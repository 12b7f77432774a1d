//! Loss-shaped ops: softmax cross-entropy, mean squared error, and the
//! masked log-sum-exp over negative scores used by the contrastive bound.

use super::{arity, mismatch, same_shape, ForwardOut, Input, InputGrads, Saved};
use crate::ndgrad::array::Scalar;
use crate::ndgrad::NdError;

pub(super) fn softmax_xent_forward<T: Scalar>(
    inputs: &[Input<'_, T>],
    labels: &[usize],
) -> Result<ForwardOut<T>, NdError> {
    arity("softmax_xent", inputs, 1)?;
    let shape = inputs[0].shape;
    if shape.len() != 2 {
        return Err(mismatch("softmax_xent", format!("expected N x K logits, got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(mismatch("softmax_xent", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(mismatch("softmax_xent", format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for (i, row) in inputs[0].values.chunks_exact(k).enumerate() {
        let max = row.iter().copied().fold(row[0], T::max);
        let p = &mut probs[i * k..(i + 1) * k];
        let mut z = T::zero();
        for (pj, &s) in p.iter_mut().zip(row) {
            *pj = (s - max).exp();
            z += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= z;
        }
        // -log p[label], in the stable shifted form.
        total += z.ln() + max - row[labels[i]];
    }
    let loss = total / T::from_f64(n as f64);
    Ok(ForwardOut { shape: vec![1], values: vec![loss], saved: Saved::Probs(probs) })
}

pub(super) fn softmax_xent_backward<T: Scalar>(
    inputs: &[Input<'_, T>],
    saved: &Saved<T>,
    d_out: &[T],
    labels: &[usize],
    grads: &mut InputGrads<T>,
) {
    let Some(dx) = grads[0].as_deref_mut() else { return };
    let probs = match saved {
        Saved::Probs(p) => p,
        _ => unreachable!("softmax_xent saves probabilities"),
    };
    let (n, k) = (inputs[0].shape[0], inputs[0].shape[1]);
    let scale = d_out[0] / T::from_f64(n as f64);
    for i in 0..n {
        let row = &probs[i * k..(i + 1) * k];
        let g = &mut dx[i * k..(i + 1) * k];
        for (j, (gj, &pj)) in g.iter_mut().zip(row).enumerate() {
            let target = if j == labels[i] { T::one() } else { T::zero() };
            *gj += scale * (pj - target);
        }
    }
}

pub(super) fn mse_forward<T: Scalar>(inputs: &[Input<'_, T>]) -> Result<ForwardOut<T>, NdError> {
    same_shape("mse", inputs)?;
    let numel = T::from_f64(inputs[0].values.len() as f64);
    let total: T = inputs[0]
        .values
        .iter()
        .zip(inputs[1].values)
        .map(|(&a, &b)| {
            let d = a - b;
            d * d
        })
        .sum();
    Ok(ForwardOut { shape: vec![1], values: vec![total / numel], saved: Saved::None })
}

pub(super) fn mse_backward<T: Scalar>(inputs: &[Input<'_, T>], d_out: &[T], grads: &mut InputGrads<T>) {
    let numel = T::from_f64(inputs[0].values.len() as f64);
    let scale = T::from_f64(2.0) * d_out[0] / numel;
    if let Some(da) = grads[0].as_deref_mut() {
        for ((g, &a), &b) in da.iter_mut().zip(inputs[0].values).zip(inputs[1].values) {
            *g += scale * (a - b);
        }
    }
    if let Some(db) = grads[1].as_deref_mut() {
        for ((g, &a), &b) in db.iter_mut().zip(inputs[0].values).zip(inputs[1].values) {
            *g -= scale * (a - b);
        }
    }
}

/// Row-wise log(exp(floor) + sum over off-diagonal exp(s)), max-shifted so
/// large scores cannot overflow. The diagonal (positive pair) is excluded;
/// the constant floor term keeps the argument strictly positive even when
/// every negative score is driven to -inf.
pub(super) fn lse_negatives_forward<T: Scalar>(
    inputs: &[Input<'_, T>],
    floor: f64,
) -> Result<ForwardOut<T>, NdError> {
    arity("lse_negatives", inputs, 1)?;
    let shape = inputs[0].shape;
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(mismatch("lse_negatives", format!("expected a square score matrix, got {shape:?}")));
    }
    let n = shape[0];
    let fl = T::from_f64(floor);
    let mut values = vec![T::zero(); n];
    for (l, row) in inputs[0].values.chunks_exact(n).enumerate() {
        let mut max = fl;
        for (k, &s) in row.iter().enumerate() {
            if k != l && s > max {
                max = s;
            }
        }
        let mut z = (fl - max).exp();
        for (k, &s) in row.iter().enumerate() {
            if k != l {
                z += (s - max).exp();
            }
        }
        values[l] = max + z.ln();
    }
    Ok(ForwardOut { shape: vec![n], values, saved: Saved::None })
}

pub(super) fn lse_negatives_backward<T: Scalar>(
    inputs: &[Input<'_, T>],
    out_values: &[T],
    d_out: &[T],
    grads: &mut InputGrads<T>,
) {
    let Some(dx) = grads[0].as_deref_mut() else { return };
    let n = inputs[0].shape[0];
    for l in 0..n {
        let row = &inputs[0].values[l * n..(l + 1) * n];
        let g = &mut dx[l * n..(l + 1) * n];
        let d = d_out[l];
        let out = out_values[l];
        for k in 0..n {
            if k != l {
                g[k] += d * (row[k] - out).exp();
            }
        }
    }
}
