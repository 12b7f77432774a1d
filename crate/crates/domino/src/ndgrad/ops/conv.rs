//! conv2d / convT2d via im2col + gemm.
//!
//! Layouts: activations are NCHW, conv weights are (F, C, k, k), transposed
//! conv weights are (C, F, k, k). Kernels are square, stride and zero padding
//! are symmetric.

use super::{arity, mismatch, ForwardOut, Input, InputGrads, Saved};
use crate::ndgrad::array::Scalar;
use crate::ndgrad::NdError;

struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom<T: Scalar>(inputs: &[Input<'_, T>], stride: usize, pad: usize) -> Result<Geom, NdError> {
    let xs = inputs[0].shape;
    let ws = inputs[1].shape;
    if xs.len() != 4 || ws.len() != 4 {
        return Err(mismatch("conv2d", format!("expected NCHW input and FCkk weight, got {xs:?} and {ws:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, wc, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
    if wc != c || k != k2 {
        return Err(mismatch("conv2d", format!("weight {ws:?} does not match input {xs:?}")));
    }
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(mismatch("conv2d", format!("kernel {k} with stride {stride}, pad {pad} exceeds {h}x{w}")));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    if inputs.len() == 3 && inputs[2].shape != [f] {
        return Err(mismatch("conv2d", format!("bias {:?} does not match {f} filters", inputs[2].shape)));
    }
    Ok(Geom { n, c, h, w, f, k, oh, ow })
}

fn convt_geom<T: Scalar>(inputs: &[Input<'_, T>], stride: usize, pad: usize) -> Result<Geom, NdError> {
    let xs = inputs[0].shape;
    let ws = inputs[1].shape;
    if xs.len() != 4 || ws.len() != 4 {
        return Err(mismatch("convT2d", format!("expected NCHW input and CFkk weight, got {xs:?} and {ws:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (wc, f, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
    if wc != c || k != k2 {
        return Err(mismatch("convT2d", format!("weight {ws:?} does not match input {xs:?}")));
    }
    if stride == 0 || (h - 1) * stride + k <= 2 * pad || (w - 1) * stride + k <= 2 * pad {
        return Err(mismatch("convT2d", format!("stride {stride}, pad {pad} yields an empty output for {h}x{w}")));
    }
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (w - 1) * stride + k - 2 * pad;
    if inputs.len() == 3 && inputs[2].shape != [f] {
        return Err(mismatch("convT2d", format!("bias {:?} does not match {f} filters", inputs[2].shape)));
    }
    Ok(Geom { n, c, h, w, f, k, oh, ow })
}

/// Unfold one image (`c` x `h` x `w`) into columns of kernel patches.
///
/// `cols` is (c*k*k) rows by (hp*wp) columns where (hp, wp) is the grid of
/// kernel placements; out-of-bounds taps read as zero. Overwrites `cols`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    cols: &mut [T],
) {
    let positions = hp * wp;
    debug_assert_eq!(cols.len(), c * k * k * positions);
    for ch in 0..c {
        let img_ch = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let out_row = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..hp {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let base = oy * wp;
                    if iy < 0 || iy >= h as isize {
                        out_row[base..base + wp].iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wp {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        out_row[base + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            img_ch[iy * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back into an image, accumulating overlapping taps.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    img: &mut [T],
) {
    let positions = hp * wp;
    debug_assert_eq!(cols.len(), c * k * k * positions);
    for ch in 0..c {
        let img_ch = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let col_row = &cols[row * positions..(row + 1) * positions];
                for oy in 0..hp {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wp {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img_ch[iy * w + ix as usize] += col_row[oy * wp + ox];
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward<T: Scalar>(
    inputs: &[Input<'_, T>],
    stride: usize,
    pad: usize,
) -> Result<ForwardOut<T>, NdError> {
    if inputs.len() < 2 || inputs.len() > 3 {
        arity("conv2d", inputs, 2)?;
    }
    let g = conv_geom(inputs, stride, pad)?;
    let positions = g.oh * g.ow;
    let patch = g.c * g.k * g.k;
    let mut cols = vec![T::zero(); patch * positions];
    let mut values = vec![T::zero(); g.n * g.f * positions];
    for i in 0..g.n {
        let img = &inputs[0].values[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w];
        im2col(img, g.c, g.h, g.w, g.k, stride, pad, g.oh, g.ow, &mut cols);
        let out_img = &mut values[i * g.f * positions..(i + 1) * g.f * positions];
        T::gemm(g.f, patch, positions, T::one(), inputs[1].values, &cols, T::zero(), out_img);
        if let Some(bias) = inputs.get(2) {
            for f in 0..g.f {
                let b = bias.values[f];
                for v in out_img[f * positions..(f + 1) * positions].iter_mut() {
                    *v += b;
                }
            }
        }
    }
    Ok(ForwardOut { shape: vec![g.n, g.f, g.oh, g.ow], values, saved: Saved::None })
}

pub(super) fn conv2d_backward<T: Scalar>(
    inputs: &[Input<'_, T>],
    d_out: &[T],
    stride: usize,
    pad: usize,
    grads: &mut InputGrads<T>,
) {
    let g = conv_geom(inputs, stride, pad).expect("shapes validated in forward");
    let positions = g.oh * g.ow;
    let patch = g.c * g.k * g.k;
    let need_x = grads[0].is_some();
    let need_w = grads[1].is_some();
    let mut cols = vec![T::zero(); patch * positions];
    let mut wt = vec![T::zero(); patch * g.f];
    if need_x {
        super::transpose_into(inputs[1].values, g.f, patch, &mut wt);
    }
    let mut d_cols = vec![T::zero(); patch * positions];
    for i in 0..g.n {
        let d_img = &d_out[i * g.f * positions..(i + 1) * g.f * positions];
        if need_w {
            let img = &inputs[0].values[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w];
            im2col(img, g.c, g.h, g.w, g.k, stride, pad, g.oh, g.ow, &mut cols);
            // dW += dOut * cols^T
            let dw = grads[1].as_deref_mut().expect("need_w");
            gemm_abt_accum(g.f, positions, patch, d_img, &cols, dw);
        }
        if need_x {
            // d_cols = W^T * dOut, then fold back into the input image.
            T::gemm(patch, g.f, positions, T::one(), &wt, d_img, T::zero(), &mut d_cols);
            let dx = grads[0].as_deref_mut().expect("need_x");
            let dx_img = &mut dx[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w];
            col2im(&d_cols, g.c, g.h, g.w, g.k, stride, pad, g.oh, g.ow, dx_img);
        }
        if let Some(db) = grads.get_mut(2).and_then(|g| g.as_deref_mut()) {
            for f in 0..g.f {
                db[f] += d_img[f * positions..(f + 1) * positions].iter().copied().sum();
            }
        }
    }
}

pub(super) fn conv_transpose2d_forward<T: Scalar>(
    inputs: &[Input<'_, T>],
    stride: usize,
    pad: usize,
) -> Result<ForwardOut<T>, NdError> {
    if inputs.len() < 2 || inputs.len() > 3 {
        arity("convT2d", inputs, 2)?;
    }
    let g = convt_geom(inputs, stride, pad)?;
    let positions = g.h * g.w;
    let patch = g.f * g.k * g.k;
    // Weight viewed as (C x F*k*k); transposed once up front.
    let mut wt = vec![T::zero(); patch * g.c];
    super::transpose_into(inputs[1].values, g.c, patch, &mut wt);
    let mut cols = vec![T::zero(); patch * positions];
    let mut values = vec![T::zero(); g.n * g.f * g.oh * g.ow];
    for i in 0..g.n {
        let img = &inputs[0].values[i * g.c * positions..(i + 1) * g.c * positions];
        T::gemm(patch, g.c, positions, T::one(), &wt, img, T::zero(), &mut cols);
        let out_img = &mut values[i * g.f * g.oh * g.ow..(i + 1) * g.f * g.oh * g.ow];
        col2im(&cols, g.f, g.oh, g.ow, g.k, stride, pad, g.h, g.w, out_img);
        if let Some(bias) = inputs.get(2) {
            for f in 0..g.f {
                let b = bias.values[f];
                for v in out_img[f * g.oh * g.ow..(f + 1) * g.oh * g.ow].iter_mut() {
                    *v += b;
                }
            }
        }
    }
    Ok(ForwardOut { shape: vec![g.n, g.f, g.oh, g.ow], values, saved: Saved::None })
}

pub(super) fn conv_transpose2d_backward<T: Scalar>(
    inputs: &[Input<'_, T>],
    d_out: &[T],
    stride: usize,
    pad: usize,
    grads: &mut InputGrads<T>,
) {
    let g = convt_geom(inputs, stride, pad).expect("shapes validated in forward");
    let positions = g.h * g.w;
    let patch = g.f * g.k * g.k;
    let mut d_cols = vec![T::zero(); patch * positions];
    for i in 0..g.n {
        let d_img = &d_out[i * g.f * g.oh * g.ow..(i + 1) * g.f * g.oh * g.ow];
        im2col(d_img, g.f, g.oh, g.ow, g.k, stride, pad, g.h, g.w, &mut d_cols);
        if let Some(dx) = grads[0].as_deref_mut() {
            // dX = W_mat (C x F*k*k) * d_cols
            let dx_img = &mut dx[i * g.c * positions..(i + 1) * g.c * positions];
            T::gemm(g.c, patch, positions, T::one(), inputs[1].values, &d_cols, T::one(), dx_img);
        }
        if let Some(dw) = grads[1].as_deref_mut() {
            // dW_mat += X (C x HW) * d_cols^T
            let img = &inputs[0].values[i * g.c * positions..(i + 1) * g.c * positions];
            gemm_abt_accum(g.c, positions, patch, img, &d_cols, dw);
        }
        if let Some(db) = grads.get_mut(2).and_then(|g| g.as_deref_mut()) {
            let per = g.oh * g.ow;
            for f in 0..g.f {
                db[f] += d_img[f * per..(f + 1) * per].iter().copied().sum();
            }
        }
    }
}

/// dst (n x m) += A (n x k) * B^T where B is (m x k).
fn gemm_abt_accum<T: Scalar>(n: usize, k: usize, m: usize, a: &[T], b: &[T], dst: &mut [T]) {
    // Both operands are row-major; express B^T through strides.
    let mut bt = vec![T::zero(); k * m];
    super::transpose_into(b, m, k, &mut bt);
    T::gemm(n, k, m, T::one(), a, &bt, T::one(), dst);
}
