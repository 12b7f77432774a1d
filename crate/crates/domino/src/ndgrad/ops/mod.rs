//! Forward and backward rules for every tape operation.

mod conv;
mod loss;
mod norm;

use super::array::Scalar;
use super::NdError;

/// Whether batch normalization uses batch statistics (train) or the
/// caller-supplied running statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Operation kind with its attributes.
///
/// Shapes follow standard definitions: convolutions are NCHW with square
/// kernels, matmul is 2-D row-major. Inputs per kind are documented on
/// [`crate::ndgrad::Tape`]'s helper methods.
#[derive(Debug, Clone)]
pub enum OpKind {
    MatMul,
    Transpose,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    BatchNorm2d { eps: f64, mode: BatchNormMode },
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Add,
    Sub,
    Mul,
    Div,
    Scale { factor: f64 },
    AddConst { offset: f64 },
    Sum,
    Mean,
    MeanRows,
    SubRow,
    MulRow,
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    SoftmaxXent { labels: Vec<usize> },
    Mse,
    TakeDiag,
    LseNegatives { floor: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::ConvT2d { .. } => "convT2d",
            OpKind::BatchNorm2d { .. } => "batchnorm2d",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale { .. } => "scale",
            OpKind::AddConst { .. } => "add_const",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::SubRow => "sub_row",
            OpKind::MulRow => "mul_row",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::SoftmaxXent { .. } => "softmax_xent",
            OpKind::Mse => "mse",
            OpKind::TakeDiag => "take_diag",
            OpKind::LseNegatives { .. } => "lse_negatives",
        }
    }
}

/// Canonical list of op kind names, used by the grad-check harnesses.
pub const ALL_KIND_NAMES: &[&str] = &[
    "matmul",
    "transpose",
    "conv2d",
    "convT2d",
    "batchnorm2d",
    "leaky_relu",
    "relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_const",
    "sum",
    "mean",
    "mean_rows",
    "sub_row",
    "mul_row",
    "reshape",
    "concat",
    "slice",
    "softmax_xent",
    "mse",
    "take_diag",
    "lse_negatives",
];

/// Values an op stores during forward for use in backward.
#[derive(Debug, Clone)]
pub enum Saved<T> {
    None,
    /// Per-channel batch mean and biased variance (batchnorm train mode).
    BatchStats { mean: Vec<T>, var: Vec<T> },
    /// Softmax probabilities (softmax_xent).
    Probs(Vec<T>),
}

pub(crate) struct Input<'a, T> {
    pub values: &'a [T],
    pub shape: &'a [usize],
}

pub(crate) struct ForwardOut<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub saved: Saved<T>,
}

fn arity(op: &'static str, inputs: &[Input<'_, impl Scalar>], expected: usize) -> Result<(), NdError> {
    if inputs.len() != expected {
        return Err(NdError::BadArity { op, expected, got: inputs.len() });
    }
    Ok(())
}

fn mismatch(op: &'static str, detail: String) -> NdError {
    NdError::ShapeMismatch { op, detail }
}

fn same_shape<'a, T: Scalar>(op: &'static str, inputs: &[Input<'a, T>]) -> Result<(), NdError> {
    arity(op, inputs, 2)?;
    if inputs[0].shape != inputs[1].shape {
        return Err(mismatch(op, format!("{:?} vs {:?}", inputs[0].shape, inputs[1].shape)));
    }
    Ok(())
}

fn rows_cols(op: &'static str, shape: &[usize]) -> Result<(usize, usize), NdError> {
    if shape.len() != 2 {
        return Err(mismatch(op, format!("expected a 2-D input, got {:?}", shape)));
    }
    Ok((shape[0], shape[1]))
}

pub(crate) fn forward<T: Scalar>(kind: &OpKind, inputs: &[Input<'_, T>]) -> Result<ForwardOut<T>, NdError> {
    let out = match kind {
        OpKind::MatMul => {
            arity("matmul", inputs, 2)?;
            let (n, k) = rows_cols("matmul", inputs[0].shape)?;
            let (k2, m) = rows_cols("matmul", inputs[1].shape)?;
            if k != k2 {
                return Err(mismatch("matmul", format!("{n}x{k} * {k2}x{m}")));
            }
            let mut values = vec![T::zero(); n * m];
            T::gemm(n, k, m, T::one(), inputs[0].values, inputs[1].values, T::zero(), &mut values);
            ForwardOut { shape: vec![n, m], values, saved: Saved::None }
        }
        OpKind::Transpose => {
            arity("transpose", inputs, 1)?;
            let (n, m) = rows_cols("transpose", inputs[0].shape)?;
            let x = inputs[0].values;
            let mut values = vec![T::zero(); n * m];
            for i in 0..n {
                for j in 0..m {
                    values[j * n + i] = x[i * m + j];
                }
            }
            ForwardOut { shape: vec![m, n], values, saved: Saved::None }
        }
        OpKind::Conv2d { stride, pad } => conv::conv2d_forward(inputs, *stride, *pad)?,
        OpKind::ConvT2d { stride, pad } => conv::conv_transpose2d_forward(inputs, *stride, *pad)?,
        OpKind::BatchNorm2d { eps, mode } => norm::batchnorm_forward(inputs, *eps, *mode)?,
        OpKind::LeakyRelu { slope } => {
            arity("leaky_relu", inputs, 1)?;
            let s = T::from_f64(*slope);
            unary(inputs, |x| if x >= T::zero() { x } else { s * x })
        }
        OpKind::Relu => {
            arity("relu", inputs, 1)?;
            unary(inputs, |x| if x >= T::zero() { x } else { T::zero() })
        }
        OpKind::Tanh => {
            arity("tanh", inputs, 1)?;
            unary(inputs, |x| x.tanh())
        }
        OpKind::Exp => {
            arity("exp", inputs, 1)?;
            unary(inputs, |x| x.exp())
        }
        OpKind::Log => {
            arity("log", inputs, 1)?;
            unary(inputs, |x| x.ln())
        }
        OpKind::Sqrt => {
            arity("sqrt", inputs, 1)?;
            unary(inputs, |x| x.sqrt())
        }
        OpKind::Add => {
            same_shape("add", inputs)?;
            binary(inputs, |a, b| a + b)
        }
        OpKind::Sub => {
            same_shape("sub", inputs)?;
            binary(inputs, |a, b| a - b)
        }
        OpKind::Mul => {
            same_shape("mul", inputs)?;
            binary(inputs, |a, b| a * b)
        }
        OpKind::Div => {
            same_shape("div", inputs)?;
            binary(inputs, |a, b| a / b)
        }
        OpKind::Scale { factor } => {
            arity("scale", inputs, 1)?;
            let c = T::from_f64(*factor);
            unary(inputs, |x| c * x)
        }
        OpKind::AddConst { offset } => {
            arity("add_const", inputs, 1)?;
            let c = T::from_f64(*offset);
            unary(inputs, |x| x + c)
        }
        OpKind::Sum => {
            arity("sum", inputs, 1)?;
            let total: T = inputs[0].values.iter().copied().sum();
            ForwardOut { shape: vec![1], values: vec![total], saved: Saved::None }
        }
        OpKind::Mean => {
            arity("mean", inputs, 1)?;
            let total: T = inputs[0].values.iter().copied().sum();
            let n = T::from_f64(inputs[0].values.len() as f64);
            ForwardOut { shape: vec![1], values: vec![total / n], saved: Saved::None }
        }
        OpKind::MeanRows => {
            arity("mean_rows", inputs, 1)?;
            let (n, d) = rows_cols("mean_rows", inputs[0].shape)?;
            let inv = T::from_f64(1.0 / n as f64);
            let mut values = vec![T::zero(); d];
            for row in inputs[0].values.chunks_exact(d) {
                for (v, &x) in values.iter_mut().zip(row) {
                    *v += x;
                }
            }
            for v in values.iter_mut() {
                *v *= inv;
            }
            ForwardOut { shape: vec![d], values, saved: Saved::None }
        }
        OpKind::SubRow | OpKind::MulRow => {
            arity(kind.name(), inputs, 2)?;
            let (_, d) = rows_cols(kind.name(), inputs[0].shape)?;
            if inputs[1].shape != [d] {
                return Err(mismatch(
                    kind.name(),
                    format!("matrix {:?} with row vector {:?}", inputs[0].shape, inputs[1].shape),
                ));
            }
            let v = inputs[1].values;
            let mul = matches!(kind, OpKind::MulRow);
            let values = inputs[0]
                .values
                .chunks_exact(d)
                .flat_map(|row| {
                    row.iter().zip(v).map(move |(&a, &b)| if mul { a * b } else { a - b })
                })
                .collect();
            ForwardOut { shape: inputs[0].shape.to_vec(), values, saved: Saved::None }
        }
        OpKind::Reshape { shape } => {
            arity("reshape", inputs, 1)?;
            let numel: usize = shape.iter().product();
            if numel != inputs[0].values.len() {
                return Err(mismatch(
                    "reshape",
                    format!("{:?} -> {:?} changes element count", inputs[0].shape, shape),
                ));
            }
            ForwardOut { shape: shape.clone(), values: inputs[0].values.to_vec(), saved: Saved::None }
        }
        OpKind::Concat { axis } => concat_forward(inputs, *axis)?,
        OpKind::Slice { axis, start, len } => slice_forward(inputs, *axis, *start, *len)?,
        OpKind::SoftmaxXent { labels } => loss::softmax_xent_forward(inputs, labels)?,
        OpKind::Mse => loss::mse_forward(inputs)?,
        OpKind::TakeDiag => {
            arity("take_diag", inputs, 1)?;
            let (n, m) = rows_cols("take_diag", inputs[0].shape)?;
            if n != m {
                return Err(mismatch("take_diag", format!("expected a square matrix, got {n}x{m}")));
            }
            let values = (0..n).map(|i| inputs[0].values[i * n + i]).collect();
            ForwardOut { shape: vec![n], values, saved: Saved::None }
        }
        OpKind::LseNegatives { floor } => loss::lse_negatives_forward(inputs, *floor)?,
    };
    Ok(out)
}

fn unary<T: Scalar>(inputs: &[Input<'_, T>], f: impl Fn(T) -> T) -> ForwardOut<T> {
    ForwardOut {
        shape: inputs[0].shape.to_vec(),
        values: inputs[0].values.iter().map(|&x| f(x)).collect(),
        saved: Saved::None,
    }
}

fn binary<T: Scalar>(inputs: &[Input<'_, T>], f: impl Fn(T, T) -> T) -> ForwardOut<T> {
    ForwardOut {
        shape: inputs[0].shape.to_vec(),
        values: inputs[0].values.iter().zip(inputs[1].values).map(|(&a, &b)| f(a, b)).collect(),
        saved: Saved::None,
    }
}

fn concat_forward<T: Scalar>(inputs: &[Input<'_, T>], axis: usize) -> Result<ForwardOut<T>, NdError> {
    if inputs.is_empty() {
        return Err(NdError::BadArity { op: "concat", expected: 1, got: 0 });
    }
    let rank = inputs[0].shape.len();
    if axis >= rank {
        return Err(mismatch("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let mut out_shape = inputs[0].shape.to_vec();
    out_shape[axis] = 0;
    for inp in inputs {
        if inp.shape.len() != rank
            || inp.shape[..axis] != inputs[0].shape[..axis]
            || inp.shape[axis + 1..] != inputs[0].shape[axis + 1..]
        {
            return Err(mismatch(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", inputs[0].shape, inp.shape),
            ));
        }
        out_shape[axis] += inp.shape[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut values = vec![T::zero(); out_shape.iter().product()];
    let out_stride = out_shape[axis] * inner;
    let mut offset = 0;
    for inp in inputs {
        let block = inp.shape[axis] * inner;
        for o in 0..outer {
            let src = &inp.values[o * block..(o + 1) * block];
            values[o * out_stride + offset..o * out_stride + offset + block].copy_from_slice(src);
        }
        offset += block;
    }
    Ok(ForwardOut { shape: out_shape, values, saved: Saved::None })
}

fn slice_forward<T: Scalar>(
    inputs: &[Input<'_, T>],
    axis: usize,
    start: usize,
    len: usize,
) -> Result<ForwardOut<T>, NdError> {
    arity("slice", inputs, 1)?;
    let shape = inputs[0].shape;
    if axis >= shape.len() {
        return Err(mismatch("slice", format!("axis {axis} out of range for {shape:?}")));
    }
    if len == 0 || start + len > shape[axis] {
        return Err(mismatch("slice", format!("range {start}..{} exceeds {shape:?} on axis {axis}", start + len)));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let in_stride = shape[axis] * inner;
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut values = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * in_stride + start * inner;
        values.extend_from_slice(&inputs[0].values[base..base + len * inner]);
    }
    Ok(ForwardOut { shape: out_shape, values, saved: Saved::None })
}

/// Per-input gradients, aligned with the op's inputs; `None` where the
/// input does not need a gradient.
pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;

pub(crate) fn backward<T: Scalar>(
    kind: &OpKind,
    inputs: &[Input<'_, T>],
    out_values: &[T],
    saved: &Saved<T>,
    d_out: &[T],
    needs: &[bool],
) -> InputGrads<T> {
    let mut grads: InputGrads<T> = needs
        .iter()
        .zip(inputs)
        .map(|(&n, inp)| if n { Some(vec![T::zero(); inp.values.len()]) } else { None })
        .collect();

    match kind {
        OpKind::MatMul => {
            let (n, k) = (inputs[0].shape[0], inputs[0].shape[1]);
            let m = inputs[1].shape[1];
            if let Some(da) = grads[0].as_deref_mut() {
                // dA = dOut * B^T
                let mut bt = vec![T::zero(); k * m];
                transpose_into(inputs[1].values, k, m, &mut bt);
                T::gemm(n, m, k, T::one(), d_out, &bt, T::zero(), da);
            }
            if let Some(db) = grads[1].as_deref_mut() {
                // dB = A^T * dOut
                let mut at = vec![T::zero(); n * k];
                transpose_into(inputs[0].values, n, k, &mut at);
                T::gemm(k, n, m, T::one(), &at, d_out, T::zero(), db);
            }
        }
        OpKind::Transpose => {
            if let Some(dx) = grads[0].as_deref_mut() {
                let (n, m) = (inputs[0].shape[0], inputs[0].shape[1]);
                // d_out is m x n; transpose back.
                transpose_into(d_out, m, n, dx);
            }
        }
        OpKind::Conv2d { stride, pad } => conv::conv2d_backward(inputs, d_out, *stride, *pad, &mut grads),
        OpKind::ConvT2d { stride, pad } => {
            conv::conv_transpose2d_backward(inputs, d_out, *stride, *pad, &mut grads)
        }
        OpKind::BatchNorm2d { eps, mode } => {
            norm::batchnorm_backward(inputs, saved, d_out, *eps, *mode, &mut grads)
        }
        OpKind::LeakyRelu { slope } => {
            let s = T::from_f64(*slope);
            unary_backward(inputs, out_values, d_out, &mut grads, |x, _| {
                if x >= T::zero() {
                    T::one()
                } else {
                    s
                }
            });
        }
        OpKind::Relu => {
            unary_backward(inputs, out_values, d_out, &mut grads, |x, _| {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            });
        }
        OpKind::Tanh => {
            unary_backward(inputs, out_values, d_out, &mut grads, |_, y| T::one() - y * y);
        }
        OpKind::Exp => {
            unary_backward(inputs, out_values, d_out, &mut grads, |_, y| y);
        }
        OpKind::Log => {
            unary_backward(inputs, out_values, d_out, &mut grads, |x, _| T::one() / x);
        }
        OpKind::Sqrt => {
            let half = T::from_f64(0.5);
            unary_backward(inputs, out_values, d_out, &mut grads, |_, y| half / y);
        }
        OpKind::Add => {
            for g in grads.iter_mut().flatten() {
                accumulate(g, d_out, T::one());
            }
        }
        OpKind::Sub => {
            if let Some(da) = grads[0].as_deref_mut() {
                accumulate(da, d_out, T::one());
            }
            if let Some(db) = grads[1].as_deref_mut() {
                accumulate(db, d_out, -T::one());
            }
        }
        OpKind::Mul => {
            if let Some(da) = grads[0].as_deref_mut() {
                for ((g, &d), &b) in da.iter_mut().zip(d_out).zip(inputs[1].values) {
                    *g += d * b;
                }
            }
            if let Some(db) = grads[1].as_deref_mut() {
                for ((g, &d), &a) in db.iter_mut().zip(d_out).zip(inputs[0].values) {
                    *g += d * a;
                }
            }
        }
        OpKind::Div => {
            if let Some(da) = grads[0].as_deref_mut() {
                for ((g, &d), &b) in da.iter_mut().zip(d_out).zip(inputs[1].values) {
                    *g += d / b;
                }
            }
            if let Some(db) = grads[1].as_deref_mut() {
                for (((g, &d), &a), &b) in db.iter_mut().zip(d_out).zip(inputs[0].values).zip(inputs[1].values)
                {
                    *g = *g - d * a / (b * b);
                }
            }
        }
        OpKind::Scale { factor } => {
            if let Some(dx) = grads[0].as_deref_mut() {
                accumulate(dx, d_out, T::from_f64(*factor));
            }
        }
        OpKind::AddConst { .. } => {
            if let Some(dx) = grads[0].as_deref_mut() {
                accumulate(dx, d_out, T::one());
            }
        }
        OpKind::Sum => {
            if let Some(dx) = grads[0].as_deref_mut() {
                let d = d_out[0];
                for g in dx.iter_mut() {
                    *g += d;
                }
            }
        }
        OpKind::Mean => {
            if let Some(dx) = grads[0].as_deref_mut() {
                let d = d_out[0] / T::from_f64(inputs[0].values.len() as f64);
                for g in dx.iter_mut() {
                    *g += d;
                }
            }
        }
        OpKind::MeanRows => {
            if let Some(dx) = grads[0].as_deref_mut() {
                let d = inputs[0].shape[1];
                let inv = T::from_f64(1.0 / inputs[0].shape[0] as f64);
                for row in dx.chunks_exact_mut(d) {
                    for (g, &dv) in row.iter_mut().zip(d_out) {
                        *g += dv * inv;
                    }
                }
            }
        }
        OpKind::SubRow => {
            let d = inputs[1].values.len();
            if let Some(da) = grads[0].as_deref_mut() {
                accumulate(da, d_out, T::one());
            }
            if let Some(dv) = grads[1].as_deref_mut() {
                for row in d_out.chunks_exact(d) {
                    for (g, &dd) in dv.iter_mut().zip(row) {
                        *g -= dd;
                    }
                }
            }
        }
        OpKind::MulRow => {
            let d = inputs[1].values.len();
            if let Some(da) = grads[0].as_deref_mut() {
                for (row_g, row_d) in da.chunks_exact_mut(d).zip(d_out.chunks_exact(d)) {
                    for ((g, &dd), &v) in row_g.iter_mut().zip(row_d).zip(inputs[1].values) {
                        *g += dd * v;
                    }
                }
            }
            if let Some(dv) = grads[1].as_deref_mut() {
                for (row_a, row_d) in inputs[0].values.chunks_exact(d).zip(d_out.chunks_exact(d)) {
                    for ((g, &dd), &a) in dv.iter_mut().zip(row_d).zip(row_a) {
                        *g += dd * a;
                    }
                }
            }
        }
        OpKind::Reshape { .. } => {
            if let Some(dx) = grads[0].as_deref_mut() {
                accumulate(dx, d_out, T::one());
            }
        }
        OpKind::Concat { axis } => {
            let outer: usize = inputs[0].shape[..*axis].iter().product();
            let inner: usize = inputs[0].shape[*axis + 1..].iter().product();
            let total_axis: usize = inputs.iter().map(|i| i.shape[*axis]).sum();
            let out_stride = total_axis * inner;
            let mut offset = 0;
            for (inp, g) in inputs.iter().zip(grads.iter_mut()) {
                let block = inp.shape[*axis] * inner;
                if let Some(gv) = g.as_deref_mut() {
                    for o in 0..outer {
                        let src = &d_out[o * out_stride + offset..o * out_stride + offset + block];
                        for (gg, &dd) in gv[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *gg += dd;
                        }
                    }
                }
                offset += block;
            }
        }
        OpKind::Slice { axis, start, len } => {
            if let Some(dx) = grads[0].as_deref_mut() {
                let shape = inputs[0].shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let in_stride = shape[*axis] * inner;
                let block = len * inner;
                for o in 0..outer {
                    let dst = &mut dx[o * in_stride + start * inner..o * in_stride + start * inner + block];
                    for (g, &dd) in dst.iter_mut().zip(&d_out[o * block..(o + 1) * block]) {
                        *g += dd;
                    }
                }
            }
        }
        OpKind::SoftmaxXent { labels } => loss::softmax_xent_backward(inputs, saved, d_out, labels, &mut grads),
        OpKind::Mse => loss::mse_backward(inputs, d_out, &mut grads),
        OpKind::TakeDiag => {
            if let Some(dx) = grads[0].as_deref_mut() {
                let n = inputs[0].shape[0];
                for i in 0..n {
                    dx[i * n + i] += d_out[i];
                }
            }
        }
        OpKind::LseNegatives { .. } => loss::lse_negatives_backward(inputs, out_values, d_out, &mut grads),
    }
    grads
}

fn unary_backward<T: Scalar>(
    inputs: &[Input<'_, T>],
    out_values: &[T],
    d_out: &[T],
    grads: &mut InputGrads<T>,
    dfdx: impl Fn(T, T) -> T,
) {
    // dfdx receives (input, output); callers use whichever is cheaper.
    if let Some(dx) = grads[0].as_deref_mut() {
        let x = inputs[0].values;
        for i in 0..dx.len() {
            dx[i] += d_out[i] * dfdx(x[i], out_values[i]);
        }
    }
}

pub(crate) fn accumulate<T: Scalar>(dst: &mut [T], src: &[T], factor: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

pub(crate) fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}
