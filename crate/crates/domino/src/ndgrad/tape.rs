//! The Wengert list. Values are appended in evaluation order, so the reverse
//! index sweep in [`Tape::backward`] visits nodes in valid topological order
//! without an explicit sort.

use super::array::{Array, Scalar};
use super::ops::{self, BatchNormMode, Input, OpKind, Saved};
use super::NdError;

/// Handle to a value on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueRef(pub(crate) usize);

impl ValueRef {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    kind: Option<OpKind>,
    inputs: Vec<ValueRef>,
    shape: Vec<usize>,
    values: Vec<T>,
    saved: Saved<T>,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to tape values, as produced by
/// [`Tape::backward`]. Interior gradients are dropped once consumed; leaf
/// gradients are retained.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer for `r`, if one was produced.
    pub fn get(&self, r: ValueRef) -> Option<&[T]> {
        self.grads.get(r.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf, taking `requires_grad` from the array.
    pub fn leaf(&mut self, array: &Array<T>) -> ValueRef {
        self.push_leaf(array.shape().to_vec(), array.data().to_vec(), array.requires_grad())
    }

    /// Record a constant (non-differentiated) leaf.
    pub fn constant(&mut self, shape: &[usize], values: &[T]) -> ValueRef {
        self.push_leaf(shape.to_vec(), values.to_vec(), false)
    }

    /// Record a differentiated leaf.
    pub fn param(&mut self, shape: &[usize], values: &[T]) -> ValueRef {
        self.push_leaf(shape.to_vec(), values.to_vec(), true)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, values: Vec<T>, needs_grad: bool) -> ValueRef {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "leaf shape {shape:?} does not match buffer length {}",
            values.len()
        );
        self.nodes.push(Node { kind: None, inputs: Vec::new(), shape, values, saved: Saved::None, needs_grad });
        ValueRef(self.nodes.len() - 1)
    }

    pub fn shape(&self, r: ValueRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    pub fn values(&self, r: ValueRef) -> &[T] {
        &self.nodes[r.0].values
    }

    /// Copy a tape value out as an [`Array`].
    pub fn to_array(&self, r: ValueRef) -> Array<T> {
        Array::new(self.shape(r).to_vec(), self.values(r).to_vec()).expect("tape values are consistent")
    }

    /// Record `kind` applied to `inputs` and evaluate it immediately.
    pub fn apply(&mut self, kind: OpKind, inputs: &[ValueRef]) -> Result<ValueRef, NdError> {
        for r in inputs {
            if r.0 >= self.nodes.len() {
                return Err(NdError::BadRef(r.0));
            }
        }
        let borrowed: Vec<Input<'_, T>> = inputs
            .iter()
            .map(|r| {
                let n = &self.nodes[r.0];
                Input { values: &n.values, shape: &n.shape }
            })
            .collect();
        let out = ops::forward(&kind, &borrowed)?;
        #[cfg(debug_assertions)]
        {
            let inputs_finite = borrowed.iter().all(|i| i.values.iter().all(|v| v.is_finite()));
            if inputs_finite {
                assert!(
                    out.values.iter().all(|v| v.is_finite()),
                    "{} produced a non-finite value from finite inputs",
                    kind.name()
                );
            }
        }
        let needs_grad = inputs.iter().any(|r| self.nodes[r.0].needs_grad);
        self.nodes.push(Node {
            kind: Some(kind),
            inputs: inputs.to_vec(),
            shape: out.shape,
            values: out.values,
            saved: out.saved,
            needs_grad,
        });
        Ok(ValueRef(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every leaf
    /// recorded with `requires_grad` that the root depends on.
    pub fn backward(&self, root: ValueRef) -> Result<Gradients<T>, NdError> {
        let root_node = self.nodes.get(root.0).ok_or(NdError::BadRef(root.0))?;
        if root_node.shape != [1] {
            return Err(NdError::RootNotScalar { shape: root_node.shape.clone() });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.kind.is_none() {
                continue;
            }
            let Some(d_out) = grads[idx].take() else { continue };
            let kind = node.kind.as_ref().expect("interior node");
            let borrowed: Vec<Input<'_, T>> = node
                .inputs
                .iter()
                .map(|r| {
                    let n = &self.nodes[r.0];
                    Input { values: &n.values, shape: &n.shape }
                })
                .collect();
            let needs: Vec<bool> = node.inputs.iter().map(|r| self.nodes[r.0].needs_grad).collect();
            let per_input = ops::backward(kind, &borrowed, &node.values, &node.saved, &d_out, &needs);
            for (slot, maybe) in per_input.into_iter().enumerate() {
                let Some(g) = maybe else { continue };
                let target = node.inputs[slot].0;
                match &mut grads[target] {
                    Some(acc) => ops::accumulate(acc, &g, T::one()),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Drop gradients of interior nodes; callers only read leaves.
        for (idx, g) in grads.iter_mut().enumerate() {
            if self.nodes[idx].kind.is_some() {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    // -- Op helpers ----------------------------------------------------------

    pub fn matmul(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn conv2d(
        &mut self,
        x: ValueRef,
        w: ValueRef,
        b: Option<ValueRef>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueRef, NdError> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(OpKind::Conv2d { stride, pad }, &inputs)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: ValueRef,
        w: ValueRef,
        b: Option<ValueRef>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueRef, NdError> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(OpKind::ConvT2d { stride, pad }, &inputs)
    }

    pub fn batchnorm_train(
        &mut self,
        x: ValueRef,
        gamma: ValueRef,
        beta: ValueRef,
        eps: f64,
    ) -> Result<ValueRef, NdError> {
        self.apply(OpKind::BatchNorm2d { eps, mode: BatchNormMode::Train }, &[x, gamma, beta])
    }

    /// Batch statistics of the highest recorded batchnorm-train call are not
    /// retained on the tape; use this to read them for running updates.
    pub fn batch_stats(&self, r: ValueRef) -> Option<(&[T], &[T])> {
        match &self.nodes[r.0].saved {
            Saved::BatchStats { mean, var } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn batchnorm_eval(
        &mut self,
        x: ValueRef,
        gamma: ValueRef,
        beta: ValueRef,
        running_mean: ValueRef,
        running_var: ValueRef,
        eps: f64,
    ) -> Result<ValueRef, NdError> {
        self.apply(
            OpKind::BatchNorm2d { eps, mode: BatchNormMode::Eval },
            &[x, gamma, beta, running_mean, running_var],
        )
    }

    pub fn leaky_relu(&mut self, x: ValueRef, slope: f64) -> Result<ValueRef, NdError> {
        self.apply(OpKind::LeakyRelu { slope }, &[x])
    }

    pub fn relu(&mut self, x: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn tanh(&mut self, x: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn exp(&mut self, x: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn log(&mut self, x: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Log, &[x])
    }

    pub fn sqrt(&mut self, x: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Sqrt, &[x])
    }

    pub fn add(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Div, &[a, b])
    }

    pub fn scale(&mut self, x: ValueRef, factor: f64) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Scale { factor }, &[x])
    }

    pub fn add_const(&mut self, x: ValueRef, offset: f64) -> Result<ValueRef, NdError> {
        self.apply(OpKind::AddConst { offset }, &[x])
    }

    pub fn sum(&mut self, x: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn mean_rows(&mut self, x: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::MeanRows, &[x])
    }

    pub fn sub_row(&mut self, x: ValueRef, row: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::SubRow, &[x, row])
    }

    pub fn mul_row(&mut self, x: ValueRef, row: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::MulRow, &[x, row])
    }

    pub fn reshape(&mut self, x: ValueRef, shape: &[usize]) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn concat(&mut self, xs: &[ValueRef], axis: usize) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: ValueRef, axis: usize, start: usize, len: usize) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Slice { axis, start, len }, &[x])
    }

    pub fn softmax_xent(&mut self, logits: ValueRef, labels: &[usize]) -> Result<ValueRef, NdError> {
        self.apply(OpKind::SoftmaxXent { labels: labels.to_vec() }, &[logits])
    }

    pub fn mse(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::Mse, &[a, b])
    }

    pub fn take_diag(&mut self, s: ValueRef) -> Result<ValueRef, NdError> {
        self.apply(OpKind::TakeDiag, &[s])
    }

    pub fn lse_negatives(&mut self, s: ValueRef, floor: f64) -> Result<ValueRef, NdError> {
        self.apply(OpKind::LseNegatives { floor }, &[s])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_leaf_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn mean_of_square_grads() {
        // L = mean(x^2), dL/dx_i = 2 x_i / n.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&[3], &[1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean(sq).unwrap();
        assert!((tape.values(loss)[0] - 14.0 / 3.0).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        let expect = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, e) in g.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn conv2d_ones_kernel_counts_taps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&[1, 1, 4, 4], &[1.0; 16]);
        let w = tape.param(&[1, 1, 2, 2], &[1.0; 4]);
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.values(y).iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn matmul_backward_matches_hand_result() {
        // L = sum(A B): dA = 1 * B^T, dB = A^T * 1.
        let mut tape = Tape::<f64>::new();
        let a = tape.param(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = tape.param(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn repeated_input_accumulates() {
        // L = sum(x + x) so dL/dx = 2.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&[3], &[1.0, -1.0, 0.5]);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&[3], &[1.0, 2.0, 3.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, NdError::RootNotScalar { .. }));
    }

    #[test]
    fn non_grad_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[2], &[1.0, 2.0]);
        let y = tape.param(&[2], &[3.0, 4.0]);
        let z = tape.mul(x, y).unwrap();
        let loss = tape.sum(z).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(&[2, 3], &[0.0; 6]);
        let b = tape.param(&[2, 3], &[0.0; 6]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }
}
