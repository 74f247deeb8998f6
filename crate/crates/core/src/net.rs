//! Fully connected relu classifier over a flat parameter vector.
//!
//! The flat layout is: for each backbone layer, input-major weights then
//! biases; then each output head in order (weights, biases). Single-head
//! networks have exactly one head. Multi-head networks give every task a
//! private output layer over the shared backbone.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numcore::ops::row_linear;
use crate::numcore::tape::{NodeId, Tape};
use crate::numcore::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    /// Input dimension followed by hidden layer widths.
    pub layers: Vec<usize>,
    /// Classes per output head.
    pub classes: usize,
    /// Number of output heads (1 = single-head protocol).
    pub heads: usize,
}

impl NetworkShape {
    pub fn single_head(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        NetworkShape::new(input, hidden, classes, 1)
    }

    pub fn new(input: usize, hidden: &[usize], classes: usize, heads: usize) -> Result<Self> {
        if input == 0 || classes < 2 || heads == 0 || hidden.contains(&0) {
            return Err(CoreError::contract("degenerate network shape"));
        }
        let mut layers = vec![input];
        layers.extend_from_slice(hidden);
        Ok(NetworkShape { layers, classes, heads })
    }

    pub fn last_hidden(&self) -> usize {
        *self.layers.last().expect("layers non-empty")
    }

    fn backbone_params(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn head_params(&self) -> usize {
        self.last_hidden() * self.classes + self.classes
    }

    /// Total flat parameter count across backbone and all heads.
    pub fn param_count(&self) -> usize {
        self.backbone_params() + self.heads * self.head_params()
    }

    fn head_offset(&self, head: usize) -> usize {
        self.backbone_params() + head * self.head_params()
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.heads {
            return Err(CoreError::contract(format!(
                "head {head} out of range ({} heads)",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Tape-recorded forward pass: logits node of shape (n, classes).
pub fn forward_tape(
    tape: &mut Tape,
    shape: &NetworkShape,
    theta: NodeId,
    x: NodeId,
    head: usize,
) -> Result<NodeId> {
    shape.check_head(head)?;
    let mut offset = 0;
    let mut h = x;
    for w in shape.layers.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let wt = tape.slice(theta, offset, vec![fan_in, fan_out])?;
        offset += fan_in * fan_out;
        let b = tape.slice(theta, offset, vec![fan_out])?;
        offset += fan_out;
        let a = tape.linear(h, wt, b)?;
        h = tape.relu(a);
    }
    let (fan_in, fan_out) = (shape.last_hidden(), shape.classes);
    let mut offset = shape.head_offset(head);
    let wt = tape.slice(theta, offset, vec![fan_in, fan_out])?;
    offset += fan_in * fan_out;
    let b = tape.slice(theta, offset, vec![fan_out])?;
    tape.linear(h, wt, b)
}

/// Plain forward pass over a flat parameter slice; returns row-major logits.
///
/// Uses the same kernels as the tape path so the two agree bit for bit.
pub fn forward_logits(
    shape: &NetworkShape,
    theta: &[f64],
    inputs: &[f64],
    rows: usize,
    head: usize,
) -> Result<Vec<f64>> {
    shape.check_head(head)?;
    if theta.len() != shape.param_count() {
        return Err(CoreError::dimension(format!(
            "theta length {} != param count {}",
            theta.len(),
            shape.param_count()
        )));
    }
    if inputs.len() != rows * shape.layers[0] {
        return Err(CoreError::dimension("input buffer does not match rows x input dim"));
    }
    let mut h = inputs.to_vec();
    let mut h_dim = shape.layers[0];
    let mut offset = 0;
    for w in shape.layers.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let wt = &theta[offset..offset + fan_in * fan_out];
        offset += fan_in * fan_out;
        let b = &theta[offset..offset + fan_out];
        offset += fan_out;
        let mut next = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let orow = &mut next[r * fan_out..(r + 1) * fan_out];
            orow.copy_from_slice(b);
            row_linear(orow, &h[r * fan_in..(r + 1) * fan_in], wt);
            for v in orow.iter_mut() {
                *v = v.max(0.0);
            }
        }
        h = next;
        h_dim = fan_out;
    }
    let (fan_in, fan_out) = (h_dim, shape.classes);
    let mut offset = shape.head_offset(head);
    let wt = &theta[offset..offset + fan_in * fan_out];
    offset += fan_in * fan_out;
    let b = &theta[offset..offset + fan_out];
    let mut logits = vec![0.0; rows * fan_out];
    for r in 0..rows {
        let orow = &mut logits[r * fan_out..(r + 1) * fan_out];
        orow.copy_from_slice(b);
        row_linear(orow, &h[r * fan_in..(r + 1) * fan_in], wt);
    }
    Ok(logits)
}

/// Mean negative log-likelihood of `labels` under the plain forward pass.
pub fn nll_mean(
    shape: &NetworkShape,
    theta: &[f64],
    inputs: &[f64],
    labels: &[usize],
    head: usize,
) -> Result<f64> {
    let rows = labels.len();
    let logits = forward_logits(shape, theta, inputs, rows, head)?;
    let c = shape.classes;
    let mut total = 0.0;
    for r in 0..rows {
        let (loss, _) = crate::numcore::ops::softmax_xent(&logits[r * c..(r + 1) * c], labels[r])?;
        total += loss;
    }
    Ok(total / rows as f64)
}

/// Convenience wrapper building constant input nodes from a flat buffer.
pub fn input_node(tape: &mut Tape, inputs: &[f64], rows: usize, dim: usize) -> Result<NodeId> {
    if inputs.len() != rows * dim {
        return Err(CoreError::dimension("input buffer does not match rows x dim"));
    }
    Ok(tape.constant(Tensor::from_raw(vec![rows, dim], inputs.to_vec())))
}

/// Shared label buffer for the tape's cross-entropy op.
pub fn label_rc(labels: &[usize]) -> Rc<Vec<usize>> {
    Rc::new(labels.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::SeededRng;

    #[test]
    fn param_count_hand_checked() {
        let shape = NetworkShape::single_head(784, &[100, 100], 10).unwrap();
        assert_eq!(shape.param_count(), 784 * 100 + 100 + 100 * 100 + 100 + 100 * 10 + 10);
        let multi = NetworkShape::new(784, &[64], 2, 5).unwrap();
        assert_eq!(multi.param_count(), 784 * 64 + 64 + 5 * (64 * 2 + 2));
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let mut rng = SeededRng::new(31);
        let shape = NetworkShape::single_head(7, &[5, 4], 3).unwrap();
        let theta = rng.normal_vec(shape.param_count());
        let rows = 6;
        let inputs = rng.normal_vec(rows * 7);

        let plain = forward_logits(&shape, &theta, &inputs, rows, 0).unwrap();

        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::vector(theta.clone()).unwrap());
        let x = input_node(&mut tape, &inputs, rows, 7).unwrap();
        let logits = forward_tape(&mut tape, &shape, t, x, 0).unwrap();
        assert_eq!(tape.value(logits).data(), plain.as_slice());
    }

    #[test]
    fn heads_use_disjoint_parameters() {
        let mut rng = SeededRng::new(37);
        let shape = NetworkShape::new(4, &[3], 2, 2).unwrap();
        let mut theta = rng.normal_vec(shape.param_count());
        let inputs = rng.normal_vec(4);
        let before = forward_logits(&shape, &theta, &inputs, 1, 0).unwrap();
        // perturbing head 1 must not affect head 0 logits
        let head1_start = shape.head_offset(1);
        for v in theta[head1_start..].iter_mut() {
            *v += 10.0;
        }
        let after = forward_logits(&shape, &theta, &inputs, 1, 0).unwrap();
        assert_eq!(before, after);
        assert!(matches!(
            forward_logits(&shape, &theta, &inputs, 1, 2),
            Err(CoreError::Contract(_))
        ));
    }
}
