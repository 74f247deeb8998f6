//! Reverse-mode differentiation on a linear tape.
//!
//! Operations record themselves in order during the forward pass; adjoints
//! are accumulated by replaying the tape strictly in reverse with the loss
//! seeded at 1. Nodes hold tensor values, so one tape entry covers a whole
//! layer rather than one scalar.

use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::numcore::ops::{self, axpy, dot};
use crate::numcore::tensor::Tensor;

pub type NodeId = usize;

/// Frozen target distribution for the analytic diagonal-Gaussian KL op.
///
/// Holds the pieces of KL(q || p) that do not depend on q so a snapshot can
/// be converted once and reused across training steps.
#[derive(Clone, Debug)]
pub struct KlAnchor {
    pub mean: Vec<f64>,
    pub inv_var: Vec<f64>,
    pub ln_sigma_sum: f64,
}

impl KlAnchor {
    pub fn new(mean: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mean.len() != sigma.len() {
            return Err(CoreError::dimension("KlAnchor: mean/sigma length mismatch"));
        }
        if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::numeric("KlAnchor: non-positive sigma"));
        }
        let inv_var = sigma.iter().map(|&s| 1.0 / (s * s)).collect();
        let ln_sigma_sum = sigma.iter().map(|&s| s.ln()).sum();
        Ok(KlAnchor { mean, inv_var, ln_sigma_sum })
    }
}

/// KL(N(mu_q, diag(sigma_q^2)) || anchor), with ln(sigma_q) supplied by the
/// caller so the log pass can be shared across anchors.
pub fn kl_diag_value(mu_q: &[f64], sigma_q: &[f64], ln_sigma_q: &[f64], anchor: &KlAnchor) -> f64 {
    let len = mu_q.len();
    debug_assert_eq!(sigma_q.len(), len);
    debug_assert_eq!(anchor.mean.len(), len);
    let mut ln_q_sum = 0.0;
    let mut quad = 0.0;
    for i in 0..len {
        ln_q_sum += ln_sigma_q[i];
        let d = mu_q[i] - anchor.mean[i];
        quad += anchor.inv_var[i] * (sigma_q[i] * sigma_q[i] + d * d);
    }
    anchor.ln_sigma_sum - ln_q_sum + 0.5 * quad - 0.5 * len as f64
}

enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Square(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Slice { src: NodeId, start: usize },
    /// out (n, m) = x (n, k) . wt (k, m) + broadcast b (m)
    Linear { x: NodeId, wt: NodeId, b: NodeId },
    SoftmaxXentMean { logits: NodeId, labels: Rc<Vec<usize>>, probs: Vec<f64> },
    Sum(NodeId),
    Mean(NodeId),
    KlDiag { mu: NodeId, sigma: NodeId, ln_sigma: NodeId, anchor: Rc<KlAnchor> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Per-node adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, if the node was on the path.
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// Like [`Gradients::wrt`] but materializes exact zeros for off-path leaves.
    pub fn wrt_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Softmax probabilities saved by a `softmax_xent_mean` node.
    pub fn saved_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id].op {
            Op::SoftmaxXentMean { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(CoreError::dimension(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_raw(self.nodes[a].value.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_raw(self.nodes[a].value.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_raw(self.nodes[a].value.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|x| c * x).collect();
        let value = unsafe_tensor(self.nodes[a].value.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|x| c + x).collect();
        let value = unsafe_tensor(self.nodes[a].value.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::AddConst(a), value, ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|x| x * x).collect();
        let value = unsafe_tensor(self.nodes[a].value.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::Square(a), value, ng)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.data().iter().any(|&x| x <= 0.0) {
            return Err(CoreError::numeric("ln of non-positive value"));
        }
        let data = self.nodes[a].value.data().iter().map(|x| x.ln()).collect();
        let value = unsafe_tensor(self.nodes[a].value.shape().to_vec(), data);
        let ng = self.needs(a);
        Ok(self.push(Op::Ln(a), value, ng))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|&x| ops::softplus(x)).collect();
        let value = unsafe_tensor(self.nodes[a].value.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::Softplus(a), value, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|&x| x.max(0.0)).collect();
        let value = unsafe_tensor(self.nodes[a].value.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    /// View of `len(shape)` contiguous entries of `src` starting at `start`.
    pub fn slice(&mut self, src: NodeId, start: usize, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        let parent = self.nodes[src].value.data();
        if start + numel > parent.len() {
            return Err(CoreError::dimension(format!(
                "slice [{start}, {}) out of range for node of length {}",
                start + numel,
                parent.len()
            )));
        }
        let data = parent[start..start + numel].to_vec();
        let value = Tensor::from_raw(shape, data);
        let ng = self.needs(src);
        Ok(self.push(Op::Slice { src, start }, value, ng))
    }

    /// Batched affine map: out (n, m) = x (n, k) . wt (k, m) + b (m).
    ///
    /// Weights are stored input-major so both the forward pass and the
    /// weight adjoint reduce to contiguous axpy sweeps.
    pub fn linear(&mut self, x: NodeId, wt: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.nodes[x].value.shape().to_vec(),
            self.nodes[wt].value.shape().to_vec(),
            self.nodes[b].value.shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(CoreError::dimension("linear: expected x (n,k), wt (k,m), b (m)"));
        }
        let (n, k) = (xs[0], xs[1]);
        let (k2, m) = (ws[0], ws[1]);
        if k != k2 || bs[0] != m {
            return Err(CoreError::dimension(format!(
                "linear: x (n={n}, k={k}) vs wt (k={k2}, m={m}) vs b ({})",
                bs[0]
            )));
        }
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[wt].value.data();
        let bv = self.nodes[b].value.data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let orow = &mut out[r * m..(r + 1) * m];
            orow.copy_from_slice(bv);
            ops::row_linear(orow, &xv[r * k..(r + 1) * k], wv);
        }
        let value = Tensor::from_raw(vec![n, m], out);
        let ng = self.needs(x) || self.needs(wt) || self.needs(b);
        Ok(self.push(Op::Linear { x, wt, b }, value, ng))
    }

    /// Mean over rows of the stable softmax cross-entropy.
    pub fn softmax_xent_mean(&mut self, logits: NodeId, labels: Rc<Vec<usize>>) -> Result<NodeId> {
        let shape = self.nodes[logits].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(CoreError::dimension("softmax_xent_mean: logits must be (n, c)"));
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(CoreError::contract(format!(
                "softmax_xent_mean: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        let lv = self.nodes[logits].value.data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            let (loss, p) = ops::softmax_xent(&lv[r * c..(r + 1) * c], labels[r])?;
            total += loss;
            probs[r * c..(r + 1) * c].copy_from_slice(&p);
        }
        let value = Tensor::scalar(total / n as f64);
        let ng = self.needs(logits);
        Ok(self.push(Op::SoftmaxXentMean { logits, labels, probs }, value, ng))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.data().iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(v), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let d = self.nodes[a].value.data();
        let v = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(v), ng)
    }

    /// Analytic KL(N(mu, diag(sigma^2)) || anchor) as a scalar node.
    ///
    /// `sigma` and `ln_sigma` are existing nodes (typically `softplus(rho)`
    /// and `ln(sigma)`) so their passes are shared across several anchors.
    pub fn kl_diag(
        &mut self,
        mu: NodeId,
        sigma: NodeId,
        ln_sigma: NodeId,
        anchor: Rc<KlAnchor>,
    ) -> Result<NodeId> {
        let len = self.nodes[mu].value.len();
        if self.nodes[sigma].value.len() != len
            || self.nodes[ln_sigma].value.len() != len
            || anchor.mean.len() != len
        {
            return Err(CoreError::dimension("kl_diag: operand length mismatch"));
        }
        let v = kl_diag_value(
            self.nodes[mu].value.data(),
            self.nodes[sigma].value.data(),
            self.nodes[ln_sigma].value.data(),
            &anchor,
        );
        let ng = self.needs(mu) || self.needs(sigma) || self.needs(ln_sigma);
        Ok(self.push(Op::KlDiag { mu, sigma, ln_sigma, anchor }, Tensor::scalar(v), ng))
    }

    /// Accumulate adjoints for every node reachable from `loss`.
    ///
    /// The loss must be scalar; its adjoint is seeded with exactly 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.len() != 1 {
            return Err(CoreError::contract(format!(
                "backward on non-scalar node of shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let gout = match &grads[id] {
                Some(_) => {
                    if matches!(self.nodes[id].op, Op::Leaf) {
                        continue; // keep the result in place
                    }
                    grads[id].take().unwrap()
                }
                None => continue,
            };
            self.propagate(id, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], node: NodeId, len: usize| -> bool {
            if !self.nodes[node].needs_grad {
                return false;
            }
            if grads[node].is_none() {
                grads[node] = Some(vec![0.0; len]);
            }
            true
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for &src in &[*a, *b] {
                    if acc(grads, src, gout.len()) {
                        axpy(grads[src].as_mut().unwrap(), 1.0, gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if acc(grads, *a, gout.len()) {
                    axpy(grads[*a].as_mut().unwrap(), 1.0, gout);
                }
                if acc(grads, *b, gout.len()) {
                    axpy(grads[*b].as_mut().unwrap(), -1.0, gout);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if acc(grads, a, gout.len()) {
                    let bv = self.nodes[b].value.data();
                    let ga = grads[a].as_mut().unwrap();
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                if acc(grads, b, gout.len()) {
                    let av = self.nodes[a].value.data();
                    let gb = grads[b].as_mut().unwrap();
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if acc(grads, *a, gout.len()) {
                    axpy(grads[*a].as_mut().unwrap(), *c, gout);
                }
            }
            Op::AddConst(a) => {
                if acc(grads, *a, gout.len()) {
                    axpy(grads[*a].as_mut().unwrap(), 1.0, gout);
                }
            }
            Op::Square(a) => {
                let a = *a;
                if acc(grads, a, gout.len()) {
                    let av = self.nodes[a].value.data();
                    let ga = grads[a].as_mut().unwrap();
                    for i in 0..gout.len() {
                        ga[i] += 2.0 * av[i] * gout[i];
                    }
                }
            }
            Op::Ln(a) => {
                let a = *a;
                if acc(grads, a, gout.len()) {
                    let av = self.nodes[a].value.data();
                    let ga = grads[a].as_mut().unwrap();
                    for i in 0..gout.len() {
                        ga[i] += gout[i] / av[i];
                    }
                }
            }
            Op::Softplus(a) => {
                let a = *a;
                if acc(grads, a, gout.len()) {
                    let av = self.nodes[a].value.data();
                    let ga = grads[a].as_mut().unwrap();
                    for i in 0..gout.len() {
                        ga[i] += ops::sigmoid(av[i]) * gout[i];
                    }
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if acc(grads, a, gout.len()) {
                    let out = self.nodes[id].value.data();
                    let ga = grads[a].as_mut().unwrap();
                    for i in 0..gout.len() {
                        if out[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            Op::Slice { src, start } => {
                let (src, start) = (*src, *start);
                if acc(grads, src, self.nodes[src].value.len()) {
                    let gs = grads[src].as_mut().unwrap();
                    axpy(&mut gs[start..start + gout.len()], 1.0, gout);
                }
            }
            Op::Linear { x, wt, b } => {
                let (x, wt, b) = (*x, *wt, *b);
                let xs = self.nodes[x].value.shape();
                let (n, k) = (xs[0], xs[1]);
                let m = self.nodes[b].value.len();
                let xv = self.nodes[x].value.data();
                if acc(grads, wt, k * m) {
                    let gw = grads[wt].as_mut().unwrap();
                    ops::weight_grad_acc(gw, xv, gout, n, k, m);
                }
                if acc(grads, b, m) {
                    let gb = grads[b].as_mut().unwrap();
                    for r in 0..n {
                        axpy(gb, 1.0, &gout[r * m..(r + 1) * m]);
                    }
                }
                if acc(grads, x, n * k) {
                    let wv = self.nodes[wt].value.data();
                    let gx = grads[x].as_mut().unwrap();
                    for r in 0..n {
                        let grow = &gout[r * m..(r + 1) * m];
                        for kk in 0..k {
                            gx[r * k + kk] += dot(grow, &wv[kk * m..(kk + 1) * m]);
                        }
                    }
                }
            }
            Op::SoftmaxXentMean { logits, labels, probs } => {
                let logits = *logits;
                let shape = self.nodes[logits].value.shape();
                let (n, c) = (shape[0], shape[1]);
                if acc(grads, logits, n * c) {
                    let g = gout[0] / n as f64;
                    let gl = grads[logits].as_mut().unwrap();
                    for r in 0..n {
                        for cc in 0..c {
                            let indicator = if labels[r] == cc { 1.0 } else { 0.0 };
                            gl[r * c + cc] += g * (probs[r * c + cc] - indicator);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if acc(grads, a, self.nodes[a].value.len()) {
                    let ga = grads[a].as_mut().unwrap();
                    for gi in ga.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
            Op::Mean(a) => {
                let a = *a;
                let len = self.nodes[a].value.len();
                if acc(grads, a, len) {
                    let g = gout[0] / len as f64;
                    let ga = grads[a].as_mut().unwrap();
                    for gi in ga.iter_mut() {
                        *gi += g;
                    }
                }
            }
            Op::KlDiag { mu, sigma, ln_sigma, anchor } => {
                let (mu, sigma, ln_sigma) = (*mu, *sigma, *ln_sigma);
                let g = gout[0];
                let len = self.nodes[mu].value.len();
                if acc(grads, mu, len) {
                    let muv = self.nodes[mu].value.data();
                    let gm = grads[mu].as_mut().unwrap();
                    for i in 0..len {
                        gm[i] += g * (muv[i] - anchor.mean[i]) * anchor.inv_var[i];
                    }
                }
                if acc(grads, sigma, len) {
                    let sv = self.nodes[sigma].value.data();
                    let gs = grads[sigma].as_mut().unwrap();
                    for i in 0..len {
                        gs[i] += g * sv[i] * anchor.inv_var[i];
                    }
                }
                if acc(grads, ln_sigma, len) {
                    let gl = grads[ln_sigma].as_mut().unwrap();
                    for gi in gl.iter_mut() {
                        *gi -= g;
                    }
                }
            }
        }
    }
}

// shape is always inherited from an existing (already validated) node
fn unsafe_tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_raw(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::SeededRng;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]).unwrap());
        let y = tape.square(x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]).unwrap());
        let unused = tape.leaf(Tensor::vector(vec![5.0, 7.0]).unwrap());
        let y = tape.square(x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(unused).is_none());
        assert_eq!(grads.wrt_or_zeros(unused, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(CoreError::Contract(_))));
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = SeededRng::new(5);
        for _ in 0..10 {
            let (n, k, m) = (
                1 + rng.below(5) as usize,
                1 + rng.below(7) as usize,
                1 + rng.below(6) as usize,
            );
            let xv = rng.normal_vec(n * k);
            let wv = rng.normal_vec(k * m);
            let bv = rng.normal_vec(m);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(n, k, xv.clone()).unwrap());
            let w = tape.leaf(Tensor::matrix(k, m, wv.clone()).unwrap());
            let b = tape.leaf(Tensor::vector(bv.clone()).unwrap());
            let y = tape.linear(x, w, b).unwrap();
            for r in 0..n {
                for c in 0..m {
                    let mut want = bv[c];
                    for kk in 0..k {
                        want += xv[r * k + kk] * wv[kk * m + c];
                    }
                    let got = tape.value(y).data()[r * m + c];
                    assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn two_layer_net_gradient_vs_finite_differences() {
        // gradient of a two-layer relu net loss, every weight, h = 1e-5
        let mut rng = SeededRng::new(17);
        let (n, d, h, c) = (4, 3, 5, 3);
        let xv = rng.normal_vec(n * d);
        let labels = Rc::new(vec![0usize, 1, 2, 1]);
        let theta0: Vec<f64> = rng.normal_vec(d * h + h + h * c + c).iter().map(|v| 0.5 * v).collect();

        let eval = |theta: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(n, d, xv.clone()).unwrap());
            let t = tape.leaf(Tensor::vector(theta.to_vec()).unwrap());
            let w1 = tape.slice(t, 0, vec![d, h]).unwrap();
            let b1 = tape.slice(t, d * h, vec![h]).unwrap();
            let w2 = tape.slice(t, d * h + h, vec![h, c]).unwrap();
            let b2 = tape.slice(t, d * h + h + h * c, vec![c]).unwrap();
            let a1 = tape.linear(x, w1, b1).unwrap();
            let z1 = tape.relu(a1);
            let logits = tape.linear(z1, w2, b2).unwrap();
            let loss = tape.softmax_xent_mean(logits, labels.clone()).unwrap();
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(n, d, xv.clone()).unwrap());
        let t = tape.leaf(Tensor::vector(theta0.clone()).unwrap());
        let w1 = tape.slice(t, 0, vec![d, h]).unwrap();
        let b1 = tape.slice(t, d * h, vec![h]).unwrap();
        let w2 = tape.slice(t, d * h + h, vec![h, c]).unwrap();
        let b2 = tape.slice(t, d * h + h + h * c, vec![c]).unwrap();
        let a1 = tape.linear(x, w1, b1).unwrap();
        let z1 = tape.relu(a1);
        let logits = tape.linear(z1, w2, b2).unwrap();
        let loss = tape.softmax_xent_mean(logits, labels.clone()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(t).unwrap();

        let fd = crate::checks::central_difference(eval, &theta0, 1e-5);
        for i in 0..theta0.len() {
            let denom = analytic[i].abs().max(fd[i].abs()).max(1e-6);
            assert!(
                (analytic[i] - fd[i]).abs() / denom < 1e-4,
                "coord {i}: analytic {} vs fd {}",
                analytic[i],
                fd[i]
            );
        }
    }

    #[test]
    fn kl_diag_zero_for_identical() {
        let mu: Vec<f64> = vec![0.3, -1.0, 2.0];
        let sigma: Vec<f64> = vec![0.5, 1.5, 0.1];
        let ln_sigma: Vec<f64> = sigma.iter().map(|s| s.ln()).collect();
        let anchor = KlAnchor::new(mu.clone(), sigma.clone()).unwrap();
        let v = kl_diag_value(&mu, &sigma, &ln_sigma, &anchor);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn kl_diag_unit_gaussians_hand_value() {
        // 1-d, mu_q = 1, mu_p = 0, sigma_q = sigma_p = 1 -> KL = 0.5
        let anchor = KlAnchor::new(vec![0.0], vec![1.0]).unwrap();
        let v = kl_diag_value(&[1.0], &[1.0], &[0.0], &anchor);
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_diag_node_gradient_vs_finite_differences() {
        let mut rng = SeededRng::new(23);
        let len = 6;
        let anchor = Rc::new(
            KlAnchor::new(
                rng.normal_vec(len),
                rng.normal_vec(len).iter().map(|v| 0.5 + v.abs()).collect(),
            )
            .unwrap(),
        );
        // params = [mu, rho]
        let params: Vec<f64> = rng.normal_vec(2 * len);
        let eval = |p: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let mu = tape.leaf(Tensor::vector(p[..len].to_vec()).unwrap());
            let rho = tape.leaf(Tensor::vector(p[len..].to_vec()).unwrap());
            let sigma = tape.softplus(rho);
            let ln_sigma = tape.ln(sigma).unwrap();
            let kl = tape.kl_diag(mu, sigma, ln_sigma, anchor.clone()).unwrap();
            tape.value(kl).item()
        };
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::vector(params[..len].to_vec()).unwrap());
        let rho = tape.leaf(Tensor::vector(params[len..].to_vec()).unwrap());
        let sigma = tape.softplus(rho);
        let ln_sigma = tape.ln(sigma).unwrap();
        let kl = tape.kl_diag(mu, sigma, ln_sigma, anchor.clone()).unwrap();
        let grads = tape.backward(kl).unwrap();
        let mut analytic = grads.wrt(mu).unwrap().to_vec();
        analytic.extend_from_slice(grads.wrt(rho).unwrap());
        let fd = crate::checks::central_difference(eval, &params, 1e-6);
        for i in 0..params.len() {
            let denom = analytic[i].abs().max(fd[i].abs()).max(1e-6);
            assert!((analytic[i] - fd[i]).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // f = sum(x*x) + sum(x) -> df/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, -3.0]).unwrap());
        let sq = tape.square(x);
        let s1 = tape.sum(sq);
        let s2 = tape.sum(x);
        let total = tape.add(s1, s2).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[5.0, -5.0]);
    }
}
