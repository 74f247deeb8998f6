//! Dense row-major f64 tensors. Rank 0, 1 and 2 are all this crate needs.

use crate::error::{CoreError, Result};
use crate::numcore::ops;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(CoreError::dimension("zero-sized dimension".to_string()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::numeric("non-finite entry in tensor"));
        }
        Ok(Tensor { shape, data })
    }

    /// Construction without the finiteness scan, for op outputs whose
    /// inputs were already validated. Non-finite values still surface at
    /// the loss (`softmax_xent`) and gradient checks.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// y_i = sum_j W_ij x_j + b_i for W of shape (m, k).
///
/// Plain evaluation; the differentiable path lives on [`super::tape::Tape`].
pub fn affine(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(CoreError::dimension("affine: W must be rank 2".to_string()));
    }
    let (m, k) = (w.shape()[0], w.shape()[1]);
    if b.len() != m || x.len() != k {
        return Err(CoreError::dimension(format!(
            "affine: W ({m}x{k}) incompatible with b ({}) / x ({})",
            b.len(),
            x.len()
        )));
    }
    let mut y = b.data().to_vec();
    for i in 0..m {
        y[i] += ops::dot(w.row(i), x.data());
    }
    Tensor::vector(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_map() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let x = Tensor::vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(affine(&w, &b, &x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_hand_arithmetic() {
        let w = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![1.0]).unwrap();
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(affine(&w, &b, &x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn affine_matches_triple_loop_oracle() {
        use crate::numcore::rng::SeededRng;
        let mut rng = SeededRng::new(7);
        for _ in 0..20 {
            let m = 1 + rng.below(6) as usize;
            let k = 1 + rng.below(6) as usize;
            let w = Tensor::matrix(m, k, rng.normal_vec(m * k)).unwrap();
            let b = Tensor::vector(rng.normal_vec(m)).unwrap();
            let x = Tensor::vector(rng.normal_vec(k)).unwrap();
            let got = affine(&w, &b, &x).unwrap();
            for i in 0..m {
                let mut want = b.data()[i];
                for j in 0..k {
                    want += w.data()[i * k + j] * x.data()[j];
                }
                assert!((got.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn affine_shape_mismatch_errors() {
        let w = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let b = Tensor::vector(vec![0.0]).unwrap();
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert!(matches!(affine(&w, &b, &x), Err(CoreError::Dimension(_))));
    }

    #[test]
    fn tensor_rejects_nonfinite() {
        assert!(Tensor::vector(vec![1.0, f64::INFINITY]).is_err());
    }
}
