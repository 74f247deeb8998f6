//! Scalar math helpers and the two vector kernels everything hot sits on.

use crate::error::{CoreError, Result};

/// softplus(x) = ln(1 + e^x), computed without overflow for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: returns rho with softplus(rho) = y, y > 0.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    // ln(e^y - 1), stable for small y via expm1.
    y.exp_m1().ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out[i] += s * a[i]
#[inline]
pub fn axpy(out: &mut [f64], s: f64, a: &[f64]) {
    debug_assert_eq!(out.len(), a.len());
    for (o, &x) in out.iter_mut().zip(a.iter()) {
        *o += s * x;
    }
}

/// Four fused axpys in one pass over `out`; the workhorse of the blocked
/// matmul kernels (single sweep of write traffic, better ILP).
#[inline]
pub fn axpy4(
    out: &mut [f64],
    s0: f64,
    a0: &[f64],
    s1: f64,
    a1: &[f64],
    s2: f64,
    a2: &[f64],
    s3: f64,
    a3: &[f64],
) {
    let n = out.len();
    debug_assert!(a0.len() == n && a1.len() == n && a2.len() == n && a3.len() == n);
    for i in 0..n {
        out[i] += s0 * a0[i] + s1 * a1[i] + s2 * a2[i] + s3 * a3[i];
    }
}

/// out (len m) += sum_k xrow[k] * wt[k*m .. (k+1)*m], blocked four features
/// per sweep. Both forward passes (tape and plain) go through here so they
/// agree bit for bit.
#[inline]
pub fn row_linear(out: &mut [f64], xrow: &[f64], wt: &[f64]) {
    let m = out.len();
    let kdim = xrow.len();
    debug_assert_eq!(wt.len(), kdim * m);
    let mut k = 0;
    while k + 4 <= kdim {
        let (s0, s1, s2, s3) = (xrow[k], xrow[k + 1], xrow[k + 2], xrow[k + 3]);
        if s0 != 0.0 || s1 != 0.0 || s2 != 0.0 || s3 != 0.0 {
            axpy4(
                out,
                s0,
                &wt[k * m..(k + 1) * m],
                s1,
                &wt[(k + 1) * m..(k + 2) * m],
                s2,
                &wt[(k + 2) * m..(k + 3) * m],
                s3,
                &wt[(k + 3) * m..(k + 4) * m],
            );
        }
        k += 4;
    }
    while k < kdim {
        if xrow[k] != 0.0 {
            axpy(out, xrow[k], &wt[k * m..(k + 1) * m]);
        }
        k += 1;
    }
}

/// gw (k, m) += x (n, k)^T . gy (n, m), blocked four batch rows per sweep.
#[inline]
pub fn weight_grad_acc(gw: &mut [f64], x: &[f64], gy: &[f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(gw.len(), k * m);
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(gy.len(), n * m);
    let mut r = 0;
    while r + 4 <= n {
        let g0 = &gy[r * m..(r + 1) * m];
        let g1 = &gy[(r + 1) * m..(r + 2) * m];
        let g2 = &gy[(r + 2) * m..(r + 3) * m];
        let g3 = &gy[(r + 3) * m..(r + 4) * m];
        for kk in 0..k {
            axpy4(
                &mut gw[kk * m..(kk + 1) * m],
                x[r * k + kk],
                g0,
                x[(r + 1) * k + kk],
                g1,
                x[(r + 2) * k + kk],
                g2,
                x[(r + 3) * k + kk],
                g3,
            );
        }
        r += 4;
    }
    while r < n {
        let grow = &gy[r * m..(r + 1) * m];
        for kk in 0..k {
            let xk = x[r * k + kk];
            if xk != 0.0 {
                axpy(&mut gw[kk * m..(kk + 1) * m], xk, grow);
            }
        }
        r += 1;
    }
}

/// Dot product with split accumulators so the reduction pipelines.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Numerically stable softmax cross-entropy for one row of logits.
///
/// Returns `(-ln probs[label], probs)` where probs are the max-subtracted
/// normalized exponentials.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(CoreError::contract(format!(
            "softmax_xent needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(CoreError::contract(format!(
            "label {} out of range for {} classes",
            label,
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::numeric("non-finite logits in softmax_xent"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= z;
    }
    // loss via log-sum-exp keeps -ln p exact even when p underflows
    let loss = z.ln() - (logits[label] - max);
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse_roundtrip() {
        for &y in &[1e-6, 3.16e-3, 0.1, 1.0, 10.0] {
            let rho = softplus_inv(y);
            assert!((softplus(rho) - y).abs() < 1e-14 * y.max(1.0));
        }
    }

    #[test]
    fn softplus_large_inputs() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(-800.0) < 1e-300);
    }

    #[test]
    fn xent_symmetric_logits() {
        let (loss, probs) = softmax_xent(&[0.0, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((probs[0] - 0.5).abs() < 1e-15);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn xent_extreme_logits_stable() {
        let (loss, probs) = softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(loss >= 0.0 && loss < 1e-9);
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn xent_matches_direct_normalization() {
        // oracle: normalize exponentials directly (safe at this scale)
        let logits: [f64; 4] = [0.3, -1.2, 2.5, 0.0];
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for label in 0..logits.len() {
            let expect = -(logits[label].exp() / z).ln();
            let (loss, _) = softmax_xent(&logits, label).unwrap();
            assert!((loss - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn xent_rejects_bad_inputs() {
        assert!(softmax_xent(&[1.0], 0).is_err());
        assert!(softmax_xent(&[1.0, 2.0], 2).is_err());
        assert!(softmax_xent(&[f64::NAN, 0.0], 0).is_err());
    }
}
