//! Row-major GEMM kernels written in axpy form so the inner loop vectorizes
//! without reassociating floating-point sums. Summation order is fixed, so
//! results do not depend on batch composition.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub(crate) fn gemm_at_b_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in cp.iter_mut().zip(bi) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · bᵀ` with `b[k×n]`.
pub(crate) fn gemm_a_bt_acc(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let bt = transpose(k, n, b);
    gemm_acc(m, n, k, a, &bt, c);
}

pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ·c' where a is (k×m) view: check via explicit transpose
        let at = transpose(m, k, &a);
        let mut d = vec![0.0; m * n];
        gemm_at_b_acc(k, m, n, &at, &b, &mut d);
        for (x, y) in d.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = transpose(k, n, &b);
        let mut e = vec![0.0; m * n];
        gemm_a_bt_acc(m, k, n, &a, &bt, &mut e);
        for (x, y) in e.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
