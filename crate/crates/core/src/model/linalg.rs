//! Row-major dense kernels used by the model. Loop orders keep the inner
//! loop contiguous so the compiler can vectorize it; reductions use a fixed
//! lane split so results do not depend on anything but the inputs.

use super::Real;

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn add_assign<F: Real>(y: &mut [F], x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

/// `a[m×k] · b[k×n] + bias`.
pub fn matmul_bias<F: Real>(a: &[F], b: &[F], bias: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias);
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != F::zero() {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    out
}

/// `g[k×n] += a[m×k]ᵀ · d[m×n]`.
pub fn matmul_tn_acc<F: Real>(a: &[F], d: &[F], g: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), k * n);
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != F::zero() {
                axpy(av, drow, &mut g[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `out[m×k] += d[m×n] · b[k×n]ᵀ`.
pub fn matmul_nt_acc<F: Real>(d: &[F], b: &[F], out: &mut [F], m: usize, n: usize, k: usize) {
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(drow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Column sums of `d[m×n]` accumulated into `g[n]`.
pub fn col_sum_acc<F: Real>(d: &[F], g: &mut [F], m: usize, n: usize) {
    for i in 0..m {
        add_assign(g, &d[i * n..(i + 1) * n]);
    }
}

/// Numerically stable log-softmax of one row, in place.
pub fn log_softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &x in row.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive_products() {
        let (m, k, n) = (3, 13, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let got = matmul_bias(&a, &b, &vec![0.0; n], m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·d with d = want: compare against naive on the transpose.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut g = vec![0.0; k * n];
        matmul_tn_acc(&a, &want, &mut g, m, k, n);
        for (x, y) in g.iter().zip(naive(&at, &want, k, m, n)) {
            assert!((x - y).abs() < 1e-12);
        }

        // d·bᵀ.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut o = vec![0.0; m * k];
        matmul_nt_acc(&want, &b, &mut o, m, n, k);
        for (x, y) in o.iter().zip(naive(&want, &bt, m, n, k)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut r = vec![1000.0f64, 0.0, -3.0, 999.0];
        log_softmax_in_place(&mut r);
        let s: f64 = r.iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
