//! Row-major dense kernels over `matrixmultiply`.

/// `c = beta * c + a · b` with explicit element strides for every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c, (n, 1));
    c
}

/// `c (k×n) += aᵀ · b` for `a (m×k)`, `b (m×n)`.
pub(crate) fn matmul_tn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    gemm(k, m, n, a, (1, k), b, (n, 1), 1.0, c, (n, 1));
}

/// `a (m×n) · bᵀ` for `b (k×n)`, giving `m×k`.
pub(crate) fn matmul_nt(a: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    gemm(m, n, k, a, (n, 1), b, (1, n), 0.0, &mut c, (k, 1));
    c
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise RMS normalisation with gain; returns the output and `1/rms` per row.
pub(crate) fn rmsnorm(x: &[f64], rows: usize, dim: usize, gain: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * dim];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / dim as f64;
        let s = 1.0 / (ms + eps).sqrt();
        inv[r] = s;
        for (o, (v, g)) in out[r * dim..(r + 1) * dim].iter_mut().zip(row.iter().zip(gain)) {
            *o = v * s * g;
        }
    }
    (out, inv)
}

/// Backward of [`rmsnorm`]: accumulates the gain gradient and returns `dx`.
pub(crate) fn rmsnorm_backward(
    x: &[f64],
    inv: &[f64],
    rows: usize,
    dim: usize,
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * dim];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let s = inv[r];
        let mut dot = 0.0;
        for i in 0..dim {
            dgain[i] += dyr[i] * xr[i] * s;
            dot += dyr[i] * gain[i] * xr[i];
        }
        let coef = s * s * s * dot / dim as f64;
        for i in 0..dim {
            dx[r * dim + i] = s * dyr[i] * gain[i] - xr[i] * coef;
        }
    }
    dx
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// In-place numerically stable softmax.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
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
    fn products_match_naive_loops() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = matmul(&a, 3, 4, &b, 5);
        for (x, y) in c.iter().zip(naive(&a, 3, 4, &b, 5)) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ b with a 4×3 viewed as m=4,k=3 and b 4×5
        let mut acc = vec![1.0; 15];
        matmul_tn_acc(&a, 4, 3, &b, 5, &mut acc);
        let mut at = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                at[j * 4 + i] = a[i * 3 + j];
            }
        }
        for (x, y) in acc.iter().zip(naive(&at, 3, 4, &b, 5)) {
            assert!((x - 1.0 - y).abs() < 1e-12);
        }
        // a (4×5 from b) times aᵀ
        let d = matmul_nt(&b, 4, 5, &b, 4);
        let mut bt = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b[i * 5 + j];
            }
        }
        for (x, y) in d.iter().zip(naive(&b, 4, 5, &bt, 4)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = vec![1000.0, 999.0, -5.0, 0.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v[0] > v[1]);
    }
}
