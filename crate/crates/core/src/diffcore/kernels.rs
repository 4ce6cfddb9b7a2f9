//! Forward and backward kernels for the closed operation set.
//!
//! Matrices are row-major `rows x cols` buffers.

use crate::scalar::Scalar;

/// Rows whose norm falls below this are mapped to zero by row normalization.
pub const NORM_GUARD: f64 = 1e-8;

/// `c[m x n] = a[m x k] * b[k x n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

/// `c[m x n] = a[m x d] * b[n x d]^T`, i.e. all pairwise row dot products.
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, d: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * d..(i + 1) * d];
        for j in 0..n {
            let brow = &b[j * d..(j + 1) * d];
            c[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// `c[k x n] = a[m x k]^T * b[m x n]`
pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

/// Row-wise L2 normalization. Returns normalized rows and per-row norms;
/// rows with norm below [`NORM_GUARD`] become zero.
pub fn l2_normalize_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> (Vec<T>, Vec<T>) {
    let guard = T::of(NORM_GUARD);
    let mut y = vec![T::zero(); rows * cols];
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let n = crate::scalar::l2_norm(xr);
        norms.push(n);
        if n >= guard {
            for (yv, &xv) in y[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                *yv = xv / n;
            }
        }
    }
    (y, norms)
}

/// Gradient of row normalization: `dx = (dy - y (y . dy)) / |x|` per row.
pub fn l2_normalize_rows_backward<T: Scalar>(
    y: &[T],
    norms: &[T],
    dy: &[T],
    cols: usize,
) -> Vec<T> {
    let guard = T::of(NORM_GUARD);
    let mut dx = vec![T::zero(); y.len()];
    for (r, &n) in norms.iter().enumerate() {
        if n < guard {
            continue;
        }
        let span = r * cols..(r + 1) * cols;
        let yr = &y[span.clone()];
        let dyr = &dy[span.clone()];
        let proj: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((dxv, &yv), &dyv) in dx[span].iter_mut().zip(yr).zip(dyr) {
            *dxv = (dyv - yv * proj) / n;
        }
    }
    dx
}

/// Mean over rows of `logsumexp(row) - row[i]` where `i` is the row index.
///
/// The max of each row is subtracted before exponentiation. Returns the loss
/// and the row-wise softmax probabilities needed by the backward rule.
pub fn softmax_xent_diag<T: Scalar>(logits: &[T], rows: usize, cols: usize) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); rows * cols];
    let mut total = T::zero();
    for i in 0..rows {
        let row = &logits[i * cols..(i + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let prow = &mut probs[i * cols..(i + 1) * cols];
        let mut sum = T::zero();
        for (p, &l) in prow.iter_mut().zip(row) {
            *p = (l - max).exp();
            sum = sum + *p;
        }
        for p in prow.iter_mut() {
            *p = *p / sum;
        }
        let lse = max + sum.ln();
        total = total + (lse - row[i]);
    }
    (total / T::of(rows as f64), probs)
}

/// Gradient of [`softmax_xent_diag`] scaled by upstream `dloss`.
pub fn softmax_xent_diag_backward<T: Scalar>(
    probs: &[T],
    rows: usize,
    cols: usize,
    dloss: T,
) -> Vec<T> {
    let scale = dloss / T::of(rows as f64);
    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for i in 0..rows {
        dx[i * cols + i] = dx[i * cols + i] - scale;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // b^T laid out as 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 2), c);
        // a^T (3x2) * a (2x3)? use at with a as m=2,k=3 and b=a as m=2,n=3
        let ata = matmul_at(&a, &a, 2, 3, 3);
        assert_eq!(ata[0], 1.0 * 1.0 + 4.0 * 4.0);
        assert_eq!(ata[5], 2.0 * 3.0 + 5.0 * 6.0);
    }

    #[test]
    fn normalization_guard() {
        let (y, n) = l2_normalize_rows(&[3.0, 4.0, 0.0, 1e-9], 2, 2);
        assert_eq!(y, vec![0.6, 0.8, 0.0, 0.0]);
        assert_eq!(n[0], 5.0);
        let dx = l2_normalize_rows_backward(&y, &n, &[1.0, 1.0, 1.0, 1.0], 2);
        assert_eq!(&dx[2..], &[0.0, 0.0]);
    }

    #[test]
    fn xent_uniform_rows() {
        let (loss, _) = softmax_xent_diag(&[0.3f64; 9], 3, 3);
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }
}
