//! Small dense linear-algebra helpers on row-major `f64` slices.
//!
//! Everything here operates on latent-sized matrices (a handful of rows and
//! columns), so plain loops and an unblocked Cholesky are adequate. The only
//! performance-sensitive entry points are the `dgemm_*` wrappers, which
//! forward to `matrixmultiply`.

use matrixmultiply::dgemm;

/// `c += a (m x k) * b (k x n)`, all row-major. Pass `beta = 0.0` to overwrite `c`.
pub fn dgemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a (m x k) * b^T` where `b` is stored row-major as `n x k`.
pub fn dgemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a^T * b` where `a` is stored row-major as `k x m` and `b` as `k x n`.
pub fn dgemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower-triangular Cholesky factor of a symmetric matrix, or `None` if the
/// matrix is not positive definite.
pub fn cholesky(n: usize, a: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L L^T x = b` given the lower Cholesky factor.
pub fn chol_solve(n: usize, l: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(b.len(), n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Full inverse from a lower Cholesky factor (column-by-column solve).
pub fn chol_inverse(n: usize, l: &[f64]) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = chol_solve(n, l, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    inv
}

/// `log det(L L^T)` from a lower Cholesky factor.
pub fn chol_logdet(n: usize, l: &[f64]) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Determinant of a symmetric positive-definite matrix via Cholesky.
pub fn spd_det(n: usize, a: &[f64]) -> Option<f64> {
    cholesky(n, a).map(|l| chol_logdet(n, &l).exp())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn sym_eigenvalues(n: usize, a: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Frobenius norm.
pub fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sample mean of row vectors.
pub fn sample_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    assert!(!rows.is_empty(), "sample_mean of an empty set");
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    mean
}

/// Unbiased sample covariance (denominator `len - 1`) of row vectors.
pub fn sample_covariance(rows: &[Vec<f64>]) -> Vec<f64> {
    assert!(rows.len() >= 2, "sample_covariance needs at least two rows");
    let d = rows[0].len();
    let mean = sample_mean(rows);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    let denom = (rows.len() - 1) as f64;
    for c in &mut cov {
        *c /= denom;
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dgemm_matches_hand_product() {
        // [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        dgemm_nn(2, 2, 1, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn dgemm_transposed_variants_agree() {
        let a = [1.0, -2.0, 0.5, 3.0, 1.0, -1.0]; // 2x3
        let b = [2.0, 0.0, 1.0, -1.0, 0.5, 2.0]; // 2x3
                                                 // a * b^T via nt must equal manual row dot products.
        let mut c = [0.0; 4];
        dgemm_nt(2, 3, 2, &a, &b, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..2 {
                let manual: f64 = (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k]).sum();
                assert!((c[i * 2 + j] - manual).abs() < 1e-14);
            }
        }
        // a^T * a via tn must be symmetric with the right diagonal.
        let mut g = [0.0; 9];
        dgemm_tn(3, 2, 3, &a, &a, 0.0, &mut g);
        for i in 0..3 {
            for j in 0..3 {
                let manual: f64 = (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum();
                assert!((g[i * 3 + j] - manual).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cholesky_roundtrip_and_logdet() {
        let a = [0.7, 0.6, 0.6, 0.8];
        let l = cholesky(2, &a).expect("SPD");
        // L L^T == A
        for i in 0..2 {
            for j in 0..2 {
                let s: f64 = (0..2).map(|k| l[i * 2 + k] * l[j * 2 + k]).sum();
                assert!((s - a[i * 2 + j]).abs() < 1e-14);
            }
        }
        let det: f64 = 0.7 * 0.8 - 0.6 * 0.6;
        assert!((chol_logdet(2, &l) - det.ln()).abs() < 1e-12);
        assert!((spd_det(2, &a).unwrap() - det).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = [1.0, 2.0, 2.0, 1.0];
        assert!(cholesky(2, &a).is_none());
    }

    #[test]
    fn solve_matches_direct_inverse() {
        let a = [2.0, 0.3, 0.3, 1.5];
        let l = cholesky(2, &a).unwrap();
        let x = chol_solve(2, &l, &[1.0, -2.0]);
        let det = 2.0 * 1.5 - 0.09;
        let expect = [(1.5 * 1.0 - 0.3 * -2.0) / det, (2.0 * -2.0 - 0.3 * 1.0) / det];
        assert!((x[0] - expect[0]).abs() < 1e-13);
        assert!((x[1] - expect[1]).abs() < 1e-13);
        let inv = chol_inverse(2, &l);
        let manual = [1.5 / det, -0.3 / det, -0.3 / det, 2.0 / det];
        for (got, want) in inv.iter().zip(&manual) {
            assert!((got - want).abs() < 1e-13);
        }
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let ev = sym_eigenvalues(2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((ev[0] - 1.0).abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn moments_of_constant_rows() {
        let rows = vec![vec![1.0, 2.0]; 5];
        assert_eq!(sample_mean(&rows), vec![1.0, 2.0]);
        assert_eq!(sample_covariance(&rows), vec![0.0; 4]);
    }
}
