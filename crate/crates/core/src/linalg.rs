//! Small dense linear algebra: just enough for normalized DLT.
//!
//! The homography estimator needs the null vector of an m x 9 design
//! matrix. We form the 9x9 normal matrix and take the eigenvector of its
//! smallest eigenvalue with a cyclic Jacobi sweep, which is exact to
//! machine precision at these sizes and keeps the crate dependency-free.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Eigen decomposition of a small symmetric matrix (row-major, n x n) via
/// cyclic Jacobi rotations. Returns `(eigenvalues, eigenvectors)` with
/// eigenvectors stored as columns of the returned row-major matrix.
pub fn sym_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if math::abs(apq) < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + math::sqrt(1.0 + tau * tau))
                } else {
                    -1.0 / (-tau + math::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
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
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let eigvals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (eigvals, v)
}

/// Unit eigenvector for the smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvector(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = sym_eigen(a, n);
    let mut best = 0;
    for i in 1..n {
        if vals[i] < vals[best] {
            best = i;
        }
    }
    let mut out: Vec<f64> = (0..n).map(|r| vecs[r * n + best]).collect();
    let norm = math::sqrt(out.iter().map(|x| x * x).sum());
    if norm > 0.0 {
        for x in &mut out {
            *x /= norm;
        }
    }
    out
}

/// `out = a * b` for row-major matrices, a: (m x k), b: (k x n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(1, 4, 9) conjugated by a rotation in the (0,2) plane.
        let (s, c) = (0.6f64, 0.8f64);
        // R * D * R^T
        let d = [1.0, 4.0, 9.0];
        let r = [c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c];
        let mut rd = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rd[i * 3 + j] = r[i * 3 + j] * d[j];
            }
        }
        let mut a = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut sum = 0.0;
                for k in 0..3 {
                    sum += rd[i * 3 + k] * r[j * 3 + k];
                }
                a[i * 3 + j] = sum;
            }
        }
        let (mut vals, _) = sym_eigen(&a, 3);
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 4.0).abs() < 1e-12);
        assert!((vals[2] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn min_eigenvector_is_nullspace_for_singular_matrix() {
        // Rank-2 Gram matrix of vectors orthogonal to (1, 1, 1)/sqrt(3).
        let u = [1.0, -1.0, 0.0];
        let w = [1.0, 1.0, -2.0];
        let mut a = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                a[i * 3 + j] = u[i] * u[j] + w[i] * w[j];
            }
        }
        let v = min_eigenvector(&a, 3);
        let dot_u: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
        let dot_w: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!(dot_u.abs() < 1e-12);
        assert!(dot_w.abs() < 1e-12);
    }

    #[test]
    fn matmul_matches_manual() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }
}
