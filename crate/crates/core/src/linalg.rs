//! Dense factorizations for adapter initialization and analysis: modified
//! Gram-Schmidt QR, one-sided Jacobi SVD, and a symmetric Jacobi
//! eigensolver. Everything is deterministic for a given input.

use crate::autodiff::ops;
use crate::autodiff::Tensor;
use crate::rng::RngState;
use crate::{Error, Result};

const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 64;

/// Rank-r factorization W ≈ U · diag(s) · Vt with s descending and
/// non-negative, U [m×r] column-orthonormal, Vt [r×n] row-orthonormal.
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

/// Orthonormalizes the columns of `m` by modified Gram-Schmidt with a
/// second pass. Fails on (numerically) dependent columns.
pub fn orthonormal_cols(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (m.nrows(), m.ncols());
    if cols > rows {
        return Err(Error::ShapeMismatch {
            op: "orthonormal_cols",
            lhs: vec![rows, cols],
            rhs: vec![cols, cols],
        });
    }
    let mut q: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    for j in 0..cols {
        for _pass in 0..2 {
            for i in 0..j {
                let proj = ops::dot(&q[j], &q[i]);
                let qi = q[i].clone();
                for (x, y) in q[j].iter_mut().zip(&qi) {
                    *x -= proj * y;
                }
            }
        }
        let n = ops::norm(&q[j]);
        if n < 1e-12 {
            return Err(Error::Degenerate {
                context: "orthonormal_cols",
                norm: n,
            });
        }
        for x in q[j].iter_mut() {
            *x /= n;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for i in 0..rows {
            out[i * cols + j] = col[i];
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Column-orthonormal [rows×cols] matrix from Gaussian draws, cols ≤ rows.
pub fn random_semi_orthogonal(rows: usize, cols: usize, rng: &mut RngState) -> Result<Tensor> {
    let g = Tensor::matrix(rows, cols, rng.gaussian_vec(rows * cols))?;
    orthonormal_cols(&g)
}

pub fn random_orthogonal(n: usize, rng: &mut RngState) -> Result<Tensor> {
    random_semi_orthogonal(n, n, rng)
}

/// Top-r singular triples of `w` by one-sided Jacobi: columns of a working
/// copy are rotated pairwise until mutually orthogonal, singular values are
/// the resulting column norms. r must not exceed min(m, n).
pub fn svd_topr(w: &Tensor, r: usize) -> Result<Svd> {
    let (m, n) = (w.nrows(), w.ncols());
    let k = m.min(n);
    if r > k {
        return Err(Error::Config(format!(
            "svd rank {r} exceeds min dimension {k} of a {m}x{n} matrix"
        )));
    }
    let tall = m >= n;
    // One-sided Jacobi wants at least as many rows as columns.
    let (rows, cols, a0) = if tall {
        (m, n, w.clone())
    } else {
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = w.at2(i, j);
            }
        }
        (n, m, Tensor::matrix(n, m, t)?)
    };

    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| a0.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let alpha = ops::dot(&a[p], &a[p]);
                let beta = ops::dot(&a[q], &a[q]);
                let gamma = ops::dot(&a[p], &a[q]);
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (ap, aq) = (a[p][i], a[q][i]);
                    a[p][i] = c * ap - s * aq;
                    a[q][i] = s * ap + c * aq;
                }
                for i in 0..cols {
                    let (vp, vq) = (v[p][i], v[q][i]);
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = a.iter().map(|c| ops::norm(c)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut s = Vec::with_capacity(r);
    let mut left = vec![0.0; rows * r];
    let mut right = vec![0.0; r * cols];
    for (out_j, &j) in order.iter().take(r).enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..rows {
                left[i * r + out_j] = a[j][i] / sigma;
            }
        }
        right[out_j * cols..(out_j + 1) * cols].copy_from_slice(&v[j]);
    }
    let left = Tensor::matrix(rows, r, left)?;
    let right = Tensor::matrix(r, cols, right)?;

    if tall {
        Ok(Svd { u: left, s, vt: right })
    } else {
        // W = (Wᵀ)ᵀ = (U Σ Vᵀ)ᵀ: roles of the factors swap.
        let mut u = vec![0.0; m * r];
        for i in 0..r {
            for j in 0..m {
                u[j * r + i] = right.at2(i, j);
            }
        }
        let mut vt = vec![0.0; r * n];
        for i in 0..n {
            for j in 0..r {
                vt[j * n + i] = left.at2(i, j);
            }
        }
        Ok(Svd {
            u: Tensor::matrix(m, r, u)?,
            s,
            vt: Tensor::matrix(r, n, vt)?,
        })
    }
}

/// All min(m, n) singular values, descending.
pub fn singular_values(w: &Tensor) -> Result<Vec<f64>> {
    let k = w.nrows().min(w.ncols());
    Ok(svd_topr(w, k)?.s)
}

/// Eigenvalues (descending) and matching unit eigenvectors (columns) of a
/// symmetric matrix, by cyclic Jacobi rotations. Symmetry is taken on
/// trust; only the shape is checked.
pub fn sym_eig(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch {
            op: "sym_eig",
            lhs: a.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    let mut m: Vec<f64> = a.as_slice().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.frobenius_norm().max(1e-300);

    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let (mip, miq) = (m[i * n + p], m[i * n + q]);
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for i in 0..n {
                    let (mpi, mqi) = (m[p * n + i], m[q * n + i]);
                    m[p * n + i] = c * mpi - s * mqi;
                    m[q * n + i] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let (vip, viq) = (v[i * n + p], v[i * n + q]);
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| eig[i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (out_j, &j) in order.iter().enumerate() {
        for i in 0..n {
            vecs[i * n + out_j] = v[i * n + j];
        }
    }
    Ok((vals, Tensor::matrix(n, n, vecs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops::matmul;
    use crate::rng::{streams, RngState};
    use proptest::prelude::*;

    fn diag_embedded(m: usize, n: usize, d: &[f64]) -> Tensor {
        let mut out = vec![0.0; m * n];
        for (i, &x) in d.iter().enumerate() {
            out[i * n + i] = x;
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    fn reconstruct(svd: &Svd) -> Tensor {
        let r = svd.s.len();
        let (m, n) = (svd.u.nrows(), svd.vt.ncols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += svd.u.at2(i, k) * svd.s[k] * svd.vt.at2(k, j);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    #[test]
    fn test_qr_orthonormal_and_spans_input() {
        let mut rng = RngState::with_stream(3, streams::DATA);
        let g = Tensor::matrix(6, 4, rng.gaussian_vec(24)).unwrap();
        let q = orthonormal_cols(&g).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d = ops::dot(&q.col(i), &q.col(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12, "QtQ[{i}][{j}] = {d}");
            }
        }
        // Q Qᵀ G = G when the columns of G lie in span(Q).
        let mut qt = vec![0.0; 4 * 6];
        for i in 0..6 {
            for j in 0..4 {
                qt[j * 6 + i] = q.at2(i, j);
            }
        }
        let qt = Tensor::matrix(4, 6, qt).unwrap();
        let proj = matmul(&q, &matmul(&qt, &g).unwrap()).unwrap();
        assert!(proj.max_abs_diff(&g) < 1e-10);
    }

    #[test]
    fn test_qr_rejects_dependent_columns() {
        let m = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            orthonormal_cols(&m),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn test_svd_of_diagonal() {
        let w = diag_embedded(3, 3, &[3.0, 2.0, 1.0]);
        let svd = svd_topr(&w, 2).unwrap();
        assert!((svd.s[0] - 3.0).abs() < 1e-12);
        assert!((svd.s[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn test_svd_of_zero_matrix() {
        let w = Tensor::zeros(&[4, 3]);
        let svd = svd_topr(&w, 3).unwrap();
        assert_eq!(svd.s, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn test_svd_recovers_constructed_spectrum() {
        let mut rng = RngState::with_stream(7, streams::DATA);
        let q = random_semi_orthogonal(6, 3, &mut rng).unwrap();
        let p = random_semi_orthogonal(4, 3, &mut rng).unwrap();
        let mut w = vec![0.0; 6 * 4];
        let sig = [5.0, 4.0, 3.0];
        for i in 0..6 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += q.at2(i, k) * sig[k] * p.at2(j, k);
                }
                w[i * 4 + j] = acc;
            }
        }
        let w = Tensor::matrix(6, 4, w).unwrap();
        let svd = svd_topr(&w, 2).unwrap();
        assert!((svd.s[0] - 5.0).abs() < 1e-10, "got {}", svd.s[0]);
        assert!((svd.s[1] - 4.0).abs() < 1e-10, "got {}", svd.s[1]);
    }

    #[test]
    fn test_svd_rotation_invariant() {
        let mut rng = RngState::with_stream(9, streams::DATA);
        let w = Tensor::matrix(5, 5, rng.gaussian_vec(25)).unwrap();
        let r = random_orthogonal(5, &mut rng).unwrap();
        let s0 = singular_values(&w).unwrap();
        let s1 = singular_values(&matmul(&r, &w).unwrap()).unwrap();
        for (a, b) in s0.iter().zip(&s1) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn test_svd_wide_matrix_reconstructs() {
        let mut rng = RngState::with_stream(10, streams::DATA);
        let w = Tensor::matrix(3, 7, rng.gaussian_vec(21)).unwrap();
        let svd = svd_topr(&w, 3).unwrap();
        assert!(reconstruct(&svd).max_abs_diff(&w) < 1e-10);
        assert!(svd.s.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn test_svd_rank_bound() {
        let w = Tensor::zeros(&[3, 2]);
        assert!(svd_topr(&w, 3).is_err());
    }

    #[test]
    fn test_sym_eig_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, vecs) = sym_eig(&a).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let v0 = vecs.col(0);
        assert!((v0[0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
    }

    #[test]
    fn test_sym_eig_reconstructs() {
        let mut rng = RngState::with_stream(11, streams::DATA);
        let g = Tensor::matrix(5, 5, rng.gaussian_vec(25)).unwrap();
        let mut sym = vec![0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                sym[i * 5 + j] = 0.5 * (g.at2(i, j) + g.at2(j, i));
            }
        }
        let a = Tensor::matrix(5, 5, sym).unwrap();
        let (vals, vecs) = sym_eig(&a).unwrap();
        for k in 0..5 {
            let v = vecs.col(k);
            let av = matmul(&a, &Tensor::matrix(5, 1, v.clone()).unwrap()).unwrap();
            for i in 0..5 {
                assert!((av.at2(i, 0) - vals[k] * v[i]).abs() < 1e-10);
            }
        }
        assert!(vals.windows(2).all(|p| p[0] >= p[1]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_svd_descending_nonneg_and_reconstructs(
            seed in 0u64..1000,
            m in 2usize..7,
            n in 2usize..7,
        ) {
            let mut rng = RngState::with_stream(seed, streams::DATA);
            let w = Tensor::matrix(m, n, rng.gaussian_vec(m * n)).unwrap();
            let k = m.min(n);
            let svd = svd_topr(&w, k).unwrap();
            prop_assert!(svd.s.iter().all(|&x| x >= 0.0));
            prop_assert!(svd.s.windows(2).all(|p| p[0] >= p[1]));
            prop_assert!(reconstruct(&svd).max_abs_diff(&w) < 1e-9);
        }

        #[test]
        fn prop_qr_orthonormal(seed in 0u64..1000, rows in 3usize..8, cols in 1usize..4) {
            let mut rng = RngState::with_stream(seed, streams::DATA);
            let g = Tensor::matrix(rows, cols, rng.gaussian_vec(rows * cols)).unwrap();
            let q = orthonormal_cols(&g).unwrap();
            for i in 0..cols {
                for j in 0..cols {
                    let d = ops::dot(&q.col(i), &q.col(j));
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((d - want).abs() < 1e-11);
                }
            }
        }
    }
}
