//! Eager tensor operations and the scalar kernels shared with the tape.
//!
//! These are the reference entry points for the math used everywhere else:
//! the recorded graph ops in [`super::graph`] call the same kernels, so
//! eager and recorded forwards agree bit for bit.

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Norms below this are treated as degenerate in cosine similarity.
pub const EPS_NORM: f64 = 1e-12;
/// Lower clamp applied to q inside KL divergence.
pub const EPS_KL: f64 = 1e-12;

/// C[m×n] = A[m×k] · B[k×n], accumulated into `out`.
pub(crate) fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
}

/// out[m×k] += A[m×n] · B[k×n]ᵀ  (rows dotted with rows).
pub(crate) fn matmul_nt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            o_row[kk] += acc;
        }
    }
}

/// out[k×n] += A[m×k]ᵀ · B[m×n].
pub(crate) fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.nrows(), a.ncols());
    let (k2, n) = (b.nrows(), b.ncols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&mut out, a.as_slice(), b.as_slice(), m, k, n);
    Tensor::matrix(m, n, out)
}

/// Softmax with temperature over a slice, max-subtracted.
pub(crate) fn softmax_temp_slice(xs: &[f64], tau: f64) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let s: f64 = out.iter().sum();
    for o in &mut out {
        *o /= s;
    }
    out
}

pub fn softmax_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("softmax temperature must be positive, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::Config("softmax over empty logits".into()));
    }
    Ok(Tensor::vector(softmax_temp_slice(logits.as_slice(), tau)))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine_sim(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            lhs: u.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (nu, nv) = (norm(u.as_slice()), norm(v.as_slice()));
    if nu < EPS_NORM {
        return Err(Error::Degenerate { context: "cosine_sim lhs", norm: nu });
    }
    if nv < EPS_NORM {
        return Err(Error::Degenerate { context: "cosine_sim rhs", norm: nv });
    }
    Ok(dot(u.as_slice(), v.as_slice()) / (nu * nv))
}

pub(crate) fn validate_distribution(p: &[f64], context: &'static str) -> Result<()> {
    let mut sum = 0.0;
    for &x in p {
        if x < 0.0 {
            return Err(Error::NotDistribution { context, sum: x });
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotDistribution { context, sum });
    }
    Ok(())
}

/// Σ p·ln(p/q) with 0·ln(0/q) = 0 and q clamped below at 1e-12.
pub(crate) fn kl_slice(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else {
                pi * (pi / qi.max(EPS_KL)).ln()
            }
        })
        .sum()
}

pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    validate_distribution(p.as_slice(), "kl_divergence p")?;
    validate_distribution(q.as_slice(), "kl_divergence q")?;
    Ok(kl_slice(p.as_slice(), q.as_slice()))
}

pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}
