//! Cyclic Jacobi eigensolver for real symmetric matrices.

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Off-diagonal Frobenius norm below which iteration stops, relative to the
/// matrix norm.
pub const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition `A = V diag(λ) Vᵀ`, eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    pub values: Vec<f64>,
    /// Column `i` is the eigenvector for `values[i]`; row-major `n × n`.
    pub vectors: Tensor,
}

pub(crate) fn square_dim(a: &Tensor) -> Result<usize> {
    if a.ndim() != 2 || a.rows() != a.cols() {
        bail!(Dimension, "expected a square matrix, got {:?}", a.shape());
    }
    Ok(a.rows())
}

pub fn is_symmetric(a: &Tensor, tol: f64) -> bool {
    let n = a.rows();
    a.ndim() == 2
        && n == a.cols()
        && (0..n).all(|i| (0..i).all(|j| (a.at(i, j) - a.at(j, i)).abs() <= tol * a.at(i, j).abs().max(1.0)))
}

pub fn jacobi_eigen(a: &Tensor) -> Result<SymEig> {
    let n = square_dim(a)?;
    if !is_symmetric(a, 1e-12) {
        bail!(Input, "Jacobi eigensolver needs a symmetric matrix");
    }
    let mut m = a.data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let fro = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&m) > JACOBI_TOL * fro {
        if sweeps == MAX_SWEEPS {
            bail!(Numeric, "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps");
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    Ok(SymEig {
        values,
        vectors: Tensor::from_parts(vec![n, n], vectors)?,
    })
}
