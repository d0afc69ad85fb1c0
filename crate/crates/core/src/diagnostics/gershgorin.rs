//! Gershgorin discs and off-diagonal perturbation of curvature blocks.

use std::io::Write;

use super::linalg::{is_symmetric, jacobi_eigen, square_dim};
use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Slack allowed when testing eigenvalues against the disc union.
pub const CONTAINMENT_TOL: f64 = 1e-9;
/// Off-diagonal noise scale for [`perturb_offdiag`].
pub const DEFAULT_SIGMA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscSet {
    pub centers: Vec<f64>,
    pub radii: Vec<f64>,
    /// `|a_ii| / R_i`, `f64::INFINITY` when the radius is zero.
    pub dominance: Vec<f64>,
    /// Eigenvalues, when the matrix is symmetric or triangular.
    pub eigenvalues: Option<Vec<f64>>,
    /// Whether every eigenvalue lies in the disc union; `None` when the
    /// eigenvalues are not available.
    pub contained: Option<bool>,
}

impl DiscSet {
    pub fn contains(&self, x: f64) -> bool {
        self.centers
            .iter()
            .zip(&self.radii)
            .any(|(c, r)| (x - c).abs() <= r + CONTAINMENT_TOL * (1.0 + c.abs()))
    }
}

fn triangular(a: &Tensor) -> bool {
    let n = a.rows();
    let upper = (0..n).all(|i| (0..i).all(|j| a.at(i, j) == 0.0));
    let lower = (0..n).all(|i| (i + 1..n).all(|j| a.at(i, j) == 0.0));
    upper || lower
}

pub fn gershgorin(a: &Tensor) -> Result<DiscSet> {
    let n = square_dim(a)?;
    let centers: Vec<f64> = (0..n).map(|i| a.at(i, i)).collect();
    let radii: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| a.at(i, j).abs()).sum())
        .collect();
    let dominance = centers
        .iter()
        .zip(&radii)
        .map(|(c, &r)| if r == 0.0 { f64::INFINITY } else { c.abs() / r })
        .collect();
    let eigenvalues = if is_symmetric(a, 1e-12) {
        Some(jacobi_eigen(a)?.values)
    } else if triangular(a) {
        Some(centers.clone())
    } else {
        None
    };
    let mut set = DiscSet {
        centers,
        radii,
        dominance,
        eigenvalues: None,
        contained: None,
    };
    set.contained = eigenvalues.as_ref().map(|ev| ev.iter().all(|&x| set.contains(x)));
    set.eigenvalues = eigenvalues;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    /// Eigenvalue magnitudes, descending.
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// Count of eigenvalues with magnitude above one.
    pub kaiser_before: usize,
    pub kaiser_after: usize,
}

impl Perturbation {
    pub fn max_shift(&self) -> f64 {
        self.before.iter().zip(&self.after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn sorted_magnitudes(v: Vec<f64>) -> Vec<f64> {
    let mut m: Vec<f64> = v.into_iter().map(f64::abs).collect();
    m.sort_by(|a, b| b.total_cmp(a));
    m
}

/// Symmetric Gaussian noise `e_ij = e_ji ∼ N(0, σ²)` on the off-diagonal.
/// Draws are taken for `i < j` in row-major order.
pub fn offdiag_noise(n: usize, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        bail!(Config, "sigma must be non-negative, got {sigma}");
    }
    let mut rng = Rng::new(seed);
    let mut e = Tensor::zeros(&[n, n])?;
    for i in 0..n {
        for j in i + 1..n {
            let v = sigma * rng.standard_normal();
            e.set(i, j, v);
            e.set(j, i, v);
        }
    }
    Ok(e)
}

pub fn perturb_offdiag(a: &Tensor, sigma: f64, seed: u64) -> Result<Perturbation> {
    let n = square_dim(a)?;
    let noisy = a.zip_map(&offdiag_noise(n, sigma, seed)?, |x, e| x + e)?;
    let before = sorted_magnitudes(jacobi_eigen(a)?.values);
    let after = sorted_magnitudes(jacobi_eigen(&noisy)?.values);
    let kaiser = |v: &[f64]| v.iter().filter(|&&x| x.abs() > 1.0).count();
    Ok(Perturbation {
        kaiser_before: kaiser(&before),
        kaiser_after: kaiser(&after),
        before,
        after,
    })
}

/// `layer,row,center,radius` rows.
pub fn write_discs_csv<W: Write>(w: W, sets: &[(usize, &DiscSet)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["layer", "row", "center", "radius"])?;
    for (layer, d) in sets {
        for (i, (c, r)) in d.centers.iter().zip(&d.radii).enumerate() {
            wr.write_record(&[layer.to_string(), i.to_string(), format!("{c:e}"), format!("{r:e}")])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// `layer,index,before,after` rows of eigenvalue magnitudes.
pub fn write_spectra_csv<W: Write>(w: W, rows: &[(usize, &Perturbation)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["layer", "index", "before", "after"])?;
    for (layer, p) in rows {
        for (i, (b, a)) in p.before.iter().zip(&p.after).enumerate() {
            wr.write_record(&[layer.to_string(), i.to_string(), format!("{b:e}"), format!("{a:e}")])?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangular_example() {
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 0.0, 3.0]).unwrap();
        let d = gershgorin(&a).unwrap();
        assert_eq!(d.centers, vec![2.0, 3.0]);
        assert_eq!(d.radii, vec![1.0, 0.0]);
        assert_eq!(d.dominance[1], f64::INFINITY);
        assert_eq!(d.contained, Some(true));
    }

    #[test]
    fn diagonal_radii_zero() {
        let a = Tensor::matrix(2, 2, vec![5.0, 0.0, 0.0, -1.0]).unwrap();
        let d = gershgorin(&a).unwrap();
        assert_eq!(d.radii, vec![0.0, 0.0]);
        assert!(d.dominance.iter().all(|x| x.is_infinite()));
    }

    #[test]
    fn zero_noise_keeps_spectrum() {
        let a = Tensor::matrix(2, 2, vec![3.0, 0.5, 0.5, 0.2]).unwrap();
        let p = perturb_offdiag(&a, 0.0, 1).unwrap();
        assert_eq!(p.before, p.after);
        assert_eq!(p.kaiser_before, 1);
    }

    #[test]
    fn non_square_rejected() {
        assert!(gershgorin(&Tensor::zeros(&[2, 3]).unwrap()).is_err());
    }
}
