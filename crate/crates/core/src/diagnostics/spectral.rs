//! 2-D DFT and the diagonal-versus-off-diagonal signal-to-noise ratio.

use std::io::Write;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::linalg::square_dim;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.cols + v]
    }

    /// Entrywise magnitudes.
    pub fn magnitude(&self) -> Result<Tensor> {
        Tensor::from_parts(vec![self.rows, self.cols], self.data.iter().map(|z| z.norm()).collect())
    }
}

/// Unnormalized 2-D DFT: `F(u,v) = Σ_x Σ_y A(x,y)·exp(−2πi(ux/m + vy/n))`.
pub fn fft2(a: &Tensor) -> Result<ComplexMatrix> {
    if a.ndim() != 2 {
        bail!(Dimension, "fft2 expects a matrix, got {:?}", a.shape());
    }
    let (m, n) = (a.rows(), a.cols());
    let mut data: Vec<Complex64> = a.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut data);
    let col_fft = planner.plan_fft_forward(m);
    let mut col = vec![Complex64::new(0.0, 0.0); m];
    for j in 0..n {
        for i in 0..m {
            col[i] = data[i * n + j];
        }
        col_fft.process(&mut col);
        for i in 0..m {
            data[i * n + j] = col[i];
        }
    }
    Ok(ComplexMatrix { rows: m, cols: n, data })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr {
    /// Decibels; `f64::INFINITY` when the off-diagonal energy is zero.
    pub db: f64,
    pub infinite: bool,
}

/// `10·log10(Σ_i |m_ii|² / Σ_{j>i} |m̂_ij|²)`.
pub fn snr(m: &Tensor, m_hat: &Tensor) -> Result<Snr> {
    let n = square_dim(m)?;
    if square_dim(m_hat)? != n {
        bail!(Dimension, "snr operands differ: {:?} vs {:?}", m.shape(), m_hat.shape());
    }
    let signal: f64 = (0..n).map(|i| m.at(i, i).powi(2)).sum();
    let noise: f64 = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m_hat.at(i, j).powi(2)).sum();
    if noise == 0.0 {
        return Ok(Snr {
            db: f64::INFINITY,
            infinite: true,
        });
    }
    Ok(Snr {
        db: 10.0 * (signal / noise).log10(),
        infinite: false,
    })
}

/// [`snr`] on FFT magnitudes of the same matrix.
pub fn spectral_snr(a: &Tensor) -> Result<Snr> {
    let mag = fft2(a)?.magnitude()?;
    snr(&mag, &mag)
}

/// `layer,snr_db,infinite` rows.
pub fn write_snr_csv<W: Write>(w: W, rows: &[(usize, Snr)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["layer", "snr_db", "infinite"])?;
    for (layer, s) in rows {
        wr.write_record(&[layer.to_string(), format!("{:e}", s.db), s.infinite.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
