//! Two-component PCA and the per-epoch weight/loss trajectory recorder.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::linalg::jacobi_eigen;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    /// `N × 2` projection of the centered data.
    pub projection: Tensor,
    /// Principal axes, each of length `d`.
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
    pub mean: Vec<f64>,
}

impl Pca2 {
    /// Maps new rows (`K × d`) with the fitted mean and axes.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.ndim() != 2 || x.cols() != d {
            bail!(Dimension, "pca expects rows of length {d}, got {:?}", x.shape());
        }
        let mut out = Vec::with_capacity(x.rows() * 2);
        for r in 0..x.rows() {
            let row = x.row(r);
            for c in &self.components {
                out.push((0..d).map(|k| (row[k] - self.mean[k]) * c[k]).sum());
            }
        }
        Tensor::from_parts(vec![x.rows(), 2], out)
    }
}

/// Projects `N × d` data (`d ≥ 2`) onto the top two covariance
/// eigenvectors. Each axis is signed so its largest-magnitude component is
/// positive.
pub fn pca2(data: &Tensor) -> Result<Pca2> {
    if data.ndim() != 2 || data.cols() < 2 || data.rows() < 2 {
        bail!(Dimension, "pca2 needs at least 2 rows and 2 columns, got {:?}", data.shape());
    }
    let (n, d) = (data.rows(), data.cols());
    let mean: Vec<f64> = (0..d).map(|k| (0..n).map(|r| data.at(r, k)).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = data.row(r);
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += xi * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (n - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let eig = jacobi_eigen(&Tensor::from_parts(vec![d, d], cov)?)?;
    let axis = |c: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|k| eig.vectors.at(k, c)).collect();
        let lead = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter().map(|x| -x).collect()
        } else {
            v
        }
    };
    let mut p = Pca2 {
        projection: Tensor::zeros(&[n, 2])?,
        components: [axis(0), axis(1)],
        variances: [eig.values[0], eig.values[1]],
        mean,
    };
    p.projection = p.transform(data)?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub w1: f64,
    pub w2: f64,
    pub loss: f64,
}

/// Per-epoch 2-D weight vector and loss; epochs strictly increase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryLog {
    pub fn record(&mut self, epoch: usize, w: &[f64], loss: f64) -> Result<()> {
        if w.len() != 2 {
            bail!(Dimension, "trajectory weight must be 2-dimensional, got {}", w.len());
        }
        if let Some(last) = self.rows.last() {
            if epoch <= last.epoch {
                bail!(Input, "epoch {epoch} does not follow {}", last.epoch);
            }
        }
        self.rows.push(TrajectoryRow {
            epoch,
            w1: w[0],
            w2: w[1],
            loss,
        });
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut log = Self::default();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: TrajectoryRow = row?;
            log.record(row.epoch, &[row.w1, row.w2], row.loss)?;
        }
        Ok(log)
    }
}

/// Appends one row, returning the extended log.
pub fn record_trajectory(mut log: TrajectoryLog, epoch: usize, w: &[f64], loss: f64) -> Result<TrajectoryLog> {
    log.record(epoch, w, loss)?;
    Ok(log)
}
