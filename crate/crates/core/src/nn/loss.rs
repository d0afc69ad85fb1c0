use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean negative log-softmax of the true class.
    CrossEntropy,
    /// Mean over the batch of the summed squared error per sample.
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(match self {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => Targets::Values(v.select_rows(idx)?),
        })
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }
}

/// Row-wise softmax of an `M × C` logit matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 2 {
        bail!(Dimension, "softmax expects M × C logits, got {:?}", logits.shape());
    }
    let (m, c) = (logits.rows(), logits.cols());
    let mut out = logits.clone();
    for n in 0..m {
        let row = &mut out.data_mut()[n * c..(n + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of `M × C` logits; gradient is `(softmax − onehot)/M`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 || logits.rows() != labels.len() {
        bail!(
            Dimension,
            "cross entropy: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        );
    }
    let (m, c) = (logits.rows(), logits.cols());
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        bail!(Input, "label {bad} out of range for {c} classes");
    }
    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        let row = logits.row(n);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = &mut grad.data_mut()[n * c..(n + 1) * c];
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v /= m as f64;
        }
    }
    Ok((loss / m as f64, grad))
}

/// `(1/M) Σ_n ‖ŷ_n − y_n‖²` and its gradient.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        bail!(
            Dimension,
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        );
    }
    let m = pred.shape()[0] as f64;
    let diff = pred.zip_map(target, |a, b| a - b)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / m;
    Ok((loss, diff.scale(2.0 / m)))
}

impl Loss {
    pub fn evaluate(&self, output: &Tensor, targets: &Targets) -> Result<(f64, Tensor)> {
        match (self, targets) {
            (Loss::CrossEntropy, Targets::Labels(l)) => cross_entropy(output, l),
            (Loss::Mse, Targets::Values(v)) => mse(output, v),
            (Loss::CrossEntropy, _) => bail!(Input, "cross entropy needs class labels"),
            (Loss::Mse, _) => bail!(Input, "mse needs real-valued targets"),
        }
    }
}
