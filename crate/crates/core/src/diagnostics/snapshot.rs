//! Saved matrices for offline analysis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::fisher::dense_factors;
use crate::nn::{CaptureKind, Mode, Model, Targets};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedMatrix {
    pub layer: usize,
    pub name: String,
    pub rows: Vec<Vec<f64>>,
}

impl NamedMatrix {
    pub fn from_tensor(layer: usize, name: &str, t: &Tensor) -> Self {
        Self {
            layer,
            name: name.into(),
            rows: (0..t.rows()).map(|i| t.data()[i * t.cols()..(i + 1) * t.cols()].to_vec()).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let r = self.rows.len();
        let c = self.rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || self.rows.iter().any(|row| row.len() != c) {
            bail!(Dimension, "matrix {}/{} is empty or ragged", self.layer, self.name);
        }
        Tensor::new(vec![r, c], self.rows.concat())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub matrices: Vec<NamedMatrix>,
}

impl Snapshot {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }
}

/// Dense Kronecker factors `ℋ` and `𝒮` of every weight layer on one batch
/// (eval mode, given targets).
pub fn factor_snapshot(model: &Model, batch: &Tensor, targets: &Targets) -> Result<Snapshot> {
    let mut probe = model.clone();
    let step = probe.step(batch, targets, Mode::Eval)?;
    let mut matrices = Vec::new();
    for c in step.captures.iter().filter(|c| c.kind != CaptureKind::Norm) {
        let (h, s) = dense_factors(c)?;
        matrices.push(NamedMatrix::from_tensor(c.layer, "H", &h));
        matrices.push(NamedMatrix::from_tensor(c.layer, "S", &s));
    }
    Ok(Snapshot { matrices })
}
