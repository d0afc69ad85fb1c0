//! Diagonal Kronecker factors and the factored empirical Fisher.
//!
//! Per parameterized layer the engine keeps two diagonals: `h` (second
//! moments of the homogeneous inputs) and `s` (second moments of the
//! per-sample pre-activation gradients). Each step they are smoothed,
//! min-max normalized and combined into the implicit diagonal
//! `h' ⊗ s' + λ` used to precondition that layer's gradient.
//!
//! Pipeline order per step: fresh factors → EMA → normalize → assemble.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{CaptureKind, LayerCapture, Model};
use crate::tensor::{kron_diag, Tensor};

/// Default Tikhonov damping.
pub const DEFAULT_LAMBDA: f64 = 1e-3;
/// Default weight of the fresh factor in the moving average.
pub const DEFAULT_GAMMA: f64 = 0.8;
/// Ranges below this collapse to all zeros under min-max normalization.
pub const MINMAX_DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Weight matrix (dense or conv, bias folded in): full Kronecker pairing.
    Kronecker,
    /// Per-channel scale and shift of a normalization layer.
    Normalization,
}

impl From<CaptureKind> for BlockKind {
    fn from(k: CaptureKind) -> Self {
        match k {
            CaptureKind::Dense | CaptureKind::Conv => BlockKind::Kronecker,
            CaptureKind::Norm => BlockKind::Normalization,
        }
    }
}

/// The two factor diagonals of one layer. For normalization layers `h` is
/// the scale factor; the shift factor is the constant all-ones diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub layer: usize,
    pub kind: BlockKind,
    pub h: Vec<f64>,
    pub s: Vec<f64>,
}

/// Factor diagonals of a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormFactors {
    pub h_scale: Vec<f64>,
    pub h_shift: Vec<f64>,
    pub s: Vec<f64>,
}

fn row_mean_squares(m: &Tensor) -> Vec<f64> {
    let (r, c) = (m.rows(), m.cols());
    (0..r)
        .map(|i| m.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>() / c as f64)
        .collect()
}

fn check_capture(c: &LayerCapture) -> Result<()> {
    if c.batch == 0 || c.h.cols() == 0 {
        bail!(Input, "capture for layer {} has an empty batch", c.layer);
    }
    if c.h.cols() != c.s.cols() {
        bail!(
            Dimension,
            "capture for layer {}: h has {} columns, s has {}",
            c.layer,
            c.h.cols(),
            c.s.cols()
        );
    }
    Ok(())
}

/// Dense-layer factors: `h[j] = mean_n h̄[j,n]²`, `s[k] = mean_n s[k,n]²`.
/// The homogeneous coordinate contributes exactly 1.
pub fn kf_dense(capture: &LayerCapture) -> Result<(Vec<f64>, Vec<f64>)> {
    check_capture(capture)?;
    Ok((row_mean_squares(&capture.h), row_mean_squares(&capture.s)))
}

/// Convolution factors over the expanded patch matrix: squared entries
/// averaged over all `M·|T|` columns, i.e. `diag(⟦h̄⟧⟦h̄⟧ᵀ/|T|)` and
/// `diag(ssᵀ/|T|)` averaged over the batch.
pub fn kf_conv(capture: &LayerCapture) -> Result<(Vec<f64>, Vec<f64>)> {
    if capture.spatial_count == 0 {
        bail!(State, "conv capture for layer {} has no spatial count", capture.layer);
    }
    check_capture(capture)?;
    if capture.h.cols() != capture.batch * capture.spatial_count {
        bail!(
            State,
            "conv capture for layer {}: {} columns for batch {} × |T| {}",
            capture.layer,
            capture.h.cols(),
            capture.batch,
            capture.spatial_count
        );
    }
    Ok((row_mean_squares(&capture.h), row_mean_squares(&capture.s)))
}

/// Normalization-layer factors: mean of `x̂²` and `s²` per channel over the
/// normalized positions and the batch; the shift factor is all ones.
pub fn kf_norm(capture: &LayerCapture) -> Result<NormFactors> {
    if capture.spatial_count == 0 {
        bail!(Input, "normalization capture for layer {} has |T| = 0", capture.layer);
    }
    check_capture(capture)?;
    let c = capture.h.rows();
    Ok(NormFactors {
        h_scale: row_mean_squares(&capture.h),
        h_shift: vec![1.0; c],
        s: row_mean_squares(&capture.s),
    })
}

/// Identity factors for layers without a dedicated formula.
pub fn kf_identity(h_len: usize, s_len: usize) -> (Vec<f64>, Vec<f64>) {
    (vec![1.0; h_len], vec![1.0; s_len])
}

/// Fresh per-batch factors for every capture. With `identity_norm`,
/// normalization layers receive identity factors instead.
pub fn fresh_factors(captures: &[LayerCapture], identity_norm: bool) -> Result<Vec<LayerFactors>> {
    captures
        .iter()
        .map(|c| {
            let (h, s) = match c.kind {
                CaptureKind::Dense => kf_dense(c)?,
                CaptureKind::Conv => kf_conv(c)?,
                CaptureKind::Norm if identity_norm => kf_identity(c.h.rows(), c.s.rows()),
                CaptureKind::Norm => {
                    let f = kf_norm(c)?;
                    (f.h_scale, f.s)
                }
            };
            Ok(LayerFactors {
                layer: c.layer,
                kind: c.kind.into(),
                h,
                s,
            })
        })
        .collect()
}

/// Moving-average factor state for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct KFState {
    pub layers: Vec<LayerFactors>,
    pub gamma: f64,
    pub lambda: f64,
    pub step: u64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        bail!(Config, "EMA decay gamma must lie in (0, 1], got {gamma}");
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        bail!(Config, "damping lambda must be positive, got {lambda}");
    }
    Ok(())
}

impl KFState {
    /// All-ones factors for every parameterized layer of `model`.
    pub fn for_model(model: &Model, gamma: f64, lambda: f64) -> Result<Self> {
        check_gamma(gamma)?;
        check_lambda(lambda)?;
        let layers = model
            .layers()
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let kind = l.capture_kind()?;
                let (hl, sl) = l.factor_dims()?;
                let (h, s) = kf_identity(hl, sl);
                Some(LayerFactors {
                    layer: i,
                    kind: kind.into(),
                    h,
                    s,
                })
            })
            .collect();
        Ok(Self {
            layers,
            gamma,
            lambda,
            step: 0,
        })
    }

    pub fn from_layers(layers: Vec<LayerFactors>, gamma: f64, lambda: f64) -> Result<Self> {
        check_gamma(gamma)?;
        check_lambda(lambda)?;
        Ok(Self {
            layers,
            gamma,
            lambda,
            step: 0,
        })
    }

    /// Checks `fresh` has the same layer layout as the state.
    pub fn check_layout(&self, fresh: &[LayerFactors]) -> Result<()> {
        if fresh.len() != self.layers.len() {
            bail!(
                Dimension,
                "expected factors for {} layers, got {}",
                self.layers.len(),
                fresh.len()
            );
        }
        for (old, new) in self.layers.iter().zip(fresh) {
            if old.layer != new.layer
                || old.kind != new.kind
                || old.h.len() != new.h.len()
                || old.s.len() != new.s.len()
            {
                bail!(
                    Dimension,
                    "factor layout mismatch at layer {} (h {} vs {}, s {} vs {})",
                    old.layer,
                    old.h.len(),
                    new.h.len(),
                    old.s.len(),
                    new.s.len()
                );
            }
        }
        Ok(())
    }

    /// `new = γ·fresh + (1−γ)·old` per coordinate of both factors.
    pub fn ema_update(&mut self, fresh: &[LayerFactors]) -> Result<()> {
        check_gamma(self.gamma)?;
        self.check_layout(fresh)?;
        let g = self.gamma;
        for (old, new) in self.layers.iter_mut().zip(fresh) {
            for (o, &n) in old.h.iter_mut().zip(&new.h) {
                *o = g * n + (1.0 - g) * *o;
            }
            for (o, &n) in old.s.iter_mut().zip(&new.s) {
                *o = g * n + (1.0 - g) * *o;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Overwrites the state with `fresh` (moving average disabled).
    pub fn replace(&mut self, fresh: &[LayerFactors]) -> Result<()> {
        self.check_layout(fresh)?;
        self.layers = fresh.to_vec();
        self.step += 1;
        Ok(())
    }

    /// Min-max normalizes every factor and attaches the damping.
    pub fn assemble(&self) -> Result<FactoredEfim> {
        efim_assemble(self)
    }
}

/// Free-function form of [`KFState::ema_update`].
pub fn ema_update(state: &mut KFState, fresh: &[LayerFactors]) -> Result<()> {
    state.ema_update(fresh)
}

/// `(v − min)/(max − min)`; ranges below [`MINMAX_DEGENERATE_RANGE`] map to
/// all zeros.
pub fn minmax_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        bail!(Input, "cannot normalize an empty vector");
    }
    if v.iter().any(|x| x.is_nan()) {
        bail!(Input, "NaN in vector to normalize");
    }
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range >= MINMAX_DEGENERATE_RANGE) {
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v.iter().map(|x| ((x - lo) / range).clamp(0.0, 1.0)).collect())
}

/// Normalized factor diagonals of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EfimBlock {
    pub layer: usize,
    pub kind: BlockKind,
    pub h_norm: Vec<f64>,
    pub s_norm: Vec<f64>,
}

/// Implicit damped diagonal Fisher for a whole model. Never materializes the
/// full diagonal unless asked via [`FactoredEfim::implied_diagonal`].
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredEfim {
    pub blocks: Vec<EfimBlock>,
    pub lambda: f64,
}

pub fn efim_assemble(state: &KFState) -> Result<FactoredEfim> {
    check_lambda(state.lambda)?;
    let blocks = state
        .layers
        .iter()
        .map(|f| {
            Ok(EfimBlock {
                layer: f.layer,
                kind: f.kind,
                h_norm: minmax_normalize(&f.h)?,
                s_norm: minmax_normalize(&f.s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FactoredEfim {
        blocks,
        lambda: state.lambda,
    })
}

#[inline]
fn divisor(d: f64, sqrt: bool) -> f64 {
    if sqrt {
        d.sqrt()
    } else {
        d
    }
}

impl EfimBlock {
    /// Number of parameter tensors this block preconditions.
    pub fn param_tensors(&self) -> usize {
        match self.kind {
            BlockKind::Kronecker => 1,
            BlockKind::Normalization => 2,
        }
    }

    /// Implied Fisher diagonal(s), each entry `h'·s' + λ`. Kronecker blocks
    /// return one vector in `vec(g)` order (input index major, output index
    /// fastest); normalization blocks return `[scale, shift]`.
    pub fn implied_diagonal(&self, lambda: f64) -> Result<Vec<Vec<f64>>> {
        Ok(match self.kind {
            BlockKind::Kronecker => {
                vec![kron_diag(&self.h_norm, &self.s_norm)?.into_iter().map(|v| v + lambda).collect()]
            }
            BlockKind::Normalization => vec![
                self.h_norm.iter().zip(&self.s_norm).map(|(h, s)| h * s + lambda).collect(),
                self.s_norm.iter().map(|s| s + lambda).collect(),
            ],
        })
    }
}

/// Divides a `P_out × P_in(+1)` gradient entrywise by `h'[j]·s'[k] + λ`
/// (square-rooted when `sqrt` is set).
pub fn precondition(grad: &Tensor, block: &EfimBlock, lambda: f64, sqrt: bool) -> Result<Tensor> {
    if block.kind != BlockKind::Kronecker {
        bail!(Dimension, "precondition expects a Kronecker block");
    }
    let (p_out, p_in) = match grad.shape() {
        &[r, c] => (r, c),
        s => bail!(Dimension, "gradient must be a matrix, got {s:?}"),
    };
    if p_out != block.s_norm.len() || p_in != block.h_norm.len() {
        bail!(
            Dimension,
            "gradient {p_out}x{p_in} vs factors s {} / h {}",
            block.s_norm.len(),
            block.h_norm.len()
        );
    }
    let mut out = grad.clone();
    let d = out.data_mut();
    for k in 0..p_out {
        let sk = block.s_norm[k];
        for j in 0..p_in {
            d[k * p_in + j] /= divisor(block.h_norm[j] * sk + lambda, sqrt);
        }
    }
    Ok(out)
}

/// Elementwise preconditioning of a normalization layer's scale and shift
/// gradients: divisors `h'⊙s' + λ` and `s' + λ`.
pub fn precondition_norm(
    scale_grad: &Tensor,
    shift_grad: &Tensor,
    block: &EfimBlock,
    lambda: f64,
    sqrt: bool,
) -> Result<(Tensor, Tensor)> {
    if block.kind != BlockKind::Normalization {
        bail!(Dimension, "precondition_norm expects a normalization block");
    }
    let c = block.s_norm.len();
    if scale_grad.len() != c || shift_grad.len() != c || block.h_norm.len() != c {
        bail!(Dimension, "normalization gradients do not match {c} channels");
    }
    let mut sg = scale_grad.clone();
    for (i, v) in sg.data_mut().iter_mut().enumerate() {
        *v /= divisor(block.h_norm[i] * block.s_norm[i] + lambda, sqrt);
    }
    let mut bg = shift_grad.clone();
    for (i, v) in bg.data_mut().iter_mut().enumerate() {
        *v /= divisor(block.s_norm[i] + lambda, sqrt);
    }
    Ok((sg, bg))
}

impl FactoredEfim {
    /// Number of parameter tensors covered, in model parameter order.
    pub fn param_tensors(&self) -> usize {
        self.blocks.iter().map(EfimBlock::param_tensors).sum()
    }

    /// Preconditions gradients laid out as [`Model::params`].
    pub fn precondition_all(&self, grads: &[Tensor], sqrt: bool) -> Result<Vec<Tensor>> {
        if grads.len() != self.param_tensors() {
            bail!(
                Dimension,
                "{} gradient tensors for {} preconditioned tensors",
                grads.len(),
                self.param_tensors()
            );
        }
        let mut out = Vec::with_capacity(grads.len());
        let mut i = 0;
        for b in &self.blocks {
            match b.kind {
                BlockKind::Kronecker => {
                    out.push(precondition(&grads[i], b, self.lambda, sqrt)?);
                    i += 1;
                }
                BlockKind::Normalization => {
                    let (s, t) = precondition_norm(&grads[i], &grads[i + 1], b, self.lambda, sqrt)?;
                    out.push(s);
                    out.push(t);
                    i += 2;
                }
            }
        }
        Ok(out)
    }

    /// Implied diagonals for every parameter tensor, each in that tensor's
    /// row-major layout (`[k][j]` for weight matrices).
    pub fn divisors(&self, sqrt: bool) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b.kind {
                BlockKind::Kronecker => {
                    let mut d = Vec::with_capacity(b.s_norm.len() * b.h_norm.len());
                    for &s in &b.s_norm {
                        for &h in &b.h_norm {
                            d.push(divisor(h * s + self.lambda, sqrt));
                        }
                    }
                    out.push(d);
                }
                BlockKind::Normalization => {
                    for diag in b.implied_diagonal(self.lambda)? {
                        out.push(diag.into_iter().map(|v| divisor(v, sqrt)).collect());
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Writes `layer,factor,index,value` rows for the raw factor state.
pub fn write_factors_csv<W: Write>(w: W, state: &KFState) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["layer", "factor", "index", "value"])?;
    for f in &state.layers {
        for (name, v) in [("h", &f.h), ("s", &f.s)] {
            for (i, x) in v.iter().enumerate() {
                wr.write_record(&[f.layer.to_string(), name.to_string(), i.to_string(), format!("{x:e}")])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

/// Writes `layer,factor,index,value` rows for normalized factors.
pub fn write_efim_csv<W: Write>(w: W, efim: &FactoredEfim) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["layer", "factor", "index", "value"])?;
    for b in &efim.blocks {
        for (name, v) in [("h_norm", &b.h_norm), ("s_norm", &b.s_norm)] {
            for (i, x) in v.iter().enumerate() {
                wr.write_record(&[b.layer.to_string(), name.to_string(), i.to_string(), format!("{x:e}")])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}
