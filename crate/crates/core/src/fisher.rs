//! Reference Fisher information: exact by class enumeration, Monte-Carlo by
//! label sampling, and dense Kronecker blocks for small layers.
//!
//! All diagonals are per layer, in the layer's `vec(g)` order: input-side
//! index major, output index fastest (`j·P_out + k`). Normalization layers
//! contribute two vectors, scale then shift.

use std::io::Write;

use crate::error::{bail, Result};
use crate::kfactor::{fresh_factors, BlockKind};
use crate::nn::{softmax, CaptureKind, LayerCapture, Loss, Mode, Model, ParamRole, Targets};
use crate::rng::Rng;
use crate::tensor::{kron_diag, Tensor};

/// Largest class count the exact oracle enumerates.
pub const MAX_ENUM_CLASSES: usize = 64;
/// Largest factor dimension [`kfac_block_dense`] will materialize.
pub const DENSE_BLOCK_GUARD: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FisherBlock {
    pub layer: usize,
    pub kind: BlockKind,
    /// One vector for weight blocks, `[scale, shift]` for normalization.
    pub diag: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub blocks: Vec<FisherBlock>,
    /// Label draws per input; 0 for exact enumeration.
    pub n_samples: usize,
}

impl FisherDiag {
    /// All entries concatenated in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.diag.iter().flatten().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.diag.iter().map(Vec::len).sum::<usize>()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn zeros_like(model: &Model, n_samples: usize) -> Self {
        let mut blocks: Vec<FisherBlock> = Vec::new();
        for (slot, p) in model.param_slots().into_iter().zip(model.params()) {
            match slot.role {
                ParamRole::Theta => blocks.push(FisherBlock {
                    layer: slot.layer,
                    kind: BlockKind::Kronecker,
                    diag: vec![vec![0.0; p.len()]],
                }),
                ParamRole::Scale => blocks.push(FisherBlock {
                    layer: slot.layer,
                    kind: BlockKind::Normalization,
                    diag: vec![vec![0.0; p.len()]],
                }),
                ParamRole::Shift => blocks
                    .last_mut()
                    .expect("shift follows scale")
                    .diag
                    .push(vec![0.0; p.len()]),
            }
        }
        Self { blocks, n_samples }
    }

    /// Adds `w · g²` for per-sample gradients `grads` in parameter order.
    fn accumulate(&mut self, grads: &[Tensor], w: f64) {
        let mut it = grads.iter();
        for b in &mut self.blocks {
            for d in &mut b.diag {
                let g = it.next().expect("gradient count matches layout");
                if b.kind == BlockKind::Kronecker {
                    let (p_out, p_in) = (g.rows(), g.cols());
                    for k in 0..p_out {
                        for j in 0..p_in {
                            let v = g.data()[k * p_in + j];
                            d[j * p_out + k] += w * v * v;
                        }
                    }
                } else {
                    for (dv, v) in d.iter_mut().zip(g.data()) {
                        *dv += w * v * v;
                    }
                }
            }
        }
    }

    fn scale(&mut self, k: f64) {
        for v in self.blocks.iter_mut().flat_map(|b| b.diag.iter_mut().flatten()) {
            *v *= k;
        }
    }
}

fn check_categorical(model: &Model, batch: &Tensor) -> Result<usize> {
    if model.loss() != Loss::CrossEntropy {
        bail!(Unsupported, "Fisher oracle needs a categorical output, model uses {:?}", model.loss());
    }
    let out = model.output_shape();
    let c = out[0];
    if c > MAX_ENUM_CLASSES {
        bail!(Unsupported, "{c} classes exceeds the enumeration limit {MAX_ENUM_CLASSES}");
    }
    if batch.ndim() == 0 || batch.shape()[0] == 0 {
        bail!(Input, "empty batch");
    }
    Ok(c)
}

fn sample(batch: &Tensor, n: usize) -> Result<Tensor> {
    batch.select_rows(&[n])
}

fn onehot_grad(probs: &[f64], y: usize) -> Result<Tensor> {
    let mut g = probs.to_vec();
    g[y] -= 1.0;
    Tensor::matrix(1, g.len(), g)
}

/// Exact Fisher diagonal: for each input, every label weighted by the
/// model's predictive probability, averaged over the batch. Runs the model
/// in eval mode, one sample at a time.
pub fn exact_fisher_diag(model: &Model, batch: &Tensor) -> Result<FisherDiag> {
    let c = check_categorical(model, batch)?;
    let mut probe = model.clone();
    let mut out = FisherDiag::zeros_like(model, 0);
    let m = batch.shape()[0];
    for n in 0..m {
        let logits = probe.forward(&sample(batch, n)?, Mode::Eval)?;
        let p = softmax(&logits)?.into_data();
        for y in 0..c {
            if p[y] == 0.0 {
                continue;
            }
            let bw = probe.backward(&onehot_grad(&p, y)?)?;
            out.accumulate(&bw.grads, p[y]);
        }
    }
    out.scale(1.0 / m as f64);
    Ok(out)
}

/// Monte-Carlo Fisher diagonal: `n_samples` labels drawn from the model's
/// predictive distribution per input, squared gradients averaged.
/// Deterministic for a given seed.
pub fn mc_fisher_diag(model: &Model, batch: &Tensor, n_samples: usize, seed: u64) -> Result<FisherDiag> {
    if n_samples == 0 {
        bail!(Config, "n_samples must be at least 1");
    }
    check_categorical(model, batch)?;
    let mut rng = Rng::new(seed);
    let mut probe = model.clone();
    let mut out = FisherDiag::zeros_like(model, n_samples);
    let m = batch.shape()[0];
    for n in 0..m {
        let logits = probe.forward(&sample(batch, n)?, Mode::Eval)?;
        let p = softmax(&logits)?.into_data();
        for _ in 0..n_samples {
            let y = rng.categorical(&p);
            let bw = probe.backward(&onehot_grad(&p, y)?)?;
            out.accumulate(&bw.grads, 1.0);
        }
    }
    out.scale(1.0 / (m * n_samples) as f64);
    Ok(out)
}

/// Raw Kronecker-factored diagonal (no EMA, normalization or damping) in the
/// same layout as the oracles.
///
/// With `targets` the factors come from one train-free pass with those
/// labels (empirical Fisher). Without, the output-side factor is the
/// expectation over labels under the model, computed per sample by
/// enumeration; this is the quantity the exact oracle matches for a
/// single input.
pub fn kf_product_diag(model: &Model, batch: &Tensor, targets: Option<&Targets>) -> Result<FisherDiag> {
    let mut probe = model.clone();
    let factors = match targets {
        Some(t) => {
            let step = probe.step(batch, t, Mode::Eval)?;
            fresh_factors(&step.captures, false)?
        }
        None => {
            let c = check_categorical(model, batch)?;
            let m = batch.shape()[0];
            let mut acc: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
            for n in 0..m {
                let logits = probe.forward(&sample(batch, n)?, Mode::Eval)?;
                let p = softmax(&logits)?.into_data();
                let mut h_part: Vec<Vec<f64>> = Vec::new();
                let mut s_part: Vec<Vec<f64>> = Vec::new();
                for y in 0..c {
                    let bw = probe.backward(&onehot_grad(&p, y)?)?;
                    let f = fresh_factors(&bw.captures, false)?;
                    if y == 0 {
                        h_part = f.iter().map(|l| l.h.clone()).collect();
                        s_part = f.iter().map(|l| vec![0.0; l.s.len()]).collect();
                    }
                    for (dst, l) in s_part.iter_mut().zip(&f) {
                        for (d, v) in dst.iter_mut().zip(&l.s) {
                            *d += p[y] * v;
                        }
                    }
                }
                let acc = acc.get_or_insert_with(|| {
                    h_part
                        .iter()
                        .zip(&s_part)
                        .map(|(h, s)| (vec![0.0; h.len()], vec![0.0; s.len()]))
                        .collect()
                });
                for ((ah, as_), (h, s)) in acc.iter_mut().zip(h_part.iter().zip(&s_part)) {
                    ah.iter_mut().zip(h).for_each(|(a, v)| *a += v / m as f64);
                    as_.iter_mut().zip(s).for_each(|(a, v)| *a += v / m as f64);
                }
            }
            let kinds: Vec<(usize, BlockKind)> = model
                .layers()
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.capture_kind().map(|k| (i, k.into())))
                .collect();
            acc.unwrap_or_default()
                .into_iter()
                .zip(kinds)
                .map(|((h, s), (layer, kind))| crate::kfactor::LayerFactors { layer, kind, h, s })
                .collect()
        }
    };
    let blocks = factors
        .into_iter()
        .map(|f| {
            let diag = match f.kind {
                BlockKind::Kronecker => vec![kron_diag(&f.h, &f.s)?],
                BlockKind::Normalization => vec![f.h.iter().zip(&f.s).map(|(h, s)| h * s).collect(), f.s.clone()],
            };
            Ok(FisherBlock {
                layer: f.layer,
                kind: f.kind,
                diag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FisherDiag { blocks, n_samples: 0 })
}

/// Dense Kronecker product `A ⊗ B`: entry `(i·q + k, j·q + l) = A[i,j]·B[k,l]`.
pub fn kron_dense(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        bail!(Dimension, "kron_dense expects matrices");
    }
    let (p, r) = (a.rows(), a.cols());
    let (q, s) = (b.rows(), b.cols());
    let cols = r * s;
    let mut out = vec![0.0; p * q * cols];
    for i in 0..p {
        for j in 0..r {
            let aij = a.at(i, j);
            for k in 0..q {
                for l in 0..s {
                    out[(i * q + k) * cols + j * s + l] = aij * b.at(k, l);
                }
            }
        }
    }
    Tensor::from_parts(vec![p * q, cols], out)
}

fn second_moment(m: &Tensor) -> Result<Tensor> {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![0.0; r * r];
    let d = m.data();
    for i in 0..r {
        for j in 0..r {
            out[i * r + j] = (0..c).map(|n| d[i * c + n] * d[j * c + n]).sum::<f64>() / c as f64;
        }
    }
    Tensor::from_parts(vec![r, r], out)
}

/// Dense factors `ℋ = h̄h̄ᵀ/N` and `𝒮 = ssᵀ/N` over a capture's `N` columns.
pub fn dense_factors(capture: &LayerCapture) -> Result<(Tensor, Tensor)> {
    if capture.h.cols() != capture.s.cols() || capture.h.cols() == 0 {
        bail!(Dimension, "capture h/s column counts disagree");
    }
    Ok((second_moment(&capture.h)?, second_moment(&capture.s)?))
}

/// Full `ℋ ⊗ 𝒮` for one weight layer, `ℋ = h̄h̄ᵀ/N`, `𝒮 = ssᵀ/N` over the
/// capture's `N` columns. Only for factor dimensions up to
/// [`DENSE_BLOCK_GUARD`].
pub fn kfac_block_dense(capture: &LayerCapture) -> Result<Tensor> {
    if capture.kind == CaptureKind::Norm {
        bail!(Unsupported, "dense Kronecker blocks are defined for weight layers only");
    }
    let (p_in, p_out) = (capture.h.rows(), capture.s.rows());
    if p_in > DENSE_BLOCK_GUARD || p_out > DENSE_BLOCK_GUARD {
        bail!(
            Size,
            "factor dims {p_in}×{p_out} exceed the dense guard {DENSE_BLOCK_GUARD}"
        );
    }
    let (h, s) = dense_factors(capture)?;
    kron_dense(&h, &s)
}

/// Mean absolute difference between a Fisher diagonal and an approximation
/// laid out the same way.
pub fn approximation_mae(fisher: &FisherDiag, approx: &[f64]) -> Result<f64> {
    let f = fisher.flatten();
    if f.len() != approx.len() {
        bail!(Length, "Fisher has {} entries, approximation {}", f.len(), approx.len());
    }
    if f.is_empty() {
        bail!(Input, "no entries to compare");
    }
    Ok(f.iter().zip(approx).map(|(a, b)| (a - b).abs()).sum::<f64>() / f.len() as f64)
}

/// Per-layer MAE between two diagonals with the same layout.
pub fn layer_mae(fisher: &FisherDiag, approx: &FisherDiag) -> Result<Vec<(usize, f64)>> {
    if fisher.blocks.len() != approx.blocks.len() {
        bail!(Length, "{} vs {} blocks", fisher.blocks.len(), approx.blocks.len());
    }
    fisher
        .blocks
        .iter()
        .zip(&approx.blocks)
        .map(|(a, b)| {
            let x: Vec<f64> = a.diag.iter().flatten().copied().collect();
            let y: Vec<f64> = b.diag.iter().flatten().copied().collect();
            if a.layer != b.layer || x.len() != y.len() || x.is_empty() {
                bail!(Length, "block for layer {} does not line up", a.layer);
            }
            Ok((a.layer, x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeRecord {
    pub epoch: usize,
    pub layer: usize,
    pub mae: f64,
}

/// Writes the `epoch,layer,mae` series.
pub fn write_mae_csv<W: Write>(w: W, rows: &[MaeRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "layer", "mae"])?;
    for r in rows {
        wr.write_record(&[r.epoch.to_string(), r.layer.to_string(), format!("{:e}", r.mae)])?;
    }
    wr.flush()?;
    Ok(())
}
