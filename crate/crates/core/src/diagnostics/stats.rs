//! Distribution summaries of Fisher (or second-moment) diagonals.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub q01: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q99: f64,
}

/// Quantile with linear interpolation between order statistics at
/// position `q·(n−1)`. `sorted` must be ascending.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn fim_hist_stats(values: &[f64]) -> Result<HistStats> {
    if values.is_empty() {
        bail!(Input, "no values to summarize");
    }
    if values.iter().any(|v| !v.is_finite()) {
        bail!(Input, "non-finite value in diagonal");
    }
    let n = values.len() as f64;
    // Shifted by the first value so constant inputs give exactly zero spread.
    let k = values[0];
    let dm = values.iter().map(|v| v - k).sum::<f64>() / n;
    let mean = k + dm;
    let std = (values.iter().map(|v| (v - k - dm).powi(2)).sum::<f64>() / n).sqrt();
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(HistStats {
        mean,
        std,
        q01: quantile(&s, 0.01),
        q25: quantile(&s, 0.25),
        q50: quantile(&s, 0.50),
        q75: quantile(&s, 0.75),
        q99: quantile(&s, 0.99),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FimStatsRow {
    pub step: u64,
    pub layer: usize,
    /// Which diagonal was summarized, e.g. `adafisher` or `adam`.
    pub source: String,
    #[serde(flatten)]
    pub stats: HistStats,
}

/// `step,layer,source,mean,std,q01,q25,q50,q75,q99` rows.
pub fn write_fim_stats_csv<W: Write>(w: W, rows: &[FimStatsRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "layer", "source", "mean", "std", "q01", "q25", "q50", "q75", "q99"])?;
    for r in rows {
        let s = &r.stats;
        let mut rec = vec![r.step.to_string(), r.layer.to_string(), r.source.clone()];
        rec.extend([s.mean, s.std, s.q01, s.q25, s.q50, s.q75, s.q99].iter().map(|v| format!("{v:e}")));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_has_zero_spread() {
        let s = fim_hist_stats(&[0.4; 9]).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!((s.q01, s.q99), (0.4, 0.4));
    }

    #[test]
    fn two_points() {
        let s = fim_hist_stats(&[0.0, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 0.5);
        assert_eq!(s.q25, 0.25);
    }

    #[test]
    fn empty_rejected() {
        assert!(fim_hist_stats(&[]).is_err());
    }
}
