//! Curvature and training diagnostics: Gershgorin discs, spectral
//! perturbation, 2-D DFT and SNR, diagonal statistics, PCA trajectories.

mod gershgorin;
mod linalg;
mod spectral;
mod stats;
mod trajectory;

pub use gershgorin::{
    gershgorin, offdiag_noise, perturb_offdiag, write_discs_csv, write_spectra_csv, DiscSet, Perturbation,
    CONTAINMENT_TOL, DEFAULT_SIGMA,
};
pub use linalg::{is_symmetric, jacobi_eigen, SymEig, JACOBI_TOL};
pub use spectral::{fft2, snr, spectral_snr, write_snr_csv, ComplexMatrix, Snr};
pub use stats::{fim_hist_stats, quantile, write_fim_stats_csv, FimStatsRow, HistStats};
pub use trajectory::{pca2, record_trajectory, Pca2, TrajectoryLog, TrajectoryRow};
mod snapshot;

pub use snapshot::{factor_snapshot, NamedMatrix, Snapshot};
