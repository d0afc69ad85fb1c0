use adafisher::diagnostics::{
    factor_snapshot, fft2, fim_hist_stats, gershgorin, jacobi_eigen, offdiag_noise, pca2, perturb_offdiag, quantile,
    snr, spectral_snr, write_discs_csv, write_fim_stats_csv, FimStatsRow, Snapshot, TrajectoryLog,
};
use adafisher::nn::{LayerSpec, Loss, Model, Targets};
use adafisher::rng::Rng;
use adafisher::tensor::Tensor;
use adafisher::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn symmetric(seed: u64, n: usize) -> Tensor {
    let mut rng = Rng::new(seed);
    let mut a = Tensor::zeros(&[n, n]).unwrap();
    for i in 0..n {
        for j in i..n {
            let v = rng.standard_normal();
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    a
}

fn na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jacobi_matches_nalgebra(n in 1usize..10, seed in any::<u64>()) {
        let a = symmetric(seed, n);
        let ours = jacobi_eigen(&a).unwrap();
        let mut theirs: Vec<f64> = na(&a).symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(|x, y| y.total_cmp(x));
        for (p, q) in ours.values.iter().zip(&theirs) {
            prop_assert!((p - q).abs() < 1e-9 * (1.0 + q.abs()));
        }
        // A·v = λ·v for every returned pair.
        for c in 0..n {
            for i in 0..n {
                let av: f64 = (0..n).map(|k| a.at(i, k) * ours.vectors.at(k, c)).sum();
                prop_assert!((av - ours.values[c] * ours.vectors.at(i, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn eigenvalues_lie_in_discs(n in 1usize..10, seed in any::<u64>()) {
        prop_assert_eq!(gershgorin(&symmetric(seed, n)).unwrap().contained, Some(true));
    }

    /// Weyl: no eigenvalue moves further than the noise's spectral norm.
    #[test]
    fn perturbation_obeys_weyl(n in 2usize..9, seed in any::<u64>(), sigma in 1e-4f64..1e-1) {
        let a = symmetric(seed, n);
        let p = perturb_offdiag(&a, sigma, seed ^ 1).unwrap();
        let e = offdiag_noise(n, sigma, seed ^ 1).unwrap();
        let norm2 = na(&e).singular_values().max();
        let before = jacobi_eigen(&a).unwrap().values;
        let after = jacobi_eigen(&a.zip_map(&e, |x, y| x + y).unwrap()).unwrap().values;
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() <= norm2 + 1e-9);
        }
        prop_assert!(p.max_shift() <= norm2 + 1e-9);
    }

    #[test]
    fn snr_is_scale_invariant(n in 2usize..7, seed in any::<u64>(), c in 0.01f64..100.0) {
        let a = symmetric(seed, n);
        let s1 = snr(&a, &a).unwrap();
        let s2 = snr(&a.scale(c), &a.scale(c)).unwrap();
        prop_assert!((s1.db - s2.db).abs() < 1e-9);
    }

    #[test]
    fn fft_matches_direct_dft(m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let a = Rng::new(seed).normal(&[m, n]).unwrap();
        let f = fft2(&a).unwrap();
        let tau = std::f64::consts::TAU;
        for u in 0..m {
            for v in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for x in 0..m {
                    for y in 0..n {
                        let ang = -tau * ((u * x) as f64 / m as f64 + (v * y) as f64 / n as f64);
                        re += a.at(x, y) * ang.cos();
                        im += a.at(x, y) * ang.sin();
                    }
                }
                let z = f.at(u, v);
                prop_assert!((z.re - re).abs() < 1e-9 && (z.im - im).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn triangular_and_general_matrices() {
    let tri = Tensor::matrix(3, 3, vec![2.0, 1.0, 0.5, 0.0, -1.0, 3.0, 0.0, 0.0, 4.0]).unwrap();
    let d = gershgorin(&tri).unwrap();
    assert_eq!(d.eigenvalues, Some(vec![2.0, -1.0, 4.0]));
    assert_eq!(d.contained, Some(true));
    assert_eq!(d.radii, vec![1.5, 3.0, 0.0]);
    assert!(d.dominance[2].is_infinite());

    let general = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(gershgorin(&general).unwrap().contained, None);
    assert!(matches!(jacobi_eigen(&general), Err(Error::Input(_))));
    assert!(matches!(gershgorin(&Tensor::zeros(&[2, 3]).unwrap()), Err(Error::Dimension(_))));
}

#[test]
fn diagonal_matrix_has_infinite_snr() {
    let d = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    let s = snr(&d, &d).unwrap();
    assert!(s.infinite && s.db.is_infinite());
    // The DFT of a diagonal matrix is not diagonal.
    assert!(!spectral_snr(&d).unwrap().infinite);
}

#[test]
fn pca_of_independent_axes_has_diagonal_covariance() {
    let mut rng = Rng::new(3);
    let n = 400;
    let mut rows = Vec::with_capacity(n * 3);
    for _ in 0..n {
        rows.extend([3.0 * rng.standard_normal(), 0.2 * rng.standard_normal(), 1.0 * rng.standard_normal()]);
    }
    let x = Tensor::matrix(n, 3, rows).unwrap();
    let p = pca2(&x).unwrap();
    assert!(p.variances[0] >= p.variances[1]);
    assert!(p.components[0][0] > 0.99);
    assert!(p.components[1][2] > 0.99);
    // Projected coordinates are uncorrelated with the fitted variances.
    let proj = &p.projection;
    let cov = |a: usize, b: usize| (0..n).map(|r| proj.at(r, a) * proj.at(r, b)).sum::<f64>() / (n - 1) as f64;
    assert!(cov(0, 1).abs() < 1e-9);
    assert!((cov(0, 0) - p.variances[0]).abs() < 1e-9 * p.variances[0]);
    assert!((cov(1, 1) - p.variances[1]).abs() < 1e-9 * p.variances[0]);
}

#[test]
fn hist_stats_against_hand_values() {
    let v = [4.0, 1.0, 3.0, 2.0, 5.0];
    let s = fim_hist_stats(&v).unwrap();
    assert_eq!(s.mean, 3.0);
    assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!((s.q25, s.q50, s.q75), (2.0, 3.0, 4.0));
    assert!((s.q01 - 1.04).abs() < 1e-12);
    assert!((quantile(&[0.0, 10.0], 0.99) - 9.9).abs() < 1e-12);
    assert_eq!(fim_hist_stats(&[0.1; 7]).unwrap().std, 0.0);
    assert!(fim_hist_stats(&[]).is_err());
    assert!(fim_hist_stats(&[1.0, f64::NAN]).is_err());

    let mut buf = Vec::new();
    write_fim_stats_csv(
        &mut buf,
        &[FimStatsRow {
            step: 3,
            layer: 0,
            source: "adafisher".into(),
            stats: s,
        }],
    )
    .unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,layer,source,mean,std,q01,q25,q50,q75,q99\n3,0,adafisher,3e0,"));
}

#[test]
fn trajectory_round_trips_through_csv() {
    let mut log = TrajectoryLog::default();
    for (e, w) in [(1, [0.5, -0.25]), (2, [0.125, 1e-9]), (5, [3.0, 4.0])] {
        log.record(e, &w, 1.0 / e as f64).unwrap();
    }
    assert!(log.record(5, &[0.0, 0.0], 0.0).is_err());
    assert!(log.record(6, &[0.0], 0.0).is_err());
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf.clone()).unwrap().starts_with("epoch,w1,w2,loss\n"));
    assert_eq!(TrajectoryLog::read_csv(buf.as_slice()).unwrap(), log);
}

#[test]
fn snapshot_round_trip_and_disc_export() {
    let mut rng = Rng::new(8);
    let model = Model::from_specs(
        &[3],
        &[LayerSpec::Dense { out: 4, bias: true }, LayerSpec::Relu, LayerSpec::Dense { out: 2, bias: true }],
        Loss::CrossEntropy,
        &mut rng,
    )
    .unwrap();
    let x = rng.normal(&[6, 3]).unwrap();
    let snap = factor_snapshot(&model, &x, &Targets::Labels(vec![0, 1, 0, 1, 1, 0])).unwrap();
    assert_eq!(snap.matrices.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.json");
    snap.save(&path).unwrap();
    let back = Snapshot::load(&path).unwrap();
    assert_eq!(back, snap);

    let h = back.matrices[0].to_tensor().unwrap();
    assert_eq!(h.shape(), &[4, 4]);
    let d = gershgorin(&h).unwrap();
    assert_eq!(d.contained, Some(true));
    let mut buf = Vec::new();
    write_discs_csv(&mut buf, &[(0, &d)]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
}
