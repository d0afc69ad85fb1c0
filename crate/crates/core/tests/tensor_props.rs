use adafisher::fisher::kron_dense;
use adafisher::rng::Rng;
use adafisher::tensor::{col2im, im2col, kron_diag, matmul, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..9, 1usize..9, 1usize..9, any::<u64>())
}

proptest! {
    #[test]
    fn matmul_matches_nalgebra((m, k, n, seed) in dims()) {
        let mut rng = Rng::new(seed);
        let a = rng.normal(&[m, k]).unwrap();
        let b = rng.normal(&[k, n]).unwrap();
        let ours = matmul(&a, &b).unwrap();
        let theirs = to_na(&a) * to_na(&b);
        for i in 0..m {
            for j in 0..n {
                prop_assert!((ours.at(i, j) - theirs[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_involution((m, n, _, seed) in dims()) {
        let a = Rng::new(seed).normal(&[m, n]).unwrap();
        prop_assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }

    #[test]
    fn kron_diag_is_diagonal_of_kron((p, q, _, seed) in dims()) {
        let mut rng = Rng::new(seed);
        let a: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
        let b: Vec<f64> = (0..q).map(|_| rng.standard_normal()).collect();
        let diag = |v: &[f64]| {
            let mut t = Tensor::zeros(&[v.len(), v.len()]).unwrap();
            for (i, x) in v.iter().enumerate() {
                t.set(i, i, *x);
            }
            t
        };
        let dense = kron_dense(&diag(&a), &diag(&b)).unwrap();
        let d = kron_diag(&a, &b).unwrap();
        prop_assert_eq!(d.len(), p * q);
        for (i, v) in d.iter().enumerate() {
            prop_assert_eq!(*v, dense.at(i, i));
        }
    }

    /// `⟨im2col(x), Y⟩ = ⟨x, col2im(Y)⟩`.
    #[test]
    fn col2im_is_adjoint(
        c in 1usize..3, h in 2usize..7, w in 2usize..7,
        kh in 1usize..4, kw in 1usize..4, s in 1usize..3, p in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(kh <= h + 2 * p && kw <= w + 2 * p);
        let mut rng = Rng::new(seed);
        let x = rng.normal(&[c, h, w]).unwrap();
        let (cols, _) = im2col(&x, (kh, kw), (s, s), (p, p)).unwrap();
        let y = rng.normal(cols.shape()).unwrap();
        let back = col2im(&y, (c, h, w), (kh, kw), (s, s), (p, p)).unwrap();
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }
}

#[test]
fn im2col_convolution_matches_direct_sum() {
    let mut rng = Rng::new(3);
    let (c, h, w, o, k, s, p) = (2, 6, 5, 3, 3, 2, 1);
    let x = rng.normal(&[c, h, w]).unwrap();
    let kernel = rng.normal(&[o, c * k * k]).unwrap();
    let (cols, t) = im2col(&x, (k, k), (s, s), (p, p)).unwrap();
    let y = matmul(&kernel, &cols).unwrap();
    let out_h = (h + 2 * p - k) / s + 1;
    let out_w = (w + 2 * p - k) / s + 1;
    assert_eq!(t, out_h * out_w);
    for oc in 0..o {
        for r in 0..out_h {
            for q in 0..out_w {
                let mut acc = 0.0;
                for ic in 0..c {
                    for a in 0..k {
                        for b in 0..k {
                            let (ih, iw) = ((r * s + a) as isize - p as isize, (q * s + b) as isize - p as isize);
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            let xv = x.data()[ic * h * w + ih as usize * w + iw as usize];
                            acc += kernel.at(oc, ic * k * k + a * k + b) * xv;
                        }
                    }
                }
                assert!((y.at(oc, r * out_w + q) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn constructors_reject_bad_shapes() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    assert!(matmul(&Tensor::zeros(&[2, 3]).unwrap(), &Tensor::zeros(&[2, 3]).unwrap()).is_err());
    assert!(im2col(&Tensor::zeros(&[1, 2, 2]).unwrap(), (3, 3), (1, 1), (0, 0)).is_err());
}
