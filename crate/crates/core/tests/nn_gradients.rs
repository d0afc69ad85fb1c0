use adafisher::nn::{
    finite_diff_grad, max_relative_error, CaptureKind, LayerSpec, Loss, Mode, Model, Targets,
};
use adafisher::rng::Rng;
use adafisher::tensor::{matmul, Tensor};
use proptest::prelude::*;

fn labels(rng: &mut Rng, m: usize, c: usize) -> Targets {
    Targets::Labels((0..m).map(|_| rng.below(c)).collect())
}

fn check(input: &[usize], specs: &[LayerSpec], loss: Loss, mode: Mode, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut model = Model::from_specs(input, specs, loss, &mut rng).unwrap();
    let mut theta = model.flat_params();
    theta.iter_mut().for_each(|v| *v += 0.1 * rng.standard_normal());
    model.set_flat_params(&theta).unwrap();
    let m = 5;
    let mut shape = vec![m];
    shape.extend_from_slice(input);
    let x = rng.normal(&shape).unwrap();
    let out_dim = model.output_shape()[0];
    let y = match loss {
        Loss::CrossEntropy => labels(&mut rng, m, out_dim),
        Loss::Mse => Targets::Values(rng.normal(&[m, out_dim]).unwrap()),
    };
    let analytic = model.clone().step(&x, &y, mode).unwrap().grads;
    let numeric = finite_diff_grad(&model, &x, &y, 1e-5, mode).unwrap();
    max_relative_error(&analytic, &numeric, 1e-4)
}

#[test]
fn dense_tanh_mse() {
    let specs = [
        LayerSpec::Dense { out: 5, bias: true },
        LayerSpec::Tanh,
        LayerSpec::Dense { out: 2, bias: false },
    ];
    assert!(check(&[4], &specs, Loss::Mse, Mode::Train, 1) < 1e-6);
}

#[test]
fn conv_pool_eval() {
    let specs = [
        LayerSpec::Conv2d {
            out_channels: 2,
            kernel: (2, 2),
            stride: (1, 1),
            pad: (0, 0),
            bias: true,
        },
        LayerSpec::MaxPool {
            kernel: (2, 2),
            stride: None,
        },
        LayerSpec::Flatten,
        LayerSpec::Dense { out: 3, bias: true },
    ];
    assert!(check(&[1, 5, 5], &specs, Loss::CrossEntropy, Mode::Eval, 2) < 1e-6);
}

#[test]
fn strided_padded_conv() {
    let specs = [
        LayerSpec::Conv2d {
            out_channels: 2,
            kernel: (3, 2),
            stride: (2, 1),
            pad: (1, 1),
            bias: false,
        },
        LayerSpec::Tanh,
        LayerSpec::Flatten,
        LayerSpec::Dense { out: 2, bias: true },
    ];
    assert!(check(&[2, 5, 4], &specs, Loss::Mse, Mode::Train, 3) < 1e-6);
}

#[test]
fn batch_norm_dense_train() {
    let specs = [
        LayerSpec::Dense { out: 4, bias: true },
        LayerSpec::BatchNorm,
        LayerSpec::Tanh,
        LayerSpec::Dense { out: 3, bias: true },
    ];
    assert!(check(&[3], &specs, Loss::CrossEntropy, Mode::Train, 4) < 1e-6);
}

#[test]
fn layer_norm_stack() {
    let specs = [
        LayerSpec::Dense { out: 6, bias: true },
        LayerSpec::LayerNorm,
        LayerSpec::Tanh,
        LayerSpec::Dense { out: 3, bias: true },
    ];
    assert!(check(&[4], &specs, Loss::CrossEntropy, Mode::Train, 5) < 1e-6);
}

/// Mean gradient of a dense or conv layer is `(1/M)·s·h̄ᵀ`.
#[test]
fn captures_reproduce_weight_gradients() {
    let specs = [
        LayerSpec::Conv2d {
            out_channels: 2,
            kernel: (2, 2),
            stride: (1, 1),
            pad: (0, 0),
            bias: true,
        },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { out: 3, bias: true },
    ];
    let mut rng = Rng::new(9);
    let mut model = Model::from_specs(&[1, 4, 4], &specs, Loss::CrossEntropy, &mut rng).unwrap();
    let m = 4;
    let x = rng.normal(&[m, 1, 4, 4]).unwrap();
    let y = labels(&mut rng, m, 3);
    let out = model.step(&x, &y, Mode::Train).unwrap();
    assert_eq!(out.captures.len(), 2);
    for (cap, grad) in out.captures.iter().zip(&out.grads) {
        assert!(matches!(cap.kind, CaptureKind::Conv | CaptureKind::Dense));
        let g = matmul(&cap.s, &cap.h.transpose().unwrap()).unwrap().scale(1.0 / m as f64);
        assert!(g.max_abs_diff(grad).unwrap() < 1e-12);
    }
    assert_eq!(out.captures[0].spatial_count, 9);
    assert_eq!(out.captures[0].h.cols(), m * 9);
}

#[test]
fn eval_mode_uses_running_statistics() {
    let specs = [LayerSpec::BatchNorm];
    let mut model = Model::from_specs(&[2], &specs, Loss::Mse, &mut Rng::new(0)).unwrap();
    let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let eval = model.forward(&x, Mode::Eval).unwrap();
    // Fresh running stats are mean 0, var 1.
    for (a, b) in eval.data().iter().zip(x.data()) {
        assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
    let train = model.forward(&x, Mode::Train).unwrap();
    assert!((train.data()[0] + train.data()[2]).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_mlps_pass_gradcheck(hidden in 1usize..6, out in 1usize..4, seed in any::<u64>()) {
        let specs = [
            LayerSpec::Dense { out: hidden, bias: true },
            LayerSpec::Tanh,
            LayerSpec::Dense { out, bias: true },
        ];
        prop_assert!(check(&[3], &specs, Loss::Mse, Mode::Train, seed) < 1e-6);
    }
}
