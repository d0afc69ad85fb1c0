use serde::{Deserialize, Serialize};

use super::layer::{
    Activation, BatchNorm, Cache, Conv2d, Dense, Layer, LayerCapture, LayerNorm, MaxPool, Mode,
};
use super::loss::{Loss, Targets};
use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Declarative layer description; input sizes are inferred when the model is
/// built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        out: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        out_channels: usize,
        kernel: (usize, usize),
        #[serde(default = "unit_pair")]
        stride: (usize, usize),
        #[serde(default)]
        pad: (usize, usize),
        #[serde(default = "yes")]
        bias: bool,
    },
    BatchNorm,
    LayerNorm,
    Relu,
    Tanh,
    Identity,
    Flatten,
    MaxPool {
        kernel: (usize, usize),
        stride: Option<(usize, usize)>,
    },
}

fn yes() -> bool {
    true
}

fn unit_pair() -> (usize, usize) {
    (1, 1)
}

impl LayerSpec {
    pub fn build(&self, input: &[usize], rng: &mut Rng) -> Result<Layer> {
        Ok(match *self {
            LayerSpec::Dense { out, bias } => match *input {
                [n] => Layer::Dense(Dense::new(n, out, bias, rng)?),
                _ => bail!(Dimension, "dense layer needs flat input, got {input:?}"),
            },
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                pad,
                bias,
            } => match *input {
                [c, _, _] => Layer::Conv2d(Conv2d::new(c, out_channels, kernel, stride, pad, bias, rng)?),
                _ => bail!(Dimension, "conv2d needs C×H×W input, got {input:?}"),
            },
            LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(input[0])?),
            LayerSpec::LayerNorm => match *input {
                [n] => Layer::LayerNorm(LayerNorm::new(n)?),
                _ => bail!(Dimension, "layer norm needs flat input, got {input:?}"),
            },
            LayerSpec::Relu => Layer::Activation(Activation::Relu),
            LayerSpec::Tanh => Layer::Activation(Activation::Tanh),
            LayerSpec::Identity => Layer::Activation(Activation::Identity),
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool(MaxPool {
                kernel,
                stride: stride.unwrap_or(kernel),
            }),
        })
    }
}

#[derive(Debug, Clone)]
struct Trace {
    caches: Vec<Cache>,
    output_shape: Vec<usize>,
}

/// Result of a backward pass: mean gradients in [`Model::params`] order and
/// one capture per parameterized layer.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Vec<Tensor>,
    pub captures: Vec<LayerCapture>,
}

/// Everything one training step needs from the network.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub output: Tensor,
    pub grads: Vec<Tensor>,
    pub captures: Vec<LayerCapture>,
}

/// Identifies a parameter tensor: owning layer and its role there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    pub role: ParamRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Weights with the bias folded in as the last column.
    Theta,
    Scale,
    Shift,
}

/// Feed-forward network with a single loss.
#[derive(Debug, Clone)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    loss: Loss,
    trace: Option<Trace>,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, loss: Loss) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            bail!(Dimension, "invalid input shape {input_shape:?}");
        }
        let mut shape = input_shape.clone();
        for (i, l) in layers.iter().enumerate() {
            shape = l
                .output_shape(&shape)
                .map_err(|e| crate::Error::Dimension(format!("layer {i} ({}): {e}", l.name())))?;
        }
        if loss == Loss::CrossEntropy && shape.len() != 1 {
            bail!(Dimension, "cross entropy needs flat logits, network emits {shape:?}");
        }
        Ok(Self {
            input_shape,
            layers,
            loss,
            trace: None,
        })
    }

    pub fn from_specs(input_shape: &[usize], specs: &[LayerSpec], loss: Loss, rng: &mut Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            let l = s.build(&shape, rng)?;
            shape = l.output_shape(&shape)?;
            layers.push(l);
        }
        Self::new(input_shape.to_vec(), layers, loss)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.trace = None;
        &mut self.layers
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Dense(_) | Layer::Conv2d(_) => out.push(ParamSlot {
                    layer: i,
                    role: ParamRole::Theta,
                }),
                Layer::BatchNorm(_) | Layer::LayerNorm(_) => {
                    out.push(ParamSlot {
                        layer: i,
                        role: ParamRole::Scale,
                    });
                    out.push(ParamSlot {
                        layer: i,
                        role: ParamRole::Shift,
                    });
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Flattened copy of every parameter, in [`Model::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            bail!(Dimension, "expected {} parameters, got {}", self.param_count(), flat.len());
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.trace = None;
        Ok(())
    }

    /// Runs the network on a batch (`[M, ...input_shape]`) and records the
    /// per-layer state [`Model::backward`] needs.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        if batch.ndim() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            bail!(
                Dimension,
                "batch shape {:?} does not match input shape {:?}",
                batch.shape(),
                self.input_shape
            );
        }
        self.trace = None;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for l in self.layers.iter_mut() {
            let (y, c) = l.forward(&x, mode)?;
            caches.push(c);
            x = y;
        }
        self.trace = Some(Trace {
            caches,
            output_shape: x.shape().to_vec(),
        });
        Ok(x)
    }

    /// Backpropagates `loss_grad` (gradient of the mini-batch mean loss with
    /// respect to the network output) through the last forward pass.
    pub fn backward(&self, loss_grad: &Tensor) -> Result<Backward> {
        let Some(trace) = &self.trace else {
            bail!(State, "backward called before forward");
        };
        if loss_grad.shape() != trace.output_shape.as_slice() {
            bail!(
                Dimension,
                "loss gradient shape {:?} vs output {:?}",
                loss_grad.shape(),
                trace.output_shape
            );
        }
        let mut grads_rev: Vec<Vec<Tensor>> = Vec::new();
        let mut captures = Vec::new();
        let mut g = loss_grad.clone();
        for (i, (l, c)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            let lg = l.backward(i, c, &g)?;
            if !lg.params.is_empty() {
                grads_rev.push(lg.params);
            }
            if let Some(cap) = lg.capture {
                captures.push(cap);
            }
            g = lg.input_grad;
        }
        captures.reverse();
        grads_rev.reverse();
        Ok(Backward {
            grads: grads_rev.into_iter().flatten().collect(),
            captures,
        })
    }

    /// Forward, loss and backward in one call.
    pub fn step(&mut self, batch: &Tensor, targets: &Targets, mode: Mode) -> Result<StepOutput> {
        let output = self.forward(batch, mode)?;
        let (loss, grad) = self.loss.evaluate(&output, targets)?;
        let Backward { grads, captures } = self.backward(&grad)?;
        Ok(StepOutput {
            loss,
            output,
            grads,
            captures,
        })
    }

    /// Mean loss over `batch` in the given mode, without keeping a trace.
    pub fn loss_value(&mut self, batch: &Tensor, targets: &Targets, mode: Mode) -> Result<f64> {
        let out = self.forward(batch, mode)?;
        self.trace = None;
        Ok(self.loss.evaluate(&out, targets)?.0)
    }

    /// Eval-mode loss and (for classification) accuracy, in chunks.
    pub fn evaluate(&mut self, inputs: &Tensor, targets: &Targets, chunk: usize) -> Result<(f64, Option<f64>)> {
        let n = inputs.shape()[0];
        let chunk = chunk.max(1);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let x = inputs.select_rows(&idx)?;
            let t = targets.select(&idx)?;
            let out = self.forward(&x, Mode::Eval)?;
            let (l, _) = self.loss.evaluate(&out, &t)?;
            loss_sum += l * idx.len() as f64;
            if let Targets::Labels(labels) = &t {
                correct += argmax_rows(&out)
                    .iter()
                    .zip(labels)
                    .filter(|(p, y)| p == y)
                    .count();
            }
            start += chunk;
        }
        self.trace = None;
        let acc = matches!(targets, Targets::Labels(_)).then(|| correct as f64 / n as f64);
        Ok((loss_sum / n as f64, acc))
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.shape()[0])
        .map(|n| {
            let row = t.row(n);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::LayerNorm;

    fn dense(theta: Vec<f64>, out: usize, bias: bool) -> Layer {
        let cols = theta.len() / out;
        Layer::Dense(Dense::from_theta(Tensor::matrix(out, cols, theta).unwrap(), bias).unwrap())
    }

    #[test]
    fn identity_network() {
        let mut m = Model::new(
            vec![2],
            vec![dense(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, true)],
            Loss::Mse,
        )
        .unwrap();
        let x = Tensor::matrix(1, 2, vec![0.7, -1.3]).unwrap();
        assert_eq!(m.forward(&x, Mode::Train).unwrap(), x);
    }

    #[test]
    fn dense_forced_arithmetic() {
        let mut m = Model::new(vec![1], vec![dense(vec![2.0, 3.0], 1, true)], Loss::Mse).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert_eq!(m.forward(&x, Mode::Train).unwrap().data(), &[5.0]);
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut m = Model::new(
            vec![3],
            vec![Layer::LayerNorm(LayerNorm::with_eps(3, 0.0).unwrap())],
            Loss::Mse,
        )
        .unwrap();
        let y = m
            .forward(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), Mode::Train)
            .unwrap();
        let mean = y.sum() / 3.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-15);
    }

    #[test]
    fn square_of_theta() {
        // J(θ) = (θ·1 − 0)² → dJ/dθ = 2θ.
        let mut m = Model::new(vec![1], vec![dense(vec![3.0], 1, false)], Loss::Mse).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let t = Targets::Values(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let out = m.step(&x, &t, Mode::Train).unwrap();
        assert_eq!(out.loss, 9.0);
        assert_eq!(out.grads[0].data(), &[6.0]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let m = Model::new(vec![1], vec![dense(vec![3.0], 1, false)], Loss::Mse).unwrap();
        let g = Tensor::zeros(&[1, 1]).unwrap();
        assert!(matches!(m.backward(&g), Err(crate::Error::State(_))));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_grads() {
        let mut rng = Rng::new(2);
        let specs = [
            LayerSpec::Dense { out: 4, bias: true },
            LayerSpec::Tanh,
            LayerSpec::LayerNorm,
            LayerSpec::Dense { out: 3, bias: true },
        ];
        let mut m = Model::from_specs(&[5], &specs, Loss::CrossEntropy, &mut rng).unwrap();
        let x = rng.normal(&[4, 5]).unwrap();
        m.forward(&x, Mode::Train).unwrap();
        let b = m.backward(&Tensor::zeros(&[4, 3]).unwrap()).unwrap();
        assert!(b.grads.iter().all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let mut rng = Rng::new(0);
        let specs = [LayerSpec::Dense { out: 3, bias: true }, LayerSpec::BatchNorm];
        let mut m = Model::from_specs(&[2], &specs, Loss::Mse, &mut rng).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(m.forward(&x, Mode::Train), Err(crate::Error::Input(_))));
        assert!(m.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn chain_validation() {
        let mut rng = Rng::new(0);
        let l1 = Layer::Dense(Dense::new(3, 4, true, &mut rng).unwrap());
        let l2 = Layer::Dense(Dense::new(5, 2, true, &mut rng).unwrap());
        assert!(Model::new(vec![3], vec![l1, l2], Loss::Mse).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"[{"type":"conv2d","out_channels":2,"kernel":[3,3],"pad":[1,1]},
                       {"type":"relu"},{"type":"max_pool","kernel":[2,2]},{"type":"flatten"},
                       {"type":"dense","out":10}]"#;
        let specs: Vec<LayerSpec> = serde_json::from_str(json).unwrap();
        let mut rng = Rng::new(1);
        let m = Model::from_specs(&[1, 6, 6], &specs, Loss::CrossEntropy, &mut rng).unwrap();
        assert_eq!(m.output_shape(), vec![10]);
        assert_eq!(m.param_count(), 2 * 10 + 10 * (18 + 1));
    }
}
