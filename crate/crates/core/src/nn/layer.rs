use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::{matmul, ConvGeometry, Tensor};

/// Pointwise nonlinearity. ReLU uses subgradient 0 at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative given the pre-activation `a` and the output `y`.
    fn derivative(self, a: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Training mode uses batch statistics in BatchNorm; eval mode uses the
/// running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer. `theta` is `out × (in + 1)` with the bias as the
/// last column, or `out × in` without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
    pub theta: Tensor,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn new(in_features: usize, out_features: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let cols = in_features + usize::from(bias);
        let std = (2.0 / in_features as f64).sqrt();
        let mut theta = Tensor::zeros(&[out_features, cols])?;
        for k in 0..out_features {
            for j in 0..in_features {
                theta.set(k, j, std * rng.standard_normal());
            }
        }
        Ok(Self {
            in_features,
            out_features,
            bias,
            theta,
        })
    }

    pub fn from_theta(theta: Tensor, bias: bool) -> Result<Self> {
        if theta.ndim() != 2 || theta.cols() < 1 + usize::from(bias) {
            bail!(Dimension, "dense theta must be out × (in + bias)");
        }
        Ok(Self {
            in_features: theta.cols() - usize::from(bias),
            out_features: theta.rows(),
            bias,
            theta,
        })
    }
}

/// 2-D convolution with zero padding. `theta` is
/// `out_channels × (in_channels·kh·kw + 1)`, bias last.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub bias: bool,
    pub theta: Tensor,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel.0 * kernel.1;
        if fan_in == 0 || out_channels == 0 {
            bail!(Dimension, "empty convolution");
        }
        let cols = fan_in + usize::from(bias);
        let std = (2.0 / fan_in as f64).sqrt();
        let mut theta = Tensor::zeros(&[out_channels, cols])?;
        for k in 0..out_channels {
            for j in 0..fan_in {
                theta.set(k, j, std * rng.standard_normal());
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            bias,
            theta,
        })
    }

    fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new((self.in_channels, h, w), self.kernel, self.stride, self.pad)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }
}

/// Batch normalization over `[M, C]` or `[M, C, H, W]` inputs; statistics
/// per channel over batch and spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            scale: Tensor::ones(&[channels])?,
            shift: Tensor::zeros(&[channels])?,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        })
    }
}

/// Layer normalization over the feature axis of `[M, D]` inputs with a
/// per-feature affine transform.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub features: usize,
    pub eps: f64,
    pub scale: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn new(features: usize) -> Result<Self> {
        Self::with_eps(features, 1e-5)
    }

    /// `eps` may be zero; a sample with zero variance is then rejected at
    /// forward time.
    pub fn with_eps(features: usize, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            bail!(Config, "layer norm eps must be non-negative, got {eps}");
        }
        Ok(Self {
            features,
            eps,
            scale: Tensor::ones(&[features])?,
            shift: Tensor::zeros(&[features])?,
        })
    }
}

/// Max pooling without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    LayerNorm(LayerNorm),
    Activation(Activation),
    Flatten,
    MaxPool(MaxPool),
}

/// How a layer's curvature is factored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureKind {
    Dense,
    Conv,
    Norm,
}

/// Per-layer statistics harvested from one forward/backward pair.
///
/// `h` holds the layer inputs column-wise (homogeneous 1 appended as the last
/// row when the layer has a bias; normalized activations `x̂` for norm
/// layers). `s` holds per-sample pre-activation gradients `∇_a ℒ_n` in the
/// same column order: one column per sample, or per (sample, position) for
/// convolution and spatial batch norm. The mini-batch gradient is
/// `(1/M)·s·hᵀ` for dense and conv layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    pub layer: usize,
    pub kind: CaptureKind,
    pub h: Tensor,
    pub s: Tensor,
    /// Positions per sample sharing the parameters (`|T|`); 1 for dense.
    pub spatial_count: usize,
    pub batch: usize,
    pub has_bias: bool,
}

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Dense {
        h_bar: Tensor,
    },
    Conv {
        h_bar: Tensor,
        geo: ConvGeometry,
        batch: usize,
    },
    Norm {
        x_hat: Tensor,
        inv_std: Vec<f64>,
        training: bool,
    },
    Act {
        input: Tensor,
        output: Tensor,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Pool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
}

pub(crate) struct LayerGrad {
    pub input_grad: Tensor,
    pub params: Vec<Tensor>,
    pub capture: Option<LayerCapture>,
}

fn batch_dims(x: &Tensor, rank: usize, what: &str) -> Result<()> {
    if x.ndim() != rank {
        bail!(
            Dimension,
            "{what} expects rank-{rank} batch input, got shape {:?}",
            x.shape()
        );
    }
    Ok(())
}

/// Norm-layer channel index and column layout helpers for `[M, C, ...]`.
fn norm_layout(shape: &[usize]) -> (usize, usize, usize) {
    let m = shape[0];
    let c = shape[1];
    let hw: usize = shape[2..].iter().product();
    (m, c, hw)
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::LayerNorm(_) => "layer_norm",
            Layer::Activation(_) => "activation",
            Layer::Flatten => "flatten",
            Layer::MaxPool(_) => "max_pool",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.theta],
            Layer::Conv2d(c) => vec![&c.theta],
            Layer::BatchNorm(b) => vec![&b.scale, &b.shift],
            Layer::LayerNorm(l) => vec![&l.scale, &l.shift],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.theta],
            Layer::Conv2d(c) => vec![&mut c.theta],
            Layer::BatchNorm(b) => vec![&mut b.scale, &mut b.shift],
            Layer::LayerNorm(l) => vec![&mut l.scale, &mut l.shift],
            _ => vec![],
        }
    }

    /// Curvature block type, `None` for parameter-free layers.
    pub fn capture_kind(&self) -> Option<CaptureKind> {
        match self {
            Layer::Dense(_) => Some(CaptureKind::Dense),
            Layer::Conv2d(_) => Some(CaptureKind::Conv),
            Layer::BatchNorm(_) | Layer::LayerNorm(_) => Some(CaptureKind::Norm),
            _ => None,
        }
    }

    /// Lengths of the input-side and output-side factor diagonals.
    pub fn factor_dims(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Dense(d) => Some((d.in_features + usize::from(d.bias), d.out_features)),
            Layer::Conv2d(c) => Some((c.patch_len() + usize::from(c.bias), c.out_channels)),
            Layer::BatchNorm(b) => Some((b.channels, b.channels)),
            Layer::LayerNorm(l) => Some((l.features, l.features)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if input != [d.in_features] {
                    bail!(Dimension, "dense expects [{}], got {input:?}", d.in_features);
                }
                Ok(vec![d.out_features])
            }
            Layer::Conv2d(c) => match *input {
                [ch, h, w] if ch == c.in_channels => {
                    let g = c.geometry(h, w)?;
                    Ok(vec![c.out_channels, g.out_h, g.out_w])
                }
                _ => bail!(
                    Dimension,
                    "conv2d expects [{}, H, W], got {input:?}",
                    c.in_channels
                ),
            },
            Layer::BatchNorm(b) => {
                if input.is_empty() || input[0] != b.channels || input.len() == 2 {
                    bail!(
                        Dimension,
                        "batch norm expects [{}] or [{}, H, W], got {input:?}",
                        b.channels,
                        b.channels
                    );
                }
                Ok(input.to_vec())
            }
            Layer::LayerNorm(l) => {
                if input != [l.features] {
                    bail!(Dimension, "layer norm expects [{}], got {input:?}", l.features);
                }
                Ok(input.to_vec())
            }
            Layer::Activation(_) => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::MaxPool(p) => match *input {
                [c, h, w] if p.kernel.0 <= h && p.kernel.1 <= w => Ok(vec![
                    c,
                    (h - p.kernel.0) / p.stride.0 + 1,
                    (w - p.kernel.1) / p.stride.1 + 1,
                ]),
                _ => bail!(Dimension, "max pool cannot pool {input:?} with {:?}", p.kernel),
            },
        }
    }

    pub(crate) fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Dense(d) => dense_forward(d, x),
            Layer::Conv2d(c) => conv_forward(c, x),
            Layer::BatchNorm(b) => batch_norm_forward(b, x, mode),
            Layer::LayerNorm(l) => layer_norm_forward(l, x),
            Layer::Activation(a) => {
                let out = x.map(|v| a.apply(v));
                Ok((
                    out.clone(),
                    Cache::Act {
                        input: x.clone(),
                        output: out,
                    },
                ))
            }
            Layer::Flatten => {
                let m = x.shape()[0];
                let rest = x.len() / m;
                let out = x.clone().reshape(&[m, rest])?;
                Ok((
                    out,
                    Cache::Flatten {
                        input_shape: x.shape().to_vec(),
                    },
                ))
            }
            Layer::MaxPool(p) => max_pool_forward(p, x),
        }
    }

    pub(crate) fn backward(&self, index: usize, cache: &Cache, dy: &Tensor) -> Result<LayerGrad> {
        match (self, cache) {
            (Layer::Dense(d), Cache::Dense { h_bar }) => dense_backward(index, d, h_bar, dy),
            (Layer::Conv2d(c), Cache::Conv { h_bar, geo, batch }) => {
                conv_backward(index, c, h_bar, geo, *batch, dy)
            }
            (Layer::BatchNorm(b), Cache::Norm { x_hat, inv_std, training }) => {
                batch_norm_backward(index, b, x_hat, inv_std, *training, dy)
            }
            (Layer::LayerNorm(l), Cache::Norm { x_hat, inv_std, .. }) => {
                layer_norm_backward(index, l, x_hat, inv_std, dy)
            }
            (Layer::Activation(a), Cache::Act { input, output }) => {
                let mut g = dy.clone();
                for ((gv, &av), &yv) in g.data_mut().iter_mut().zip(input.data()).zip(output.data()) {
                    *gv *= a.derivative(av, yv);
                }
                Ok(LayerGrad {
                    input_grad: g,
                    params: vec![],
                    capture: None,
                })
            }
            (Layer::Flatten, Cache::Flatten { input_shape }) => Ok(LayerGrad {
                input_grad: dy.clone().reshape(input_shape)?,
                params: vec![],
                capture: None,
            }),
            (Layer::MaxPool(_), Cache::Pool { argmax, input_shape }) => {
                let mut g = Tensor::zeros(input_shape)?;
                let gd = g.data_mut();
                for (&src, &v) in argmax.iter().zip(dy.data()) {
                    gd[src] += v;
                }
                Ok(LayerGrad {
                    input_grad: g,
                    params: vec![],
                    capture: None,
                })
            }
            _ => bail!(State, "cache does not belong to layer {index}"),
        }
    }
}

fn dense_forward(d: &Dense, x: &Tensor) -> Result<(Tensor, Cache)> {
    batch_dims(x, 2, "dense")?;
    let (m, n_in) = (x.rows(), x.cols());
    if n_in != d.in_features {
        bail!(Dimension, "dense expects {} features, got {n_in}", d.in_features);
    }
    let rows = n_in + usize::from(d.bias);
    let mut h = vec![0.0; rows * m];
    for n in 0..m {
        for j in 0..n_in {
            h[j * m + n] = x.at(n, j);
        }
    }
    if d.bias {
        h[n_in * m..].fill(1.0);
    }
    let h_bar = Tensor::from_parts(vec![rows, m], h)?;
    let out = matmul(&d.theta, &h_bar)?.transpose()?;
    Ok((out, Cache::Dense { h_bar }))
}

fn dense_backward(index: usize, d: &Dense, h_bar: &Tensor, dy: &Tensor) -> Result<LayerGrad> {
    let m = h_bar.cols();
    if dy.shape() != [m, d.out_features] {
        bail!(Dimension, "dense upstream gradient shape {:?}", dy.shape());
    }
    let da = dy.transpose()?;
    let grad = matmul(&da, &h_bar.transpose()?)?;
    // dx = dy · W, skipping the bias column of theta.
    let cols = d.theta.cols();
    let mut dx = vec![0.0; m * d.in_features];
    for n in 0..m {
        let row = &mut dx[n * d.in_features..(n + 1) * d.in_features];
        for k in 0..d.out_features {
            let g = dy.at(n, k);
            let w = &d.theta.data()[k * cols..k * cols + d.in_features];
            for (o, &wv) in row.iter_mut().zip(w) {
                *o += g * wv;
            }
        }
    }
    let s = da.scale(m as f64);
    Ok(LayerGrad {
        input_grad: Tensor::from_parts(vec![m, d.in_features], dx)?,
        params: vec![grad],
        capture: Some(LayerCapture {
            layer: index,
            kind: CaptureKind::Dense,
            h: h_bar.clone(),
            s,
            spatial_count: 1,
            batch: m,
            has_bias: d.bias,
        }),
    })
}

fn conv_forward(c: &Conv2d, x: &Tensor) -> Result<(Tensor, Cache)> {
    batch_dims(x, 4, "conv2d")?;
    let s = x.shape();
    let (m, ch) = (s[0], s[1]);
    if ch != c.in_channels {
        bail!(Dimension, "conv2d expects {} channels, got {ch}", c.in_channels);
    }
    let geo = c.geometry(s[2], s[3])?;
    let t = geo.spatial_count();
    let k = geo.patch_len();
    let cols = m * t;
    let rows = k + usize::from(c.bias);
    let mut h = vec![0.0; rows * cols];
    let per = geo.input_len();
    for n in 0..m {
        geo.im2col_into(&x.data()[n * per..(n + 1) * per], &mut h, cols, n * t);
    }
    if c.bias {
        h[k * cols..].fill(1.0);
    }
    let h_bar = Tensor::from_parts(vec![rows, cols], h)?;
    let a = matmul(&c.theta, &h_bar)?;
    let co = c.out_channels;
    let mut out = vec![0.0; m * co * t];
    for n in 0..m {
        for o in 0..co {
            out[(n * co + o) * t..(n * co + o + 1) * t]
                .copy_from_slice(&a.data()[o * cols + n * t..o * cols + (n + 1) * t]);
        }
    }
    Ok((
        Tensor::from_parts(vec![m, co, geo.out_h, geo.out_w], out)?,
        Cache::Conv {
            h_bar,
            geo,
            batch: m,
        },
    ))
}

fn conv_backward(
    index: usize,
    c: &Conv2d,
    h_bar: &Tensor,
    geo: &ConvGeometry,
    m: usize,
    dy: &Tensor,
) -> Result<LayerGrad> {
    let t = geo.spatial_count();
    let co = c.out_channels;
    if dy.shape() != [m, co, geo.out_h, geo.out_w] {
        bail!(Dimension, "conv upstream gradient shape {:?}", dy.shape());
    }
    let cols = m * t;
    let mut da = vec![0.0; co * cols];
    for n in 0..m {
        for o in 0..co {
            da[o * cols + n * t..o * cols + (n + 1) * t]
                .copy_from_slice(&dy.data()[(n * co + o) * t..(n * co + o + 1) * t]);
        }
    }
    let da = Tensor::from_parts(vec![co, cols], da)?;
    let grad = matmul(&da, &h_bar.transpose()?)?;
    // Patch gradients: Wᵀ · dA with the bias column dropped.
    let k = geo.patch_len();
    let tc = c.theta.cols();
    let mut wt = vec![0.0; k * co];
    for o in 0..co {
        for r in 0..k {
            wt[r * co + o] = c.theta.data()[o * tc + r];
        }
    }
    let dcols = matmul(&Tensor::from_parts(vec![k, co], wt)?, &da)?;
    let per = geo.input_len();
    let mut dx = vec![0.0; m * per];
    for n in 0..m {
        geo.col2im_from(dcols.data(), cols, n * t, &mut dx[n * per..(n + 1) * per]);
    }
    Ok(LayerGrad {
        input_grad: Tensor::from_parts(vec![m, geo.channels, geo.height, geo.width], dx)?,
        params: vec![grad],
        capture: Some(LayerCapture {
            layer: index,
            kind: CaptureKind::Conv,
            h: h_bar.clone(),
            s: da.scale(m as f64),
            spatial_count: t,
            batch: m,
            has_bias: c.bias,
        }),
    })
}

fn batch_norm_forward(b: &mut BatchNorm, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
    if x.ndim() != 2 && x.ndim() != 4 {
        bail!(Dimension, "batch norm expects [M, C] or [M, C, H, W], got {:?}", x.shape());
    }
    let (m, c, hw) = norm_layout(x.shape());
    if c != b.channels {
        bail!(Dimension, "batch norm expects {} channels, got {c}", b.channels);
    }
    let training = mode == Mode::Train;
    if training && m < 2 {
        bail!(Input, "batch norm in training mode needs batch size ≥ 2, got {m}");
    }
    let count = (m * hw) as f64;
    let xd = x.data();
    let mut inv_std = vec![0.0; c];
    let mut mean = vec![0.0; c];
    for ch in 0..c {
        let (mu, var) = if training {
            let mut sum = 0.0;
            for n in 0..m {
                sum += xd[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let mu = sum / count;
            let mut sq = 0.0;
            for n in 0..m {
                sq += xd[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            let var = sq / count;
            b.running_mean[ch] = (1.0 - b.momentum) * b.running_mean[ch] + b.momentum * mu;
            b.running_var[ch] =
                (1.0 - b.momentum) * b.running_var[ch] + b.momentum * var * count / (count - 1.0);
            (mu, var)
        } else {
            (b.running_mean[ch], b.running_var[ch])
        };
        mean[ch] = mu;
        inv_std[ch] = 1.0 / (var + b.eps).sqrt();
    }
    let mut x_hat = x.clone();
    let mut out = x.clone();
    {
        let xh = x_hat.data_mut();
        let od = out.data_mut();
        for n in 0..m {
            for ch in 0..c {
                let (nu, beta) = (b.scale.data()[ch], b.shift.data()[ch]);
                for i in (n * c + ch) * hw..(n * c + ch + 1) * hw {
                    let v = (xd[i] - mean[ch]) * inv_std[ch];
                    xh[i] = v;
                    od[i] = nu * v + beta;
                }
            }
        }
    }
    Ok((
        out,
        Cache::Norm {
            x_hat,
            inv_std,
            training,
        },
    ))
}

/// Lays a `[M, C, HW]` tensor out as a `C × (M·HW)` matrix, columns ordered
/// by sample then position.
fn channel_major(t: &Tensor, scale: f64) -> Result<Tensor> {
    let (m, c, hw) = norm_layout(t.shape());
    let cols = m * hw;
    let mut out = vec![0.0; c * cols];
    let d = t.data();
    for n in 0..m {
        for ch in 0..c {
            for p in 0..hw {
                out[ch * cols + n * hw + p] = scale * d[(n * c + ch) * hw + p];
            }
        }
    }
    Tensor::from_parts(vec![c, cols], out)
}

fn batch_norm_backward(
    index: usize,
    b: &BatchNorm,
    x_hat: &Tensor,
    inv_std: &[f64],
    training: bool,
    dy: &Tensor,
) -> Result<LayerGrad> {
    if dy.shape() != x_hat.shape() {
        bail!(Dimension, "batch norm upstream gradient shape {:?}", dy.shape());
    }
    let (m, c, hw) = norm_layout(x_hat.shape());
    let count = (m * hw) as f64;
    let (xh, g) = (x_hat.data(), dy.data());
    let mut d_scale = vec![0.0; c];
    let mut d_shift = vec![0.0; c];
    let mut dx = vec![0.0; g.len()];
    for ch in 0..c {
        let nu = b.scale.data()[ch];
        let idx = |n: usize| (n * c + ch) * hw..(n * c + ch + 1) * hw;
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for n in 0..m {
            for i in idx(n) {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
        }
        d_scale[ch] = sum_gx;
        d_shift[ch] = sum_g;
        for n in 0..m {
            for i in idx(n) {
                dx[i] = if training {
                    nu * inv_std[ch] * (g[i] - sum_g / count - xh[i] * sum_gx / count)
                } else {
                    nu * inv_std[ch] * g[i]
                };
            }
        }
    }
    Ok(LayerGrad {
        input_grad: Tensor::from_parts(dy.shape().to_vec(), dx)?,
        params: vec![Tensor::vector(d_scale)?, Tensor::vector(d_shift)?],
        capture: Some(LayerCapture {
            layer: index,
            kind: CaptureKind::Norm,
            h: channel_major(x_hat, 1.0)?,
            s: channel_major(dy, m as f64)?,
            spatial_count: hw,
            batch: m,
            has_bias: false,
        }),
    })
}

fn layer_norm_forward(l: &LayerNorm, x: &Tensor) -> Result<(Tensor, Cache)> {
    batch_dims(x, 2, "layer norm")?;
    let (m, d) = (x.rows(), x.cols());
    if d != l.features {
        bail!(Dimension, "layer norm expects {} features, got {d}", l.features);
    }
    let mut x_hat = x.clone();
    let mut out = x.clone();
    let mut inv_std = vec![0.0; m];
    for n in 0..m {
        let row = x.row(n);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        if var + l.eps <= 0.0 {
            bail!(Numeric, "layer norm sample {n} has zero variance and eps = 0");
        }
        let is = 1.0 / (var + l.eps).sqrt();
        inv_std[n] = is;
        for j in 0..d {
            let v = (row[j] - mu) * is;
            x_hat.set(n, j, v);
            out.set(n, j, l.scale.data()[j] * v + l.shift.data()[j]);
        }
    }
    Ok((
        out,
        Cache::Norm {
            x_hat,
            inv_std,
            training: true,
        },
    ))
}

fn layer_norm_backward(
    index: usize,
    l: &LayerNorm,
    x_hat: &Tensor,
    inv_std: &[f64],
    dy: &Tensor,
) -> Result<LayerGrad> {
    if dy.shape() != x_hat.shape() {
        bail!(Dimension, "layer norm upstream gradient shape {:?}", dy.shape());
    }
    let (m, d) = (x_hat.rows(), x_hat.cols());
    let mut d_scale = vec![0.0; d];
    let mut d_shift = vec![0.0; d];
    let mut dx = Tensor::zeros(&[m, d])?;
    let nu = l.scale.data();
    for n in 0..m {
        let (xh, g) = (x_hat.row(n), dy.row(n));
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for j in 0..d {
            d_scale[j] += g[j] * xh[j];
            d_shift[j] += g[j];
            let gx = g[j] * nu[j];
            sum_g += gx;
            sum_gx += gx * xh[j];
        }
        for j in 0..d {
            let gx = g[j] * nu[j];
            let v = inv_std[n] * (gx - sum_g / d as f64 - xh[j] * sum_gx / d as f64);
            dx.set(n, j, v);
        }
    }
    Ok(LayerGrad {
        input_grad: dx,
        params: vec![Tensor::vector(d_scale)?, Tensor::vector(d_shift)?],
        capture: Some(LayerCapture {
            layer: index,
            kind: CaptureKind::Norm,
            h: x_hat.transpose()?,
            s: dy.transpose()?.scale(m as f64),
            spatial_count: 1,
            batch: m,
            has_bias: false,
        }),
    })
}

fn max_pool_forward(p: &MaxPool, x: &Tensor) -> Result<(Tensor, Cache)> {
    batch_dims(x, 4, "max pool")?;
    let s = x.shape();
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
        bail!(Dimension, "max pool {:?}/{:?} invalid for {h}x{w}", p.kernel, p.stride);
    }
    let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
    let mut out = Vec::with_capacity(m * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    let d = x.data();
    for plane in 0..m * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * sh * w + ox * sw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let i = base + (oy * sh + ki) * w + ox * sw + kj;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![m, c, oh, ow], out)?,
        Cache::Pool {
            argmax,
            input_shape: s.to_vec(),
        },
    ))
}
