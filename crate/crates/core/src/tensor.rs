//! Dense row-major `f64` tensors and the structural kernels the rest of the
//! engine is built from: matrix product, diagonal Kronecker product and the
//! im2col patch expansion used by convolution layers.

use crate::error::{bail, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// Every dimension is positive and `data.len()` equals the product of the
/// shape. [`Tensor::new`] additionally rejects non-finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        bail!(Dimension, "tensor shape must have at least one dimension");
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        bail!(Dimension, "dimension {axis} of shape {shape:?} is zero");
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Checked constructor: validates the shape and rejects NaN/Inf entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            bail!(Input, "non-finite entry {} at flat index {i}", t.data[i]);
        }
        Ok(t)
    }

    /// Shape-checked constructor without the finiteness scan.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            bail!(
                Dimension,
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    /// Builds a `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// `n × n` identity.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => bail!(Dimension, "{what}: expected a matrix, got shape {s:?}"),
        }
    }

    /// Rows of a 2-D tensor. Panics on other ranks.
    pub fn rows(&self) -> usize {
        assert_eq!(self.ndim(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    /// Columns of a 2-D tensor. Panics on other ranks.
    pub fn cols(&self) -> usize {
        assert_eq!(self.ndim(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    /// Entry `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            bail!(
                Dimension,
                "cannot reshape {:?} into {shape:?}",
                self.shape
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            bail!(
                Dimension,
                "shape mismatch {:?} vs {:?}",
                self.shape,
                other.shape
            );
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies out row `i` of a matrix, or sample `i` of a batch-first tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Gathers the given leading-axis indices into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            bail!(Dimension, "cannot select zero rows");
        }
        let stride = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= self.shape[0] {
                bail!(Dimension, "row {i} out of range {}", self.shape[0]);
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::from_parts(shape, data)
    }
}

/// Matrix product `a · b`.
///
/// Each output entry accumulates over the inner index in increasing order, so
/// results are bit-reproducible.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        bail!(Dimension, "matmul inner dims differ: {m}x{k} · {k2}x{n}");
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Diagonal of `Diag(a) ⊗ Diag(b)`: entry `j * b.len() + k` is `a[j] * b[k]`.
pub fn kron_diag(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        bail!(Dimension, "kron_diag needs non-empty factors");
    }
    Ok(a.iter()
        .flat_map(|&x| b.iter().map(move |&y| x * y))
        .collect())
}

/// Geometry of a zero-padded 2-D convolution over one `C × H × W` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            bail!(Dimension, "empty conv input {channels}x{height}x{width}");
        }
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            bail!(Dimension, "kernel and stride must be positive");
        }
        let ph = height + 2 * pad.0;
        let pw = width + 2 * pad.1;
        if kernel.0 > ph || kernel.1 > pw {
            bail!(
                Dimension,
                "kernel {kernel:?} larger than padded input {ph}x{pw}"
            );
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel.0) / stride.0 + 1,
            out_w: (pw - kernel.1) / stride.1 + 1,
        })
    }

    /// Rows of the patch matrix: `C · kh · kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    /// Spatial output positions `|T| = out_h · out_w`.
    pub fn spatial_count(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input offset read by patch row `r` at output position `t`, or `None`
    /// when that tap falls in the zero padding.
    #[inline]
    fn tap(&self, r: usize, t: usize) -> Option<usize> {
        let (kh, kw) = self.kernel;
        let c = r / (kh * kw);
        let ki = (r / kw) % kh;
        let kj = r % kw;
        let oy = t / self.out_w;
        let ox = t % self.out_w;
        let y = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
        let x = (ox * self.stride.1 + kj) as isize - self.pad.1 as isize;
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            None
        } else {
            Some((c * self.height + y as usize) * self.width + x as usize)
        }
    }

    /// Writes the patches of `input` into columns `col0..col0+|T|` of a
    /// row-major matrix with `ld` columns.
    pub(crate) fn im2col_into(&self, input: &[f64], out: &mut [f64], ld: usize, col0: usize) {
        let tc = self.spatial_count();
        for r in 0..self.patch_len() {
            let row = &mut out[r * ld + col0..r * ld + col0 + tc];
            for (t, o) in row.iter_mut().enumerate() {
                *o = self.tap(r, t).map_or(0.0, |i| input[i]);
            }
        }
    }

    /// Adjoint of [`Self::im2col_into`]: scatters columns back, accumulating
    /// overlapping taps into `input_grad`.
    pub(crate) fn col2im_from(&self, cols: &[f64], ld: usize, col0: usize, input_grad: &mut [f64]) {
        let tc = self.spatial_count();
        for r in 0..self.patch_len() {
            let row = &cols[r * ld + col0..r * ld + col0 + tc];
            for (t, &v) in row.iter().enumerate() {
                if let Some(i) = self.tap(r, t) {
                    input_grad[i] += v;
                }
            }
        }
    }
}

/// Expansion of a `C × H × W` input into its patch matrix
/// `(C·kh·kw) × |T|`; column `t` is the receptive field at output position
/// `t` (row-major over the output grid). Padding is zero fill.
pub fn im2col(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Tensor, usize)> {
    let (c, h, w) = match input.shape() {
        &[c, h, w] => (c, h, w),
        s => bail!(Dimension, "im2col expects C×H×W input, got {s:?}"),
    };
    let geo = ConvGeometry::new((c, h, w), kernel, stride, pad)?;
    let (rows, tc) = (geo.patch_len(), geo.spatial_count());
    let mut out = vec![0.0; rows * tc];
    geo.im2col_into(input.data(), &mut out, tc, 0);
    Ok((Tensor::from_parts(vec![rows, tc], out)?, tc))
}

/// Adjoint of [`im2col`]: folds a patch matrix back into a `C × H × W`
/// tensor, summing overlapping contributions.
pub fn col2im(
    cols: &Tensor,
    input_shape: (usize, usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor> {
    let geo = ConvGeometry::new(input_shape, kernel, stride, pad)?;
    let (r, c) = cols.expect_matrix("col2im")?;
    if r != geo.patch_len() || c != geo.spatial_count() {
        bail!(
            Dimension,
            "col2im expects {}x{}, got {r}x{c}",
            geo.patch_len(),
            geo.spatial_count()
        );
    }
    let mut out = vec![0.0; geo.input_len()];
    geo.col2im_from(cols.data(), c, 0, &mut out);
    Tensor::from_parts(vec![input_shape.0, input_shape.1, input_shape.2], out)
}
