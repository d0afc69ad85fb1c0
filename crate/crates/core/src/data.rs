//! Datasets: IDX and CSV readers, synthetic generators, seeded splits.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::nn::Targets;
use crate::rng::Rng;
use crate::tensor::{matmul, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs (`[N, ...sample shape]`) with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.ndim() < 2 {
            bail!(Dimension, "inputs need a leading sample axis, got {:?}", inputs.shape());
        }
        if inputs.shape()[0] != targets.len() {
            bail!(
                Dimension,
                "{} inputs but {} targets",
                inputs.shape()[0],
                targets.len()
            );
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Number of classes (largest label + 1), `None` for regression.
    pub fn classes(&self) -> Option<usize> {
        self.targets.labels().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.inputs.select_rows(idx)?, self.targets.select(idx)?)
    }

    pub fn shuffled(&self, seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        self.select(&idx)
    }

    /// Keeps the first `n` samples.
    pub fn limit(&self, n: usize) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        if n == 0 {
            bail!(Input, "limit 0 leaves an empty dataset");
        }
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Seeded shuffle, then the first `⌊train_fraction·N⌋` samples train.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            bail!(Config, "train fraction must lie in (0, 1), got {train_fraction}");
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        let cut = (train_fraction * self.len() as f64).floor() as usize;
        if cut == 0 || cut == self.len() {
            bail!(Input, "{} samples cannot be split {train_fraction}", self.len());
        }
        Ok((self.select(&idx[..cut])?, self.select(&idx[cut..])?))
    }

    /// Reinterprets every sample with a new shape of equal size.
    pub fn reshape_samples(self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Self::new(self.inputs.reshape(&full)?, self.targets)
    }
}

/// Raw IDX array: magic, dimensions and payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub fn parse_idx(raw: &[u8]) -> Result<IdxArray> {
    if raw.len() < 4 {
        bail!(Length, "IDX file shorter than its magic number");
    }
    let magic = u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]);
    if magic != IDX_IMAGES_MAGIC && magic != IDX_LABELS_MAGIC {
        bail!(Format, "unsupported IDX magic {magic:#010x}");
    }
    let nd = (magic & 0xff) as usize;
    let header = 4 + 4 * nd;
    if raw.len() < header {
        bail!(Length, "IDX header truncated");
    }
    let dims: Vec<usize> = (0..nd)
        .map(|i| u32::from_be_bytes(raw[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if raw.len() != header + n {
        bail!(Length, "IDX payload has {} bytes, dims {dims:?} need {n}", raw.len() - header);
    }
    Ok(IdxArray {
        magic,
        dims,
        bytes: raw[header..].to_vec(),
    })
}

pub fn encode_idx(a: &IdxArray) -> Result<Vec<u8>> {
    if (a.magic & 0xff) as usize != a.dims.len() {
        bail!(Format, "magic {:#010x} does not match {} dims", a.magic, a.dims.len());
    }
    if a.dims.iter().product::<usize>() != a.bytes.len() {
        bail!(Length, "dims {:?} vs {} bytes", a.dims, a.bytes.len());
    }
    let mut out = a.magic.to_be_bytes().to_vec();
    for &d in &a.dims {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?.to_be_bytes());
    }
    out.extend_from_slice(&a.bytes);
    Ok(out)
}

pub fn write_idx(path: &Path, a: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(a)?)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    Ok(raw)
}

/// Image file as an `[N, 1, H, W]` tensor scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let a = parse_idx(&read_file(path)?)?;
    if a.magic != IDX_IMAGES_MAGIC {
        bail!(Format, "{} is not an IDX image file (magic {:#010x})", path.display(), a.magic);
    }
    let data = a.bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_parts(vec![a.dims[0], 1, a.dims[1], a.dims[2]], data)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let a = parse_idx(&read_file(path)?)?;
    if a.magic != IDX_LABELS_MAGIC {
        bail!(Format, "{} is not an IDX label file (magic {:#010x})", path.display(), a.magic);
    }
    Ok(a.bytes.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    Dataset::new(load_idx_images(images)?, Targets::Labels(load_idx_labels(labels)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub has_header: bool,
    /// Zero-based label column; the last column when absent.
    pub label_column: Option<usize>,
    pub delimiter: char,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            has_header: true,
            label_column: None,
            delimiter: ',',
        }
    }
}

/// Numeric feature columns plus one non-negative integer label column.
/// Parse errors carry 1-based file line and column numbers.
pub fn load_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    if !schema.delimiter.is_ascii() {
        bail!(Config, "CSV delimiter must be ASCII");
    }
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let cols = rec.len();
        if cols < 2 {
            return Err(Error::Parse {
                row: line,
                col: cols + 1,
                msg: "need at least one feature and a label".into(),
            });
        }
        match width {
            None => width = Some(cols),
            Some(w) if w != cols => {
                return Err(Error::Parse {
                    row: line,
                    col: cols.min(w) + 1,
                    msg: format!("expected {w} columns, found {cols}"),
                })
            }
            _ => {}
        }
        let lc = schema.label_column.unwrap_or(cols - 1);
        if lc >= cols {
            bail!(Config, "label column {lc} out of range for {cols} columns");
        }
        for (c, cell) in rec.iter().enumerate() {
            let err = |msg: String| Error::Parse { row: line, col: c + 1, msg };
            if c == lc {
                let y: usize = cell.parse().map_err(|_| err(format!("label {cell:?} is not a class index")))?;
                labels.push(y);
            } else {
                let v: f64 = cell.parse().map_err(|_| err(format!("{cell:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(err(format!("non-finite value {cell:?}")));
                }
                feats.push(v);
            }
        }
    }
    let Some(w) = width else {
        bail!(Input, "CSV has no data rows");
    };
    Dataset::new(
        Tensor::from_parts(vec![labels.len(), w - 1], feats)?,
        Targets::Labels(labels),
    )
}

pub fn load_csv_path(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    load_csv(fs::File::open(path)?, schema)
}

/// Deterministic synthetic problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    /// Gaussian clusters: centers `∼ N(0, separation²I)`, points
    /// `center + spread·N(0, I)`, labels assigned round-robin.
    Blobs {
        classes: usize,
        dim: usize,
        #[serde(default = "one")]
        separation: f64,
        #[serde(default = "one")]
        spread: f64,
    },
    /// Two interleaved half circles with Gaussian jitter.
    Moons {
        #[serde(default)]
        noise: f64,
    },
    /// Regression pairs `y = A x`, `x ∼ N(0, I)`, `A` drawn from the seed.
    Quadratic { dim_in: usize, dim_out: usize },
}

fn one() -> f64 {
    1.0
}

pub fn synth_dataset(kind: &SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        bail!(Input, "synthetic dataset with 0 samples");
    }
    let mut rng = Rng::new(seed);
    match *kind {
        SynthKind::Blobs {
            classes,
            dim,
            separation,
            spread,
        } => {
            if classes == 0 || dim == 0 {
                bail!(Config, "blobs need classes ≥ 1 and dim ≥ 1");
            }
            let centers = rng.normal(&[classes, dim])?.scale(separation);
            let noise = rng.normal(&[n, dim])?;
            let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            let mut x = noise.scale(spread);
            for (i, &y) in labels.iter().enumerate() {
                for k in 0..dim {
                    x.data_mut()[i * dim + k] += centers.row(y)[k];
                }
            }
            Dataset::new(x, Targets::Labels(labels))
        }
        SynthKind::Moons { noise } => {
            let mut x = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let y = i % 2;
                let t = std::f64::consts::PI * rng.uniform();
                let (a, b) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                x.push(a + noise * rng.standard_normal());
                x.push(b + noise * rng.standard_normal());
                labels.push(y);
            }
            Dataset::new(Tensor::from_parts(vec![n, 2], x)?, Targets::Labels(labels))
        }
        SynthKind::Quadratic { dim_in, dim_out } => {
            if dim_in == 0 || dim_out == 0 {
                bail!(Config, "quadratic needs positive dimensions");
            }
            let a = rng.normal(&[dim_out, dim_in])?.scale(1.0 / (dim_in as f64).sqrt());
            let x = rng.normal(&[n, dim_in])?;
            let y = matmul(&x, &a.transpose()?)?;
            Dataset::new(x, Targets::Values(y))
        }
    }
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    Synth {
        generator: SynthKind,
        n: usize,
        /// Generator seed; the run seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl DataSource {
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            DataSource::Idx { images, labels } => vec![images, labels],
            DataSource::Csv { path, .. } => vec![path],
            DataSource::Synth { .. } => vec![],
        }
    }

    pub fn load(&self, run_seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Idx { images, labels } => load_idx(images, labels),
            DataSource::Csv { path, schema } => load_csv_path(path, schema),
            DataSource::Synth { generator, n, seed } => synth_dataset(generator, *n, seed.unwrap_or(run_seed)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_header_example() {
        let raw = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102];
        let a = parse_idx(&raw).unwrap();
        assert_eq!(a.dims, vec![1, 2, 2]);
        assert_eq!(encode_idx(&a).unwrap(), raw.to_vec());
        assert!(matches!(parse_idx(&raw[..18]), Err(Error::Length(_))));
        assert!(matches!(parse_idx(&[0, 0, 9, 3]), Err(Error::Format(_))));
    }

    #[test]
    fn csv_rows_and_errors() {
        let d = load_csv("a,b,y\n1,2,0\n3,4,1\n5,6,1\n".as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.inputs.shape(), &[3, 2]);
        assert_eq!(d.classes(), Some(2));
        let e = load_csv("a,b,y\n1,2,0\n3,x,1\n".as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(e, Error::Parse { row: 3, col: 2, .. }), "{e}");
    }

    #[test]
    fn synth_is_deterministic() {
        let k = SynthKind::Moons { noise: 0.1 };
        assert_eq!(synth_dataset(&k, 20, 3).unwrap(), synth_dataset(&k, 20, 3).unwrap());
        assert!(synth_dataset(&k, 0, 3).is_err());
    }

    #[test]
    fn split_partitions() {
        let d = synth_dataset(&SynthKind::Moons { noise: 0.0 }, 10, 1).unwrap();
        let (a, b) = d.split(0.8, 5).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
    }
}
