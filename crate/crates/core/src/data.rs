//! Dataset readers (MNIST IDX, CIFAR-10 binary) and the synthetic
//! covariance-discriminative task.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::net::{Batch, Shape, Tensor};
use crate::rng::{derived, normal, SeededRng};
use crate::tensor::{sym_eig, Mat, SymMat, EIG_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

/// Affine map between stored network inputs and `[0, 1]` pixels:
/// `input = (pixel − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: 0.0, std: 1.0 };

    pub fn to_pixels(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for v in &mut out.data {
            *v = (*v * self.std + self.mean).clamp(0.0, 1.0);
        }
        out
    }

    pub fn from_pixels(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for v in &mut out.data {
            *v = (*v - self.mean) / self.std;
        }
        out
    }
}

/// Images are stored already normalized; `normalization` records the map
/// back to pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self> {
        if images.batch != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.batch, labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {bad} out of range for {classes} classes")));
        }
        if !(normalization.std > 0.0) || !normalization.mean.is_finite() {
            return Err(Error::Domain("normalization std must be positive".into()));
        }
        Ok(Self { images, labels, classes, split, normalization })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.images.shape
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let per = self.images.shape.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        Batch::new(Tensor::new(indices.len(), self.images.shape, data)?, labels)
    }

    /// Consecutive mini-batches over a seeded permutation of the samples.
    /// The final short batch is kept.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.classes as u32).to_le_bytes())?;
        w.write_all(&[match self.split {
            Split::Train => 0u8,
            Split::Test => 1,
            Split::All => 2,
        }])?;
        w.write_all(&self.normalization.mean.to_le_bytes())?;
        w.write_all(&self.normalization.std.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let s = self.images.shape;
        for v in [s.c, s.h, s.w] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &l in &self.labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
        for v in &self.images.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = ByteReader::new(BufReader::new(File::open(path)?));
        let magic = r.bytes(DATASET_MAGIC.len())?;
        if magic != DATASET_MAGIC {
            return Err(r.err(format!("bad dataset magic {magic:?}")));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != DATASET_VERSION {
            return Err(r.err(format!("unsupported dataset version {version}")));
        }
        let classes = r.u32()? as usize;
        let split = match r.bytes(1)?[0] {
            0 => Split::Train,
            1 => Split::Test,
            2 => Split::All,
            other => return Err(r.err(format!("unknown split tag {other}"))),
        };
        let normalization = Normalization { mean: r.f64()?, std: r.f64()? };
        let count = r.u64()? as usize;
        let shape = Shape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let labels = (0..count).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
        let data = (0..count * shape.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Dataset::new(Tensor::new(count, shape, data)?, labels, classes, split, normalization)
    }
}

const DATASET_MAGIC: &[u8] = b"GCPDATA";
const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCovTaskSpec {
    pub classes: usize,
    /// Feature dimension `d` (image channels).
    pub channels: usize,
    /// Spatial grid; each sample has `height · width` feature rows.
    pub height: usize,
    pub width: usize,
    /// Shared eigen-spectrum of every class covariance. Empty selects a
    /// geometric spectrum with condition number 10. Rescaled to trace `d`.
    pub spectrum: Vec<f64>,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticCovTaskSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            channels: 8,
            height: 6,
            width: 6,
            spectrum: Vec::new(),
            train_per_class: 128,
            test_per_class: 64,
        }
    }
}

/// Pixel-space mapping for synthetic features: `pixel = 0.5 + x / 16`
/// keeps several standard deviations inside `[0, 1]`.
pub const SYNTHETIC_NORMALIZATION: Normalization = Normalization { mean: 0.5, std: 1.0 / 16.0 };

impl SyntheticCovTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.channels < 2 {
            return Err(Error::Domain(format!("need channel count d >= 2, got {}", self.channels)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Domain("spatial grid must be non-empty".into()));
        }
        self.resolved_spectrum().map(|_| ())
    }

    /// Spectrum scaled to trace `d`.
    pub fn resolved_spectrum(&self) -> Result<Vec<f64>> {
        let d = self.channels;
        let raw: Vec<f64> = if self.spectrum.is_empty() {
            (0..d).map(|i| 10f64.powf(-(i as f64) / (d - 1).max(1) as f64)).collect()
        } else {
            self.spectrum.clone()
        };
        if raw.len() != d {
            return Err(Error::Domain(format!("spectrum has {} values, expected {d}", raw.len())));
        }
        if raw.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("spectrum values must be positive and finite".into()));
        }
        let (lo, hi) = raw.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi - lo <= 1e-9 * hi {
            return Err(Error::Domain(
                "degenerate spectrum: isotropic covariances are identical under every rotation".into(),
            ));
        }
        let trace: f64 = raw.iter().sum();
        Ok(raw.iter().map(|v| v * d as f64 / trace).collect())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: Dataset,
    pub test: Dataset,
    /// The generating covariance `C_c` of each class.
    pub covariances: Vec<SymMat>,
}

/// Random orthogonal matrix from the eigenvectors of a Gaussian symmetric
/// matrix.
fn random_rotation(rng: &mut SeededRng, d: usize) -> Result<Mat> {
    let g = Mat::from_fn(d, d, |_, _| normal(rng));
    let s = SymMat::new(g.add(&g.transpose())?.scale(0.5))?;
    Ok(sym_eig(&s, EIG_TOL)?.u)
}

/// Class covariances `C_c = R_c diag(spectrum) R_cᵀ` with their row-sampling
/// factors `R_c diag(√spectrum)`.
fn class_factors(spec: &SyntheticCovTaskSpec, seed: u64) -> Result<Vec<(SymMat, Mat)>> {
    let spectrum = spec.resolved_spectrum()?;
    let root: Vec<f64> = spectrum.iter().map(|v| v.sqrt()).collect();
    (0..spec.classes)
        .map(|c| {
            let r = random_rotation(&mut derived(seed, 1000 + c as u64), spec.channels)?;
            let factor = r.scale_columns(&root)?;
            let cov = r.scale_columns(&spectrum)?.matmul(&r.transpose())?;
            Ok((crate::tensor::sym_part(&cov)?, factor))
        })
        .collect()
}

fn sample_split(
    spec: &SyntheticCovTaskSpec,
    factors: &[(SymMat, Mat)],
    per_class: usize,
    rng: &mut SeededRng,
    split: Split,
) -> Result<Dataset> {
    let d = spec.channels;
    let n = spec.height * spec.width;
    let shape = Shape::new(d, spec.height, spec.width);
    let count = per_class * spec.classes;
    let mut data = vec![0.0; count * shape.len()];
    let mut labels = Vec::with_capacity(count);
    let mut z = vec![0.0; d];
    for i in 0..count {
        let class = i % spec.classes;
        labels.push(class);
        let factor = &factors[class].1;
        let sample = &mut data[i * shape.len()..(i + 1) * shape.len()];
        for row in 0..n {
            for v in z.iter_mut() {
                *v = normal(rng);
            }
            for ch in 0..d {
                let mut acc = 0.0;
                for (k, zk) in z.iter().enumerate() {
                    acc += factor[(ch, k)] * zk;
                }
                sample[ch * n + row] = acc;
            }
        }
    }
    Dataset::new(Tensor::new(count, shape, data)?, labels, spec.classes, split, SYNTHETIC_NORMALIZATION)
}

/// Generates the covariance-discriminative task. Train and test draw from
/// separate random streams, so the splits never share a sample.
pub fn gen_cov_task(spec: &SyntheticCovTaskSpec, seed: u64) -> Result<SyntheticTask> {
    spec.validate()?;
    let factors = class_factors(spec, seed)?;
    let train = sample_split(spec, &factors, spec.train_per_class, &mut derived(seed, 1), Split::Train)?;
    let test = sample_split(spec, &factors, spec.test_per_class, &mut derived(seed, 2), Split::Test)?;
    Ok(SyntheticTask { train, test, covariances: factors.into_iter().map(|(c, _)| c).collect() })
}

/// Parsed content of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Pixels scaled to `[0, 1]`, row-major per image.
    Images { count: usize, rows: usize, cols: usize, pixels: Vec<f64> },
    Labels(Vec<u8>),
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    parse_idx(BufReader::new(File::open(path)?))
}

pub fn parse_idx(input: impl Read) -> Result<IdxData> {
    let mut r = ByteReader::new(input);
    let magic = r.u32_be()?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let count = r.u32_be()? as usize;
            let rows = r.u32_be()? as usize;
            let cols = r.u32_be()? as usize;
            let raw = r.bytes(count * rows * cols)?;
            let pixels = raw.into_iter().map(|b| b as f64 / 255.0).collect();
            Ok(IdxData::Images { count, rows, cols, pixels })
        }
        IDX_LABELS_MAGIC => {
            let count = r.u32_be()? as usize;
            Ok(IdxData::Labels(r.bytes(count)?))
        }
        other => Err(Error::Parse {
            offset: 0,
            message: format!(
                "bad IDX magic: expected {IDX_IMAGES_MAGIC:#010x} or {IDX_LABELS_MAGIC:#010x}, found {other:#010x}"
            ),
        }),
    }
}

/// Pairs an IDX image file with its label file.
pub fn load_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (count, rows, cols, pixels) = match read_idx(images)? {
        IdxData::Images { count, rows, cols, pixels } => (count, rows, cols, pixels),
        IdxData::Labels(_) => return Err(Error::Domain("expected an IDX image file".into())),
    };
    let labels = match read_idx(labels)? {
        IdxData::Labels(l) => l,
        IdxData::Images { .. } => return Err(Error::Domain("expected an IDX label file".into())),
    };
    if labels.len() != count {
        return Err(Error::Shape(format!("{count} images but {} labels", labels.len())));
    }
    let images = Tensor::new(count, Shape::new(1, rows, cols), pixels)?;
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), 10, split, Normalization::IDENTITY)
}

pub const CIFAR_RECORD: usize = 3073;

pub fn read_cifar10_bin(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_cifar10(&bytes)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            message: format!("file size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * 3072);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(Error::Parse {
                offset: i * CIFAR_RECORD,
                message: format!("label {label} in record {i} is not below 10"),
            });
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(count, Shape::new(3, 32, 32), data)?, labels, 10, Split::All, Normalization::IDENTITY)
}
