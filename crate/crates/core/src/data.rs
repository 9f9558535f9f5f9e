//! Dataset loading and preparation.
//!
//! * IDX (MNIST family): big-endian `u32` magic (`0x801` labels, `0x803`
//!   images), one big-endian `u32` per dimension, then the raw `u8` payload.
//! * CIFAR-10 binary: 3073-byte records, one label byte followed by the
//!   32x32 red, green and blue planes.
//! * Synthetic Gaussian blobs around centers on a sphere.
//! * A small versioned container ([`write_fixture`] / [`read_fixture`]) that
//!   stores a prepared dataset bit-exactly.
//!
//! Loaders return pixels scaled to `[0, 1]`; [`Standardizer`] then applies a
//! z-score fitted on the training split only.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_CLASSES: usize = 10;
const FIXTURE_MAGIC: &[u8; 4] = b"AEDS";
const FIXTURE_VERSION: u16 = 1;
const MIN_STD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: size {len} is not a multiple of the {record}-byte record")]
    RecordSize {
        path: PathBuf,
        len: usize,
        record: usize,
    },
    #[error("record {record} has label {label}, expected < {classes}")]
    BadLabel {
        record: usize,
        label: u8,
        classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("augmentation padding {pad} must be smaller than the image side {side}")]
    Padding { pad: usize, side: usize },
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Channel-major (`C x H x W`) layout of one flattened image row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f64> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub source: String,
    pub image_shape: Option<ImageShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits<T = f64> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.features.rows() != self.labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature rows but {} labels",
                self.features.rows(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Rows at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            source: self.source.clone(),
            image_shape: self.image_shape,
        }
    }

    /// Seeded random subset of `n` rows (all rows if `n >= len`), original order kept.
    pub fn subset(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        let mut out = self.select(&idx);
        out.source = format!("{} (subset {n}, seed {seed})", self.source);
        out
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            what,
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses an IDX image file into its shape and raw pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, ImageShape, &[u8]), DataError> {
    let magic = be_u32(bytes, 0, "idx image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "idx image header")? as usize;
    let height = be_u32(bytes, 8, "idx image header")? as usize;
    let width = be_u32(bytes, 12, "idx image header")? as usize;
    let expected = 16 + n * height * width;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            what: "idx image payload",
            expected,
            actual: bytes.len(),
        });
    }
    let shape = ImageShape {
        channels: 1,
        height,
        width,
    };
    Ok((n, shape, &bytes[16..expected]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    let magic = be_u32(bytes, 0, "idx label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "idx label header")? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            what: "idx label payload",
            expected,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[8..expected])
}

fn scale_pixels<T: Scalar>(pixels: &[u8]) -> Vec<T> {
    let max = T::lit(255.0);
    pixels.iter().map(|&p| T::from_u8(p).unwrap() / max).collect()
}

/// Decodes an IDX image/label pair into a dataset with pixels in `[0, 1]`.
pub fn decode_idx<T: Scalar>(
    image_bytes: &[u8],
    label_bytes: &[u8],
    split: Split,
    source: &str,
) -> Result<Dataset<T>, DataError> {
    let (n, shape, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(CIFAR_CLASSES);
    let features = Matrix::new(n, shape.len(), scale_pixels(pixels))
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(Dataset {
        features,
        labels,
        num_classes,
        split,
        source: source.to_string(),
        image_shape: Some(shape),
    })
}

pub fn load_idx<T: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset<T>, DataError> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    decode_idx(&images, &labels, split, &images_path.display().to_string())
}

/// Loads `train-*` and `t10k-*` IDX files from `dir` and z-scores every
/// pixel with statistics of the training split.
pub fn load_fashion_mnist<T: Scalar>(dir: &Path) -> Result<DataSplits<T>, DataError> {
    let mut train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let mut test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    let stats = Standardizer::per_feature(&train);
    stats.apply(&mut train);
    stats.apply(&mut test);
    Ok(DataSplits { train, test })
}

/// Decodes concatenated CIFAR-10 records into a dataset with pixels in `[0, 1]`.
pub fn decode_cifar10<T: Scalar>(
    bytes: &[u8],
    path: &Path,
    split: Split,
) -> Result<Dataset<T>, DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(DataError::RecordSize {
            path: path.to_path_buf(),
            len: bytes.len(),
            record: CIFAR_RECORD_BYTES,
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if chunk[0] as usize >= CIFAR_CLASSES {
            return Err(DataError::BadLabel {
                record,
                label: chunk[0],
                classes: CIFAR_CLASSES,
            });
        }
        labels.push(chunk[0] as usize);
        pixels.extend_from_slice(&chunk[1..]);
    }
    let shape = ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    };
    Ok(Dataset {
        features: Matrix::new(n, shape.len(), scale_pixels(&pixels))
            .map_err(|e| DataError::Invalid(e.to_string()))?,
        labels,
        num_classes: CIFAR_CLASSES,
        split,
        source: path.display().to_string(),
        image_shape: Some(shape),
    })
}

pub fn load_cifar10_binary<T: Scalar>(
    paths: &[PathBuf],
    split: Split,
) -> Result<Dataset<T>, DataError> {
    let mut bytes = Vec::new();
    for path in paths {
        let chunk = read_file(path)?;
        if chunk.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(DataError::RecordSize {
                path: path.clone(),
                len: chunk.len(),
                record: CIFAR_RECORD_BYTES,
            });
        }
        bytes.extend_from_slice(&chunk);
    }
    let source = paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut ds = decode_cifar10(&bytes, Path::new(&source), split)?;
    ds.source = source;
    Ok(ds)
}

/// `data_batch_{1..5}.bin` plus `test_batch.bin`, z-scored per channel.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<DataSplits<T>, DataError> {
    let train_paths: Vec<PathBuf> = (1..=5)
        .map(|k| dir.join(format!("data_batch_{k}.bin")))
        .collect();
    let mut train = load_cifar10_binary(&train_paths, Split::Train)?;
    let mut test = load_cifar10_binary(&[dir.join("test_batch.bin")], Split::Test)?;
    let stats = Standardizer::per_channel(&train)?;
    stats.apply(&mut train);
    stats.apply(&mut test);
    Ok(DataSplits { train, test })
}

/// Z-score parameters, one `(mean, std)` pair per feature column.
///
/// Standard deviations below `1e-8` are floored, so constant columns map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn per_feature<T: Scalar>(ds: &Dataset<T>) -> Self {
        let (n, d) = ds.features.shape();
        let mut mean = vec![0.0; d];
        for row in ds.features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.to_f64_lossy();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for row in ds.features.iter_rows() {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let diff = v.to_f64_lossy() - m;
                *acc += diff * diff;
            }
        }
        let std = var.iter().map(|v| (v / n.max(1) as f64).sqrt()).collect();
        Self { mean, std }
    }

    /// One statistic per image channel, broadcast over that channel's pixels.
    pub fn per_channel<T: Scalar>(ds: &Dataset<T>) -> Result<Self, DataError> {
        let shape = ds
            .image_shape
            .ok_or_else(|| DataError::Invalid("per-channel statistics need an image shape".into()))?;
        let plane = shape.height * shape.width;
        let count = (ds.len() * plane).max(1) as f64;
        let mut mean = vec![0.0; shape.channels];
        let mut sq = vec![0.0; shape.channels];
        for row in ds.features.iter_rows() {
            for (c, chunk) in row.chunks_exact(plane).enumerate() {
                for v in chunk {
                    mean[c] += v.to_f64_lossy();
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for row in ds.features.iter_rows() {
            for (c, chunk) in row.chunks_exact(plane).enumerate() {
                for v in chunk {
                    let diff = v.to_f64_lossy() - mean[c];
                    sq[c] += diff * diff;
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count).sqrt()).collect();
        let expand = |v: &[f64]| v.iter().flat_map(|&x| std::iter::repeat_n(x, plane)).collect();
        Ok(Self {
            mean: expand(&mean),
            std: expand(&std),
        })
    }

    pub fn apply<T: Scalar>(&self, ds: &mut Dataset<T>) {
        let cols = ds.features.cols();
        for (k, v) in ds.features.as_mut_slice().iter_mut().enumerate() {
            let j = k % cols;
            let z = (v.to_f64_lossy() - self.mean[j]) / self.std[j].max(MIN_STD);
            *v = T::lit(z);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 250,
            dim: 16,
            center_scale: 4.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Class centers drawn uniformly on a sphere of radius `center_scale`.
pub fn blob_centers(cfg: &BlobsConfig) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = Matrix::zeros(cfg.num_classes, cfg.dim);
    for j in 0..cfg.num_classes {
        loop {
            let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let r = crate::numerics::norm(&v);
            if r > 1e-9 {
                for (dst, x) in centers.row_mut(j).iter_mut().zip(&v) {
                    *dst = cfg.center_scale * x / r;
                }
                break;
            }
        }
    }
    centers
}

/// Gaussian blobs around [`blob_centers`], split 80/20 after a seeded shuffle.
pub fn synth_blobs<T: Scalar>(cfg: &BlobsConfig) -> Result<DataSplits<T>, DataError> {
    if cfg.num_classes == 0 || cfg.per_class == 0 || cfg.dim == 0 {
        return Err(DataError::Invalid("blob counts and dimension must be positive".into()));
    }
    if !(cfg.center_scale > 0.0) || !(cfg.noise_sigma >= 0.0) {
        return Err(DataError::Invalid(
            "center_scale must be positive and noise_sigma non-negative".into(),
        ));
    }
    let centers = blob_centers(cfg);
    // separate stream so the centers do not depend on the sample count
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let total = cfg.num_classes * cfg.per_class;
    let mut features = Matrix::zeros(total, cfg.dim);
    let mut labels = Vec::with_capacity(total);
    for j in 0..cfg.num_classes {
        for k in 0..cfg.per_class {
            let i = j * cfg.per_class + k;
            for (dst, &c) in features.row_mut(i).iter_mut().zip(centers.row(j)) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *dst = T::lit(c + cfg.noise_sigma * noise);
            }
            labels.push(j);
        }
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let cut = (total * 4) / 5;
    let all = Dataset {
        features,
        labels,
        num_classes: cfg.num_classes,
        split: Split::Train,
        source: format!(
            "blobs(C={}, n={}, d={}, scale={}, sigma={}, seed={})",
            cfg.num_classes, cfg.per_class, cfg.dim, cfg.center_scale, cfg.noise_sigma, cfg.seed
        ),
        image_shape: None,
    };
    let train = all.select(&order[..cut]);
    let mut test = all.select(&order[cut..]);
    test.split = Split::Test;
    Ok(DataSplits { train, test })
}

/// Random crop offset and flip decision for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

pub fn draw_augment<R: Rng + ?Sized>(rng: &mut R, pad: usize, flip_p: f64) -> AugmentDraw {
    AugmentDraw {
        dy: rng.random_range(0..=2 * pad),
        dx: rng.random_range(0..=2 * pad),
        flip: rng.random::<f64>() < flip_p,
    }
}

/// Zero-pads one `C x H x W` image by `pad`, crops back to `H x W` at the
/// drawn offset, then mirrors horizontally if requested.
pub fn apply_augment<T: Scalar>(image: &[T], shape: ImageShape, pad: usize, draw: AugmentDraw) -> Vec<T> {
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![T::zero(); image.len()];
    for c in 0..shape.channels {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let sy = (y + draw.dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xs = if draw.flip { w - 1 - x } else { x };
                let sx = (xs + draw.dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[c * h * w + y * w + x] = plane[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Augments every row of `batch` with independent draws from `rng`.
pub fn augment_batch<T: Scalar, R: Rng + ?Sized>(
    batch: &Matrix<T>,
    shape: ImageShape,
    pad: usize,
    flip_p: f64,
    rng: &mut R,
) -> Result<Matrix<T>, DataError> {
    let side = shape.height.min(shape.width);
    if pad >= side {
        return Err(DataError::Padding { pad, side });
    }
    if batch.cols() != shape.len() {
        return Err(DataError::Invalid(format!(
            "batch width {} does not match image shape {:?}",
            batch.cols(),
            shape
        )));
    }
    let mut out = Matrix::zeros(batch.rows(), batch.cols());
    for i in 0..batch.rows() {
        let draw = draw_augment(rng, pad, flip_p);
        out.row_mut(i)
            .copy_from_slice(&apply_augment(batch.row(i), shape, pad, draw));
    }
    Ok(out)
}

/// Serializes a dataset into the little-endian fixture container:
///
/// ```text
/// "AEDS" | version u16 | split u8 | 0u8 | classes u32 | rows u64 | cols u64
/// | channels u32 | height u32 | width u32 (all 0 without an image shape)
/// | source_len u32 | source utf-8 | labels rows*u32 | features rows*cols*f64
/// ```
pub fn write_fixture(ds: &Dataset<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FIXTURE_MAGIC);
    out.extend_from_slice(&FIXTURE_VERSION.to_le_bytes());
    out.push(match ds.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    out.push(0);
    out.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(ds.features.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.features.cols() as u64).to_le_bytes());
    let shape = ds.image_shape.unwrap_or(ImageShape {
        channels: 0,
        height: 0,
        width: 0,
    });
    for v in [shape.channels, shape.height, shape.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ds.source.len() as u32).to_le_bytes());
    out.extend_from_slice(ds.source.as_bytes());
    for &y in &ds.labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    for v in ds.features.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.at + n;
        let out = self.bytes.get(self.at..end).ok_or(DataError::Truncated {
            what: "fixture",
            expected: end,
            actual: self.bytes.len(),
        })?;
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_fixture(bytes: &[u8]) -> Result<Dataset<f64>, DataError> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4)?;
    if magic != FIXTURE_MAGIC {
        return Err(DataError::BadMagic {
            expected: u32::from_be_bytes(*FIXTURE_MAGIC),
            found: u32::from_be_bytes(magic.try_into().unwrap()),
        });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != FIXTURE_VERSION {
        return Err(DataError::Invalid(format!(
            "fixture version {version}, expected {FIXTURE_VERSION}"
        )));
    }
    let split = match r.take(2)?[0] {
        0 => Split::Train,
        1 => Split::Test,
        other => return Err(DataError::Invalid(format!("unknown split tag {other}"))),
    };
    let num_classes = r.u32()? as usize;
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let (channels, height, width) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let source_len = r.u32()? as usize;
    let source = String::from_utf8(r.take(source_len)?.to_vec())
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let labels = (0..rows)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let values = r.take(rows * cols * 8)?;
    let data = values
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let ds = Dataset {
        features: Matrix::new(rows, cols, data).map_err(|e| DataError::Invalid(e.to_string()))?,
        labels,
        num_classes,
        split,
        source,
        image_shape: (channels > 0).then_some(ImageShape {
            channels,
            height,
            width,
        }),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_two_images() {
        let images = [
            0x00, 0x00, 0x08, 0x03, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00,
            0x00, 0x02, 0, 255, 51, 102, 255, 0, 0, 153,
        ];
        let labels = [0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 3];
        let ds: Dataset = decode_idx(&images, &labels, Split::Train, "fixture").unwrap();
        assert_eq!(ds.features.shape(), (2, 4));
        assert_eq!(ds.features.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.features.row(1), &[1.0, 0.0, 0.0, 0.6]);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(
            ds.image_shape,
            Some(ImageShape {
                channels: 1,
                height: 2,
                width: 2
            })
        );
    }

    #[test]
    fn idx_errors_are_distinct() {
        let labels = idx_labels(&[1, 2]);
        let images = idx_images(2, 1, 2, &[1, 2, 3, 4]);
        assert!(matches!(
            decode_idx::<f64>(&labels, &labels, Split::Train, ""),
            Err(DataError::BadMagic {
                expected: IDX_IMAGES_MAGIC,
                found: IDX_LABELS_MAGIC
            })
        ));
        assert!(matches!(
            decode_idx::<f64>(&images[..images.len() - 1], &labels, Split::Train, ""),
            Err(DataError::Truncated { expected: 20, actual: 19, .. })
        ));
        assert!(matches!(
            decode_idx::<f64>(&images, &idx_labels(&[1, 2, 3]), Split::Train, ""),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
        assert!(matches!(
            decode_idx::<f64>(&images[..6], &labels, Split::Train, ""),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn cifar_two_records() {
        let mut bytes = Vec::new();
        for (label, base) in [(3u8, 0u8), (9, 100)] {
            bytes.push(label);
            for k in 0..3072usize {
                bytes.push(base.wrapping_add((k % 7) as u8 * (1 + k / 1024) as u8));
            }
        }
        let ds: Dataset = decode_cifar10(&bytes, Path::new("mem"), Split::Test).unwrap();
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.features.shape(), (2, 3072));
        for i in 0..2 {
            for k in 0..3072 {
                let raw = bytes[i * CIFAR_RECORD_BYTES + 1 + k];
                assert_eq!(ds.features[(i, k)], raw as f64 / 255.0);
            }
        }
    }

    #[test]
    fn cifar_rejects_bad_input() {
        let bytes = vec![0u8; CIFAR_RECORD_BYTES + 5];
        let err = decode_cifar10::<f64>(&bytes, Path::new("x.bin"), Split::Train).unwrap_err();
        assert!(matches!(err, DataError::RecordSize { record: 3073, len, .. } if len == 3078));
        assert!(err.to_string().contains("3073"));
        let mut bad = vec![0u8; CIFAR_RECORD_BYTES * 2];
        bad[CIFAR_RECORD_BYTES] = 10;
        assert!(matches!(
            decode_cifar10::<f64>(&bad, Path::new("x.bin"), Split::Train),
            Err(DataError::BadLabel { record: 1, label: 10, .. })
        ));
    }

    #[test]
    fn per_feature_standardization() {
        let cfg = BlobsConfig {
            dim: 5,
            ..Default::default()
        };
        let mut splits: DataSplits = synth_blobs(&cfg).unwrap();
        // one constant column
        for i in 0..splits.train.len() {
            splits.train.features[(i, 2)] = 0.25;
        }
        let stats = Standardizer::per_feature(&splits.train);
        stats.apply(&mut splits.train);
        let after = Standardizer::per_feature(&splits.train);
        for j in 0..5 {
            assert!(after.mean[j].abs() < 1e-9);
            if j == 2 {
                assert_eq!(after.std[j], 0.0);
            } else {
                assert!((after.std[j] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn per_channel_standardization() {
        let shape = ImageShape {
            channels: 3,
            height: 2,
            width: 2,
        };
        let features = Matrix::from_fn(6, 12, |i, k| (i * 12 + k) as f64 * (1 + k / 4) as f64);
        let mut ds = Dataset {
            features,
            labels: vec![0; 6],
            num_classes: 1,
            split: Split::Train,
            source: String::new(),
            image_shape: Some(shape),
        };
        let stats = Standardizer::per_channel(&ds).unwrap();
        stats.apply(&mut ds);
        for c in 0..3 {
            let vals: Vec<f64> = (0..6)
                .flat_map(|i| (0..4).map(move |p| (i, c * 4 + p)))
                .map(|(i, k)| ds.features[(i, k)])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn blobs_without_noise_sit_on_centers() {
        let cfg = BlobsConfig {
            num_classes: 3,
            per_class: 10,
            dim: 4,
            noise_sigma: 0.0,
            seed: 8,
            ..Default::default()
        };
        let splits: DataSplits = synth_blobs(&cfg).unwrap();
        let centers = blob_centers(&cfg);
        assert_eq!(splits.train.len(), 24);
        assert_eq!(splits.test.len(), 6);
        for ds in [&splits.train, &splits.test] {
            for (row, &y) in ds.features.iter_rows().zip(&ds.labels) {
                assert_eq!(row, centers.row(y));
            }
        }
    }

    #[test]
    fn blobs_are_reproducible() {
        let cfg = BlobsConfig::default();
        let a: DataSplits = synth_blobs(&cfg).unwrap();
        let b: DataSplits = synth_blobs(&cfg).unwrap();
        assert_eq!(a, b);
        let other: DataSplits = synth_blobs(&BlobsConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.train.features, other.train.features);
    }

    #[test]
    fn blob_center_angles_match_recomputation() {
        let cfg = BlobsConfig {
            num_classes: 3,
            per_class: 200,
            dim: 2,
            noise_sigma: 0.01,
            seed: 3,
            ..Default::default()
        };
        let splits: DataSplits = synth_blobs(&cfg).unwrap();
        let centers = blob_centers(&cfg);
        let est = crate::metrics::class_centers(&splits.train.features, &splits.train.labels, 3).unwrap();
        for i in 0..3 {
            assert!((crate::numerics::norm(centers.row(i)) - cfg.center_scale).abs() < 1e-12);
            for j in 0..3 {
                let a = crate::metrics::angle_between(centers.row(i), centers.row(j));
                let b = crate::metrics::angle_between(est.row(i), est.row(j));
                assert!((a - b).abs() < 0.01, "{i},{j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn augment_identity_and_flip() {
        let shape = ImageShape {
            channels: 1,
            height: 2,
            width: 2,
        };
        let img = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_batch(&img, shape, 0, 0.0, &mut rng).unwrap(), img);
        let flipped = augment_batch(&img, shape, 0, 1.0, &mut rng).unwrap();
        assert_eq!(flipped.row(0), &[2.0, 1.0, 4.0, 3.0]);
        assert!(matches!(
            augment_batch(&img, shape, 2, 0.5, &mut rng),
            Err(DataError::Padding { pad: 2, side: 2 })
        ));
    }

    #[test]
    fn augment_crop_shifts_content() {
        let shape = ImageShape {
            channels: 1,
            height: 3,
            width: 3,
        };
        let img: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let out = apply_augment(&img, shape, 1, AugmentDraw { dy: 0, dx: 2, flip: false });
        // window starts one row above and one column right of the original
        assert_eq!(out, vec![0.0, 0.0, 0.0, 2.0, 3.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pad = 4;
        let cells = (2 * pad + 1) * (2 * pad + 1);
        let draws = 81_000;
        let mut counts = vec![0usize; cells];
        for _ in 0..draws {
            let d = draw_augment(&mut rng, pad, 0.5);
            counts[d.dy * (2 * pad + 1) + d.dx] += 1;
        }
        let expected = draws as f64 / cells as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 80 degrees of freedom, 0.999 quantile
        assert!(chi2 < 124.8, "chi2 = {chi2}");
    }

    #[test]
    fn fixture_rejects_garbage() {
        assert!(matches!(read_fixture(b"NOPE"), Err(DataError::BadMagic { .. })));
        let ds: DataSplits = synth_blobs(&BlobsConfig::default()).unwrap();
        let bytes = write_fixture(&ds.test);
        assert!(matches!(
            read_fixture(&bytes[..bytes.len() - 3]),
            Err(DataError::Truncated { .. })
        ));
    }

    proptest! {
        #[test]
        fn fixture_round_trip(
            rows in 0usize..6,
            cols in 1usize..5,
            seed in any::<u64>(),
            image in any::<bool>(),
            source in "[a-z/._ ]{0,20}",
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let features = Matrix::from_fn(rows, cols, |_, _| f64::from_bits(rng.random::<u64>() >> 2));
            let labels = (0..rows).map(|_| rng.random_range(0..3)).collect();
            let ds = Dataset {
                features,
                labels,
                num_classes: 3,
                split: if image { Split::Test } else { Split::Train },
                source,
                image_shape: image.then_some(ImageShape { channels: 1, height: 1, width: cols }),
            };
            let back = read_fixture(&write_fixture(&ds)).unwrap();
            prop_assert_eq!(write_fixture(&back), write_fixture(&ds));
            prop_assert_eq!(back.labels, ds.labels);
        }
    }
}
