//! Dataset ingestion and the two-layer privacy pipeline.
//!
//! IDX container parsing, byte-to-digit quantization, block compression,
//! normalization and one-shot noising, composed per image by
//! [`prepare_private_dataset`]. Pixels move through the stages
//!
//! ```text
//! bytes -> [0,1] -> base-p digits -> packed blocks -> [0,1] -> + noise
//! ```
//!
//! with a per-image noise seed derived from the master seed and the image
//! index, so preparation is a pure function of `(raw, config)` regardless
//! of scheduling.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{DataRole, ExperimentConfig};
use crate::dp::{add_noise_from_source, DpError, NoisyMatrix};
use crate::hensel::{compress_matrix, CodecError, DigitMatrix, PackedMatrix};
use crate::matrix::RealMatrix;
use crate::rng::{derive_seed, tags, GaussianSource};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;
const CLASS_COUNT: u8 = 10;
const CACHE_MAGIC: &[u8; 8] = b"HENFLDS\0";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX stream: need {expected} bytes, have {found}")]
    Truncated { expected: usize, found: usize },
    #[error("label {value} at index {index} is outside [0, 10)")]
    LabelOutOfRange { index: usize, value: u8 },
    #[error("dataset has {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("image {index} is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    InconsistentDims {
        index: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("entry {value} at ({row}, {col}) is outside [0, 1]")]
    EntryOutOfUnit { row: usize, col: usize, value: f64 },
    #[error("cache file rejected: {reason}")]
    Cache { reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Privacy(#[from] DpError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One grayscale image of 8-bit pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMatrix {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

impl PixelMatrix {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        assert_eq!(pixels.len(), rows * cols, "pixel count must match shape");
        Self { rows, cols, pixels }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Scale bytes to `[0, 1]` by dividing by 255.
    pub fn to_unit(&self) -> RealMatrix {
        RealMatrix::new(
            self.rows,
            self.cols,
            self.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

/// Labelled image set, all images sharing one shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    images: Vec<PixelMatrix>,
    labels: Vec<u8>,
}

impl RawDataset {
    pub fn new(images: Vec<PixelMatrix>, labels: Vec<u8>) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(first) = images.first() {
            let (rows, cols) = (first.rows(), first.cols());
            for (index, image) in images.iter().enumerate() {
                if image.rows() != rows || image.cols() != cols {
                    return Err(DataError::InconsistentDims {
                        index,
                        rows: image.rows(),
                        cols: image.cols(),
                        expected_rows: rows,
                        expected_cols: cols,
                    });
                }
            }
        }
        for (index, &value) in labels.iter().enumerate() {
            if value >= CLASS_COUNT {
                return Err(DataError::LabelOutOfRange { index, value });
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[PixelMatrix] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Keep only the images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels)
    }
}

/// Parsed IDX3 image file plus the count of ignored trailing bytes.
#[derive(Debug)]
pub struct IdxImages {
    pub images: Vec<PixelMatrix>,
    pub trailing_bytes: usize,
}

/// Parsed IDX1 label file plus the count of ignored trailing bytes.
#[derive(Debug)]
pub struct IdxLabels {
    pub labels: Vec<u8>,
    pub trailing_bytes: usize,
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX3 stream: big-endian magic 2051, count, rows, cols, then
/// row-major pixel bytes. Trailing bytes are reported, not rejected.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let payload = count * rows * cols;
    let expected = 16 + payload;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        images.push(PixelMatrix::new(
            rows,
            cols,
            bytes[start..start + rows * cols].to_vec(),
        ));
    }
    Ok(IdxImages {
        images,
        trailing_bytes: bytes.len() - expected,
    })
}

/// Parse an IDX1 stream: big-endian magic 2049, count, then label bytes,
/// each of which must name a class in `[0, 10)`.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<IdxLabels, DataError> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..8 + count].to_vec();
    for (index, &value) in labels.iter().enumerate() {
        if value >= CLASS_COUNT {
            return Err(DataError::LabelOutOfRange { index, value });
        }
    }
    Ok(IdxLabels {
        labels,
        trailing_bytes: bytes.len() - expected,
    })
}

/// Serialize images to IDX3 bytes, the inverse of [`parse_idx_images`].
pub fn write_idx_images(images: &[PixelMatrix]) -> Vec<u8> {
    let (rows, cols) = images
        .first()
        .map_or((0, 0), |img| (img.rows(), img.cols()));
    let mut bytes = Vec::with_capacity(16 + images.len() * rows * cols);
    bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for image in images {
        bytes.extend_from_slice(image.pixels());
    }
    bytes
}

/// Serialize labels to IDX1 bytes, the inverse of [`parse_idx_labels`].
pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    bytes
}

/// Load the four canonical MNIST files from `dir`, returning
/// `(train, test)`. Trailing bytes in a file are reported on stderr and
/// otherwise ignored.
pub fn load_mnist_dir(dir: &Path) -> Result<(RawDataset, RawDataset), DataError> {
    let load_split = |images_name: &str, labels_name: &str| -> Result<RawDataset, DataError> {
        let images_path = dir.join(images_name);
        let labels_path = dir.join(labels_name);
        let images = parse_idx_images(&fs::read(&images_path).map_err(|e| io_err(&images_path, e))?)?;
        if images.trailing_bytes > 0 {
            eprintln!(
                "warning: {} has {} trailing bytes",
                images_path.display(),
                images.trailing_bytes
            );
        }
        let labels = parse_idx_labels(&fs::read(&labels_path).map_err(|e| io_err(&labels_path, e))?)?;
        if labels.trailing_bytes > 0 {
            eprintln!(
                "warning: {} has {} trailing bytes",
                labels_path.display(),
                labels.trailing_bytes
            );
        }
        RawDataset::new(images.images, labels.labels)
    };
    Ok((
        load_split("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        load_split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

/// Map `[0, 1]` values to base-`p` digits by `round(v · (p-1))`,
/// half rounding up.
pub fn quantize(matrix: &RealMatrix, base: u32) -> Result<DigitMatrix, DataError> {
    let scale = (base - 1) as f64;
    let mut digits = Vec::with_capacity(matrix.values().len());
    for row in 0..matrix.rows() {
        for col in 0..matrix.cols() {
            let value = matrix.get(row, col);
            if !(0.0..=1.0).contains(&value) {
                return Err(DataError::EntryOutOfUnit { row, col, value });
            }
            digits.push((value * scale).round() as u32);
        }
    }
    Ok(DigitMatrix::new(matrix.rows(), matrix.cols(), base, digits)?)
}

/// Map base-`p` digits back to `[0, 1]` by `d / (p-1)`; right inverse of
/// [`quantize`] on quantized values.
pub fn dequantize(matrix: &DigitMatrix) -> RealMatrix {
    let scale = (matrix.base() - 1) as f64;
    RealMatrix::new(
        matrix.rows(),
        matrix.cols(),
        matrix.digits().iter().map(|&d| d as f64 / scale).collect(),
    )
}

/// Scale packed block values to `[0, 1]` by dividing by `p^B - 1`.
///
/// Both operands are converted to the nearest double first; when `p^B`
/// exceeds 2^53 the conversion drops low-order bits, which is the
/// documented precision cost of training on doubles. The exact-integer
/// codec itself is unaffected.
pub fn normalize_packed(packed: &PackedMatrix) -> RealMatrix {
    let denominator = biguint_to_f64(&(packed.config().packed_bound() - 1u32));
    RealMatrix::new(
        packed.rows(),
        packed.cols(),
        packed
            .entries()
            .iter()
            .map(|v| biguint_to_f64(v) / denominator)
            .collect(),
    )
}

/// Nearest-double conversion. Values that fit a `u64` (every canonical
/// configuration) take the hardware path; wider values go through the
/// standard library's decimal parser, which also rounds to nearest.
fn biguint_to_f64(value: &num_bigint::BigUint) -> f64 {
    match u64::try_from(value) {
        Ok(v) => v as f64,
        Err(_) => value.to_string().parse::<f64>().unwrap_or(f64::INFINITY),
    }
}

/// The privacy-preserving dataset: reduced-dimension noisy images, the
/// untouched labels, and enough bookkeeping to audit the noise budget.
#[derive(Debug, Clone)]
pub struct PrivateDataset {
    images: Vec<NoisyMatrix>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    noise_draws: u64,
    provenance: ExperimentConfig,
    role: DataRole,
}

impl PrivateDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[NoisyMatrix] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Total Gaussian draws consumed while noising this dataset; equals
    /// image count times pixels per image, and never grows afterwards.
    pub fn noise_draws(&self) -> u64 {
        self.noise_draws
    }

    pub fn provenance(&self) -> &ExperimentConfig {
        &self.provenance
    }

    pub fn role(&self) -> DataRole {
        self.role
    }
}

/// Run the full two-layer pipeline over a raw dataset: scale to `[0, 1]`,
/// quantize to base-`p` digits, block-compress, normalize, and noise each
/// image with a seed derived from `(master seed, role, image index)`.
/// Labels pass through untouched. Executed once per dataset; training
/// never draws data noise again.
pub fn prepare_private_dataset(
    raw: &RawDataset,
    config: &ExperimentConfig,
    role: DataRole,
) -> Result<PrivateDataset, DataError> {
    if raw.is_empty() {
        return Err(DataError::Empty);
    }
    let compression = config.compression()?;
    let params = config.privacy(0)?;
    let sigma = params.sigma();
    let noise_base = config.noise_seed(role);
    let results: Vec<(NoisyMatrix, u64)> = raw
        .images()
        .par_iter()
        .enumerate()
        .map(|(index, image)| -> Result<(NoisyMatrix, u64), DataError> {
            let digits = quantize(&image.to_unit(), config.base)?;
            let packed = compress_matrix(&digits, compression)?;
            let normalized = normalize_packed(&packed);
            let seed = derive_seed(noise_base, tags::IMAGE, index as u64);
            let mut source = GaussianSource::new(seed, sigma);
            let noisy = add_noise_from_source(&normalized, &mut source)?;
            Ok((noisy, source.draws()))
        })
        .collect::<Result<_, _>>()?;
    let noise_draws = results.iter().map(|(_, draws)| draws).sum();
    let images: Vec<NoisyMatrix> = results.into_iter().map(|(noisy, _)| noisy).collect();
    let (rows, cols) = (images[0].rows(), images[0].cols());
    Ok(PrivateDataset {
        images,
        labels: raw.labels().to_vec(),
        rows,
        cols,
        noise_draws,
        provenance: config.clone(),
        role,
    })
}

/// Same pipeline without the noise layer, for pre-noise sample dumps.
pub fn prepare_prenoise_images(
    raw: &RawDataset,
    config: &ExperimentConfig,
) -> Result<Vec<RealMatrix>, DataError> {
    let compression = config.compression()?;
    raw.images()
        .iter()
        .map(|image| {
            let digits = quantize(&image.to_unit(), config.base)?;
            Ok(normalize_packed(&compress_matrix(&digits, compression)?))
        })
        .collect()
}

/// Write a binary PGM (P5), affinely mapping `[min, max]` to `[0, 255]`.
/// A constant matrix maps to mid-gray 128.
pub fn dump_image(rows: usize, cols: usize, values: &[f64], path: &Path) -> Result<(), DataError> {
    assert_eq!(values.len(), rows * cols, "value count must match shape");
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| {
            if span == 0.0 {
                128
            } else {
                ((v - min) / span * 255.0).round() as u8
            }
        })
        .collect();
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write!(file, "P5\n{cols} {rows}\n255\n").map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Persist a prepared dataset, keyed by its pipeline hash.
pub fn save_dataset_cache(dataset: &PrivateDataset, path: &Path) -> Result<(), DataError> {
    let hash = dataset.provenance.pipeline_hash(dataset.role);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&hash.to_le_bytes());
    bytes.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(dataset.rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(dataset.cols as u32).to_le_bytes());
    bytes.extend_from_slice(&dataset.noise_draws.to_le_bytes());
    bytes.extend_from_slice(&dataset.labels);
    for image in &dataset.images {
        for &value in image.entries() {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Load a cached dataset, verifying that it was prepared under exactly
/// this `(config, role)` pair.
pub fn load_dataset_cache(
    path: &Path,
    config: &ExperimentConfig,
    role: DataRole,
) -> Result<PrivateDataset, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let fail = |reason: &str| DataError::Cache {
        reason: format!("{}: {reason}", path.display()),
    };
    if bytes.len() < 44 {
        return Err(fail("header truncated"));
    }
    if &bytes[0..8] != CACHE_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let hash = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if hash != config.pipeline_hash(role) {
        return Err(fail("pipeline hash mismatch; cache is for another config"));
    }
    let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let rows = u32::from_le_bytes(bytes[28..32].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[32..36].try_into().unwrap()) as usize;
    let noise_draws = u64::from_le_bytes(bytes[36..44].try_into().unwrap());
    let labels_start = 44;
    let entries_start = labels_start + count;
    let expected = entries_start + count * rows * cols * 8;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload length {} does not match declared contents {expected}",
            bytes.len()
        )));
    }
    let labels = bytes[labels_start..entries_start].to_vec();
    let mut images = Vec::with_capacity(count);
    let mut offset = entries_start;
    for _ in 0..count {
        let mut entries = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            entries.push(f64::from_le_bytes(
                bytes[offset..offset + 8].try_into().unwrap(),
            ));
            offset += 8;
        }
        images.push(NoisyMatrix::from_parts(rows, cols, entries));
    }
    Ok(PrivateDataset {
        images,
        labels,
        rows,
        cols,
        noise_draws,
        provenance: config.clone(),
        role,
    })
}
