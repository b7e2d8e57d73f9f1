//! IDX image files, synthetic stand-in datasets and seeded batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::snap_to_grid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magic number of an unsigned-byte, three-dimensional IDX file.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Environment variable prefixed to relative dataset paths.
pub const DATA_DIR_ENV: &str = "NEGVAE_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images flattened to rows of `[0, 1]` intensities.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub name: String,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, name: impl Into<String>, split: Split) -> Result<Self> {
        if images.shape().len() != 2 {
            return Err(Error::InvalidInput(format!("dataset must be 2-D, got {:?}", images.shape())));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("dataset pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            name: name.into(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    /// Keeps only the first `n` items.
    pub fn truncate(&mut self, n: usize) {
        if n > 0 && n < self.len() {
            self.images = self.images.slice_rows(0, n);
        }
    }
}

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses an in-memory IDX image file into `[N × rows·cols]` values in `[0, 1]`.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(data_err(path, "file shorter than the IDX header"));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(data_err(
            path,
            format!("magic {magic:#010x}, expected {expected_magic:#010x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    if ndims != 3 {
        return Err(data_err(path, format!("expected 3 dimensions, header declares {ndims}")));
    }
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(data_err(path, "truncated dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let (n, d) = (dims[0], dims[1].checked_mul(dims[2]));
    let total = d.and_then(|d| d.checked_mul(n)).ok_or_else(|| data_err(path, "dimension overflow"))?;
    let d = d.unwrap_or_default();
    if n == 0 || d == 0 {
        return Err(data_err(path, format!("empty dataset with dims {dims:?}")));
    }
    let payload = &bytes[header_len..];
    if payload.len() < total {
        return Err(data_err(
            path,
            format!("payload has {} bytes, dims {dims:?} need {total}", payload.len()),
        ));
    }
    let data = payload[..total].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![n, d], data)?)
}

/// Reads an IDX image file, optionally keeping only its first `max_items`.
pub fn load_idx(path: impl AsRef<Path>, expected_magic: u32, max_items: Option<usize>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut images = parse_idx(&bytes, expected_magic, path)?;
    if let Some(m) = max_items.filter(|&m| m > 0 && m < images.rows()) {
        images = images.slice_rows(0, m);
    }
    Ok(images)
}

/// Encodes `n` images of `rows × cols` bytes as an IDX file.
pub fn encode_idx(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if pixels.len() != n * rows * cols {
        return Err(Error::InvalidInput(format!(
            "{} pixels do not match {n}×{rows}×{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [n, rows, cols] {
        let dim = u32::try_from(dim).map_err(|_| Error::InvalidInput(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx(path: impl AsRef<Path>, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_idx(pixels, n, rows, cols)?).map_err(|e| Error::io(path, e))
}

/// Quantizes `[0, 1]` values to bytes, rounding half up.
pub fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Horizontal stripes: each image row is either dark or a constant
    /// intensity drawn from `U[0.6, 1]`.
    Bars,
    /// A single Gaussian bump centred on a random pixel.
    Blobs,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bars" => Some(SyntheticKind::Bars),
            "blobs" => Some(SyntheticKind::Blobs),
            _ => None,
        }
    }
}

/// `n` synthetic 8-bit `side × side` images, deterministic in `rng`.
pub fn make_synthetic<R: Rng + ?Sized>(kind: SyntheticKind, n: usize, side: usize, rng: &mut R) -> Result<Tensor> {
    if side < 4 || n == 0 {
        return Err(Error::InvalidInput(format!("synthetic data needs side ≥ 4 and n ≥ 1, got {side}, {n}")));
    }
    let d = side * side;
    let mut data = vec![0.0; n * d];
    for img in data.chunks_mut(d) {
        match kind {
            SyntheticKind::Bars => {
                let forced = rng.random_range(0..side);
                for (r, row) in img.chunks_mut(side).enumerate() {
                    if r == forced || rng.random_bool(0.4) {
                        row.fill(rng.random_range(0.6..=1.0));
                    }
                }
            }
            SyntheticKind::Blobs => {
                let (cy, cx) = (rng.random_range(0..side) as f64, rng.random_range(0..side) as f64);
                let width = rng.random_range(1.0..=side as f64 / 4.0);
                let amp = rng.random_range(0.6..=1.0);
                for (i, v) in img.iter_mut().enumerate() {
                    let (y, x) = ((i / side) as f64, (i % side) as f64);
                    let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                    *v = amp * (-r2 / (2.0 * width * width)).exp();
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = snap_to_grid(*v));
    Ok(Tensor::new(vec![n, d], data)?)
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx(PathBuf),
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        side: usize,
        seed: u64,
    },
}

impl DataSource {
    /// Parses `synthetic:<bars|blobs>:<n>:<side>:<seed>` or a file path.
    /// Relative paths are prefixed with `$NEGVAE_DATA_DIR` when it is set.
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("synthetic:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let bad = || Error::InvalidInput(format!("malformed synthetic source `{spec}`"));
            if parts.len() != 4 {
                return Err(bad());
            }
            return Ok(DataSource::Synthetic {
                kind: SyntheticKind::parse(parts[0]).ok_or_else(bad)?,
                n: parts[1].parse().map_err(|_| bad())?,
                side: parts[2].parse().map_err(|_| bad())?,
                seed: parts[3].parse().map_err(|_| bad())?,
            });
        }
        let path = PathBuf::from(spec);
        let path = match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if path.is_relative() => Path::new(&dir).join(path),
            _ => path,
        };
        Ok(DataSource::Idx(path))
    }

    pub fn load(&self, name: &str, split: Split, max_items: Option<usize>) -> Result<Dataset> {
        let images = match self {
            DataSource::Idx(path) => load_idx(path, IDX_IMAGES_MAGIC, max_items)?,
            DataSource::Synthetic { kind, n, side, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let n = max_items.filter(|&m| m > 0).map_or(*n, |m| m.min(*n));
                make_synthetic(*kind, n, *side, &mut rng)?
            }
        };
        Dataset::new(images, name, split)
    }
}

/// Seeded per-epoch permutation over `n` items, yielding full batches only.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    n: usize,
    batch_size: usize,
    seed: u64,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::InvalidInput("batching needs n ≥ 1 and batch_size ≥ 1".into()));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            perm: Vec::new(),
            cursor: usize::MAX,
        })
    }

    /// Number of full batches per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    /// Resets to the permutation determined by `(seed, epoch)`.
    pub fn start_epoch(&mut self, epoch: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        self.perm = (0..self.n).collect();
        self.perm.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Indices of the next full batch, or `None` at the end of the epoch.
    pub fn next_indices(&mut self) -> Option<&[usize]> {
        let end = self.cursor.checked_add(self.batch_size)?;
        if end > self.perm.len() {
            return None;
        }
        let start = self.cursor;
        self.cursor = end;
        Some(&self.perm[start..end])
    }

    pub fn next_batch(&mut self, data: &Dataset) -> Option<Tensor> {
        let idx = self.next_indices()?.to_vec();
        Some(data.images.gather_rows(&idx))
    }
}
