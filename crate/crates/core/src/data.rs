//! Datasets: MNIST IDX files, CIFAR-10 binary batches, synthetic smooth
//! filters, patch sampling and seeded subsetting.
//!
//! Images are held as NHWC [`Tensor4`] batches with pixels scaled to
//! `[0, 1]`. CIFAR-10 records store the red, green and blue planes one
//! after another; they are interleaved into HWC order on load.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor4};
use crate::seed::rng_from_seed;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub source: String,
    pub subset_seed: Option<u64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: SplitInfo,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize, source: impl Into<String>) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} images but {} labels", images.batch(), labels.len()),
            ));
        }
        if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelRange {
                label: label as u32,
                classes,
                record,
            });
        }
        let count = labels.len();
        Ok(Self {
            images,
            labels,
            classes,
            split: SplitInfo {
                source: source.into(),
                subset_seed: None,
                count,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattened images, one per row, in NHWC order.
    pub fn to_matrix(&self) -> Matrix {
        self.images.as_matrix()
    }

    /// `n` examples drawn without replacement, kept in their original
    /// order. Asking for at least the full size returns everything.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if n < self.len() {
            let mut rng = rng_from_seed(seed);
            idx.partial_shuffle(&mut rng, n);
            idx.truncate(n);
            idx.sort_unstable();
        }
        Dataset {
            images: self.images.select(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: SplitInfo {
                source: self.split.source.clone(),
                subset_seed: Some(seed),
                count: idx.len(),
            },
        }
    }

    /// Label counts per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// A parsed unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len(), "file too short for an IDX magic number"));
    }
    let word = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
    let magic = word(0);
    let rank = match magic {
        IDX_LABELS_MAGIC => 1,
        IDX_IMAGES_MAGIC => 3,
        other => return Err(format_err(path, 0, format!("bad magic number {other:#010x}"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(path, bytes.len(), format!("header needs {header} bytes")));
    }
    let dims: Vec<usize> = (0..rank).map(|k| word(4 + 4 * k) as usize).collect();
    let need = dims.iter().product::<usize>();
    let have = bytes.len() - header;
    if have < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated: header promises {need} data bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(format_err(path, header + need, format!("{} trailing bytes", have - need)));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_file(path)?, path)
}

pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&array.magic.to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    write_file(path, &encode_idx(array))
}

fn to_unit(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// Quantizes `[0, 1]` pixels back to bytes.
pub fn to_bytes(pixels: &[f64]) -> Vec<u8> {
    pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// Loads an IDX image file and its matching label file. Labels must be
/// below 10.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images)?;
    if img.magic != IDX_IMAGES_MAGIC {
        return Err(format_err(images, 0, "expected an image file (magic 0x00000803)"));
    }
    let lab = read_idx(labels)?;
    if lab.magic != IDX_LABELS_MAGIC {
        return Err(format_err(labels, 0, "expected a label file (magic 0x00000801)"));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(format_err(
            labels,
            4,
            format!("{} labels for {n} images", lab.dims[0]),
        ));
    }
    if let Some((record, &l)) = lab.data.iter().enumerate().find(|(_, &l)| l >= 10) {
        return Err(Error::LabelRange {
            label: u32::from(l),
            classes: 10,
            record,
        });
    }
    let images_t = Tensor4::new(n, h, w, 1, to_unit(&img.data))?;
    Dataset::new(
        images_t,
        lab.data.iter().map(|&l| l as usize).collect(),
        10,
        images.display().to_string(),
    )
}

/// Writes a single-channel dataset as an IDX image/label pair.
pub fn write_idx_dataset(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (n, h, w, c) = ds.images.dims();
    if c != 1 {
        return Err(Error::shape("write_idx_dataset", "IDX images are single-channel"));
    }
    write_idx(
        images,
        &IdxArray {
            magic: IDX_IMAGES_MAGIC,
            dims: vec![n, h, w],
            data: to_bytes(ds.images.as_slice()),
        },
    )?;
    write_idx(
        labels,
        &IdxArray {
            magic: IDX_LABELS_MAGIC,
            dims: vec![n],
            data: ds.labels.iter().map(|&l| l as u8).collect(),
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// MNIST from a directory holding the four standard uncompressed files.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(format_err(
            path,
            offset,
            format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3 * plane);
    for (record, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::LabelRange {
                label: u32::from(rec[0]),
                classes: 10,
                record,
            });
        }
        labels.push(rec[0] as usize);
        let px = &rec[1..];
        for p in 0..plane {
            for c in 0..3 {
                data.push(f64::from(px[c * plane + p]) / 255.0);
            }
        }
    }
    let images = Tensor4::new(n, CIFAR_SIDE, CIFAR_SIDE, 3, data)?;
    Dataset::new(images, labels, 10, path.display().to_string())
}

/// One CIFAR-10 binary batch file.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    parse_cifar10(&read_file(path)?, path)
}

pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    let (n, h, w, c) = ds.images.dims();
    if (h, w, c) != (CIFAR_SIDE, CIFAR_SIDE, 3) {
        return Err(Error::shape("encode_cifar10", "CIFAR-10 images are 32x32x3"));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for b in 0..n {
        out.push(ds.labels[b] as u8);
        let px = to_bytes(ds.images.image(b));
        for ch in 0..3 {
            out.extend((0..plane).map(|p| px[p * 3 + ch]));
        }
    }
    Ok(out)
}

pub fn write_cifar10(path: &Path, ds: &Dataset) -> Result<()> {
    write_file(path, &encode_cifar10(ds)?)
}

/// CIFAR-10 from the standard `cifar-10-batches-bin` directory.
pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|k| dir.join(format!("data_batch_{k}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let ds = load_cifar10(f)?;
        images.extend_from_slice(ds.images.as_slice());
        labels.extend(ds.labels);
    }
    let n = labels.len();
    Dataset::new(
        Tensor4::new(n, CIFAR_SIDE, CIFAR_SIDE, 3, images)?,
        labels,
        10,
        dir.display().to_string(),
    )
}

/// `count` patches of `height × width` drawn uniformly over images and
/// positions, each vectorized in (row, column, channel) order.
pub fn extract_patches(images: &Tensor4, height: usize, width: usize, count: usize, seed: u64) -> Result<Matrix> {
    let (n, ih, iw, c) = images.dims();
    if height == 0 || width == 0 || height > ih || width > iw {
        return Err(Error::shape(
            "extract_patches",
            format!("patch {height}x{width} does not fit images of {ih}x{iw}"),
        ));
    }
    if n == 0 && count > 0 {
        return Err(Error::InsufficientData("no images to sample patches from".into()));
    }
    let mut rng = rng_from_seed(seed);
    let row_len = width * c;
    let mut data = Vec::with_capacity(count * height * row_len);
    for _ in 0..count {
        let b = rng.random_range(0..n);
        let y0 = rng.random_range(0..=ih - height);
        let x0 = rng.random_range(0..=iw - width);
        let img = images.image(b);
        for y in y0..y0 + height {
            let start = (y * iw + x0) * c;
            data.extend_from_slice(&img[start..start + row_len]);
        }
    }
    Matrix::new(count, height * width * c, data)
}

/// A Gabor filter of extent `height × width`, replicated over `channels`,
/// vectorized in (row, column, channel) order and scaled to unit norm.
pub fn gabor_filter(
    height: usize,
    width: usize,
    channels: usize,
    theta: f64,
    sigma: f64,
    wavelength: f64,
    phase: f64,
) -> Vec<f64> {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let (s, co) = theta.sin_cos();
    let mut v = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        for x in 0..width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * co + dy * s;
            let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() * (2.0 * PI * u / wavelength + phase).cos();
            v.extend(std::iter::repeat_n(g, channels));
        }
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= norm);
    v
}

/// Ground-truth smooth filters with additive noise.
#[derive(Clone, Debug)]
pub struct SyntheticSmoothTask {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Unit-norm Gabor filters, one per column.
    pub filters: Matrix,
    pub noise: f64,
}

impl SyntheticSmoothTask {
    pub fn new(height: usize, width: usize, n_filters: usize, noise: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let scale = height.min(width) as f64;
        let cols: Vec<Vec<f64>> = (0..n_filters)
            .map(|_| {
                gabor_filter(
                    height,
                    width,
                    1,
                    rng.random_range(0.0..PI),
                    rng.random_range(0.2..0.35) * scale,
                    rng.random_range(0.6..1.2) * scale,
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let filters = Matrix::from_fn(height * width, n_filters, |r, c| cols[c][r]);
        Self {
            seed,
            height,
            width,
            filters,
            noise,
        }
    }

    /// The filters with independent Gaussian noise of standard deviation
    /// `noise` per entry.
    pub fn observe(&self) -> Matrix {
        let n = Matrix::random_normal(self.filters.rows(), self.filters.cols(), self.noise, &mut rng_from_seed(self.seed ^ 1));
        self.filters.add(&n).expect("same shape")
    }
}

/// Two Gaussian blobs separated along a random direction; labels 0 and 1.
pub fn separable_blobs(n: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let angle: f64 = rng.random_range(0.0..2.0 * PI);
    let (s, c) = angle.sin_cos();
    let noise = Matrix::random_normal(n, 2, 0.5, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Matrix::from_fn(n, 2, |r, k| {
        let sign = if labels[r] == 1 { 1.0 } else { -1.0 };
        let centre = if k == 0 { 3.0 * c } else { 3.0 * s };
        sign * centre + noise.get(r, k).clamp(-1.4, 1.4)
    });
    (x, labels)
}
