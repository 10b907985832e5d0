//! Datasets: the two-moons generator and an IDX (MNIST format) reader.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::metrics::GridGeometry;
use crate::rng;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic {found} (expected {expected})")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated payload ({got} bytes, need {need})")]
    TruncatedPayload { path: PathBuf, got: usize, need: usize },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub data_range: (f64, f64),
    pub geometry: GridGeometry,
    pub classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.geometry.len()
    }

    pub fn range_width(&self) -> f64 {
        self.data_range.1 - self.data_range.0
    }

    /// Affine copy with `data_range` mapped onto `[0, 1]`.
    pub fn to_unit(&self) -> Dataset {
        let (lo, w) = (self.data_range.0, self.range_width());
        Dataset {
            features: self.features.iter().map(|x| x.iter().map(|v| (v - lo) / w).collect()).collect(),
            data_range: (0.0, 1.0),
            ..self.clone()
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

/// Two interleaved half circles with Gaussian jitter, shuffled by `seed`.
/// Label 0 is the upper arc, label 1 the lower; counts differ by at most one.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let n0 = n.div_ceil(2);
    let n1 = n - n0;
    let arc = |m: usize, k: usize| if m > 1 { std::f64::consts::PI * k as f64 / (m - 1) as f64 } else { 0.0 };
    let mut points: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for k in 0..n0 {
        let t = arc(n0, k);
        points.push((vec![t.cos(), t.sin()], 0));
    }
    for k in 0..n1 {
        let t = arc(n1, k);
        points.push((vec![1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let mut r = rng::stream(seed, 0x4d4f4f4e);
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("noise is finite");
        for (p, _) in &mut points {
            for v in p.iter_mut() {
                *v += normal.sample(&mut r);
            }
        }
    }
    points.shuffle(&mut r);
    let range = (-2.0, 3.0);
    Dataset {
        features: points.iter().map(|(p, _)| p.iter().map(|v| v.clamp(range.0, range.1)).collect()).collect(),
        labels: points.iter().map(|(_, l)| *l).collect(),
        data_range: range,
        geometry: GridGeometry::Flat { len: 2 },
        classes: 2,
        name: "two_moons".into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn header(path: &Path, bytes: &[u8], words: usize, magic: u32) -> Result<Vec<usize>, DataError> {
    if bytes.len() < 4 * words {
        return Err(DataError::TruncatedPayload { path: path.into(), got: bytes.len(), need: 4 * words });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != magic {
        return Err(DataError::BadMagic { path: path.into(), found: word(0), expected: magic });
    }
    Ok((1..words).map(|i| word(i) as usize).collect())
}

fn payload<'a>(path: &Path, bytes: &'a [u8], offset: usize, need: usize) -> Result<&'a [u8], DataError> {
    let got = bytes.len() - offset;
    if got < need {
        return Err(DataError::TruncatedPayload { path: path.into(), got, need });
    }
    if got > need {
        return Err(DataError::TrailingBytes { path: path.into(), extra: got - need });
    }
    Ok(&bytes[offset..])
}

/// Reads an IDX image file (magic 2051, `n × rows × cols` u8) and its label
/// file (magic 2049). Pixels keep their `[0, 255]` range.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = read(ip)?;
    let dims = header(ip, &ib, 4, IMAGE_MAGIC)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let d = rows * cols;
    let pixels = payload(ip, &ib, 16, n * d)?;

    let lb = read(lp)?;
    let ln = header(lp, &lb, 2, LABEL_MAGIC)?[0];
    if ln != n {
        return Err(DataError::CountMismatch { images: n, labels: ln });
    }
    let labels: Vec<usize> = payload(lp, &lb, 8, n)?.iter().map(|&b| b as usize).collect();

    let name = ip.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Dataset {
        features: pixels.chunks(d.max(1)).take(n).map(|c| c.iter().map(|&b| b as f64).collect()).collect(),
        classes: labels.iter().max().map_or(0, |m| m + 1),
        labels,
        data_range: (0.0, 255.0),
        geometry: GridGeometry::Grid { height: rows, width: cols },
        name,
    })
}
