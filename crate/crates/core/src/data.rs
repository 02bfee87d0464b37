//! Dataset construction: IDX ingestion, two-class subsets, unit-norm rows and synthetic data.
//!
//! IDX files are big-endian: two zero bytes, a type code (only `0x08`, unsigned byte, is
//! accepted), the number of dimensions, one `u32` per dimension, then the row-major payload.
//! Image files carry magic `0x00000803`, label files `0x00000801`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::scalar::{lit, Real};

pub const IDX_UBYTE: u8 = 0x08;
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// A decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let truncated = |needed: usize| Error::TruncatedFile {
        path: path.to_path_buf(),
        needed,
        have: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::UnsupportedTypeCode {
            path: path.to_path_buf(),
            code: bytes[2],
        });
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    let needed = header + payload;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..needed].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    parse_idx(&fs::read(path)?, path)
}

/// Serializes an unsigned-byte IDX array.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "IDX payload does not match dimensions");
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&[0, 0, IDX_UBYTE, dims.len() as u8]);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn write_idx(path: impl AsRef<Path>, dims: &[usize], data: &[u8]) -> Result<()> {
    fs::write(path, encode_idx(dims, data))?;
    Ok(())
}

/// Grayscale images with their class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, image-major.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn new(rows: usize, cols: usize, images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let count = labels.len();
        if images.len() != count * rows * cols {
            return Err(Error::InvalidData(format!(
                "{} labels but {} image bytes of {rows}x{cols}",
                count,
                images.len()
            )));
        }
        Ok(Self {
            count,
            rows,
            cols,
            images,
            labels,
        })
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.images[i * size..(i + 1) * size]
    }
}

/// Reads an IDX3 image file and its IDX1 label file.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<RawImages> {
    let img = read_idx(images.as_ref())?;
    if img.dims.len() != 3 {
        return Err(Error::BadMagic {
            path: images.as_ref().to_path_buf(),
        });
    }
    let lab = read_idx(labels.as_ref())?;
    if lab.dims.len() != 1 {
        return Err(Error::BadMagic {
            path: labels.as_ref().to_path_buf(),
        });
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::InvalidData(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    RawImages::new(img.dims[1], img.dims[2], img.data, lab.data)
}

fn class_indices(raw: &RawImages, class: u8, needed: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = (0..raw.count).filter(|&i| raw.labels[i] == class).collect();
    if idx.len() < needed {
        return Err(Error::InsufficientClassSamples {
            class,
            available: idx.len(),
            requested: needed,
        });
    }
    idx.shuffle(rng);
    idx.truncate(needed);
    Ok(idx)
}

fn assemble<T: Real>(raw: &RawImages, picks: &[(usize, T)]) -> Result<Dataset<T>> {
    let d = raw.rows * raw.cols;
    let scale: T = lit(1.0 / 255.0);
    let x = DMatrix::from_fn(picks.len(), d, |i, j| lit::<T>(raw.image(picks[i].0)[j] as f64) * scale);
    let y = DVector::from_iterator(picks.len(), picks.iter().map(|p| p.1));
    Dataset::new(x, y)
}

/// Draws `n_per_class` images of each class without replacement, flattens them to rows
/// scaled into `[0, 1]`, labels the first class `0` and the second `1`, and shuffles.
pub fn make_binary_subset<T: Real>(
    raw: &RawImages,
    classes: (u8, u8),
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    Ok(draw_subsets(raw, classes, &[n_per_class], seed)?.remove(0))
}

/// Disjoint train and test subsets drawn from the same pool.
pub fn make_binary_split<T: Real>(
    raw: &RawImages,
    classes: (u8, u8),
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut parts = draw_subsets(raw, classes, &[train_per_class, test_per_class], seed)?;
    let test = parts.pop().expect("two parts");
    Ok((parts.pop().expect("two parts"), test))
}

fn draw_subsets<T: Real>(raw: &RawImages, classes: (u8, u8), sizes: &[usize], seed: u64) -> Result<Vec<Dataset<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = sizes.iter().sum();
    let first = class_indices(raw, classes.0, total, &mut rng)?;
    let second = class_indices(raw, classes.1, total, &mut rng)?;
    let mut out = Vec::with_capacity(sizes.len());
    let mut lo = 0;
    for &size in sizes {
        let hi = lo + size;
        let mut picks: Vec<(usize, T)> = first[lo..hi]
            .iter()
            .map(|&i| (i, T::zero()))
            .chain(second[lo..hi].iter().map(|&i| (i, T::one())))
            .collect();
        picks.shuffle(&mut rng);
        out.push(assemble(raw, &picks)?);
        lo = hi;
    }
    Ok(out)
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows<T: Real>(x: &DMatrix<T>) -> Result<DMatrix<T>> {
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let norm = row.norm();
        if !(norm > T::zero()) {
            return Err(Error::ZeroRow { row: i });
        }
        row /= norm;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// `+1, -1, +1, ...`
    Signs,
    /// Sign of a fixed random linear teacher.
    Teacher,
}

/// Unit-norm Gaussian rows with `+-1` labels.
pub fn synthetic<T: Real>(n: usize, d: usize, seed: u64, mode: LabelMode) -> Result<Dataset<T>> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidData("synthetic data needs n, d >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        loop {
            for j in 0..d {
                x[(i, j)] = StandardNormal.sample(&mut rng);
            }
            if x.row(i).norm() > 1e-12 {
                break;
            }
        }
    }
    let x = normalize_rows(&x)?;
    let y = match mode {
        LabelMode::Signs => DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 }),
        LabelMode::Teacher => {
            let mut teacher_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e55);
            let teacher = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut teacher_rng));
            let scores = &x * teacher;
            scores.map(|s| if s >= 0.0 { 1.0 } else { -1.0 })
        }
    };
    Dataset::new(x.map(lit::<T>), y.map(lit::<T>))
}
