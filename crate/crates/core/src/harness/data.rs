//! Synthetic classification tasks and the IDX binary format.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::HarnessError;
use crate::nn::Batch;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Spirals,
    Idx,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Blobs => "synthetic-blobs",
            DatasetKind::Spirals => "synthetic-spirals",
            DatasetKind::Idx => "idx-file",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [DatasetKind::Blobs, DatasetKind::Spirals, DatasetKind::Idx]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

/// Parameters of a generated task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: DatasetKind,
    /// Total examples before the train/test split.
    pub n: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Fraction of generated examples kept for training.
pub const TRAIN_FRACTION_NUM: usize = 9;
pub const TRAIN_FRACTION_DEN: usize = 10;

/// Spiral arms sweep this many full turns from the inner to the outer radius.
pub const SPIRAL_TURNS: f64 = 1.0;
pub const SPIRAL_INNER_RADIUS: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Batch,
    pub test: Batch,
}

/// Class-balanced synthetic data, shuffled and split 90/10.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Split, HarnessError> {
    let c = spec.num_classes;
    let bad = |m: String| Err(HarnessError::Config { line: None, message: m });
    if c < 2 {
        return bad(format!("num_classes must be at least 2, got {c}"));
    }
    if spec.n < 10 * c {
        return bad(format!("n = {} is below 10 examples per class for {c} classes", spec.n));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return bad(format!(
            "noise must be a finite non-negative number, got {}",
            spec.noise
        ));
    }
    let d = spec.input_dim;
    match spec.kind {
        DatasetKind::Spirals if d != 2 => return bad(format!("spirals are 2-dimensional, got input_dim {d}")),
        DatasetKind::Blobs if d < 2 => return bad(format!("blobs need input_dim >= 2, got {d}")),
        DatasetKind::Idx => return bad("idx-file data is loaded, not generated".into()),
        _ => {}
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % c;
        let k = i / c;
        let per_class = (spec.n - class).div_ceil(c);
        let mut x = vec![0.0; d];
        match spec.kind {
            DatasetKind::Spirals => {
                let t = (k as f64 + 0.5) / per_class as f64;
                let r = SPIRAL_INNER_RADIUS + (1.0 - SPIRAL_INNER_RADIUS) * t;
                let theta = TAU * (class as f64 / c as f64 + SPIRAL_TURNS * t);
                x[0] = r * theta.cos();
                x[1] = r * theta.sin();
            }
            _ => {
                let theta = TAU * class as f64 / c as f64;
                x[0] = theta.cos();
                x[1] = theta.sin();
            }
        }
        for v in x.iter_mut() {
            *v += spec.noise * normal.sample(&mut rng);
        }
        rows.push((x, class));
    }
    rows.shuffle(&mut rng);

    let n_train = spec.n * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
    let test_rows = rows.split_off(n_train);
    Ok(Split {
        train: to_batch(rows, d)?,
        test: to_batch(test_rows, d)?,
    })
}

fn to_batch(rows: Vec<(Vec<f64>, usize)>, d: usize) -> Result<Batch, HarnessError> {
    let n = rows.len();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for (r, l) in rows {
        x.extend(r);
        y.push(l);
    }
    Ok(Batch::new(
        Tensor::from_vec(vec![n, d], x).map_err(crate::nn::NnError::from)?,
        y,
    )?)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &str, offset: usize, message: String) -> HarnessError {
    HarnessError::Format {
        path: path.to_string(),
        offset,
        message,
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32, HarnessError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            format_err(
                path,
                bytes.len(),
                format!("header truncated: need {} bytes, file has {}", offset + 4, bytes.len()),
            )
        })
}

fn check_magic(bytes: &[u8], want: u32, path: &str) -> Result<(), HarnessError> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != want {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{want:08x}"),
        ));
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize, path: &str) -> Result<(), HarnessError> {
    let actual = bytes.len() - header;
    if actual != expected {
        let what = if actual < expected { "truncated" } else { "oversized" };
        return Err(format_err(
            path,
            header + expected.min(actual),
            format!("payload {what}: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok(())
}

/// Images as rows of pixels scaled to `[0, 1]`; `path` labels errors.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<Tensor, HarnessError> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(format_err(
            path,
            4,
            format!("empty dimensions ({count}, {rows}, {cols})"),
        ));
    }
    let width = rows * cols;
    check_payload(bytes, 16, count * width, path)?;
    let data = bytes[16..].iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(Tensor::from_vec(vec![count, width], data).map_err(crate::nn::NnError::from)?)
}

/// Labels, each checked against `num_classes`.
pub fn parse_idx_labels(bytes: &[u8], num_classes: usize, path: &str) -> Result<Vec<usize>, HarnessError> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    check_payload(bytes, 8, count, path)?;
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(index, &l)| {
            if (l as usize) < num_classes {
                Ok(l as usize)
            } else {
                Err(HarnessError::Validation(format!(
                    "{path}: label {l} at record {index} is not below {num_classes} classes"
                )))
            }
        })
        .collect()
}

/// An image file and its label file.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Batch, HarnessError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| HarnessError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    };
    let x = parse_idx_images(&read(images)?, &images.display().to_string())?;
    let y = parse_idx_labels(&read(labels)?, num_classes, &labels.display().to_string())?;
    if x.rows() != y.len() {
        return Err(HarnessError::Validation(format!(
            "{} images but {} labels",
            x.rows(),
            y.len()
        )));
    }
    Ok(Batch::new(x, y)?)
}

/// Deterministic 90/10 split of loaded data.
pub fn split(data: &Batch, seed: u64) -> Result<Split, HarnessError> {
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    let n_train = n * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
    if n_train == 0 || n_train == n {
        return Err(HarnessError::Validation(format!("{n} examples are too few to split")));
    }
    Ok(Split {
        train: crate::parallel::gather(data, &idx[..n_train])?,
        test: crate::parallel::gather(data, &idx[n_train..])?,
    })
}
