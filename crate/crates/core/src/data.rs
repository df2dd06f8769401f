//! MNIST ingestion in the IDX format, the train/dev split and batching.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Size of the development split carved from the front of the training file.
pub const DEV_SIZE: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Images scaled to `[0, 1]` and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistDataset {
    pub split: Split,
    rows: usize,
    cols: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

/// How a batch's inputs are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLayout {
    /// `[b × rows·cols]`
    Flat,
    /// `[b × 1 × rows × cols]`
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar = f32> {
    pub inputs: Tensor<T>,
    pub targets: Vec<usize>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(path, io::Error::new(io::ErrorKind::UnexpectedEof, format!("file truncated while reading {what}")))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path, "header"))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{}: expected IDX magic {expected}, found {magic}",
            path.display()
        )));
    }
    Ok(())
}

/// Reads an images file: `(count, rows, cols, raw pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(truncated(path, "pixels"));
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(truncated(path, "labels"));
    }
    Ok(body[..n].to_vec())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut buf = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        buf.write_all(&v.to_be_bytes()).expect("vec write");
    }
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a matching images/labels pair, scaling pixels by `1/255`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<MnistDataset> {
    let (n, rows, cols, raw) = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if lab.len() != n {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            n,
            labels.display(),
            lab.len()
        )));
    }
    if let Some(&bad) = lab.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("{}: label {bad} outside 0..=9", labels.display())));
    }
    Ok(MnistDataset {
        split,
        rows,
        cols,
        pixels: raw.iter().map(|&p| p as f32 / 255.0).collect(),
        labels: lab.into_iter().map(usize::from).collect(),
    })
}

/// Loads `(train, test)` from a directory holding the four standard file
/// names, optionally with a `.gz` suffix.
pub fn load_mnist_dir(dir: &Path) -> Result<(MnistDataset, MnistDataset)> {
    let find = |name: &str| {
        let plain = dir.join(name);
        let gz = dir.join(format!("{name}.gz"));
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    };
    let train = load_idx(&find(TRAIN_IMAGES), &find(TRAIN_LABELS), Split::Train)?;
    let test = load_idx(&find(TEST_IMAGES), &find(TEST_LABELS), Split::Test)?;
    Ok((train, test))
}

/// Dev is the first 5000 examples in file order, train the remaining 55000.
pub fn split_train_dev(d: &MnistDataset) -> Result<(MnistDataset, MnistDataset)> {
    if d.len() != 60_000 || d.split != Split::Train {
        return Err(Error::Usage(format!(
            "split_train_dev needs the 60000-example training set, got {} {:?} examples",
            d.len(),
            d.split
        )));
    }
    let dev = d.slice(0..DEV_SIZE, Split::Dev);
    let train = d.slice(DEV_SIZE..d.len(), Split::Train);
    Ok((train, dev))
}

impl MnistDataset {
    /// Builds a dataset from already-scaled pixels.
    pub fn new(split: Split, rows: usize, cols: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::Consistency(format!(
                "{} pixels do not match {} labels of {}×{} images",
                pixels.len(),
                labels.len(),
                rows,
                cols
            )));
        }
        Ok(MnistDataset { split, rows, cols, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.rows * self.cols;
        &self.pixels[i * s..(i + 1) * s]
    }

    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> MnistDataset {
        let s = self.rows * self.cols;
        MnistDataset {
            split,
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[range.start * s..range.end * s].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    /// The first `n` examples (all of them when `n` exceeds the length).
    pub fn take(&self, n: usize) -> MnistDataset {
        self.slice(0..n.min(self.len()), self.split)
    }

    /// Gathers the given examples into a batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize], layout: InputLayout) -> Batch<T> {
        let s = self.rows * self.cols;
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::from_f64(p as f64)));
        }
        let shape = match layout {
            InputLayout::Flat => vec![indices.len(), s],
            InputLayout::Image => vec![indices.len(), 1, self.rows, self.cols],
        };
        Batch {
            inputs: Tensor::new(shape, data).expect("batch shape"),
            targets: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Example indices grouped into batches. Every index appears exactly once;
/// the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One epoch of batches over `d`.
pub fn batches<T: Scalar>(
    d: &MnistDataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    layout: InputLayout,
) -> Result<impl Iterator<Item = Batch<T>> + '_> {
    let groups = batch_indices(d.len(), batch_size, seed, shuffle)?;
    Ok(groups.into_iter().map(move |idx| d.batch(&idx, layout)))
}
