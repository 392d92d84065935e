//! MNIST / Fashion-MNIST ingestion from IDX files, plus batching.
//!
//! IDX layout: a big-endian `u32` magic `0x0000080n` (unsigned bytes, rank
//! `n`), `n` big-endian `u32` dimensions, then the payload bytes. Files
//! ending in `.gz` are inflated transparently.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";
pub const IDX_FILES: [&str; 4] = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS];

pub const NUM_CLASSES: usize = 10;

/// A decoded IDX container of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let be = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    if bytes.len() < 4 {
        return Err(Error::Length {
            what: "IDX header".into(),
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = be(0);
    let rank = (magic & 0xff) as usize;
    if magic & 0xffff_ff00 != 0x0000_0800 || rank == 0 {
        return Err(Error::Format { magic });
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Length {
            what: "IDX dimensions".into(),
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank).map(|i| be(4 + 4 * i) as usize).collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Length {
            what: format!("IDX payload for dims {dims:?}"),
            expected,
            found: payload.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Serializes bytes as an IDX container.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "payload size");
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&(0x0800u32 | dims.len() as u32).to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Reads an IDX file, inflating it when the name ends in `.gz`.
pub fn read_idx_file(path: &Path) -> Result<IdxArray> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "mnist")]
    Mnist,
    #[serde(rename = "fashion-mnist")]
    FashionMnist,
}

impl DatasetName {
    pub fn name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
        }
    }

    /// Canonical download location of the gzipped IDX files.
    pub fn base_url(self) -> &'static str {
        match self {
            DatasetName::Mnist => "https://ossci-datasets.s3.amazonaws.com/mnist",
            DatasetName::FashionMnist => {
                "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com"
            }
        }
    }

    /// Epoch count used for this dataset by default.
    pub fn default_epochs(self) -> usize {
        match self {
            DatasetName::Mnist => 25,
            DatasetName::FashionMnist => 35,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fashion_mnist" | "fmnist" => Ok(DatasetName::FashionMnist),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Images as flattened `[0, 1]` rows plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// e.g. `mnist/train`.
    pub name: String,
    /// Image file the split was read from (empty for synthetic splits).
    pub source: PathBuf,
}

impl DatasetSplit {
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        let split = Self {
            images,
            labels,
            name: name.into(),
            source: PathBuf::new(),
        };
        split.validate()?;
        Ok(split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.rows() != self.labels.len() {
            return Err(Error::Consistency(format!(
                "{}: {} images but {} labels",
                self.name,
                self.images.rows(),
                self.labels.len()
            )));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Consistency(format!(
                "{}: pixel {v} outside [0, 1]",
                self.name
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= NUM_CLASSES) {
            return Err(Error::Label {
                index: i,
                label: *l,
                classes: NUM_CLASSES,
            });
        }
        Ok(())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> DatasetSplit {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> DatasetSplit {
        DatasetSplit {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: format!("{}[subset {}]", self.name, indices.len()),
            source: self.source.clone(),
        }
    }
}

fn images_from_idx(idx: &IdxArray) -> Result<Tensor> {
    if idx.dims.len() < 2 {
        return Err(Error::Consistency(format!(
            "image file has dims {:?}, expected [n, rows, cols]",
            idx.dims
        )));
    }
    let n = idx.dims[0];
    let width: usize = idx.dims[1..].iter().product();
    let data = idx.data.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(n, width, data)
}

fn labels_from_idx(idx: &IdxArray) -> Result<Vec<usize>> {
    if idx.dims.len() != 1 {
        return Err(Error::Consistency(format!(
            "label file has dims {:?}, expected [n]",
            idx.dims
        )));
    }
    Ok(idx.data.iter().map(|&b| b as usize).collect())
}

/// Finds `file` (or `file.gz`) under `dir/<dataset>/` or directly in `dir`.
fn locate(dir: &Path, dataset: DatasetName, file: &str) -> Result<PathBuf> {
    let nested = dir.join(dataset.name());
    for base in [&nested, dir] {
        for name in [file.to_string(), format!("{file}.gz")] {
            let p = base.join(name);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::MissingFile {
        path: nested.join(file),
    })
}

fn load_split(
    dir: &Path,
    dataset: DatasetName,
    images: &str,
    labels: &str,
    part: &str,
) -> Result<DatasetSplit> {
    let image_path = locate(dir, dataset, images)?;
    let label_path = locate(dir, dataset, labels)?;
    let x = images_from_idx(&read_idx_file(&image_path)?)?;
    let y = labels_from_idx(&read_idx_file(&label_path)?)?;
    if x.rows() != y.len() {
        return Err(Error::Consistency(format!(
            "{} has {} images but {} has {} labels",
            image_path.display(),
            x.rows(),
            label_path.display(),
            y.len()
        )));
    }
    let split = DatasetSplit {
        images: x,
        labels: y,
        name: format!("{dataset}/{part}"),
        source: image_path,
    };
    split.validate()?;
    Ok(split)
}

/// Loads `(train, val)`; the official 10k test files serve as validation.
pub fn load_dataset(name: DatasetName, dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let train = load_split(dir, name, TRAIN_IMAGES, TRAIN_LABELS, "train")?;
    let val = load_split(dir, name, TEST_IMAGES, TEST_LABELS, "val")?;
    Ok((train, val))
}

/// Sample order for one epoch: identity, or a permutation fixed by `seed`.
pub fn epoch_order(n: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Mini-batches over one epoch; the last batch may be short.
pub struct BatchIter<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let x = self.split.images.gather_rows(idx);
        let y = idx.iter().map(|&i| self.split.labels[i]).collect();
        Some((x, y))
    }
}

pub fn batch_iter(
    split: &DatasetSplit,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be >= 1".into()));
    }
    Ok(BatchIter {
        split,
        order: epoch_order(split.len(), seed, shuffle),
        batch_size,
        pos: 0,
    })
}
