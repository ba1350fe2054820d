// SPDX-License-Identifier: Apache-2.0

//! MNIST ingestion from local IDX files and deterministic subsampling.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const CLASS_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images as raw bytes (`count x rows*cols`), labels in `0..10`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array2<u8>,
    pub labels: Vec<u8>,
    pub image_rows: usize,
    pub image_cols: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Array2<u8>,
        labels: Vec<u8>,
        image_rows: usize,
        image_cols: usize,
        split: Split,
    ) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if images.ncols() != image_rows * image_cols {
            return Err(Error::Dimension(format!(
                "image width {} does not match {image_rows}x{image_cols}",
                images.ncols()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| usize::from(l) >= CLASS_COUNT) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..10")));
        }
        Ok(Self {
            images,
            labels,
            image_rows,
            image_cols,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.ncols()
    }

    /// Pixels of the selected rows scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> (Array2<f32>, Vec<u8>) {
        let mut x = Array2::<f32>::zeros((indices.len(), self.features()));
        for (r, &i) in indices.iter().enumerate() {
            x.row_mut(r)
                .assign(&self.images.row(i).mapv(|p| f32::from(p) / 255.0));
        }
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn all(&self) -> (Array2<f32>, Vec<u8>) {
        (self.images.mapv(|p| f32::from(p) / 255.0), self.labels.clone())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let images = self.images.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self {
            images,
            labels,
            image_rows: self.image_rows,
            image_cols: self.image_cols,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut counts = [0; CLASS_COUNT];
        for &l in &self.labels {
            counts[usize::from(l)] += 1;
        }
        counts
    }

    /// Deterministic split into `(rest, held_out)` with `held_out` of size `k`.
    pub fn split_off(&self, k: usize, seed: u64) -> Result<(Self, Self)> {
        if k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {k} of {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seed::rng(seed));
        let (held, rest) = order.split_at(k);
        let (mut held, mut rest) = (held.to_vec(), rest.to_vec());
        held.sort_unstable();
        rest.sort_unstable();
        Ok((self.select(&rest), self.select(&held)))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::corrupt(path, "truncated IDX header"));
    }
    let found = be_u32(&bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::corrupt(path, "truncated IDX header"));
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(&bytes, 4 + 4 * d) as usize).collect();
    let expected: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::corrupt(
            path,
            format!(
                "payload holds {} bytes, dimensions {:?} require {expected}",
                payload.len(),
                shape
            ),
        ));
    }
    Ok((shape, payload.to_vec()))
}

/// Parse a big-endian IDX image file (magic `0x803`) and label file (`0x801`).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (ishape, pixels) = read_idx(images_path, IMAGES_MAGIC, 3)?;
    let (lshape, labels) = read_idx(labels_path, LABELS_MAGIC, 1)?;
    if ishape[0] != lshape[0] {
        return Err(Error::Dimension(format!(
            "{} images in {} but {} labels in {}",
            ishape[0],
            images_path.display(),
            lshape[0],
            labels_path.display()
        )));
    }
    let images = Array2::from_shape_vec((ishape[0], ishape[1] * ishape[2]), pixels)
        .expect("payload length checked");
    Dataset::new(images, labels, ishape[1], ishape[2], split)
}

/// Write a dataset back out as an IDX image/label pair.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), ds.image_rows, ds.image_cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.iter().copied());
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx(&images, &labels, split)
}

/// Deterministic subset of `k` samples. Stratified subsets keep per-class
/// counts within one of each other (as far as the classes allow).
pub fn subsample(ds: &Dataset, k: usize, seed: u64, stratified: bool) -> Result<Dataset> {
    if k > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {k} samples from {}",
            ds.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let mut chosen = if stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASS_COUNT];
        for (i, &l) in ds.labels.iter().enumerate() {
            by_class[usize::from(l)].push(i);
        }
        for members in &mut by_class {
            members.shuffle(&mut rng);
        }
        // Round-robin over classes in a shuffled order until k are taken.
        let mut class_order: Vec<usize> = (0..CLASS_COUNT).collect();
        class_order.shuffle(&mut rng);
        let mut taken = [0usize; CLASS_COUNT];
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let mut progressed = false;
            for &c in &class_order {
                if out.len() == k {
                    break;
                }
                if taken[c] < by_class[c].len() {
                    out.push(by_class[c][taken[c]]);
                    taken[c] += 1;
                    progressed = true;
                }
            }
            debug_assert!(progressed);
        }
        out
    } else {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(k);
        order
    };
    chosen.sort_unstable();
    Ok(ds.select(&chosen))
}
