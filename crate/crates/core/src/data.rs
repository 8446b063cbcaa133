//! Datasets: CIFAR-10 binary batches, IDX files and a synthetic task that can
//! only be solved by learning displacements.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Labelled images stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.shape().n, labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside [0, {classes})")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn item_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    /// Images `items` as a batch in precision `T`.
    pub fn batch<T: Scalar>(&self, items: &[usize]) -> Tensor<T> {
        self.images.batch_slice(items).cast()
    }

    pub fn batch_labels(&self, items: &[usize]) -> Vec<usize> {
        items.iter().map(|&i| self.labels[i]).collect()
    }

    /// First `n` items (all when `n >= len`).
    pub fn truncated(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset {
            images: self.images.batch_slice(&idx),
            labels: self.batch_labels(&idx),
            classes: self.classes,
        }
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.images.shape();
        let count = (s.n * s.plane()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut std = vec![0.0; s.c];
        for c in 0..s.c {
            let m = (0..s.n).map(|n| self.images.plane(n, c).iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / count;
            let v = (0..s.n)
                .map(|n| self.images.plane(n, c).iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[c] = m;
            std[c] = v.sqrt();
        }
        (mean, std)
    }

    /// `x <- (x - mean[c]) / std[c]`; channels with zero spread are only centred.
    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) {
        let s = self.images.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let inv = if std[c] > 0.0 { 1.0 / std[c] } else { 1.0 };
                for v in self.images.plane_mut(n, c) {
                    *v = ((*v as f64 - mean[c]) * inv) as f32;
                }
            }
        }
    }
}

impl DataSplit {
    /// Normalises both splits with the training split's channel statistics.
    pub fn normalized(mut self) -> Self {
        let (mean, std) = self.train.channel_stats();
        self.train.normalize(&mean, &std);
        self.test.normalize(&mean, &std);
        self
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Parses one CIFAR-10 binary batch: records of a label byte followed by
/// 3x32x32 channel-major pixels.
pub fn parse_cifar10_batch(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            offset,
            message: format!(
                "truncated record: {} bytes is not a multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                message: format!("label byte {} is not in 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::from_vec(Shape::new(n, 3, CIFAR_SIDE, CIFAR_SIDE), pixels)?, labels, 10)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let n: usize = parts.iter().map(|d| d.len()).sum();
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for d in parts {
        labels.extend_from_slice(&d.labels);
        data.extend(d.images.into_vec());
    }
    Dataset::new(Tensor::from_vec(Shape::new(n, 3, CIFAR_SIDE, CIFAR_SIDE), data)?, labels, 10)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`, normalised
/// with the training split's channel statistics.
pub fn load_cifar10(dir: &Path) -> Result<DataSplit> {
    let train = (1..=5)
        .map(|i| parse_cifar10_batch(&read(&dir.join(format!("data_batch_{i}.bin")))?))
        .collect::<Result<Vec<_>>>()?;
    let test = parse_cifar10_batch(&read(&dir.join("test_batch.bin"))?)?;
    Ok(DataSplit {
        train: concat(train)?,
        test,
    }
    .normalized())
}

/// Parses an IDX file of unsigned bytes; returns its dimensions and payload.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "file ends inside the IDX magic".into(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad IDX magic {:02x} {:02x}", bytes[0], bytes[1]),
        });
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format {
            offset: 2,
            message: format!("IDX element type 0x{:02x} is not unsigned byte (0x08)", bytes[2]),
        });
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::Format {
            offset: 3,
            message: "IDX file declares zero dimensions".into(),
        });
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("file ends inside the {ndims}-dimension IDX header"),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|d| u32::from_be_bytes([d[0], d[1], d[2], d[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("payload has {} bytes, header declares {count}", payload.len()),
        });
    }
    Ok((dims, &payload[..count]))
}

/// Loads an IDX image file (`N x H x W` or `N x C x H x W`) and a label file
/// (`N`). Pixels are scaled to `[0, 1]`; the class count is `max label + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = read(images_path)?;
    let lb = read(labels_path)?;
    let (dims, pix) = parse_idx(&ib)?;
    let shape = match dims[..] {
        [n, h, w] => Shape::new(n, 1, h, w),
        [n, c, h, w] => Shape::new(n, c, h, w),
        _ => {
            return Err(Error::Format {
                offset: 3,
                message: format!("image file has {} dimensions, expected 3 or 4", dims.len()),
            })
        }
    };
    let (ldims, labels) = parse_idx(&lb)?;
    if ldims.len() != 1 || ldims[0] != shape.n {
        return Err(Error::Data(format!("label file dims {ldims:?} do not match {} images", shape.n)));
    }
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let data = pix.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(Tensor::from_vec(shape, data)?, labels, classes)
}

/// Parameters of the synthetic displacement task.
///
/// Every image holds a bright and a dark blob of identical shape at a random
/// position; the dark one sits `offset` pixels to the right of the bright one
/// (class 0) or to its left (class 1). Each blob on its own, and the multiset
/// of pixel values, is the same in both classes: only the relative position
/// separates them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub size: usize,
    pub offset: usize,
    pub blob_sigma: f64,
    pub noise: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            size: 12,
            offset: 3,
            blob_sigma: 0.7,
            noise: 0.05,
        }
    }
}

impl SyntheticTask {
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        let margin = 2;
        let s = self.size;
        if s < 2 * margin + self.offset + 1 {
            return Err(Error::Config(format!("synthetic images of side {s} cannot hold offset {}", self.offset)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * s * s);
        let mut labels = Vec::with_capacity(n);
        let inv = 1.0 / (2.0 * self.blob_sigma * self.blob_sigma);
        for _ in 0..n {
            let label = rng.gen_range(0..2usize);
            let py = rng.gen_range(margin..s - margin) as f64;
            let left = rng.gen_range(margin..s - margin - self.offset) as f64;
            let (bright, dark) = if label == 0 {
                (left, left + self.offset as f64)
            } else {
                (left + self.offset as f64, left)
            };
            let amp: f64 = rng.gen_range(0.7..1.3);
            for y in 0..s {
                for x in 0..s {
                    let dy2 = (y as f64 - py).powi(2);
                    let b = (-(dy2 + (x as f64 - bright).powi(2)) * inv).exp();
                    let d = (-(dy2 + (x as f64 - dark).powi(2)) * inv).exp();
                    let noise = self.noise * rng.gen_range(-1.0..1.0);
                    data.push((amp * (b - d) + noise) as f32);
                }
            }
            labels.push(label);
        }
        Dataset::new(Tensor::from_vec(Shape::new(n, 1, s, s), data)?, labels, 2)
    }
}

/// Train/test split of the default synthetic task (test uses `seed + 1`).
pub fn make_synthetic_displacement(n_train: usize, n_test: usize, seed: u64) -> Result<DataSplit> {
    let task = SyntheticTask::default();
    Ok(DataSplit {
        train: task.generate(n_train, seed)?,
        test: task.generate(n_test, seed.wrapping_add(1))?,
    }
    .normalized())
}
