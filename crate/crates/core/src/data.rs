//! Datasets: CIFAR-10 binary and IDX loaders/writers plus a synthetic fixture.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Images in `[0, 1]` as N×C×H×W plus class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, classes: num_classes });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, num_classes, split })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample C×H×W shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Images and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Splits into the first `n_first` samples (train) and the rest (val).
    pub fn split_at(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        if n_first == 0 || n_first >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n_first} must leave both parts non-empty (have {})",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n_first).collect();
        let tail: Vec<usize> = (n_first..self.len()).collect();
        let (a, la) = self.batch(&head)?;
        let (b, lb) = self.batch(&tail)?;
        Ok((
            Dataset { images: a, labels: la, num_classes: self.num_classes, split: Split::Train },
            Dataset { images: b, labels: lb, num_classes: self.num_classes, split: Split::Val },
        ))
    }

    /// Averages channels into a single one.
    pub fn grayscale(&self) -> Dataset {
        let s = self.images.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let src = self.images.data();
        let mut out = vec![0.0; n * plane];
        for i in 0..n {
            for p in 0..plane {
                let sum: f64 = (0..c).map(|ch| src[(i * c + ch) * plane + p]).sum();
                out[i * plane + p] = sum / c as f64;
            }
        }
        Dataset {
            images: Tensor::from_parts(vec![n, 1, s[2], s[3]], out),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Block-averages each `factor × factor` window.
    pub fn downsample(&self, factor: usize) -> Result<Dataset> {
        let s = self.images.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidArgument(format!("cannot downsample {h}×{w} by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let src = self.images.data();
        let area = (factor * factor) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in src.chunks_exact(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            sum += plane[(oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out.push(sum / area);
                }
            }
        }
        Ok(Dataset {
            images: Tensor::from_parts(vec![n, c, oh, ow], out),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Parses CIFAR-10 binary records: one label byte then 3×32×32 channel-major pixels.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            what: "CIFAR-10 file",
            detail: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(Error::Format {
                what: "CIFAR-10 file",
                detail: format!("record {i} has label {label}"),
            });
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::from_parts(vec![n, 3, 32, 32], pixels), labels, 10, Split::Train)
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar10(&read(path.as_ref())?)
}

pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.sample_shape() != [3, 32, 32] || ds.num_classes() > 10 {
        return Err(Error::shape(
            "encode_cifar10",
            format!("needs 3×32×32 images and ≤ 10 classes, got {:?}", ds.sample_shape()),
        ));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (pixels, &label) in ds.images.data().chunks_exact(CIFAR_RECORD - 1).zip(&ds.labels) {
        out.push(label as u8);
        out.extend(pixels.iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn write_cifar10(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_cifar10(ds)?)
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format { what, detail: "truncated header".into() })
}

/// Parses an IDX image/label pair (unsigned-byte payloads).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format { what: "IDX images", detail: format!("bad magic {magic:#010x}") });
    }
    let lmagic = be_u32(labels, 0, "IDX labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format { what: "IDX labels", detail: format!("bad magic {lmagic:#010x}") });
    }
    let n = be_u32(images, 4, "IDX images")? as usize;
    let h = be_u32(images, 8, "IDX images")? as usize;
    let w = be_u32(images, 12, "IDX images")? as usize;
    let nl = be_u32(labels, 4, "IDX labels")? as usize;
    if n != nl {
        return Err(Error::Format {
            what: "IDX pair",
            detail: format!("{n} images but {nl} labels"),
        });
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format { what: "IDX images", detail: "empty dimensions".into() });
    }
    let payload = &images[16..];
    if payload.len() != n * h * w {
        return Err(Error::Format {
            what: "IDX images",
            detail: format!("expected {} pixel bytes, found {}", n * h * w, payload.len()),
        });
    }
    let lpayload = &labels[8..];
    if lpayload.len() != n {
        return Err(Error::Format {
            what: "IDX labels",
            detail: format!("expected {n} label bytes, found {}", lpayload.len()),
        });
    }
    let labels: Vec<usize> = lpayload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(Tensor::from_parts(vec![n, 1, h, w], pixels), labels, num_classes, Split::Train)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&read(images.as_ref())?, &read(labels.as_ref())?)
}

/// Returns `(image file bytes, label file bytes)`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = ds.sample_shape();
    if s[0] != 1 || ds.num_classes() > 256 {
        return Err(Error::shape("encode_idx", format!("needs single-channel images, got {s:?}")));
    }
    let dim = |v: usize| u32::try_from(v).map(u32::to_be_bytes).map_err(|_| Error::shape("encode_idx", "extent exceeds u32"));
    let mut images = Vec::with_capacity(16 + ds.images.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&dim(ds.len())?);
    images.extend_from_slice(&dim(s[1])?);
    images.extend_from_slice(&dim(s[2])?);
    images.extend(ds.images.data().iter().map(|&v| quantize(v)));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&dim(ds.len())?);
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (ib, lb) = encode_idx(ds)?;
    write(images.as_ref(), &ib)?;
    write(labels.as_ref(), &lb)
}

/// Pixel noise of the synthetic fixture around each class prototype.
pub const SYNTH_NOISE: f64 = 0.2;

/// Gaussian blobs around one random prototype image per class, clipped to
/// `[0, 1]`. Labels are balanced to within one sample per class.
pub fn synth_dataset(num_samples: usize, num_classes: usize, input_shape: &[usize], seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least two classes".into()));
    }
    if num_samples == 0 || input_shape.len() != 3 || input_shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "need samples and a C×H×W shape, got {num_samples} × {input_shape:?}"
        )));
    }
    let dim: usize = input_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proto = Uniform::new(0.0, 1.0);
    let prototypes: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| proto.sample(&mut rng)).collect())
        .collect();
    let mut labels: Vec<usize> = (0..num_samples).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, SYNTH_NOISE).unwrap();
    let mut pixels = Vec::with_capacity(num_samples * dim);
    for &label in &labels {
        pixels.extend(
            prototypes[label]
                .iter()
                .map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0)),
        );
    }
    let mut shape = vec![num_samples];
    shape.extend_from_slice(input_shape);
    Dataset::new(Tensor::from_parts(shape, pixels), labels, num_classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cifar_record() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        rec[1] = 255;
        let ds = parse_cifar10(&rec).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.images().shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.labels(), &[7]);
        assert_eq!(ds.images().data()[0], 1.0);
    }

    #[test]
    fn cifar_errors() {
        assert!(parse_cifar10(&vec![0u8; CIFAR_RECORD - 1]).is_err());
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(parse_cifar10(&rec).is_err());
    }

    fn idx_pair(magic: u32) -> (Vec<u8>, Vec<u8>) {
        let mut images = magic.to_be_bytes().to_vec();
        for d in [1u32, 2, 2] {
            images.extend_from_slice(&d.to_be_bytes());
        }
        images.extend_from_slice(&[0, 51, 102, 255]);
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(3);
        (images, labels)
    }

    #[test]
    fn minimal_idx_pair() {
        let (i, l) = idx_pair(IDX_IMAGES_MAGIC);
        let ds = parse_idx(&i, &l).unwrap();
        assert_eq!(ds.images().shape(), &[1, 1, 2, 2]);
        assert_eq!(ds.images().data(), &[0.0, 0.2, 0.4, 1.0]);
        assert_eq!(ds.labels(), &[3]);
    }

    #[test]
    fn idx_errors() {
        let (i, l) = idx_pair(0x0000_0802);
        assert!(parse_idx(&i, &l).is_err());
        let (i, mut l) = idx_pair(IDX_IMAGES_MAGIC);
        l[7] = 2;
        l.push(0);
        assert!(parse_idx(&i, &l).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_dataset(103, 10, &[1, 8, 8], 5).unwrap();
        let b = synth_dataset(103, 10, &[1, 8, 8], 5).unwrap();
        assert!(a.images().bits_eq(b.images()));
        assert_eq!(a.labels(), b.labels());
        let mut counts = [0usize; 10];
        for &l in a.labels() {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        assert!(synth_dataset(10, 1, &[1, 8, 8], 0).is_err());
    }

    #[test]
    fn split_and_resample() {
        let ds = synth_dataset(10, 2, &[3, 4, 4], 1).unwrap();
        let (a, b) = ds.split_at(7).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(b.split(), Split::Val);
        assert!(ds.split_at(10).is_err());
        let g = ds.grayscale().downsample(2).unwrap();
        assert_eq!(g.images().shape(), &[10, 1, 2, 2]);
        assert!(ds.downsample(3).is_err());
    }
}
