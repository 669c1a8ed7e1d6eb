//! MNIST (IDX) and CIFAR-10 (binary) loaders, normalization and seeded
//! mini-batch sampling.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CLASSES: usize = 10;

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

/// Per-channel affine map applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Mean and population standard deviation of every channel.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let [c, h, w] = data.shape;
        let plane = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in data.pixels.chunks_exact(c * plane) {
            for (ch, px) in img.chunks_exact(plane).enumerate() {
                for &p in px {
                    let v = f64::from(p) / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (data.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0).sqrt()).collect();
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Format("a channel is constant and cannot be standardized".into()));
        }
        Ok(ChannelStats { mean, std })
    }
}

/// Labelled images kept as raw bytes; normalization happens on extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    shape: [usize; 3],
    split: Split,
    norm: Option<ChannelStats>,
}

impl Dataset {
    pub fn from_raw(pixels: Vec<u8>, labels: Vec<usize>, shape: [usize; 3], split: Split) -> Result<Self> {
        let size: usize = shape.iter().product();
        if size == 0 || pixels.len() != labels.len() * size {
            return Err(Error::Shape(format!("{} bytes for {} images of {shape:?}", pixels.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::Format(format!("label {bad} outside [0, {CLASSES})")));
        }
        Ok(Dataset { pixels, labels, shape, split, norm: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn normalization(&self) -> Option<&ChannelStats> {
        self.norm.as_ref()
    }

    /// Standardizes every channel with `stats` on extraction.
    pub fn standardize(&mut self, stats: ChannelStats) -> Result<()> {
        if stats.mean.len() != self.shape[0] || stats.std.len() != self.shape[0] {
            return Err(Error::Shape(format!("{} channel statistics for {} channels", stats.mean.len(), self.shape[0])));
        }
        self.norm = Some(stats);
        Ok(())
    }

    fn sample_size(&self) -> usize {
        self.shape.iter().product()
    }

    /// Images at `indices` as `[N, C, H, W]` with their labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let size = self.sample_size();
        let plane = self.shape[1] * self.shape[2];
        let mut data = Vec::with_capacity(indices.len() * size);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            let img = &self.pixels[i * size..(i + 1) * size];
            for (k, &p) in img.iter().enumerate() {
                let v = f64::from(p) / 255.0;
                let v = match &self.norm {
                    Some(s) => (v - s.mean[k / plane]) / s.std[k / plane],
                    None => v,
                };
                data.push(T::from_f64(v));
            }
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.shape);
        Ok((Tensor::from_vec(&shape, data)?, labels))
    }

    /// A seeded sample of `n` images without replacement, kept in their
    /// original relative order. `n == len` returns the dataset unchanged.
    pub fn subset(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!("subset of {n} from {} images", self.len())));
        }
        if n == self.len() {
            return Ok(self.clone());
        }
        let mut keep = rng.permutation(self.len());
        keep.truncate(n);
        keep.sort_unstable();
        Ok(self.select(&keep))
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let size = self.sample_size();
        let mut pixels = Vec::with_capacity(indices.len() * size);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * size..(i + 1) * size]);
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            split: self.split,
            norm: self.norm.clone(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated { path: path.to_path_buf(), detail: "header".into() })
}

/// Loads an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = read(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { path: images_path.to_path_buf(), found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let want = 16 + n * rows * cols;
    if img.len() < want {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            detail: format!("{} bytes, header promises {want}", img.len()),
        });
    }

    let lab = read(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { path: labels_path.to_path_buf(), found: magic, expected: IDX_LABELS_MAGIC });
    }
    let m = be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() < 8 + m {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            detail: format!("{} bytes, header promises {}", lab.len(), 8 + m),
        });
    }
    if m != n {
        return Err(Error::Format(format!("{n} images but {m} labels")));
    }
    let labels = lab[8..8 + m].iter().map(|&l| usize::from(l)).collect();
    Dataset::from_raw(img[16..want].to_vec(), labels, [1, rows, cols], split)
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Truncated {
                path: path.clone(),
                detail: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(usize::from(rec[0]));
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Dataset::from_raw(pixels, labels, [3, 32, 32], split)
}

/// Writes an IDX image/label pair.
pub fn write_idx(images_path: &Path, labels_path: &Path, data: &Dataset) -> Result<()> {
    let [c, rows, cols] = data.shape;
    if c != 1 {
        return Err(Error::Shape(format!("IDX images are single-channel, got {c}")));
    }
    let n = u32::try_from(data.len()).map_err(|_| Error::Format("too many images for IDX".into()))?;
    let mut img = Vec::with_capacity(16 + data.pixels.len());
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&data.pixels);
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(data.labels.iter().map(|&l| l as u8));
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Writes a CIFAR-10 binary batch file.
pub fn write_cifar10(path: &Path, data: &Dataset) -> Result<()> {
    if data.shape != [3, 32, 32] {
        return Err(Error::Shape(format!("CIFAR-10 images are [3, 32, 32], got {:?}", data.shape)));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (label, img) in data.labels.iter().zip(data.pixels.chunks_exact(CIFAR_RECORD - 1)) {
        out.push(*label as u8);
        out.extend_from_slice(img);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Standard file names of the MNIST distribution inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

/// Standard file names of the CIFAR-10 binary distribution inside `dir`.
pub fn cifar10_paths(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|k| dir.join(format!("data_batch_{k}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Shuffles once per epoch and yields index batches of exactly
/// `batch_size`, dropping the short remainder unless told otherwise.
#[derive(Debug, Clone)]
pub struct MiniBatchSampler {
    rng: Rng,
    len: usize,
    batch_size: usize,
    drop_last: bool,
}

impl MiniBatchSampler {
    pub fn new(len: usize, batch_size: usize, rng: Rng) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::InvalidArgument(format!("batch size {batch_size} for {len} samples")));
        }
        Ok(MiniBatchSampler { rng, len, batch_size, drop_last: true })
    }

    pub fn keep_last(mut self) -> Self {
        self.drop_last = false;
        self
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.len / self.batch_size
        } else {
            self.len.div_ceil(self.batch_size)
        }
    }

    /// The batches of the next epoch.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let order = self.rng.permutation(self.len);
        let count = self.batches_per_epoch();
        order.chunks(self.batch_size).take(count).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> Dataset {
        let pixels: Vec<u8> = (0..n * 4).map(|k| (k * 37 % 256) as u8).collect();
        Dataset::from_raw(pixels, (0..n).map(|i| i % 10).collect(), [1, 2, 2], Split::Train).unwrap()
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let pixels = vec![0, 1, 2, 255, 10, 20, 30, 128];
        let data = Dataset::from_raw(pixels.clone(), vec![3, 9], [1, 2, 2], Split::Test).unwrap();
        write_idx(&ip, &lp, &data).unwrap();
        let back = load_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!(back, data);
        let (x, y) = back.batch::<f64>(&[0, 1]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        let expect: Vec<f64> = pixels.iter().map(|&k| f64::from(k) / 255.0).collect();
        assert_eq!(x.data(), &expect[..]);
        assert_eq!(y, vec![3, 9]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, &fixture(3)).unwrap();

        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x02;
        let bad = dir.path().join("bad");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_idx(&bad, &lp, Split::Train), Err(Error::BadMagic { found: 0x802, .. })));

        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&bad, &lp, Split::Train), Err(Error::Truncated { .. })));
        std::fs::write(&bad, &bytes[..6]).unwrap();
        assert!(matches!(load_idx(&bad, &lp, Split::Train), Err(Error::Truncated { .. })));

        let (ip2, lp2) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx(&ip2, &lp2, &fixture(4)).unwrap();
        assert!(matches!(load_idx(&ip, &lp2, Split::Train), Err(Error::Format(_))));
        assert!(matches!(load_idx(&dir.path().join("missing"), &lp, Split::Train), Err(Error::Io { .. })));
    }

    #[test]
    fn cifar_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let pixels: Vec<u8> = (0..2 * 3072).map(|k| (k % 256) as u8).collect();
        let data = Dataset::from_raw(pixels, vec![7, 0], [3, 32, 32], Split::Train).unwrap();
        write_cifar10(&path, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 2 * CIFAR_RECORD);
        assert_eq!(bytes[0], 7);
        let back = load_cifar10(std::slice::from_ref(&path), Split::Train).unwrap();
        assert_eq!(back, data);
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_cifar10(&[path], Split::Train), Err(Error::Truncated { .. })));
    }

    #[test]
    fn subset_rules() {
        let data = fixture(50);
        assert_eq!(data.subset(50, &mut Rng::new(1)).unwrap(), data);
        let a = data.subset(20, &mut Rng::new(7)).unwrap();
        let b = data.subset(20, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(data.subset(51, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn epoch_is_a_partition() {
        let mut s = MiniBatchSampler::new(10_000, 64, Rng::new(3)).unwrap();
        let batches = s.epoch();
        assert_eq!(batches.len(), 156);
        assert!(batches.iter().all(|b| b.len() == 64));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 156 * 64);
        let mut s = MiniBatchSampler::new(100, 64, Rng::new(3)).unwrap().keep_last();
        let mut all: Vec<usize> = s.epoch().concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_is_seeded() {
        let mut a = MiniBatchSampler::new(300, 16, Rng::new(9)).unwrap();
        let mut b = MiniBatchSampler::new(300, 16, Rng::new(9)).unwrap();
        assert_eq!(a.epoch(), b.epoch());
        assert_ne!(a.epoch(), MiniBatchSampler::new(300, 16, Rng::new(9)).unwrap().epoch());
    }

    #[test]
    fn standardization_centers_channels() {
        let mut data = fixture(40);
        let stats = ChannelStats::fit(&data).unwrap();
        data.standardize(stats).unwrap();
        let all: Vec<usize> = (0..40).collect();
        let (x, _) = data.batch::<f64>(&all).unwrap();
        let n = x.len() as f64;
        let mean: f64 = x.data().iter().sum::<f64>() / n;
        let var: f64 = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn labels_are_checked() {
        assert!(Dataset::from_raw(vec![0; 4], vec![10], [1, 2, 2], Split::Train).is_err());
        assert!(Dataset::from_raw(vec![0; 3], vec![1], [1, 2, 2], Split::Train).is_err());
    }
}
