//! Datasets: IDX (MNIST-format) files and synthetic Gaussian blobs.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Config(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.images.gather_rows(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn reshape(&self, shape: [usize; 3]) -> Result<Dataset> {
        let images = self.images.reshape(&[self.len(), shape[0], shape[1], shape[2]])?;
        Ok(Dataset {
            images,
            ..self.clone()
        })
    }

    pub fn normalize(&mut self, stats: &ChannelStats) {
        let [c, h, w] = self.sample_shape();
        let plane = h * w;
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(ds: &Dataset) -> Self {
        let [c, h, w] = ds.sample_shape();
        let plane = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, &v) in ds.images.data().iter().enumerate() {
            let ch = (i / plane) % c;
            sum[ch] += v;
            sq[ch] += v * v;
        }
        let count = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: 0,
                detail: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            detail: format!("truncated header, needed bytes {offset}..{}", offset + 4),
        })
}

fn expect_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

fn expect_len(bytes: &[u8], want: usize, path: &Path) -> Result<()> {
    if bytes.len() < want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            detail: format!("truncated payload, expected {want} bytes"),
        });
    }
    Ok(())
}

/// Reads an IDX image/label file pair (optionally gzip-compressed).
/// Pixels are scaled to `[0, 1]`; the class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    expect_magic(&img, IDX_IMAGES_MAGIC, images_path)?;
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    expect_len(&img, 16 + n * rows * cols, images_path)?;

    let lab = read_maybe_gz(labels_path)?;
    expect_magic(&lab, IDX_LABELS_MAGIC, labels_path)?;
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    if nl != n {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            offset: 4,
            detail: format!("{nl} labels for {n} images"),
        });
    }
    expect_len(&lab, 8 + n, labels_path)?;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Parse {
            path: images_path.to_path_buf(),
            offset: 4,
            detail: "empty image set".into(),
        });
    }

    let pixels: Vec<f64> = img[16..16 + n * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(Tensor::new(&[n, 1, rows, cols], pixels)?, labels, classes, split)
}

/// `n` points in `dim` dimensions drawn as unit Gaussians around
/// `margin * e_c` for class `c`; labels cycle through the classes.
/// The images are shaped `[n, 1, 1, dim]`.
pub fn synthetic_blobs(classes: usize, n: usize, dim: usize, margin: f64, seed: u64, split: Split) -> Result<Dataset> {
    if classes < 2 || dim < classes || n == 0 {
        return Err(Error::Config(format!(
            "synthetic blobs need 2 <= classes <= dim and n > 0 (classes {classes}, dim {dim}, n {n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &c in &labels {
        for d in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(if d == c { margin } else { 0.0 } + noise);
        }
    }
    Dataset::new(Tensor::new(&[n, 1, 1, dim], data)?, labels, classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn idx_images(n: u32, r: u32, c: u32) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, r, c] {
            v.extend(x.to_be_bytes());
        }
        v.extend((0..n * r * c).map(|i| (i * 37 % 256) as u8));
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend(labels);
        v
    }

    #[test]
    fn parses_idx_pair_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = write(dir.path(), "i", &idx_images(3, 2, 2));
        let labs = write(dir.path(), "l", &idx_labels(&[0, 2, 1]));
        let ds = load_idx(&imgs, &labs, Split::Train).unwrap();
        assert_eq!(ds.images.shape(), &[3, 1, 2, 2]);
        assert_eq!(ds.labels, vec![0, 2, 1]);
        assert_eq!(ds.classes, 3);
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(&idx_images(3, 2, 2)).unwrap();
        let gimgs = write(dir.path(), "i.gz", &gz.finish().unwrap());
        assert_eq!(load_idx(&gimgs, &labs, Split::Train).unwrap(), ds);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let labs = write(dir.path(), "l", &idx_labels(&[0, 1]));
        let imgs = write(dir.path(), "i", &idx_images(3, 2, 2));
        assert!(matches!(
            load_idx(&imgs, &labs, Split::Train),
            Err(Error::Parse { offset: 4, .. })
        ));

        let mut bad = idx_images(2, 2, 2);
        bad[3] = 0x01;
        let bad = write(dir.path(), "bad", &bad);
        assert!(matches!(
            load_idx(&bad, &labs, Split::Train),
            Err(Error::Parse { offset: 0, .. })
        ));

        let full = idx_images(2, 2, 2);
        let cut = write(dir.path(), "cut", &full[..full.len() - 3]);
        match load_idx(&cut, &labs, Split::Train) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, (full.len() - 3) as u64),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = synthetic_blobs(3, 30, 5, 4.0, 9, Split::Train).unwrap();
        let b = synthetic_blobs(3, 30, 5, 4.0, 9, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.shape(), &[30, 1, 1, 5]);
        assert_eq!(a.labels.iter().filter(|&&l| l == 2).count(), 10);
        assert!(synthetic_blobs(6, 30, 5, 4.0, 9, Split::Train).is_err());
    }

    #[test]
    fn normalization_centers_channels() {
        let mut ds = synthetic_blobs(2, 40, 4, 3.0, 1, Split::Train).unwrap();
        let stats = ChannelStats::compute(&ds);
        ds.normalize(&stats);
        let after = ChannelStats::compute(&ds);
        assert!(after.mean[0].abs() < 1e-12);
        assert!((after.std[0] - 1.0).abs() < 1e-12);
    }
}
