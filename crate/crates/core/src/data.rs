//! Datasets: IDX (MNIST-family) ingestion and seeded synthetic blobs.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

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

/// Images `[n, c, h, w]` in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::Integrity(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Integrity(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Dataset {
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

    /// Per-sample shape `[c, h, w]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn batch(&self, start: usize, end: usize) -> (Tensor, &[usize]) {
        (
            self.images.slice_batch(start, end),
            &self.labels[start..end],
        )
    }

    pub fn subset(&self, rows: &[usize], split: Split) -> Dataset {
        Dataset {
            images: self.images.gather_batch(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            split,
        }
    }

    /// Deterministic 90/10 split by index: within each class, every tenth
    /// occurrence goes to the test side.
    pub fn split_90_10(&self) -> (Dataset, Dataset) {
        let mut seen = vec![0usize; self.classes];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] % 10 == 9 {
                test.push(i);
            } else {
                train.push(i);
            }
            seen[l] += 1;
        }
        (
            self.subset(&train, Split::Train),
            self.subset(&test, Split::Test),
        )
    }

    /// Per-pixel mean image, shape `[1, c, h, w]`.
    pub fn mean_image(&self) -> Tensor {
        let per = self.images.sample_len();
        let mut acc = vec![0.0f32; per];
        for row in self.images.data().chunks(per) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        let n = self.len().max(1) as f32;
        acc.iter_mut().for_each(|a| *a /= n);
        let mut shape = vec![1];
        shape.extend(self.sample_shape());
        Tensor::new(shape, acc).expect("shape")
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

/// Parses IDX image bytes into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("expected magic 0x{IDX_IMAGES_MAGIC:08X}, found 0x{magic:08X}"),
        ));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            (16 + body.len()) as u64,
            format!(
                "truncated image payload: expected {need} bytes, found {}",
                body.len()
            ),
        ));
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("expected magic 0x{IDX_LABELS_MAGIC:08X}, found 0x{magic:08X}"),
        ));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            (8 + body.len()) as u64,
            format!(
                "truncated label payload: expected {n} bytes, found {}",
                body.len()
            ),
        ));
    }
    Ok(body[..n].to_vec())
}

/// Loads an IDX image/label file pair. Pixels are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_all(images_path)?)?;
    let labels = parse_idx_labels(&read_all(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::format(
            4,
            format!(
                "{n} images in {} but {} labels in {}",
                images_path.display(),
                labels.len(),
                labels_path.display()
            ),
        ));
    }
    let data = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(images, labels, classes, split)
}

/// Writes a dataset as an IDX pair. Pixels are quantised to `round(255 v)`,
/// so values that came from an IDX file round-trip exactly.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = dataset.sample_shape();
    if s[0] != 1 {
        return Err(Error::Usage(
            "IDX image files hold single-channel images".into(),
        ));
    }
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    for v in [
        IDX_IMAGES_MAGIC,
        dataset.len() as u32,
        s[1] as u32,
        s[2] as u32,
    ] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        lab.push(
            u8::try_from(l).map_err(|_| Error::Usage(format!("label {l} does not fit a byte")))?,
        );
    }
    File::create(images_path)?.write_all(&img)?;
    File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

/// Gaussian blobs around seeded random centres, clamped to `[0, 1]`.
///
/// `sample_shape` is `[d]` (stored as `[1, 1, d]`) or `[c, h, w]`. Samples are
/// interleaved by class: sample `i` belongs to class `i % classes`.
pub fn synth_blobs(
    classes: usize,
    samples_per_class: usize,
    sample_shape: &[usize],
    spread: f32,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Usage(
            "synthetic blobs need at least 2 classes".into(),
        ));
    }
    let shape: Vec<usize> = match sample_shape {
        [d] => vec![1, 1, *d],
        [c, h, w] => vec![*c, *h, *w],
        other => return Err(Error::Usage(format!("unsupported sample shape {other:?}"))),
    };
    let per: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0f32, 1.0).expect("valid range");
    let centres: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..per).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0f32, spread.max(0.0)).map_err(|e| Error::Usage(e.to_string()))?;
    let n = classes * samples_per_class;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &m in &centres[c] {
            let v = if spread > 0.0 {
                m + noise.sample(&mut rng)
            } else {
                m
            };
            data.push(v.clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    let mut full = vec![n];
    full.extend(shape);
    Dataset::new(Tensor::new(full, data)?, labels, classes, Split::Train)
}

/// Paths of an IDX train/test pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Dataset manifest: `{name, paths, checksum}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub paths: IdxPaths,
    /// Hex SHA-256 over the four files in field order; skipped when absent.
    #[serde(default)]
    pub checksum: Option<String>,
}

impl Manifest {
    /// Relative paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Manifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut m.paths.train_images,
                &mut m.paths.train_labels,
                &mut m.paths.test_images,
                &mut m.paths.test_labels,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn compute_checksum(paths: &IdxPaths) -> Result<String> {
        let mut h = Sha256::new();
        for p in [
            &paths.train_images,
            &paths.train_labels,
            &paths.test_images,
            &paths.test_labels,
        ] {
            h.update(read_all(p)?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Loads `(train, test)`, verifying the checksum when one is recorded.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        if let Some(expected) = &self.checksum {
            let actual = Self::compute_checksum(&self.paths)?;
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(Error::Integrity(format!(
                    "dataset {} checksum {actual} does not match manifest {expected}",
                    self.name
                )));
            }
        }
        let train = load_idx(
            &self.paths.train_images,
            &self.paths.train_labels,
            Split::Train,
        )?;
        let test = load_idx(
            &self.paths.test_images,
            &self.paths.test_labels,
            Split::Test,
        )?;
        Ok((train, test))
    }
}
