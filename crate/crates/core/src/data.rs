//! Datasets: deterministic synthetic generators and an IDX reader/writer.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Rng};

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Side length of the synthetic images.
pub const SYNTHETIC_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<FeatureMap>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<FeatureMap>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Shape(format!("{} inputs, {} labels", inputs.len(), labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidParam(format!("label {l} with {classes} classes")));
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.len())
    }

    /// Splits off the last `fraction` of the samples as a held-out set.
    pub fn split(self, fraction: f64) -> (Dataset, Dataset) {
        let held = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - held.min(self.len());
        let Dataset { mut inputs, mut labels, classes } = self;
        let vi = inputs.split_off(cut);
        let vl = labels.split_off(cut);
        (
            Dataset { inputs, labels, classes },
            Dataset { inputs: vi, labels: vl, classes },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Isotropic Gaussian clusters centred on `scale * e_c`, the vertices of
    /// a simplex, so classes are separable up to the tail overlap.
    GaussianBlobs { classes: usize, samples: usize, dims: usize, scale: f64, std: f64 },
    /// Single-channel 8x8 textures: a smooth class template under a random
    /// per-image brightness and contrast, plus smooth noise.
    SyntheticImages { classes: usize, samples: usize },
    IdxFile { images: PathBuf, labels: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::GaussianBlobs { classes: 3, samples: 6000, dims: 8, scale: 4.0, std: 1.0 }
    }
}

impl DatasetSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DatasetSpec::GaussianBlobs { .. } => "gaussian-blobs",
            DatasetSpec::SyntheticImages { .. } => "synthetic-images",
            DatasetSpec::IdxFile { .. } => "idx-file",
        }
    }
}

/// Builds the dataset described by `spec`; synthetic kinds are pure
/// functions of `(spec, seed)`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        &DatasetSpec::GaussianBlobs { classes, samples, dims, scale, std } => {
            gaussian_blobs(classes, samples, dims, scale, std, seed)
        }
        &DatasetSpec::SyntheticImages { classes, samples } => synthetic_images(classes, samples, seed),
        DatasetSpec::IdxFile { images, labels } => read_idx(images, labels),
    }
}

fn balanced_labels(classes: usize, samples: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    labels
}

pub fn gaussian_blobs(classes: usize, samples: usize, dims: usize, scale: f64, std: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || samples == 0 {
        return Err(Error::InvalidParam("dataset needs at least one class and one sample".into()));
    }
    if dims < classes {
        return Err(Error::InvalidParam(format!("{dims} dimensions cannot hold a {classes}-class simplex")));
    }
    if !(std >= 0.0 && std.is_finite() && scale.is_finite()) {
        return Err(Error::InvalidParam("blob scale and std must be finite, std non-negative".into()));
    }
    let mut rng = Rng::new(seed).fork(1);
    let labels = balanced_labels(classes, samples, &mut rng);
    let inputs = labels
        .iter()
        .map(|&c| {
            let data = (0..dims)
                .map(|d| if d == c { scale } else { 0.0 } + std * rng.normal())
                .collect();
            FeatureMap::new(dims, 1, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(inputs, labels, classes)
}

fn smooth(side: usize, noise: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for i in 0..side {
        for j in 0..side {
            let mut s = 0.0;
            let mut n = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if a >= 0 && b >= 0 && (a as usize) < side && (b as usize) < side {
                        s += noise[a as usize * side + b as usize];
                        n += 1.0;
                    }
                }
            }
            out[i * side + j] = s / n;
        }
    }
    out
}

pub fn synthetic_images(classes: usize, samples: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || samples == 0 {
        return Err(Error::InvalidParam("dataset needs at least one class and one sample".into()));
    }
    let side = SYNTHETIC_SIDE;
    let px = side * side;
    let mut trng = Rng::new(seed).fork(2);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let t = smooth(side, &trng.normal_vec(px, 1.0));
            let rms = (t.iter().map(|v| v * v).sum::<f64>() / px as f64).sqrt();
            t.into_iter().map(|v| v / rms).collect()
        })
        .collect();
    let mut rng = Rng::new(seed).fork(3);
    let labels = balanced_labels(classes, samples, &mut rng);
    let inputs = labels
        .iter()
        .map(|&c| {
            let brightness = rng.gaussian(0.0, 1.0);
            let contrast = (0.5 * rng.normal()).exp();
            let texture = smooth(side, &rng.normal_vec(px, 1.0));
            let data = templates[c]
                .iter()
                .zip(&texture)
                .map(|(t, n)| brightness + contrast * (t + n))
                .collect();
            FeatureMap::new(1, px, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(inputs, labels, classes)
}

fn be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    let b = bytes
        .get(off..off + 4)
        .ok_or(Error::IdxTruncated { needed: off + 4, have: bytes.len() })?;
    Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::IdxBadMagic { found, expected });
    }
    Ok(())
}

/// Decoded IDX image file: `count` images of `rows x cols`, pixels scaled
/// to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_MAGIC_IMAGES)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    let payload = bytes.get(16..needed).ok_or(Error::IdxTruncated { needed, have: bytes.len() })?;
    Ok(IdxImages { count, rows, cols, pixels: payload.iter().map(|&b| f64::from(b) / 255.0).collect() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_MAGIC_LABELS)?;
    let count = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    let payload = bytes.get(8..needed).ok_or(Error::IdxTruncated { needed, have: bytes.len() })?;
    Ok(payload.to_vec())
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols, "pixel count");
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_MAGIC_IMAGES, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images become single-channel feature maps of `rows * cols` positions.
pub fn idx_dataset(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::IdxCountMismatch { images: images.count, labels: labels.len() });
    }
    let px = images.rows * images.cols;
    let inputs = (0..images.count)
        .map(|i| FeatureMap::new(1, px, images.pixels[i * px..(i + 1) * px].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, classes)
}

pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx_images(&std::fs::read(images)?)?;
    let lab = parse_idx_labels(&std::fs::read(labels)?)?;
    idx_dataset(&img, &lab)
}
