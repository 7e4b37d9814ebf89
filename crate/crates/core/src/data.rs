//! Dataset ingestion and generation: IDX-format image files, the mapping of
//! 8-bit levels onto the 256-point grid in `[-1, 1]`, and the synthetic
//! draws that feed the sampling and training experiments.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::models::{LatentVariableModel, Likelihood, ModelError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { got: u32, expected: u32 },
    #[error("file holds {got} bytes but the header claims {needed}")]
    Truncated { needed: usize, got: usize },
    #[error("{extra} trailing bytes after the pixel payload")]
    TrailingBytes { extra: usize },
    #[error("dimensions {dims:?} overflow the addressable size")]
    DimensionOverflow { dims: Vec<u32> },
    #[error("observations cannot be sampled from a discretized likelihood")]
    NotSampleable,
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `v / 255` rescaled to `[-1, 1]`; the inverse of the model's pixel grid.
pub fn level_to_unit(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

/// Raw 8-bit grayscale images, stored row-major per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl ImageSet {
    pub fn pixel_dim(&self) -> usize {
        self.rows * self.cols
    }

    /// `[count, rows * cols]` tensor of grid values `2 v / 255 - 1`.
    pub fn to_unit_tensor(&self) -> Result<Tensor, DataError> {
        let data = self.pixels.iter().map(|&v| level_to_unit(v)).collect();
        Ok(Tensor::from_vec(&[self.count, self.pixel_dim()], data)?)
    }

    pub fn read_idx<R: Read>(mut r: R) -> Result<ImageSet, DataError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        parse_idx(&bytes)
    }

    pub fn load_idx(path: impl AsRef<Path>) -> Result<ImageSet, DataError> {
        Self::read_idx(File::open(path)?)
    }

    pub fn write_idx<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
        w.write_all(&(self.count as u32).to_be_bytes())?;
        w.write_all(&(self.rows as u32).to_be_bytes())?;
        w.write_all(&(self.cols as u32).to_be_bytes())?;
        w.write_all(&self.pixels)
    }

    pub fn save_idx(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write_idx(File::create(path)?)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated { needed: end, got: bytes.len() });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

fn parse_idx(bytes: &[u8]) -> Result<ImageSet, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { got: magic, expected: IDX_IMAGES_MAGIC });
    }
    let count = be_u32(bytes, 4)?;
    let rows = be_u32(bytes, 8)?;
    let cols = be_u32(bytes, 12)?;
    let total = (count as usize)
        .checked_mul(rows as usize)
        .and_then(|v| v.checked_mul(cols as usize))
        .and_then(|v| v.checked_add(16))
        .ok_or(DataError::DimensionOverflow { dims: vec![count, rows, cols] })?;
    if bytes.len() < total {
        return Err(DataError::Truncated { needed: total, got: bytes.len() });
    }
    if bytes.len() > total {
        return Err(DataError::TrailingBytes { extra: bytes.len() - total });
    }
    Ok(ImageSet {
        count: count as usize,
        rows: rows as usize,
        cols: cols as usize,
        pixels: bytes[16..].to_vec(),
    })
}

/// Loads an IDX image file straight to grid values in `[-1, 1]`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    ImageSet::load_idx(path)?.to_unit_tensor()
}

/// Draws `(x, z)` pairs from the generative model. Only likelihoods with
/// Gaussian observation noise can be sampled.
pub fn sample_joint(
    model: &LatentVariableModel,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Tensor), DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_z = model.latent_dim();
    let d_x = model.obs_dim();
    let mut zs = Vec::with_capacity(n * d_z);
    let mut xs = Vec::with_capacity(n * d_x);
    for _ in 0..n {
        let z = model.prior.sample(&mut rng);
        let x = match &model.likelihood {
            Likelihood::GaussianLinear(l) => l.sample(&z, &mut rng),
            Likelihood::NeuralGaussian(l) => l.sample(&z, &mut rng)?,
            Likelihood::DiscretizedLogistic(_) => return Err(DataError::NotSampleable),
        };
        zs.extend_from_slice(&z);
        xs.extend_from_slice(&x);
    }
    Ok((Tensor::from_vec(&[n, d_x], xs)?, Tensor::from_vec(&[n, d_z], zs)?))
}

/// Soft grayscale bump images quantized to the 256-level grid: a cheap,
/// fully deterministic stand-in for handwritten-digit data with the same
/// shape and byte format. Like digits, each image is one of a fixed set of
/// glyphs (seeded bump arrangements) under continuous nuisance — a small
/// translation, an amplitude scale, and pixel noise — so identity is
/// discrete while appearance varies.
pub fn synthetic_blobs(count: usize, side: usize, seed: u64) -> ImageSet {
    const GLYPHS: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    let glyphs: Vec<Vec<(f64, f64, f64, f64)>> = (0..GLYPHS)
        .map(|_| {
            let bumps = rng.gen_range(2..=4usize);
            (0..bumps)
                .map(|_| {
                    (
                        rng.gen_range(0.2..0.8) * s,
                        rng.gen_range(0.2..0.8) * s,
                        rng.gen_range(0.08..0.2) * s,
                        rng.gen_range(0.6..1.0),
                    )
                })
                .collect()
        })
        .collect();
    let mut pixels = Vec::with_capacity(count * side * side);
    for _ in 0..count {
        let shapes = &glyphs[rng.gen_range(0..GLYPHS)];
        let dx = rng.gen_range(-0.06..0.06) * s;
        let dy = rng.gen_range(-0.06..0.06) * s;
        let gain: f64 = rng.gen_range(0.8..1.0);
        for r in 0..side {
            for c in 0..side {
                let mut v = 0.0;
                for &(cx, cy, radius, amp) in shapes {
                    let d2 = (r as f64 - cy - dy).powi(2) + (c as f64 - cx - dx).powi(2);
                    v += gain * amp * (-d2 / (2.0 * radius * radius)).exp();
                }
                v += rng.sample::<f64, _>(StandardNormal) * 0.05;
                pixels.push((255.0 * v.clamp(0.0, 1.0)).round() as u8);
            }
        }
    }
    ImageSet { count, rows: side, cols: side, pixels }
}
