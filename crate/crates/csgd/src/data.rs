//! Datasets: IDX files, synthetic point sets, and rasterized digits.
//!
//! The IDX reader/writer speaks the common ubyte image/label format (magic
//! `0, 0, 0x08, rank` followed by big-endian u32 dimensions). Synthetic
//! sets cover two 2-D point distributions — linearly separable Gaussian
//! blobs and concentric rings, encoded as `[n, 1, 1, 2]` images so the same
//! network machinery consumes them — plus a deterministic 28×28 digit
//! corpus drawn from seven-segment glyphs under random affine jitter and
//! pixel noise, which stands in for handwritten-digit data when no IDX
//! files are on disk.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[n, h, w, c]` with values in [0, 1] and one label per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers a batch in the given index order.
    pub fn batch(&self, idxs: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [_, h, w, c] = self.images.dims4("dataset images")?;
        let stride = h * w * c;
        let data = self.images.data();
        let mut out = Vec::with_capacity(idxs.len() * stride);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            out.extend_from_slice(&data[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new([idxs.len(), h, w, c], out)?, labels))
    }

    /// A seeded epoch order: deterministic shuffle of `0..len`.
    pub fn epoch_order(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
    }
}

const IDX_UBYTE: u8 = 0x08;

fn idx_error(path: &Path, offset: usize, what: &str) -> Error {
    Error::Dataset(format!(
        "{}: {what} at byte offset {offset}",
        path.display()
    ))
}

/// Reads an IDX ubyte file: `(dims, payload)`.
pub fn load_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(idx_error(path, bytes.len(), "truncated magic"));
    }
    if bytes[0] != 0 {
        return Err(idx_error(path, 0, "bad magic byte (expected 0)"));
    }
    if bytes[1] != 0 {
        return Err(idx_error(path, 1, "bad magic byte (expected 0)"));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(idx_error(path, 2, "unsupported dtype (expected 0x08 ubyte)"));
    }
    let rank = bytes[3] as usize;
    if rank == 0 || rank > 4 {
        return Err(idx_error(path, 3, "unsupported rank"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(idx_error(path, bytes.len(), "truncated dimension table"));
    }
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        let o = 4 + 4 * d;
        dims.push(u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize);
    }
    let expected: usize = dims.iter().product();
    if bytes.len() != header + expected {
        return Err(idx_error(
            path,
            bytes.len().min(header + expected),
            "payload size does not match dimensions",
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Writes an IDX ubyte file.
pub fn save_idx(path: &Path, dims: &[usize], payload: &[u8]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if payload.len() != expected || dims.is_empty() || dims.len() > 4 {
        return Err(Error::InvalidArgument(format!(
            "IDX payload of {} bytes does not fit dims {dims:?}",
            payload.len()
        )));
    }
    let mut bytes = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    bytes.extend_from_slice(&[0, 0, IDX_UBYTE, dims.len() as u8]);
    for &d in dims {
        bytes.extend_from_slice(&(d as u32).to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a paired image/label IDX set. Image files are rank 3 `[n, h, w]`,
/// label files rank 1 `[n]`; the counts must agree.
pub fn load_idx_pair(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (idims, ipayload) = load_idx(images)?;
    if idims.len() != 3 {
        return Err(Error::Dataset(format!(
            "{}: expected rank-3 image file, got rank {}",
            images.display(),
            idims.len()
        )));
    }
    let (ldims, lpayload) = load_idx(labels)?;
    if ldims.len() != 1 {
        return Err(Error::Dataset(format!(
            "{}: expected rank-1 label file, got rank {}",
            labels.display(),
            ldims.len()
        )));
    }
    if idims[0] != ldims[0] {
        return Err(Error::Dataset(format!(
            "paired count mismatch: {} images in {} but {} labels in {}",
            idims[0],
            images.display(),
            ldims[0],
            labels.display()
        )));
    }
    let data: Vec<f32> = ipayload.iter().map(|&b| b as f32 / 255.0).collect();
    let label_vec: Vec<usize> = lpayload.iter().map(|&b| b as usize).collect();
    if let Some(&bad) = label_vec.iter().find(|&&l| l >= classes) {
        return Err(Error::Dataset(format!(
            "{}: label {bad} out of range for {classes} classes",
            labels.display()
        )));
    }
    Ok(Dataset {
        images: Tensor::new([idims[0], idims[1], idims[2], 1], data)?,
        labels: label_vec,
        classes,
    })
}

/// Saves a dataset as a paired image/label IDX set (values quantized to
/// bytes).
pub fn save_idx_pair(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let [n, h, w, c] = dataset.images.dims4("dataset images")?;
    if c != 1 {
        return Err(Error::InvalidArgument(format!(
            "IDX image files are single-channel, dataset has {c}"
        )));
    }
    let payload: Vec<u8> = dataset
        .images
        .data()
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    save_idx(images, &[n, h, w], &payload)?;
    let lpayload: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    save_idx(labels, &[n], &lpayload)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Well-separated Gaussian clusters on a circle: linearly separable.
    Blobs,
    /// Concentric annuli: not linearly separable.
    Rings,
}

/// Balanced round-robin labels in a seeded shuffled order.
fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

/// 2-D synthetic point sets encoded as `[n, 1, 1, 2]` images.
pub fn synth_dataset(kind: SynthKind, n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need n ≥ 1 and ≥ 2 classes, got n={n}, classes={classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(n, classes, &mut rng);
    let mut data = Vec::with_capacity(n * 2);
    for &label in &labels {
        let (x, y) = match kind {
            SynthKind::Blobs => {
                let angle = std::f32::consts::TAU * label as f32 / classes as f32;
                let (cx, cy) = (2.0 * angle.cos(), 2.0 * angle.sin());
                (
                    cx + 0.25 * gaussian(&mut rng),
                    cy + 0.25 * gaussian(&mut rng),
                )
            }
            SynthKind::Rings => {
                let radius = 1.0 + label as f32 + rng.random_range(-0.15f32..0.15);
                let angle = rng.random_range(0.0f32..std::f32::consts::TAU);
                (radius * angle.cos(), radius * angle.sin())
            }
        };
        data.push(x);
        data.push(y);
    }
    Ok(Dataset {
        images: Tensor::new([n, 1, 1, 2], data)?,
        labels,
        classes,
    })
}

/// Standard normal via Box–Muller (keeps the dependency set to the plain
/// RNG crates).
fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.random_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = rng.random_range(0.0f32..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Segment endpoints of a seven-segment glyph in a unit box (x right,
/// y down): A top, B top-right, C bottom-right, D bottom, E bottom-left,
/// F top-left, G middle.
const SEGMENTS: [[f32; 4]; 7] = [
    [0.0, 0.0, 1.0, 0.0], // A
    [1.0, 0.0, 1.0, 0.5], // B
    [1.0, 0.5, 1.0, 1.0], // C
    [0.0, 1.0, 1.0, 1.0], // D
    [0.0, 0.5, 0.0, 1.0], // E
    [0.0, 0.0, 0.0, 0.5], // F
    [0.0, 0.5, 1.0, 0.5], // G
];

/// Lit segments per digit (bitmask over A..G).
const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, // 0: ABCDEF
    0b0000110, // 1: BC
    0b1011011, // 2: ABDEG
    0b1001111, // 3: ABCDG
    0b1100110, // 4: BCFG
    0b1101101, // 5: ACDFG
    0b1111101, // 6: ACDEFG
    0b0000111, // 7: ABC
    0b1111111, // 8: all
    0b1101111, // 9: ABCDFG
];

fn segment_distance(px: f32, py: f32, seg: &[f32; 4]) -> f32 {
    let (ax, ay, bx, by) = (seg[0], seg[1], seg[2], seg[3]);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Deterministic 28×28 digit corpus: seven-segment glyphs under per-sample
/// affine jitter (translation, scale, rotation, shear) with additive pixel
/// noise. Labels are balanced round-robin. Used as the handwritten-digit
/// stand-in whenever no IDX files are supplied.
pub fn digits_dataset(n: usize, seed: u64) -> Result<Dataset> {
    const H: usize = 28;
    const W: usize = 28;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(n, 10, &mut rng);
    let mut data = Vec::with_capacity(n * H * W);

    for &digit in &labels {
        let mask = DIGIT_SEGMENTS[digit];
        // Glyph box before jitter: 12 px wide, 18 px tall, centered.
        let scale = rng.random_range(0.8f32..1.1);
        let (gw, gh) = (12.0 * scale, 18.0 * scale);
        let rot = rng.random_range(-0.18f32..0.18);
        let shear = rng.random_range(-0.15f32..0.15);
        let (tx, ty) = (
            (W as f32 - gw) / 2.0 + rng.random_range(-2.5f32..2.5),
            (H as f32 - gh) / 2.0 + rng.random_range(-2.5f32..2.5),
        );
        let (sin, cos) = rot.sin_cos();
        let thickness = rng.random_range(1.1f32..1.6);

        for r in 0..H {
            for c in 0..W {
                // Map the pixel back into glyph space (inverse affine).
                let (px, py) = (c as f32 + 0.5 - tx - gw / 2.0, r as f32 + 0.5 - ty - gh / 2.0);
                let (rx, ry) = (cos * px + sin * py, -sin * px + cos * py);
                let ux = (rx - shear * ry) / gw + 0.5;
                let uy = ry / gh + 0.5;
                let mut dist = f32::MAX;
                for (si, seg) in SEGMENTS.iter().enumerate() {
                    if mask & (1 << si) != 0 {
                        // Work in pixel units so thickness is isotropic.
                        let d = segment_distance(ux * gw, uy * gh, &{
                            let mut s = *seg;
                            s[0] *= gw;
                            s[1] *= gh;
                            s[2] *= gw;
                            s[3] *= gh;
                            s
                        });
                        dist = dist.min(d);
                    }
                }
                let ink = (1.0 - (dist - thickness).max(0.0) / 0.9).clamp(0.0, 1.0);
                let noisy = ink + 0.06 * gaussian(&mut rng);
                data.push(noisy.clamp(0.0, 1.0));
            }
        }
    }
    Ok(Dataset {
        images: Tensor::new([n, H, W, 1], data)?,
        labels,
        classes: 10,
    })
}
