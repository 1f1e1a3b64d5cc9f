//! MNIST IDX loading, normalization and translation augmentation.
//!
//! IDX layout (all header fields big-endian `u32`):
//!
//! ```text
//! images: 0x00000803 | count | rows | cols | count*rows*cols bytes
//! labels: 0x00000801 | count | count bytes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;
pub const TEST_SET_SIZE: usize = 10_000;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Row-major 28×28 images stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pixels: Vec<f64>,
}

impl ImageSet {
    pub fn from_pixels(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() % IMAGE_PIXELS != 0 {
            return Err(Error::InvalidArgument(format!(
                "pixel buffer length {} is not a multiple of {IMAGE_PIXELS}",
                pixels.len()
            )));
        }
        Ok(ImageSet { pixels })
    }

    pub fn empty() -> Self {
        ImageSet { pixels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / IMAGE_PIXELS
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.pixels.chunks_exact(IMAGE_PIXELS)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Copies the listed images into a new set, in the given order.
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet { pixels }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<u8>,
}

impl LabelSet {
    pub fn from_labels(labels: Vec<u8>) -> Result<Self> {
        if let Some((index, &value)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= NUM_CLASSES)
        {
            return Err(Error::CorruptLabel { index, value });
        }
        Ok(LabelSet { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn select(&self, indices: &[usize]) -> LabelSet {
        LabelSet {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationSpec {
    mean: f64,
    std: f64,
}

impl NormalizationSpec {
    /// Training-set statistics of MNIST.
    pub const MNIST: NormalizationSpec = NormalizationSpec {
        mean: 0.1307,
        std: 0.3081,
    };

    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "normalization requires finite mean and std > 0, got ({mean}, {std})"
            )));
        }
        Ok(NormalizationSpec { mean, std })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    #[inline]
    pub fn apply(&self, p: f64) -> f64 {
        (p - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, p: f64) -> f64 {
        p * self.std + self.mean
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX3 image buffer, dividing each byte by 255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)?;
    let cols = read_u32(bytes, 12)?;
    if rows as usize != IMAGE_SIDE || cols as usize != IMAGE_SIDE {
        return Err(Error::Dimension { rows, cols });
    }
    let expected = 16 + count * IMAGE_PIXELS;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(ImageSet { pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<LabelSet> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    LabelSet::from_labels(bytes[8..expected].to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_images(&bytes)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_labels(&bytes)
}

/// Serializes raw intensities back to IDX3. Pixels are rounded from `[0,1]`
/// back to bytes, so a parsed file re-encodes to the identical byte stream.
pub fn encode_idx_images(set: &ImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend(
        set.pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn encode_idx_labels(set: &LabelSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&set.labels);
    out
}

pub fn normalize(set: &ImageSet, spec: NormalizationSpec) -> ImageSet {
    ImageSet {
        pixels: set.pixels.iter().map(|&p| spec.apply(p)).collect(),
    }
}

pub fn denormalize(set: &ImageSet, spec: NormalizationSpec) -> ImageSet {
    ImageSet {
        pixels: set.pixels.iter().map(|&p| spec.invert(p)).collect(),
    }
}

/// Shifts content right by `dx` columns and down by `dy` rows; vacated
/// pixels take `fill`.
pub fn translate(image: &[f64], dx: i32, dy: i32, fill: f64) -> Vec<f64> {
    assert_eq!(image.len(), IMAGE_PIXELS, "image must be 28x28");
    let side = IMAGE_SIDE as i32;
    let mut out = vec![fill; IMAGE_PIXELS];
    for r in 0..side {
        let src_r = r - dy;
        if !(0..side).contains(&src_r) {
            continue;
        }
        for c in 0..side {
            let src_c = c - dx;
            if (0..side).contains(&src_c) {
                out[(r * side + c) as usize] = image[(src_r * side + src_c) as usize];
            }
        }
    }
    out
}

pub const MAX_TRANSLATION: usize = 13;

/// Draws `(dx, dy)` uniformly from `{-max_shift..=max_shift}²` and translates.
pub fn random_translate<R: Rng + ?Sized>(
    image: &[f64],
    max_shift: usize,
    fill: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if max_shift > MAX_TRANSLATION {
        return Err(Error::InvalidArgument(format!(
            "max_shift {max_shift} exceeds {MAX_TRANSLATION}"
        )));
    }
    let m = max_shift as i32;
    let dx = rng.random_range(-m..=m);
    let dy = rng.random_range(-m..=m);
    Ok(translate(image, dx, dy, fill))
}

/// Train and test splits, raw intensities in `[0,1]`.
#[derive(Debug, Clone)]
pub struct MnistData {
    pub train_images: ImageSet,
    pub train_labels: LabelSet,
    pub test_images: ImageSet,
    pub test_labels: LabelSet,
}

impl MnistData {
    /// Environment variable that overrides the data directory.
    pub const DIR_ENV: &'static str = "KAG_DATA_DIR";

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let pair = |img: &str, lbl: &str| -> Result<(ImageSet, LabelSet)> {
            let images = load_idx_images(dir.join(img))?;
            let labels = load_idx_labels(dir.join(lbl))?;
            if images.len() != labels.len() {
                return Err(Error::CountMismatch {
                    images: images.len(),
                    labels: labels.len(),
                });
            }
            Ok((images, labels))
        };
        let (train_images, train_labels) = pair(TRAIN_IMAGES, TRAIN_LABELS)?;
        let (test_images, test_labels) = pair(TEST_IMAGES, TEST_LABELS)?;
        Ok(MnistData {
            train_images,
            train_labels,
            test_images,
            test_labels,
        })
    }

    /// `explicit`, else `$KAG_DATA_DIR`, else `data/mnist`.
    pub fn resolve_dir(explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        std::env::var_os(Self::DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }
}
