//! Grouped image/mask data: in-memory model, on-disk layout, statistics,
//! validation and a synthetic generator.
//!
//! On disk a dataset lives under one root:
//!
//! ```text
//! <root>/images/<group>/<stem>.<png|jpg|jpeg>
//! <root>/gt/<group>/<stem>.png          8-bit grayscale, foreground >= 128
//! ```

pub(crate) mod io;
mod stats;
mod synth;
mod validate;

use std::fmt;
use std::path::PathBuf;

use crate::error::{Error, Result};

pub use io::{load_dataset, load_dataset_report, load_image_dir, save_dataset, save_map, save_mask, save_rgb, LoadReport};
pub use stats::{compute_stats, stats_from_records, ImageRecord, DatasetStats};
pub use synth::{generate_synthetic, ShapeKind, SyntheticSpec, PALETTE};
pub use validate::{validate_dataset, Finding, FindingKind};

/// Mask threshold on 8-bit input: values at or above are foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// Height x width x 3 image with values in `[0, 1]`, row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub(crate) fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[i + c] = v.clamp(0.0, 1.0);
        }
    }
}

/// Height x width mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask with {} values",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    /// Binarizes 8-bit gray levels at [`MASK_THRESHOLD`].
    pub fn from_gray8(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            gray.iter().map(|&g| u8::from(g >= MASK_THRESHOLD)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub(crate) fn set(&mut self, y: usize, x: usize, v: bool) {
        self.values[y * self.width + x] = u8::from(v);
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground() == 0
    }

    pub fn is_full(&self) -> bool {
        self.foreground() == self.values.len()
    }
}

/// Real-valued map in `[0, 1]`, one value per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T = f32> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: num_traits::Float> SaliencyMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} map with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::Shape("saliency values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            values: mask.values.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn mean(&self) -> T {
        let sum = self.values.iter().fold(T::zero(), |a, &v| a + v);
        sum / T::from(self.values.len()).expect("count")
    }

    /// 8-bit gray encoding, `round(255 * v)`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v.to_f64().unwrap_or(0.0) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_gray8(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            gray.iter().map(|&g| T::from(g as f64 / 255.0).expect("float")).collect(),
        )
    }
}

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
}

/// Images sharing one co-salient class.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroup {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl ImageGroup {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic,
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Path(p) => write!(f, "{}", p.display()),
            Self::Synthetic => f.write_str("synthetic"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    pub groups: Vec<ImageGroup>,
    pub source: DatasetSource,
}

impl GroupedDataset {
    /// Checks the structural invariants: at least one group, unique
    /// non-empty groups.
    pub fn new(groups: Vec<ImageGroup>, source: DatasetSource) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Dataset("dataset has no groups".into()));
        }
        let mut names: Vec<&str> = groups.iter().map(|g| g.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Dataset(format!("duplicate group name `{}`", w[0])));
        }
        if let Some(g) = groups.iter().find(|g| g.is_empty()) {
            return Err(Error::EmptyGroup(g.name.clone()));
        }
        Ok(Self { groups, source })
    }

    pub fn n_images(&self) -> usize {
        self.groups.iter().map(ImageGroup::len).sum()
    }

    pub fn group(&self, name: &str) -> Option<&ImageGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Keeps only the named groups, in dataset order.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        let groups: Vec<ImageGroup> = self
            .groups
            .iter()
            .filter(|g| names.contains(&g.name.as_str()))
            .cloned()
            .collect();
        Self::new(groups, self.source.clone())
    }
}
