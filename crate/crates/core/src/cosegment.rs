//! Foreground extraction from saliency maps: threshold each map and blur
//! everything outside the mask.

use image::{ImageBuffer, Rgb};

use crate::dataset::{BinaryMask, RgbImage, SaliencyMap};
use crate::error::{Error, Result};

/// Lower bound of the adaptive threshold, so an all-zero map selects nothing.
pub const THRESHOLD_FLOOR: f32 = 1e-6;
pub const DEFAULT_BLUR_SIGMA: f32 = 4.0;

/// `max(floor, min(1, 2 * mean(map)))`
pub fn adaptive_threshold(map: &SaliencyMap<f32>) -> f32 {
    (2.0 * map.mean()).min(1.0).max(THRESHOLD_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMode {
    /// [`adaptive_threshold`] of each map.
    Adaptive,
    Fixed(f32),
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(Self::Adaptive);
        }
        match s.parse::<f32>() {
            Ok(t) if (0.0..=1.0).contains(&t) => Ok(Self::Fixed(t)),
            _ => Err(Error::Config(format!("threshold must be `adaptive` or a number in [0, 1], got `{s}`"))),
        }
    }
}

/// Pixels with `map >= threshold`.
pub fn binarize(map: &SaliencyMap<f32>, mode: ThresholdMode) -> BinaryMask {
    let t = match mode {
        ThresholdMode::Adaptive => adaptive_threshold(map),
        ThresholdMode::Fixed(t) => t,
    };
    let values = map.values().iter().map(|&v| u8::from(v >= t)).collect();
    BinaryMask::new(map.height(), map.width(), values).expect("same shape")
}

/// The image with its background Gaussian-blurred, and the mask used.
pub fn composite(
    image: &RgbImage,
    map: &SaliencyMap<f32>,
    mode: ThresholdMode,
    sigma: f32,
) -> Result<(RgbImage, BinaryMask)> {
    let (h, w) = (image.height(), image.width());
    if (map.height(), map.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "map {}x{} does not match image {h}x{w}",
            map.height(),
            map.width()
        )));
    }
    let mask = binarize(map, mode);
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, image.pixels().to_vec()).expect("buffer size");
    let blurred = image::imageops::blur(&buf, sigma);
    let mut out = blurred.into_raw();
    for (i, &m) in mask.values().iter().enumerate() {
        if m == 1 {
            out[3 * i..3 * i + 3].copy_from_slice(&image.pixels()[3 * i..3 * i + 3]);
        }
    }
    Ok((RgbImage::new(h, w, out)?, mask))
}
