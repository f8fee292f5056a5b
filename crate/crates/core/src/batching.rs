//! Two-group training batches: group pairing, fixed/adaptive padding,
//! negative injection and augmentation.
//!
//! Every function is a pure function of its inputs and seed, so any epoch
//! can be rebuilt from `(seed, epoch)` alone.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryMask, GroupedDataset, ImageGroup, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, tag};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// Every group batch has exactly `batch_size_per_group` rows.
    Fixed,
    /// Both groups are padded to the larger group's size.
    Adaptive,
    /// Groups are used as they are.
    None,
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "adaptive" => Ok(Self::Adaptive),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown padding mode `{s}` (fixed, adaptive, none)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    HFlip,
    Color,
    Rotate,
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hflip" => Ok(Self::HFlip),
            "color" => Ok(Self::Color),
            "rotate" => Ok(Self::Rotate),
            _ => Err(Error::Config(format!("unknown augmentation `{s}` (hflip, color, rotate)"))),
        }
    }
}

pub const ROTATION_RANGE_DEG: f32 = 15.0;
pub const JITTER_RANGE: (f32, f32) = (0.75, 1.25);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchingConfig {
    pub batch_size_per_group: usize,
    pub padding_mode: PaddingMode,
    pub n_negatives: usize,
    pub augmentations: Vec<AugmentOp>,
    /// Augment the original samples as well as the padding copies.
    pub augment_base: bool,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        Self {
            batch_size_per_group: 8,
            padding_mode: PaddingMode::Fixed,
            n_negatives: 2,
            augmentations: vec![AugmentOp::HFlip, AugmentOp::Color, AugmentOp::Rotate],
            augment_base: true,
            resolution: 64,
            seed: 0,
        }
    }
}

impl BatchingConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.batch_size_per_group;
        if n < 2 || n % 2 != 0 {
            return Err(Error::Config(format!("batch_size must be even and >= 2, got {n}")));
        }
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be >= 1".into()));
        }
        Ok(())
    }
}

/// A sample on its way into a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSample {
    pub stem: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub negative: bool,
}

impl BatchSample {
    fn from_sample(s: &Sample) -> Self {
        Self {
            stem: s.stem.clone(),
            image: s.image.clone(),
            mask: s.mask.clone(),
            negative: false,
        }
    }
}

/// One group's rows, channels last: `images` is `[N, S, S, 3]`, `gts` is
/// `[N, S, S, 1]` with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub group: String,
    pub stems: Vec<String>,
    pub images: Tensor<f32>,
    pub gts: Tensor<f32>,
    pub negative_flags: Vec<bool>,
}

impl Batch {
    /// All samples must already share one size.
    pub fn from_samples(group: &str, samples: &[BatchSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Batching(format!("empty batch for group `{group}`")))?;
        let (h, w) = (first.image.height(), first.image.width());
        let mut images = Vec::with_capacity(samples.len() * h * w * 3);
        let mut gts = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.image.height(), s.image.width()) != (h, w) || (s.mask.height(), s.mask.width()) != (h, w) {
                return Err(Error::Batching(format!(
                    "sample `{}` is not {h}x{w}; resize before batching",
                    s.stem
                )));
            }
            if s.negative && !s.mask.is_empty() {
                return Err(Error::Batching(format!("negative row `{}` has a non-zero mask", s.stem)));
            }
            images.extend_from_slice(s.image.pixels());
            gts.extend(s.mask.values().iter().map(|&v| v as f32));
        }
        let n = samples.len();
        Ok(Self {
            group: group.to_string(),
            stems: samples.iter().map(|s| s.stem.clone()).collect(),
            images: Tensor::from_vec(&[n, h, w, 3], images)?,
            gts: Tensor::from_vec(&[n, h, w, 1], gts)?,
            negative_flags: samples.iter().map(|s| s.negative).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.negative_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.negative_flags.is_empty()
    }

    pub fn n_negatives(&self) -> usize {
        self.negative_flags.iter().filter(|&&f| f).count()
    }
}

/// Group index pairs for one epoch.
///
/// A seeded permutation is consumed in consecutive pairs; with an odd count
/// the leftover group is paired with a random other group.
pub fn pair_groups(ds: &GroupedDataset, seed: u64, epoch: u64) -> Result<Vec<(usize, usize)>> {
    let n = ds.groups.len();
    if n < 2 {
        return Err(Error::Batching(format!("pairing needs at least 2 groups, dataset has {n}")));
    }
    let mut rng = stream_rng(seed, &[tag::PAIRING, epoch]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut pairs: Vec<(usize, usize)> = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    if n % 2 == 1 {
        let last = order[n - 1];
        let mut partner = rng.random_range(0..n - 1);
        if partner >= last {
            partner += 1;
        }
        pairs.push((last, partner));
    }
    Ok(pairs)
}

/// Sampled parameters of one augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    /// Brightness, contrast and saturation factors.
    pub color: Option<[f32; 3]>,
    pub angle_deg: Option<f32>,
}

impl AugmentParams {
    /// Flip with probability 1/2; jitter factors and angle uniform in their
    /// ranges. Ops not listed stay disabled.
    pub fn sample(ops: &[AugmentOp], rng: &mut impl Rng) -> Self {
        let mut p = Self::default();
        for op in [AugmentOp::HFlip, AugmentOp::Color, AugmentOp::Rotate] {
            if !ops.contains(&op) {
                continue;
            }
            match op {
                AugmentOp::HFlip => p.hflip = rng.random_bool(0.5),
                AugmentOp::Color => {
                    p.color = Some(std::array::from_fn(|_| rng.random_range(JITTER_RANGE.0..=JITTER_RANGE.1)))
                }
                AugmentOp::Rotate => {
                    p.angle_deg = Some(rng.random_range(-ROTATION_RANGE_DEG..=ROTATION_RANGE_DEG))
                }
            }
        }
        p
    }
}

pub fn augment(image: &RgbImage, mask: &BinaryMask, ops: &[AugmentOp], seed: u64) -> (RgbImage, BinaryMask) {
    let mut rng = stream_rng(seed, &[tag::AUGMENT]);
    augment_with(image, mask, &AugmentParams::sample(ops, &mut rng))
}

/// Color jitter touches the image only; rotation is bilinear with zero fill
/// on the image and nearest-neighbour on the mask.
pub fn augment_with(image: &RgbImage, mask: &BinaryMask, p: &AugmentParams) -> (RgbImage, BinaryMask) {
    let mut image = image.clone();
    let mut mask = mask.clone();
    if p.hflip {
        image = hflip_image(&image);
        mask = hflip_mask(&mask);
    }
    if let Some([b, c, s]) = p.color {
        image = color_jitter(&image, b, c, s);
    }
    if let Some(angle) = p.angle_deg {
        if angle != 0.0 {
            let (img, m) = rotate(&image, &mask, angle);
            image = img;
            mask = m;
        }
    }
    (image, mask)
}

fn hflip_image(img: &RgbImage) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&img.pixel(y, x));
        }
    }
    RgbImage::new(h, w, out).expect("flip keeps shape and range")
}

fn hflip_mask(m: &BinaryMask) -> BinaryMask {
    let (h, w) = (m.height(), m.width());
    let values = (0..h).flat_map(|y| (0..w).rev().map(move |x| (y, x))).map(|(y, x)| m.get(y, x)).collect();
    BinaryMask::new(h, w, values).expect("flip keeps shape")
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn color_jitter(img: &RgbImage, brightness: f32, contrast: f32, saturation: f32) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let mut px: Vec<[f32; 3]> = (0..h * w).map(|i| img.pixel(i / w, i % w).map(|v| v * brightness)).collect();
    let mean = px.iter().map(|&p| luma(p)).sum::<f32>() / (h * w) as f32;
    for p in &mut px {
        *p = p.map(|v| (v - mean) * contrast + mean);
        let g = luma(*p);
        *p = p.map(|v| ((v - g) * saturation + g).clamp(0.0, 1.0));
    }
    RgbImage::new(h, w, px.into_iter().flatten().collect()).expect("clamped")
}

fn rotate(img: &RgbImage, mask: &BinaryMask, angle_deg: f32) -> (RgbImage, BinaryMask) {
    let (h, w) = (img.height(), img.width());
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let mut pixels = Vec::with_capacity(h * w * 3);
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            pixels.extend_from_slice(&sample_bilinear(img, sx - 0.5, sy - 0.5));
            let (nx, ny) = (sx.floor(), sy.floor());
            let inside = nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h;
            values.push(if inside { mask.get(ny as usize, nx as usize) } else { 0 });
        }
    }
    (
        RgbImage::new(h, w, pixels).expect("convex combination of valid pixels"),
        BinaryMask::new(h, w, values).expect("nearest keeps binary"),
    )
}

/// Bilinear lookup at continuous pixel coordinates, zero outside.
fn sample_bilinear(img: &RgbImage, x: f32, y: f32) -> [f32; 3] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut out = [0.0f32; 3];
    for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let weight = wx * wy;
            if weight == 0.0 {
                continue;
            }
            let (xi, yi) = (x0 + ox, y0 + oy);
            if xi < 0.0 || yi < 0.0 || xi as usize >= img.width() || yi as usize >= img.height() {
                continue;
            }
            let p = img.pixel(yi as usize, xi as usize);
            for c in 0..3 {
                out[c] += weight * p[c];
            }
        }
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

/// Exactly `n` samples. Oversized groups are subsampled without
/// replacement; undersized ones are padded with augmented copies of random
/// members and shuffled.
pub fn pad_group_fixed(group: &ImageGroup, n: usize, ops: &[AugmentOp], seed: u64) -> Vec<BatchSample> {
    let mut rng = stream_rng(seed, &[tag::PAD]);
    let m = group.len();
    if m >= n {
        return rand::seq::index::sample(&mut rng, m, n)
            .into_iter()
            .map(|i| BatchSample::from_sample(&group.samples[i]))
            .collect();
    }
    let mut out: Vec<BatchSample> = group.samples.iter().map(BatchSample::from_sample).collect();
    for _ in m..n {
        let src = &group.samples[rng.random_range(0..m)];
        let params = AugmentParams::sample(ops, &mut rng);
        let (image, mask) = augment_with(&src.image, &src.mask, &params);
        out.push(BatchSample {
            stem: src.stem.clone(),
            image,
            mask,
            negative: false,
        });
    }
    out.shuffle(&mut rng);
    out
}

/// Both outputs have `max(|a|, |b|)` rows; the larger group is only permuted.
pub fn pad_group_adaptive(
    a: &ImageGroup,
    b: &ImageGroup,
    ops: &[AugmentOp],
    seed: u64,
) -> (Vec<BatchSample>, Vec<BatchSample>) {
    let n = a.len().max(b.len());
    (
        pad_group_fixed(a, n, ops, derive_seed(seed, &[0])),
        pad_group_fixed(b, n, ops, derive_seed(seed, &[1])),
    )
}

/// Appends `k` images drawn from `others` with all-zero masks, then
/// shuffles. `k = 0` returns the input unchanged.
pub fn inject_negatives(
    mut samples: Vec<BatchSample>,
    others: &[&ImageGroup],
    k: usize,
    seed: u64,
) -> Result<Vec<BatchSample>> {
    if k == 0 {
        return Ok(samples);
    }
    if others.is_empty() {
        return Err(Error::Batching(format!("{k} negatives requested but there are no other groups")));
    }
    let mut rng = stream_rng(seed, &[tag::NEGATIVES]);
    for _ in 0..k {
        let group = others.choose(&mut rng).expect("non-empty");
        let src = group.samples.choose(&mut rng).ok_or_else(|| Error::EmptyGroup(group.name.clone()))?;
        samples.push(BatchSample {
            stem: src.stem.clone(),
            image: src.image.clone(),
            mask: BinaryMask::zeros(src.mask.height(), src.mask.width()),
            negative: true,
        });
    }
    samples.shuffle(&mut rng);
    Ok(samples)
}

/// Bilinear (half-pixel centers) on the image, nearest on the mask.
pub fn resize_sample(sample: &Sample, size: usize) -> Sample {
    if sample.image.height() == size && sample.image.width() == size && sample.mask.height() == size && sample.mask.width() == size {
        return sample.clone();
    }
    Sample {
        stem: sample.stem.clone(),
        image: resize_rgb(&sample.image, size, size),
        mask: resize_mask_nearest(&sample.mask, size, size),
    }
}

pub fn resize_rgb(img: &RgbImage, oh: usize, ow: usize) -> RgbImage {
    let t = Tensor::from_vec(&[1, img.height(), img.width(), 3], img.pixels().to_vec()).expect("image shape");
    let r = crate::autograd::resize_bilinear(&t, oh, ow);
    RgbImage::new(oh, ow, r.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("resized shape")
}

pub fn resize_mask_nearest(mask: &BinaryMask, oh: usize, ow: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let src = |d: usize, out: usize, inp: usize| (((d as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let values = (0..oh * ow).map(|i| mask.get(src(i / ow, oh, h), src(i % ow, ow, w))).collect();
    BinaryMask::new(oh, ow, values).expect("resized shape")
}

/// Copy of `ds` with every sample resized to `size x size`.
pub fn resize_dataset(ds: &GroupedDataset, size: usize) -> GroupedDataset {
    let groups = ds
        .groups
        .iter()
        .map(|g| ImageGroup {
            name: g.name.clone(),
            samples: g.samples.iter().map(|s| resize_sample(s, size)).collect(),
        })
        .collect();
    GroupedDataset {
        groups,
        source: ds.source.clone(),
    }
}

/// Batches for the pair `(a, b)` of group indices; `(epoch, index)` select
/// the random stream.
pub fn make_training_batch(
    ds: &GroupedDataset,
    pair: (usize, usize),
    cfg: &BatchingConfig,
    epoch: u64,
    index: u64,
) -> Result<(Batch, Batch)> {
    cfg.validate()?;
    let n_groups = ds.groups.len();
    if pair.0 >= n_groups || pair.1 >= n_groups {
        return Err(Error::Batching(format!("pair {pair:?} out of range for {n_groups} groups")));
    }
    let seed = derive_seed(cfg.seed, &[tag::BATCH, epoch, index]);
    let resized = |g: &ImageGroup| ImageGroup {
        name: g.name.clone(),
        samples: g.samples.iter().map(|s| resize_sample(s, cfg.resolution)).collect(),
    };
    let ga = resized(&ds.groups[pair.0]);
    let gb = resized(&ds.groups[pair.1]);
    let ops = &cfg.augmentations;

    let (mut rows_a, mut rows_b) = match cfg.padding_mode {
        PaddingMode::Fixed => (
            pad_group_fixed(&ga, cfg.batch_size_per_group, ops, derive_seed(seed, &[0])),
            pad_group_fixed(&gb, cfg.batch_size_per_group, ops, derive_seed(seed, &[1])),
        ),
        PaddingMode::Adaptive => pad_group_adaptive(&ga, &gb, ops, seed),
        PaddingMode::None => (
            ga.samples.iter().map(BatchSample::from_sample).collect(),
            gb.samples.iter().map(BatchSample::from_sample).collect(),
        ),
    };
    if cfg.augment_base {
        for (side, rows) in [&mut rows_a, &mut rows_b].into_iter().enumerate() {
            let mut rng = stream_rng(seed, &[tag::AUGMENT, side as u64]);
            for row in rows.iter_mut() {
                let params = AugmentParams::sample(ops, &mut rng);
                let (image, mask) = augment_with(&row.image, &row.mask, &params);
                row.image = image;
                row.mask = mask;
            }
        }
    }

    let finish = |gi: usize, rows: Vec<BatchSample>, side: u64| -> Result<Batch> {
        let name = ds.groups[gi].name.clone();
        let others: Vec<ImageGroup> = if cfg.n_negatives > 0 {
            ds.groups.iter().enumerate().filter(|&(j, _)| j != gi).map(|(_, g)| resized(g)).collect()
        } else {
            Vec::new()
        };
        let refs: Vec<&ImageGroup> = others.iter().collect();
        let rows = inject_negatives(rows, &refs, cfg.n_negatives, derive_seed(seed, &[2 + side]))?;
        Batch::from_samples(&name, &rows)
    };
    let a = finish(pair.0, rows_a, 0)?;
    let b = finish(pair.1, rows_b, 1)?;
    Ok((a, b))
}

/// All batch pairs of one epoch, in pairing order.
pub fn epoch_batches(ds: &GroupedDataset, cfg: &BatchingConfig, epoch: u64) -> Result<Vec<(Batch, Batch)>> {
    pair_groups(ds, cfg.seed, epoch)?
        .into_iter()
        .enumerate()
        .map(|(i, pair)| make_training_batch(ds, pair, cfg, epoch, i as u64))
        .collect()
}
