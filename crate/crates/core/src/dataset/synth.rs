//! Procedural co-saliency data: every group owns one (shape, color) class,
//! every image shows one instance of it among distractors borrowed from
//! other classes, and the mask covers the group's instance only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, DatasetSource, GroupedDataset, ImageGroup, RgbImage, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Self::Triangle => {
                // apex up, base at 0.8r below the center
                let base = 0.8 * r;
                if dy < -r || dy > base {
                    return false;
                }
                let half_width = r * (dy + r) / (base + r);
                dx.abs() <= half_width
            }
            Self::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

pub const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.12, 0.12]),
    ("green", [0.12, 0.80, 0.20]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("magenta", [0.85, 0.15, 0.85]),
    ("cyan", [0.10, 0.85, 0.90]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_groups: usize,
    pub group_size: usize,
    pub image_size: usize,
    pub n_distractors: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Class {
    shape: ShapeKind,
    color: usize,
}

impl Class {
    fn name(self) -> String {
        format!("{}-{}", PALETTE[self.color].0, self.shape.name())
    }
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f32,
    cy: f32,
    r: f32,
}

impl Placement {
    fn overlaps(&self, other: &Placement, margin: f32) -> bool {
        let reach = self.r + other.r + margin;
        (self.cx - other.cx).abs() < reach && (self.cy - other.cy).abs() < reach
    }
}

fn all_classes() -> Vec<Class> {
    (0..PALETTE.len())
        .flat_map(|color| ShapeKind::ALL.into_iter().map(move |shape| Class { shape, color }))
        .collect()
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GroupedDataset> {
    if spec.n_groups == 0 || spec.group_size == 0 {
        return Err(Error::Config("synthetic dataset needs at least one group and one image".into()));
    }
    if spec.image_size < 32 {
        return Err(Error::Config(format!("image_size must be >= 32, got {}", spec.image_size)));
    }
    let mut classes = all_classes();
    if spec.n_groups > classes.len() {
        return Err(Error::Config(format!(
            "{} groups requested but only {} distinct (shape, color) classes exist",
            spec.n_groups,
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    classes.shuffle(&mut rng);
    let targets = &classes[..spec.n_groups];
    let mut groups = Vec::with_capacity(spec.n_groups);
    for (gi, &target) in targets.iter().enumerate() {
        let distractor_pool: Vec<Class> = if spec.n_groups > 1 {
            targets.iter().enumerate().filter(|&(j, _)| j != gi).map(|(_, &c)| c).collect()
        } else {
            classes[spec.n_groups..].to_vec()
        };
        let name = target.name();
        let samples = (0..spec.group_size)
            .map(|i| {
                let (image, mask) = render_image(spec, target, &distractor_pool, &mut rng)?;
                Ok(Sample {
                    stem: format!("{name}_{i:03}"),
                    image,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(ImageGroup { name, samples });
    }
    GroupedDataset::new(groups, DatasetSource::Synthetic)
}

fn render_image(
    spec: &SyntheticSpec,
    target: Class,
    pool: &[Class],
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, BinaryMask)> {
    let size = spec.image_size;
    let sf = size as f32;
    let base: f32 = rng.random_range(0.30..0.60);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let mut image = RgbImage::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let n: f32 = rng.random_range(-0.04..0.04);
            image.set_pixel(y, x, std::array::from_fn(|c| base + tint[c] + n));
        }
    }

    let mut objects: Vec<(Class, Placement)> = Vec::with_capacity(1 + spec.n_distractors);
    let mut classes = vec![target];
    for _ in 0..spec.n_distractors {
        classes.push(pool[rng.random_range(0..pool.len())]);
    }
    for class in classes {
        let placement = place(&objects, sf, rng)?;
        objects.push((class, placement));
    }

    let mut mask = BinaryMask::zeros(size, size);
    for (k, (class, p)) in objects.iter().enumerate() {
        let color = PALETTE[class.color].1;
        let (x0, x1) = span(p.cx, p.r, size);
        let (y0, y1) = span(p.cy, p.r, size);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f32 + 0.5 - p.cx, y as f32 + 0.5 - p.cy);
                if class.shape.contains(dx, dy, p.r) {
                    let n: f32 = rng.random_range(-0.03..0.03);
                    image.set_pixel(y, x, color.map(|c| c + n));
                    if k == 0 {
                        mask.set(y, x, true);
                    }
                }
            }
        }
    }
    Ok((image, mask))
}

fn span(center: f32, r: f32, size: usize) -> (usize, usize) {
    let lo = (center - r - 1.0).floor().max(0.0) as usize;
    let hi = ((center + r + 1.0).ceil() as usize).min(size);
    (lo, hi)
}

/// Non-overlapping placement; shrinks the radius when the image is crowded.
fn place(existing: &[(Class, Placement)], size: f32, rng: &mut ChaCha8Rng) -> Result<Placement> {
    let mut r_max = 0.20 * size;
    let r_min_floor = 3.0;
    loop {
        let r_min = (0.6 * r_max).max(r_min_floor);
        for _ in 0..200 {
            let r = rng.random_range(r_min..=r_max.max(r_min));
            let lo = r + 1.0;
            let hi = size - r - 1.0;
            if hi <= lo {
                break;
            }
            let p = Placement {
                cx: rng.random_range(lo..hi),
                cy: rng.random_range(lo..hi),
                r,
            };
            if existing.iter().all(|(_, q)| !p.overlaps(q, 2.0)) {
                return Ok(p);
            }
        }
        r_max *= 0.8;
        if r_max < r_min_floor {
            return Err(Error::Config(
                "cannot place all objects without overlap; use fewer distractors or larger images".into(),
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_distractors: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_groups: 2,
            group_size: 4,
            image_size: 64,
            n_distractors,
            seed: 7,
        }
    }

    /// 4-connected components of the foreground.
    fn components(mask: &BinaryMask) -> usize {
        let (h, w) = (mask.height(), mask.width());
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if mask.values()[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut nb = Vec::new();
                if y > 0 {
                    nb.push(i - w);
                }
                if y + 1 < h {
                    nb.push(i + w);
                }
                if x > 0 {
                    nb.push(i - 1);
                }
                if x + 1 < w {
                    nb.push(i + 1);
                }
                for j in nb {
                    if mask.values()[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn every_mask_is_one_component() {
        let ds = generate_synthetic(&spec(1)).unwrap();
        assert_eq!(ds.n_images(), 8);
        for g in &ds.groups {
            for s in &g.samples {
                assert_eq!(components(&s.mask), 1, "{}", s.stem);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(generate_synthetic(&spec(1)).unwrap(), generate_synthetic(&spec(1)).unwrap());
        let mut other = spec(1);
        other.seed = 8;
        assert_ne!(generate_synthetic(&spec(1)).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn without_distractors_mask_is_the_whole_foreground() {
        let ds = generate_synthetic(&spec(0)).unwrap();
        for s in ds.groups.iter().flat_map(|g| &g.samples) {
            // Background pixels are gray (channel spread <= 0.08 + noise);
            // object pixels are saturated palette colors.
            for y in 0..64 {
                for x in 0..64 {
                    let p = s.image.pixel(y, x);
                    let spread = p.iter().cloned().fold(f32::MIN, f32::max) - p.iter().cloned().fold(f32::MAX, f32::min);
                    assert_eq!(spread > 0.3, s.mask.get(y, x) == 1, "{} at ({y},{x})", s.stem);
                }
            }
        }
    }

    #[test]
    fn too_many_groups_is_an_error() {
        let mut s = spec(0);
        s.n_groups = 25;
        assert!(generate_synthetic(&s).is_err());
        s.n_groups = 24;
        assert!(generate_synthetic(&s).is_ok());
    }

    #[test]
    fn group_classes_are_distinct() {
        let mut s = spec(2);
        s.n_groups = 8;
        let ds = generate_synthetic(&s).unwrap();
        let mut names: Vec<_> = ds.groups.iter().map(|g| g.name.clone()).collect();
        names.dedup();
        assert_eq!(names.len(), 8);
    }
}
