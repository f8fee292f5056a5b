use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb};

use super::{BinaryMask, DatasetSource, GroupedDataset, ImageGroup, RgbImage, SaliencyMap, Sample};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Problems tolerated by a non-strict load.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub skipped_without_mask: Vec<PathBuf>,
}

/// Loads `<root>/images` and `<root>/gt`; see the module docs for the layout.
///
/// Groups and samples come back sorted by name. Without `strict`, images
/// lacking a mask are skipped with a warning.
pub fn load_dataset(root: &Path, strict: bool) -> Result<GroupedDataset> {
    load_dataset_report(root, strict).map(|(ds, _)| ds)
}

pub fn load_dataset_report(root: &Path, strict: bool) -> Result<(GroupedDataset, LoadReport)> {
    let images_dir = root.join("images");
    let gt_dir = root.join("gt");
    let mut report = LoadReport::default();
    let mut groups = Vec::new();
    for group_dir in sorted_dirs(&images_dir)? {
        let name = file_name(&group_dir);
        let mut samples = Vec::new();
        for (stem, image_path) in image_files(&group_dir)? {
            let mask_path = gt_dir.join(&name).join(format!("{stem}.png"));
            if !mask_path.is_file() {
                if strict {
                    return Err(Error::MissingMask(image_path));
                }
                log::warn!("skipping {}: no mask at {}", image_path.display(), mask_path.display());
                report.skipped_without_mask.push(image_path);
                continue;
            }
            samples.push(Sample {
                stem,
                image: read_rgb(&image_path)?,
                mask: read_mask(&mask_path)?,
            });
        }
        if samples.is_empty() {
            return Err(Error::EmptyGroup(name));
        }
        groups.push(ImageGroup { name, samples });
    }
    let ds = GroupedDataset::new(groups, DatasetSource::Path(root.to_path_buf()))?;
    Ok((ds, report))
}

/// Writes the dataset in the standard layout (PNG images and masks).
pub fn save_dataset(ds: &GroupedDataset, root: &Path) -> Result<()> {
    for group in &ds.groups {
        let img_dir = root.join("images").join(&group.name);
        let gt_dir = root.join("gt").join(&group.name);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
        for s in &group.samples {
            write_rgb(&s.image, &img_dir.join(format!("{}.png", s.stem)))?;
            let gray: Vec<u8> = s.mask.values().iter().map(|&v| v * 255).collect();
            write_gray(s.mask.height(), s.mask.width(), gray, &gt_dir.join(format!("{}.png", s.stem)))?;
        }
    }
    Ok(())
}

/// 8-bit gray PNG with values `round(255 * v)`.
pub fn save_map(map: &SaliencyMap<f32>, path: &Path) -> Result<()> {
    write_gray(map.height(), map.width(), map.to_gray8(), path)
}

/// 8-bit PNG with foreground 255.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let gray = mask.values().iter().map(|&v| v * 255).collect();
    write_gray(mask.height(), mask.width(), gray, path)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    write_rgb(img, path)
}

/// Every image in one directory, sorted by stem.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    image_files(dir)?
        .into_iter()
        .map(|(stem, path)| Ok((stem, read_rgb(&path)?)))
        .collect()
}

pub(crate) fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    RgbImage::new(h as usize, w as usize, pixels)
}

pub(crate) fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (h, w, gray) = read_gray(path)?;
    BinaryMask::from_gray8(h, w, &gray)
}

pub(crate) fn write_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let raw: Vec<u8> = img
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size");
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub(crate) fn write_gray(height: usize, width: usize, gray: Vec<u8>, path: &Path) -> Result<()> {
    let buf = GrayImage::from_raw(width as u32, height as u32, gray).expect("buffer size");
    buf.save(path).map_err(|e| Error::image(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// `(stem, path)` of every image file, sorted by file name. A stem present
/// with several extensions is returned once per file.
fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            files.insert(file_name(&path), path);
        }
    }
    Ok(files
        .into_values()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (stem, p)
        })
        .collect())
}
