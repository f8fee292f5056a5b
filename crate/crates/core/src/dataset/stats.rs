use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GroupedDataset;
use crate::error::{Error, Result};

/// Dataset summary: counts plus mean and population standard deviation of
/// group sizes and image resolutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_images: usize,
    pub n_groups: usize,
    pub group_size_mean: f64,
    pub group_size_std: f64,
    pub res_h_mean: f64,
    pub res_h_std: f64,
    pub res_w_mean: f64,
    pub res_w_std: f64,
}

/// One row of an image manifest (`group,stem,height,width` CSV).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub group: String,
    pub stem: String,
    pub height: usize,
    pub width: usize,
}

impl ImageRecord {
    pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        reader
            .deserialize()
            .map(|r| r.map_err(|e| Error::Dataset(format!("{}: {e}", path.display()))))
            .collect()
    }
}

pub fn compute_stats(ds: &GroupedDataset) -> DatasetStats {
    let records: Vec<ImageRecord> = ds
        .groups
        .iter()
        .flat_map(|g| {
            g.samples.iter().map(|s| ImageRecord {
                group: g.name.clone(),
                stem: s.stem.clone(),
                height: s.image.height(),
                width: s.image.width(),
            })
        })
        .collect();
    stats_from_records(&records).expect("datasets are never empty")
}

pub fn stats_from_records(records: &[ImageRecord]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::Dataset("no images to summarize".into()));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *sizes.entry(r.group.as_str()).or_default() += 1;
    }
    let group_sizes: Vec<f64> = sizes.values().map(|&n| n as f64).collect();
    let heights: Vec<f64> = records.iter().map(|r| r.height as f64).collect();
    let widths: Vec<f64> = records.iter().map(|r| r.width as f64).collect();
    let (group_size_mean, group_size_std) = mean_std(&group_sizes);
    let (res_h_mean, res_h_std) = mean_std(&heights);
    let (res_w_mean, res_w_std) = mean_std(&widths);
    Ok(DatasetStats {
        n_images: records.len(),
        n_groups: sizes.len(),
        group_size_mean,
        group_size_std,
        res_h_mean,
        res_h_std,
        res_w_mean,
        res_w_std,
    })
}

/// Mean and population standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
