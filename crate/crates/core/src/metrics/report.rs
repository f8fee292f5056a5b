use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{score_image, thresholds, ImageCurves, ImageScores, N_THRESHOLDS};
use crate::autograd::resize_bilinear;
use crate::dataset::{io::read_gray, GroupedDataset, SaliencyMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Predicted maps keyed by group name and stem.
#[derive(Clone, Debug, Default)]
pub struct Predictions<T = f32> {
    maps: BTreeMap<(String, String), SaliencyMap<T>>,
}

impl<T: Scalar> Predictions<T> {
    pub fn new() -> Self {
        Self { maps: BTreeMap::new() }
    }

    pub fn insert(&mut self, group: &str, stem: &str, map: SaliencyMap<T>) {
        self.maps.insert((group.to_owned(), stem.to_owned()), map);
    }

    pub fn get(&self, group: &str, stem: &str) -> Option<&SaliencyMap<T>> {
        self.maps.get(&(group.to_owned(), stem.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &SaliencyMap<T>)> {
        self.maps.iter().map(|((g, s), m)| (g.as_str(), s.as_str(), m))
    }
}

/// Reads `<dir>/<group>/<stem>.png` for every image of `ds`.
pub fn load_predictions(dir: &Path, ds: &GroupedDataset) -> Result<Predictions<f32>> {
    let mut out = Predictions::new();
    let mut missing = Vec::new();
    for group in &ds.groups {
        for s in &group.samples {
            let path = dir.join(&group.name).join(format!("{}.png", s.stem));
            if !path.is_file() {
                missing.push(format!("{}/{}", group.name, s.stem));
                continue;
            }
            let (h, w, gray) = read_gray(&path)?;
            out.insert(&group.name, &s.stem, SaliencyMap::from_gray8(h, w, &gray)?);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    Ok(out)
}

/// The six reported scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "Smeasure")]
    pub s_measure: f64,
    #[serde(rename = "Emax")]
    pub e_max: f64,
    #[serde(rename = "Emean")]
    pub e_mean: f64,
    #[serde(rename = "Fmax")]
    pub f_max: f64,
    #[serde(rename = "Fmean")]
    pub f_mean: f64,
    #[serde(rename = "MAE")]
    pub mae: f64,
}

impl Scores {
    fn from_image<T: Scalar>(s: &ImageScores<T>) -> Self {
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        Self {
            s_measure: f(s.s_measure),
            e_max: f(s.e_max),
            e_mean: f(s.e_mean),
            f_max: f(s.f_max),
            f_mean: f(s.f_mean),
            mae: f(s.mae),
        }
    }

    fn mean(items: &[Scores]) -> Self {
        let n = items.len() as f64;
        let sum = |get: fn(&Scores) -> f64| items.iter().map(get).sum::<f64>() / n;
        Self {
            s_measure: sum(|s| s.s_measure),
            e_max: sum(|s| s.e_max),
            e_mean: sum(|s| s.e_mean),
            f_max: sum(|s| s.f_max),
            f_mean: sum(|s| s.f_mean),
            mae: sum(|s| s.mae),
        }
    }
}

/// Image-averaged threshold curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_measure: Vec<f64>,
    pub e_measure: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: usize,
    pub per_group: BTreeMap<String, Scores>,
    /// Mean over all images.
    pub aggregate: Scores,
    /// `group/stem` of images whose ground truth has no foreground; their
    /// F-measure is reported as zero.
    pub empty_gt: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<CurveSet>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub parallel: bool,
    pub curves: bool,
}

/// Scores every image of `ds` against its prediction. Predictions of a
/// different size are resized to the ground truth bilinearly. The report
/// does not depend on `opts.parallel`.
pub fn evaluate_dataset<T: Scalar>(preds: &Predictions<T>, ds: &GroupedDataset, opts: EvalOptions) -> Result<MetricReport> {
    let mut jobs = Vec::with_capacity(ds.n_images());
    let mut missing = Vec::new();
    for (gi, group) in ds.groups.iter().enumerate() {
        for s in &group.samples {
            match preds.get(&group.name, &s.stem) {
                Some(p) => jobs.push((gi, s, p)),
                None => missing.push(format!("{}/{}", group.name, s.stem)),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }

    let score = |&(_, s, p): &(usize, &crate::dataset::Sample, &SaliencyMap<T>)| {
        let (h, w) = (s.mask.height(), s.mask.width());
        if (p.height(), p.width()) == (h, w) {
            score_image(p, &s.mask)
        } else {
            score_image(&resize_map(p, h, w)?, &s.mask)
        }
    };
    let results: Vec<(ImageScores<T>, ImageCurves<T>)> = if opts.parallel {
        jobs.par_iter().map(score).collect::<Result<_>>()?
    } else {
        jobs.iter().map(score).collect::<Result<_>>()?
    };

    let mut per_group_scores: Vec<Vec<Scores>> = vec![Vec::new(); ds.groups.len()];
    let mut all = Vec::with_capacity(results.len());
    let mut empty_gt = Vec::new();
    for ((gi, s, _), (r, _)) in jobs.iter().zip(&results) {
        let scores = Scores::from_image(r);
        per_group_scores[*gi].push(scores);
        all.push(scores);
        if r.empty_gt {
            empty_gt.push(format!("{}/{}", ds.groups[*gi].name, s.stem));
        }
    }
    let per_group = ds
        .groups
        .iter()
        .zip(&per_group_scores)
        .map(|(g, s)| (g.name.clone(), Scores::mean(s)))
        .collect();

    let curves = opts.curves.then(|| {
        let n = results.len() as f64;
        let mean_curve = |get: fn(&ImageCurves<T>) -> &Vec<T>| -> Vec<f64> {
            (0..N_THRESHOLDS)
                .map(|k| results.iter().map(|(_, c)| get(c)[k].to_f64().unwrap_or(f64::NAN)).sum::<f64>() / n)
                .collect()
        };
        CurveSet {
            thresholds: thresholds::<f64>(),
            precision: mean_curve(|c| &c.precision),
            recall: mean_curve(|c| &c.recall),
            f_measure: mean_curve(|c| &c.f),
            e_measure: mean_curve(|c| &c.e),
        }
    });

    Ok(MetricReport {
        images: all.len(),
        per_group,
        aggregate: Scores::mean(&all),
        empty_gt,
        curves,
    })
}

fn resize_map<T: Scalar>(p: &SaliencyMap<T>, h: usize, w: usize) -> Result<SaliencyMap<T>> {
    let t = Tensor::from_vec(&[1, p.height(), p.width(), 1], p.values().to_vec())?;
    let r = resize_bilinear(&t, h, w);
    SaliencyMap::new(h, w, r.into_data().into_iter().map(|v| v.max(T::zero()).min(T::one())).collect())
}
