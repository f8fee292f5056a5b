//! Saliency-map evaluation: MAE, F-measure, E-measure and S-measure.
//!
//! All scores are computed in the map's own float type and lie in
//! `[0, 1]`. Threshold sweeps use the 256 thresholds `k / 255` with the
//! predicate `pred >= t`. Ratios whose denominator is zero are defined as
//! zero, which keeps `pred == gt` an exact fixed point of every score.

mod report;

pub use report::{evaluate_dataset, load_predictions, CurveSet, EvalOptions, MetricReport, Predictions, Scores};

use crate::dataset::{BinaryMask, SaliencyMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const N_THRESHOLDS: usize = 256;
/// Precision weight of the F-measure.
pub const BETA_SQ: f64 = 0.3;
/// Object/region balance of the S-measure.
pub const ALPHA: f64 = 0.5;

fn check_shape<T: Scalar>(pred: &SaliencyMap<T>, gt: &BinaryMask) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn ratio<T: Scalar>(num: T, den: T) -> T {
    if den == T::zero() {
        T::zero()
    } else {
        num / den
    }
}

fn count<T: Scalar>(n: usize) -> T {
    T::from_usize_lossy(n)
}

pub fn thresholds<T: Scalar>() -> Vec<T> {
    (0..N_THRESHOLDS).map(|k| count::<T>(k) / T::lit(255.0)).collect()
}

/// Mean absolute difference.
pub fn mae<T: Scalar>(pred: &SaliencyMap<T>, gt: &BinaryMask) -> Result<T> {
    check_shape(pred, gt)?;
    let sum: T = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| (p - count(g as usize)).abs())
        .sum();
    Ok(sum / count(gt.values().len()))
}

/// Per-threshold foreground and background counts of `pred >= t_k`.
struct Sweep {
    /// `tp[k]`, `fp[k]`: foreground and background pixels at or above `t_k`.
    tp: Vec<usize>,
    fp: Vec<usize>,
    fg: usize,
    n: usize,
}

impl Sweep {
    fn new<T: Scalar>(pred: &[T], gt: &[u8], thresholds: &[T]) -> Self {
        let mut hist_fg = vec![0usize; N_THRESHOLDS];
        let mut hist_bg = vec![0usize; N_THRESHOLDS];
        let top = N_THRESHOLDS - 1;
        for (&p, &g) in pred.iter().zip(gt) {
            // largest k with t_k <= p
            let mut k = (p * T::lit(255.0)).floor().to_usize().unwrap_or(0).min(top);
            while k < top && p >= thresholds[k + 1] {
                k += 1;
            }
            while k > 0 && p < thresholds[k] {
                k -= 1;
            }
            if g == 1 {
                hist_fg[k] += 1;
            } else {
                hist_bg[k] += 1;
            }
        }
        let suffix = |h: Vec<usize>| {
            let mut acc = 0;
            let mut out = vec![0; N_THRESHOLDS];
            for k in (0..N_THRESHOLDS).rev() {
                acc += h[k];
                out[k] = acc;
            }
            out
        };
        Self {
            tp: suffix(hist_fg),
            fp: suffix(hist_bg),
            fg: gt.iter().filter(|&&g| g == 1).count(),
            n: gt.len(),
        }
    }
}

/// Threshold sweep of the F-measure.
#[derive(Clone, Debug, PartialEq)]
pub struct FMeasure<T> {
    pub precision: Vec<T>,
    pub recall: Vec<T>,
    pub f: Vec<T>,
    pub f_max: T,
    pub f_mean: T,
    /// The ground truth had no foreground; every score is reported as zero.
    pub empty_gt: bool,
}

pub fn f_measure<T: Scalar>(pred: &SaliencyMap<T>, gt: &BinaryMask) -> Result<FMeasure<T>> {
    check_shape(pred, gt)?;
    Ok(f_from_sweep(&Sweep::new(pred.values(), gt.values(), &thresholds::<T>())))
}

fn f_from_sweep<T: Scalar>(s: &Sweep) -> FMeasure<T> {
    let beta = T::lit(BETA_SQ);
    let mut out = FMeasure {
        precision: Vec::with_capacity(N_THRESHOLDS),
        recall: Vec::with_capacity(N_THRESHOLDS),
        f: Vec::with_capacity(N_THRESHOLDS),
        f_max: T::zero(),
        f_mean: T::zero(),
        empty_gt: s.fg == 0,
    };
    for k in 0..N_THRESHOLDS {
        let tp = count::<T>(s.tp[k]);
        let p = ratio(tp, count(s.tp[k] + s.fp[k]));
        let r = ratio(tp, count(s.fg));
        let f = ratio((T::one() + beta) * p * r, beta * p + r);
        out.precision.push(p);
        out.recall.push(r);
        out.f.push(f);
    }
    out.f_max = out.f.iter().copied().fold(T::zero(), T::max);
    out.f_mean = out.f.iter().copied().sum::<T>() / count(N_THRESHOLDS);
    out
}

/// Threshold sweep of the E-measure.
#[derive(Clone, Debug, PartialEq)]
pub struct EMeasure<T> {
    pub curve: Vec<T>,
    pub e_max: T,
    pub e_mean: T,
}

pub fn e_measure<T: Scalar>(pred: &SaliencyMap<T>, gt: &BinaryMask) -> Result<EMeasure<T>> {
    check_shape(pred, gt)?;
    Ok(e_from_sweep(&Sweep::new(pred.values(), gt.values(), &thresholds::<T>())))
}

fn e_from_sweep<T: Scalar>(s: &Sweep) -> EMeasure<T> {
    let curve: Vec<T> = (0..N_THRESHOLDS)
        .map(|k| {
            let on = s.tp[k] + s.fp[k];
            alignment_from_counts([s.n - on - (s.fg - s.tp[k]), s.fp[k], s.fg - s.tp[k], s.tp[k]])
        })
        .collect();
    EMeasure {
        e_max: curve.iter().copied().fold(T::zero(), T::max),
        e_mean: curve.iter().copied().sum::<T>() / count(N_THRESHOLDS),
        curve,
    }
}

/// Enhanced alignment of a binary map `binary` (values 0/1) with `gt`.
pub fn enhanced_alignment<T: Scalar>(binary: &[u8], gt: &[u8]) -> T {
    assert_eq!(binary.len(), gt.len());
    let mut c = [0usize; 4];
    for (&b, &g) in binary.iter().zip(gt) {
        c[usize::from(g) * 2 + usize::from(b)] += 1;
    }
    alignment_from_counts(c)
}

/// `counts` of (gt, binary) pairs in the order 00, 01, 10, 11.
fn alignment_from_counts<T: Scalar>(counts: [usize; 4]) -> T {
    let n: usize = counts.iter().sum();
    let nf = count::<T>(n);
    let on = counts[1] + counts[3];
    let fg = counts[2] + counts[3];
    if fg == 0 {
        return count::<T>(n - on) / nf;
    }
    if fg == n {
        return count::<T>(on) / nf;
    }
    let mu_b = count::<T>(on) / nf;
    let mu_g = count::<T>(fg) / nf;
    let mut total = T::zero();
    for (idx, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let g = count::<T>(idx / 2) - mu_g;
        let b = count::<T>(idx % 2) - mu_b;
        let xi = ratio(T::lit(2.0) * (g * b), g * g + b * b);
        let phi = (xi + T::one()) * (xi + T::one()) / T::lit(4.0);
        total += count::<T>(c) * phi;
    }
    total / nf
}

/// Structure measure: an even blend of object-level and region-level
/// similarity, clamped to `[0, 1]`.
pub fn s_measure<T: Scalar>(pred: &SaliencyMap<T>, gt: &BinaryMask) -> Result<T> {
    check_shape(pred, gt)?;
    let (p, g) = (pred.values(), gt.values());
    let fg = gt.foreground();
    let clamp = |v: T| v.max(T::zero()).min(T::one());
    if fg == 0 {
        return Ok(clamp(T::one() - pred.mean()));
    }
    if fg == g.len() {
        return Ok(clamp(pred.mean()));
    }
    let alpha = T::lit(ALPHA);
    let s = alpha * object_score(p, g, fg) + (T::one() - alpha) * region_score(p, g, gt.height(), gt.width(), fg);
    Ok(clamp(s))
}

fn object_score<T: Scalar>(p: &[T], g: &[u8], fg: usize) -> T {
    let side = |want: u8| {
        let xs: Vec<T> = p
            .iter()
            .zip(g)
            .filter(|(_, &gv)| gv == want)
            .map(|(&v, _)| if want == 1 { v } else { T::one() - v })
            .collect();
        let (mean, var) = moments(&xs);
        T::lit(2.0) * mean / (mean * mean + T::one() + var.sqrt())
    };
    let mu = count::<T>(fg) / count(g.len());
    let (s_fg, s_bg) = (side(1), side(0));
    s_bg + mu * (s_fg - s_bg)
}

/// Population mean and variance.
fn moments<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = count::<T>(xs.len());
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var)
}

/// Region split point of one axis: one past the rounded foreground centroid.
fn split_index(weighted_sum: usize, fg: usize, len: usize) -> usize {
    let centroid = weighted_sum as f64 / fg as f64;
    ((centroid.round() as usize) + 1).min(len)
}

fn region_score<T: Scalar>(p: &[T], g: &[u8], h: usize, w: usize, fg: usize) -> T {
    let (mut sy, mut sx) = (0usize, 0usize);
    for (i, &v) in g.iter().enumerate() {
        if v == 1 {
            sy += i / w;
            sx += i % w;
        }
    }
    let (ys, xs) = (split_index(sy, fg, h), split_index(sx, fg, w));
    let mut total = T::zero();
    for (y0, y1) in [(0, ys), (ys, h)] {
        for (x0, x1) in [(0, xs), (xs, w)] {
            let area = (y1 - y0) * (x1 - x0);
            if area == 0 {
                continue;
            }
            let mut a = Vec::with_capacity(area);
            let mut b = Vec::with_capacity(area);
            for y in y0..y1 {
                a.extend_from_slice(&p[y * w + x0..y * w + x1]);
                b.extend(g[y * w + x0..y * w + x1].iter().map(|&v| count::<T>(v as usize)));
            }
            total += count::<T>(area) * ssim(&a, &b);
        }
    }
    total / count(p.len())
}

fn ssim<T: Scalar>(x: &[T], y: &[T]) -> T {
    let (mx, vx) = moments(x);
    let (my, vy) = moments(y);
    let n = count::<T>(x.len());
    let cov = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum::<T>() / n;
    let alpha = T::lit(4.0) * mx * my * cov;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != T::zero() {
        ratio(alpha, beta)
    } else if beta == T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Every score of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores<T> {
    pub s_measure: T,
    pub e_max: T,
    pub e_mean: T,
    pub f_max: T,
    pub f_mean: T,
    pub mae: T,
    pub empty_gt: bool,
}

/// Per-threshold curves of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCurves<T> {
    pub precision: Vec<T>,
    pub recall: Vec<T>,
    pub f: Vec<T>,
    pub e: Vec<T>,
}

/// Scores `pred` against `gt`, sharing one threshold sweep between the F-
/// and E-measures.
pub fn score_image<T: Scalar>(pred: &SaliencyMap<T>, gt: &BinaryMask) -> Result<(ImageScores<T>, ImageCurves<T>)> {
    check_shape(pred, gt)?;
    let sweep = Sweep::new(pred.values(), gt.values(), &thresholds::<T>());
    let f = f_from_sweep::<T>(&sweep);
    let e = e_from_sweep::<T>(&sweep);
    let scores = ImageScores {
        s_measure: s_measure(pred, gt)?,
        e_max: e.e_max,
        e_mean: e.e_mean,
        f_max: f.f_max,
        f_mean: f.f_mean,
        mae: mae(pred, gt)?,
        empty_gt: f.empty_gt,
    };
    let curves = ImageCurves {
        precision: f.precision,
        recall: f.recall,
        f: f.f,
        e: e.curve,
    };
    Ok((scores, curves))
}
