//! Training objective: pixel BCE, soft IoU and a triplet contrast between
//! per-group-half consensus embeddings.
//!
//! Each loss exists twice: as a plain function returning the value and its
//! analytic gradient, and as a tape operation built on that function.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOSS_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_bce: f64,
    pub lambda_iou: f64,
    pub lambda_iaccl: f64,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_bce: 30.0,
            lambda_iou: 0.5,
            lambda_iaccl: 3.0,
            triplet_margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_bce, self.lambda_iou, self.lambda_iaccl, self.triplet_margin];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights and margin must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }

    /// Weighted sum of unweighted components; a missing contrast term is
    /// left out.
    pub fn combine(&self, bce: f64, iou: f64, iaccl: Option<f64>) -> f64 {
        self.lambda_bce * bce + self.lambda_iou * iou + iaccl.map_or(0.0, |v| self.lambda_iaccl * v)
    }
}

/// Unweighted components and the weighted total of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub iou: f64,
    /// `None` when no embeddings were supplied.
    pub iaccl: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.bce.is_finite() && self.iou.is_finite() && self.iaccl.is_none_or(f64::is_finite) && self.total.is_finite()
    }
}

fn check_same(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred != gt {
        return Err(Error::Shape(format!("prediction {pred:?} and ground truth {gt:?} differ")));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to `[ε, 1 - ε]`.
/// The gradient is zero where the clamp is active.
pub fn bce_loss<T: Scalar>(pred: &[T], gt: &[T]) -> (T, Vec<T>) {
    assert_eq!(pred.len(), gt.len());
    let eps = T::lit(LOSS_EPS);
    let n = T::from_usize_lossy(pred.len().max(1));
    let mut total = T::zero();
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let pc = p.max(eps).min(T::one() - eps);
            total -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
            if p > eps && p < T::one() - eps {
                (pc - y) / (pc * (T::one() - pc)) / n
            } else {
                T::zero()
            }
        })
        .collect();
    (total / n, grad)
}

/// `1 - mean_i I_i / (U_i + ε)` over `images` equal chunks, with soft
/// intersection `Σ p·g` and union `Σ (p + g - p·g)`.
pub fn iou_loss<T: Scalar>(pred: &[T], gt: &[T], images: usize) -> (T, Vec<T>) {
    assert_eq!(pred.len(), gt.len());
    assert!(images >= 1 && pred.len() % images == 0);
    let per = pred.len() / images;
    let nf = T::from_usize_lossy(images);
    let eps = T::lit(LOSS_EPS);
    let mut ratio_sum = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for ((p, g), gr) in pred.chunks(per).zip(gt.chunks(per)).zip(grad.chunks_mut(per)) {
        let inter: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        let union = p.iter().zip(g).map(|(&a, &b)| a + b - a * b).sum::<T>() + eps;
        ratio_sum += inter / union;
        for (d, &gv) in gr.iter_mut().zip(g) {
            *d = -(gv * union - inter * (T::one() - gv)) / (union * union) / nf;
        }
    }
    (T::one() - ratio_sum / nf, grad)
}

fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// `max(0, ‖a - p‖ - ‖a - n‖ + margin)` and gradients for `(a, p, n)`.
/// A zero distance contributes a zero subgradient.
pub fn triplet_loss<T: Scalar>(a: &[T], p: &[T], n: &[T], margin: T) -> (T, [Vec<T>; 3]) {
    assert!(a.len() == p.len() && a.len() == n.len());
    let (dp, dn) = (distance(a, p), distance(a, n));
    let value = dp - dn + margin;
    let zeros = || vec![T::zero(); a.len()];
    if value <= T::zero() {
        return (T::zero(), [zeros(), zeros(), zeros()]);
    }
    let unit = |x: &[T], y: &[T], d: T| -> Vec<T> {
        if d > T::zero() {
            x.iter().zip(y).map(|(&u, &v)| (u - v) / d).collect()
        } else {
            zeros()
        }
    };
    let up = unit(a, p, dp);
    let un = unit(a, n, dn);
    let ga = up.iter().zip(&un).map(|(&x, &y)| x - y).collect();
    let gp = up.iter().map(|&x| -x).collect();
    (value, [ga, gp, un])
}

/// Contrast between group halves: `Tri(F2_0, F2_1, F1_1) + Tri(F1_0,
/// F1_1, F2_0)` written as `Tri(anchor, positive, negative)`.
/// Gradients are returned in argument order.
pub fn iaccl_loss<T: Scalar>(f1_0: &[T], f1_1: &[T], f2_0: &[T], f2_1: &[T], margin: T) -> (T, [Vec<T>; 4]) {
    let (v1, [a1, p1, n1]) = triplet_loss(f2_0, f2_1, f1_1, margin);
    let (v2, [a2, p2, n2]) = triplet_loss(f1_0, f1_1, f2_0, margin);
    let add = |x: &[T], y: &[T]| -> Vec<T> { x.iter().zip(y).map(|(&u, &v)| u + v).collect() };
    (v1 + v2, [a2, add(&n1, &p2), add(&a1, &n2), p1])
}

/// Tape version of [`bce_loss`]; `gt` is a constant.
pub fn bce<'t, T: Scalar>(pred: Var<'t, T>, gt: &Tensor<T>) -> Result<Var<'t, T>> {
    let pv = pred.value();
    check_same(pv.shape(), gt.shape())?;
    let (value, grad) = bce_loss(pv.data(), gt.data());
    Ok(scalar_op(pred, value, grad))
}

/// Tape version of [`iou_loss`] with one image per leading index.
pub fn iou<'t, T: Scalar>(pred: Var<'t, T>, gt: &Tensor<T>) -> Result<Var<'t, T>> {
    let pv = pred.value();
    check_same(pv.shape(), gt.shape())?;
    let images = pv.shape().first().copied().unwrap_or(0);
    if images == 0 {
        return Err(Error::Shape("IoU of an empty batch".into()));
    }
    let (value, grad) = iou_loss(pv.data(), gt.data(), images);
    Ok(scalar_op(pred, value, grad))
}

fn scalar_op<'t, T: Scalar>(x: Var<'t, T>, value: T, grad: Vec<T>) -> Var<'t, T> {
    let shape = x.shape();
    x.tape().push_op(Tensor::scalar(value), &[x], move || {
        let grad = Tensor::from_vec(&shape, grad).expect("gradient shape");
        Box::new(move |g| vec![Some(grad.map(|v| v * g.data()[0]))])
    })
}

/// Tape version of [`iaccl_loss`]; `e = [[F1_0, F1_1], [F2_0, F2_1]]`.
pub fn iaccl<'t, T: Scalar>(e: &[[Var<'t, T>; 2]; 2], margin: T) -> Result<Var<'t, T>> {
    let vars = [e[0][0], e[0][1], e[1][0], e[1][1]];
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let c = values[0].numel();
    if values.iter().any(|v| v.numel() != c) {
        return Err(Error::Shape("consensus embeddings differ in width".into()));
    }
    let (value, grads) = iaccl_loss(values[0].data(), values[1].data(), values[2].data(), values[3].data(), margin);
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(vars[0].tape().push_op(Tensor::scalar(value), &vars, move || {
        let grads: Vec<Tensor<T>> = grads
            .into_iter()
            .zip(&shapes)
            .map(|(g, s)| Tensor::from_vec(s, g).expect("gradient shape"))
            .collect();
        Box::new(move |g| grads.iter().map(|t| Some(t.map(|v| v * g.data()[0]))).collect())
    }))
}

/// `λ1·BCE + λ2·IoU + λ3·IACCL` with the saliency terms averaged over the
/// two groups. Without embeddings the contrast term is dropped.
pub fn total_loss<'t, T: Scalar>(
    preds: [Var<'t, T>; 2],
    gts: [&Tensor<T>; 2],
    embeddings: Option<&[[Var<'t, T>; 2]; 2]>,
    cfg: &LossConfig,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let half = T::lit(0.5);
    let bce_v = bce(preds[0], gts[0])?.add(bce(preds[1], gts[1])?).scale(half);
    let iou_v = iou(preds[0], gts[0])?.add(iou(preds[1], gts[1])?).scale(half);
    let mut total = bce_v.scale(T::lit(cfg.lambda_bce)).add(iou_v.scale(T::lit(cfg.lambda_iou)));
    let mut iaccl_value = None;
    if let Some(e) = embeddings {
        let term = iaccl(e, T::lit(cfg.triplet_margin))?;
        iaccl_value = Some(term.item().to_f64().unwrap_or(f64::NAN));
        total = total.add(term.scale(T::lit(cfg.lambda_iaccl)));
    }
    let f = |v: Var<'t, T>| v.item().to_f64().unwrap_or(f64::NAN);
    let breakdown = LossBreakdown {
        bce: f(bce_v),
        iou: f(iou_v),
        iaccl: iaccl_value,
        total: f(total),
    };
    Ok((total, breakdown))
}
