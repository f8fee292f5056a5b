use std::ops::Range;
use std::sync::Once;

use super::attention::{linear, register_linear};
use super::{ConsensusSet, FeaturePyramid, ModelConfig, Net, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-12;

static SINGLE_IMAGE_WARNING: Once = Once::new();

pub(super) fn register<T: Scalar>(cfg: &ModelConfig, s: &mut ParamStore<T>) {
    let c = &cfg.stage_channels;
    register_linear(s, "hcf.fuse", c[1] + c[2] + c[3], cfg.consensus_dim);
}

impl<'t, T: Scalar> Net<'_, 't, T> {
    /// Consensus of one group `feat: [Ng, H, W, C]`.
    ///
    /// Each position scores how well it is matched in the other images
    /// (cosine similarity, best match per image, averaged over images); a
    /// per-image softmax of the scores, rescaled to mean one, is the
    /// attention. Returns `feat ⊙ att + feat` and the unit-norm
    /// attention-weighted average feature. A single image is compared
    /// with itself.
    pub fn group_affinity(&self, feat: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = feat.shape();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::Shape(format!("group affinity expects [Ng, H, W, C], got {shape:?}")));
        }
        let (ng, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
        if ng == 1 {
            SINGLE_IMAGE_WARNING.call_once(|| {
                log::warn!("group of one image: consensus falls back to self-affinity");
            });
        }
        let m = ng * hw;
        let x = feat.reshape(&[m, c]);
        let xn = x.l2_normalize(T::lit(NORM_EPS));
        let scores = xn.matmul_nt(xn).cross_image_max_mean(ng, hw);
        let att = scores
            .scale(T::lit(self.cfg.affinity_temperature))
            .reshape(&[ng, hw])
            .softmax_last()
            .scale(T::from_usize_lossy(hw))
            .reshape(&[m]);
        let weighted = x.mul_rows(att);
        let modulated = weighted.add(x).reshape(&shape);
        let consensus = weighted
            .reshape(&[1, m, c])
            .mean_inner()
            .l2_normalize(T::lit(NORM_EPS))
            .reshape(&[c]);
        Ok((modulated, consensus))
    }

    /// Hierarchical consensus fusion over `f2..f4`.
    ///
    /// `group_sizes` splits the batch into consecutive groups. When
    /// `negatives` is given, each group's non-negative rows are split into
    /// two contiguous halves and the fused map is pooled per half into a
    /// unit embedding.
    pub fn hcf(
        &self,
        pyr: &FeaturePyramid<'t, T>,
        group_sizes: &[usize],
        negatives: Option<&[bool]>,
    ) -> Result<ConsensusSet<'t, T>> {
        let n = pyr.levels[0].shape()[0];
        if group_sizes.iter().sum::<usize>() != n || group_sizes.contains(&0) {
            return Err(Error::Shape(format!("group sizes {group_sizes:?} do not split a batch of {n}")));
        }
        let mut slices: Vec<Range<usize>> = Vec::with_capacity(group_sizes.len());
        let mut start = 0;
        for &len in group_sizes {
            slices.push(start..start + len);
            start += len;
        }
        let g = self.cfg.stage_grids()[1];
        let mut scales = Vec::with_capacity(3);
        for level in &pyr.levels[1..] {
            let parts = slices
                .iter()
                .map(|r| {
                    let feat = if slices.len() == 1 {
                        *level
                    } else {
                        level.slice_leading(r.start, r.end)
                    };
                    self.group_affinity(feat).map(|(m, _)| m)
                })
                .collect::<Result<Vec<_>>>()?;
            let modulated = if parts.len() == 1 {
                parts[0]
            } else {
                Var::concat_leading(&parts)
            };
            scales.push(modulated.resize_bilinear(g, g));
        }
        let fused_map = linear(&self.p, "hcf.fuse", Var::concat_last(&scales));

        let embeddings = match negatives {
            None => None,
            Some(flags) => {
                if flags.len() != n {
                    return Err(Error::Shape(format!("{} negative flags for {n} rows", flags.len())));
                }
                Some(
                    slices
                        .iter()
                        .enumerate()
                        .map(|(gi, r)| self.half_embeddings(fused_map, r.clone(), flags, gi))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        Ok(ConsensusSet {
            fused_map,
            group_slices: slices,
            embeddings,
        })
    }

    fn half_embeddings(
        &self,
        fused: Var<'t, T>,
        rows: Range<usize>,
        negatives: &[bool],
        group: usize,
    ) -> Result<[Var<'t, T>; 2]> {
        let positives: Vec<usize> = rows.filter(|&i| !negatives[i]).collect();
        if positives.len() < 2 {
            return Err(Error::Batching(format!(
                "group {group} has {} non-negative rows; consensus halves need at least 2",
                positives.len()
            )));
        }
        let (first, second) = positives.split_at(positives.len() / 2);
        let shape = fused.shape();
        let c = shape[3];
        let pool = |idx: &[usize]| {
            fused
                .select_leading(idx)
                .reshape(&[1, idx.len() * shape[1] * shape[2], c])
                .mean_inner()
                .l2_normalize(T::lit(NORM_EPS))
                .reshape(&[c])
        };
        Ok([pool(first), pool(second)])
    }
}
