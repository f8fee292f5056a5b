use super::attention::{block, norm, register_block, register_linear, register_norm, KvSource};
use super::{FeaturePyramid, ModelConfig, Net, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(super) fn register<T: Scalar>(cfg: &ModelConfig, s: &mut ParamStore<T>) {
    let mut cin = 3;
    for i in 0..4 {
        let (p, c) = (cfg.patch_sizes[i], cfg.stage_channels[i]);
        register_linear(s, &format!("enc.{i}.embed"), p * p * cin, c);
        register_norm(s, &format!("enc.{i}.embed_norm"), c);
        for j in 0..cfg.depths[i] {
            register_block(s, &format!("enc.{i}.block{j}"), c, cfg.mlp_ratio, KvSource::reduce(cfg.sr_ratios[i]));
        }
        register_norm(s, &format!("enc.{i}.norm"), c);
        cin = c;
    }
}

impl<'t, T: Scalar> Net<'_, 't, T> {
    /// `[N, H, W, Cin] -> [N, (H/P)(W/P), C]`: non-overlapping `P x P`
    /// patches flattened, projected and layer-normalized.
    pub fn patch_embed(&self, x: Var<'t, T>, stage: usize) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let p = self.cfg.patch_sizes[stage];
        if shape.len() != 4 || shape[1] % p != 0 || shape[2] % p != 0 {
            return Err(Error::Shape(format!("cannot split {shape:?} into {p}x{p} patches")));
        }
        let (n, gh, gw) = (shape[0], shape[1] / p, shape[2] / p);
        let tokens = x.patchify(p).reshape(&[n, gh * gw, p * p * shape[3]]);
        let tokens = super::attention::linear(&self.p, &format!("enc.{stage}.embed"), tokens);
        Ok(norm(&self.p, &format!("enc.{stage}.embed_norm"), tokens))
    }

    /// Four stages of patch embedding followed by spatial-reduction
    /// transformer blocks.
    pub fn encode(&self, images: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let shape = images.shape();
        let s = self.cfg.resolution;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 {
            return Err(Error::Shape(format!("expected images [N, {s}, {s}, 3], got {shape:?}")));
        }
        let n = shape[0];
        let grids = self.cfg.stage_grids();
        let mut x = images;
        let mut levels = Vec::with_capacity(4);
        for i in 0..4 {
            let mut tokens = self.patch_embed(x, i)?;
            for j in 0..self.cfg.depths[i] {
                let kv = KvSource::reduce(self.cfg.sr_ratios[i]);
                tokens = block(&self.p, &format!("enc.{i}.block{j}"), tokens, self.cfg.n_heads[i], kv)?;
            }
            tokens = norm(&self.p, &format!("enc.{i}.norm"), tokens);
            x = tokens.reshape(&[n, grids[i], grids[i], self.cfg.stage_channels[i]]);
            levels.push(x);
        }
        Ok(FeaturePyramid {
            levels: levels.try_into().unwrap_or_else(|_| unreachable!()),
        })
    }
}
