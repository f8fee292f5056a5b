use super::attention::{block, linear, norm, register_block, register_linear, register_norm, square_side, KvSource};
use super::{ConsensusSet, FeaturePyramid, ModelConfig, Net, ParamStore, PredictionBatch};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Encoder level feeding the lateral connection of decoder stage `k`.
pub(crate) const LATERAL_LEVEL: [usize; 3] = [2, 1, 0];

pub(super) fn register<T: Scalar>(cfg: &ModelConfig, s: &mut ParamStore<T>) {
    let mut cin = cfg.consensus_dim;
    for k in 0..3 {
        let c = cfg.decoder_channels[k];
        register_linear(s, &format!("dec.{k}.in"), cin, c);
        register_linear(s, &format!("dec.{k}.lateral"), cfg.stage_channels[LATERAL_LEVEL[k]], c);
        for j in 0..cfg.decoder_depths[k] {
            register_block(s, &format!("dec.{k}.block{j}"), c, cfg.mlp_ratio, KvSource::increase(cfg.si_ratios[k]));
        }
        cin = c;
    }
    register_norm(s, "dec.norm", cin);
    register_linear(s, "head", cin, 1);
}

impl<'t, T: Scalar> Net<'_, 't, T> {
    /// Multi-head attention whose keys and values come from an `r`-times
    /// finer grid produced by a learned transposed projection. With `r = 1`
    /// this is plain multi-head self-attention. `tokens: [N, L, C]` with a
    /// square `L`; `name` is the parameter prefix of an attention layer.
    pub fn sia_attention(&self, name: &str, tokens: Var<'t, T>, r: usize, heads: usize) -> Result<Var<'t, T>> {
        let shape = tokens.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("expected tokens [N, L, C], got {shape:?}")));
        }
        square_side(shape[1])?;
        super::attention::attention(&self.p, name, tokens, heads, KvSource::increase(r))
    }

    /// Decodes the fused consensus map into saliency maps.
    pub fn decode(&self, cons: &ConsensusSet<'t, T>, pyr: &FeaturePyramid<'t, T>) -> Result<PredictionBatch<'t, T>> {
        let cfg = self.cfg;
        let shape = cons.fused_map.shape();
        let grids = cfg.decoder_grids();
        if shape.len() != 4 || shape[1] != grids[0] || shape[3] != cfg.consensus_dim {
            return Err(Error::Shape(format!("fused map {shape:?} does not match the configuration")));
        }
        let n = shape[0];
        let mut x = cons.fused_map;
        for k in 0..3 {
            let g = grids[k];
            let c = cfg.decoder_channels[k];
            x = linear(&self.p, &format!("dec.{k}.in"), x.resize_bilinear(g, g));
            let lateral = linear(&self.p, &format!("dec.{k}.lateral"), pyr.levels[LATERAL_LEVEL[k]]);
            x = x.add(lateral.resize_bilinear(g, g));
            let mut tokens = x.reshape(&[n, g * g, c]);
            for j in 0..cfg.decoder_depths[k] {
                let kv = KvSource::increase(cfg.si_ratios[k]);
                tokens = block(&self.p, &format!("dec.{k}.block{j}"), tokens, cfg.decoder_heads[k], kv)?;
            }
            x = tokens.reshape(&[n, g, g, c]);
        }
        let s = cfg.resolution;
        let logits = linear(&self.p, "head", norm(&self.p, "dec.norm", x)).resize_bilinear(s, s);
        Ok(PredictionBatch {
            logits,
            maps: logits.sigmoid(),
        })
    }
}
