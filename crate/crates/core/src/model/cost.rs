use serde::{Deserialize, Serialize};

use super::attention::KvSource;
use super::decoder::LATERAL_LEVEL;
use super::ModelConfig;
use crate::error::Result;

/// Size and matrix-product work of an inference forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceCost {
    pub params: usize,
    /// Multiply-accumulates of all linear maps, attention products and
    /// affinity matrices. Normalization, activations and resampling are
    /// not counted.
    pub macs: u64,
}

/// Cost of inference on a single image.
pub fn count_inference_cost(cfg: &ModelConfig) -> Result<InferenceCost> {
    InferenceCost::for_group(cfg, 1)
}

impl InferenceCost {
    /// Cost of inference on a group of `n` images.
    pub fn for_group(cfg: &ModelConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let mut params = 0usize;
        let mut macs = 0u64;
        let mut linear = |rows: usize, cin: usize, cout: usize, params: &mut usize| {
            *params += cin * cout + cout;
            macs += (n * rows * cin * cout) as u64;
        };
        let mut extra_macs = 0u64;

        let grids = cfg.stage_grids();
        let mut cin = 3;
        for i in 0..4 {
            let (c, p, l) = (cfg.stage_channels[i], cfg.patch_sizes[i], grids[i] * grids[i]);
            linear(l, p * p * cin, c, &mut params);
            params += 2 * c;
            for _ in 0..cfg.depths[i] {
                block(cfg, c, grids[i], KvSource::reduce(cfg.sr_ratios[i]), &mut linear, &mut params, &mut extra_macs, n);
            }
            params += 2 * c;
            cin = c;
        }

        let g2 = grids[1];
        for (&g, &c) in grids[1..].iter().zip(&cfg.stage_channels[1..]) {
            let m = n * g * g;
            extra_macs += (m * m * c) as u64;
        }
        let fused_in: usize = cfg.stage_channels[1..].iter().sum();
        linear(g2 * g2, fused_in, cfg.consensus_dim, &mut params);

        let dgrids = cfg.decoder_grids();
        let mut cin = cfg.consensus_dim;
        for k in 0..3 {
            let (c, g) = (cfg.decoder_channels[k], dgrids[k]);
            linear(g * g, cin, c, &mut params);
            let lat = LATERAL_LEVEL[k];
            linear(grids[lat] * grids[lat], cfg.stage_channels[lat], c, &mut params);
            for _ in 0..cfg.decoder_depths[k] {
                block(cfg, c, g, KvSource::increase(cfg.si_ratios[k]), &mut linear, &mut params, &mut extra_macs, n);
            }
            cin = c;
        }
        params += 2 * cin;
        linear(dgrids[2] * dgrids[2], cin, 1, &mut params);

        Ok(Self {
            params,
            macs: macs + extra_macs,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn block(
    cfg: &ModelConfig,
    c: usize,
    grid: usize,
    kv: KvSource,
    linear: &mut impl FnMut(usize, usize, usize, &mut usize),
    params: &mut usize,
    extra: &mut u64,
    n: usize,
) {
    let l = grid * grid;
    let lk = kv.kv_len(grid);
    *params += 2 * c;
    linear(l, c, c, params);
    match kv {
        KvSource::Plain => {}
        KvSource::Reduce(r) => {
            linear(lk, r * r * c, c, params);
            *params += 2 * c;
        }
        KvSource::Increase(r) => {
            linear(l, c, r * r * c, params);
            *params += 2 * c;
        }
    }
    linear(lk, c, c, params);
    linear(lk, c, c, params);
    *extra += (2 * n * l * lk * c) as u64;
    linear(l, c, c, params);
    *params += 2 * c;
    let hidden = cfg.mlp_ratio * c;
    linear(l, c, hidden, params);
    linear(l, hidden, c, params);
}
