//! The co-saliency network.
//!
//! A four-stage patch-embedding transformer encodes every image
//! independently. Group affinity on stages 2-4 extracts what the images of
//! one group share; the per-scale results are fused on the stage-2 grid and
//! decoded with spatial-increment attention blocks and lateral connections
//! from the encoder into one saliency map per image.
//!
//! All tensors are channels last: images are `[N, S, S, 3]`, feature maps
//! `[N, g, g, C]` and saliency maps `[N, S, S, 1]`.

mod attention;
mod config;
mod consensus;
mod cost;
mod decoder;
mod encoder;
mod params;

use std::ops::Range;

pub use attention::KvSource;
pub use config::ModelConfig;
pub use cost::{count_inference_cost, InferenceCost};
pub use params::{Bound, Param, ParamKind, ParamStore, INIT_STD};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoder outputs `f1..f4`, each `[N, g_i, g_i, C_i]`.
pub struct FeaturePyramid<'t, T> {
    pub levels: [Var<'t, T>; 4],
}

/// Consensus-modulated features of one forward pass.
pub struct ConsensusSet<'t, T> {
    /// `[N, g2, g2, consensus_dim]`.
    pub fused_map: Var<'t, T>,
    /// Rows of each group in the batch.
    pub group_slices: Vec<Range<usize>>,
    /// Unit vectors per group: `[first half, second half]`.
    pub embeddings: Option<Vec<[Var<'t, T>; 2]>>,
}

/// `logits` and `maps = sigmoid(logits)`, both `[N, S, S, 1]`.
pub struct PredictionBatch<'t, T> {
    pub logits: Var<'t, T>,
    pub maps: Var<'t, T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub struct ForwardOutput<'t, T> {
    /// One entry per input group.
    pub predictions: Vec<PredictionBatch<'t, T>>,
    /// Present in [`Mode::Train`].
    pub consensus: Option<ConsensusSet<'t, T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model; the same `seed` gives the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::layout(&config)?;
        params.initialize(seed);
        let prior = config.head_prior;
        if prior != 0.5 {
            let bias = params.get_mut("head.b").expect("head bias is registered");
            bias.data_mut()[0] = T::lit((prior / (1.0 - prior)).ln());
        }
        Ok(Self { config, params })
    }

    /// Parameter names and shapes for `config`, all zero.
    pub fn layout(config: &ModelConfig) -> Result<ParamStore<T>> {
        config.validate()?;
        let mut s = ParamStore::default();
        encoder::register(config, &mut s);
        consensus::register(config, &mut s);
        decoder::register(config, &mut s);
        Ok(s)
    }

    pub fn net<'m, 't>(&'m self, tape: &'t Tape<T>) -> Net<'m, 't, T> {
        Net {
            cfg: &self.config,
            p: self.params.bind(tape),
            tape,
        }
    }

    /// Saliency maps `[N, S, S, 1]` for one group of images `[N, S, S, 3]`.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let net = self.net(&tape);
        let x = tape.constant(images.clone());
        let out = net.forward(&[x], Mode::Infer)?;
        Ok((*out.predictions[0].maps.value()).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// A model bound to one tape.
pub struct Net<'m, 't, T> {
    pub(crate) cfg: &'m ModelConfig,
    pub(crate) p: Bound<'m, 't, T>,
    pub(crate) tape: &'t Tape<T>,
}

impl<'t, T: Scalar> Net<'_, 't, T> {
    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn params(&self) -> &Bound<'_, 't, T> {
        &self.p
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Encodes all groups as one batch, extracts consensus per group and
    /// decodes. Training needs exactly two groups.
    pub fn forward(&self, groups: &[Var<'t, T>], mode: Mode) -> Result<ForwardOutput<'t, T>> {
        if groups.is_empty() {
            return Err(Error::Shape("forward needs at least one group".into()));
        }
        if mode == Mode::Train && groups.len() != 2 {
            return Err(Error::Shape(format!("training forward needs 2 groups, got {}", groups.len())));
        }
        let sizes: Vec<usize> = groups.iter().map(|g| g.shape().first().copied().unwrap_or(0)).collect();
        if sizes.contains(&0) {
            return Err(Error::Shape("empty group batch".into()));
        }
        let images = if groups.len() == 1 {
            groups[0]
        } else {
            Var::concat_leading(groups)
        };
        let pyr = self.encode(images)?;
        let cons = self.hcf(&pyr, &sizes, None)?;
        let pred = self.decode(&cons, &pyr)?;
        let predictions = cons
            .group_slices
            .iter()
            .map(|r| {
                if groups.len() == 1 {
                    PredictionBatch {
                        logits: pred.logits,
                        maps: pred.maps,
                    }
                } else {
                    PredictionBatch {
                        logits: pred.logits.slice_leading(r.start, r.end),
                        maps: pred.maps.slice_leading(r.start, r.end),
                    }
                }
            })
            .collect();
        Ok(ForwardOutput {
            predictions,
            consensus: (mode == Mode::Train).then_some(cons),
        })
    }

    /// Re-encodes `images ⊙ maps` for each group and returns the per-half
    /// consensus embeddings; rows flagged in `negatives` are left out of
    /// the pooling. Gradients reach both the weights and the maps.
    pub fn consensus_second_pass(
        &self,
        images: &[Var<'t, T>],
        maps: &[Var<'t, T>],
        negatives: &[&[bool]],
    ) -> Result<Vec<[Var<'t, T>; 2]>> {
        if images.len() != maps.len() || images.len() != negatives.len() || images.is_empty() {
            return Err(Error::Shape("second pass needs matching images, maps and flags per group".into()));
        }
        let mut masked = Vec::with_capacity(images.len());
        let mut sizes = Vec::with_capacity(images.len());
        for ((&img, &map), neg) in images.iter().zip(maps).zip(negatives) {
            let shape = img.shape();
            let mshape = map.shape();
            if shape.len() != 4 || shape[3] != 3 || mshape[..3] != shape[..3] || mshape[3] != 1 {
                return Err(Error::Shape(format!("images {shape:?} and maps {mshape:?} do not match")));
            }
            if neg.len() != shape[0] {
                return Err(Error::Shape(format!("{} flags for {} rows", neg.len(), shape[0])));
            }
            let pixels = shape[0] * shape[1] * shape[2];
            let m = img.reshape(&[pixels, 3]).mul_rows(map).reshape(&shape);
            masked.push(m);
            sizes.push(shape[0]);
        }
        let batch = if masked.len() == 1 {
            masked[0]
        } else {
            Var::concat_leading(&masked)
        };
        let flags: Vec<bool> = negatives.iter().flat_map(|f| f.iter().copied()).collect();
        let pyr = self.encode(batch)?;
        let cons = self.hcf(&pyr, &sizes, Some(&flags))?;
        Ok(cons.embeddings.expect("requested"))
    }
}
