//! Two-group training loop, optimizer, schedule and inference driver.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, MAGIC};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::batching::{epoch_batches, resize_dataset, resize_rgb, Batch};
use crate::config::ExperimentConfig;
use crate::dataset::{GroupedDataset, ImageGroup, SaliencyMap};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::{Mode, Model, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub lr_initial: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_epoch: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: u64,
    /// Train with the contrastive consensus term and its second pass.
    pub iaccl_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            lr_initial: 3e-4,
            lr_drop_factor: 10.0,
            lr_drop_epoch: 100,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            grad_clip: Some(5.0),
            checkpoint_every: 10,
            iaccl_enabled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr_initial) || !positive(self.lr_drop_factor) || !positive(self.adam_eps) {
            return Err(Error::Config("learning rate, drop factor and adam_eps must be > 0".into()));
        }
        if self.epochs > 0 && self.lr_drop_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "lr_drop_epoch {} must be below epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.grad_clip.is_some_and(|c| !positive(c)) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// Learning rate of `epoch`: one step down by `lr_drop_factor` at
/// `lr_drop_epoch`.
pub fn lr_schedule(epoch: u64, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_drop_epoch {
        cfg.lr_initial
    } else {
        cfg.lr_initial / cfg.lr_drop_factor
    }
}

/// First and second moment estimates of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, cfg: &TrainConfig) {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 - cfg.beta1.powf(self.step as f64));
        let c2 = T::lit(1.0 - cfg.beta2.powf(self.step as f64));
        let (lr, eps) = (T::lit(lr), T::lit(cfg.adam_eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((w, &g), m), v) in it {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub bce: f64,
    pub iou: f64,
    pub iaccl: Option<f64>,
    pub total: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    /// Next epoch to run.
    pub epoch: u64,
    pub step: u64,
    pub history: Vec<LogRecord>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
        let adam = Adam::new(&model.params);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }
}

fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], limit: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let s = T::lit(limit / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Loss of a batch pair under the current parameters, with gradients in
/// parameter order.
pub fn loss_and_gradients<T: Scalar>(
    model: &Model<T>,
    pair: (&Batch, &Batch),
    loss_cfg: &LossConfig,
    iaccl_enabled: bool,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let net = model.net(&tape);
    let images = [tape.constant(pair.0.images.cast()), tape.constant(pair.1.images.cast())];
    let gts: [Tensor<T>; 2] = [pair.0.gts.cast(), pair.1.gts.cast()];
    let out = net.forward(&images, Mode::Train)?;
    let maps = [out.predictions[0].maps, out.predictions[1].maps];
    let embeddings = if iaccl_enabled {
        let flags = [pair.0.negative_flags.as_slice(), pair.1.negative_flags.as_slice()];
        let e = net.consensus_second_pass(&images, &maps, &flags)?;
        Some([e[0], e[1]])
    } else {
        None
    };
    let (total, breakdown) = total_loss(maps, [&gts[0], &gts[1]], embeddings.as_ref(), loss_cfg)?;
    if !breakdown.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    let mut grads = tape.backward(total);
    let grads = net.params().gradients(&mut grads);
    Ok((breakdown, grads))
}

/// Forward, loss, backward and one optimizer update.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    pair: (&Batch, &Batch),
    cfg: &ExperimentConfig,
) -> Result<LossBreakdown> {
    let (breakdown, mut grads) = loss_and_gradients(&state.model, pair, &cfg.loss, cfg.train.iaccl_enabled)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!(
                "bce={} iou={} iaccl={:?} total={} (groups `{}` and `{}`)",
                breakdown.bce, breakdown.iou, breakdown.iaccl, breakdown.total, pair.0.group, pair.1.group
            ),
        });
    }
    if let Some(limit) = cfg.train.grad_clip {
        clip_global_norm(&mut grads, limit);
    }
    let lr = lr_schedule(state.epoch, &cfg.train);
    state.adam.update(&mut state.model.params, &grads, lr, &cfg.train);
    state.step += 1;
    Ok(breakdown)
}

/// Runs epoch `state.epoch` over every group pair and advances the state.
pub fn train_epoch<T: Scalar>(
    state: &mut TrainState<T>,
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
    mut on_step: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<()> {
    let lr = lr_schedule(state.epoch, &cfg.train);
    for (a, b) in epoch_batches(ds, &cfg.batching, state.epoch)? {
        let br = train_step(state, (&a, &b), cfg)?;
        let record = LogRecord {
            step: state.step,
            epoch: state.epoch,
            lr,
            bce: br.bce,
            iou: br.iou,
            iaccl: br.iaccl,
            total: br.total,
        };
        on_step(&record)?;
        state.history.push(record);
    }
    state.epoch += 1;
    Ok(())
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Trains from `state` up to `cfg.train.epochs`. With `out_dir`, the log
/// is appended to `train_log.jsonl` and checkpoints are written per
/// schedule and as `final.ckpt`.
pub fn train<T: Scalar>(
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
    mut state: TrainState<T>,
    out_dir: Option<&Path>,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if ds.groups.len() < 2 {
        return Err(Error::Dataset(format!("training needs at least 2 groups, got {}", ds.groups.len())));
    }
    if state.model.config != cfg.model {
        return Err(Error::Config("state was built for a different model configuration".into()));
    }
    let data = resize_dataset(ds, cfg.batching.resolution);
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    while state.epoch < cfg.train.epochs {
        train_epoch(&mut state, &data, cfg, |rec| {
            log::debug!("step {} total {:.5}", rec.step, rec.total);
            if let Some((path, w)) = log.as_mut() {
                serde_json::to_writer(&mut *w, rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            }
            Ok(())
        })?;
        if let Some((path, w)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        let last = state.history.last().map_or(f64::NAN, |r| r.total);
        log::info!("epoch {}/{} loss {last:.5}", state.epoch, cfg.train.epochs);
        let every = cfg.train.checkpoint_every;
        if let Some(dir) = out_dir {
            if every > 0 && state.epoch % every == 0 && state.epoch < cfg.train.epochs {
                save_checkpoint(&dir.join(epoch_checkpoint_name(state.epoch)), cfg, &state)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), cfg, &state)?;
    }
    Ok(state)
}

/// Latest checkpoint in `dir`: `final.ckpt` if present, otherwise the
/// highest-numbered epoch checkpoint.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let last = dir.join(FINAL_CHECKPOINT);
    if last.is_file() {
        return Ok(Some(last));
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Saliency maps for one group at each image's own resolution.
pub fn infer<T: Scalar>(model: &Model<T>, group: &ImageGroup) -> Result<Vec<SaliencyMap<f32>>> {
    if group.is_empty() {
        return Err(Error::EmptyGroup(group.name.clone()));
    }
    let s = model.config.resolution;
    let mut pixels = Vec::with_capacity(group.len() * s * s * 3);
    for sample in &group.samples {
        pixels.extend_from_slice(resize_rgb(&sample.image, s, s).pixels());
    }
    let images = Tensor::<f32>::from_vec(&[group.len(), s, s, 3], pixels)?.cast::<T>();
    let maps = model.infer(&images)?.cast::<f32>();
    group
        .samples
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let (h, w) = (sample.image.height(), sample.image.width());
            let one = maps.slice_leading(i, i + 1);
            let resized = crate::autograd::resize_bilinear(&one, h, w);
            SaliencyMap::new(h, w, resized.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        })
        .collect()
}

pub(crate) fn create_file(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}
