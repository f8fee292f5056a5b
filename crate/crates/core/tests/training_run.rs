use std::fs;

use cosod_core::config::ExperimentConfig;
use cosod_core::dataset::{generate_synthetic, SyntheticSpec};
use cosod_core::model::ModelConfig;
use cosod_core::training::{epoch_checkpoint_name, load_checkpoint, train, TrainState, LOG_FILE};

fn data(n_groups: usize, group_size: usize) -> cosod_core::dataset::GroupedDataset {
    generate_synthetic(&SyntheticSpec {
        n_groups,
        group_size,
        image_size: 64,
        n_distractors: 1,
        seed: 11,
    })
    .unwrap()
}

#[test]
fn toy_model_losses_stay_finite() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 3;
    cfg.train.lr_drop_epoch = 2;
    cfg.batching.batch_size_per_group = 4;
    cfg.set_seed(1);
    let dir = tempfile::tempdir().unwrap();
    let state = train(&data(4, 3), &cfg, TrainState::<f32>::new(&cfg).unwrap(), Some(dir.path())).unwrap();
    assert_eq!(state.history.len(), 6);
    for r in &state.history {
        assert!(r.bce.is_finite() && r.iou.is_finite() && r.total.is_finite(), "{r:?}");
        assert!(r.iaccl.is_some_and(f64::is_finite), "{r:?}");
    }
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn resume_at_epoch_ten_matches_thirty_uninterrupted_epochs() {
    let mut cfg = ExperimentConfig {
        model: ModelConfig::tiny(),
        ..Default::default()
    };
    cfg.batching.resolution = 16;
    cfg.batching.batch_size_per_group = 2;
    cfg.train.epochs = 30;
    cfg.train.lr_drop_epoch = 25;
    cfg.train.lr_initial = 1e-3;
    cfg.set_seed(8);
    let ds = data(4, 2);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&ds, &cfg, TrainState::<f32>::new(&cfg).unwrap(), Some(dir.path())).unwrap();
    let (loaded_cfg, at_ten) = load_checkpoint::<f32>(&dir.path().join(epoch_checkpoint_name(10))).unwrap();
    assert_eq!(at_ten.epoch, 10);
    let resumed = train(&ds, &loaded_cfg, at_ten, None).unwrap();
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.history, full.history);
}
