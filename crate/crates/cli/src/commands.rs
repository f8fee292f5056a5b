use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use cosod_core::config::ExperimentConfig;
use cosod_core::cosegment::{composite, ThresholdMode};
use cosod_core::dataset::{
    compute_stats, generate_synthetic, load_dataset, load_image_dir, save_dataset, save_map, save_mask, save_rgb,
    stats_from_records, BinaryMask, ImageGroup, ImageRecord, Sample, SyntheticSpec,
};
use cosod_core::metrics::{evaluate_dataset, load_predictions, EvalOptions};
use cosod_core::training::{self, infer, latest_checkpoint, load_checkpoint, TrainState, FINAL_CHECKPOINT, LOG_FILE};
use cosod_core::Model32;

use crate::manifest::{ManifestBuilder, MANIFEST_FILE};
use crate::{Cli, Command, CosegmentArgs, EvalArgs, InferArgs, StatsArgs, SynthArgs, TrainArgs};

pub fn run(cli: &Cli, out: &Path) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, out, a),
        Command::Train(a) => train(cli, out, a),
        Command::Eval(a) => eval(cli, out, a),
        Command::Infer(a) => infer_cmd(cli, out, a),
        Command::Stats(a) => stats(cli, out, a),
        Command::Cosegment(a) => cosegment(cli, out, a),
    }
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() {
        bail!("{} is a file, expected a directory", dir.display());
    }
    if dir.is_dir() && !force && fs::read_dir(dir)?.next().is_some() {
        bail!("{} exists and is not empty; pass --force to write into it", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn experiment_config(cli: &Cli, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => base.unwrap_or_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn synth(cli: &Cli, out: &Path, a: &SynthArgs) -> Result<()> {
    prepare_dir(out, cli.force)?;
    let mut m = ManifestBuilder::new("synth");
    let seed = cli.seed.unwrap_or(0);
    let spec = SyntheticSpec {
        n_groups: a.groups,
        group_size: a.size,
        image_size: a.image,
        n_distractors: a.distractors,
        seed,
    };
    let ds = generate_synthetic(&spec)?;
    save_dataset(&ds, out)?;
    m.config(&json!({
        "groups": a.groups,
        "size": a.size,
        "image": a.image,
        "distractors": a.distractors,
    }))?;
    m.seed(seed);
    m.output(out.join("images"));
    m.output(out.join("gt"));
    m.write(&out.join(MANIFEST_FILE))?;
    log::info!("wrote {} images in {} groups to {}", ds.n_images(), ds.groups.len(), out.display());
    Ok(())
}

fn train(cli: &Cli, out: &Path, a: &TrainArgs) -> Result<()> {
    let resume = match &a.resume {
        Some(p) if p.is_dir() => {
            Some(latest_checkpoint(p)?.with_context(|| format!("no checkpoint in {}", p.display()))?)
        }
        Some(p) => Some(p.clone()),
        None => None,
    };
    let loaded = resume.as_deref().map(load_checkpoint::<f32>).transpose()?;
    let mut cfg = experiment_config(cli, loaded.as_ref().map(|(c, _)| c.clone()))?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr_initial = lr;
    }
    if a.no_iaccl {
        cfg.train.iaccl_enabled = false;
    }
    cfg.validate()?;
    prepare_dir(out, cli.force)?;

    let mut m = ManifestBuilder::new("train");
    m.input(&a.dataset)?;
    if let Some(c) = &cli.config {
        m.input(c)?;
    }
    if let Some(r) = &resume {
        m.input(r)?;
    }
    let ds = load_dataset(&a.dataset, false)?;
    let state = match loaded {
        Some((_, s)) => s,
        None => TrainState::new(&cfg)?,
    };
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let state = training::train(&ds, &cfg, state, Some(out))?;
    if let Some(last) = state.history.last() {
        log::info!("finished at step {} with loss {:.5}", state.step, last.total);
    }
    m.config(&cfg)?;
    m.seed(cfg.train.seed);
    m.output(out.join("config.toml"));
    m.output(out.join(LOG_FILE));
    m.output(out.join(FINAL_CHECKPOINT));
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(())
}

fn eval(cli: &Cli, out: &Path, a: &EvalArgs) -> Result<()> {
    let (report_path, manifest_path) = if out.extension().is_some_and(|e| e == "json") {
        if out.exists() && !cli.force {
            bail!("{} exists; pass --force to overwrite", out.display());
        }
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        (out.to_path_buf(), out.with_extension("manifest.json"))
    } else {
        prepare_dir(out, cli.force)?;
        (out.join("report.json"), out.join(MANIFEST_FILE))
    };
    let mut m = ManifestBuilder::new("eval");
    m.input(&a.pred_dir)?;
    m.input(&a.dataset_root)?;
    let ds = load_dataset(&a.dataset_root, false)?;
    let preds = load_predictions(&a.pred_dir, &ds)?;
    let opts = EvalOptions {
        parallel: !a.sequential,
        curves: a.curves,
    };
    let report = evaluate_dataset(&preds, &ds, opts)?;
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    let g = &report.aggregate;
    log::info!(
        "S {:.4}  Emax {:.4}  Fmax {:.4}  MAE {:.4} over {} images",
        g.s_measure,
        g.e_max,
        g.f_max,
        g.mae,
        report.images
    );
    m.config(&json!({ "curves": a.curves, "parallel": !a.sequential }))?;
    m.output(report_path);
    m.write(&manifest_path)?;
    Ok(())
}

fn image_group(dir: &Path, name: String) -> Result<ImageGroup> {
    let samples = load_image_dir(dir)?
        .into_iter()
        .map(|(stem, image)| Sample {
            mask: BinaryMask::zeros(image.height(), image.width()),
            stem,
            image,
        })
        .collect();
    Ok(ImageGroup { name, samples })
}

fn dir_name(dir: &Path) -> String {
    dir.canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "images".into())
}

/// Image groups below `<root>/images`, sorted by name.
fn dataset_groups(root: &Path) -> Result<Vec<ImageGroup>> {
    let images = root.join("images");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&images)
        .with_context(|| format!("reading {}", images.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| image_group(d, dir_name(d))).collect()
}

fn load_model(path: &Path) -> Result<(ExperimentConfig, Model32)> {
    let (cfg, state) = load_checkpoint::<f32>(path)?;
    Ok((cfg, state.model))
}

fn infer_cmd(cli: &Cli, out: &Path, a: &InferArgs) -> Result<()> {
    prepare_dir(out, cli.force)?;
    let mut m = ManifestBuilder::new("infer");
    m.input(&a.checkpoint)?;
    let (cfg, model) = load_model(&a.checkpoint)?;
    let groups = match (&a.dataset_root, &a.images) {
        (Some(root), _) => {
            m.input(root)?;
            dataset_groups(root)?
        }
        (None, Some(dir)) => {
            m.input(dir)?;
            vec![image_group(dir, dir_name(dir))?]
        }
        (None, None) => bail!("either --dataset-root or --images is required"),
    };
    let mut count = 0;
    for group in &groups {
        let dir = out.join(&group.name);
        fs::create_dir_all(&dir)?;
        for (s, map) in group.samples.iter().zip(infer(&model, group)?) {
            save_map(&map, &dir.join(format!("{}.png", s.stem)))?;
            count += 1;
        }
        m.output(dir);
    }
    log::info!("wrote {count} maps to {}", out.display());
    m.config(&cfg)?;
    m.seed(cfg.train.seed);
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(())
}

fn stats(cli: &Cli, out: &Path, a: &StatsArgs) -> Result<()> {
    prepare_dir(out, cli.force)?;
    let mut m = ManifestBuilder::new("stats");
    let stats = match (&a.dataset_root, &a.manifest) {
        (Some(root), _) => {
            m.input(root)?;
            compute_stats(&load_dataset(root, false)?)
        }
        (None, Some(csv)) => {
            m.input(csv)?;
            stats_from_records(&ImageRecord::read_manifest(csv)?)?
        }
        (None, None) => bail!("either --dataset-root or --manifest is required"),
    };
    let text = serde_json::to_string_pretty(&stats)? + "\n";
    let path = out.join("stats.json");
    fs::write(&path, &text)?;
    if !cli.quiet {
        print!("{text}");
    }
    m.output(path);
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(())
}

fn cosegment(cli: &Cli, out: &Path, a: &CosegmentArgs) -> Result<()> {
    let mode: ThresholdMode = a.threshold.parse()?;
    prepare_dir(out, cli.force)?;
    let mut m = ManifestBuilder::new("cosegment");
    m.input(&a.checkpoint)?;
    m.input(&a.images)?;
    let (cfg, model) = load_model(&a.checkpoint)?;
    let group = image_group(&a.images, dir_name(&a.images))?;
    if group.is_empty() {
        bail!("no images found in {}", a.images.display());
    }
    let dirs = ["maps", "masks", "composites"].map(|d| out.join(d));
    for d in &dirs {
        fs::create_dir_all(d)?;
    }
    for (s, map) in group.samples.iter().zip(infer(&model, &group)?) {
        let (image, mask) = composite(&s.image, &map, mode, a.sigma)?;
        let file = format!("{}.png", s.stem);
        save_map(&map, &dirs[0].join(&file))?;
        save_mask(&mask, &dirs[1].join(&file))?;
        save_rgb(&image, &dirs[2].join(&file))?;
    }
    log::info!("segmented {} images into {}", group.len(), out.display());
    m.config(&json!({ "model": cfg.model, "threshold": a.threshold, "sigma": a.sigma }))?;
    for d in dirs {
        m.output(d);
    }
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(())
}
