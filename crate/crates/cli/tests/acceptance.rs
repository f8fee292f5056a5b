//! Acceptance checks, run in order on one thread so the timed ones are not
//! disturbed. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any fails.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cosod_core::autograd::Tape;
use cosod_core::batching::{epoch_batches, make_training_batch, pad_group_fixed, AugmentOp, BatchingConfig};
use cosod_core::config::ExperimentConfig;
use cosod_core::dataset::{generate_synthetic, BinaryMask, GroupedDataset, SaliencyMap, SyntheticSpec};
use cosod_core::losses::{bce_loss, iaccl_loss, iou_loss, total_loss, LossConfig};
use cosod_core::metrics::{e_measure, evaluate_dataset, f_measure, mae, s_measure, EvalOptions, Predictions};
use cosod_core::model::{count_inference_cost, InferenceCost, Model, ModelConfig};
use cosod_core::training::{self, infer, TrainState};
use cosod_core::{Scalar, Tensor};

const METRIC_TOL: f64 = 1e-6;
const METRIC_TIME_LIMIT_S: f64 = 10.0;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_TIME_LIMIT_S: f64 = 30.0;
const SIA_TOL: f64 = 1e-6;
const OVERFIT_MIN_S: f64 = 0.95;
const OVERFIT_MAX_MAE: f64 = 0.05;
const OVERFIT_MAX_EPOCHS: u64 = 30;
const OVERFIT_TIME_LIMIT_S: f64 = 600.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cosod(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cosod"))
        .arg("--quiet")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("cosod {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (pv, gv) = oracle::random_pair(seed, 16);
        let map = SaliencyMap::new(16, 16, pv.clone()).map_err(|e| e.to_string())?;
        let mask = BinaryMask::new(16, 16, gv.clone()).map_err(|e| e.to_string())?;
        let f = f_measure(&map, &mask).map_err(|e| e.to_string())?;
        let e = e_measure(&map, &mask).map_err(|e| e.to_string())?;
        let (fmax, fmean) = oracle::f_measure(&pv, &gv);
        let (emax, emean) = oracle::e_measure(&pv, &gv);
        let pairs = [
            (mae(&map, &mask).map_err(|e| e.to_string())?, oracle::mae(&pv, &gv)),
            (f.f_max, fmax),
            (f.f_mean, fmean),
            (e.e_max, emax),
            (e.e_mean, emean),
            (s_measure(&map, &mask).map_err(|e| e.to_string())?, oracle::s_measure(&pv, &gv, 16, 16)),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= METRIC_TOL && secs < METRIC_TIME_LIMIT_S,
        format!("max |lib - oracle| = {worst:.2e} over 100 pairs (tol {METRIC_TOL:e}), {secs:.2} s (limit {METRIC_TIME_LIMIT_S} s)"),
    )
}

fn fixed_point<T: Scalar>(side: usize, seed: u64) -> Result<bool, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<u8> = (0..side * side).map(|_| u8::from(rng.random_bool(0.4))).collect();
    values[0] = 0;
    values[1] = 1;
    let mask = BinaryMask::new(side, side, values).map_err(|e| e.to_string())?;
    let map = SaliencyMap::<T>::from_mask(&mask);
    let f = f_measure(&map, &mask).map_err(|e| e.to_string())?;
    let e = e_measure(&map, &mask).map_err(|e| e.to_string())?;
    let s = s_measure(&map, &mask).map_err(|e| e.to_string())?;
    let m = mae(&map, &mask).map_err(|e| e.to_string())?;
    Ok(s == T::one() && e.e_max == T::one() && f.f_max == T::one() && m == T::zero())
}

fn fixed_points() -> Outcome {
    let mut cases = 0;
    let mut exact = 0;
    for seed in 0..10 {
        for side in [2, 7, 16] {
            cases += 2;
            exact += usize::from(fixed_point::<f32>(side, seed)?) + usize::from(fixed_point::<f64>(side, seed)?);
        }
    }
    check(exact == cases, format!("{exact}/{cases} mixed masks give S = Emax = Fmax = 1 and MAE = 0 exactly (f32 and f64)"))
}

fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a small absolute floor so exact zeros compare.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * 4 * 4;
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let gt: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();

        let (_, g) = bce_loss(&pred, &gt);
        worst[0] = worst[0].max(rel_err(&g, &numeric_grad(&pred, |x| bce_loss(x, &gt).0)));
        let (_, g) = iou_loss(&pred, &gt, 2);
        worst[1] = worst[1].max(rel_err(&g, &numeric_grad(&pred, |x| iou_loss(x, &gt, 2).0)));

        let d = 6;
        let emb: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, d)).collect();
        let margin = 2.0;
        let flat: Vec<f64> = emb.concat();
        let eval = |x: &[f64]| iaccl_loss(&x[..d], &x[d..2 * d], &x[2 * d..3 * d], &x[3 * d..], margin).0;
        let (_, gs) = iaccl_loss(&emb[0], &emb[1], &emb[2], &emb[3], margin);
        worst[2] = worst[2].max(rel_err(&gs.concat(), &numeric_grad(&flat, eval)));

        // Full objective on the tape: both maps and all four embeddings.
        let cfg = LossConfig {
            triplet_margin: margin,
            ..LossConfig::default()
        };
        let half = n / 2;
        let map = |v: &[f64]| Tensor::from_vec(&[1, 4, 4, 1], v.to_vec()).expect("16 values");
        let gt_t = [map(&gt[..half]), map(&gt[half..])];
        let objective = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let tape = if want_grad { Tape::new() } else { Tape::inference() };
            let preds = [tape.leaf(map(&x[..half]), true), tape.leaf(map(&x[half..n]), true)];
            let e: Vec<_> = (0..4)
                .map(|k| tape.leaf(Tensor::from_vec(&[d], x[n + k * d..n + (k + 1) * d].to_vec()).unwrap(), true))
                .collect();
            let emb = [[e[0], e[1]], [e[2], e[3]]];
            let (total, _) = total_loss([preds[0], preds[1]], [&gt_t[0], &gt_t[1]], Some(&emb), &cfg).unwrap();
            let value = total.item();
            if !want_grad {
                return (value, Vec::new());
            }
            let grads = tape.backward(total);
            let mut g = Vec::with_capacity(x.len());
            for v in preds.iter().chain(&e) {
                g.extend_from_slice(grads.get(*v).expect("gradient").data());
            }
            (value, g)
        };
        let x: Vec<f64> = pred.iter().copied().chain(flat.iter().copied()).collect();
        let (_, g) = objective(&x, true);
        worst[3] = worst[3].max(rel_err(&g, &numeric_grad(&x, |x| objective(x, false).0)));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.iter().all(|&w| w <= GRAD_REL_TOL) && secs < GRAD_TIME_LIMIT_S,
        format!(
            "max relative error bce {:.1e}, iou {:.1e}, iaccl {:.1e}, total {:.1e} over 10 seeds (tol {GRAD_REL_TOL:e}), {secs:.2} s (limit {GRAD_TIME_LIMIT_S} s)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn lambda_weighting() -> Outcome {
    let cfg = LossConfig::default();
    let total = cfg.combine(1.0, 1.0, Some(1.0));
    let weights = (cfg.lambda_bce, cfg.lambda_iou, cfg.lambda_iaccl);
    check(
        total == 33.5 && weights == (30.0, 0.5, 3.0),
        format!("unit components combine to {total} with weights {weights:?}"),
    )
}

fn shape_law() -> Outcome {
    let small = ModelConfig {
        resolution: 32,
        patch_sizes: [2, 2, 2, 2],
        ..ModelConfig::tiny()
    };
    let configs = [("toy", ModelConfig::toy()), ("tiny", ModelConfig::tiny()), ("32px", small)];
    let mut notes = Vec::new();
    for (name, cfg) in configs {
        let model = Model::<f32>::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
        let tape = Tape::inference();
        let net = model.net(&tape);
        let s = cfg.resolution;
        let images = tape.constant(Tensor::from_fn(&[2, s, s, 3], |i| ((i * 7919) % 97) as f32 / 97.0));
        let pyr = net.encode(images).map_err(|e| e.to_string())?;
        let mut grid = s;
        let mut grids = Vec::new();
        for (i, level) in pyr.levels.iter().enumerate() {
            grid /= cfg.patch_sizes[i];
            let want = vec![2, grid, grid, cfg.stage_channels[i]];
            if level.shape() != want {
                return Err(format!("{name}: stage {} is {:?}, expected {want:?}", i + 1, level.shape()));
            }
            grids.push(grid);
        }
        for (k, &g) in cfg.decoder_grids().iter().enumerate() {
            let c = cfg.decoder_channels[k];
            let tokens = tape.constant(Tensor::from_fn(&[2, g * g, c], |i| ((i * 31) % 11) as f32 / 11.0 - 0.5));
            let out = net
                .sia_attention(&format!("dec.{k}.block0.attn"), tokens, cfg.si_ratios[k], cfg.decoder_heads[k])
                .map_err(|e| e.to_string())?;
            if out.shape() != vec![2, g * g, c] {
                return Err(format!("{name}: decoder stage {k} attention changed shape to {:?}", out.shape()));
            }
        }
        notes.push(format!("{name} {s}->{grids:?}"));
    }
    Ok(format!("encoder grids follow g_i = g_(i-1)/P_i and SIA preserves shape: {}", notes.join(", ")))
}

/// Plain multi-head attention written out loop by loop.
fn mha_reference(model: &Model<f64>, prefix: &str, x: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let (n, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let param = |s: &str| model.params.get(&format!("{prefix}.{s}")).expect("parameter").data().to_vec();
    let project = |w: &[f64], b: &[f64], rows: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; rows.len()];
        for t in 0..rows.len() / c {
            for o in 0..c {
                out[t * c + o] = b[o] + (0..c).map(|i| rows[t * c + i] * w[i * c + o]).sum::<f64>();
            }
        }
        out
    };
    let d = c / heads;
    let mut out = Vec::with_capacity(n * l * c);
    for b in 0..n {
        let rows = &x.data()[b * l * c..(b + 1) * l * c];
        let q = project(&param("q.w"), &param("q.b"), rows);
        let k = project(&param("k.w"), &param("k.b"), rows);
        let v = project(&param("v.w"), &param("v.b"), rows);
        let mut ctx = vec![0.0; l * c];
        for h in 0..heads {
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let top = scores.iter().copied().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - top).exp() / z;
                    for e in 0..d {
                        ctx[i * c + h * d + e] += w * v[j * c + h * d + e];
                    }
                }
            }
        }
        out.extend(project(&param("o.w"), &param("o.b"), &ctx));
    }
    out
}

fn sia_degeneracy() -> Outcome {
    let mut worst = 0.0f64;
    for (seed, base) in [(1u64, ModelConfig::tiny()), (2, ModelConfig::toy())] {
        let cfg = ModelConfig {
            si_ratios: [1, 1, 1],
            ..base
        };
        let model = Model::<f64>::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let tape = Tape::inference();
        let net = model.net(&tape);
        for k in 0..3 {
            let (c, heads) = (cfg.decoder_channels[k], cfg.decoder_heads[k]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 10 + k as u64);
            let x = Tensor::from_fn(&[2, 9, c], |_| rng.random_range(-1.0..1.0));
            let prefix = format!("dec.{k}.block0.attn");
            let got = net.sia_attention(&prefix, tape.constant(x.clone()), 1, heads).map_err(|e| e.to_string())?;
            let want = mha_reference(&model, &prefix, &x, heads);
            for (a, b) in got.value().data().iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst <= SIA_TOL, format!("max |SIA(r=1) - MHA| = {worst:.2e} over 6 attention layers (tol {SIA_TOL:e})"))
}

fn synth_dataset(dir: &Path, groups: usize, size: usize, image: usize, seed: u64) -> Result<(), String> {
    cosod(&[
        "synth",
        "--groups",
        &groups.to_string(),
        "--size",
        &size.to_string(),
        "--image",
        &image.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(dir),
    ])
}

fn inference_cost_invariance(tmp: &Path) -> Outcome {
    let mut on = ExperimentConfig {
        model: ModelConfig::tiny(),
        ..Default::default()
    };
    on.batching.resolution = 16;
    on.train.epochs = 0;
    let mut off = on.clone();
    off.train.iaccl_enabled = false;
    let cost_on = count_inference_cost(&on.model).map_err(|e| e.to_string())?;
    let cost_off = count_inference_cost(&off.model).map_err(|e| e.to_string())?;
    let toy = ExperimentConfig::default();
    let group_cost = |c: &ExperimentConfig| InferenceCost::for_group(&c.model, 8).map_err(|e| e.to_string());
    let toy_off = ExperimentConfig {
        train: training::TrainConfig {
            iaccl_enabled: false,
            ..toy.train.clone()
        },
        ..toy.clone()
    };
    let same_cost = cost_on == cost_off && group_cost(&toy)? == group_cost(&toy_off)?;

    let data = tmp.join("c7_data");
    synth_dataset(&data, 2, 3, 32, 1)?;
    let cfg_path = tmp.join("c7.toml");
    fs::write(&cfg_path, on.to_toml()).map_err(|e| e.to_string())?;
    let mut maps = Vec::new();
    for (tag, extra) in [("on", None), ("off", Some("--no-iaccl"))] {
        let run = tmp.join(format!("c7_run_{tag}"));
        let mut args = vec!["train", "--config", p(&cfg_path), "--dataset", p(&data), "--seed", "7", "--out", p(&run)];
        args.extend(extra);
        cosod(&args)?;
        let out = tmp.join(format!("c7_maps_{tag}"));
        cosod(&["infer", "--checkpoint", p(&run.join("final.ckpt")), "--dataset-root", p(&data), "--out", p(&out)])?;
        let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
        for g in fs::read_dir(&out).map_err(|e| e.to_string())? {
            let g = g.map_err(|e| e.to_string())?.path();
            if g.is_dir() {
                for f in fs::read_dir(&g).map_err(|e| e.to_string())? {
                    let f = f.map_err(|e| e.to_string())?.path();
                    files.push((f.strip_prefix(&out).unwrap().to_path_buf(), fs::read(&f).map_err(|e| e.to_string())?));
                }
            }
        }
        files.sort();
        maps.push(files);
    }
    let state_on = TrainState::<f32>::new(&on).map_err(|e| e.to_string())?;
    let state_off = TrainState::<f32>::new(&off).map_err(|e| e.to_string())?;
    let ds = generate_synthetic(&SyntheticSpec {
        n_groups: 2,
        group_size: 3,
        image_size: 32,
        n_distractors: 1,
        seed: 1,
    })
    .map_err(|e| e.to_string())?;
    let lib_same = infer(&state_on.model, &ds.groups[0]).map_err(|e| e.to_string())?
        == infer(&state_off.model, &ds.groups[0]).map_err(|e| e.to_string())?;
    let png_same = maps[0] == maps[1] && !maps[0].is_empty();
    check(
        same_cost && lib_same && png_same,
        format!(
            "cost on/off {} ({} MACs/image, {} params); {} inferred maps bit-identical: {}",
            if same_cost { "identical" } else { "DIFFERENT" },
            cost_on.macs,
            cost_on.params,
            maps[0].len(),
            lib_same && png_same
        ),
    )
}

fn batching_invariants() -> Outcome {
    let n = 8;
    let ops = [AugmentOp::HFlip, AugmentOp::Color, AugmentOp::Rotate];
    let mut counts = Vec::new();
    for size in [1, n / 2, n, 2 * n] {
        let ds = generate_synthetic(&SyntheticSpec {
            n_groups: 1,
            group_size: size,
            image_size: 32,
            n_distractors: 1,
            seed: size as u64,
        })
        .map_err(|e| e.to_string())?;
        for seed in 0..5 {
            let rows = pad_group_fixed(&ds.groups[0], n, &ops, seed).len();
            if rows != n {
                return Err(format!("group of {size} padded to {rows} rows, expected {n}"));
            }
        }
        counts.push(size);
    }

    let ds = generate_synthetic(&SyntheticSpec {
        n_groups: 5,
        group_size: 5,
        image_size: 32,
        n_distractors: 1,
        seed: 9,
    })
    .map_err(|e| e.to_string())?;
    let cfg = BatchingConfig {
        batch_size_per_group: n,
        n_negatives: 3,
        resolution: 32,
        seed: 4,
        ..Default::default()
    };
    let mut negatives = 0;
    for epoch in 0..4 {
        for (a, b) in epoch_batches(&ds, &cfg, epoch).map_err(|e| e.to_string())? {
            for batch in [a, b] {
                let per = batch.gts.data().len() / batch.len();
                for (i, &neg) in batch.negative_flags.iter().enumerate() {
                    if neg {
                        negatives += 1;
                        if batch.gts.data()[i * per..(i + 1) * per].iter().any(|&v| v != 0.0) {
                            return Err(format!("negative row {i} of {} has foreground", batch.group));
                        }
                    }
                }
                if batch.len() != n + cfg.n_negatives || batch.n_negatives() != cfg.n_negatives {
                    return Err(format!("batch of {} has {} rows", batch.group, batch.len()));
                }
            }
        }
    }
    let replay = (0..4).all(|e| epoch_batches(&ds, &cfg, e).ok() == epoch_batches(&ds, &cfg, e).ok())
        && make_training_batch(&ds, (0, 1), &cfg, 2, 0).ok() == make_training_batch(&ds, (0, 1), &cfg, 2, 0).ok();
    let varies = epoch_batches(&ds, &cfg, 0).ok() != epoch_batches(&ds, &cfg, 1).ok();
    check(
        replay && varies,
        format!("fixed padding gives {n} rows for group sizes {counts:?}; {negatives} negative rows all-zero; epoch replay exact: {replay}"),
    )
}

fn synthetic_overfit(tmp: &Path) -> Outcome {
    let config = workspace_root().join("configs/overfit.toml");
    let cfg = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
    let data = tmp.join("c9_data");
    cosod(&["synth", "--groups", "4", "--size", "8", "--image", "64", "--out", p(&data)])?;
    let run = tmp.join("c9_run");
    let start = Instant::now();
    cosod(&["train", "--config", p(&config), "--dataset", p(&data), "--out", p(&run)])?;
    let train_secs = start.elapsed().as_secs_f64();
    let maps = tmp.join("c9_maps");
    cosod(&["infer", "--checkpoint", p(&run.join("final.ckpt")), "--dataset-root", p(&data), "--out", p(&maps)])?;
    let report = tmp.join("c9_report.json");
    cosod(&["eval", "--pred-dir", p(&maps), "--dataset-root", p(&data), "--out", p(&report)])?;
    let r = read_json(&report)?;
    let s = r["aggregate"]["Smeasure"].as_f64().ok_or("no Smeasure")?;
    let m = r["aggregate"]["MAE"].as_f64().ok_or("no MAE")?;
    let epochs = cfg.train.epochs;
    check(
        s >= OVERFIT_MIN_S && m <= OVERFIT_MAX_MAE && epochs <= OVERFIT_MAX_EPOCHS && train_secs <= OVERFIT_TIME_LIMIT_S,
        format!(
            "training-set S = {s:.4} (min {OVERFIT_MIN_S}), MAE = {m:.4} (max {OVERFIT_MAX_MAE}) after {epochs} epochs in {train_secs:.0} s (limit {OVERFIT_TIME_LIMIT_S} s)"
        ),
    )
}

fn held_out_s(train_ds: &GroupedDataset, test_ds: &GroupedDataset, cfg: &ExperimentConfig) -> Result<f64, String> {
    let state = TrainState::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let state = training::train(train_ds, cfg, state, None).map_err(|e| e.to_string())?;
    let mut preds = Predictions::new();
    for g in &test_ds.groups {
        for (s, m) in g.samples.iter().zip(infer(&state.model, g).map_err(|e| e.to_string())?) {
            preds.insert(&g.name, &s.stem, m);
        }
    }
    let report = evaluate_dataset(&preds, test_ds, EvalOptions::default()).map_err(|e| e.to_string())?;
    Ok(report.aggregate.s_measure)
}

fn ablation_direction() -> Outcome {
    let base = ExperimentConfig::load(&workspace_root().join("configs/ablation.toml")).map_err(|e| e.to_string())?;
    let ds = generate_synthetic(&SyntheticSpec {
        n_groups: 8,
        group_size: 6,
        image_size: 64,
        n_distractors: 1,
        seed: 100,
    })
    .map_err(|e| e.to_string())?;
    let names: Vec<&str> = ds.groups.iter().map(|g| g.name.as_str()).collect();
    let train_ds = ds.subset(&names[..6]).map_err(|e| e.to_string())?;
    let test_ds = ds.subset(&names[6..]).map_err(|e| e.to_string())?;
    let (mut full, mut ablated) = (Vec::new(), Vec::new());
    for seed in ABLATION_SEEDS {
        let mut cfg = base.clone();
        cfg.set_seed(seed);
        cfg.train.iaccl_enabled = true;
        full.push(held_out_s(&train_ds, &test_ds, &cfg)?);
        cfg.train.iaccl_enabled = false;
        ablated.push(held_out_s(&train_ds, &test_ds, &cfg)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (f, a) = (mean(&full), mean(&ablated));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    check(
        f >= a,
        format!(
            "held-out mean S full {f:.4} [{}] vs no-IACCL {a:.4} [{}] over seeds {ABLATION_SEEDS:?}",
            fmt(&full),
            fmt(&ablated)
        ),
    )
}

fn stats_schema(tmp: &Path) -> Outcome {
    let (groups, size, image) = (5, 6, 48);
    let data = tmp.join("c11_data");
    synth_dataset(&data, groups, size, image, 2)?;
    let out = tmp.join("c11_stats");
    cosod(&["stats", "--dataset-root", p(&data), "--out", p(&out)])?;
    let v = read_json(&out.join("stats.json"))?;
    let obj = v.as_object().ok_or("stats is not an object")?;
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    let want_keys = [
        "group_size_mean",
        "group_size_std",
        "n_groups",
        "n_images",
        "res_h_mean",
        "res_h_std",
        "res_w_mean",
        "res_w_std",
    ];
    let num = |k: &str| v[k].as_f64().unwrap_or(f64::NAN);
    let exact = num("n_groups") == groups as f64
        && num("n_images") == (groups * size) as f64
        && num("group_size_mean") == size as f64
        && num("group_size_std") == 0.0
        && num("res_h_mean") == image as f64
        && num("res_w_mean") == image as f64
        && num("res_h_std") == 0.0
        && num("res_w_std") == 0.0;
    check(
        keys == want_keys && exact,
        format!("{} fields; {groups} groups x {size} images at {image}px reproduced exactly: {exact}", keys.len()),
    )
}

fn main() {
    // Only the harness itself is filtered: `cargo test other_name` skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    let t = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("metric oracle equivalence", Box::new(metric_oracle)),
        ("perfect-prediction fixed points", Box::new(fixed_points)),
        ("loss gradient checks", Box::new(gradient_checks)),
        ("lambda weighting", Box::new(lambda_weighting)),
        ("encoder and SIA shape law", Box::new(shape_law)),
        ("SIA degeneracy at r = 1", Box::new(sia_degeneracy)),
        ("inference-cost invariance", Box::new(|| inference_cost_invariance(t))),
        ("batching invariants", Box::new(batching_invariants)),
        ("synthetic overfit", Box::new(|| synthetic_overfit(t))),
        ("ablation direction", Box::new(ablation_direction)),
        ("stats schema", Box::new(|| stats_schema(t))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag}  {name}: {detail} [{:.1} s]", i + 1, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
