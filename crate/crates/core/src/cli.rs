//! Subcommand drivers behind the `contextseg` binary.
//!
//! Each `run_*` function is a plain library call so tests can drive the full
//! pipeline without spawning processes. All of them are deterministic given
//! the config in single-threaded mode (`CONTEXTSEG_THREADS` 0 or 1).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{build, grad_check, ConvSpec, FusionMode, GradCheckReport, NetSpec, Network};
use crate::optim::{lr_at, Optimizer};
use crate::pnm;
use crate::rfprobe::{empirical_pixel_box, empirical_rf, theoretical_rf, RFBox, SensitivityMap};
use crate::segdata::{
    accumulate_confusion, generate, load_dataset, metrics, write_dataset, ConfusionMatrix,
    Metrics, Sample, IGNORE_LABEL,
};
use crate::tensor::{LabelMap, Shape, Tensor};

pub const METRICS_HEADER: &str = "pixel_acc,mean_acc,mean_iu,fw_iu";

/// Worker-thread cap from `CONTEXTSEG_THREADS`; 0 = single-threaded.
pub fn thread_cap() -> usize {
    std::env::var("CONTEXTSEG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0)
}

fn class_color(c: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [30, 30, 30],
        [230, 80, 80],
        [80, 230, 80],
        [80, 80, 230],
        [230, 230, 80],
        [230, 80, 230],
        [80, 230, 230],
        [240, 160, 60],
    ];
    PALETTE[c % PALETTE.len()]
}

/// Stack samples into one (b, 3, h, w) batch with matching labels.
fn stack_batch(samples: &[Sample], indices: &[usize]) -> Result<(Tensor, LabelMap)> {
    let size = samples[indices[0]].size;
    let b = indices.len();
    let shape = Shape::new(b, 3, size, size)?;
    let mut images = Tensor::zeros(shape);
    let mut labels = LabelMap::new_filled(b, size, size, 0);
    for (bi, &idx) in indices.iter().enumerate() {
        let s = &samples[idx];
        if s.size != size {
            return Err(Error::Shape("mixed image sizes in batch".into()));
        }
        let img = s.image_tensor();
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    images.set(bi, c, y, x, img.get(0, c, y, x));
                }
            }
        }
        for y in 0..size {
            for x in 0..size {
                labels.set(bi, y, x, s.labels.get(0, y, x));
            }
        }
    }
    Ok((images, labels))
}

/// Per-pixel argmax over the class axis.
pub fn predict(logits: &Tensor) -> LabelMap {
    let s = logits.shape();
    let mut out = LabelMap::new_filled(s.n, s.h, s.w, 0);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut best = 0usize;
                let mut best_v = logits.get(n, 0, y, x);
                for c in 1..s.c {
                    let v = logits.get(n, c, y, x);
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out.set(n, y, x, best as u8);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

/// Generate the train and val splits under `data_dir/{train,val}`.
/// The val split uses an offset seed so it never repeats training scenes.
pub fn run_gen(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let train = generate(&cfg.scene, cfg.train_count)?;
    let mut val_spec = cfg.scene.clone();
    val_spec.seed = cfg.scene.seed.wrapping_add(0x5EED);
    let val = generate(&val_spec, cfg.val_count)?;
    let dir = Path::new(&cfg.data_dir);
    let train_manifest = write_dataset(&dir.join("train"), &train)?;
    let val_manifest = write_dataset(&dir.join("val"), &val)?;
    Ok((train_manifest, val_manifest))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_val_mean_iu: Option<f64>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Mean IU of the network over a sample list.
pub fn evaluate_mean_iu(net: &mut Network, samples: &[Sample]) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(net.spec.classes);
    for s in samples {
        let logits = net.forward(&s.image_tensor())?;
        let pred = predict(&logits);
        accumulate_confusion(&pred, &s.labels, IGNORE_LABEL, &mut cm)?;
    }
    Ok(metrics(&cm)?.mean_iu)
}

/// SGD training over the on-disk dataset. Writes an `iter,lr,loss,val_mean_iu`
/// CSV log plus final and best checkpoints under `out_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data_dir = Path::new(&cfg.data_dir);
    let train_set = load_dataset(&data_dir.join("train"))?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val_set = if cfg.eval_interval > 0 {
        load_dataset(&data_dir.join("val"))?
    } else {
        Vec::new()
    };

    let out_dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.csv");
    let final_path = out_dir.join("final.ckpt");
    let best_path = out_dir.join("best.ckpt");

    let mut net = build(&cfg.net, cfg.net_seed)?;
    let mut opt = Optimizer::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut log = String::from("iter,lr,loss,val_mean_iu\n");

    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut best: Option<f64> = None;

    let finish_log = |log: &str| -> Result<()> {
        fs::write(&log_path, log)?;
        Ok(())
    };

    for it in 0..cfg.train.max_iter {
        let lr = lr_at(&cfg.train, it)?;
        let mut loss_sum = 0.0f64;
        for _micro in 0..cfg.train.accum_steps {
            let indices: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.gen_range(0..train_set.len()))
                .collect();
            let (images, labels) = stack_batch(&train_set, &indices)?;
            let (loss, d_logits) = net.loss(&images, &labels, IGNORE_LABEL)?;
            if !loss.is_finite() {
                finish_log(&log)?;
                return Err(Error::Numerical {
                    iter: it,
                    msg: "non-finite training loss".into(),
                });
            }
            loss_sum += loss;
            net.backward(&d_logits)?;
            opt.note_microbatch();
        }
        if let Err(e) = opt.step(&mut net, &cfg.train) {
            finish_log(&log)?;
            return Err(e);
        }
        let loss = loss_sum / cfg.train.accum_steps as f64;
        if it == 0 {
            initial_loss = loss;
        }
        final_loss = loss;

        let evaluate = cfg.eval_interval > 0
            && ((it + 1) % cfg.eval_interval == 0 || it + 1 == cfg.train.max_iter);
        let val_field = if evaluate {
            let miu = evaluate_mean_iu(&mut net, &val_set)?;
            if best.map_or(true, |b| miu > b) {
                best = Some(miu);
                checkpoint::save_file(&net, &best_path)?;
            }
            miu.to_string()
        } else {
            String::new()
        };
        log.push_str(&format!("{it},{lr},{loss},{val_field}\n"));
    }

    checkpoint::save_file(&net, &final_path)?;
    if best.is_none() {
        fs::copy(&final_path, &best_path)?;
    }
    finish_log(&log)?;

    Ok(TrainOutcome {
        initial_loss,
        final_loss,
        best_val_mean_iu: best,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        log_path,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub aggregate: Metrics,
    pub per_image: Vec<Metrics>,
    pub metrics_path: PathBuf,
    pub per_image_path: PathBuf,
    pub pred_dir: PathBuf,
}

fn eval_one(net: &mut Network, sample: &Sample) -> Result<(LabelMap, ConfusionMatrix)> {
    let logits = net.forward(&sample.image_tensor())?;
    let pred = predict(&logits);
    let mut cm = ConfusionMatrix::new(net.spec.classes);
    accumulate_confusion(&pred, &sample.labels, IGNORE_LABEL, &mut cm)?;
    Ok((pred, cm))
}

/// Evaluate a checkpoint on the val split: paletted PPM prediction per image,
/// per-image metrics, and aggregate metrics over the summed confusion matrix.
/// Images may be sharded across `CONTEXTSEG_THREADS` workers; results are
/// merged in image-index order.
pub fn run_eval(cfg: &RunConfig, ckpt_path: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    let samples = load_dataset(&Path::new(&cfg.data_dir).join("val"))?;
    if samples.is_empty() {
        return Err(Error::Data("val split is empty".into()));
    }
    let ckpt_bytes = fs::read(ckpt_path)?;

    let threads = thread_cap().min(samples.len()).max(1);
    let mut results: Vec<Option<(LabelMap, ConfusionMatrix)>> =
        (0..samples.len()).map(|_| None).collect();
    if threads <= 1 {
        let mut net = build(&cfg.net, cfg.net_seed)?;
        checkpoint::load_into(&mut net, &ckpt_bytes)?;
        for (i, s) in samples.iter().enumerate() {
            results[i] = Some(eval_one(&mut net, s)?);
        }
    } else {
        let chunks: Vec<Vec<usize>> = (0..threads)
            .map(|t| (t..samples.len()).step_by(threads).collect())
            .collect();
        let shard_results: Vec<Result<Vec<(usize, (LabelMap, ConfusionMatrix))>>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunks
                    .iter()
                    .map(|chunk| {
                        let samples = &samples;
                        let ckpt_bytes = &ckpt_bytes;
                        scope.spawn(move || {
                            let mut net = build(&cfg.net, cfg.net_seed)?;
                            checkpoint::load_into(&mut net, ckpt_bytes)?;
                            let mut out = Vec::new();
                            for &i in chunk {
                                out.push((i, eval_one(&mut net, &samples[i])?));
                            }
                            Ok(out)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
        for shard in shard_results {
            for (i, r) in shard? {
                results[i] = Some(r);
            }
        }
    }

    let out_dir = Path::new(&cfg.out_dir);
    let pred_dir = out_dir.join("preds");
    fs::create_dir_all(&pred_dir)?;

    let mut total = ConfusionMatrix::new(cfg.net.classes);
    let mut per_image = Vec::with_capacity(samples.len());
    let mut per_image_csv = format!("index,{METRICS_HEADER}\n");
    for (i, r) in results.into_iter().enumerate() {
        let (pred, cm) = r.expect("every image evaluated");
        let s = &samples[i];
        let mut rgb = vec![0u8; s.size * s.size * 3];
        for y in 0..s.size {
            for x in 0..s.size {
                let color = class_color(pred.get(0, y, x) as usize);
                rgb[(y * s.size + x) * 3..(y * s.size + x) * 3 + 3].copy_from_slice(&color);
            }
        }
        fs::write(
            pred_dir.join(format!("{i:05}.ppm")),
            pnm::encode_ppm8(s.size, s.size, &rgb)?,
        )?;
        let m = metrics(&cm)?;
        per_image_csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu
        ));
        per_image.push(m);
        total.merge(&cm)?;
    }

    let aggregate = metrics(&total)?;
    let metrics_path = out_dir.join("metrics.csv");
    fs::write(
        &metrics_path,
        format!(
            "{METRICS_HEADER}\n{},{},{},{}\n",
            aggregate.pixel_acc, aggregate.mean_acc, aggregate.mean_iu, aggregate.fw_iu
        ),
    )?;
    let per_image_path = out_dir.join("per_image_metrics.csv");
    fs::write(&per_image_path, per_image_csv)?;

    Ok(EvalOutcome {
        aggregate,
        per_image,
        metrics_path,
        per_image_path,
        pred_dir,
    })
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub const GRADCHECK_STEP: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-3;

fn toy_spec(fusion: FusionMode) -> NetSpec {
    let with_branches = fusion != FusionMode::None;
    NetSpec {
        in_channels: 3,
        trunk: vec![ConvSpec::k3p1(6), ConvSpec::k3p1(8)],
        classes: 2,
        fusion,
        context_enabled: with_branches,
        fusion_normalize: with_branches,
        taps: if with_branches { vec![0] } else { vec![] },
        branch_scales: if with_branches { vec![1.0] } else { vec![] },
        late_weights: vec![1.0, 1.0],
    }
}

/// Gradient-check all three fusion modes on toy nets (2 classes, 8x8 input).
pub fn run_gradcheck(cfg: &RunConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    gradcheck_all(cfg.train.seed)
}

pub fn gradcheck_all(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 3, 8, 8)?;
    let data = (0..shape.len()).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    let images = Tensor::from_vec(shape, data)?;
    let mut labels = LabelMap::new_filled(1, 8, 8, 0);
    for v in labels.data.iter_mut() {
        *v = rng.gen_range(0..2u8);
    }

    let mut out = Vec::new();
    for mode in [FusionMode::None, FusionMode::Early, FusionMode::Late] {
        let spec = toy_spec(mode);
        debug_assert!({
            let net = build(&spec, seed)?;
            net.num_params() <= 5000
        });
        let mut net = build(&spec, seed)?;
        let report = grad_check(&mut net, &images, &labels, GRADCHECK_STEP, GRADCHECK_TOL)?;
        out.push((mode.as_str(), report));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub theoretical: RFBox,
    pub empirical: Option<RFBox>,
    /// Empirical box area over theoretical box area; 0 for an all-zero map.
    pub coverage_ratio: f64,
    pub map: SensitivityMap,
    pub heatmap_path: PathBuf,
    pub boxes_path: PathBuf,
}

/// Probe one unit of the trunk: theoretical box, noise-patch sensitivity map
/// (as a 16-bit PGM heatmap), empirical box and the area coverage ratio.
pub fn run_probe(cfg: &RunConfig, ckpt_path: Option<&Path>) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let trunk = cfg.net.trunk.clone();
    if cfg.probe_layer >= trunk.len() {
        return Err(Error::Argument(format!(
            "probe.layer {} out of range for {}-block trunk",
            cfg.probe_layer,
            trunk.len()
        )));
    }
    let mut net = build(&cfg.net, cfg.net_seed)?;
    if let Some(p) = ckpt_path {
        checkpoint::load_file(&mut net, p)?;
    }

    let size = cfg.probe_input_size;
    let shape = Shape::new(1, cfg.net.in_channels, size, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.probe.seed);
    let data = (0..shape.len()).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    let image = Tensor::from_vec(shape, data)?;

    // layer output extent, for defaulting the probed unit to the center
    let mut ext = size;
    for cs in &trunk[..=cfg.probe_layer] {
        ext = (ext + 2 * cs.pad - cs.kernel) / cs.stride + 1;
    }
    let row = if cfg.probe_row < 0 {
        ext / 2
    } else {
        cfg.probe_row as usize
    };
    let col = if cfg.probe_col < 0 {
        ext / 2
    } else {
        cfg.probe_col as usize
    };

    let theoretical = theoretical_rf(&trunk, cfg.probe_layer, (row, col), size, size)?;
    let map = empirical_rf(
        &net,
        &image,
        cfg.probe_layer,
        (cfg.probe_channel, row, col),
        &cfg.probe,
    )?;
    let empirical = empirical_pixel_box(&map, cfg.probe.threshold_fraction)?;
    let coverage_ratio = empirical
        .map(|b| b.area() as f64 / theoretical.area() as f64)
        .unwrap_or(0.0);

    let probe_dir = Path::new(&cfg.out_dir).join("probe");
    fs::create_dir_all(&probe_dir)?;
    let heatmap_path = probe_dir.join("heatmap.pgm");
    fs::write(
        &heatmap_path,
        pnm::encode_pgm16(map.grid_w, map.grid_h, &map.to_pgm16())?,
    )?;
    fs::write(probe_dir.join("heatmap.csv"), map.to_csv())?;
    let boxes_path = probe_dir.join("boxes.csv");
    let mut csv = String::from("derivation,row_lo,row_hi,col_lo,col_hi,area\n");
    csv.push_str(&theoretical.to_csv_line());
    csv.push('\n');
    if let Some(b) = empirical {
        csv.push_str(&b.to_csv_line());
        csv.push('\n');
    }
    fs::write(&boxes_path, csv)?;
    fs::write(
        probe_dir.join("coverage.txt"),
        format!("{coverage_ratio}\n"),
    )?;

    Ok(ProbeOutcome {
        theoretical,
        empirical,
        coverage_ratio,
        map,
        heatmap_path,
        boxes_path,
    })
}
