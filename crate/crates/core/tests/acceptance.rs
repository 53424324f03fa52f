//! End-to-end acceptance gate: one pass/fail line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines;
//! any failing criterion fails the single test at the end.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use contextseg::cli::{gradcheck_all, run_probe, run_train};
use contextseg::config::RunConfig;
use contextseg::error::Error;
use contextseg::graph::{build, ConvSpec, FusionMode, NetSpec};
use contextseg::layers::NormScale;
use contextseg::optim::{lr_at, LrPolicy, Optimizer, TrainConfig};
use contextseg::rfprobe::{empirical_box, theoretical_rf_size};
use contextseg::segdata::{
    accumulate_confusion, cue_oracle_predict, generate, metrics, oracle_mean_iu,
    window_oracle_predict, ConfusionMatrix, IGNORE_LABEL,
};
use contextseg::tensor::{LabelMap, Shape, Tensor};

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[1]
}

// -----------------------------------------------------------------------
// 1. gradient fidelity: all fusion modes pass the finite-difference check
//    across 10 seeds in under a minute
// -----------------------------------------------------------------------
fn criterion_gradients() -> Result<(), String> {
    let t0 = Instant::now();
    for seed in 0..10u64 {
        for (mode, report) in gradcheck_all(seed).map_err(|e| e.to_string())? {
            if !report.pass {
                return Err(format!(
                    "seed {seed}, fusion {mode} failed:\n{}",
                    report.render()
                ));
            }
        }
    }
    let elapsed = t0.elapsed();
    if elapsed > Duration::from_secs(60) {
        return Err(format!("took {elapsed:?}, budget is 60 s"));
    }
    Ok(())
}

// -----------------------------------------------------------------------
// 2. norm-scale algebra: gamma = ||x|| reproduces x; constant gamma = g
//    gives output norm g
// -----------------------------------------------------------------------
fn criterion_norm_scale() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let c = rng.gen_range(2..16usize);
        let shape = Shape::new(1, c, 1, 1).map_err(|e| e.to_string())?;
        let xs: Vec<f32> = (0..c)
            .map(|_| {
                let v: f32 = rng.gen_range(-1.0..1.0);
                // keep the vector away from zero so "relative" is meaningful
                v + 0.2 * v.signum()
            })
            .collect();
        let norm = xs.iter().map(|v| (v * v) as f64).sum::<f64>().sqrt() as f32;
        let x = Tensor::from_vec(shape, xs.clone()).map_err(|e| e.to_string())?;

        let mut layer = NormScale::new(c);
        layer.gamma.data.fill(norm);
        let y = layer.forward(&x).map_err(|e| e.to_string())?;
        for i in 0..c {
            let (a, b) = (y.data()[i], xs[i]);
            if ((a - b) / norm).abs() > 1e-5 {
                return Err(format!(
                    "case {case}: gamma=||x|| channel {i}: {a} vs {b}"
                ));
            }
        }

        let g: f32 = rng.gen_range(0.5..20.0);
        let mut layer = NormScale::new(c);
        layer.gamma.data.fill(g);
        let y = layer.forward(&x).map_err(|e| e.to_string())?;
        let out_norm = y.data().iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
        if ((out_norm - g as f64) / g as f64).abs() > 1e-5 {
            return Err(format!("case {case}: constant gamma {g}: norm {out_norm}"));
        }
    }
    Ok(())
}

// -----------------------------------------------------------------------
// 3. context helps: early fusion with normalization beats the no-context
//    baseline by at least max(10 points, half the oracle gap), median of 3
//    seeds at a 2000-iteration budget
// -----------------------------------------------------------------------
fn criterion_context_helps() -> Result<(), String> {
    let t0 = Instant::now();
    let dir = TempDir::new().map_err(|e| e.to_string())?;

    let mut base = RunConfig::default();
    base.data_dir = dir.path().join("data").to_string_lossy().into_owned();
    // slim trunk so six 2000-iteration runs fit the CPU budget; the default
    // receptive field (9x9 at the top block) is unchanged
    base.net.trunk = vec![
        ConvSpec::k3p1(6),
        ConvSpec::k3p1(6),
        ConvSpec::k3p1(12),
        ConvSpec::k3p1(12),
    ];
    base.train.max_iter = 2000;
    base.eval_interval = 400;

    // calibrate the margin: a classifier that sees only the trunk's
    // receptive field can read the cue only near shape borders; one told
    // the cue is exact
    let rf = theoretical_rf_size(&base.net.trunk, base.net.trunk.len() - 1);
    let radius = (rf - 1) / 2;
    let mut val_spec = base.scene.clone();
    val_spec.seed = base.scene.seed.wrapping_add(0x5EED);
    let val = generate(&val_spec, base.val_count).map_err(|e| e.to_string())?;
    let window_miu = oracle_mean_iu(&val, &base.scene, |s| {
        window_oracle_predict(s, &base.scene, radius)
    })
    .map_err(|e| e.to_string())?;
    let cue_miu = oracle_mean_iu(&val, &base.scene, |s| cue_oracle_predict(s, &base.scene))
        .map_err(|e| e.to_string())?;
    if (cue_miu - 1.0).abs() > 1e-12 {
        return Err(format!("cue oracle should be exact, got {cue_miu}"));
    }
    let margin = (0.5 * (cue_miu - window_miu)).max(0.10);

    contextseg::cli::run_gen(&base).map_err(|e| e.to_string())?;

    let mut with_context = [0.0f64; 3];
    let mut baseline = [0.0f64; 3];
    for (i, seed) in [1u64, 2, 3].into_iter().enumerate() {
        for context in [true, false] {
            let mut cfg = base.clone();
            cfg.net_seed = seed;
            cfg.train.seed = seed.wrapping_add(100);
            cfg.out_dir = dir
                .path()
                .join(format!("run_{seed}_{context}"))
                .to_string_lossy()
                .into_owned();
            if !context {
                cfg.net.fusion = FusionMode::None;
                cfg.net.context_enabled = false;
                cfg.net.fusion_normalize = false;
                cfg.net.taps = vec![];
                cfg.net.branch_scales = vec![];
            }
            let out = run_train(&cfg).map_err(|e| e.to_string())?;
            let miu = out
                .best_val_mean_iu
                .ok_or("training never evaluated the val split")?;
            if context {
                with_context[i] = miu;
            } else {
                baseline[i] = miu;
            }
        }
    }

    let gap = median3(with_context) - median3(baseline);
    let elapsed = t0.elapsed();
    if gap < margin {
        return Err(format!(
            "median context mean_iu {:.4} - baseline {:.4} = {gap:.4} < required {margin:.4} \
             (window oracle {window_miu:.4})",
            median3(with_context),
            median3(baseline)
        ));
    }
    if elapsed > Duration::from_secs(600) {
        return Err(format!("took {elapsed:?}, budget is 10 min"));
    }
    Ok(())
}

// -----------------------------------------------------------------------
// 4. normalization prevents collapse under a 100x inter-branch scale
//    imbalance
// -----------------------------------------------------------------------
fn criterion_collapse() -> Result<(), String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut base = RunConfig::default();
    base.data_dir = dir.path().join("data").to_string_lossy().into_owned();
    base.train_count = 40;
    base.val_count = 8;
    base.net.trunk = vec![ConvSpec::k3p1(6), ConvSpec::k3p1(6)];
    base.net.taps = vec![0, 1];
    base.net.branch_scales = vec![1.0, 100.0];
    base.train.max_iter = 300;
    base.train.step_size = 100;
    base.eval_interval = 0;
    contextseg::cli::run_gen(&base).map_err(|e| e.to_string())?;

    let mut bad_seeds = 0;
    for seed in [1u64, 2, 3] {
        let mut final_losses = [f64::NAN; 2];
        let mut diverged = false;
        for (j, normalize) in [true, false].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.net_seed = seed;
            cfg.train.seed = seed.wrapping_add(100);
            cfg.net.fusion_normalize = normalize;
            cfg.out_dir = dir
                .path()
                .join(format!("run_{seed}_{normalize}"))
                .to_string_lossy()
                .into_owned();
            match run_train(&cfg) {
                Ok(out) => final_losses[j] = out.final_loss,
                Err(Error::Numerical { .. }) if !normalize => diverged = true,
                Err(e) => {
                    return Err(format!(
                        "seed {seed} normalize {normalize}: unexpected failure {e}"
                    ))
                }
            }
        }
        if !final_losses[0].is_finite() {
            return Err(format!("seed {seed}: normalized run did not finish"));
        }
        if diverged || final_losses[1] >= 2.0 * final_losses[0] {
            bad_seeds += 1;
        }
    }
    if bad_seeds < 2 {
        return Err(format!(
            "imbalance hurt only {bad_seeds}/3 seeds, expected at least 2"
        ));
    }
    Ok(())
}

// -----------------------------------------------------------------------
// 5. receptive-field containment: empirical box area never exceeds the
//    theoretical one; the default 4-block trunk gives exactly 9x9 and the
//    raw probe support stays inside the box dilated by patch-1
// -----------------------------------------------------------------------
fn criterion_receptive_field() -> Result<(), String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;

    // default 4-block trunk, centered top-layer unit, 64x64 input
    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.path().join("probe_default").to_string_lossy().into_owned();
    let out = run_probe(&cfg, None).map_err(|e| e.to_string())?;
    let theo = &out.theoretical;
    if theo.rows() != 9 || theo.cols() != 9 {
        return Err(format!("theoretical box {}x{}, want 9x9", theo.rows(), theo.cols()));
    }
    let emp = out.empirical.as_ref().ok_or("all-zero sensitivity map")?;
    if emp.area() > theo.area() {
        return Err(format!(
            "empirical area {} exceeds theoretical {}",
            emp.area(),
            theo.area()
        ));
    }
    // the raw responsive-position support may overshoot the box by at most
    // patch-1 positions (probe positions are patch top-left corners)
    let support = empirical_box(&out.map, cfg.probe.threshold_fraction)
        .map_err(|e| e.to_string())?
        .ok_or("all-zero sensitivity map")?;
    let d = cfg.probe.patch - 1;
    if support.row_lo + d < theo.row_lo
        || support.col_lo + d < theo.col_lo
        || support.row_hi > theo.row_hi + d
        || support.col_hi > theo.col_hi + d
    {
        return Err(format!(
            "support {} outside theoretical {} dilated by {d}",
            support.to_csv_line(),
            theo.to_csv_line()
        ));
    }

    // containment holds on other probed nets too
    let variants: [(Vec<ConvSpec>, usize, usize); 2] = [
        (vec![ConvSpec::k3p1(4), ConvSpec::k3p1(4)], 1, 32),
        (
            vec![
                ConvSpec::k3p1(4),
                ConvSpec {
                    out_channels: 6,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
                ConvSpec::k3p1(6),
            ],
            2,
            32,
        ),
    ];
    for (i, (trunk, layer, size)) in variants.into_iter().enumerate() {
        let channels = trunk[layer].out_channels;
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().join(format!("probe_{i}")).to_string_lossy().into_owned();
        cfg.net.trunk = trunk;
        cfg.net.taps = vec![layer];
        cfg.probe_layer = layer;
        cfg.probe_input_size = size;
        // relu can zero the probed unit for some channels; scan for a live one
        let mut checked = false;
        for channel in 0..channels {
            cfg.probe_channel = channel;
            let out = run_probe(&cfg, None).map_err(|e| e.to_string())?;
            let Some(emp) = out.empirical.as_ref() else {
                continue; // dead unit: zero map is trivially contained
            };
            if emp.area() > out.theoretical.area() {
                return Err(format!(
                    "variant {i} channel {channel}: empirical area {} exceeds theoretical {}",
                    emp.area(),
                    out.theoretical.area()
                ));
            }
            checked = true;
        }
        if !checked {
            return Err(format!("variant {i}: every probed channel was dead"));
        }
    }
    Ok(())
}

// -----------------------------------------------------------------------
// 6. metric oracle: metrics() matches a brute-force recount on random
//    label/prediction pairs, plus the hand-evaluated 2x2 case
// -----------------------------------------------------------------------
fn brute_force_metrics(
    truth: &LabelMap,
    pred: &LabelMap,
    classes: usize,
) -> Option<(f64, f64, f64, f64)> {
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.data.iter().zip(&pred.data) {
        if t != IGNORE_LABEL {
            counts[t as usize][p as usize] += 1;
        }
    }
    let total: u64 = counts.iter().flatten().sum();
    if total == 0 {
        return None;
    }
    let mut correct = 0u64;
    let mut acc_sum = 0.0;
    let mut acc_n = 0u64;
    let mut iu_sum = 0.0;
    let mut iu_n = 0u64;
    let mut fw_sum = 0.0;
    for i in 0..classes {
        let t_i: u64 = counts[i].iter().sum();
        let p_i: u64 = (0..classes).map(|j| counts[j][i]).sum();
        let d = counts[i][i];
        correct += d;
        if t_i > 0 {
            acc_sum += d as f64 / t_i as f64;
            acc_n += 1;
        }
        // a class absent from the truth still counts toward mean IU when it
        // was (wrongly) predicted; only never-seen classes are excluded
        if t_i + p_i > 0 {
            let iu = d as f64 / (t_i + p_i - d) as f64;
            iu_sum += iu;
            iu_n += 1;
            fw_sum += t_i as f64 * iu;
        }
    }
    Some((
        correct as f64 / total as f64,
        acc_sum / acc_n as f64,
        iu_sum / iu_n as f64,
        fw_sum / total as f64,
    ))
}

fn criterion_metrics() -> Result<(), String> {
    // hand-evaluated case: cm [[1,1],[1,1]] has mean_iu exactly 1/3
    let truth = LabelMap::from_vec(1, 2, 2, vec![0, 0, 1, 1]).map_err(|e| e.to_string())?;
    let pred = LabelMap::from_vec(1, 2, 2, vec![0, 1, 0, 1]).map_err(|e| e.to_string())?;
    let mut cm = ConfusionMatrix::new(2);
    accumulate_confusion(&pred, &truth, IGNORE_LABEL, &mut cm).map_err(|e| e.to_string())?;
    let m = metrics(&cm).map_err(|e| e.to_string())?;
    if (m.mean_iu - 1.0 / 3.0).abs() > 1e-12 {
        return Err(format!("hand case mean_iu {} != 1/3", m.mean_iu));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut done = 0;
    while done < 100 {
        let classes = rng.gen_range(2..6usize);
        let n = rng.gen_range(1..3usize);
        let h = rng.gen_range(1..8usize);
        let w = rng.gen_range(1..8usize);
        let label = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(0.1) {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..classes) as u8
            }
        };
        let tv: Vec<u8> = (0..n * h * w).map(|_| label(&mut rng)).collect();
        let pv: Vec<u8> = (0..n * h * w)
            .map(|_| rng.gen_range(0..classes) as u8)
            .collect();
        let truth = LabelMap::from_vec(n, h, w, tv).map_err(|e| e.to_string())?;
        let pred = LabelMap::from_vec(n, h, w, pv).map_err(|e| e.to_string())?;
        let Some((pa, ma, miu, fwiu)) = brute_force_metrics(&truth, &pred, classes) else {
            continue; // everything ignored; not a scorable pair
        };
        let mut cm = ConfusionMatrix::new(classes);
        accumulate_confusion(&pred, &truth, IGNORE_LABEL, &mut cm).map_err(|e| e.to_string())?;
        let m = metrics(&cm).map_err(|e| e.to_string())?;
        for (name, a, b) in [
            ("pixel_acc", m.pixel_acc, pa),
            ("mean_acc", m.mean_acc, ma),
            ("mean_iu", m.mean_iu, miu),
            ("fw_iu", m.fw_iu, fwiu),
        ] {
            if (a - b).abs() > 1e-9 {
                return Err(format!("case {done}: {name} {a} vs recount {b}"));
            }
        }
        done += 1;
    }
    Ok(())
}

// -----------------------------------------------------------------------
// 7. optimizer contracts: lr endpoints, accumulation equals big batch,
//    two-step momentum unroll
// -----------------------------------------------------------------------
fn toy_net_spec() -> NetSpec {
    NetSpec {
        in_channels: 3,
        trunk: vec![ConvSpec::k3p1(4), ConvSpec::k3p1(4)],
        classes: 3,
        fusion: FusionMode::Early,
        context_enabled: true,
        fusion_normalize: true,
        taps: vec![1],
        branch_scales: vec![1.0],
        late_weights: vec![1.0, 1.0],
    }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> (Tensor, LabelMap) {
    let shape = Shape::new(n, 3, 6, 6).unwrap();
    let data = (0..shape.len()).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    let images = Tensor::from_vec(shape, data).unwrap();
    let mut labels = LabelMap::new_filled(n, 6, 6, 0);
    for v in labels.data.iter_mut() {
        *v = rng.gen_range(0..classes) as u8;
    }
    (images, labels)
}

fn criterion_optimizer() -> Result<(), String> {
    // endpoint identities of the poly policy
    let cfg = TrainConfig {
        policy: LrPolicy::Poly,
        ..TrainConfig::default()
    };
    let lr0 = lr_at(&cfg, 0).map_err(|e| e.to_string())?;
    let lr_end = lr_at(&cfg, cfg.max_iter).map_err(|e| e.to_string())?;
    if lr0 != cfg.base_lr {
        return Err(format!("lr_at(0) = {lr0}, want base_lr {}", cfg.base_lr));
    }
    if lr_end != 0.0 {
        return Err(format!("lr_at(max_iter) = {lr_end}, want 0"));
    }

    // two micro-batches of 4 with accumulation == one batch of 8
    let spec = toy_net_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (images, labels) = random_batch(&mut rng, 8, spec.classes);

    let mut big = build(&spec, 5).map_err(|e| e.to_string())?;
    let mut opt_big = Optimizer::new(&big);
    let cfg_big = TrainConfig {
        accum_steps: 1,
        ..TrainConfig::default()
    };
    let (_, d) = big.loss(&images, &labels, IGNORE_LABEL).map_err(|e| e.to_string())?;
    big.backward(&d).map_err(|e| e.to_string())?;
    opt_big.note_microbatch();
    opt_big.step(&mut big, &cfg_big).map_err(|e| e.to_string())?;

    let mut acc = build(&spec, 5).map_err(|e| e.to_string())?;
    let mut opt_acc = Optimizer::new(&acc);
    let cfg_acc = TrainConfig {
        accum_steps: 2,
        ..TrainConfig::default()
    };
    for half in 0..2 {
        let hs = Shape::new(4, 3, 6, 6).unwrap();
        let mut hd = Vec::with_capacity(hs.len());
        let mut hl = LabelMap::new_filled(4, 6, 6, 0);
        for n in 0..4 {
            let src = half * 4 + n;
            for c in 0..3 {
                for y in 0..6 {
                    for x in 0..6 {
                        hd.push(images.get(src, c, y, x));
                    }
                }
            }
            for y in 0..6 {
                for x in 0..6 {
                    hl.set(n, y, x, labels.get(src, y, x));
                }
            }
        }
        let half_images = Tensor::from_vec(hs, hd).map_err(|e| e.to_string())?;
        let (_, d) = acc
            .loss(&half_images, &hl, IGNORE_LABEL)
            .map_err(|e| e.to_string())?;
        acc.backward(&d).map_err(|e| e.to_string())?;
        opt_acc.note_microbatch();
    }
    opt_acc.step(&mut acc, &cfg_acc).map_err(|e| e.to_string())?;

    let mut big_params = Vec::new();
    big.visit_params(&mut |name, p| big_params.push((name.to_string(), p.data.data().to_vec())));
    let mut mismatch = None;
    let mut idx = 0;
    acc.visit_params(&mut |name, p| {
        let (big_name, big_data) = &big_params[idx];
        idx += 1;
        if mismatch.is_some() {
            return;
        }
        if name != big_name {
            mismatch = Some(format!("parameter order differs: {name} vs {big_name}"));
            return;
        }
        for (a, b) in p.data.data().iter().zip(big_data) {
            if (a - b).abs() > 1e-5 * a.abs().max(b.abs()).max(1.0) {
                mismatch = Some(format!("{name}: accumulated {a} vs big-batch {b}"));
                return;
            }
        }
    });
    if let Some(m) = mismatch {
        return Err(m);
    }

    // two-step momentum unroll with constant injected gradients:
    // v1 = lr0*g, theta1 = theta0 - v1; v2 = m*v1 + lr1*g, theta2 = theta1 - v2
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut net = build(&spec, 9).map_err(|e| e.to_string())?;
    let mut theta0 = Vec::new();
    net.visit_params(&mut |_, p| theta0.push(p.data.data().to_vec()));
    let mut opt = Optimizer::new(&net);
    let g = 0.037f32;
    for _ in 0..2 {
        net.visit_params_mut(&mut |_, p| p.grad.fill(g));
        opt.note_microbatch();
        opt.step(&mut net, &cfg).map_err(|e| e.to_string())?;
    }
    let lr1 = lr_at(&cfg, 1).map_err(|e| e.to_string())?;
    let v1 = lr0 * g as f64;
    let v2 = cfg.momentum * v1 + lr1 * g as f64;
    let mut err = None;
    let mut pi = 0;
    net.visit_params(&mut |name, p| {
        let t0 = &theta0[pi];
        pi += 1;
        if err.is_some() {
            return;
        }
        for (after, before) in p.data.data().iter().zip(t0) {
            let want = *before as f64 - v1 - v2;
            if (*after as f64 - want).abs() > 1e-6 {
                err = Some(format!("{name}: unrolled {want} vs stepped {after}"));
                return;
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(())
}

// -----------------------------------------------------------------------
// 8. determinism: gen and train through the binary produce byte-identical
//    outputs across two runs in single-threaded mode
// -----------------------------------------------------------------------
fn snapshot_dir(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    fn walk(
        root: &Path,
        dir: &Path,
        out: &mut BTreeMap<String, Vec<u8>>,
    ) -> Result<(), String> {
        for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .map_err(|e| e.to_string())?
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn criterion_determinism() -> Result<(), String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_contextseg");

    let mut snapshots = Vec::new();
    for run in 0..2 {
        let root = dir.path().join(format!("run{run}"));
        let mut cfg = RunConfig::default();
        cfg.data_dir = root.join("data").to_string_lossy().into_owned();
        cfg.out_dir = root.join("out").to_string_lossy().into_owned();
        cfg.scene.image_size = 16;
        cfg.scene.shape_size_min = 6;
        cfg.scene.shape_size_max = 10;
        cfg.train_count = 8;
        cfg.val_count = 4;
        cfg.net.trunk = vec![ConvSpec::k3p1(4), ConvSpec::k3p1(6)];
        cfg.net.taps = vec![1];
        cfg.batch_size = 2;
        cfg.train.max_iter = 5;
        cfg.train.step_size = 2;
        cfg.eval_interval = 2;
        let cfg_path = root.join("run.cfg");
        fs::create_dir_all(&root).map_err(|e| e.to_string())?;
        fs::write(&cfg_path, cfg.serialize()).map_err(|e| e.to_string())?;

        for sub in ["gen", "train"] {
            let output = Command::new(bin)
                .arg(sub)
                .arg("--config")
                .arg(&cfg_path)
                .env("CONTEXTSEG_THREADS", "0")
                .output()
                .map_err(|e| e.to_string())?;
            if !output.status.success() {
                return Err(format!(
                    "{sub} run {run} failed: {}",
                    String::from_utf8_lossy(&output.stderr)
                ));
            }
        }
        fs::remove_file(&cfg_path).map_err(|e| e.to_string())?;
        snapshots.push(snapshot_dir(&root)?);
    }

    let (a, b) = (&snapshots[0], &snapshots[1]);
    if a.keys().ne(b.keys()) {
        return Err(format!(
            "runs produced different file sets: {:?} vs {:?}",
            a.keys().collect::<Vec<_>>(),
            b.keys().collect::<Vec<_>>()
        ));
    }
    if a.is_empty() {
        return Err("runs produced no files".into());
    }
    for (path, bytes) in a {
        if b[path] != *bytes {
            return Err(format!("file {path} differs between runs"));
        }
    }
    Ok(())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Result<(), String>); 8] = [
        ("gradient fidelity", criterion_gradients),
        ("norm-scale algebra", criterion_norm_scale),
        ("context helps", criterion_context_helps),
        ("normalization prevents collapse", criterion_collapse),
        ("receptive-field containment", criterion_receptive_field),
        ("metric oracle", criterion_metrics),
        ("optimizer contracts", criterion_optimizer),
        ("determinism", criterion_determinism),
    ];
    let mut failures = Vec::new();
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        match run() {
            Ok(()) => println!("criterion {} ({name}): PASS", i + 1),
            Err(msg) => {
                println!("criterion {} ({name}): FAIL — {msg}", i + 1);
                failures.push(format!("criterion {} ({name}): {msg}", i + 1));
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
