//! Synthetic cue-sensitive segmentation data, dataset I/O, and the four
//! standard segmentation metrics.
//!
//! Each scene is a tinted background (the global cue) with one or more
//! filled shapes on it. The pixel label of a shape depends jointly on the
//! shape kind and the cue, so a classifier that never sees the background
//! cannot resolve the cue-ambiguous class pair and is capped below 100%.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::{LabelMap, Shape, Tensor};

pub const IGNORE_LABEL: u8 = 255;
pub const NUM_CUES: usize = 2;
pub const NUM_SHAPE_KINDS: usize = 2;

/// Foreground fill colors per shape kind (identical under both cues).
const SHAPE_COLORS: [[u8; 3]; NUM_SHAPE_KINDS] = [[210, 210, 60], [60, 210, 210]];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    /// background + shape kinds x cues
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub shape_size_min: usize,
    pub shape_size_max: usize,
    /// magnitude of the background tint that encodes the cue, in [0,1]
    pub cue_strength: f32,
    /// per-pixel uniform noise amplitude, in [0,1]
    pub noise: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            image_size: 32,
            num_classes: 1 + NUM_SHAPE_KINDS * NUM_CUES,
            shapes_min: 1,
            shapes_max: 2,
            shape_size_min: 14,
            shape_size_max: 24,
            cue_strength: 0.18,
            noise: 0.02,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 1 + NUM_SHAPE_KINDS * NUM_CUES {
            return Err(Error::Config(format!(
                "num_classes must be {} (background + {} shape kinds x {} cues)",
                1 + NUM_SHAPE_KINDS * NUM_CUES,
                NUM_SHAPE_KINDS,
                NUM_CUES
            )));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return Err(Error::Config("bad shapes_per_image range".into()));
        }
        if self.shape_size_min < 3 || self.shape_size_min > self.shape_size_max {
            return Err(Error::Config("bad shape_size range".into()));
        }
        if !(0.0..=0.5).contains(&self.cue_strength) {
            return Err(Error::Config("cue_strength must be in [0, 0.5]".into()));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0, 0.2]".into()));
        }
        Ok(())
    }

    /// Label assigned to a shape of `kind` under `cue`.
    pub fn label_for(kind: usize, cue: usize) -> u8 {
        (1 + kind * NUM_CUES + cue) as u8
    }

    /// Background RGB (bytes) for a cue: neutral gray shifted toward red for
    /// cue 0 and toward blue for cue 1.
    pub fn background_color(&self, cue: usize) -> [u8; 3] {
        let base = 0.5f32;
        let s = self.cue_strength;
        let (r, g, b) = match cue {
            0 => (base + s, base - s * 0.5, base - s * 0.5),
            _ => (base - s * 0.5, base - s * 0.5, base + s),
        };
        [to_byte(r), to_byte(g), to_byte(b)]
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One generated scene: 8-bit RGB image bytes, labels and the cue id.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: Vec<u8>,
    pub labels: LabelMap,
    pub cue: u8,
    pub size: usize,
}

impl Sample {
    /// The image as a (1,3,h,w) tensor with values in [0,1].
    pub fn image_tensor(&self) -> Tensor {
        rgb_to_tensor(&self.rgb, self.size, self.size)
    }
}

pub fn rgb_to_tensor(rgb: &[u8], w: usize, h: usize) -> Tensor {
    let shape = Shape::new(1, 3, h, w).unwrap();
    let mut t = Tensor::zeros(shape);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                t.set(0, c, y, x, rgb[(y * w + x) * 3 + c] as f32 / 255.0);
            }
        }
    }
    t
}

#[derive(Clone, Copy)]
enum ShapeGeom {
    Square,
    Diamond,
}

/// Generate `count` scenes, deterministic for a fixed spec.
pub fn generate(spec: &SceneSpec, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(generate_one(spec, &mut rng)?);
    }
    Ok(out)
}

fn generate_one(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let size = spec.image_size;
    let cue = rng.gen_range(0..NUM_CUES);
    let bg = spec.background_color(cue);

    let mut rgb = vec![0u8; size * size * 3];
    for p in 0..size * size {
        rgb[p * 3..p * 3 + 3].copy_from_slice(&bg);
    }
    let mut labels = LabelMap::new_filled(1, size, size, 0);

    let nshapes = rng.gen_range(spec.shapes_min..=spec.shapes_max);
    for _ in 0..nshapes {
        let mut placed = false;
        for _attempt in 0..100 {
            let extent = rng.gen_range(spec.shape_size_min..=spec.shape_size_max);
            if extent + 2 > size {
                continue;
            }
            let y0 = rng.gen_range(1..=size - extent - 1);
            let x0 = rng.gen_range(1..=size - extent - 1);
            let kind = rng.gen_range(0..NUM_SHAPE_KINDS);
            let geom = if rng.gen_bool(0.5) {
                ShapeGeom::Square
            } else {
                ShapeGeom::Diamond
            };
            draw_shape(&mut rgb, &mut labels, size, y0, x0, extent, kind, cue, geom, spec);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place a shape of size {}..{} in a {}px image after 100 attempts",
                spec.shape_size_min, spec.shape_size_max, size
            )));
        }
    }

    // per-pixel noise, quantized into the stored bytes so the in-memory
    // tensor and the on-disk image are bit-identical
    if spec.noise > 0.0 {
        for b in rgb.iter_mut() {
            let delta = rng.gen_range(-spec.noise..spec.noise) * 255.0;
            *b = (*b as f32 + delta).clamp(0.0, 255.0).round() as u8;
        }
    }

    Ok(Sample {
        rgb,
        labels,
        cue: cue as u8,
        size,
    })
}

#[allow(clippy::too_many_arguments)]
fn draw_shape(
    rgb: &mut [u8],
    labels: &mut LabelMap,
    size: usize,
    y0: usize,
    x0: usize,
    extent: usize,
    kind: usize,
    cue: usize,
    geom: ShapeGeom,
    spec: &SceneSpec,
) {
    let label = SceneSpec::label_for(kind, cue);
    let color = SHAPE_COLORS[kind];
    let half = (extent as f32 - 1.0) / 2.0;
    for dy in 0..extent {
        for dx in 0..extent {
            let inside = match geom {
                ShapeGeom::Square => true,
                ShapeGeom::Diamond => {
                    (dy as f32 - half).abs() + (dx as f32 - half).abs() <= half + 0.01
                }
            };
            if !inside {
                continue;
            }
            let y = y0 + dy;
            let x = x0 + dx;
            let p = y * size + x;
            rgb[p * 3..p * 3 + 3].copy_from_slice(&color);
            labels.set(0, y, x, label);
        }
    }
    let _ = spec;
}

// ---------------------------------------------------------------------------
// Confusion matrix and metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>, // counts[true * classes + pred]
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    #[inline]
    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize, n: u64) {
        self.counts[truth * self.classes + pred] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::Shape("confusion matrix class mismatch".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Tally (true, predicted) pixel counts, skipping `ignore_label`.
pub fn accumulate_confusion(
    pred: &LabelMap,
    truth: &LabelMap,
    ignore_label: u8,
    cm: &mut ConfusionMatrix,
) -> Result<()> {
    if pred.n != truth.n || pred.h != truth.h || pred.w != truth.w {
        return Err(Error::Shape("prediction/label shape mismatch".into()));
    }
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        if t == ignore_label {
            continue;
        }
        if t as usize >= cm.classes || p as usize >= cm.classes {
            return Err(Error::Data(format!(
                "label {t}/{p} out of range for {} classes",
                cm.classes
            )));
        }
        cm.add(t as usize, p as usize, 1);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iu: f64,
    pub fw_iu: f64,
}

/// Pixel accuracy, mean class accuracy, mean IU and frequency-weighted IU.
/// Classes never present as ground truth are excluded from the means.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let k = cm.classes;
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let t: Vec<u64> = (0..k).map(|i| (0..k).map(|j| cm.count(i, j)).sum()).collect();
    let predicted: Vec<u64> = (0..k).map(|j| (0..k).map(|i| cm.count(i, j)).sum()).collect();
    let diag: Vec<u64> = (0..k).map(|i| cm.count(i, i)).collect();

    let pixel_acc = diag.iter().sum::<u64>() as f64 / total as f64;

    let mut acc_sum = 0.0;
    let mut acc_n = 0usize;
    for i in 0..k {
        if t[i] > 0 {
            acc_sum += diag[i] as f64 / t[i] as f64;
            acc_n += 1;
        }
    }
    let mean_acc = acc_sum / acc_n as f64;

    let mut iu = vec![0.0f64; k];
    let mut iu_sum = 0.0;
    let mut iu_n = 0usize;
    for i in 0..k {
        let union = t[i] + predicted[i] - diag[i];
        if union > 0 {
            iu[i] = diag[i] as f64 / union as f64;
            iu_n += 1;
            iu_sum += iu[i];
        }
    }
    let mean_iu = iu_sum / iu_n as f64;

    let fw_iu = (0..k).map(|i| t[i] as f64 * iu[i]).sum::<f64>() / total as f64;

    Ok(Metrics {
        pixel_acc,
        mean_acc,
        mean_iu,
        fw_iu,
    })
}

// ---------------------------------------------------------------------------
// Dataset I/O: images/NNNNN.ppm, labels/NNNNN.pgm, manifest.csv
// ---------------------------------------------------------------------------

pub struct DatasetEntry {
    pub index: usize,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub cue: u8,
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = String::from("index,image,label,cue\n");
    for (i, s) in samples.iter().enumerate() {
        let img_rel = format!("images/{i:05}.ppm");
        let lab_rel = format!("labels/{i:05}.pgm");
        fs::write(
            dir.join(&img_rel),
            pnm::encode_ppm8(s.size, s.size, &s.rgb)?,
        )?;
        fs::write(
            dir.join(&lab_rel),
            pnm::encode_pgm8(s.size, s.size, &s.labels.data)?,
        )?;
        manifest.push_str(&format!("{i},{img_rel},{lab_rel},{}\n", s.cue));
    }
    let manifest_path = dir.join("manifest.csv");
    let mut f = fs::File::create(&manifest_path)?;
    f.write_all(manifest.as_bytes())?;
    Ok(manifest_path)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut out = Vec::new();
    for (ln, line) in manifest.lines().enumerate() {
        if ln == 0 {
            if line != "index,image,label,cue" {
                return Err(Error::Format(format!("bad manifest header: {line}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("bad manifest line: {line}")));
        }
        let cue: u8 = fields[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad cue: {}", fields[3])))?;
        let img_bytes = fs::read(dir.join(fields[1]))?;
        let lab_bytes = fs::read(dir.join(fields[2]))?;
        let (rgb, w, h) = match pnm::decode(&img_bytes)? {
            pnm::PnmImage::Rgb8 { w, h, data } => (data, w, h),
            _ => return Err(Error::Format("dataset image must be 8-bit ppm".into())),
        };
        let (lab, lw, lh) = match pnm::decode(&lab_bytes)? {
            pnm::PnmImage::Gray8 { w, h, data } => (data, w, h),
            _ => return Err(Error::Format("dataset labels must be 8-bit pgm".into())),
        };
        if w != h || (lw, lh) != (w, h) {
            return Err(Error::Format("image/label size mismatch".into()));
        }
        out.push(Sample {
            rgb,
            labels: LabelMap::from_vec(1, h, w, lab)?,
            cue,
            size: w,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Oracle classifiers, for calibrating how much of the task is solvable with
// and without access to the global cue.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PixelKind {
    Background,
    Shape(usize),
}

fn color_dist2(a: [u8; 3], b: [u8; 3]) -> i64 {
    (0..3)
        .map(|i| {
            let d = a[i] as i64 - b[i] as i64;
            d * d
        })
        .sum()
}

fn classify_pixel(spec: &SceneSpec, px: [u8; 3]) -> PixelKind {
    let mut best = (PixelKind::Background, i64::MAX);
    for cue in 0..NUM_CUES {
        let d = color_dist2(px, spec.background_color(cue));
        if d < best.1 {
            best = (PixelKind::Background, d);
        }
    }
    for (k, &c) in SHAPE_COLORS.iter().enumerate() {
        let d = color_dist2(px, c);
        if d < best.1 {
            best = (PixelKind::Shape(k), d);
        }
    }
    best.0
}

fn pixel_at(sample: &Sample, y: usize, x: usize) -> [u8; 3] {
    let p = (y * sample.size + x) * 3;
    [sample.rgb[p], sample.rgb[p + 1], sample.rgb[p + 2]]
}

/// Classifier that sees only a (2*radius+1)^2 window per pixel: shape kind
/// comes from the fill color, the cue from any background pixel inside the
/// window. Windows without background fall back to cue 0, so classes that
/// need the cue stay ambiguous on shape interiors.
pub fn window_oracle_predict(sample: &Sample, spec: &SceneSpec, radius: usize) -> LabelMap {
    let size = sample.size;
    let mut out = LabelMap::new_filled(1, size, size, 0);
    for y in 0..size {
        for x in 0..size {
            let kind = match classify_pixel(spec, pixel_at(sample, y, x)) {
                PixelKind::Background => continue,
                PixelKind::Shape(k) => k,
            };
            // vote the cue from the background pixels in the window: the
            // cue-0 tint is red-shifted, the cue-1 tint blue-shifted
            let mut shift = 0i64;
            let mut seen_bg = false;
            for wy in y.saturating_sub(radius)..(y + radius + 1).min(size) {
                for wx in x.saturating_sub(radius)..(x + radius + 1).min(size) {
                    let px = pixel_at(sample, wy, wx);
                    if classify_pixel(spec, px) == PixelKind::Background {
                        seen_bg = true;
                        shift += px[0] as i64 - px[2] as i64;
                    }
                }
            }
            let cue = if !seen_bg || shift >= 0 { 0 } else { 1 };
            out.set(0, y, x, SceneSpec::label_for(kind, cue));
        }
    }
    out
}

/// Classifier that is told the scene's cue: every pixel is decided by its
/// own color plus the given cue, which resolves the task completely.
pub fn cue_oracle_predict(sample: &Sample, spec: &SceneSpec) -> LabelMap {
    let size = sample.size;
    let mut out = LabelMap::new_filled(1, size, size, 0);
    for y in 0..size {
        for x in 0..size {
            if let PixelKind::Shape(k) = classify_pixel(spec, pixel_at(sample, y, x)) {
                out.set(0, y, x, SceneSpec::label_for(k, sample.cue as usize));
            }
        }
    }
    out
}

/// Mean IU of a predictor over a sample list.
pub fn oracle_mean_iu(
    samples: &[Sample],
    spec: &SceneSpec,
    mut predict: impl FnMut(&Sample) -> LabelMap,
) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(spec.num_classes);
    for s in samples {
        accumulate_confusion(&predict(s), &s.labels, IGNORE_LABEL, &mut cm)?;
    }
    Ok(metrics(&cm)?.mean_iu)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let a = generate(&spec, 5).unwrap();
        let b = generate(&spec, 5).unwrap();
        assert_eq!(a, b);
        let spec2 = SceneSpec {
            seed: 8,
            ..SceneSpec::default()
        };
        let c = generate(&spec2, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_stay_in_range() {
        let spec = SceneSpec::default();
        for s in generate(&spec, 20).unwrap() {
            assert!(s
                .labels
                .data
                .iter()
                .all(|&l| (l as usize) < spec.num_classes));
        }
    }

    #[test]
    fn impossible_shapes_error_out() {
        let spec = SceneSpec {
            image_size: 8,
            shape_size_min: 10,
            shape_size_max: 12,
            ..SceneSpec::default()
        };
        assert!(generate(&spec, 3).is_err());
    }

    #[test]
    fn label_depends_on_cue() {
        // kind 0 under the two cues maps to different classes
        assert_ne!(SceneSpec::label_for(0, 0), SceneSpec::label_for(0, 1));
        assert_ne!(SceneSpec::label_for(1, 0), SceneSpec::label_for(1, 1));
    }

    #[test]
    fn window_oracle_is_capped_but_cue_oracle_is_not() {
        // A classifier limited to a small window cannot always see the
        // background cue from inside a shape, so it stays below perfect mean
        // IU; told the cue, the same per-pixel rule is exact.
        let spec = SceneSpec::default();
        let samples = generate(&spec, 40).unwrap();
        let radius = 4;
        let win = oracle_mean_iu(&samples, &spec, |s| window_oracle_predict(s, &spec, radius))
            .unwrap();
        let cue = oracle_mean_iu(&samples, &spec, |s| cue_oracle_predict(s, &spec)).unwrap();
        assert!((cue - 1.0).abs() < 1e-12, "cue oracle mean IU {cue}");
        assert!(win < 0.999, "window oracle mean IU {win} should be capped");
        assert!(win > 0.5, "window oracle should still beat chance: {win}");
    }

    #[test]
    fn window_oracle_with_full_view_matches_cue_oracle() {
        let spec = SceneSpec::default();
        let samples = generate(&spec, 10).unwrap();
        for s in &samples {
            let full = window_oracle_predict(s, &spec, spec.image_size);
            let cue = cue_oracle_predict(s, &spec);
            assert_eq!(full.data, cue.data);
        }
    }

    #[test]
    fn confusion_counts() {
        let mut cm = ConfusionMatrix::new(2);
        let truth = LabelMap::from_vec(1, 1, 2, vec![0, 1]).unwrap();
        let pred = LabelMap::from_vec(1, 1, 2, vec![0, 0]).unwrap();
        accumulate_confusion(&pred, &truth, IGNORE_LABEL, &mut cm).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 0), 1);
        assert_eq!(cm.count(1, 1), 0);
    }

    #[test]
    fn confusion_skips_ignored() {
        let mut cm = ConfusionMatrix::new(2);
        let truth = LabelMap::from_vec(1, 1, 2, vec![IGNORE_LABEL, IGNORE_LABEL]).unwrap();
        let pred = LabelMap::from_vec(1, 1, 2, vec![0, 1]).unwrap();
        accumulate_confusion(&pred, &truth, IGNORE_LABEL, &mut cm).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn confusion_rejects_out_of_range() {
        let mut cm = ConfusionMatrix::new(2);
        let truth = LabelMap::from_vec(1, 1, 1, vec![3]).unwrap();
        let pred = LabelMap::from_vec(1, 1, 1, vec![0]).unwrap();
        assert!(accumulate_confusion(&pred, &truth, IGNORE_LABEL, &mut cm).is_err());
    }

    #[test]
    fn metrics_perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(0, 0, 10);
        cm.add(1, 1, 5);
        cm.add(2, 2, 1);
        let m = metrics(&cm).unwrap();
        assert_eq!(m.pixel_acc, 1.0);
        assert_eq!(m.mean_acc, 1.0);
        assert_eq!(m.mean_iu, 1.0);
        assert_eq!(m.fw_iu, 1.0);
    }

    #[test]
    fn metrics_hand_evaluated_case() {
        // [[1,1],[1,1]]: pixel_acc 0.5, IU = 1/3 each, mean/fw IU = 1/3
        let mut cm = ConfusionMatrix::new(2);
        for t in 0..2 {
            for p in 0..2 {
                cm.add(t, p, 1);
            }
        }
        let m = metrics(&cm).unwrap();
        assert!((m.pixel_acc - 0.5).abs() < 1e-12);
        assert!((m.mean_acc - 0.5).abs() < 1e-12);
        assert!((m.mean_iu - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.fw_iu - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded_from_means() {
        // class 2 never appears as truth and is never predicted
        let mut cm = ConfusionMatrix::new(3);
        cm.add(0, 0, 4);
        cm.add(1, 0, 1);
        cm.add(1, 1, 3);
        let m = metrics(&cm).unwrap();
        // mean over classes 0 and 1 only
        assert!((m.mean_acc - (1.0 + 0.75) / 2.0).abs() < 1e-12);
        let iu0 = 4.0 / 5.0;
        let iu1 = 3.0 / 4.0;
        assert!((m.mean_iu - (iu0 + iu1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_reject_empty() {
        assert!(metrics(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn class_permutation_preserves_aggregates() {
        let mut cm = ConfusionMatrix::new(3);
        let mut v = 1;
        for t in 0..3 {
            for p in 0..3 {
                cm.add(t, p, v);
                v += 1;
            }
        }
        let m = metrics(&cm).unwrap();
        // permute classes by the cycle (0 1 2)
        let perm = [1usize, 2, 0];
        let mut pm = ConfusionMatrix::new(3);
        for t in 0..3 {
            for p in 0..3 {
                pm.add(perm[t], perm[p], cm.count(t, p));
            }
        }
        let m2 = metrics(&pm).unwrap();
        assert!((m.pixel_acc - m2.pixel_acc).abs() < 1e-12);
        assert!((m.mean_acc - m2.mean_acc).abs() < 1e-12);
        assert!((m.mean_iu - m2.mean_iu).abs() < 1e-12);
        assert!((m.fw_iu - m2.fw_iu).abs() < 1e-12);
    }

    #[test]
    fn merged_matrices_accumulate() {
        let mut a = ConfusionMatrix::new(2);
        a.add(0, 0, 3);
        a.add(1, 0, 1);
        let mut b = ConfusionMatrix::new(2);
        b.add(1, 1, 2);
        b.add(0, 1, 1);
        let mut merged = a.clone();
        merged.merge(&b).unwrap();
        assert_eq!(merged.total(), a.total() + b.total());
        assert_eq!(merged.count(1, 1), 2);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let samples = generate(&spec, 4).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(samples.len(), loaded.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a, b);
        }
    }
}
