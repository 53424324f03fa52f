//! Theoretical and empirical receptive fields.
//!
//! The theoretical field follows from kernel/stride/pad bookkeeping. The
//! empirical field is measured by sliding a patch of random noise across the
//! input and recording the mean absolute change of one unit's activation.
//! Probes whose patch cannot intersect the unit's dependency cone leave the
//! activation unchanged by conv locality and score exactly zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Network};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Derivation {
    Theoretical,
    Empirical,
}

/// Axis-aligned box, inclusive bounds, clipped to its domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RFBox {
    pub row_lo: usize,
    pub row_hi: usize,
    pub col_lo: usize,
    pub col_hi: usize,
    pub derivation: Derivation,
}

impl RFBox {
    fn from_unclipped(
        row_lo: isize,
        row_hi: isize,
        col_lo: isize,
        col_hi: isize,
        h: usize,
        w: usize,
        derivation: Derivation,
    ) -> RFBox {
        RFBox {
            row_lo: row_lo.clamp(0, h as isize - 1) as usize,
            row_hi: row_hi.clamp(0, h as isize - 1) as usize,
            col_lo: col_lo.clamp(0, w as isize - 1) as usize,
            col_hi: col_hi.clamp(0, w as isize - 1) as usize,
            derivation,
        }
    }

    pub fn rows(&self) -> usize {
        self.row_hi - self.row_lo + 1
    }

    pub fn cols(&self) -> usize {
        self.col_hi - self.col_lo + 1
    }

    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn center(&self) -> (usize, usize) {
        ((self.row_lo + self.row_hi) / 2, (self.col_lo + self.col_hi) / 2)
    }

    pub fn half_extent(&self) -> (usize, usize) {
        ((self.rows() - 1) / 2, (self.cols() - 1) / 2)
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            match self.derivation {
                Derivation::Theoretical => "theoretical",
                Derivation::Empirical => "empirical",
            },
            self.row_lo,
            self.row_hi,
            self.col_lo,
            self.col_hi,
            self.area()
        )
    }
}

/// Input region a layer region depends on: out [a,b] pulls in [a*s-p, b*s-p+k-1].
fn pull_back(lo: isize, hi: isize, cs: &ConvSpec) -> (isize, isize) {
    let s = cs.stride as isize;
    let p = cs.pad as isize;
    let k = cs.kernel as isize;
    (lo * s - p, hi * s - p + k - 1)
}

/// Receptive-field box of `unit` (row, col) at the output of trunk block
/// `layer_index`, clipped to the input image bounds.
pub fn theoretical_rf(
    trunk: &[ConvSpec],
    layer_index: usize,
    unit: (usize, usize),
    input_h: usize,
    input_w: usize,
) -> Result<RFBox> {
    if layer_index >= trunk.len() {
        return Err(Error::Argument(format!(
            "layer index {layer_index} out of range for {}-block trunk",
            trunk.len()
        )));
    }
    // forward extents: extents[l] is the input extent of layer l
    let mut extents = vec![(input_h as isize, input_w as isize)];
    for cs in &trunk[..=layer_index] {
        let (h, w) = *extents.last().unwrap();
        let k = cs.kernel as isize;
        let p = cs.pad as isize;
        let s = cs.stride as isize;
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Argument(format!(
                "kernel larger than padded input at some layer for {input_h}x{input_w} input"
            )));
        }
        extents.push(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1));
    }

    let (mut rlo, mut rhi) = (unit.0 as isize, unit.0 as isize);
    let (mut clo, mut chi) = (unit.1 as isize, unit.1 as isize);
    for (l, cs) in trunk[..=layer_index].iter().enumerate().rev() {
        // positions beyond a layer's real extent exist only as padding and
        // carry no input dependency; clamp before pulling back
        let (eh, ew) = extents[l + 1];
        rlo = rlo.max(0);
        rhi = rhi.min(eh - 1);
        clo = clo.max(0);
        chi = chi.min(ew - 1);
        if rlo > rhi || clo > chi {
            return Err(Error::Argument(format!(
                "receptive field of unit {unit:?} lies entirely in padding"
            )));
        }
        (rlo, rhi) = pull_back(rlo, rhi, cs);
        (clo, chi) = pull_back(clo, chi, cs);
    }
    if rhi < 0 || rlo >= input_h as isize || chi < 0 || clo >= input_w as isize {
        return Err(Error::Argument(format!(
            "receptive field of unit {unit:?} lies entirely in padding"
        )));
    }
    Ok(RFBox::from_unclipped(
        rlo,
        rhi,
        clo,
        chi,
        input_h,
        input_w,
        Derivation::Theoretical,
    ))
}

/// Size of the receptive field (unclipped) via the rf/jump recurrence.
pub fn theoretical_rf_size(trunk: &[ConvSpec], layer_index: usize) -> usize {
    let mut rf = 1usize;
    let mut jump = 1usize;
    for cs in &trunk[..=layer_index] {
        rf += (cs.kernel - 1) * jump;
        jump *= cs.stride;
    }
    rf
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub patch: usize,
    pub stride: usize,
    pub trials: usize,
    pub threshold_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> ProbeConfig {
        ProbeConfig {
            patch: 3,
            stride: 1,
            trials: 8,
            threshold_fraction: 0.05,
            seed: 99,
        }
    }
}

/// Grid of mean absolute activation changes, one per probe position.
#[derive(Clone, Debug)]
pub struct SensitivityMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub stride: usize,
    pub trials: usize,
    pub values: Vec<f64>,
}

impl SensitivityMap {
    #[inline]
    pub fn get(&self, gy: usize, gx: usize) -> f64 {
        self.values[gy * self.grid_w + gx]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// 16-bit graymap, values scaled so the maximum maps to 65535.
    pub fn to_pgm16(&self) -> Vec<u16> {
        let max = self.max();
        if max <= 0.0 {
            return vec![0; self.values.len()];
        }
        self.values
            .iter()
            .map(|v| ((v / max) * 65535.0).round() as u16)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,value\n");
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                out.push_str(&format!("{gy},{gx},{}\n", self.get(gy, gx)));
            }
        }
        out
    }
}

/// Naive valid-mode convolution used by the cone evaluator; the crop already
/// materializes any padding.
fn conv_crop(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let s = x.shape();
    let ws = weight.shape();
    let k = ws.h;
    let oh = (s.h - k) / stride + 1;
    let ow = (s.w - k) / stride + 1;
    let os = Shape::new(1, ws.n, oh, ow).unwrap();
    let mut out = Tensor::zeros(os);
    for co in 0..ws.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[co];
                for ci in 0..s.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x.get(0, ci, oy * stride + ky, ox * stride + kx)
                                * weight.get(co, ci, ky, kx);
                        }
                    }
                }
                out.set(0, co, oy, ox, acc);
            }
        }
    }
    out
}

fn relu_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Activation of a single trunk unit, computed on the unit's dependency cone
/// only. `patch_noise`, when given, is (row0, col0, values) in input
/// coordinates, overriding image pixels where it overlaps.
fn cone_activation(
    net: &Network,
    image: &Tensor,
    regions: &[(isize, isize, isize, isize)],
    layer_index: usize,
    channel: usize,
    patch_noise: Option<(isize, isize, &Tensor)>,
) -> f32 {
    let s = image.shape();
    let (rlo, rhi, clo, chi) = regions[0];
    let crop_h = (rhi - rlo + 1) as usize;
    let crop_w = (chi - clo + 1) as usize;
    let mut crop = Tensor::zeros(Shape::new(1, s.c, crop_h, crop_w).unwrap());
    for c in 0..s.c {
        for y in 0..crop_h {
            let iy = rlo + y as isize;
            if iy < 0 || iy >= s.h as isize {
                continue;
            }
            for x in 0..crop_w {
                let ix = clo + x as isize;
                if ix < 0 || ix >= s.w as isize {
                    continue;
                }
                let mut v = image.get(0, c, iy as usize, ix as usize);
                if let Some((py, px, noise)) = patch_noise {
                    let ns = noise.shape();
                    let dy = iy - py;
                    let dx = ix - px;
                    if dy >= 0 && dy < ns.h as isize && dx >= 0 && dx < ns.w as isize {
                        v = noise.get(0, c, dy as usize, dx as usize);
                    }
                }
                crop.set(0, c, y, x, v);
            }
        }
    }

    // true output extents per layer, for masking virtual positions
    let trunk = net.trunk_specs();
    let mut ext = (s.h, s.w);
    let mut extents = Vec::with_capacity(layer_index + 1);
    for cs in &trunk[..=layer_index] {
        ext = (
            (ext.0 + 2 * cs.pad - cs.kernel) / cs.stride + 1,
            (ext.1 + 2 * cs.pad - cs.kernel) / cs.stride + 1,
        );
        extents.push(ext);
    }

    let mut cur = crop;
    for l in 0..=layer_index {
        let conv = net.trunk_conv(l);
        cur = conv_crop(&cur, &conv.weight.data, &conv.bias.data, conv.stride);
        relu_inplace(&mut cur);
        // positions outside the layer's real extent exist only as padding
        // for the next conv and must read zero, not a virtual activation
        let (rlo, _, clo, _) = regions[l + 1];
        let cs = cur.shape();
        let (eh, ew) = extents[l];
        for y in 0..cs.h {
            let oy = rlo + y as isize;
            for x in 0..cs.w {
                let ox = clo + x as isize;
                if oy < 0 || oy >= eh as isize || ox < 0 || ox >= ew as isize {
                    for c in 0..cs.c {
                        cur.set(0, c, y, x, 0.0);
                    }
                }
            }
        }
    }
    cur.get(0, channel, 0, 0)
}

/// Dependency regions per level: regions[0] is the input-space region,
/// regions[l+1] the output region of block l... stored input-first.
fn cone_regions(trunk: &[ConvSpec], layer_index: usize, unit: (usize, usize)) -> Vec<(isize, isize, isize, isize)> {
    let mut regions = vec![(
        unit.0 as isize,
        unit.0 as isize,
        unit.1 as isize,
        unit.1 as isize,
    )];
    for cs in trunk[..=layer_index].iter().rev() {
        let &(rlo, rhi, clo, chi) = regions.last().unwrap();
        let (nrlo, nrhi) = pull_back(rlo, rhi, cs);
        let (nclo, nchi) = pull_back(clo, chi, cs);
        regions.push((nrlo, nrhi, nclo, nchi));
    }
    regions.reverse();
    regions
}

/// Slide a noise patch over the image and record the mean absolute change of
/// the chosen unit's activation, averaged over `cfg.trials` noise draws.
pub fn empirical_rf(
    net: &Network,
    image: &Tensor,
    layer_index: usize,
    unit: (usize, usize, usize), // (channel, row, col)
    cfg: &ProbeConfig,
) -> Result<SensitivityMap> {
    let s = image.shape();
    if cfg.trials == 0 {
        return Err(Error::Argument("trials must be >= 1".into()));
    }
    if cfg.patch == 0 || cfg.stride == 0 {
        return Err(Error::Argument("patch and stride must be positive".into()));
    }
    if cfg.patch > s.h || cfg.patch > s.w {
        return Err(Error::Argument(format!(
            "patch {} larger than image {}x{}",
            cfg.patch, s.h, s.w
        )));
    }
    let trunk = net.trunk_specs();
    if layer_index >= trunk.len() {
        return Err(Error::Argument(format!(
            "layer index {layer_index} out of range"
        )));
    }
    let (channel, row, col) = unit;
    // validate unit coordinates against the layer's output extent
    let mut ext_h = s.h;
    let mut ext_w = s.w;
    for cs in &trunk[..=layer_index] {
        ext_h = (ext_h + 2 * cs.pad - cs.kernel) / cs.stride + 1;
        ext_w = (ext_w + 2 * cs.pad - cs.kernel) / cs.stride + 1;
    }
    if row >= ext_h || col >= ext_w || channel >= trunk[layer_index].out_channels {
        return Err(Error::Argument(format!(
            "unit ({channel},{row},{col}) out of range for layer {layer_index}"
        )));
    }

    let regions = cone_regions(&trunk, layer_index, (row, col));
    let baseline = cone_activation(net, image, &regions, layer_index, channel, None);

    // noise values drawn uniformly over the image's value range
    let mut vmin = f32::INFINITY;
    let mut vmax = f32::NEG_INFINITY;
    for v in image.iter() {
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    if !(vmax > vmin) {
        vmin = 0.0;
        vmax = 1.0;
    }

    let grid_h = (s.h - cfg.patch) / cfg.stride + 1;
    let grid_w = (s.w - cfg.patch) / cfg.stride + 1;
    let mut values = vec![0.0f64; grid_h * grid_w];
    let (in_rlo, in_rhi, in_clo, in_chi) = regions[0];

    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let py = (gy * cfg.stride) as isize;
            let px = (gx * cfg.stride) as isize;
            let p = cfg.patch as isize;
            // patch disjoint from the dependency cone cannot affect the unit
            if py + p - 1 < in_rlo || py > in_rhi || px + p - 1 < in_clo || px > in_chi {
                continue;
            }
            let pos_idx = (gy * grid_w + gx) as u64;
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(pos_idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            let mut acc = 0.0f64;
            for _ in 0..cfg.trials {
                let mut noise =
                    Tensor::zeros(Shape::new(1, s.c, cfg.patch, cfg.patch).unwrap());
                for v in noise.data_mut().iter_mut() {
                    *v = rng.gen_range(vmin..=vmax);
                }
                let act = cone_activation(
                    net,
                    image,
                    &regions,
                    layer_index,
                    channel,
                    Some((py, px, &noise)),
                );
                acc += (act as f64 - baseline as f64).abs();
            }
            values[gy * grid_w + gx] = acc / cfg.trials as f64;
        }
    }

    Ok(SensitivityMap {
        grid_h,
        grid_w,
        patch: cfg.patch,
        stride: cfg.stride,
        trials: cfg.trials,
        values,
    })
}

/// Tightest box over probe positions whose sensitivity reaches
/// `threshold_fraction` of the maximum. `None` when the map is all zero.
pub fn empirical_box(map: &SensitivityMap, threshold_fraction: f64) -> Result<Option<RFBox>> {
    if !(0.0 < threshold_fraction && threshold_fraction < 1.0) {
        return Err(Error::Argument(
            "threshold_fraction must be in (0, 1)".into(),
        ));
    }
    let max = map.max();
    if max <= 0.0 {
        return Ok(None);
    }
    let cut = threshold_fraction * max;
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize);
    let mut any = false;
    for gy in 0..map.grid_h {
        for gx in 0..map.grid_w {
            if map.get(gy, gx) >= cut {
                any = true;
                lo = (lo.0.min(gy), lo.1.min(gx));
                hi = (hi.0.max(gy), hi.1.max(gx));
            }
        }
    }
    debug_assert!(any);
    Ok(Some(RFBox {
        row_lo: lo.0,
        row_hi: hi.0,
        col_lo: lo.1,
        col_hi: hi.1,
        derivation: Derivation::Empirical,
    }))
}

/// Pixel-space estimate of the empirical receptive field. The support box
/// from `empirical_box` is in probe-position (patch top-left) coordinates,
/// and a patch at position g covers input pixels [g·stride, g·stride+patch−1],
/// so the support's low edges overshoot the pixel support by up to patch−1.
/// Scaling to input coordinates and eroding the low edges inverts that
/// dilation; on a stride-1 linear net the result is the exact pixel box.
pub fn empirical_pixel_box(
    map: &SensitivityMap,
    threshold_fraction: f64,
) -> Result<Option<RFBox>> {
    let Some(b) = empirical_box(map, threshold_fraction)? else {
        return Ok(None);
    };
    let row_hi = b.row_hi * map.stride;
    let col_hi = b.col_hi * map.stride;
    Ok(Some(RFBox {
        row_lo: (b.row_lo * map.stride + map.patch - 1).min(row_hi),
        row_hi,
        col_lo: (b.col_lo * map.stride + map.patch - 1).min(col_hi),
        col_hi,
        derivation: Derivation::Empirical,
    }))
}
