//! Network assembly and end-to-end forward/backward.
//!
//! A network is a stride-1 conv/relu trunk with an optional global-context
//! branch and early or late fusion of tapped feature maps, each branch
//! optionally passed through a norm-scale layer before combination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    global_context_backward, global_context_forward, softmax_xent_per_pixel, Conv2d, NormScale,
    Param, Relu,
};
use crate::tensor::{LabelMap, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    None,
    Early,
    Late,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "none" => Ok(FusionMode::None),
            "early" => Ok(FusionMode::Early),
            "late" => Ok(FusionMode::Late),
            other => Err(Error::Config(format!("unknown fusion mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
        }
    }
}

/// One trunk convolution block (conv + relu).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn k3p1(out_channels: usize) -> ConvSpec {
        ConvSpec {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub in_channels: usize,
    pub trunk: Vec<ConvSpec>,
    pub classes: usize,
    pub fusion: FusionMode,
    pub context_enabled: bool,
    pub fusion_normalize: bool,
    /// Trunk block indices whose feature maps feed the fusion head.
    pub taps: Vec<usize>,
    /// Fixed multiplier applied to each tapped feature map, to emulate
    /// branches whose activations differ by orders of magnitude.
    pub branch_scales: Vec<f32>,
    /// Late-fusion merge weights, one per branch (taps then context).
    pub late_weights: Vec<f32>,
}

impl Default for NetSpec {
    fn default() -> NetSpec {
        NetSpec {
            in_channels: 3,
            trunk: vec![
                ConvSpec::k3p1(16),
                ConvSpec::k3p1(16),
                ConvSpec::k3p1(32),
                ConvSpec::k3p1(32),
            ],
            classes: 5,
            fusion: FusionMode::Early,
            context_enabled: true,
            fusion_normalize: true,
            taps: vec![3],
            branch_scales: vec![1.0],
            late_weights: vec![1.0, 1.0],
        }
    }
}

impl NetSpec {
    pub fn num_branches(&self) -> usize {
        self.taps.len() + usize::from(self.context_enabled)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() {
            return Err(Error::Config("trunk must have at least one block".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.fusion != FusionMode::None {
            if self.taps.is_empty() && !self.context_enabled {
                return Err(Error::Config("fusion head has no branches".into()));
            }
            for &t in &self.taps {
                if t >= self.trunk.len() {
                    return Err(Error::Config(format!(
                        "tap {t} out of range for {}-block trunk",
                        self.trunk.len()
                    )));
                }
            }
            if self.branch_scales.len() != self.taps.len() {
                return Err(Error::Config(format!(
                    "branch_scales has {} entries for {} taps",
                    self.branch_scales.len(),
                    self.taps.len()
                )));
            }
            if self.fusion == FusionMode::Late && self.late_weights.len() != self.num_branches() {
                return Err(Error::Config(format!(
                    "late_weights has {} entries for {} branches",
                    self.late_weights.len(),
                    self.num_branches()
                )));
            }
        }
        for cs in &self.trunk {
            if cs.out_channels == 0 || cs.kernel == 0 || cs.stride == 0 {
                return Err(Error::Config("trunk block extents must be positive".into()));
            }
        }
        Ok(())
    }

    /// Channel count of each fusion branch: taps in order, then context.
    pub fn branch_channels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .taps
            .iter()
            .map(|&t| self.trunk[t].out_channels)
            .collect();
        if self.context_enabled {
            out.push(self.trunk.last().unwrap().out_channels);
        }
        out
    }
}

struct Block {
    conv: Conv2d,
    relu: Relu,
}

pub struct Network {
    pub spec: NetSpec,
    blocks: Vec<Block>,
    norms: Vec<Option<NormScale>>, // one slot per branch
    classifiers: Vec<Conv2d>,
    fwd_branches: Option<Vec<usize>>, // branch channel counts at last forward
}

fn xavier_conv(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    let fan_out = (c_out * k * k) as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt() as f32;
    let shape = Shape::new(c_out, c_in, k, k).unwrap();
    let data = (0..shape.len())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn new_conv(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize, stride: usize, pad: usize) -> Conv2d {
    let weight = xavier_conv(rng, c_out, c_in, k);
    let bias = Tensor::zeros(Shape::new(1, c_out, 1, 1).unwrap());
    Conv2d::new(weight, bias, stride, pad).unwrap()
}

/// Build a network with xavier-initialized convolutions, zero biases and
/// gamma = 10; deterministic for a fixed seed.
pub fn build(spec: &NetSpec, rng_seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut blocks = Vec::new();
    let mut c_in = spec.in_channels;
    for cs in &spec.trunk {
        blocks.push(Block {
            conv: new_conv(&mut rng, cs.out_channels, c_in, cs.kernel, cs.stride, cs.pad),
            relu: Relu::new(),
        });
        c_in = cs.out_channels;
    }

    let branch_channels = spec.branch_channels();
    let norms: Vec<Option<NormScale>> = if spec.fusion != FusionMode::None && spec.fusion_normalize
    {
        branch_channels.iter().map(|&c| Some(NormScale::new(c))).collect()
    } else {
        vec![None; branch_channels.len()]
    };

    let last_c = spec.trunk.last().unwrap().out_channels;
    let classifiers = match spec.fusion {
        FusionMode::None => vec![new_conv(&mut rng, spec.classes, last_c, 1, 1, 0)],
        FusionMode::Early => {
            let total: usize = branch_channels.iter().sum();
            vec![new_conv(&mut rng, spec.classes, total, 1, 1, 0)]
        }
        FusionMode::Late => branch_channels
            .iter()
            .map(|&c| new_conv(&mut rng, spec.classes, c, 1, 1, 0))
            .collect(),
    };

    Ok(Network {
        spec: spec.clone(),
        blocks,
        norms,
        classifiers,
        fwd_branches: None,
    })
}

impl Network {
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("trunk{i}.weight"), &b.conv.weight);
            f(&format!("trunk{i}.bias"), &b.conv.bias);
        }
        for (i, n) in self.norms.iter().enumerate() {
            if let Some(n) = n {
                f(&format!("norm{i}.gamma"), &n.gamma);
            }
        }
        for (i, c) in self.classifiers.iter().enumerate() {
            f(&format!("cls{i}.weight"), &c.weight);
            f(&format!("cls{i}.bias"), &c.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("trunk{i}.weight"), &mut b.conv.weight);
            f(&format!("trunk{i}.bias"), &mut b.conv.bias);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            if let Some(n) = n {
                f(&format!("norm{i}.gamma"), &mut n.gamma);
            }
        }
        for (i, c) in self.classifiers.iter_mut().enumerate() {
            f(&format!("cls{i}.weight"), &mut c.weight);
            f(&format!("cls{i}.bias"), &mut c.bias);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.data.shape().len());
        n
    }

    /// Gamma tensor of the norm-scale layer on `branch`, when present.
    pub fn norm_gamma_mut(&mut self, branch: usize) -> Option<&mut Param> {
        self.norms.get_mut(branch)?.as_mut().map(|n| &mut n.gamma)
    }

    /// Trunk activations up to and including `layer_index`, computed without
    /// touching any backward caches. Used by the receptive-field probe.
    pub fn trunk_activation(&self, images: &Tensor, layer_index: usize) -> Result<Tensor> {
        if layer_index >= self.blocks.len() {
            return Err(Error::Argument(format!(
                "layer index {layer_index} out of range for {}-block trunk",
                self.blocks.len()
            )));
        }
        let mut cur = images.clone();
        for b in &self.blocks[..=layer_index] {
            cur = b.relu.forward_pure(&b.conv.forward_pure(&cur)?);
        }
        Ok(cur)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn trunk_conv(&self, layer_index: usize) -> &Conv2d {
        &self.blocks[layer_index].conv
    }

    pub fn trunk_specs(&self) -> Vec<ConvSpec> {
        self.spec.trunk.clone()
    }

    pub fn forward(&mut self, images: &Tensor) -> Result<Tensor> {
        if images.shape().c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.spec.in_channels,
                images.shape().c
            )));
        }
        let mut feats: Vec<Tensor> = Vec::with_capacity(self.blocks.len());
        let mut cur = images.clone();
        for b in self.blocks.iter_mut() {
            cur = b.relu.forward(&b.conv.forward(&cur)?);
            feats.push(cur.clone());
        }
        let last = feats.last().unwrap();

        if self.spec.fusion == FusionMode::None {
            self.fwd_branches = None;
            return self.classifiers[0].forward(last);
        }

        let mut branch_inputs: Vec<Tensor> = Vec::new();
        for (bi, &t) in self.spec.taps.iter().enumerate() {
            let mut f = feats[t].clone();
            f.scale(self.spec.branch_scales[bi]);
            branch_inputs.push(f);
        }
        if self.spec.context_enabled {
            branch_inputs.push(global_context_forward(last));
        }

        let mut branch_feats: Vec<Tensor> = Vec::with_capacity(branch_inputs.len());
        for (b, input) in branch_inputs.into_iter().enumerate() {
            match self.norms[b].as_mut() {
                Some(norm) => branch_feats.push(norm.forward(&input)?),
                None => branch_feats.push(input),
            }
        }
        self.fwd_branches = Some(branch_feats.iter().map(|t| t.shape().c).collect());

        match self.spec.fusion {
            FusionMode::Early => {
                let mut cat = branch_feats[0].clone();
                for bf in &branch_feats[1..] {
                    cat = Tensor::concat_channels(&cat, bf)?;
                }
                self.classifiers[0].forward(&cat)
            }
            FusionMode::Late => {
                let mut logits: Option<Tensor> = None;
                for (b, bf) in branch_feats.iter().enumerate() {
                    let mut l = self.classifiers[b].forward(bf)?;
                    l.scale(self.spec.late_weights[b]);
                    match logits.as_mut() {
                        Some(acc) => acc.add_assign(&l)?,
                        None => logits = Some(l),
                    }
                }
                Ok(logits.unwrap())
            }
            FusionMode::None => unreachable!(),
        }
    }

    /// Reverse traversal; parameter gradients accumulate into each Param.
    /// Returns the gradient with respect to the input images.
    pub fn backward(&mut self, d_logits: &Tensor) -> Result<Tensor> {
        let nblocks = self.blocks.len();
        let mut d_feats: Vec<Option<Tensor>> = vec![None; nblocks];
        let add_to = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
            match slot.as_mut() {
                Some(acc) => acc.add_assign(&t),
                None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };

        match self.spec.fusion {
            FusionMode::None => {
                let d = self.classifiers[0].backward(d_logits)?;
                add_to(&mut d_feats[nblocks - 1], d)?;
            }
            FusionMode::Early => {
                let branch_channels = self
                    .fwd_branches
                    .take()
                    .ok_or_else(|| Error::Contract("backward without forward".into()))?;
                let d_cat = self.classifiers[0].backward(d_logits)?;
                let mut offset = 0;
                for (b, &bc) in branch_channels.iter().enumerate() {
                    let d_branch = d_cat.slice_channels(offset, offset + bc)?;
                    offset += bc;
                    self.branch_backward(b, d_branch, &mut d_feats)?;
                }
            }
            FusionMode::Late => {
                let branch_channels = self
                    .fwd_branches
                    .take()
                    .ok_or_else(|| Error::Contract("backward without forward".into()))?;
                for b in 0..branch_channels.len() {
                    let mut d = d_logits.clone();
                    d.scale(self.spec.late_weights[b]);
                    let d_branch = self.classifiers[b].backward(&d)?;
                    self.branch_backward(b, d_branch, &mut d_feats)?;
                }
            }
        }

        for i in (0..nblocks).rev() {
            let d = d_feats[i]
                .take()
                .ok_or_else(|| Error::Contract("missing trunk gradient".into()))?;
            let b = &mut self.blocks[i];
            let d_conv_out = b.relu.backward(&d)?;
            let d_in = b.conv.backward(&d_conv_out)?;
            if i == 0 {
                return Ok(d_in);
            }
            match d_feats[i - 1].as_mut() {
                Some(acc) => acc.add_assign(&d_in)?,
                None => d_feats[i - 1] = Some(d_in),
            }
        }
        unreachable!("loop returns at block 0")
    }

    fn branch_backward(
        &mut self,
        b: usize,
        d_branch: Tensor,
        d_feats: &mut [Option<Tensor>],
    ) -> Result<()> {
        let d_input = match self.norms[b].as_mut() {
            Some(norm) => norm.backward(&d_branch)?,
            None => d_branch,
        };
        let nblocks = self.blocks.len();
        if b < self.spec.taps.len() {
            let mut d = d_input;
            d.scale(self.spec.branch_scales[b]);
            let t = self.spec.taps[b];
            match d_feats[t].as_mut() {
                Some(acc) => acc.add_assign(&d)?,
                None => d_feats[t] = Some(d),
            }
        } else {
            // context branch: gradient of pool-then-broadcast
            let d = global_context_backward(&d_input);
            match d_feats[nblocks - 1].as_mut() {
                Some(acc) => acc.add_assign(&d)?,
                None => d_feats[nblocks - 1] = Some(d),
            }
        }
        Ok(())
    }

    /// Forward plus normalized per-pixel softmax loss.
    pub fn loss(&mut self, images: &Tensor, labels: &LabelMap, ignore: u8) -> Result<(f64, Tensor)> {
        let logits = self.forward(images)?;
        softmax_xent_per_pixel(&logits, labels, ignore, true)
    }
}

// ---------------------------------------------------------------------------
// Independent f64 reference forward, used as the finite-difference oracle.
// Deliberately written as plain nested loops with no shared code with the
// f32 layer kernels.
// ---------------------------------------------------------------------------

pub mod reference {
    use super::{FusionMode, NetSpec};
    use crate::layers::NORM_EPS;
    use crate::tensor::{LabelMap, Shape};
    use std::collections::HashMap;

    #[derive(Clone)]
    pub struct RefTensor {
        pub shape: Shape,
        pub data: Vec<f64>,
    }

    impl RefTensor {
        pub fn zeros(shape: Shape) -> RefTensor {
            RefTensor {
                shape,
                data: vec![0.0; shape.len()],
            }
        }

        #[inline]
        fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
            self.data[self.shape.index(n, c, y, x)]
        }

        #[inline]
        fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
            let i = self.shape.index(n, c, y, x);
            self.data[i] = v;
        }
    }

    pub type RefParams = HashMap<String, (Shape, Vec<f64>)>;

    fn conv(x: &RefTensor, w: &(Shape, Vec<f64>), b: &(Shape, Vec<f64>), stride: usize, pad: usize) -> RefTensor {
        let s = x.shape;
        let (ws, wd) = w;
        let k = ws.h;
        let oh = (s.h + 2 * pad - k) / stride + 1;
        let ow = (s.w + 2 * pad - k) / stride + 1;
        let os = Shape::new(s.n, ws.n, oh, ow).unwrap();
        let mut out = RefTensor::zeros(os);
        for n in 0..s.n {
            for co in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.1[co];
                        for ci in 0..s.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize
                                    {
                                        acc += x.get(n, ci, iy as usize, ix as usize)
                                            * wd[ws.index(co, ci, ky, kx)];
                                    }
                                }
                            }
                        }
                        out.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn relu(x: &mut RefTensor) {
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    fn global_context(x: &RefTensor) -> RefTensor {
        let s = x.shape;
        let mut out = RefTensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let mut sum = 0.0;
                for y in 0..s.h {
                    for xx in 0..s.w {
                        sum += x.get(n, c, y, xx);
                    }
                }
                let mean = sum / (s.h * s.w) as f64;
                for y in 0..s.h {
                    for xx in 0..s.w {
                        out.set(n, c, y, xx, mean);
                    }
                }
            }
        }
        out
    }

    fn norm_scale(x: &RefTensor, gamma: &[f64]) -> RefTensor {
        let s = x.shape;
        let eps = NORM_EPS as f64;
        let mut out = RefTensor::zeros(s);
        for n in 0..s.n {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut acc = eps * eps;
                    for c in 0..s.c {
                        let v = x.get(n, c, y, xx);
                        acc += v * v;
                    }
                    let r = acc.sqrt();
                    for c in 0..s.c {
                        out.set(n, c, y, xx, gamma[c] * x.get(n, c, y, xx) / r);
                    }
                }
            }
        }
        out
    }

    fn concat(parts: &[RefTensor]) -> RefTensor {
        let s0 = parts[0].shape;
        let total: usize = parts.iter().map(|p| p.shape.c).sum();
        let os = Shape::new(s0.n, total, s0.h, s0.w).unwrap();
        let mut out = RefTensor::zeros(os);
        for n in 0..s0.n {
            let mut off = 0;
            for p in parts {
                for c in 0..p.shape.c {
                    for y in 0..s0.h {
                        for x in 0..s0.w {
                            out.set(n, off + c, y, x, p.get(n, c, y, x));
                        }
                    }
                }
                off += p.shape.c;
            }
        }
        out
    }

    pub fn forward(spec: &NetSpec, params: &RefParams, images: &RefTensor) -> RefTensor {
        let mut feats = Vec::new();
        let mut cur = images.clone();
        for (i, cs) in spec.trunk.iter().enumerate() {
            let w = &params[&format!("trunk{i}.weight")];
            let b = &params[&format!("trunk{i}.bias")];
            cur = conv(&cur, w, b, cs.stride, cs.pad);
            relu(&mut cur);
            feats.push(cur.clone());
        }
        let last = feats.last().unwrap();

        if spec.fusion == FusionMode::None {
            let w = &params["cls0.weight"];
            let b = &params["cls0.bias"];
            return conv(last, w, b, 1, 0);
        }

        let mut branches = Vec::new();
        for (bi, &t) in spec.taps.iter().enumerate() {
            let mut f = feats[t].clone();
            let scale = spec.branch_scales[bi] as f64;
            f.data.iter_mut().for_each(|v| *v *= scale);
            branches.push(f);
        }
        if spec.context_enabled {
            branches.push(global_context(last));
        }
        if spec.fusion_normalize {
            for (b, br) in branches.iter_mut().enumerate() {
                let gamma = &params[&format!("norm{b}.gamma")].1;
                *br = norm_scale(br, gamma);
            }
        }

        match spec.fusion {
            FusionMode::Early => {
                let cat = concat(&branches);
                conv(&cat, &params["cls0.weight"], &params["cls0.bias"], 1, 0)
            }
            FusionMode::Late => {
                let mut logits: Option<RefTensor> = None;
                for (b, br) in branches.iter().enumerate() {
                    let mut l = conv(
                        br,
                        &params[&format!("cls{b}.weight")],
                        &params[&format!("cls{b}.bias")],
                        1,
                        0,
                    );
                    let w = spec.late_weights[b] as f64;
                    l.data.iter_mut().for_each(|v| *v *= w);
                    match logits.as_mut() {
                        Some(acc) => acc
                            .data
                            .iter_mut()
                            .zip(&l.data)
                            .for_each(|(a, b)| *a += b),
                        None => logits = Some(l),
                    }
                }
                logits.unwrap()
            }
            FusionMode::None => unreachable!(),
        }
    }

    /// Mean per-pixel softmax cross-entropy over non-ignored pixels.
    pub fn loss(spec: &NetSpec, params: &RefParams, images: &RefTensor, labels: &LabelMap, ignore: u8) -> f64 {
        let logits = forward(spec, params, images);
        let s = logits.shape;
        let mut total = 0.0;
        let mut scored = 0usize;
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let label = labels.get(n, y, x);
                    if label == ignore {
                        continue;
                    }
                    scored += 1;
                    let mut maxv = f64::NEG_INFINITY;
                    for c in 0..s.c {
                        maxv = maxv.max(logits.get(n, c, y, x));
                    }
                    let mut z = 0.0;
                    for c in 0..s.c {
                        z += (logits.get(n, c, y, x) - maxv).exp();
                    }
                    total += z.ln() + maxv - logits.get(n, label as usize, y, x);
                }
            }
        }
        if scored > 0 {
            total / scored as f64
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub input_max_rel_err: f64,
    pub step: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "  {:<16} max_rel_err {:>12.3e}  ({} coords)\n",
                e.name, e.max_rel_err, e.checked
            ));
        }
        out.push_str(&format!(
            "  {:<16} max_rel_err {:>12.3e}\n",
            "input", self.input_max_rel_err
        ));
        out.push_str(&format!(
            "  step {:.1e}, tol {:.1e}: {}\n",
            self.step,
            self.tol,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        out
    }
}

const MAX_COORDS_PER_TENSOR: usize = 200;

fn subsample(len: usize) -> Vec<usize> {
    if len <= MAX_COORDS_PER_TENSOR {
        (0..len).collect()
    } else {
        (0..MAX_COORDS_PER_TENSOR)
            .map(|i| i * len / MAX_COORDS_PER_TENSOR)
            .collect()
    }
}

/// The analytic side is computed by an f32 engine, so coordinates carry an
/// absolute rounding noise around 5e-6; flooring the denominator keeps that
/// noise from registering as gradient error on near-zero coordinates while a
/// genuinely wrong gradient (error at the gradient's own scale) still trips.
const REL_ERR_FLOOR: f64 = 5e-3;

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference check of every parameter (and input) gradient against
/// the f64 reference forward.
pub fn grad_check(
    net: &mut Network,
    images: &Tensor,
    labels: &LabelMap,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    // analytic gradients
    net.zero_grads();
    let (loss0, d_logits) = net.loss(images, labels, 255)?;
    if !loss0.is_finite() {
        return Err(Error::Numerical {
            iter: 0,
            msg: "non-finite loss in grad check".into(),
        });
    }
    let d_images = net.backward(&d_logits)?;

    let mut analytic: Vec<(String, Shape, Vec<f32>)> = Vec::new();
    let mut params = reference::RefParams::new();
    net.visit_params(&mut |name, p| {
        analytic.push((name.to_string(), p.grad.shape(), p.grad.data().to_vec()));
        params.insert(
            name.to_string(),
            (p.data.shape(), p.data.iter().map(|v| v as f64).collect()),
        );
    });

    let ref_images = reference::RefTensor {
        shape: images.shape(),
        data: images.iter().map(|v| v as f64).collect(),
    };
    let spec = net.spec.clone();

    let mut entries = Vec::new();
    let mut pass = true;
    for (name, shape, grads) in &analytic {
        let coords = subsample(shape.len());
        let mut max_err: f64 = 0.0;
        for &i in &coords {
            let mut central = |h: f64| {
                let orig = params[name].1[i];
                params.get_mut(name).unwrap().1[i] = orig + h;
                let lp = reference::loss(&spec, &params, &ref_images, labels, 255);
                params.get_mut(name).unwrap().1[i] = orig - h;
                let lm = reference::loss(&spec, &params, &ref_images, labels, 255);
                params.get_mut(name).unwrap().1[i] = orig;
                (lp - lm) / (2.0 * h)
            };
            let mut err = rel_err(grads[i] as f64, central(step));
            // a relu kink inside +-step invalidates the difference quotient;
            // shrinking the step moves the quotient off the kink while still
            // exposing a genuinely wrong gradient
            for refine in [64.0, 4096.0] {
                if err < tol {
                    break;
                }
                err = err.min(rel_err(grads[i] as f64, central(step / refine)));
            }
            max_err = max_err.max(err);
        }
        if max_err >= tol {
            pass = false;
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_err,
            checked: coords.len(),
        });
    }

    let mut input_max: f64 = 0.0;
    let mut ref_images = ref_images;
    for &i in &subsample(images.shape().len()) {
        let mut central = |h: f64| {
            let orig = ref_images.data[i];
            ref_images.data[i] = orig + h;
            let lp = reference::loss(&spec, &params, &ref_images, labels, 255);
            ref_images.data[i] = orig - h;
            let lm = reference::loss(&spec, &params, &ref_images, labels, 255);
            ref_images.data[i] = orig;
            (lp - lm) / (2.0 * h)
        };
        let mut err = rel_err(d_images.data()[i] as f64, central(step));
        for refine in [64.0, 4096.0] {
            if err < tol {
                break;
            }
            err = err.min(rel_err(d_images.data()[i] as f64, central(step / refine)));
        }
        input_max = input_max.max(err);
    }
    if input_max >= tol {
        pass = false;
    }

    Ok(GradCheckReport {
        entries,
        input_max_rel_err: input_max,
        step,
        tol,
        pass,
    })
}
