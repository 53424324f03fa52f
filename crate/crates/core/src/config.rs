//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, dotted prefixes group keys
//! (`train.base_lr = 0.01`). Every key has a default and unknown keys are a
//! hard error. Serialization is deterministic and reparses to the same value.

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, FusionMode, NetSpec};
use crate::optim::{LrPolicy, TrainConfig};
use crate::rfprobe::ProbeConfig;
use crate::segdata::SceneSpec;

/// Everything a subcommand needs: dataset, network, training, probe settings
/// and output locations.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: String,
    pub data_dir: String,
    pub train_count: usize,
    pub val_count: usize,
    pub scene: SceneSpec,
    pub net: NetSpec,
    /// Seed for parameter initialization.
    pub net_seed: u64,
    pub train: TrainConfig,
    pub batch_size: usize,
    /// Validation mean-IU is logged every this many iterations (0 = never).
    pub eval_interval: usize,
    pub probe: ProbeConfig,
    pub probe_layer: usize,
    pub probe_channel: usize,
    /// Probed unit coordinates; negative means the layer-output center.
    pub probe_row: i64,
    pub probe_col: i64,
    /// Side length of the synthetic probe input image.
    pub probe_input_size: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            out_dir: "out".into(),
            data_dir: "data".into(),
            train_count: 200,
            val_count: 50,
            scene: SceneSpec::default(),
            net: NetSpec::default(),
            net_seed: 42,
            train: TrainConfig::default(),
            batch_size: 4,
            eval_interval: 200,
            probe: ProbeConfig::default(),
            probe_layer: 3,
            probe_channel: 0,
            probe_row: -1,
            probe_col: -1,
            probe_input_size: 64,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value '{v}' for key '{key}' (want true/false)"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn fmt_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Trunk block syntax: `channels:kernel:stride:pad`, comma-separated.
fn parse_trunk(v: &str) -> Result<Vec<ConvSpec>> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|block| {
            let parts: Vec<&str> = block.trim().split(':').collect();
            if parts.len() != 4 {
                return Err(Error::Config(format!(
                    "bad trunk block '{block}' (want channels:kernel:stride:pad)"
                )));
            }
            Ok(ConvSpec {
                out_channels: parse_num("net.trunk", parts[0])?,
                kernel: parse_num("net.trunk", parts[1])?,
                stride: parse_num("net.trunk", parts[2])?,
                pad: parse_num("net.trunk", parts[3])?,
            })
        })
        .collect()
}

fn fmt_trunk(trunk: &[ConvSpec]) -> String {
    trunk
        .iter()
        .map(|b| format!("{}:{}:{}:{}", b.out_channels, b.kernel, b.stride, b.pad))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.net.classes != self.scene.num_classes {
            return Err(Error::Config(format!(
                "net.classes {} != scene.num_classes {}",
                self.net.classes, self.scene.num_classes
            )));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "out.dir" => self.out_dir = v.to_string(),
            "data.dir" => self.data_dir = v.to_string(),
            "data.train_count" => self.train_count = parse_num(key, v)?,
            "data.val_count" => self.val_count = parse_num(key, v)?,

            "scene.image_size" => self.scene.image_size = parse_num(key, v)?,
            "scene.num_classes" => self.scene.num_classes = parse_num(key, v)?,
            "scene.shapes_min" => self.scene.shapes_min = parse_num(key, v)?,
            "scene.shapes_max" => self.scene.shapes_max = parse_num(key, v)?,
            "scene.shape_size_min" => self.scene.shape_size_min = parse_num(key, v)?,
            "scene.shape_size_max" => self.scene.shape_size_max = parse_num(key, v)?,
            "scene.cue_strength" => self.scene.cue_strength = parse_num(key, v)?,
            "scene.noise" => self.scene.noise = parse_num(key, v)?,
            "scene.seed" => self.scene.seed = parse_num(key, v)?,

            "net.in_channels" => self.net.in_channels = parse_num(key, v)?,
            "net.trunk" => self.net.trunk = parse_trunk(v)?,
            "net.classes" => self.net.classes = parse_num(key, v)?,
            "net.fusion" => self.net.fusion = FusionMode::parse(v)?,
            "net.context" => self.net.context_enabled = parse_bool(key, v)?,
            "net.normalize" => self.net.fusion_normalize = parse_bool(key, v)?,
            "net.taps" => self.net.taps = parse_list(key, v)?,
            "net.branch_scales" => self.net.branch_scales = parse_list(key, v)?,
            "net.late_weights" => self.net.late_weights = parse_list(key, v)?,
            "net.seed" => self.net_seed = parse_num(key, v)?,

            "train.base_lr" => self.train.base_lr = parse_num(key, v)?,
            "train.momentum" => self.train.momentum = parse_num(key, v)?,
            "train.policy" => self.train.policy = LrPolicy::parse(v)?,
            "train.power" => self.train.power = parse_num(key, v)?,
            "train.max_iter" => self.train.max_iter = parse_num(key, v)?,
            "train.step_size" => self.train.step_size = parse_num(key, v)?,
            "train.step_gamma" => self.train.step_gamma = parse_num(key, v)?,
            "train.accum_steps" => self.train.accum_steps = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.eval_interval" => self.eval_interval = parse_num(key, v)?,

            "probe.patch" => self.probe.patch = parse_num(key, v)?,
            "probe.stride" => self.probe.stride = parse_num(key, v)?,
            "probe.trials" => self.probe.trials = parse_num(key, v)?,
            "probe.threshold_fraction" => self.probe.threshold_fraction = parse_num(key, v)?,
            "probe.seed" => self.probe.seed = parse_num(key, v)?,
            "probe.layer" => self.probe_layer = parse_num(key, v)?,
            "probe.channel" => self.probe_channel = parse_num(key, v)?,
            "probe.row" => self.probe_row = parse_num(key, v)?,
            "probe.col" => self.probe_col = parse_num(key, v)?,
            "probe.input_size" => self.probe_input_size = parse_num(key, v)?,

            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("out.dir", self.out_dir.clone());
        kv("data.dir", self.data_dir.clone());
        kv("data.train_count", self.train_count.to_string());
        kv("data.val_count", self.val_count.to_string());

        kv("scene.image_size", self.scene.image_size.to_string());
        kv("scene.num_classes", self.scene.num_classes.to_string());
        kv("scene.shapes_min", self.scene.shapes_min.to_string());
        kv("scene.shapes_max", self.scene.shapes_max.to_string());
        kv("scene.shape_size_min", self.scene.shape_size_min.to_string());
        kv("scene.shape_size_max", self.scene.shape_size_max.to_string());
        kv("scene.cue_strength", self.scene.cue_strength.to_string());
        kv("scene.noise", self.scene.noise.to_string());
        kv("scene.seed", self.scene.seed.to_string());

        kv("net.in_channels", self.net.in_channels.to_string());
        kv("net.trunk", fmt_trunk(&self.net.trunk));
        kv("net.classes", self.net.classes.to_string());
        kv("net.fusion", self.net.fusion.as_str().to_string());
        kv("net.context", self.net.context_enabled.to_string());
        kv("net.normalize", self.net.fusion_normalize.to_string());
        kv("net.taps", fmt_list(&self.net.taps));
        kv("net.branch_scales", fmt_list(&self.net.branch_scales));
        kv("net.late_weights", fmt_list(&self.net.late_weights));
        kv("net.seed", self.net_seed.to_string());

        kv("train.base_lr", self.train.base_lr.to_string());
        kv("train.momentum", self.train.momentum.to_string());
        kv("train.policy", self.train.policy.as_str().to_string());
        kv("train.power", self.train.power.to_string());
        kv("train.max_iter", self.train.max_iter.to_string());
        kv("train.step_size", self.train.step_size.to_string());
        kv("train.step_gamma", self.train.step_gamma.to_string());
        kv("train.accum_steps", self.train.accum_steps.to_string());
        kv("train.weight_decay", self.train.weight_decay.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.eval_interval", self.eval_interval.to_string());

        kv("probe.patch", self.probe.patch.to_string());
        kv("probe.stride", self.probe.stride.to_string());
        kv("probe.trials", self.probe.trials.to_string());
        kv(
            "probe.threshold_fraction",
            self.probe.threshold_fraction.to_string(),
        );
        kv("probe.seed", self.probe.seed.to_string());
        kv("probe.layer", self.probe_layer.to_string());
        kv("probe.channel", self.probe_channel.to_string());
        kv("probe.row", self.probe_row.to_string());
        kv("probe.col", self.probe_col.to_string());
        kv("probe.input_size", self.probe_input_size.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train_count, 200);
        assert_eq!(cfg.val_count, 50);
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let text = "\
# run with late fusion
net.fusion = late
net.taps = 1,3
net.branch_scales = 1,100
net.late_weights = 1,0.5,2
train.base_lr = 0.02   # inline comment
train.policy = step
probe.row = -1
";
        let once = RunConfig::parse(text).unwrap();
        let ser = once.serialize();
        let twice = RunConfig::parse(&ser).unwrap();
        assert_eq!(once, twice);
        assert_eq!(ser, twice.serialize());
    }

    #[test]
    fn default_serialization_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let err = RunConfig::parse("train.base_lrr = 0.1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("train.base_lr = fast").is_err());
        assert!(RunConfig::parse("net.context = yes").is_err());
        assert!(RunConfig::parse("net.trunk = 16:3:1").is_err());
        assert!(RunConfig::parse("no equals sign here").is_err());
    }

    #[test]
    fn trunk_syntax_parses() {
        let cfg = RunConfig::parse("net.trunk = 8:3:1:1,16:5:2:0\nnet.taps = 1\n").unwrap();
        assert_eq!(cfg.net.trunk.len(), 2);
        assert_eq!(cfg.net.trunk[1].kernel, 5);
        assert_eq!(cfg.net.trunk[1].stride, 2);
        assert_eq!(cfg.net.trunk[1].pad, 0);
    }

    #[test]
    fn cross_field_validation() {
        // taps out of range for a 1-block trunk
        assert!(RunConfig::parse("net.trunk = 8:3:1:1\n").is_err());
        // class count must match the scene
        assert!(RunConfig::parse("net.classes = 3").is_err());
    }

    #[test]
    fn empty_list_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.net.fusion = FusionMode::None;
        cfg.net.taps.clear();
        cfg.net.branch_scales.clear();
        let re = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(re, cfg);
    }
}
