//! SGD with momentum, "poly" and "step" learning-rate policies, and
//! gradient accumulation over micro-batches.

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrPolicy {
    Step,
    Poly,
}

impl LrPolicy {
    pub fn parse(s: &str) -> Result<LrPolicy> {
        match s {
            "step" => Ok(LrPolicy::Step),
            "poly" => Ok(LrPolicy::Poly),
            other => Err(Error::Config(format!("unknown lr policy '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LrPolicy::Step => "step",
            LrPolicy::Poly => "poly",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub policy: LrPolicy,
    pub power: f64,
    pub max_iter: usize,
    pub step_size: usize,
    pub step_gamma: f64,
    pub accum_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            policy: LrPolicy::Poly,
            power: 0.9,
            max_iter: 2000,
            // the paper never gives step-policy constants; these are ours
            step_size: 2000 / 3,
            step_gamma: 0.1,
            accum_steps: 1,
            weight_decay: 5e-4,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.policy == LrPolicy::Poly && self.power <= 0.0 {
            return Err(Error::Config("poly policy requires power > 0".into()));
        }
        if self.policy == LrPolicy::Step {
            if self.step_size == 0 {
                return Err(Error::Config("step policy requires step_size > 0".into()));
            }
            if !(0.0..=1.0).contains(&self.step_gamma) || self.step_gamma == 0.0 {
                return Err(Error::Config("step_gamma must be in (0,1]".into()));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        if self.accum_steps == 0 {
            return Err(Error::Config("accum_steps must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Learning rate at `iter` per the configured policy.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::Argument(format!(
            "iter {} exceeds max_iter {}",
            iter, cfg.max_iter
        )));
    }
    Ok(match cfg.policy {
        LrPolicy::Poly => {
            let frac = 1.0 - iter as f64 / cfg.max_iter as f64;
            cfg.base_lr * frac.powf(cfg.power)
        }
        LrPolicy::Step => cfg.base_lr * cfg.step_gamma.powi((iter / cfg.step_size) as i32),
    })
}

/// Momentum buffers plus iteration/micro-batch bookkeeping for one network.
pub struct Optimizer {
    velocities: Vec<Tensor>,
    iter: usize,
    micro_batches: usize,
}

impl Optimizer {
    pub fn new(net: &Network) -> Optimizer {
        let mut velocities = Vec::new();
        net.visit_params(&mut |_, p| velocities.push(Tensor::zeros(p.data.shape())));
        Optimizer {
            velocities,
            iter: 0,
            micro_batches: 0,
        }
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    /// Record that one micro-batch backward pass has accumulated into the
    /// network's parameter gradients.
    pub fn note_microbatch(&mut self) {
        self.micro_batches += 1;
    }

    /// Heavy-ball update: v <- m*v + lr*(g + wd*p); p <- p - v.
    ///
    /// Gradients in the network are the sum over `accum_steps` micro-batches
    /// and are averaged here. The iteration counter advances once per call.
    pub fn step(&mut self, net: &mut Network, cfg: &TrainConfig) -> Result<()> {
        if self.micro_batches != cfg.accum_steps {
            return Err(Error::Contract(format!(
                "step after {} micro-batches, expected {}",
                self.micro_batches, cfg.accum_steps
            )));
        }
        let lr = lr_at(cfg, self.iter.min(cfg.max_iter))?;
        let inv_accum = 1.0 / cfg.accum_steps as f32;
        let m = cfg.momentum as f32;
        let wd = cfg.weight_decay as f32;
        let mut idx = 0;
        let mut failure: Option<Error> = None;
        net.visit_params_mut(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            let v = &mut self.velocities[idx];
            idx += 1;
            for ((pv, gv), vv) in p
                .data
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(v.data_mut().iter_mut())
            {
                let g = gv * inv_accum;
                if !g.is_finite() {
                    failure = Some(Error::Numerical {
                        iter: self.iter,
                        msg: format!("non-finite gradient in parameter '{name}'"),
                    });
                    return;
                }
                *vv = m * *vv + (lr as f32) * (g + wd * *pv);
                *pv -= *vv;
            }
            p.zero_grad();
        });
        if let Some(e) = failure {
            return Err(e);
        }
        self.micro_batches = 0;
        self.iter += 1;
        Ok(())
    }
}

/// Running mean of gradient contributions for one accumulation cycle.
pub struct GradAccumulator {
    sum: Tensor,
    contributed: usize,
    target: usize,
}

impl GradAccumulator {
    pub fn new(shape: crate::tensor::Shape, accum_steps: usize) -> GradAccumulator {
        GradAccumulator {
            sum: Tensor::zeros(shape),
            contributed: 0,
            target: accum_steps.max(1),
        }
    }

    pub fn add(&mut self, grad: &Tensor) -> Result<()> {
        if self.contributed >= self.target {
            return Err(Error::Contract(format!(
                "more than {} accumulation contributions",
                self.target
            )));
        }
        self.sum.add_assign(grad)?;
        self.contributed += 1;
        Ok(())
    }

    /// The averaged gradient; errors if fewer than `accum_steps` contributions arrived.
    pub fn finish(mut self) -> Result<Tensor> {
        if self.contributed != self.target {
            return Err(Error::Contract(format!(
                "finish after {} of {} contributions",
                self.contributed, self.target
            )));
        }
        self.sum.scale(1.0 / self.target as f32);
        Ok(self.sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn cfg(policy: LrPolicy) -> TrainConfig {
        TrainConfig {
            base_lr: 1.0,
            policy,
            power: 0.9,
            max_iter: 100,
            step_size: 30,
            step_gamma: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn poly_endpoints() {
        let c = cfg(LrPolicy::Poly);
        assert_eq!(lr_at(&c, 0).unwrap(), 1.0);
        assert_eq!(lr_at(&c, 100).unwrap(), 0.0);
        let mid = lr_at(&c, 50).unwrap();
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 0.53589).abs() < 1e-4);
    }

    #[test]
    fn step_policy_decays() {
        let c = cfg(LrPolicy::Step);
        assert_eq!(lr_at(&c, 0).unwrap(), 1.0);
        assert!((lr_at(&c, 30).unwrap() - 0.1).abs() < 1e-12);
        assert!((lr_at(&c, 65).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn lr_rejects_out_of_range_iter() {
        let c = cfg(LrPolicy::Poly);
        assert!(lr_at(&c, 101).is_err());
    }

    #[test]
    fn lr_non_increasing() {
        for policy in [LrPolicy::Poly, LrPolicy::Step] {
            let c = cfg(policy);
            let mut prev = f64::INFINITY;
            for it in 0..=c.max_iter {
                let lr = lr_at(&c, it).unwrap();
                assert!(lr <= prev + 1e-15, "{policy:?} increased at {it}");
                assert!(lr >= 0.0);
                prev = lr;
            }
        }
    }

    #[test]
    fn accumulator_mean_and_contract() {
        let s = Shape::new(1, 1, 1, 2).unwrap();
        let g = Tensor::from_vec(s, vec![2.0, 4.0]).unwrap();

        // accum_steps = 1 is the identity
        let mut a = GradAccumulator::new(s, 1);
        a.add(&g).unwrap();
        assert_eq!(a.finish().unwrap(), g);

        // two equal contributions average to themselves
        let mut a = GradAccumulator::new(s, 2);
        a.add(&g).unwrap();
        a.add(&g).unwrap();
        assert_eq!(a.finish().unwrap(), g);

        // g and -g cancel
        let mut neg = g.clone();
        neg.scale(-1.0);
        let mut a = GradAccumulator::new(s, 2);
        a.add(&g).unwrap();
        a.add(&neg).unwrap();
        assert!(a.finish().unwrap().iter().all(|v| v == 0.0));

        // finishing early is a contract violation
        let mut a = GradAccumulator::new(s, 2);
        a.add(&g).unwrap();
        assert!(a.finish().is_err());
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut c = TrainConfig::default();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.power = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig {
            policy: LrPolicy::Step,
            ..TrainConfig::default()
        };
        c.step_gamma = 1.5;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
