use std::collections::HashMap;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamId, Tensor};
use crate::nn::Module;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    #[default]
    #[serde(rename = "adamw")]
    AdamW,
    /// SGD with momentum 0.9 and decoupled weight decay.
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adamw" => Ok(Self::AdamW),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adamw or sgd)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate towards zero over the run, per epoch.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 0-based `epoch` of `epochs`.
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown lr schedule {other:?} (expected constant or cosine)")),
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    momentum: f32,
    steps: i32,
    state: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f32) -> Self {
        Self { kind, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, momentum: 0.9, steps: 0, state: HashMap::new() }
    }

    /// One update of every trainable parameter that has a gradient.
    /// `lr_for` maps a parameter name to its learning rate. Weight decay
    /// applies to matrices and kernels only, not to biases or norm scales.
    pub fn step(&mut self, module: &mut dyn Module, grads: &Grads, lr_for: &dyn Fn(&str) -> f32) {
        self.steps += 1;
        let t = self.steps;
        let (b1, b2, eps, mu) = (self.beta1, self.beta2, self.eps, self.momentum);
        let kind = self.kind;
        let wd = self.weight_decay;
        let state = &mut self.state;
        module.visit_mut("", &mut |name, p| {
            if !p.is_trainable() {
                return;
            }
            let Some(g) = grads.param(p.id()) else { return };
            let lr = lr_for(name);
            let decay = if p.shape().len() >= 2 { 1.0 - lr * wd } else { 1.0 };
            let (m, v) = state.entry(p.id()).or_insert_with(|| (Tensor::zeros(g.raw_dim()), Tensor::zeros(g.raw_dim())));
            let value = p.value_mut();
            match kind {
                OptimizerKind::AdamW => {
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    Zip::from(value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w *= decay;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
                }
                OptimizerKind::Sgd => {
                    let first = t == 1;
                    Zip::from(value).and(m).and(g).for_each(|w, b, &g| {
                        *b = if first { g } else { mu * *b + g };
                        *w *= decay;
                        *w -= lr * *b;
                    });
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use ndarray::IxDyn;

    use super::*;
    use crate::autograd::{Graph, Param};
    use crate::nn::join;

    struct Two {
        w: Param,
        b: Param,
    }

    impl Module for Two {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
            f(&join(prefix, "w"), &self.w);
            f(&join(prefix, "b"), &self.b);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&join(prefix, "w"), &mut self.w);
            f(&join(prefix, "b"), &mut self.b);
        }
    }

    /// Three steps with gradients (s+1)·g0, via sum(w * c) losses.
    fn run(kind: OptimizerKind, lr: f32, wd: f32) -> (Vec<f32>, f32) {
        let mut m = Two {
            w: Param::new(Tensor::from_shape_vec(IxDyn(&[1, 3]), vec![0.5, -1.0, 2.0]).unwrap()),
            b: Param::new(Tensor::from_elem(IxDyn(&[1]), 0.3)),
        };
        let mut opt = Optimizer::new(kind, wd);
        for s in 0..3 {
            let k = (s + 1) as f32;
            let g = Graph::training(0);
            let cw = g.constant(Tensor::from_shape_vec(IxDyn(&[1, 3]), vec![0.1 * k, -0.2 * k, 0.3 * k]).unwrap());
            let cb = g.constant(Tensor::from_elem(IxDyn(&[1]), -0.5 * k));
            let lw = g.sum_all(&g.mul(&g.param(&m.w), &cw));
            let lb = g.sum_all(&g.mul(&g.param(&m.b), &cb));
            let grads = g.backward(&g.add(&lw, &lb));
            opt.step(&mut m, &grads, &|_| lr);
        }
        (m.w.value().iter().copied().collect(), m.b.value()[[0]])
    }

    #[test]
    fn adamw_matches_torch() {
        // torch.optim.AdamW(lr=1e-2), weight_decay 0.1 on the matrix, 0 on the bias.
        let (w, b) = run(OptimizerKind::AdamW, 1e-2, 0.1);
        for (got, want) in w.iter().zip([0.4692993462085724, -0.9678008556365967, 1.96480393409729]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!((b - 0.3292318284511566).abs() < 1e-6);
    }

    #[test]
    fn sgd_matches_torch() {
        // torch.optim.SGD(lr=0.1, momentum=0.9).
        let (w, _) = run(OptimizerKind::Sgd, 0.1, 0.0);
        for (got, want) in w.iter().zip([0.4048999845981598, -0.8097999691963196, 1.7146999835968018]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn cosine_factor() {
        assert_eq!(LrSchedule::Cosine.factor(0, 10), 1.0);
        assert!((LrSchedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-12);
        assert!(LrSchedule::Cosine.factor(9, 10) > 0.0);
        assert_eq!(LrSchedule::Constant.factor(9, 10), 1.0);
    }
}
