//! Parameterized layers on top of [`crate::autograd`].
//!
//! Parameter names follow the dotted-path convention used by common
//! pretrained checkpoints (`layer1.0.conv1.weight`, `bn1.running_mean`, ...)
//! so externally converted weights can be matched by name.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Conv2dOptions, Graph, Param, Tensor, Var};

/// Visitor over named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                n += p.numel();
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He-uniform with ReLU gain: U(-b, b), b = sqrt(6 / fan_in).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound))
}

/// He-normal over fan_out, the usual choice for conv stacks with ReLU.
pub fn kaiming_normal_fan_out(shape: &[usize], fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_out as f32).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

pub fn trunc_normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_shape_simple_fn(IxDyn(shape), || loop {
        let v: f32 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Kaiming-uniform weights, zero bias.
    pub fn new(input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(kaiming_uniform(&[output, input], input, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(IxDyn(&[output])))),
        }
    }

    /// Truncated-normal weights, zero bias (transformer convention).
    pub fn new_trunc(input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(trunc_normal(&[output, input], 0.02, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(IxDyn(&[output])))),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.linear(x, &w, b.as_ref())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub options: Conv2dOptions,
}

impl Conv2d {
    pub fn new(
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [output, input, kernel, kernel];
        Self {
            weight: Param::new(kaiming_normal_fan_out(&shape, output * kernel * kernel, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(IxDyn(&[output])))),
            options: Conv2dOptions { stride, padding },
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, &w, b.as_ref(), self.options)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

impl BatchNorm2d {
    pub const MOMENTUM: f32 = 0.1;
    pub const EPS: f32 = 1e-5;

    pub fn new(channels: usize) -> Self {
        let c = IxDyn(&[channels]);
        Self {
            weight: Param::new(Tensor::ones(c.clone())),
            bias: Param::new(Tensor::zeros(c.clone())),
            running_mean: Param::buffer(Tensor::zeros(c.clone())),
            running_var: Param::buffer(Tensor::ones(c)),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let gamma = g.param(&self.weight);
        let beta = g.param(&self.bias);
        g.batch_norm2d(x, &gamma, &beta, &self.running_mean, &self.running_var, Self::MOMENTUM, Self::EPS)
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            weight: Param::new(Tensor::ones(IxDyn(&[dim]))),
            bias: Param::new(Tensor::zeros(IxDyn(&[dim]))),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let gamma = g.param(&self.weight);
        let beta = g.param(&self.bias);
        g.layer_norm(x, &gamma, &beta, Self::EPS)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Conv followed by batch norm, optionally ReLU; the workhorse of the CNN
/// backbones.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(input: usize, output: usize, kernel: usize, stride: usize, relu: bool, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(input, output, kernel, stride, kernel / 2, false, rng),
            bn: BatchNorm2d::new(output),
            relu,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let y = self.bn.forward(g, &self.conv.forward(g, x));
        if self.relu {
            g.relu(&y)
        } else {
            y
        }
    }

    /// Visit with sequential-index names: `{prefix}.{conv_idx}` / `{prefix}.{conv_idx + 1}`.
    pub fn visit_indexed(&self, prefix: &str, conv_idx: usize, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, &conv_idx.to_string()), f);
        self.bn.visit(&join(prefix, &(conv_idx + 1).to_string()), f);
    }

    pub fn visit_indexed_mut(&mut self, prefix: &str, conv_idx: usize, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, &conv_idx.to_string()), f);
        self.bn.visit_mut(&join(prefix, &(conv_idx + 1).to_string()), f);
    }
}
