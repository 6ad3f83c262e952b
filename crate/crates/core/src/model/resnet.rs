//! Bottleneck ResNets with torchvision parameter names.

use rand::Rng;

use crate::autograd::{Graph, Param, Var};
use crate::nn::{join, BatchNorm2d, Conv2d, ConvBn, Module};

#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub conv3: ConvBn,
    pub downsample: Option<ConvBn>,
}

impl Bottleneck {
    pub const EXPANSION: usize = 4;

    pub fn new(input: usize, planes: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let out = planes * Self::EXPANSION;
        Self {
            conv1: ConvBn::new(input, planes, 1, 1, true, rng),
            conv2: ConvBn::new(planes, planes, 3, stride, true, rng),
            conv3: ConvBn::new(planes, out, 1, 1, false, rng),
            downsample: (stride != 1 || input != out).then(|| ConvBn::new(input, out, 1, stride, false, rng)),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = self.conv2.forward(g, &y);
        let y = self.conv3.forward(g, &y);
        let skip = match &self.downsample {
            Some(d) => d.forward(g, x),
            None => x.clone(),
        };
        g.relu(&g.add(&y, &skip))
    }
}

fn visit_convbn(c: &ConvBn, prefix: &str, conv: &str, bn: &str, f: &mut dyn FnMut(&str, &Param)) {
    c.conv.visit(&join(prefix, conv), f);
    c.bn.visit(&join(prefix, bn), f);
}

fn visit_convbn_mut(c: &mut ConvBn, prefix: &str, conv: &str, bn: &str, f: &mut dyn FnMut(&str, &mut Param)) {
    c.conv.visit_mut(&join(prefix, conv), f);
    c.bn.visit_mut(&join(prefix, bn), f);
}

impl Module for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        visit_convbn(&self.conv1, prefix, "conv1", "bn1", f);
        visit_convbn(&self.conv2, prefix, "conv2", "bn2", f);
        visit_convbn(&self.conv3, prefix, "conv3", "bn3", f);
        if let Some(d) = &self.downsample {
            d.visit_indexed(&join(prefix, "downsample"), 0, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_convbn_mut(&mut self.conv1, prefix, "conv1", "bn1", f);
        visit_convbn_mut(&mut self.conv2, prefix, "conv2", "bn2", f);
        visit_convbn_mut(&mut self.conv3, prefix, "conv3", "bn3", f);
        if let Some(d) = &mut self.downsample {
            d.visit_indexed_mut(&join(prefix, "downsample"), 0, f);
        }
    }
}

/// Stack of bottleneck blocks with the given stride on the first.
pub fn make_layer(input: usize, planes: usize, blocks: usize, stride: usize, rng: &mut impl Rng) -> Vec<Bottleneck> {
    let mut layer = vec![Bottleneck::new(input, planes, stride, rng)];
    for _ in 1..blocks {
        layer.push(Bottleneck::new(planes * Bottleneck::EXPANSION, planes, 1, rng));
    }
    layer
}

#[derive(Debug, Clone)]
pub struct ResNet {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: [Vec<Bottleneck>; 4],
}

impl ResNet {
    pub const FEATURES: usize = 2048;

    /// `blocks` is `[3, 4, 6, 3]` for ResNet-50 and `[3, 4, 23, 3]` for ResNet-101.
    pub fn new(blocks: [usize; 4], rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(3, 64, 7, 2, 3, false, rng);
        let layers = [
            make_layer(64, 64, blocks[0], 1, rng),
            make_layer(256, 128, blocks[1], 2, rng),
            make_layer(512, 256, blocks[2], 2, rng),
            make_layer(1024, 512, blocks[3], 2, rng),
        ];
        Self { conv1, bn1: BatchNorm2d::new(64), layers }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let x = g.relu(&self.bn1.forward(g, &self.conv1.forward(g, x)));
        let mut x = g.max_pool2d(&x, 3, 2, 1);
        for layer in &self.layers {
            for block in layer {
                x = block.forward(g, &x);
            }
        }
        g.global_avg_pool(&x)
    }
}

impl Module for ResNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, block) in layer.iter().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (j, block) in layer.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
    }
}
