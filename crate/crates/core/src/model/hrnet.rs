//! HRNet-W32 with the classification ("incre") neck, parameter names as in
//! timm's `hrnet_w32`.

use rand::Rng;

use super::resnet::{make_layer, Bottleneck};
use crate::autograd::{Graph, Param, Var};
use crate::nn::{join, BatchNorm2d, Conv2d, ConvBn, Module};

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
}

impl BasicBlock {
    fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self { conv1: ConvBn::new(channels, channels, 3, 1, true, rng), conv2: ConvBn::new(channels, channels, 3, 1, false, rng) }
    }

    fn forward(&self, g: &Graph, x: &Var) -> Var {
        let y = self.conv2.forward(g, &self.conv1.forward(g, x));
        g.relu(&g.add(&y, x))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.conv.visit(&join(prefix, "conv1"), f);
        self.conv1.bn.visit(&join(prefix, "bn1"), f);
        self.conv2.conv.visit(&join(prefix, "conv2"), f);
        self.conv2.bn.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.conv.visit_mut(&join(prefix, "conv1"), f);
        self.conv1.bn.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.conv.visit_mut(&join(prefix, "conv2"), f);
        self.conv2.bn.visit_mut(&join(prefix, "bn2"), f);
    }
}

/// Path from branch `j` into branch `i` inside a fuse layer.
#[derive(Debug, Clone)]
enum Fuse {
    Identity,
    /// 1x1 conv + BN, then nearest upsampling.
    Up(ConvBn, usize),
    /// Chain of strided 3x3 conv + BN; ReLU on all but the last.
    Down(Vec<ConvBn>),
}

impl Fuse {
    fn forward(&self, g: &Graph, x: &Var) -> Var {
        match self {
            Fuse::Identity => x.clone(),
            Fuse::Up(c, factor) => g.upsample_nearest(&c.forward(g, x), *factor),
            Fuse::Down(chain) => chain.iter().fold(x.clone(), |x, c| c.forward(g, &x)),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Fuse::Identity => {}
            Fuse::Up(c, _) => c.visit_indexed(prefix, 0, f),
            Fuse::Down(chain) => {
                for (k, c) in chain.iter().enumerate() {
                    c.visit_indexed(&join(prefix, &k.to_string()), 0, f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Fuse::Identity => {}
            Fuse::Up(c, _) => c.visit_indexed_mut(prefix, 0, f),
            Fuse::Down(chain) => {
                for (k, c) in chain.iter_mut().enumerate() {
                    c.visit_indexed_mut(&join(prefix, &k.to_string()), 0, f);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct HrModule {
    branches: Vec<Vec<BasicBlock>>,
    fuse: Vec<Vec<Fuse>>,
}

impl HrModule {
    fn new(channels: &[usize], blocks: usize, rng: &mut impl Rng) -> Self {
        let n = channels.len();
        let branches =
            channels.iter().map(|&c| (0..blocks).map(|_| BasicBlock::new(c, rng)).collect()).collect();
        let mut fuse = Vec::new();
        if n > 1 {
            for i in 0..n {
                let mut row = Vec::new();
                for j in 0..n {
                    row.push(if j > i {
                        let c = ConvBn::new(channels[j], channels[i], 1, 1, false, rng);
                        Fuse::Up(c, 1 << (j - i))
                    } else if j == i {
                        Fuse::Identity
                    } else {
                        let steps = i - j;
                        Fuse::Down(
                            (0..steps)
                                .map(|k| {
                                    let last = k == steps - 1;
                                    let out = if last { channels[i] } else { channels[j] };
                                    ConvBn::new(channels[j], out, 3, 2, !last, rng)
                                })
                                .collect(),
                        )
                    });
                }
                fuse.push(row);
            }
        }
        Self { branches, fuse }
    }

    fn forward(&self, g: &Graph, xs: Vec<Var>) -> Vec<Var> {
        let xs: Vec<Var> = xs
            .into_iter()
            .zip(&self.branches)
            .map(|(x, blocks)| blocks.iter().fold(x, |x, b| b.forward(g, &x)))
            .collect();
        if self.fuse.is_empty() {
            return xs;
        }
        self.fuse
            .iter()
            .map(|row| {
                let mut y = row[0].forward(g, &xs[0]);
                for (j, path) in row.iter().enumerate().skip(1) {
                    y = g.add(&y, &path.forward(g, &xs[j]));
                }
                g.relu(&y)
            })
            .collect()
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, blocks) in self.branches.iter().enumerate() {
            for (k, b) in blocks.iter().enumerate() {
                b.visit(&join(prefix, &format!("branches.{i}.{k}")), f);
            }
        }
        for (i, row) in self.fuse.iter().enumerate() {
            for (j, path) in row.iter().enumerate() {
                path.visit(&join(prefix, &format!("fuse_layers.{i}.{j}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, blocks) in self.branches.iter_mut().enumerate() {
            for (k, b) in blocks.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("branches.{i}.{k}")), f);
            }
        }
        for (i, row) in self.fuse.iter_mut().enumerate() {
            for (j, path) in row.iter_mut().enumerate() {
                path.visit_mut(&join(prefix, &format!("fuse_layers.{i}.{j}")), f);
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Transition {
    Keep,
    /// Same resolution, channel change.
    Same(ConvBn),
    /// New lower-resolution branch, from the last existing one.
    New(Vec<ConvBn>),
}

fn make_transition(pre: &[usize], cur: &[usize], rng: &mut impl Rng) -> Vec<Transition> {
    cur.iter()
        .enumerate()
        .map(|(i, &c)| {
            if i < pre.len() {
                if pre[i] == c {
                    Transition::Keep
                } else {
                    Transition::Same(ConvBn::new(pre[i], c, 3, 1, true, rng))
                }
            } else {
                let steps = i + 1 - pre.len();
                let last_in = *pre.last().expect("non-empty");
                Transition::New(
                    (0..steps)
                        .map(|k| ConvBn::new(last_in, if k == steps - 1 { c } else { last_in }, 3, 2, true, rng))
                        .collect(),
                )
            }
        })
        .collect()
}

fn apply_transition(g: &Graph, t: &[Transition], xs: &[Var]) -> Vec<Var> {
    let last = xs.last().expect("non-empty");
    t.iter()
        .enumerate()
        .map(|(i, t)| match t {
            Transition::Keep => xs[i].clone(),
            Transition::Same(c) => c.forward(g, &xs[i]),
            Transition::New(chain) => chain.iter().fold(last.clone(), |x, c| c.forward(g, &x)),
        })
        .collect()
}

fn visit_transition(t: &[Transition], prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
    for (i, t) in t.iter().enumerate() {
        let p = join(prefix, &i.to_string());
        match t {
            Transition::Keep => {}
            Transition::Same(c) => c.visit_indexed(&p, 0, f),
            Transition::New(chain) => {
                for (k, c) in chain.iter().enumerate() {
                    c.visit_indexed(&join(&p, &k.to_string()), 0, f);
                }
            }
        }
    }
}

fn visit_transition_mut(t: &mut [Transition], prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
    for (i, t) in t.iter_mut().enumerate() {
        let p = join(prefix, &i.to_string());
        match t {
            Transition::Keep => {}
            Transition::Same(c) => c.visit_indexed_mut(&p, 0, f),
            Transition::New(chain) => {
                for (k, c) in chain.iter_mut().enumerate() {
                    c.visit_indexed_mut(&join(&p, &k.to_string()), 0, f);
                }
            }
        }
    }
}

fn conv_bn_bias(input: usize, output: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> ConvBn {
    ConvBn {
        conv: Conv2d::new(input, output, kernel, stride, kernel / 2, true, rng),
        bn: BatchNorm2d::new(output),
        relu: true,
    }
}

#[derive(Debug, Clone)]
pub struct HrNet {
    conv1: ConvBn,
    conv2: ConvBn,
    layer1: Vec<Bottleneck>,
    transitions: [Vec<Transition>; 3],
    stages: [Vec<HrModule>; 3],
    incre: Vec<Bottleneck>,
    downsamp: Vec<ConvBn>,
    final_layer: ConvBn,
}

impl HrNet {
    pub const FEATURES: usize = 2048;
    const HEAD_CHANNELS: [usize; 4] = [32, 64, 128, 256];

    /// Width-32 configuration.
    pub fn w32(rng: &mut impl Rng) -> Self {
        let conv1 = ConvBn::new(3, 64, 3, 2, true, rng);
        let conv2 = ConvBn::new(64, 64, 3, 2, true, rng);
        let layer1 = make_layer(64, 64, 4, 1, rng);
        let ch2 = [32, 64];
        let ch3 = [32, 64, 128];
        let ch4 = [32, 64, 128, 256];
        let transitions =
            [make_transition(&[256], &ch2, rng), make_transition(&ch2, &ch3, rng), make_transition(&ch3, &ch4, rng)];
        let stages = [
            (0..1).map(|_| HrModule::new(&ch2, 4, rng)).collect(),
            (0..4).map(|_| HrModule::new(&ch3, 4, rng)).collect(),
            (0..3).map(|_| HrModule::new(&ch4, 4, rng)).collect(),
        ];
        let head = Self::HEAD_CHANNELS;
        let incre = (0..4).map(|i| Bottleneck::new(ch4[i], head[i], 1, rng)).collect();
        let downsamp = (0..3).map(|i| conv_bn_bias(head[i] * 4, head[i + 1] * 4, 3, 2, rng)).collect();
        let final_layer = conv_bn_bias(head[3] * 4, Self::FEATURES, 1, 1, rng);
        Self { conv1, conv2, layer1, transitions, stages, incre, downsamp, final_layer }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let x = self.conv2.forward(g, &self.conv1.forward(g, x));
        let x = self.layer1.iter().fold(x, |x, b| b.forward(g, &x));
        let mut xs = vec![x];
        for (t, stage) in self.transitions.iter().zip(&self.stages) {
            xs = apply_transition(g, t, &xs);
            for m in stage {
                xs = m.forward(g, xs);
            }
        }
        let mut y = self.incre[0].forward(g, &xs[0]);
        for i in 0..self.downsamp.len() {
            y = g.add(&self.incre[i + 1].forward(g, &xs[i + 1]), &self.downsamp[i].forward(g, &y));
        }
        g.global_avg_pool(&self.final_layer.forward(g, &y))
    }
}

impl Module for HrNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.conv.visit(&join(prefix, "conv1"), f);
        self.conv1.bn.visit(&join(prefix, "bn1"), f);
        self.conv2.conv.visit(&join(prefix, "conv2"), f);
        self.conv2.bn.visit(&join(prefix, "bn2"), f);
        for (j, b) in self.layer1.iter().enumerate() {
            b.visit(&join(prefix, &format!("layer1.{j}")), f);
        }
        for (k, (t, stage)) in self.transitions.iter().zip(&self.stages).enumerate() {
            visit_transition(t, &join(prefix, &format!("transition{}", k + 1)), f);
            for (m, module) in stage.iter().enumerate() {
                module.visit(&join(prefix, &format!("stage{}.{m}", k + 2)), f);
            }
        }
        for (i, b) in self.incre.iter().enumerate() {
            b.visit(&join(prefix, &format!("incre_modules.{i}.0")), f);
        }
        for (i, d) in self.downsamp.iter().enumerate() {
            d.visit_indexed(&join(prefix, &format!("downsamp_modules.{i}")), 0, f);
        }
        self.final_layer.visit_indexed(&join(prefix, "final_layer"), 0, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.conv.visit_mut(&join(prefix, "conv1"), f);
        self.conv1.bn.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.conv.visit_mut(&join(prefix, "conv2"), f);
        self.conv2.bn.visit_mut(&join(prefix, "bn2"), f);
        for (j, b) in self.layer1.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("layer1.{j}")), f);
        }
        for (k, (t, stage)) in self.transitions.iter_mut().zip(self.stages.iter_mut()).enumerate() {
            visit_transition_mut(t, &join(prefix, &format!("transition{}", k + 1)), f);
            for (m, module) in stage.iter_mut().enumerate() {
                module.visit_mut(&join(prefix, &format!("stage{}.{m}", k + 2)), f);
            }
        }
        for (i, b) in self.incre.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("incre_modules.{i}.0")), f);
        }
        for (i, d) in self.downsamp.iter_mut().enumerate() {
            d.visit_indexed_mut(&join(prefix, &format!("downsamp_modules.{i}")), 0, f);
        }
        self.final_layer.visit_indexed_mut(&join(prefix, "final_layer"), 0, f);
    }
}
