use rand::Rng;

use crate::autograd::{Graph, Param, Var};
use crate::nn::{join, Conv2d, Module};

/// Two strided 3x3 convolutions and global average pooling; 32 features.
#[derive(Debug, Clone)]
pub struct TinyNet {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl TinyNet {
    pub const FEATURES: usize = 32;

    pub fn new(rng: &mut impl Rng) -> Self {
        Self { conv1: Conv2d::new(3, 16, 3, 2, 1, true, rng), conv2: Conv2d::new(16, 32, 3, 2, 1, true, rng) }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let x = g.relu(&self.conv1.forward(g, x));
        let x = g.relu(&self.conv2.forward(g, &x));
        g.global_avg_pool(&x)
    }
}

impl Module for TinyNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}
