use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autograd::{Graph, Param, Var};
use crate::nn::{join, Linear, Module};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

/// Three hidden widths plus the output layer: four linear layers in total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionHeadConfig {
    pub hidden_dims: Vec<usize>,
    /// Applied after the first two hidden layers in training mode.
    pub dropout: f32,
    pub activation: Activation,
}

impl Default for FusionHeadConfig {
    fn default() -> Self {
        Self { hidden_dims: vec![1024, 512, 256], dropout: 0.5, activation: Activation::Relu }
    }
}

impl FusionHeadConfig {
    pub const HIDDEN_LAYERS: usize = 3;

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dims.len() != Self::HIDDEN_LAYERS {
            return Err(ModelError::InvalidConfig(format!(
                "head needs exactly {} hidden widths, got {:?}",
                Self::HIDDEN_LAYERS,
                self.hidden_dims
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidConfig(format!("head widths must be positive: {:?}", self.hidden_dims)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    pub layers: Vec<Linear>,
    dropout: f32,
    activation: Activation,
}

impl FusionHead {
    pub fn new(input: usize, cfg: &FusionHeadConfig, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut widths = vec![input];
        widths.extend(&cfg.hidden_dims);
        widths.push(num_classes);
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], true, rng)).collect();
        Self { layers, dropout: cfg.dropout, activation: cfg.activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Linear::out_features));
        w
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let last = self.layers.len() - 1;
        let mut x = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, &x);
            if i == last {
                break;
            }
            x = match self.activation {
                Activation::Relu => g.relu(&x),
                Activation::Gelu => g.gelu(&x),
            };
            if i < 2 {
                x = g.dropout(&x, self.dropout);
            }
        }
        x
    }
}

impl Module for FusionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}
