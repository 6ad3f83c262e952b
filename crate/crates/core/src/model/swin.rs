//! Swin Transformer V2 (tiny, window 8) with timm parameter names:
//! scaled-cosine attention, log-spaced continuous position bias, post-norm
//! residual blocks and shifted windows. Activations are kept NHWC.

use ndarray::{Array2, Array3, IxDyn};
use rand::Rng;

use crate::autograd::{Graph, Param, Tensor, Var};
use crate::nn::{join, trunc_normal, Conv2d, LayerNorm, Linear, Module};

const EMBED_DIM: usize = 96;
const DEPTHS: [usize; 4] = [2, 2, 6, 2];
const HEADS: [usize; 4] = [3, 6, 12, 24];
const WINDOW: usize = 8;
const CPB_HIDDEN: usize = 512;
const MASK_FILL: f32 = -100.0;

fn linear_trunc(input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Linear {
    Linear { weight: Param::new(trunc_normal(&[output, input], 0.02, rng)), bias: bias.then(|| Param::new(Tensor::zeros(IxDyn(&[output])))) }
}

#[derive(Debug, Clone)]
struct WindowAttention {
    heads: usize,
    qkv: Linear,
    q_bias: Param,
    v_bias: Param,
    logit_scale: Param,
    cpb_fc1: Linear,
    cpb_fc2: Linear,
    proj: Linear,
    coords_table: Tensor,
    position_index: Vec<usize>,
}

/// (2w-1)^2 x 2 table of log-spaced relative offsets.
fn relative_coords_table(window: usize) -> Tensor {
    let span = 2 * window - 1;
    let denom = (window.max(2) - 1) as f32;
    let f = |d: f32| {
        let v = d / denom * 8.0;
        v.signum() * (v.abs() + 1.0).log2() / 8f32.log2()
    };
    Array2::from_shape_fn((span * span, 2), |(r, k)| {
        let (dh, dw) = ((r / span) as f32 - (window - 1) as f32, (r % span) as f32 - (window - 1) as f32);
        f(if k == 0 { dh } else { dw })
    })
    .into_dyn()
}

fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let dh = (a / window) + window - 1 - (b / window);
            let dw = (a % window) + window - 1 - (b % window);
            idx.push(dh * span + dw);
        }
    }
    idx
}

impl WindowAttention {
    fn new(dim: usize, heads: usize, window: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            qkv: linear_trunc(dim, 3 * dim, false, rng),
            q_bias: Param::new(Tensor::zeros(IxDyn(&[dim]))),
            v_bias: Param::new(Tensor::zeros(IxDyn(&[dim]))),
            logit_scale: Param::new(Tensor::from_elem(IxDyn(&[heads, 1, 1]), 10f32.ln())),
            cpb_fc1: linear_trunc(2, CPB_HIDDEN, true, rng),
            cpb_fc2: linear_trunc(CPB_HIDDEN, heads, false, rng),
            proj: linear_trunc(dim, dim, true, rng),
            coords_table: relative_coords_table(window),
            position_index: relative_position_index(window),
        }
    }

    /// `x`: (B*nW, T, C); `mask`: (nW, T, T) additive.
    fn forward(&self, g: &Graph, x: &Var, mask: Option<&Tensor>) -> Var {
        let (bw, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.heads;
        let d = c / h;
        let zeros = g.constant(Tensor::zeros(IxDyn(&[c])));
        let bias = g.concat(&[&g.param(&self.q_bias), &zeros, &g.param(&self.v_bias)], 0);
        let qkv = g.linear(x, &g.param(&self.qkv.weight), Some(&bias));
        let qkv = g.permute(&g.reshape(&qkv, &[bw, t, 3, h, d]), &[2, 0, 3, 1, 4]);
        let part = |i| g.reshape(&g.narrow(&qkv, 0, i, 1), &[bw, h, t, d]);
        let (q, k, v) = (part(0), part(1), part(2));
        let q = g.l2_normalize_last(&q, 1e-12);
        let k = g.l2_normalize_last(&k, 1e-12);
        let mut attn = g.matmul(&q, &g.permute(&k, &[0, 1, 3, 2]));
        let scale = g.exp(&g.clamp_max(&g.param(&self.logit_scale), 100f32.ln()));
        attn = g.mul(&attn, &scale);

        let table = g.constant(self.coords_table.clone());
        let hidden = g.relu(&self.cpb_fc1.forward(g, &table));
        let bias_table = self.cpb_fc2.forward(g, &hidden);
        let rel = g.gather_rows(&bias_table, &self.position_index);
        let rel = g.permute(&g.reshape(&rel, &[t, t, h]), &[2, 0, 1]);
        let rel = g.scale(&g.sigmoid(&rel), 16.0);
        attn = g.add(&attn, &rel);

        if let Some(mask) = mask {
            let nw = mask.shape()[0];
            let m = g.constant(mask.clone().into_shape_with_order(IxDyn(&[nw, 1, t, t])).expect("mask shape"));
            attn = g.reshape(&attn, &[bw / nw, nw, h, t, t]);
            attn = g.reshape(&g.add(&attn, &m), &[bw, h, t, t]);
        }
        let attn = g.softmax_last(&attn);
        let out = g.matmul(&attn, &v);
        let out = g.reshape(&g.permute(&out, &[0, 2, 1, 3]), &[bw, t, c]);
        self.proj.forward(g, &out)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "logit_scale"), &self.logit_scale);
        f(&join(prefix, "q_bias"), &self.q_bias);
        f(&join(prefix, "v_bias"), &self.v_bias);
        self.cpb_fc1.visit(&join(prefix, "cpb_mlp.0"), f);
        self.cpb_fc2.visit(&join(prefix, "cpb_mlp.2"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "logit_scale"), &mut self.logit_scale);
        f(&join(prefix, "q_bias"), &mut self.q_bias);
        f(&join(prefix, "v_bias"), &mut self.v_bias);
        self.cpb_fc1.visit_mut(&join(prefix, "cpb_mlp.0"), f);
        self.cpb_fc2.visit_mut(&join(prefix, "cpb_mlp.2"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Region ids of the shifted layout, partitioned into windows, turned into
/// a (nW, T, T) additive mask.
fn shift_mask(hp: usize, wp: usize, window: usize, shift: usize) -> Tensor {
    let region = |p: usize, len: usize| {
        if p < len - window {
            0
        } else if p < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (hp / window, wp / window);
    let t = window * window;
    Array3::from_shape_fn((nh * nw, t, t), |(win, a, b)| {
        let (wy, wx) = (win / nw, win % nw);
        let id = |p: usize| {
            let (y, x) = (wy * window + p / window, wx * window + p % window);
            region(y, hp) * 3 + region(x, wp)
        };
        if id(a) == id(b) {
            0.0
        } else {
            MASK_FILL
        }
    })
    .into_dyn()
}

#[derive(Debug, Clone)]
struct Block {
    window: usize,
    shift: usize,
    attn: WindowAttention,
    norm1: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm2: LayerNorm,
    mask: Option<Tensor>,
}

impl Block {
    fn new(dim: usize, heads: usize, resolution: usize, shifted: bool, rng: &mut impl Rng) -> Self {
        let window = WINDOW.min(resolution);
        let shift = if resolution <= window || !shifted { 0 } else { WINDOW / 2 };
        let padded = resolution.div_ceil(window) * window;
        Self {
            window,
            shift,
            attn: WindowAttention::new(dim, heads, window, rng),
            norm1: LayerNorm::new(dim),
            fc1: linear_trunc(dim, 4 * dim, true, rng),
            fc2: linear_trunc(4 * dim, dim, true, rng),
            norm2: LayerNorm::new(dim),
            mask: (shift > 0).then(|| shift_mask(padded, padded, window, shift)),
        }
    }

    fn attend(&self, g: &Graph, x: &Var) -> Var {
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ws = self.window;
        let s = self.shift as isize;
        let mut y = if s > 0 { g.roll(x, &[(1, -s), (2, -s)]) } else { x.clone() };
        let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
        if hp > h {
            y = g.concat(&[&y, &g.constant(Tensor::zeros(IxDyn(&[n, hp - h, w, c])))], 1);
        }
        if wp > w {
            y = g.concat(&[&y, &g.constant(Tensor::zeros(IxDyn(&[n, hp, wp - w, c])))], 2);
        }
        let (nh, nw) = (hp / ws, wp / ws);
        let win = g.reshape(&y, &[n, nh, ws, nw, ws, c]);
        let win = g.reshape(&g.permute(&win, &[0, 1, 3, 2, 4, 5]), &[n * nh * nw, ws * ws, c]);
        let out = self.attn.forward(g, &win, self.mask.as_ref());
        let out = g.reshape(&out, &[n, nh, nw, ws, ws, c]);
        let mut out = g.reshape(&g.permute(&out, &[0, 1, 3, 2, 4, 5]), &[n, hp, wp, c]);
        if hp > h {
            out = g.narrow(&out, 1, 0, h);
        }
        if wp > w {
            out = g.narrow(&out, 2, 0, w);
        }
        if s > 0 {
            out = g.roll(&out, &[(1, s), (2, s)]);
        }
        out
    }

    fn forward(&self, g: &Graph, x: &Var) -> Var {
        let x = g.add(x, &self.norm1.forward(g, &self.attend(g, x)));
        let m = self.fc2.forward(g, &g.gelu(&self.fc1.forward(g, &x)));
        g.add(&x, &self.norm2.forward(g, &m))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// 2x2 neighborhood merge: (N,H,W,C) → (N,H/2,W/2,2C), reduce then norm.
#[derive(Debug, Clone)]
struct PatchMerging {
    reduction: Linear,
    norm: LayerNorm,
}

impl PatchMerging {
    fn forward(&self, g: &Graph, x: &Var) -> Var {
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let y = g.reshape(x, &[n, h / 2, 2, w / 2, 2, c]);
        let y = g.reshape(&g.permute(&y, &[0, 1, 3, 4, 2, 5]), &[n, h / 2, w / 2, 4 * c]);
        self.norm.forward(g, &self.reduction.forward(g, &y))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    downsample: Option<PatchMerging>,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct SwinV2 {
    patch_embed: Conv2d,
    patch_norm: LayerNorm,
    stages: Vec<Stage>,
    norm: LayerNorm,
}

impl SwinV2 {
    pub const FEATURES: usize = EMBED_DIM * 8;

    /// `input_size` must be a multiple of 32 and at least 64.
    pub fn tiny(input_size: usize, rng: &mut impl Rng) -> Self {
        let patch_embed = Conv2d {
            weight: Param::new(trunc_normal(&[EMBED_DIM, 3, 4, 4], 0.02, rng)),
            bias: Some(Param::new(Tensor::zeros(IxDyn(&[EMBED_DIM])))),
            options: crate::autograd::Conv2dOptions { stride: 4, padding: 0 },
        };
        let mut resolution = input_size / 4;
        let mut stages = Vec::new();
        for (i, (&depth, &heads)) in DEPTHS.iter().zip(&HEADS).enumerate() {
            let dim = EMBED_DIM << i;
            let downsample = (i > 0).then(|| {
                resolution /= 2;
                PatchMerging { reduction: linear_trunc(2 * dim, dim, false, rng), norm: LayerNorm::new(dim) }
            });
            let blocks = (0..depth).map(|j| Block::new(dim, heads, resolution, j % 2 == 1, rng)).collect();
            stages.push(Stage { downsample, blocks });
        }
        Self { patch_embed, patch_norm: LayerNorm::new(EMBED_DIM), stages, norm: LayerNorm::new(Self::FEATURES) }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let y = self.patch_embed.forward(g, x);
        let mut y = self.patch_norm.forward(g, &g.permute(&y, &[0, 2, 3, 1]));
        for stage in &self.stages {
            if let Some(d) = &stage.downsample {
                y = d.forward(g, &y);
            }
            for b in &stage.blocks {
                y = b.forward(g, &y);
            }
        }
        let y = self.norm.forward(g, &y);
        let (n, h, w, c) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
        g.mean_axis(&g.reshape(&y, &[n, h * w, c]), 1)
    }
}

impl Module for SwinV2 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.patch_embed.visit(&join(prefix, "patch_embed.proj"), f);
        self.patch_norm.visit(&join(prefix, "patch_embed.norm"), f);
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("layers.{i}"));
            if let Some(d) = &s.downsample {
                d.reduction.visit(&join(&p, "downsample.reduction"), f);
                d.norm.visit(&join(&p, "downsample.norm"), f);
            }
            for (j, b) in s.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("blocks.{j}")), f);
            }
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed.proj"), f);
        self.patch_norm.visit_mut(&join(prefix, "patch_embed.norm"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("layers.{i}"));
            if let Some(d) = &mut s.downsample {
                d.reduction.visit_mut(&join(&p, "downsample.reduction"), f);
                d.norm.visit_mut(&join(&p, "downsample.norm"), f);
            }
            for (j, b) in s.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("blocks.{j}")), f);
            }
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
