use ndarray::{linalg::general_mat_mul, s, Array2, Array4, ArrayView3, Axis, Ix4};

use super::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

fn out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel {kernel} larger than padded input {input}");
    (input + 2 * pad - kernel) / stride + 1
}

fn to4(t: &Tensor) -> ndarray::ArrayView4<'_, f32> {
    t.view().into_dimensionality::<Ix4>().expect("NCHW tensor")
}

/// Unfold one CHW image into (C*kh*kw, Ho*Wo).
fn im2col(x: &ArrayView3<f32>, kh: usize, kw: usize, opt: Conv2dOptions, ho: usize, wo: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f32>::zeros((c * kh * kw, ho * wo));
    let (stride, pad) = (opt.stride as isize, opt.padding as isize);
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for oy in 0..ho {
                    let iy = oy as isize * stride - pad + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane.row(iy as usize);
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = ox as isize * stride - pad + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f32>,
    out: &mut ndarray::ArrayViewMut3<f32>,
    kh: usize,
    kw: usize,
    opt: Conv2dOptions,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = out.dim();
    let (stride, pad) = (opt.stride as isize, opt.padding as isize);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = cols.row(row);
                for oy in 0..ho {
                    let iy = oy as isize * stride - pad + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize * stride - pad + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            out[[ci, iy as usize, ix as usize]] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D convolution over NCHW input with an (O, C, kh, kw) kernel.
    pub fn conv2d(&self, x: &Var, weight: &Var, bias: Option<&Var>, opt: Conv2dOptions) -> Var {
        let xv = x.value.clone();
        let wv = weight.value.clone();
        let x4 = to4(&xv);
        let w4 = to4(&wv);
        let (n, c, h, w) = x4.dim();
        let (o, wc, kh, kw) = w4.dim();
        assert_eq!(c, wc, "conv input channels {c} vs kernel {wc}");
        let ho = out_size(h, kh, opt.stride, opt.padding);
        let wo = out_size(w, kw, opt.stride, opt.padding);
        let wmat = w4.to_owned().into_shape_with_order((o, c * kh * kw)).unwrap();
        let mut out = Array4::<f32>::zeros((n, o, ho, wo));
        let pointwise = kh == 1 && kw == 1 && opt.stride == 1 && opt.padding == 0;
        for i in 0..n {
            let xi = x4.index_axis(Axis(0), i);
            let mut oi = out.index_axis_mut(Axis(0), i).into_shape_with_order((o, ho * wo)).unwrap();
            if pointwise {
                let xi2 = xi.to_owned().into_shape_with_order((c, h * w)).unwrap();
                general_mat_mul(1.0, &wmat, &xi2, 0.0, &mut oi);
            } else {
                let cols = im2col(&xi, kh, kw, opt, ho, wo);
                general_mat_mul(1.0, &wmat, &cols, 0.0, &mut oi);
            }
        }
        if let Some(b) = bias {
            let b1 = b.value().view().into_shape_with_order((1, o, 1, 1)).unwrap();
            out += &b1;
        }
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.record(out.into_dyn(), &parents, move |g, needs| {
            let g4 = to4(g);
            let x4 = to4(&xv);
            let wmat = to4(&wv).to_owned().into_shape_with_order((o, c * kh * kw)).unwrap();
            let mut dx = needs[0].then(|| Array4::<f32>::zeros((n, c, h, w)));
            let mut dw = needs[1].then(|| Array2::<f32>::zeros((o, c * kh * kw)));
            for i in 0..n {
                let gi = g4.index_axis(Axis(0), i).to_owned().into_shape_with_order((o, ho * wo)).unwrap();
                let xi = x4.index_axis(Axis(0), i);
                if let Some(dw) = dw.as_mut() {
                    let cols = if pointwise {
                        xi.to_owned().into_shape_with_order((c, h * w)).unwrap()
                    } else {
                        im2col(&xi, kh, kw, opt, ho, wo)
                    };
                    general_mat_mul(1.0, &gi, &cols.t(), 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dcols = wmat.t().dot(&gi);
                    let mut dxi = dx.index_axis_mut(Axis(0), i);
                    if pointwise {
                        dxi += &dcols.into_shape_with_order((c, h, w)).unwrap();
                    } else {
                        col2im(&dcols, &mut dxi, kh, kw, opt, ho, wo);
                    }
                }
            }
            let mut res = vec![
                dx.map(|d| d.into_dyn()),
                dw.map(|d| d.into_shape_with_order((o, c, kh, kw)).unwrap().into_dyn()),
            ];
            if has_bias {
                res.push(needs[2].then(|| {
                    g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()
                }));
            }
            res
        })
    }

    /// Max pooling with implicit -inf padding.
    pub fn max_pool2d(&self, x: &Var, kernel: usize, stride: usize, padding: usize) -> Var {
        let x4 = to4(x.value());
        let (n, c, h, w) = x4.dim();
        let ho = out_size(h, kernel, stride, padding);
        let wo = out_size(w, kernel, stride, padding);
        let mut out = Array4::<f32>::zeros((n, c, ho, wo));
        let mut argmax = vec![0usize; n * c * ho * wo];
        let mut k = 0;
        for b in 0..n {
            for ch in 0..c {
                let plane = x4.slice(s![b, ch, .., ..]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = plane[[iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        out[[b, ch, oy, ox]] = best;
                        argmax[k] = best_idx;
                        k += 1;
                    }
                }
            }
        }
        self.record(out.into_dyn(), &[x], move |g, _| {
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            let gs = g.as_standard_layout();
            let gflat = gs.as_slice().unwrap();
            let mut k = 0;
            for b in 0..n {
                for ch in 0..c {
                    let mut plane = dx.slice_mut(s![b, ch, .., ..]);
                    let plane = plane.as_slice_mut().unwrap();
                    for _ in 0..ho * wo {
                        plane[argmax[k]] += gflat[k];
                        k += 1;
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        })
    }

    /// (N, C, H, W) -> (N, C).
    pub fn global_avg_pool(&self, x: &Var) -> Var {
        let x4 = to4(x.value());
        let (n, c, h, w) = x4.dim();
        let area = (h * w) as f32;
        let out = x4.sum_axis(Axis(3)).sum_axis(Axis(2)) / area;
        self.record(out.into_dyn(), &[x], move |g, _| {
            let g2 = g.view().into_shape_with_order((n, c, 1, 1)).unwrap();
            let dx = g2.broadcast((n, c, h, w)).unwrap().to_owned() / area;
            vec![Some(dx.into_dyn())]
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, x: &Var, factor: usize) -> Var {
        let x4 = to4(x.value());
        let (n, c, h, w) = x4.dim();
        let out = Array4::from_shape_fn((n, c, h * factor, w * factor), |(b, ch, y, xx)| {
            x4[[b, ch, y / factor, xx / factor]]
        });
        self.record(out.into_dyn(), &[x], move |g, _| {
            let g4 = to4(g);
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            for ((b, ch, y, xx), &v) in g4.indexed_iter() {
                dx[[b, ch, y / factor, xx / factor]] += v;
            }
            vec![Some(dx.into_dyn())]
        })
    }
}
