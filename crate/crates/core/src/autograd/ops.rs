use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView2, Axis, Ix2, IxDyn, Zip};
use rand::Rng;

use super::{sum_to_shape, Graph, Tensor, Var};

fn as_2d(t: &Tensor) -> ArrayView2<'_, f32> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

/// View `t` as (rows, last_dim).
fn rows_view(t: &Tensor) -> ArrayView2<'_, f32> {
    let last = *t.shape().last().expect("rank >= 1");
    let rows = t.len() / last.max(1);
    t.view().into_shape_with_order((rows, last)).expect("contiguous tensor")
}

fn contiguous(t: &Tensor) -> Tensor {
    if t.is_standard_layout() {
        t.clone()
    } else {
        t.as_standard_layout().into_owned()
    }
}

impl Graph {
    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let out = a.value() + b.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| sum_to_shape(g, &sa)),
                needs[1].then(|| sum_to_shape(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        let out = a.value() - b.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| sum_to_shape(g, &sa)),
                needs[1].then(|| sum_to_shape(g, &sb)),
            ]
        })
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let out = a.value() * b.value();
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| sum_to_shape(&(g * &*bv), av.shape())),
                needs[1].then(|| sum_to_shape(&(g * &*av), bv.shape())),
            ]
        })
    }

    pub fn scale(&self, a: &Var, k: f32) -> Var {
        let out = a.value() * k;
        self.record(out, &[a], move |g, _| vec![Some(g * k)])
    }

    pub fn relu(&self, a: &Var) -> Var {
        let out = a.value().mapv(|v| v.max(0.0));
        let mask = out.mapv(|v| if v > 0.0 { 1.0f32 } else { 0.0 });
        self.record(out, &[a], move |g, _| vec![Some(g * &mask)])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: &Var) -> Var {
        const INV_SQRT2: f32 = std::f32::consts::FRAC_1_SQRT_2;
        let x = a.value.clone();
        let out = x.mapv(|v| 0.5 * v * (1.0 + libm::erff(v * INV_SQRT2)));
        self.record(out, &[a], move |g, _| {
            let inv_sqrt_2pi = 1.0 / (2.0 * std::f32::consts::PI).sqrt();
            let d = x.mapv(|v| {
                0.5 * (1.0 + libm::erff(v * INV_SQRT2)) + v * inv_sqrt_2pi * (-0.5 * v * v).exp()
            });
            vec![Some(g * &d)]
        })
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let out = a.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = out.clone();
        self.record(out, &[a], move |g, _| vec![Some(g * &y.mapv(|s| s * (1.0 - s)))])
    }

    pub fn exp(&self, a: &Var) -> Var {
        let out = a.value().mapv(f32::exp);
        let y = out.clone();
        self.record(out, &[a], move |g, _| vec![Some(g * &y)])
    }

    /// `min(a, max)`; the gradient is cut where the clamp is active.
    pub fn clamp_max(&self, a: &Var, max: f32) -> Var {
        let out = a.value().mapv(|v| v.min(max));
        let mask = a.value().mapv(|v| if v < max { 1.0f32 } else { 0.0 });
        self.record(out, &[a], move |g, _| vec![Some(g * &mask)])
    }

    pub fn sum_all(&self, a: &Var) -> Var {
        let out = Tensor::from_elem(IxDyn(&[]), a.value().sum());
        let shape = a.value().raw_dim();
        self.record(out, &[a], move |g, _| {
            let v = *g.iter().next().unwrap();
            vec![Some(Tensor::from_elem(shape.clone(), v))]
        })
    }

    pub fn mean_all(&self, a: &Var) -> Var {
        let n = a.value().len().max(1) as f32;
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / n)
    }

    /// Mean over one axis (removed).
    pub fn mean_axis(&self, a: &Var, axis: usize) -> Var {
        let n = a.shape()[axis];
        let out = a.value().mean_axis(Axis(axis)).expect("non-empty axis");
        self.record(out, &[a], move |g, _| {
            let expanded = g.clone().insert_axis(Axis(axis));
            let mut shape = g.shape().to_vec();
            shape.insert(axis, n);
            let full = expanded.broadcast(IxDyn(&shape)).unwrap().to_owned() / n as f32;
            vec![Some(full)]
        })
    }

    /// Matrix product. Supports (m,k)x(k,n) and batched (..,m,k)x(..,k,n)
    /// with identical leading dims.
    pub fn matmul(&self, a: &Var, b: &Var) -> Var {
        let out = batched_matmul(a.value(), b.value(), false, false);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| batched_matmul(g, &bv, false, true)),
                needs[1].then(|| batched_matmul(&av, g, true, false)),
            ]
        })
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is (out, in).
    pub fn linear(&self, x: &Var, w: &Var, b: Option<&Var>) -> Var {
        let xs = contiguous(x.value());
        let x2 = rows_view(&xs);
        let w2 = as_2d(w.value());
        let mut y = x2.dot(&w2.t());
        if let Some(b) = b {
            y += &b.value().view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = w2.nrows();
        let out = y.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let x_shape = x.shape().to_vec();
        let xv = std::sync::Arc::new(xs);
        let wv = w.value.clone();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.record(out, &parents, move |g, needs| {
            let gc = contiguous(g);
            let g2 = rows_view(&gc);
            let w2 = as_2d(&wv);
            let mut res = Vec::with_capacity(3);
            res.push(needs[0].then(|| {
                g2.dot(&w2).into_dyn().into_shape_with_order(IxDyn(&x_shape)).unwrap()
            }));
            res.push(needs[1].then(|| g2.t().dot(&rows_view(&xv)).into_dyn()));
            if has_bias {
                res.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
            }
            res
        })
    }

    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Var {
        let out = contiguous(a.value()).into_shape_with_order(IxDyn(shape)).expect("reshape size");
        let orig = a.shape().to_vec();
        self.record(out, &[a], move |g, _| {
            vec![Some(contiguous(g).into_shape_with_order(IxDyn(&orig)).unwrap())]
        })
    }

    pub fn permute(&self, a: &Var, axes: &[usize]) -> Var {
        let out = contiguous(&a.value().clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.record(out, &[a], move |g, _| {
            vec![Some(contiguous(&g.clone().permuted_axes(IxDyn(&inverse))))]
        })
    }

    pub fn concat(&self, parts: &[&Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        self.record(out, parts, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let piece = need.then(|| {
                        g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len)).to_owned()
                    });
                    start += len;
                    piece
                })
                .collect()
        })
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, a: &Var, axis: usize, start: usize, len: usize) -> Var {
        let slice = ndarray::Slice::from(start..start + len);
        let out = a.value().slice_axis(Axis(axis), slice).to_owned();
        let full = a.shape().to_vec();
        self.record(out, &[a], move |g, _| {
            let mut dx = Tensor::zeros(IxDyn(&full));
            dx.slice_axis_mut(Axis(axis), slice).assign(g);
            vec![Some(dx)]
        })
    }

    /// Cyclic shift along the given axes (positive shifts move toward the end).
    pub fn roll(&self, a: &Var, shifts: &[(usize, isize)]) -> Var {
        let out = roll_tensor(a.value(), shifts);
        let back: Vec<(usize, isize)> = shifts.iter().map(|&(ax, s)| (ax, -s)).collect();
        self.record(out, &[a], move |g, _| vec![Some(roll_tensor(g, &back))])
    }

    pub fn softmax_last(&self, a: &Var) -> Var {
        let mut out = contiguous(a.value());
        let last_axis = Axis(out.ndim() - 1);
        for mut row in out.lanes_mut(last_axis) {
            let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let y = out.clone();
        self.record(out, &[a], move |g, _| {
            let last = y.ndim() - 1;
            let dot = (g * &y).sum_axis(Axis(last)).insert_axis(Axis(last));
            vec![Some(&y * &(g - &dot))]
        })
    }

    /// `x / max(||x||, eps)` along the last axis.
    pub fn l2_normalize_last(&self, a: &Var, eps: f32) -> Var {
        let x = contiguous(a.value());
        let last = x.ndim() - 1;
        let norms = x.mapv(|v| v * v).sum_axis(Axis(last)).mapv(|s| s.sqrt().max(eps));
        let norms = norms.insert_axis(Axis(last));
        let out = &x / &norms;
        let y = out.clone();
        self.record(out, &[a], move |g, _| {
            let dot = (g * &y).sum_axis(Axis(last)).insert_axis(Axis(last));
            vec![Some((g - &(&y * &dot)) / &norms)]
        })
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&self, a: &Var, p: f32) -> Var {
        if !self.is_training() || p <= 0.0 {
            return a.clone();
        }
        let keep = 1.0 - p;
        let mask = self.with_rng(|rng| {
            Tensor::from_shape_simple_fn(a.value().raw_dim(), || {
                if rng.random::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        });
        let out = a.value() * &mask;
        self.record(out, &[a], move |g, _| vec![Some(g * &mask)])
    }

    /// Row gather from a 2-D tensor; the backward scatters with accumulation.
    pub fn gather_rows(&self, a: &Var, index: &[usize]) -> Var {
        let src = as_2d(a.value());
        let cols = src.ncols();
        let mut out = Array2::<f32>::zeros((index.len(), cols));
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        let rows = src.nrows();
        let index = index.to_vec();
        self.record(out.into_dyn(), &[a], move |g, _| {
            let g2 = as_2d(g);
            let mut acc = Array2::<f32>::zeros((rows, cols));
            for (r, &i) in index.iter().enumerate() {
                let mut dst = acc.row_mut(i);
                dst += &g2.row(r);
            }
            vec![Some(acc.into_dyn())]
        })
    }

    /// Weighted softmax cross-entropy against label-smoothed targets,
    /// averaged over the batch: `mean_i w[y_i] * CE(softmax(z_i), t_i)`.
    pub fn weighted_cross_entropy(
        &self,
        logits: &Var,
        labels: &[usize],
        class_weights: &[f32],
        smoothing: f32,
    ) -> Var {
        let z = as_2d(logits.value());
        let (n, c) = z.dim();
        let mut probs = Array2::<f32>::zeros((n, c));
        let mut targets = Array2::<f32>::zeros((n, c));
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = z.row(i);
            let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            let w = class_weights[labels[i]] as f64;
            let mut sample = 0.0f64;
            for j in 0..c {
                let t = smoothing / c as f32 + if j == labels[i] { 1.0 - smoothing } else { 0.0 };
                targets[[i, j]] = t;
                probs[[i, j]] = ((row[j] as f64) - lse).exp() as f32;
                sample -= t as f64 * (row[j] as f64 - lse);
            }
            loss += w * sample;
        }
        let out = Tensor::from_elem(IxDyn(&[]), (loss / n.max(1) as f64) as f32);
        let weights: Vec<f32> = labels.iter().map(|&y| class_weights[y]).collect();
        self.record(out, &[logits], move |g, _| {
            let scale = *g.iter().next().unwrap() / n.max(1) as f32;
            let mut d = &probs - &targets;
            Zip::from(d.rows_mut()).and(&weights).for_each(|mut row, &w| row *= w * scale);
            vec![Some(d.into_dyn())]
        })
    }
}

/// Batched matmul with optional transposes of the trailing two axes.
fn batched_matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    let a = contiguous(a);
    let b = contiguous(b);
    if a.ndim() == 2 && b.ndim() == 2 {
        let (a2, b2) = (as_2d(&a), as_2d(&b));
        let a2 = if trans_a { a2.reversed_axes() } else { a2 };
        let b2 = if trans_b { b2.reversed_axes() } else { b2 };
        return a2.dot(&b2).into_dyn();
    }
    let nd = a.ndim();
    assert_eq!(nd, b.ndim(), "batched matmul needs equal rank");
    let lead: Vec<usize> = a.shape()[..nd - 2].to_vec();
    assert_eq!(lead, b.shape()[..nd - 2], "batched matmul leading dims");
    let batch: usize = lead.iter().product();
    let (ar, ac) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    let (br, bc) = (b.shape()[nd - 2], b.shape()[nd - 1]);
    let a3 = a.view().into_shape_with_order((batch, ar, ac)).unwrap();
    let b3 = b.view().into_shape_with_order((batch, br, bc)).unwrap();
    let m = if trans_a { ac } else { ar };
    let n = if trans_b { br } else { bc };
    let mut out = ndarray::Array3::<f32>::zeros((batch, m, n));
    for i in 0..batch {
        let ai = a3.slice(s![i, .., ..]);
        let bi = b3.slice(s![i, .., ..]);
        let ai = if trans_a { ai.reversed_axes() } else { ai };
        let bi = if trans_b { bi.reversed_axes() } else { bi };
        general_mat_mul(1.0, &ai, &bi, 0.0, &mut out.slice_mut(s![i, .., ..]));
    }
    let mut shape = lead;
    shape.extend([m, n]);
    out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn roll_tensor(t: &Tensor, shifts: &[(usize, isize)]) -> Tensor {
    let mut out = t.clone();
    for &(axis, shift) in shifts {
        let len = out.shape()[axis] as isize;
        if len == 0 {
            continue;
        }
        let k = shift.rem_euclid(len) as usize;
        if k == 0 {
            continue;
        }
        let len = len as usize;
        let src = out.clone();
        // out[(i + k) % len] = src[i]
        out.slice_axis_mut(Axis(axis), ndarray::Slice::from(k..))
            .assign(&src.slice_axis(Axis(axis), ndarray::Slice::from(..len - k)));
        out.slice_axis_mut(Axis(axis), ndarray::Slice::from(..k))
            .assign(&src.slice_axis(Axis(axis), ndarray::Slice::from(len - k..)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn grad_broadcast_mul_add() {
        let b = rand_tensor(&[1, 3], 2);
        check(&rand_tensor(&[2, 3], 1), |g, x| {
            let bv = g.constant(b.clone());
            let y = g.mul(x, &bv);
            g.add(&y, x)
        }, 1e-2);
        let a = rand_tensor(&[4, 3], 3);
        check(&rand_tensor(&[1, 3], 4), |g, x| {
            let av = g.constant(a.clone());
            g.mul(&av, x)
        }, 1e-2);
    }

    #[test]
    fn grad_matmul_and_linear() {
        let w = rand_tensor(&[5, 3], 9);
        check(&rand_tensor(&[2, 4, 3], 5), |g, x| {
            let wv = g.constant(w.clone());
            g.linear(x, &wv, None)
        }, 1e-2);
        check(&rand_tensor(&[5, 3], 6), |g, w| {
            let x = g.constant(rand_tensor(&[4, 3], 7));
            let b = g.constant(rand_tensor(&[5], 8));
            let y = g.linear(&x, w, Some(&b));
            g.mul(&y, &y)
        }, 1e-2);
        let b = rand_tensor(&[2, 4, 3], 11);
        check(&rand_tensor(&[2, 3, 4], 10), |g, a| {
            let bv = g.constant(b.clone());
            let y = g.matmul(a, &bv);
            g.mul(&y, &y)
        }, 1e-2);
    }

    #[test]
    fn grad_nonlinearities() {
        let x = rand_tensor(&[3, 4], 12);
        check(&x, |g, x| g.gelu(x), 1e-2);
        check(&x, |g, x| g.sigmoid(x), 1e-2);
        check(&x, |g, x| g.exp(x), 1e-2);
        check(&x, |g, x| {
            let s = g.softmax_last(x);
            let w = g.constant(rand_tensor(&[3, 4], 13));
            g.mul(&s, &w)
        }, 1e-2);
        check(&x, |g, x| {
            let s = g.l2_normalize_last(x, 1e-6);
            let w = g.constant(rand_tensor(&[3, 4], 14));
            g.mul(&s, &w)
        }, 2e-2);
    }

    #[test]
    fn grad_shape_ops() {
        let w = rand_tensor(&[3, 2, 4], 15);
        check(&rand_tensor(&[2, 3, 4], 16), |g, x| {
            let p = g.permute(x, &[1, 0, 2]);
            let r = g.roll(&p, &[(0, 1), (2, -1)]);
            let wv = g.constant(w.clone());
            g.mul(&r, &wv)
        }, 1e-2);
        check(&rand_tensor(&[2, 3], 17), |g, x| {
            let y = g.concat(&[x, x], 1);
            let y = g.reshape(&y, &[3, 4]);
            let w = g.constant(rand_tensor(&[3, 4], 18));
            g.mul(&y, &w)
        }, 1e-2);
        check(&rand_tensor(&[3, 4], 23), |g, x| {
            let y = g.narrow(x, 1, 1, 2);
            g.mul(&y, &y)
        }, 1e-2);
        check(&rand_tensor(&[4, 3], 19), |g, x| {
            let y = g.gather_rows(x, &[0, 2, 2, 3]);
            let w = g.constant(rand_tensor(&[4, 3], 20));
            g.mul(&y, &w)
        }, 1e-2);
        check(&rand_tensor(&[2, 5, 3], 21), |g, x| {
            let y = g.mean_axis(x, 1);
            g.mul(&y, &y)
        }, 1e-2);
    }

    #[test]
    fn grad_cross_entropy() {
        check(&rand_tensor(&[4, 3], 22), |g, z| {
            g.weighted_cross_entropy(z, &[0, 2, 1, 2], &[0.5, 1.0, 1.5], 0.1)
        }, 1e-2);
    }

    #[test]
    fn roll_moves_toward_end() {
        let t = ndarray::array![0.0f32, 1.0, 2.0, 3.0].into_dyn();
        let r = roll_tensor(&t, &[(0, 1)]);
        assert_eq!(r.as_slice().unwrap(), &[3.0, 0.0, 1.0, 2.0]);
        let r = roll_tensor(&t, &[(0, -1)]);
        assert_eq!(r.as_slice().unwrap(), &[1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let g = Graph::inference();
        let x = g.constant(rand_tensor(&[8], 1));
        let y = g.dropout(&x, 0.5);
        assert_eq!(x.value(), y.value());
    }
}
