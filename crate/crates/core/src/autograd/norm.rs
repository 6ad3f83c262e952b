use ndarray::{Array1, Array4, Axis, Ix4, IxDyn};

use super::{Graph, Param, Var};

impl Graph {
    /// Batch normalization over NCHW. Training mode normalizes with batch
    /// statistics and queues running-stat updates; eval mode uses the
    /// running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: &Param,
        running_var: &Param,
        momentum: f32,
        eps: f32,
    ) -> Var {
        let x4 = x.value().view().into_dimensionality::<Ix4>().expect("NCHW tensor");
        let (n, c, h, w) = x4.dim();
        let gam = gamma.value().view().into_shape_with_order(c).unwrap().to_owned();
        let bet = beta.value().view().into_shape_with_order(c).unwrap().to_owned();
        let count = (n * h * w) as f32;

        if !self.is_training() {
            let rm = running_mean.value().view().into_shape_with_order(c).unwrap();
            let rv = running_var.value().view().into_shape_with_order(c).unwrap();
            let inv_std: Array1<f32> = rv.mapv(|v| 1.0 / (v + eps).sqrt());
            let scale = &gam * &inv_std;
            let shift = &bet - &(&rm * &scale);
            let s4 = scale.view().into_shape_with_order((1, c, 1, 1)).unwrap().to_owned();
            let out = &x4 * &s4 + &shift.view().into_shape_with_order((1, c, 1, 1)).unwrap();
            let xv = x.value.clone();
            let rm4 = rm.to_owned().into_shape_with_order((1, c, 1, 1)).unwrap();
            let is4 = inv_std.into_shape_with_order((1, c, 1, 1)).unwrap();
            return self.record(out.into_dyn(), &[x, gamma, beta], move |g, needs| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
                let xhat = (&x4 - &rm4) * &is4;
                vec![
                    needs[0].then(|| (&g4 * &s4).into_dyn()),
                    needs[1].then(|| per_channel_sum(&(&g4 * &xhat)).into_dyn()),
                    needs[2].then(|| per_channel_sum(&g4.to_owned()).into_dyn()),
                ]
            });
        }

        let mean: Array1<f32> = per_channel_sum(&x4.to_owned()) / count;
        let m4 = mean.view().into_shape_with_order((1, c, 1, 1)).unwrap().to_owned();
        let centered = &x4 - &m4;
        let var: Array1<f32> = per_channel_sum(&centered.mapv(|v| v * v)) / count;
        let inv_std: Array1<f32> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let is4 = inv_std.view().into_shape_with_order((1, c, 1, 1)).unwrap().to_owned();
        let xhat = &centered * &is4;
        let g4c = gam.view().into_shape_with_order((1, c, 1, 1)).unwrap().to_owned();
        let out = &xhat * &g4c + &bet.view().into_shape_with_order((1, c, 1, 1)).unwrap();

        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let rm = running_mean.value().view().into_shape_with_order(c).unwrap().to_owned();
        let rv = running_var.value().view().into_shape_with_order(c).unwrap().to_owned();
        let new_rm = &rm * (1.0 - momentum) + &(&mean * momentum);
        let new_rv = &rv * (1.0 - momentum) + &(&var * (momentum * unbiased));
        self.push_buffer_update(running_mean.id(), new_rm.into_shape_with_order(IxDyn(running_mean.shape())).unwrap());
        self.push_buffer_update(running_var.id(), new_rv.into_shape_with_order(IxDyn(running_var.shape())).unwrap());

        self.record(out.into_dyn(), &[x, gamma, beta], move |g, needs| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let dbeta = per_channel_sum(&g4.to_owned());
            let dgamma = per_channel_sum(&(&g4 * &xhat));
            let dx = needs[0].then(|| {
                // dx = gamma*inv_std/N * (N*g - sum(g) - xhat*sum(g*xhat))
                let k = (&gam * &inv_std / count).into_shape_with_order((1, c, 1, 1)).unwrap();
                let sg = dbeta.view().into_shape_with_order((1, c, 1, 1)).unwrap().to_owned();
                let sgx = dgamma.view().into_shape_with_order((1, c, 1, 1)).unwrap().to_owned();
                let inner = &g4 * count - &sg - &(&xhat * &sgx);
                (inner * &k).into_dyn()
            });
            vec![dx, needs[1].then(|| dgamma.into_dyn()), needs[2].then(|| dbeta.into_dyn())]
        })
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f32) -> Var {
        let xs = x.value().as_standard_layout().into_owned();
        let d = *xs.shape().last().unwrap();
        let rows = xs.len() / d;
        let x2 = xs.view().into_shape_with_order((rows, d)).unwrap();
        let mean = x2.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let centered = &x2 - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let gam = gamma.value().view().into_shape_with_order(d).unwrap().to_owned();
        let bet = beta.value().view().into_shape_with_order(d).unwrap().to_owned();
        let out = (&xhat * &gam + &bet).into_dyn().into_shape_with_order(IxDyn(xs.shape())).unwrap();
        let shape = xs.shape().to_vec();
        self.record(out, &[x, gamma, beta], move |g, needs| {
            let gs = g.as_standard_layout();
            let g2 = gs.view().into_shape_with_order((rows, d)).unwrap();
            let dx = needs[0].then(|| {
                let gx = &g2 * &gam;
                let s1 = gx.sum_axis(Axis(1)).insert_axis(Axis(1));
                let s2 = (&gx * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                let inner = &gx * d as f32 - &s1 - &(&xhat * &s2);
                (inner * &inv_std / d as f32).into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()
            });
            vec![
                dx,
                needs[1].then(|| (&g2 * &xhat).sum_axis(Axis(0)).into_dyn()),
                needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()),
            ]
        })
    }
}

fn per_channel_sum(t: &Array4<f32>) -> Array1<f32> {
    t.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))
}
