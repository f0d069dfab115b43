use crate::graph::{BackwardArgs, Var};
use crate::tensor::Tensor;

impl Var {
    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Var {
        let value = Tensor::scalar(self.value().sum());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_>| {
                let g = args.grad.item();
                vec![Some(Tensor::full(args.parents[0].shape(), g))]
            }),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over `axes`; reduced axes are kept with size 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Var {
        let value = self.value().sum_axes_keepdim(axes);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_>| {
                vec![Some(args.grad.expand_to(args.parents[0].shape()))]
            }),
        )
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / count as f64)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var {
        let x = self.value();
        let n = *x.shape().last().expect("softmax on rank-0 tensor");
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let mut gin = args.grad.clone();
                for (g, y) in gin.data_mut().chunks_mut(n).zip(args.out.data().chunks(n)) {
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for (gi, &yi) in g.iter_mut().zip(y) {
                        *gi = yi * (*gi - dot);
                    }
                }
                vec![Some(gin)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that size.
    #[allow(clippy::needless_range_loop)]
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let x = self.value();
        let d = *x.shape().last().expect("layer_norm on rank-0 tensor");
        assert_eq!(gamma.shape(), &[d], "layer_norm gamma shape");
        assert_eq!(beta.shape(), &[d], "layer_norm beta shape");
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mu) * is;
            }
        }
        let g = gamma.value().data();
        let b = beta.value().data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let shape = x.shape().to_vec();
        Var::from_op(
            Tensor::from_vec(&shape, out),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let gout = args.grad.data();
                let gam = args.parents[1].value().data();
                let mut dx = vec![0.0; gout.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let base = r * d;
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let go = gout[base + j];
                        let h = xhat[base + j];
                        dgamma[j] += go * h;
                        dbeta[j] += go;
                        let dh = go * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h;
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let h = xhat[base + j];
                        let dh = gout[base + j] * gam[j];
                        dx[base + j] = inv_std[r] * (dh - mean_dh - h * mean_dh_h);
                    }
                }
                vec![
                    Some(Tensor::from_vec(&shape, dx)),
                    Some(Tensor::from_vec(&[d], dgamma)),
                    Some(Tensor::from_vec(&[d], dbeta)),
                ]
            }),
        )
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
