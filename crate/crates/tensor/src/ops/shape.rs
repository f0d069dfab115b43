use crate::graph::{BackwardArgs, Var};
use crate::tensor::Tensor;

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self.value().clone().reshape(shape);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_>| {
                vec![Some(args.grad.clone().reshape(args.parents[0].shape()))]
            }),
        )
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        let value = self.value().permute(perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| vec![Some(args.grad.permute(&inverse))]),
        )
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Var {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty(), "concat of nothing");
        let first = vars[0].shape();
        for v in vars {
            assert_eq!(v.shape().len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in v.shape().iter().zip(first).enumerate() {
                assert!(
                    i == axis || a == b,
                    "concat shape mismatch {:?} vs {:?}",
                    v.shape(),
                    first
                );
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let sizes: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in vars.iter().zip(&sizes) {
                let chunk = s * inner;
                data.extend_from_slice(&v.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Var::from_op(
            Tensor::from_vec(&shape, data),
            vars.to_vec(),
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data();
                let mut outs: Vec<Vec<f64>> = sizes
                    .iter()
                    .map(|&s| Vec::with_capacity(outer * s * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (buf, &s) in outs.iter_mut().zip(&sizes) {
                        let chunk = s * inner;
                        buf.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                outs.into_iter()
                    .zip(args.parents)
                    .map(|(buf, p)| p.requires_grad().then(|| Tensor::from_vec(p.shape(), buf)))
                    .collect()
            }),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape_in = self.shape().to_vec();
        assert!(start + len <= shape_in[axis], "narrow out of range");
        let outer: usize = shape_in[..axis].iter().product();
        let inner: usize = shape_in[axis + 1..].iter().product();
        let dim = shape_in[axis];
        let mut shape = shape_in.clone();
        shape[axis] = len;
        let src = self.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        Var::from_op(
            Tensor::from_vec(&shape, data),
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let mut gin = vec![0.0; outer * dim * inner];
                let g = args.grad.data();
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    gin[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_vec(&shape_in, gin))]
            }),
        )
    }
}
