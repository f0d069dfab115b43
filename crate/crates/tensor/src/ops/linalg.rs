use crate::graph::{BackwardArgs, Var};
use crate::tensor::Tensor;

/// Strided matrix view: element (i, j) lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

/// `c = a · b + beta · c` for an `m×k` times `k×n` product into row-major `c`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // Bounds of the strided reads, so the unsafe call below stays in range.
    assert!(a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
    assert!(b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Var {
    /// Batched matrix product.
    ///
    /// `self` is `[..., m, k]`. `rhs` is either `[..., k, n]` with the same
    /// leading dimensions or a plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&self, rhs: &Var) -> Var {
        let a = self.value();
        let b = rhs.value();
        let ar = a.ndim();
        assert!(ar >= 2 && b.ndim() >= 2, "matmul needs rank >= 2");
        let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
        let br = b.ndim();
        let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
        assert_eq!(k, kb, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let batch: usize = a.shape()[..ar - 2].iter().product();
        let shared_rhs = br == 2;
        if !shared_rhs {
            assert_eq!(
                &a.shape()[..ar - 2],
                &b.shape()[..br - 2],
                "matmul batch dims differ"
            );
        }
        let mut out_shape = a.shape()[..ar - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
            let bd = if shared_rhs {
                b.data()
            } else {
                &b.data()[bi * k * n..(bi + 1) * k * n]
            };
            gemm(
                m,
                k,
                n,
                MatRef::row_major(ad, k),
                MatRef::row_major(bd, n),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        Var::from_op(
            Tensor::from_vec(&out_shape, out),
            vec![self.clone(), rhs.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let a = args.parents[0].value();
                let b = args.parents[1].value();
                let g = args.grad.data();
                let ga = args.parents[0].requires_grad().then(|| {
                    let mut ga = vec![0.0; a.numel()];
                    for bi in 0..batch {
                        let bd = if shared_rhs {
                            b.data()
                        } else {
                            &b.data()[bi * k * n..(bi + 1) * k * n]
                        };
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                            MatRef::transposed(bd, n),
                            0.0,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    Tensor::from_vec(a.shape(), ga)
                });
                let gb = args.parents[1].requires_grad().then(|| {
                    let mut gb = vec![0.0; b.numel()];
                    for bi in 0..batch {
                        let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
                        let gd = &g[bi * m * n..(bi + 1) * m * n];
                        // dB = Aᵀ · dC
                        if shared_rhs {
                            gemm(
                                k,
                                m,
                                n,
                                MatRef::transposed(ad, k),
                                MatRef::row_major(gd, n),
                                1.0,
                                &mut gb,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                MatRef::transposed(ad, k),
                                MatRef::row_major(gd, n),
                                0.0,
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                    Tensor::from_vec(b.shape(), gb)
                });
                vec![ga, gb]
            }),
        )
    }
}
