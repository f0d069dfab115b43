use crate::graph::{BackwardArgs, Var};
use crate::tensor::Tensor;

/// Corner taps of a bilinear read at `(y, x)` on a `gh × gw` grid; out-of-grid taps are dropped.
fn taps(y: f64, x: f64, gh: usize, gw: usize) -> [(Option<usize>, f64, f64, f64); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let idx = |yy: f64, xx: f64| {
        if yy >= 0.0 && xx >= 0.0 && (yy as usize) < gh && (xx as usize) < gw {
            Some(yy as usize * gw + xx as usize)
        } else {
            None
        }
    };
    // (index, weight, d weight / dy, d weight / dx)
    [
        (
            idx(y0, x0),
            (1.0 - fy) * (1.0 - fx),
            -(1.0 - fx),
            -(1.0 - fy),
        ),
        (idx(y0, x0 + 1.0), (1.0 - fy) * fx, -fx, 1.0 - fy),
        (idx(y0 + 1.0, x0), fy * (1.0 - fx), 1.0 - fx, -fy),
        (idx(y0 + 1.0, x0 + 1.0), fy * fx, fx, fy),
    ]
}

impl Var {
    /// Bilinear reads from points laid on a `gh × gw` grid.
    ///
    /// `self` is `[B, G, gh*gw, C]` (row-major grid), `pos` is `[B, G, Q, 2]`
    /// holding `(row, col)` coordinates in grid cells. Reads outside the grid
    /// see zeros. Returns `[B, G, Q, C]`; differentiable in both inputs.
    pub fn bilinear_sample(&self, pos: &Var, gh: usize, gw: usize) -> Var {
        let s = self.shape();
        let ps = pos.shape();
        assert_eq!(s.len(), 4, "bilinear_sample source must be [B, G, P, C]");
        assert_eq!(s[2], gh * gw, "source points do not match the grid");
        assert_eq!(
            ps.len(),
            4,
            "bilinear_sample positions must be [B, G, Q, 2]"
        );
        assert_eq!(ps[3], 2);
        assert_eq!(&ps[..2], &s[..2], "bilinear_sample batch/group mismatch");
        let (bg, p, c, q) = (s[0] * s[1], s[2], s[3], ps[2]);
        let src = self.value().data();
        let pd = pos.value().data();
        let mut out = vec![0.0; bg * q * c];
        for g in 0..bg {
            for qi in 0..q {
                let o = (g * q + qi) * 2;
                let dst = &mut out[(g * q + qi) * c..(g * q + qi + 1) * c];
                for (idx, wgt, _, _) in taps(pd[o], pd[o + 1], gh, gw) {
                    if let Some(i) = idx {
                        if wgt == 0.0 {
                            continue;
                        }
                        let row = &src[(g * p + i) * c..(g * p + i + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
        let mut out_shape = ps[..3].to_vec();
        out_shape.push(c);
        Var::from_op(
            Tensor::from_vec(&out_shape, out),
            vec![self.clone(), pos.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let src = args.parents[0].value();
                let pd = args.parents[1].value().data();
                let g_out = args.grad.data();
                let mut gsrc = args.parents[0]
                    .requires_grad()
                    .then(|| vec![0.0; src.numel()]);
                let mut gpos = args.parents[1].requires_grad().then(|| vec![0.0; pd.len()]);
                for g in 0..bg {
                    for qi in 0..q {
                        let o = (g * q + qi) * 2;
                        let go = &g_out[(g * q + qi) * c..(g * q + qi + 1) * c];
                        for (idx, wgt, dwy, dwx) in taps(pd[o], pd[o + 1], gh, gw) {
                            let Some(i) = idx else { continue };
                            let row = &src.data()[(g * p + i) * c..(g * p + i + 1) * c];
                            if let Some(gs) = gsrc.as_mut() {
                                for (d, &gv) in
                                    gs[(g * p + i) * c..(g * p + i + 1) * c].iter_mut().zip(go)
                                {
                                    *d += wgt * gv;
                                }
                            }
                            if let Some(gp) = gpos.as_mut() {
                                let dot: f64 = row.iter().zip(go).map(|(a, b)| a * b).sum();
                                gp[o] += dwy * dot;
                                gp[o + 1] += dwx * dot;
                            }
                        }
                    }
                }
                vec![
                    gsrc.map(|d| Tensor::from_vec(src.shape(), d)),
                    gpos.map(|d| Tensor::from_vec(args.parents[1].shape(), d)),
                ]
            }),
        )
    }
}
