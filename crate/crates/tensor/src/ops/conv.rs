//! Spatial ops over `[B, C, H, W]` tensors.

use crate::graph::{BackwardArgs, Var};
use crate::ops::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.p();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.p();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims4(t: &Tensor, what: &str) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "{what} expects [B, C, H, W], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

impl Var {
    /// 2-D cross-correlation with zero padding. `weight` is `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
        let (b, c_in, h, w) = dims4(self.value(), "conv2d input");
        let (c_out, wc_in, kh, kw) = dims4(weight.value(), "conv2d weight");
        assert_eq!(c_in, wc_in, "conv2d channel mismatch");
        assert!(stride >= 1);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d kernel larger than input"
        );
        let g = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        if let Some(bias) = bias {
            assert_eq!(bias.shape(), &[c_out], "conv2d bias shape");
        }
        let (k, p) = (g.k(), g.p());
        let mut cols = vec![0.0; k * p];
        let mut out = vec![0.0; b * c_out * p];
        let x = self.value().data();
        let wd = weight.value().data();
        for bi in 0..b {
            im2col(
                &x[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                &g,
                &mut cols,
            );
            let o = &mut out[bi * c_out * p..(bi + 1) * c_out * p];
            gemm(
                c_out,
                k,
                p,
                MatRef::row_major(wd, k),
                MatRef::row_major(&cols, p),
                0.0,
                o,
            );
            if let Some(bias) = bias {
                for (co, &bv) in bias.value().data().iter().enumerate() {
                    for v in &mut o[co * p..(co + 1) * p] {
                        *v += bv;
                    }
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        Var::from_op(
            Tensor::from_vec(&[b, c_out, g.oh, g.ow], out),
            parents,
            Box::new(move |args: &BackwardArgs<'_>| {
                let x = args.parents[0].value().data();
                let wd = args.parents[1].value().data();
                let gout = args.grad.data();
                let need_x = args.parents[0].requires_grad();
                let need_w = args.parents[1].requires_grad();
                let mut gx = need_x.then(|| vec![0.0; x.len()]);
                let mut gw = need_w.then(|| vec![0.0; wd.len()]);
                let mut cols = vec![0.0; k * p];
                let mut gcols = vec![0.0; k * p];
                for bi in 0..b {
                    let go = &gout[bi * c_out * p..(bi + 1) * c_out * p];
                    if let Some(gw) = gw.as_mut() {
                        im2col(
                            &x[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                            &g,
                            &mut cols,
                        );
                        // dW += dOut · colsᵀ
                        gemm(
                            c_out,
                            p,
                            k,
                            MatRef::row_major(go, p),
                            MatRef::transposed(&cols, p),
                            1.0,
                            gw,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dcols = Wᵀ · dOut
                        gemm(
                            k,
                            c_out,
                            p,
                            MatRef::transposed(wd, k),
                            MatRef::row_major(go, p),
                            0.0,
                            &mut gcols,
                        );
                        col2im(
                            &gcols,
                            &g,
                            &mut gx[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                        );
                    }
                }
                let mut grads = vec![
                    gx.map(|d| Tensor::from_vec(args.parents[0].shape(), d)),
                    gw.map(|d| Tensor::from_vec(args.parents[1].shape(), d)),
                ];
                if args.parents.len() == 3 {
                    let gb = args.parents[2].requires_grad().then(|| {
                        let mut gb = vec![0.0; c_out];
                        for bi in 0..b {
                            for (co, acc) in gb.iter_mut().enumerate() {
                                let base = (bi * c_out + co) * p;
                                *acc += gout[base..base + p].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_vec(&[c_out], gb)
                    });
                    grads.push(gb);
                }
                grads
            }),
        )
    }

    /// Pads H and W by `pad` on every side, repeating the edge values.
    pub fn pad_replicate(&self, pad: usize) -> Var {
        let (b, c, h, w) = dims4(self.value(), "pad_replicate");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src_index = move |y: usize, x: usize| {
            let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
            let sx = (x as isize - pad as isize).clamp(0, w as isize - 1) as usize;
            sy * w + sx
        };
        let x = self.value().data();
        let mut out = Vec::with_capacity(b * c * hp * wp);
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..hp {
                for xx in 0..wp {
                    out.push(x[base + src_index(y, xx)]);
                }
            }
        }
        Var::from_op(
            Tensor::from_vec(&[b, c, hp, wp], out),
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data();
                let mut gin = vec![0.0; b * c * h * w];
                for plane in 0..b * c {
                    for y in 0..hp {
                        for xx in 0..wp {
                            gin[plane * h * w + src_index(y, xx)] += g[(plane * hp + y) * wp + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], gin))]
            }),
        )
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Var {
        let (b, c, h, w) = dims4(self.value(), "upsample_bilinear");
        if (h, w) == (oh, ow) {
            return self.clone();
        }
        let ys = interp_table(h, oh);
        let xs = interp_table(w, ow);
        let x = self.value().data();
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        Var::from_op(
            Tensor::from_vec(&[b, c, oh, ow], out),
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data();
                let mut gin = vec![0.0; b * c * h * w];
                for plane in 0..b * c {
                    let gi = &mut gin[plane * h * w..(plane + 1) * h * w];
                    let go = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let v = go[oy * ow + ox];
                            gi[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                            gi[y0 * w + x1] += v * (1.0 - ly) * lx;
                            gi[y1 * w + x0] += v * ly * (1.0 - lx);
                            gi[y1 * w + x1] += v * ly * lx;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], gin))]
            }),
        )
    }
}

/// Source taps `(lo, hi, frac)` for each output coordinate.
fn interp_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Average pool over `[B, C, H, W]` with stride 1 and zero padding counted in the
/// denominator (`k²` always), via an integral image.
pub fn avg_pool_same(x: &Tensor, k: usize) -> Tensor {
    assert!(k % 2 == 1, "avg_pool_same needs an odd kernel");
    let (b, c, h, w) = dims4(x, "avg_pool_same");
    let r = (k / 2) as isize;
    let mut out = vec![0.0; x.numel()];
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let mut row = 0.0;
            for xx in 0..w {
                row += src[y * w + xx];
                integral[(y + 1) * (w + 1) + xx + 1] = integral[y * (w + 1) + xx + 1] + row;
            }
        }
        let norm = 1.0 / (k * k) as f64;
        for y in 0..h as isize {
            let y0 = (y - r).max(0) as usize;
            let y1 = ((y + r + 1) as usize).min(h);
            for xx in 0..w as isize {
                let x0 = (xx - r).max(0) as usize;
                let x1 = ((xx + r + 1) as usize).min(w);
                let s = integral[y1 * (w + 1) + x1]
                    - integral[y0 * (w + 1) + x1]
                    - integral[y1 * (w + 1) + x0]
                    + integral[y0 * (w + 1) + x0];
                out[plane * h * w + y as usize * w + xx as usize] = s * norm;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn area_downsample(x: &Tensor, factor: usize) -> Tensor {
    let (b, c, h, w) = dims4(x, "area_downsample");
    assert!(
        h % factor == 0 && w % factor == 0,
        "area_downsample needs divisible size"
    );
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; b * c * oh * ow];
    let norm = 1.0 / (factor * factor) as f64;
    for plane in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                out[(plane * oh + y / factor) * ow + xx / factor] +=
                    x.data()[(plane * h + y) * w + xx];
            }
        }
    }
    for v in &mut out {
        *v *= norm;
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}
