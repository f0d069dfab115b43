use crate::graph::{BackwardArgs, Var};
use crate::ops::linalg::{gemm, MatRef};
use crate::ops::reduce::softmax_in_place;
use crate::tensor::Tensor;

struct AttnDims {
    b: usize,
    h: usize,
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
}

fn check_dims(q: &Tensor, k: &Tensor, v: &Tensor, key_scale: Option<&Tensor>) -> AttnDims {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    assert!(
        qs.len() == 4 && ks.len() == 4 && vs.len() == 4,
        "attention expects [B, H, N, d]"
    );
    assert_eq!(&qs[..2], &ks[..2], "attention q/k batch-head mismatch");
    assert_eq!(&ks[..3], &vs[..3], "attention k/v mismatch");
    assert_eq!(qs[3], ks[3], "attention q/k width mismatch");
    if let Some(s) = key_scale {
        assert_eq!(s.shape(), &[qs[0], ks[2]], "key scale must be [B, N_k]");
    }
    AttnDims {
        b: qs[0],
        h: qs[1],
        nq: qs[2],
        nk: ks[2],
        d: qs[3],
        dv: vs[3],
    }
}

/// Raw scaled logits `q·kᵀ / √d` for one (batch, head) block.
fn raw_logits(q: &[f64], k: &[f64], dims: &AttnDims, out: &mut [f64]) {
    gemm(
        dims.nq,
        dims.d,
        dims.nk,
        MatRef::row_major(q, dims.d),
        MatRef::transposed(k, dims.d),
        0.0,
        out,
    );
    let inv = 1.0 / (dims.d as f64).sqrt();
    for v in out.iter_mut() {
        *v *= inv;
    }
}

fn probabilities(q: &Tensor, k: &Tensor, key_scale: Option<&Tensor>, dims: &AttnDims) -> Vec<f64> {
    let (nq, nk, d) = (dims.nq, dims.nk, dims.d);
    let mut probs = vec![0.0; dims.b * dims.h * nq * nk];
    for bi in 0..dims.b {
        for hi in 0..dims.h {
            let blk = bi * dims.h + hi;
            let a = &mut probs[blk * nq * nk..(blk + 1) * nq * nk];
            raw_logits(
                &q.data()[blk * nq * d..(blk + 1) * nq * d],
                &k.data()[blk * nk * d..(blk + 1) * nk * d],
                dims,
                a,
            );
            if let Some(s) = key_scale {
                let srow = &s.data()[bi * nk..(bi + 1) * nk];
                for row in a.chunks_mut(nk) {
                    for (l, &sc) in row.iter_mut().zip(srow) {
                        *l *= sc;
                    }
                }
            }
            for row in a.chunks_mut(nk) {
                softmax_in_place(row);
            }
        }
    }
    probs
}

/// Attention probabilities `softmax((q·kᵀ/√d) ⊙ s)` as a `[B, H, N_q, N_k]` tensor.
pub fn attention_weights(q: &Tensor, k: &Tensor, key_scale: Option<&Tensor>) -> Tensor {
    let dims = check_dims(q, k, k, key_scale);
    let probs = probabilities(q, k, key_scale, &dims);
    Tensor::from_vec(&[dims.b, dims.h, dims.nq, dims.nk], probs)
}

impl Var {
    /// Fused scaled dot-product attention.
    ///
    /// `q: [B, H, N_q, d]`, `k: [B, H, N_k, d]`, `v: [B, H, N_k, d_v]`. When
    /// `key_scale` (`[B, N_k]`) is given, the scaled logits of every query row
    /// are multiplied by it elementwise before the softmax.
    pub fn attention(q: &Var, k: &Var, v: &Var, key_scale: Option<&Var>) -> Var {
        let dims = check_dims(q.value(), k.value(), v.value(), key_scale.map(Var::value));
        let probs = probabilities(q.value(), k.value(), key_scale.map(Var::value), &dims);
        let (b, h, nq, nk, d, dv) = (dims.b, dims.h, dims.nq, dims.nk, dims.d, dims.dv);
        let mut out = vec![0.0; b * h * nq * dv];
        for blk in 0..b * h {
            gemm(
                nq,
                nk,
                dv,
                MatRef::row_major(&probs[blk * nq * nk..(blk + 1) * nq * nk], nk),
                MatRef::row_major(&v.value().data()[blk * nk * dv..(blk + 1) * nk * dv], dv),
                0.0,
                &mut out[blk * nq * dv..(blk + 1) * nq * dv],
            );
        }
        let mut parents = vec![q.clone(), k.clone(), v.clone()];
        if let Some(s) = key_scale {
            parents.push(s.clone());
        }
        Var::from_op(
            Tensor::from_vec(&[b, h, nq, dv], out),
            parents,
            Box::new(move |args: &BackwardArgs<'_>| {
                let (qv, kv, vv) = (
                    args.parents[0].value(),
                    args.parents[1].value(),
                    args.parents[2].value(),
                );
                let scale = args.parents.get(3).map(|s| s.value());
                let gout = args.grad.data();
                let mut gq = vec![0.0; qv.numel()];
                let mut gk = vec![0.0; kv.numel()];
                let mut gvv = vec![0.0; vv.numel()];
                let mut gs = scale.map(|s| vec![0.0; s.numel()]);
                let mut da = vec![0.0; nq * nk];
                let mut raw = vec![0.0; nq * nk];
                let inv = 1.0 / (d as f64).sqrt();
                for bi in 0..b {
                    for hi in 0..h {
                        let blk = bi * h + hi;
                        let a = &probs[blk * nq * nk..(blk + 1) * nq * nk];
                        let go = &gout[blk * nq * dv..(blk + 1) * nq * dv];
                        let vb = &vv.data()[blk * nk * dv..(blk + 1) * nk * dv];
                        // dV = Aᵀ · dOut
                        gemm(
                            nk,
                            nq,
                            dv,
                            MatRef::transposed(a, nk),
                            MatRef::row_major(go, dv),
                            0.0,
                            &mut gvv[blk * nk * dv..(blk + 1) * nk * dv],
                        );
                        // dA = dOut · Vᵀ, then through the softmax
                        gemm(
                            nq,
                            dv,
                            nk,
                            MatRef::row_major(go, dv),
                            MatRef::transposed(vb, dv),
                            0.0,
                            &mut da,
                        );
                        for (drow, arow) in da.chunks_mut(nk).zip(a.chunks(nk)) {
                            let dot: f64 = drow.iter().zip(arow).map(|(x, y)| x * y).sum();
                            for (dl, &p) in drow.iter_mut().zip(arow) {
                                *dl = p * (*dl - dot);
                            }
                        }
                        let qb = &qv.data()[blk * nq * d..(blk + 1) * nq * d];
                        let kb = &kv.data()[blk * nk * d..(blk + 1) * nk * d];
                        if let (Some(s), Some(gs)) = (scale, gs.as_mut()) {
                            raw_logits(qb, kb, &dims, &mut raw);
                            let srow = &s.data()[bi * nk..(bi + 1) * nk];
                            let gsrow = &mut gs[bi * nk..(bi + 1) * nk];
                            for (drow, rrow) in da.chunks_mut(nk).zip(raw.chunks(nk)) {
                                for j in 0..nk {
                                    gsrow[j] += drow[j] * rrow[j];
                                    drow[j] *= srow[j];
                                }
                            }
                        }
                        // logits = q·kᵀ·inv ⇒ dq = dL·k·inv, dk = dLᵀ·q·inv
                        for v in da.iter_mut() {
                            *v *= inv;
                        }
                        gemm(
                            nq,
                            nk,
                            d,
                            MatRef::row_major(&da, nk),
                            MatRef::row_major(kb, d),
                            0.0,
                            &mut gq[blk * nq * d..(blk + 1) * nq * d],
                        );
                        gemm(
                            nk,
                            nq,
                            d,
                            MatRef::transposed(&da, nk),
                            MatRef::row_major(qb, d),
                            0.0,
                            &mut gk[blk * nk * d..(blk + 1) * nk * d],
                        );
                    }
                }
                let mut grads = vec![
                    Some(Tensor::from_vec(qv.shape(), gq)),
                    Some(Tensor::from_vec(kv.shape(), gk)),
                    Some(Tensor::from_vec(vv.shape(), gvv)),
                ];
                if let (Some(s), Some(gs)) = (scale, gs) {
                    grads.push(Some(Tensor::from_vec(s.shape(), gs)));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_key_scale_is_bit_identical() {
        let q = Tensor::from_vec(&[1, 1, 2, 2], vec![0.3, -1.2, 2.0, 0.7]);
        let k = Tensor::from_vec(&[1, 1, 3, 2], vec![1.0, 0.5, -0.25, 2.0, 0.0, 1.0]);
        let v = Tensor::from_vec(&[1, 1, 3, 1], vec![1.0, 2.0, 3.0]);
        let plain = Var::attention(
            &Var::constant(q.clone()),
            &Var::constant(k.clone()),
            &Var::constant(v.clone()),
            None,
        );
        let ones = Var::constant(Tensor::ones(&[1, 3]));
        let scaled = Var::attention(
            &Var::constant(q),
            &Var::constant(k),
            &Var::constant(v),
            Some(&ones),
        );
        assert_eq!(plain.value(), scaled.value());
    }
}
