//! Building blocks shared by the encoder, decoder and refinement stages.

use rand::Rng;
use refcod_tensor::nn::{BatchNorm2d, Conv2d, Linear, ParamGroup, ParamStore, Session};
use refcod_tensor::Var;

/// Convolution, batch normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            c_in,
            c_out,
            kernel,
            stride,
            kernel / 2,
            false,
            group,
            rng,
        );
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), c_out, group);
        Self { conv, bn }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Var {
        self.bn.forward(s, &self.conv.forward(s, x)).relu()
    }
}

/// `[B, N, D]` → `[B, h, N, D/h]`.
pub fn split_heads(x: &Var, heads: usize) -> Var {
    let (b, n, d) = dims3(x);
    x.reshape(&[b, n, heads, d / heads]).permute(&[0, 2, 1, 3])
}

/// `[B, h, N, d]` → `[B, N, h·d]`.
pub fn merge_heads(x: &Var) -> Var {
    let s = x.shape();
    let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3]).reshape(&[b, n, h * d])
}

/// `[B, C, H, W]` → `[B, H·W, C]` in row-major token order.
pub fn map_to_tokens(x: &Var) -> Var {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
}

/// `[B, N, C]` → `[B, C, side, side]`.
pub fn tokens_to_map(x: &Var, side: usize) -> Var {
    let (b, n, c) = dims3(x);
    assert_eq!(n, side * side, "token count {n} is not {side}²");
    x.permute(&[0, 2, 1]).reshape(&[b, c, side, side])
}

pub(crate) fn dims3(x: &Var) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expected [B, N, D], got {s:?}");
    (s[0], s[1], s[2])
}

/// Multi-head attention with query, key, value and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let lin = |store: &mut ParamStore, part: &str, rng: &mut R| {
            Linear::new(
                store,
                &format!("{name}.{part}"),
                dim,
                dim,
                ParamGroup::Head,
                rng,
            )
        };
        Self {
            q: lin(store, "q", rng),
            k: lin(store, "k", rng),
            v: lin(store, "v", rng),
            out: lin(store, "out", rng),
            heads,
        }
    }

    /// Queries from `x_q`, keys and values from `x_kv`; `key_scale` (`[B, N_k]`)
    /// multiplies every logit row.
    pub fn forward(&self, s: &Session<'_>, x_q: &Var, x_kv: &Var, key_scale: Option<&Var>) -> Var {
        let q = split_heads(&self.q.forward(s, x_q), self.heads);
        let k = split_heads(&self.k.forward(s, x_kv), self.heads);
        let v = split_heads(&self.v.forward(s, x_kv), self.heads);
        let mixed = Var::attention(&q, &k, &v, key_scale);
        self.out.forward(s, &merge_heads(&mixed))
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(
                store,
                &format!("{name}.up"),
                dim,
                hidden,
                ParamGroup::Head,
                rng,
            ),
            down: Linear::new(
                store,
                &format!("{name}.down"),
                hidden,
                dim,
                ParamGroup::Head,
                rng,
            ),
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Var {
        self.down.forward(s, &self.up.forward(s, x).gelu())
    }
}
