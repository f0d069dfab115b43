//! Uncertainty-aware evidential decoder.
//!
//! The coarsest encoded level yields a Dirichlet field whose uncertainty is
//! embedded per token and used as the query of evidence-guided attention.
//! Finer levels are fused with the refined coarser level and refined the same way.

use rand::Rng;
use refcod_tensor::nn::{Conv2d, Linear, ParamGroup, ParamId, ParamStore, Session};
use refcod_tensor::{Tensor, Var};

use crate::config::{AblationConfig, GateActivation, ModelConfig};
use crate::evidential::{DirichletField, UncertaintyWeights};
use crate::filters::sobel_magnitude_var;
use crate::layers::{map_to_tokens, tokens_to_map};

/// Two conv branches (semantic features, Sobel response of their channel mean)
/// summed and passed through softplus, giving `[B, 2, H, W]` evidence ≥ 0.
#[derive(Clone, Debug)]
pub struct EvidenceHead {
    pub semantic: [Conv2d; 2],
    pub edge: [Conv2d; 2],
}

impl EvidenceHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Head;
        let hidden = (dim / 2).max(4);
        Self {
            semantic: [
                Conv2d::new(
                    store,
                    "uaed.evidence.semantic0",
                    dim,
                    hidden,
                    3,
                    1,
                    1,
                    true,
                    g,
                    rng,
                ),
                Conv2d::new(
                    store,
                    "uaed.evidence.semantic1",
                    hidden,
                    2,
                    3,
                    1,
                    1,
                    true,
                    g,
                    rng,
                ),
            ],
            edge: [
                Conv2d::new(store, "uaed.evidence.edge0", 1, 8, 3, 1, 1, true, g, rng),
                Conv2d::new(store, "uaed.evidence.edge1", 8, 2, 3, 1, 1, true, g, rng),
            ],
        }
    }

    pub fn forward(&self, s: &Session<'_>, map: &Var) -> Var {
        let semantic = self.semantic[1].forward(s, &self.semantic[0].forward(s, map).relu());
        let edges = sobel_magnitude_var(&map.mean_axes(&[1]), 1e-6);
        let boundary = self.edge[1].forward(s, &self.edge[0].forward(s, &edges).relu());
        semantic.add(&boundary).softplus()
    }
}

/// Per-location MLP `1 → D → D` lifting the scalar uncertainty to a token embedding.
#[derive(Clone, Debug)]
pub struct UncertaintyEmbedding {
    pub first: Linear,
    pub second: Linear,
}

impl UncertaintyEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(store, "uaed.uemb.0", 1, dim, ParamGroup::Head, rng),
            second: Linear::new(store, "uaed.uemb.1", dim, dim, ParamGroup::Head, rng),
        }
    }

    /// `[B, 1, H, W]` uncertainty → `[B, H·W, D]`.
    pub fn forward(&self, s: &Session<'_>, field: &Var) -> Var {
        let tokens = map_to_tokens(field);
        self.second
            .forward(s, &self.first.forward(s, &tokens).gelu())
    }
}

/// Single-head attention with queries from the uncertainty embedding and logits
/// scaled per key by `1 + w_u · C`.
#[derive(Clone, Debug)]
pub struct EvidenceGuidedAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl EvidenceGuidedAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let lin = |store: &mut ParamStore, p: &str, rng: &mut R| {
            Linear::new(
                store,
                &format!("{name}.{p}"),
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
        }
    }

    /// `uemb` and `features` are `[B, N, D]`; `confidence` is `[B, N]`; `w_u` has one element.
    pub fn forward(
        &self,
        s: &Session<'_>,
        uemb: &Var,
        features: &Var,
        confidence: Option<&Var>,
        w_u: &Var,
    ) -> Var {
        let heads = |x: Var| {
            let sh = x.shape().to_vec();
            x.reshape(&[sh[0], 1, sh[1], sh[2]])
        };
        let q = heads(self.q.forward(s, uemb));
        let k = heads(self.k.forward(s, features));
        let v = heads(self.v.forward(s, features));
        let scale = confidence.map(|c| c.mul(w_u).add_scalar(1.0));
        let out = Var::attention(&q, &k, &v, scale.as_ref());
        let sh = out.shape().to_vec();
        out.reshape(&[sh[0], sh[2], sh[3]])
    }
}

/// `S' = S + act(G([S, M])) ⊙ M`.
pub fn gated_residual(
    s: &Session<'_>,
    gate: &Linear,
    x: &Var,
    mixed: &Var,
    act: GateActivation,
) -> Var {
    let logits = gate.forward(s, &Var::concat(&[x.clone(), mixed.clone()], 2));
    let g = match act {
        GateActivation::Sigmoid => logits.sigmoid(),
        GateActivation::Softmax => logits.softmax_last(),
    };
    x.add(&g.mul(mixed))
}

/// One decoding level: optional fusion with the coarser refined tokens, EGA,
/// gated residual and a one-channel prediction head.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub fuse: Option<Linear>,
    pub ega: EvidenceGuidedAttention,
    pub gate: Linear,
    pub head: Linear,
}

/// Everything the decoder produces for one batch.
pub struct DecodeState {
    /// Refined tokens `S'_1..S'_4`.
    pub refined: Vec<Var>,
    /// Full-resolution prediction logits per level (index 0 is the finest).
    pub logits: Vec<Var>,
    pub evidence: Option<Var>,
    pub dirichlet: Option<DirichletField>,
    pub uncertainty_embedding: Var,
}

impl DecodeState {
    /// Predictions `P̂_i = sigmoid(logits_i)`, all in `[0, 1]`.
    pub fn predictions(&self) -> Vec<Var> {
        self.logits.iter().map(Var::sigmoid).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Uaed {
    pub evidence: EvidenceHead,
    pub embedding: UncertaintyEmbedding,
    pub w_u: ParamId,
    /// Index 0 decodes the finest level; index 3 the coarsest.
    pub stages: Vec<DecoderStage>,
    pub side: usize,
    pub image_size: usize,
    pub gate: GateActivation,
    pub weights: UncertaintyWeights,
}

impl Uaed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let g = ParamGroup::Head;
        let stages = (0..4)
            .map(|i| DecoderStage {
                fuse: (i < 3)
                    .then(|| Linear::new(store, &format!("uaed.stage{i}.fuse"), 2 * d, d, g, rng)),
                ega: EvidenceGuidedAttention::new(store, &format!("uaed.stage{i}.ega"), d, rng),
                gate: Linear::new(store, &format!("uaed.stage{i}.gate"), 2 * d, d, g, rng),
                head: Linear::new(store, &format!("uaed.stage{i}.head"), d, 1, g, rng),
            })
            .collect();
        Self {
            evidence: EvidenceHead::new(store, d, rng),
            embedding: UncertaintyEmbedding::new(store, d, rng),
            w_u: store.add("uaed.w_u", Tensor::zeros(&[1]), g),
            stages,
            side: cfg.token_side(),
            image_size: cfg.image_size,
            gate: cfg.gate,
            weights: cfg.uncertainty,
        }
    }

    /// Decodes `S_1..S_4` coarse to fine.
    pub fn forward(
        &self,
        s: &Session<'_>,
        encoded: &[Var],
        ablation: &AblationConfig,
    ) -> DecodeState {
        assert_eq!(encoded.len(), 4, "decoder needs four encoded levels");
        let b = encoded[3].shape()[0];
        let n = self.side * self.side;
        let (evidence, dirichlet, field) = if ablation.euqm {
            let e = self
                .evidence
                .forward(s, &tokens_to_map(&encoded[3], self.side));
            let d = DirichletField::from_evidence(&e, self.weights)
                .expect("softplus evidence is non-negative");
            let u = d.uncertainty.clone();
            (Some(e), Some(d), u)
        } else {
            (
                None,
                None,
                Var::constant(Tensor::zeros(&[b, 1, self.side, self.side])),
            )
        };
        let uemb = self.embedding.forward(s, &field);
        let confidence = dirichlet.as_ref().map(|d| d.confidence.reshape(&[b, n]));
        let w_u = s.param(self.w_u);

        let mut refined: Vec<Option<Var>> = vec![None; 4];
        let mut logits: Vec<Option<Var>> = vec![None; 4];
        for i in (0..4).rev() {
            let stage = &self.stages[i];
            let base = match (&stage.fuse, &refined.get(i + 1).cloned().flatten()) {
                (Some(fuse), Some(coarser)) if ablation.umrm => {
                    fuse.forward(s, &Var::concat(&[encoded[i].clone(), coarser.clone()], 2))
                }
                _ => encoded[i].clone(),
            };
            let out = if ablation.ega {
                let mixed = stage
                    .ega
                    .forward(s, &uemb, &base, confidence.as_ref(), &w_u);
                gated_residual(s, &stage.gate, &base, &mixed, self.gate)
            } else {
                base
            };
            let map = tokens_to_map(&stage.head.forward(s, &out), self.side);
            logits[i] = Some(map.upsample_bilinear(self.image_size, self.image_size));
            refined[i] = Some(out);
        }
        DecodeState {
            refined: refined.into_iter().map(Option::unwrap).collect(),
            logits: logits.into_iter().map(Option::unwrap).collect(),
            evidence,
            dirichlet,
            uncertainty_embedding: uemb,
        }
    }
}
