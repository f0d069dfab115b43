//! Boundary-aware refinement: a gated, signed correction of a prediction's logits
//! driven by an image edge prior.

use rand::Rng;
use refcod_tensor::nn::{Conv2d, ParamGroup, ParamStore, Session};
use refcod_tensor::Var;

use crate::filters::sobel_magnitude_var;

/// `conv3×3(2 → hidden) → ReLU → conv3×3(hidden → 1)`.
#[derive(Clone, Debug)]
pub struct Branch {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl Branch {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Head;
        Self {
            first: Conv2d::new(
                store,
                &format!("{name}.0"),
                2,
                hidden,
                3,
                1,
                1,
                true,
                g,
                rng,
            ),
            second: Conv2d::new(
                store,
                &format!("{name}.1"),
                hidden,
                1,
                3,
                1,
                1,
                true,
                g,
                rng,
            ),
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Var {
        self.second.forward(s, &self.first.forward(s, x).relu())
    }
}

/// Output of one refinement pass; every map is `[B, 1, H, W]`.
pub struct Refinement {
    pub gate: Var,
    pub delta: Var,
    /// `logit + gate ⊙ delta`, the pre-sigmoid refined map.
    pub logits: Var,
}

impl Refinement {
    pub fn prob(&self) -> Var {
        self.logits.sigmoid()
    }
}

/// Shared across the supervised scales.
#[derive(Clone, Debug)]
pub struct Barm {
    pub edge: Conv2d,
    pub attn: Branch,
    pub refine: Branch,
}

impl Barm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Self {
        Self {
            edge: Conv2d::new(
                store,
                "barm.edge",
                1,
                1,
                3,
                1,
                1,
                true,
                ParamGroup::Head,
                rng,
            ),
            attn: Branch::new(store, "barm.attn", hidden, rng),
            refine: Branch::new(store, "barm.refine", hidden, rng),
        }
    }

    /// Learned 3×3 conv over the Sobel magnitude of the grayscale image: `[B, 1, H, W]`.
    pub fn edge_prior(&self, s: &Session<'_>, image: &Var) -> Var {
        self.edge
            .forward(s, &sobel_magnitude_var(&grayscale(image), 1e-12))
    }

    /// Gate `sigmoid(f_attn([P̂, Edge]))` and signed correction `f_ref([P̂, Edge])`.
    pub fn dual_branch(&self, s: &Session<'_>, logits: &Var, edge: &Var) -> (Var, Var) {
        let x = Var::concat(&[logits.clone(), edge.clone()], 1);
        (
            self.attn.forward(s, &x).sigmoid(),
            self.refine.forward(s, &x),
        )
    }

    pub fn forward(&self, s: &Session<'_>, logits: &Var, edge: &Var) -> Refinement {
        let (gate, delta) = self.dual_branch(s, logits, edge);
        let refined = selective_refine(logits, &gate, &delta);
        Refinement {
            gate,
            delta,
            logits: refined,
        }
    }
}

/// `logit + gate ⊙ delta`; its sigmoid is the refined prediction.
pub fn selective_refine(logits: &Var, gate: &Var, delta: &Var) -> Var {
    logits.add(&gate.mul(delta))
}

/// Channel mean of an RGB batch, `[B, 3, H, W]` → `[B, 1, H, W]`.
pub fn grayscale(image: &Var) -> Var {
    image.mean_axes(&[1])
}
