//! Reference-guided deformable encoder and the convolutional backbone that feeds it.
//!
//! Pipeline: backbone pyramid → 1×1 channel alignment → reference modulation per
//! level → bilinear resize to a common grid → shared patch embedding → top-down
//! cross-scale attention → one deformable encoder layer per level.

use rand::Rng;
use refcod_tensor::nn::{Conv2d, LayerNorm, Linear, ParamGroup, ParamStore, Session};
use refcod_tensor::{Tensor, Var};

use crate::config::{AblationConfig, ConfigError, DeformableMode, ModelConfig};
use crate::layers::{
    dims3, map_to_tokens, merge_heads, split_heads, ConvBnRelu, FeedForward, MultiHeadAttention,
};

/// Cosine denominators are floored here so zero-norm channels stay finite.
pub const COSINE_EPS: f64 = 1e-8;

/// Four feature levels at strides 4, 8, 16 and 32.
#[derive(Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Strided convolutional pyramid standing in for a pretrained backbone.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBnRelu,
    stages: Vec<(ConvBnRelu, ConvBnRelu)>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: [usize; 4], rng: &mut R) -> Self {
        let g = ParamGroup::Backbone;
        let stem_out = channels[0] / 2;
        let stem = ConvBnRelu::new(store, "backbone.stem", 3, stem_out.max(1), 3, 2, g, rng);
        let mut c_in = stem_out.max(1);
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let down = ConvBnRelu::new(
                    store,
                    &format!("backbone.stage{i}.down"),
                    c_in,
                    c,
                    3,
                    2,
                    g,
                    rng,
                );
                let body = ConvBnRelu::new(
                    store,
                    &format!("backbone.stage{i}.body"),
                    c,
                    c,
                    3,
                    1,
                    g,
                    rng,
                );
                c_in = c;
                (down, body)
            })
            .collect();
        Self { stem, stages }
    }

    pub fn forward(&self, s: &Session<'_>, image: &Var) -> Result<FeaturePyramid, ConfigError> {
        let shape = image.shape();
        if shape.len() != 4
            || shape[1] != 3
            || !shape[2].is_multiple_of(32)
            || !shape[3].is_multiple_of(32)
            || shape[2] == 0
        {
            return Err(ConfigError::Invalid(format!(
                "backbone input must be [B, 3, H, W] with H, W multiples of 32, got {shape:?}"
            )));
        }
        let mut x = self.stem.forward(s, image);
        let mut levels = Vec::with_capacity(4);
        for (down, body) in &self.stages {
            x = body.forward(s, &down.forward(s, &x));
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}

/// `r' = sigmoid(CBR(r))`, a `[B, C_d, 1, 1]` prior in `[0, 1]`.
pub fn reference_prior(s: &Session<'_>, cbr: &ConvBnRelu, descriptor: &Var) -> Var {
    cbr.forward(s, descriptor).sigmoid()
}

/// Cosine between the pooled query summary and the prior (taken over channels,
/// one value per image), then `clamp(sigmoid(summary ⊙ cosine), tau_min, 1)`.
/// Shape `[B, C_d, 1, 1]`.
pub fn scale_modulation_weight(features: &Var, prior: &Var, tau_min: f64) -> Var {
    let summary = features.mean_axes(&[2, 3]);
    let dot = summary.mul(prior).sum_axes(&[1]);
    let norms = summary
        .square()
        .sum_axes(&[1])
        .mul(&prior.square().sum_axes(&[1]))
        .clamp(COSINE_EPS * COSINE_EPS, f64::INFINITY)
        .sqrt();
    summary.mul(&dot.div(&norms)).sigmoid().clamp(tau_min, 1.0)
}

/// `F̃ = F̂ ⊙ W ⊙ r'`, broadcast over space.
pub fn modulate(features: &Var, weight: &Var, prior: &Var) -> Var {
    features.mul(weight).mul(prior)
}

/// Non-overlapping `patch × patch` convolution from the grid to `[B, N, D]` tokens.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        c_in: usize,
        dim: usize,
        patch: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                "rgde.patch_embed",
                c_in,
                dim,
                patch,
                patch,
                0,
                true,
                ParamGroup::Head,
                rng,
            ),
        }
    }

    pub fn forward(&self, s: &Session<'_>, grid: &Var) -> Var {
        map_to_tokens(&self.conv.forward(s, grid))
    }
}

/// `LN(X_i + MHA(X_i, X_{i+1}, X_{i+1}))`.
#[derive(Clone, Debug)]
pub struct TopDownAttention {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl TopDownAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, ParamGroup::Head),
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var, coarser: &Var) -> Var {
        self.norm
            .forward(s, &x.add(&self.attn.forward(s, x, coarser, None)))
    }
}

/// Multi-head attention whose keys (and values) are read at learned offsets
/// from their token-grid positions.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub offsets: Linear,
    pub attn: MultiHeadAttention,
    pub offset_scale: f64,
    pub mode: DeformableMode,
    pub side: usize,
}

impl DeformableAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let offsets = Linear::new(
            store,
            &format!("{name}.offsets"),
            cfg.embed_dim,
            cfg.heads * 2,
            ParamGroup::Head,
            rng,
        );
        // zero offsets at initialization: training starts from plain attention
        *store.get_mut(offsets.weight) = Tensor::zeros(&[cfg.embed_dim, cfg.heads * 2]);
        *store.get_mut(offsets.bias) = Tensor::zeros(&[cfg.heads * 2]);
        Self {
            offsets,
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                cfg.embed_dim,
                cfg.heads,
                rng,
            ),
            offset_scale: cfg.offset_scale,
            mode: cfg.deformable_mode,
            side: cfg.token_side(),
        }
    }

    /// Per-head offsets `[B, N, h, 2]` in token-grid units (row, column).
    pub fn predict_offsets(&self, s: &Session<'_>, x: &Var) -> Var {
        let (b, n, _) = dims3(x);
        self.offsets
            .forward(s, x)
            .reshape(&[b, n, self.attn.heads, 2])
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var, key_scale: Option<&Var>) -> Var {
        let (b, n, _) = dims3(x);
        assert_eq!(
            n,
            self.side * self.side,
            "deformable attention needs a square token grid"
        );
        let h = self.attn.heads;
        let a = &self.attn;
        let q = split_heads(&a.q.forward(s, x), h);
        let k = split_heads(&a.k.forward(s, x), h);
        let v = split_heads(&a.v.forward(s, x), h);
        let shift = self
            .predict_offsets(s, x)
            .mul_scalar(self.offset_scale)
            .permute(&[0, 2, 1, 3]);
        let (k, v) = match self.mode {
            DeformableMode::Spatial => {
                let pos = shift.add(&Var::constant(self.base_positions()));
                (
                    k.bilinear_sample(&pos, self.side, self.side),
                    v.bilinear_sample(&pos, self.side, self.side),
                )
            }
            DeformableMode::Additive => {
                let width = k.shape()[3];
                let tiled = Var::concat(&vec![shift; width / 2], 3);
                assert_eq!(tiled.shape(), &[b, h, n, width]);
                (k.add(&tiled), v)
            }
        };
        let mixed = Var::attention(&q, &k, &v, key_scale);
        a.out.forward(s, &merge_heads(&mixed))
    }

    /// The same projections with unshifted keys.
    pub fn standard(&self, s: &Session<'_>, x: &Var, key_scale: Option<&Var>) -> Var {
        self.attn.forward(s, x, x, key_scale)
    }

    fn base_positions(&self) -> Tensor {
        let n = self.side * self.side;
        let data = (0..n)
            .flat_map(|m| [(m / self.side) as f64, (m % self.side) as f64])
            .collect();
        Tensor::from_vec(&[1, 1, n, 2], data)
    }
}

/// Post-norm transformer layer around [`DeformableAttention`].
#[derive(Clone, Debug)]
pub struct DeformableEncoderLayer {
    pub attn: DeformableAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl DeformableEncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.embed_dim;
        Self {
            attn: DeformableAttention::new(store, &format!("{name}.attn"), cfg, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, ParamGroup::Head),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, 2 * d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, ParamGroup::Head),
        }
    }

    pub fn forward(
        &self,
        s: &Session<'_>,
        x: &Var,
        key_scale: Option<&Var>,
        deformable: bool,
    ) -> Var {
        let mixed = if deformable {
            self.attn.forward(s, x, key_scale)
        } else {
            self.attn.standard(s, x, key_scale)
        };
        let x = self.norm1.forward(s, &x.add(&mixed));
        self.norm2.forward(s, &x.add(&self.ffn.forward(s, &x)))
    }
}

/// Tokens of each pyramid level before and after encoding.
pub struct EncoderOutput {
    /// Patch-embedded tokens `X_1..X_4`.
    pub tokens: Vec<Var>,
    /// Encoded tokens `S_1..S_4`, each `[B, N, D]`.
    pub encoded: Vec<Var>,
    /// Modulation weights per level (absent when reference guidance is off).
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Rgde {
    pub prior: ConvBnRelu,
    pub align: Vec<ConvBnRelu>,
    pub embed: PatchEmbed,
    pub topdown: Vec<TopDownAttention>,
    pub encoders: Vec<DeformableEncoderLayer>,
    pub grid: usize,
    pub tau_min: f64,
    pub semantic_mask: bool,
}

impl Rgde {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Head;
        let cd = cfg.reduced_channels;
        let align = cfg
            .backbone_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvBnRelu::new(store, &format!("rgde.align{i}"), c, cd, 1, 1, g, rng))
            .collect();
        Self {
            prior: ConvBnRelu::new(
                store,
                "rgde.prior",
                cfg.descriptor_channels,
                cd,
                1,
                1,
                g,
                rng,
            ),
            align,
            embed: PatchEmbed::new(store, cd, cfg.embed_dim, cfg.patch, rng),
            topdown: (0..3)
                .map(|i| {
                    TopDownAttention::new(
                        store,
                        &format!("rgde.topdown{i}"),
                        cfg.embed_dim,
                        cfg.heads,
                        rng,
                    )
                })
                .collect(),
            encoders: (0..4)
                .map(|i| DeformableEncoderLayer::new(store, &format!("rgde.encoder{i}"), cfg, rng))
                .collect(),
            grid: cfg.grid,
            tau_min: cfg.tau_min,
            semantic_mask: cfg.semantic_mask,
        }
    }

    /// Encodes a pyramid under an optional reference descriptor `[B, C_r, 1, 1]`.
    ///
    /// With `ablation.rgde` off the reference is ignored and the encoder falls
    /// back to plain self-attention per level.
    pub fn forward(
        &self,
        s: &Session<'_>,
        pyramid: &FeaturePyramid,
        descriptor: Option<&Var>,
        ablation: &AblationConfig,
    ) -> EncoderOutput {
        let guided = ablation.rgde && descriptor.is_some();
        let prior = descriptor
            .filter(|_| guided)
            .map(|r| reference_prior(s, &self.prior, r));
        let mut weights = Vec::new();
        let tokens: Vec<Var> = pyramid
            .levels
            .iter()
            .zip(&self.align)
            .map(|(f, align)| {
                let aligned = align.forward(s, f);
                let modulated = match &prior {
                    Some(p) => {
                        let w = scale_modulation_weight(&aligned, p, self.tau_min);
                        let out = modulate(&aligned, &w, p);
                        weights.push(w);
                        out
                    }
                    None => aligned,
                };
                self.embed
                    .forward(s, &modulated.upsample_bilinear(self.grid, self.grid))
            })
            .collect();

        let mask = (guided && self.semantic_mask).then(|| {
            tokens[3]
                .mean_axes(&[2])
                .sigmoid()
                .reshape(&[tokens[3].shape()[0], tokens[3].shape()[1]])
        });
        let encoded = (0..4)
            .map(|i| {
                if i < 3 && guided {
                    let x_hat = self.topdown[i].forward(s, &tokens[i], &tokens[i + 1]);
                    self.encoders[i].forward(s, &x_hat, mask.as_ref(), true)
                } else {
                    self.encoders[i].forward(s, &tokens[i], None, guided)
                }
            })
            .collect();
        EncoderOutput {
            tokens,
            encoded,
            weights,
        }
    }
}
