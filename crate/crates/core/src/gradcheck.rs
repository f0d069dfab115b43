//! Finite-difference gradient suites for the differentiable building blocks.
//!
//! Each suite compares reverse-mode gradients of a scalar readout against
//! central differences at step [`STEP`] on a fixed random instance, probing
//! at least [`MIN_POINTS`] coordinates where the inputs allow it.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refcod_tensor::gradcheck::{check_gradients, GradCheckReport};
use refcod_tensor::nn::{ParamGroup, ParamId, ParamStore, Session};
use refcod_tensor::{Tensor, Var};
use serde::Serialize;

use crate::barm::Barm;
use crate::config::{AblationConfig, LossConfig, ModelConfig};
use crate::evidential::{DirichletField, UncertaintyWeights};
use crate::losses::{boundary_weights, evidential_loss, total_loss, LossInputs};
use crate::rgde::{modulate, scale_modulation_weight, Backbone, FeaturePyramid, Rgde};
use crate::uaed::{EvidenceGuidedAttention, Uaed};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const MIN_POINTS: usize = 100;
/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)`.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl SuiteResult {
    fn new(name: &'static str, report: GradCheckReport, tol: f64) -> Self {
        Self {
            name,
            points: report.points,
            max_rel_error: report.max_rel_error,
            tol,
            passed: report.passes(tol),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts `out` with a fixed random tensor so every output element contributes.
fn project(out: &Var, seed: u64) -> Var {
    let w = Tensor::randn(out.shape(), 1.0, &mut rng(seed));
    out.mul(&Var::constant(w)).sum()
}

fn binary_mask(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| f64::from(r.random_bool(0.5))).collect(),
    )
}

/// Up to `count` distinct flat indices per input, spread over all inputs.
fn pick_coords(inputs: &[Tensor], count: usize, r: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    inputs
        .iter()
        .map(|t| {
            let share = (count * t.numel()).div_ceil(total).clamp(1, t.numel());
            let mut idx = sample(r, t.numel(), share).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}

fn param_values(store: &ParamStore, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| store.get(id).clone()).collect()
}

fn bind_all(s: &Session<'_>, ids: &[ParamId], vars: &[Var]) {
    for (&id, v) in ids.iter().zip(vars) {
        s.bind(id, v.clone());
    }
}

/// Dirichlet uncertainty and evidential NLL with respect to the evidence.
pub fn dirichlet_suite() -> SuiteResult {
    let mut r = rng(1);
    let evidence = Tensor::uniform(&[2, 2, 5, 5], 0.05, 20.0, &mut r);
    let target = binary_mask(&[2, 1, 5, 5], &mut r);
    let report = check_gradients(
        |v| {
            let field = DirichletField::from_evidence(&v[0], UncertaintyWeights::default())
                .expect("positive evidence");
            project(&field.uncertainty, 2).add(&project(&field.nll(&target), 3))
        },
        &[evidence],
        None,
        STEP,
        FLOOR,
    );
    SuiteResult::new("dirichlet", report, TOL)
}

/// Boundary-weighted evidential loss with focal term, with respect to the evidence.
pub fn evidential_loss_suite() -> SuiteResult {
    let mut r = rng(4);
    let evidence = Tensor::uniform(&[2, 2, 8, 8], 0.05, 20.0, &mut r);
    let target = binary_mask(&[2, 1, 8, 8], &mut r);
    let weights = boundary_weights(&target, 1.0);
    let report = check_gradients(
        |v| {
            let field = DirichletField::from_evidence(&v[0], UncertaintyWeights::default())
                .expect("positive evidence");
            evidential_loss(&field, &target, &weights, 0.5, 2.0).total
        },
        &[evidence],
        None,
        STEP,
        FLOOR,
    );
    SuiteResult::new("evidential_loss", report, TOL)
}

/// Evidence-guided attention with respect to `w_u` and the Q/K/V projections.
pub fn ega_suite() -> SuiteResult {
    let mut r = rng(5);
    let (b, n, d) = (2, 9, 6);
    let mut store = ParamStore::new();
    let ega = EvidenceGuidedAttention::new(&mut store, "ega", d, &mut r);
    let w_u = store.add("w_u", Tensor::from_vec(&[1], vec![0.8]), ParamGroup::Head);
    let ids = [
        w_u,
        ega.q.weight,
        ega.q.bias,
        ega.k.weight,
        ega.k.bias,
        ega.v.weight,
        ega.v.bias,
    ];
    let uemb = Var::constant(Tensor::randn(&[b, n, d], 1.0, &mut r));
    let features = Var::constant(Tensor::randn(&[b, n, d], 1.0, &mut r));
    let confidence = Var::constant(Tensor::uniform(&[b, n], 0.05, 0.95, &mut r));
    let report = check_gradients(
        |v| {
            let s = Session::new(&store, false);
            bind_all(&s, &ids, v);
            project(
                &ega.forward(&s, &uemb, &features, Some(&confidence), &v[0]),
                6,
            )
        },
        &param_values(&store, &ids),
        None,
        STEP,
        FLOOR,
    );
    SuiteResult::new("evidence_guided_attention", report, TOL)
}

/// Scale modulation weight and the modulated features, with respect to both inputs.
pub fn modulation_suite() -> SuiteResult {
    let mut r = rng(7);
    let features = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut r);
    let prior = Tensor::uniform(&[2, 4, 1, 1], 0.05, 0.95, &mut r);
    let report = check_gradients(
        |v| {
            let w = scale_modulation_weight(&v[0], &v[1], 0.1);
            project(&modulate(&v[0], &w, &v[1]), 8).add(&project(&w, 9))
        },
        &[features, prior],
        None,
        STEP,
        FLOOR,
    );
    SuiteResult::new("modulation", report, TOL)
}

/// Refined logits with respect to the gate and correction branch weights.
pub fn selective_refine_suite() -> SuiteResult {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let barm = Barm::new(&mut store, 4, &mut r);
    let mut ids = vec![
        barm.refine.first.weight,
        barm.refine.second.weight,
        barm.attn.first.weight,
        barm.attn.second.weight,
    ];
    ids.extend(
        [
            &barm.refine.first,
            &barm.refine.second,
            &barm.attn.first,
            &barm.attn.second,
        ]
        .iter()
        .filter_map(|c| c.bias),
    );
    let logits = Var::constant(Tensor::randn(&[2, 1, 6, 6], 2.0, &mut r));
    let edge = Var::constant(Tensor::randn(&[2, 1, 6, 6], 1.0, &mut r));
    let report = check_gradients(
        |v| {
            let s = Session::new(&store, false);
            bind_all(&s, &ids, v);
            project(&barm.forward(&s, &logits, &edge).logits, 11)
        },
        &param_values(&store, &ids),
        None,
        STEP,
        FLOOR,
    );
    SuiteResult::new("selective_refine", report, TOL)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        backbone_channels: [4, 4, 6, 6],
        descriptor_channels: 4,
        reduced_channels: 4,
        grid: 8,
        patch: 2,
        embed_dim: 8,
        heads: 2,
        refine_hidden: 4,
        ..ModelConfig::default()
    }
}

/// Scalar readout of all four encoder scales with respect to a random subset
/// of prior, top-down value, offset, key and patch-embedding weights. Offset
/// weights are randomised first so that resampling positions sit off the
/// integer grid, where bilinear reads are differentiable. Top-down query
/// gradients at this initialisation are ~1e-9, below what central differences
/// resolve, so the value projection stands in for that layer.
pub fn encoder_suite() -> SuiteResult {
    let mut r = rng(12);
    let cfg = tiny_model_config();
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, cfg.backbone_channels, &mut r);
    let rgde = Rgde::new(&mut store, &cfg, &mut r);
    for layer in &rgde.encoders {
        for id in [layer.attn.offsets.weight, layer.attn.offsets.bias] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut r);
        }
    }
    let image = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut r);
    let descriptor = Var::constant(Tensor::uniform(&[2, 4, 1, 1], 0.0, 1.0, &mut r));
    let pyramid = {
        let s = Session::new(&store, false);
        backbone
            .forward(&s, &Var::constant(image))
            .expect("32px input")
            .levels
    };
    let ids = [
        rgde.prior.conv.weight,
        rgde.topdown[0].attn.v.weight,
        rgde.encoders[0].attn.offsets.weight,
        rgde.encoders[1].attn.attn.k.weight,
        rgde.embed.conv.weight,
    ];
    let values = param_values(&store, &ids);
    let coords = pick_coords(&values, MIN_POINTS, &mut r);
    let ablation = AblationConfig::default();
    let report = check_gradients(
        |v| {
            let s = Session::new(&store, false);
            bind_all(&s, &ids, v);
            let pyr = FeaturePyramid {
                levels: pyramid.clone(),
            };
            let out = rgde.forward(&s, &pyr, Some(&descriptor), &ablation);
            (1..4).fold(project(&out.encoded[0], 13), |acc, i| {
                acc.add(&project(&out.encoded[i], 13 + i as u64))
            })
        },
        &values,
        Some(&coords),
        STEP,
        FLOOR,
    );
    SuiteResult::new("encoder_end_to_end", report, TOL)
}

/// Full decoder readout with respect to `w_u`, at several values of `w_u`.
pub fn decoder_suite() -> SuiteResult {
    let mut r = rng(15);
    let cfg = tiny_model_config();
    let mut store = ParamStore::new();
    let uaed = Uaed::new(&mut store, &cfg, &mut r);
    let side = cfg.token_side();
    let encoded: Vec<Var> = (0..4)
        .map(|_| Var::constant(Tensor::randn(&[2, side * side, cfg.embed_dim], 1.0, &mut r)))
        .collect();
    let ablation = AblationConfig::default();
    let mut report: Option<GradCheckReport> = None;
    for w in [-1.5, -0.4, 0.3, 0.9, 2.0] {
        let rep = check_gradients(
            |v| {
                let s = Session::new(&store, false);
                s.bind(uaed.w_u, v[0].clone());
                let out = uaed.forward(&s, &encoded, &ablation);
                out.logits
                    .iter()
                    .enumerate()
                    .fold(Var::scalar(0.0), |acc, (i, l)| {
                        acc.add(&project(l, 16 + i as u64))
                    })
            },
            &[Tensor::from_vec(&[1], vec![w])],
            None,
            STEP,
            FLOOR,
        );
        report = Some(match report {
            Some(prev) => prev.merge(rep),
            None => rep,
        });
    }
    SuiteResult::new("decoder_w_u", report.expect("at least one value"), TOL)
}

/// Weighted total loss with respect to the evidence field feeding it.
pub fn total_loss_suite() -> SuiteResult {
    let mut r = rng(20);
    let gt = binary_mask(&[2, 1, 12, 12], &mut r);
    let logits: Vec<Var> = (0..4)
        .map(|_| Var::constant(Tensor::randn(&[2, 1, 12, 12], 1.5, &mut r)))
        .collect();
    let evidence = Tensor::uniform(&[2, 2, 6, 6], 0.05, 20.0, &mut r);
    let cfg = LossConfig {
        structure_kernel: 3,
        ..LossConfig::default()
    };
    let report = check_gradients(
        |v| {
            let field = DirichletField::from_evidence(&v[0], UncertaintyWeights::default())
                .expect("positive evidence");
            let inputs = LossInputs {
                decoder: [&logits[0], &logits[1]],
                refined: [&logits[2], &logits[3]],
                dirichlet: Some(&field),
                gt: &gt,
            };
            total_loss(&inputs, &cfg).0
        },
        &[evidence],
        None,
        STEP,
        FLOOR,
    );
    SuiteResult::new("total_loss", report, TOL)
}

/// Every suite, in a fixed order.
pub fn run_all() -> Vec<SuiteResult> {
    vec![
        dirichlet_suite(),
        evidential_loss_suite(),
        ega_suite(),
        modulation_suite(),
        selective_refine_suite(),
        encoder_suite(),
        decoder_suite(),
        total_loss_suite(),
    ]
}
