mod common;

use common::{assert_bit_equal, assert_close, rng, tiny_model};
use proptest::prelude::*;
use refcod_core::config::{AblationConfig, DeformableMode};
use refcod_core::layers::ConvBnRelu;
use refcod_core::rgde::{
    modulate, reference_prior, scale_modulation_weight, Backbone, DeformableAttention, PatchEmbed,
    Rgde, TopDownAttention,
};
use refcod_tensor::nn::{ParamGroup, ParamStore, Session};
use refcod_tensor::ops::attention_weights;
use refcod_tensor::{Tensor, Var};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

#[test]
fn backbone_pyramid_shapes() {
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, [16, 32, 64, 128], &mut rng(0));
    let s = Session::new(&store, false);
    let pyramid = backbone
        .forward(&s, &Var::constant(randn(&[2, 3, 64, 64], 1)))
        .unwrap();
    let shapes: Vec<Vec<usize>> = pyramid.levels.iter().map(|l| l.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![2, 16, 16, 16],
            vec![2, 32, 8, 8],
            vec![2, 64, 4, 4],
            vec![2, 128, 2, 2]
        ]
    );
}

#[test]
fn backbone_first_level_at_full_scale_resolution() {
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, [2, 2, 2, 2], &mut rng(0));
    let s = Session::new(&store, false);
    let pyramid = backbone
        .forward(&s, &Var::constant(Tensor::zeros(&[1, 3, 352, 352])))
        .unwrap();
    assert_eq!(&pyramid.levels[0].shape()[2..], &[88, 88]);
}

#[test]
fn backbone_handles_zero_images_and_rejects_bad_sizes() {
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, [4, 4, 4, 4], &mut rng(0));
    for training in [false, true] {
        let s = Session::new(&store, training);
        let pyramid = backbone
            .forward(&s, &Var::constant(Tensor::zeros(&[2, 3, 32, 32])))
            .unwrap();
        assert!(pyramid.levels.iter().all(|l| l.value().all_finite()));
    }
    let s = Session::new(&store, false);
    assert!(backbone
        .forward(&s, &Var::constant(Tensor::zeros(&[1, 3, 48, 48])))
        .is_err());
}

fn zeroed_cbr(store: &mut ParamStore, c_in: usize, c_out: usize) -> ConvBnRelu {
    let cbr = ConvBnRelu::new(
        store,
        "prior",
        c_in,
        c_out,
        1,
        1,
        ParamGroup::Head,
        &mut rng(0),
    );
    *store.get_mut(cbr.conv.weight) = Tensor::zeros(&[c_out, c_in, 1, 1]);
    cbr
}

#[test]
fn reference_prior_is_half_when_its_projection_is_zero() {
    let mut store = ParamStore::new();
    let cbr = zeroed_cbr(&mut store, 3, 5);
    let s = Session::new(&store, false);
    let prior = reference_prior(&s, &cbr, &Var::constant(randn(&[2, 3, 1, 1], 4)));
    assert_eq!(prior.shape(), &[2, 5, 1, 1]);
    assert!(prior.value().data().iter().all(|&v| v == 0.5));
}

#[test]
fn reference_prior_saturates_towards_one() {
    let mut store = ParamStore::new();
    let cbr = zeroed_cbr(&mut store, 2, 3);
    *store.get_mut(cbr.conv.weight) = Tensor::full(&[3, 2, 1, 1], 1e3);
    let s = Session::new(&store, false);
    let prior = reference_prior(&s, &cbr, &Var::constant(Tensor::full(&[1, 2, 1, 1], 1.0)));
    assert!(prior
        .value()
        .data()
        .iter()
        .all(|&v| v > 1.0 - 1e-12 && v <= 1.0));
}

#[test]
fn reference_prior_is_deterministic() {
    let build = || {
        let mut store = ParamStore::new();
        let cbr = ConvBnRelu::new(
            &mut store,
            "prior",
            6,
            4,
            1,
            1,
            ParamGroup::Head,
            &mut rng(9),
        );
        let s = Session::new(&store, false);
        reference_prior(&s, &cbr, &Var::constant(randn(&[3, 6, 1, 1], 10)))
            .value()
            .clone()
    };
    let a = build();
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_bit_equal(&a, &build());
}

/// Scalar reimplementation: cosine over channels, then per-channel sigmoid and clip.
fn modulation_oracle(features: &Tensor, prior: &[f64], tau_min: f64) -> Vec<f64> {
    let (c, h, w) = (
        features.shape()[1],
        features.shape()[2],
        features.shape()[3],
    );
    let gap: Vec<f64> = (0..c)
        .map(|ch| {
            features.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .sum::<f64>()
                / (h * w) as f64
        })
        .collect();
    let dot: f64 = gap.iter().zip(prior).map(|(a, b)| a * b).sum();
    let norm = gap.iter().map(|a| a * a).sum::<f64>().sqrt()
        * prior.iter().map(|b| b * b).sum::<f64>().sqrt();
    let cosine = dot / norm.max(1e-8);
    gap.iter()
        .map(|g| (1.0 / (1.0 + (-g * cosine).exp())).clamp(tau_min, 1.0))
        .collect()
}

#[test]
fn modulation_weight_matches_scalar_oracle() {
    for seed in 0..5 {
        let f = randn(&[1, 4, 3, 3], seed);
        let prior: Vec<f64> = randn(&[4], seed + 100)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let w = scale_modulation_weight(
            &Var::constant(f.clone()),
            &Var::constant(Tensor::from_vec(&[1, 4, 1, 1], prior.clone())),
            0.1,
        );
        assert_eq!(w.shape(), &[1, 4, 1, 1]);
        let want = modulation_oracle(&f, &prior, 0.1);
        for (got, want) in w.value().data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-6);
        }
    }
}

#[test]
fn modulation_weight_self_similarity() {
    let prior = [0.2, 0.9, 0.4];
    let f = Tensor::from_vec(&[1, 3, 2, 2], prior.iter().flat_map(|&p| [p; 4]).collect());
    let w = scale_modulation_weight(
        &Var::constant(f),
        &Var::constant(Tensor::from_vec(&[1, 3, 1, 1], prior.to_vec())),
        0.1,
    );
    for (got, p) in w.value().data().iter().zip(prior) {
        assert!((got - 1.0 / (1.0 + (-p).exp())).abs() < 1e-12);
    }
}

/// The prior is positive, so a channel reaches the floor when its summary is
/// large and opposes the overall query/prior alignment.
#[test]
fn modulation_weight_floor_is_active_for_opposing_channels() {
    let summary = [-1e6, 1e7, 3e6];
    let f = Tensor::from_vec(
        &[1, 3, 2, 2],
        summary.iter().flat_map(|&v| [v; 4]).collect(),
    );
    let prior = Var::constant(Tensor::from_vec(&[1, 3, 1, 1], vec![0.5, 0.9, 0.7]));
    let w = scale_modulation_weight(&Var::constant(f), &prior, 0.25);
    assert_eq!(w.value().data(), &[0.25, 1.0, 1.0]);

    let all_negative = Tensor::full(&[1, 3, 2, 2], -1e6);
    let w = scale_modulation_weight(&Var::constant(all_negative), &prior, 0.25);
    assert!(w.value().data().iter().all(|&v| v == 1.0));
}

#[test]
fn modulation_weight_is_finite_for_zero_features() {
    let f = Var::leaf(Tensor::zeros(&[1, 3, 2, 2]));
    let prior = Var::constant(Tensor::full(&[1, 3, 1, 1], 0.5));
    let w = scale_modulation_weight(&f, &prior, 0.1);
    assert!(w.value().data().iter().all(|&v| v == 0.5));
    w.sum().backward();
    assert!(f.grad().unwrap().all_finite());
}

#[test]
fn modulation_weight_stays_in_range_on_many_inputs() {
    let mut generator = rng(77);
    for _ in 0..2500 {
        let f = Tensor::randn(&[1, 4, 2, 2], 10.0, &mut generator);
        let prior = Tensor::uniform(&[1, 4, 1, 1], 0.0, 1.0, &mut generator);
        let w = scale_modulation_weight(&Var::constant(f), &Var::constant(prior), 0.1);
        assert!(w.value().data().iter().all(|v| (0.1..=1.0).contains(v)));
    }
}

#[test]
fn modulate_examples() {
    let f = randn(&[2, 3, 4, 4], 5);
    let ones = Var::constant(Tensor::ones(&[2, 3, 1, 1]));
    let same = modulate(&Var::constant(f.clone()), &ones, &ones);
    assert_bit_equal(same.value(), &f);

    let mut prior = Tensor::ones(&[2, 3, 1, 1]);
    prior.data_mut()[1] = 0.0;
    let out = modulate(&Var::constant(f.clone()), &ones, &Var::constant(prior));
    assert!(out.value().data()[16..32].iter().all(|&v| v == 0.0));

    let w = Tensor::uniform(&[2, 3, 1, 1], 0.1, 1.0, &mut rng(6));
    let r = Tensor::uniform(&[2, 3, 1, 1], 0.0, 1.0, &mut rng(7));
    let out = modulate(
        &Var::constant(f.clone()),
        &Var::constant(w.clone()),
        &Var::constant(r.clone()),
    );
    for b in 0..2 {
        for c in 0..3 {
            for p in 0..16 {
                let i = (b * 3 + c) * 16 + p;
                let want = f.data()[i] * w.data()[b * 3 + c] * r.data()[b * 3 + c];
                assert!((out.value().data()[i] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn patch_embedding_token_counts() {
    let mut store = ParamStore::new();
    let embed = PatchEmbed::new(&mut store, 3, 8, 4, &mut rng(0));
    let s = Session::new(&store, false);
    let tokens = embed.forward(&s, &Var::constant(randn(&[2, 3, 16, 16], 1)));
    assert_eq!(tokens.shape(), &[2, 16, 8]);

    let mut cfg = tiny_model();
    cfg.grid = 16;
    cfg.patch = 4;
    assert_eq!(cfg.num_tokens(), 16);
    cfg.grid = 18;
    assert!(cfg.validate().is_err());
}

fn topdown(dim: usize) -> (ParamStore, TopDownAttention) {
    let mut store = ParamStore::new();
    let td = TopDownAttention::new(&mut store, "td", dim, 2, &mut rng(3));
    (store, td)
}

#[test]
fn topdown_with_silent_values_reduces_to_layer_norm() {
    let (mut store, td) = topdown(8);
    *store.get_mut(td.attn.v.weight) = Tensor::zeros(&[8, 8]);
    *store.get_mut(td.attn.v.bias) = Tensor::zeros(&[8]);
    *store.get_mut(td.attn.out.bias) = Tensor::zeros(&[8]);
    let s = Session::new(&store, false);
    let x = Var::constant(randn(&[2, 9, 8], 1));
    let coarser = Var::constant(randn(&[2, 9, 8], 2));
    let out = td.forward(&s, &x, &coarser);
    assert_eq!(out.shape(), x.shape());
    assert_close(out.value(), td.norm.forward(&s, &x).value(), 1e-12);
}

#[test]
fn topdown_over_constant_keys_aggregates_uniformly() {
    let (store, td) = topdown(8);
    let s = Session::new(&store, false);
    let token = randn(&[8], 4);
    let coarser = Tensor::from_vec(&[1, 9, 8], token.data().repeat(9));
    let x = Var::constant(randn(&[1, 9, 8], 5));
    let mixed = td.attn.forward(&s, &x, &Var::constant(coarser), None);
    let rows: Vec<&[f64]> = mixed.value().data().chunks(8).collect();
    for row in &rows[1..] {
        for (a, b) in row.iter().zip(rows[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn deformable(
    gamma: f64,
    mode: DeformableMode,
    random_offsets: bool,
) -> (ParamStore, DeformableAttention) {
    let mut cfg = tiny_model();
    cfg.offset_scale = gamma;
    cfg.deformable_mode = mode;
    let mut store = ParamStore::new();
    let attn = DeformableAttention::new(&mut store, "def", &cfg, &mut rng(11));
    if random_offsets {
        *store.get_mut(attn.offsets.weight) = randn(&[8, 4], 12);
        *store.get_mut(attn.offsets.bias) = randn(&[4], 13);
    }
    (store, attn)
}

#[test]
fn zero_offset_scale_is_standard_attention_bit_for_bit() {
    for mode in [DeformableMode::Spatial, DeformableMode::Additive] {
        let (store, attn) = deformable(0.0, mode, true);
        let s = Session::new(&store, false);
        let x = Var::constant(randn(&[2, 16, 8], 14));
        assert_bit_equal(
            attn.forward(&s, &x, None).value(),
            attn.standard(&s, &x, None).value(),
        );
    }
}

#[test]
fn zero_offset_head_is_standard_attention_bit_for_bit() {
    let (store, attn) = deformable(0.1, DeformableMode::Spatial, false);
    let s = Session::new(&store, false);
    let x = Var::constant(randn(&[2, 16, 8], 15));
    let scale = Var::constant(Tensor::uniform(&[2, 16], 0.0, 1.0, &mut rng(16)));
    assert!(attn
        .predict_offsets(&s, &x)
        .value()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert_bit_equal(
        attn.forward(&s, &x, Some(&scale)).value(),
        attn.standard(&s, &x, Some(&scale)).value(),
    );
}

#[test]
fn learned_offsets_change_the_output() {
    let (store, attn) = deformable(0.1, DeformableMode::Spatial, true);
    let s = Session::new(&store, false);
    let x = Var::constant(randn(&[1, 16, 8], 17));
    assert_eq!(attn.predict_offsets(&s, &x).shape(), &[1, 16, 2, 2]);
    let diff = attn
        .forward(&s, &x, None)
        .value()
        .zip_map(attn.standard(&s, &x, None).value(), |a, b| (a - b).abs());
    assert!(diff.max() > 1e-6);
}

#[test]
#[should_panic(expected = "square token grid")]
fn deformable_attention_needs_a_square_grid() {
    let (store, attn) = deformable(0.1, DeformableMode::Spatial, false);
    let s = Session::new(&store, false);
    attn.forward(&s, &Var::constant(randn(&[1, 12, 8], 1)), None);
}

proptest! {
    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, scaled in any::<bool>()) {
        let q = randn(&[2, 2, 5, 4], seed);
        let k = randn(&[2, 2, 7, 4], seed + 1);
        let scale = Tensor::uniform(&[2, 7], 0.0, 3.0, &mut rng(seed + 2));
        let a = attention_weights(&q, &k, scaled.then_some(&scale));
        for row in a.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn modulation_weight_bounds(seed in 0u64..10_000, tau in 0.01..0.9f64, spread in 0.1..100.0f64) {
        let f = Tensor::randn(&[2, 5, 2, 2], spread, &mut rng(seed));
        let prior = Tensor::uniform(&[2, 5, 1, 1], 0.0, 1.0, &mut rng(seed + 1));
        let w = scale_modulation_weight(&Var::constant(f), &Var::constant(prior), tau);
        prop_assert!(w.value().data().iter().all(|v| *v >= tau && *v <= 1.0));
    }
}

fn encoder() -> (ParamStore, Backbone, Rgde) {
    let cfg = tiny_model();
    let mut store = ParamStore::new();
    let mut r = rng(21);
    let backbone = Backbone::new(&mut store, cfg.backbone_channels, &mut r);
    let rgde = Rgde::new(&mut store, &cfg, &mut r);
    (store, backbone, rgde)
}

#[test]
fn encoder_outputs_share_one_token_shape() {
    let (store, backbone, rgde) = encoder();
    let s = Session::new(&store, false);
    let pyramid = backbone
        .forward(&s, &Var::constant(randn(&[2, 3, 32, 32], 1)))
        .unwrap();
    let out = rgde.forward(
        &s,
        &pyramid,
        Some(&Var::constant(randn(&[2, 4, 1, 1], 2))),
        &AblationConfig::default(),
    );
    assert_eq!(out.encoded.len(), 4);
    assert_eq!(out.weights.len(), 4);
    for e in &out.encoded {
        assert_eq!(e.shape(), &[2, 16, 8]);
    }
}

#[test]
fn encoder_gradient_reaches_image_and_descriptor() {
    let (store, backbone, rgde) = encoder();
    let s = Session::new(&store, true);
    let image = Var::leaf(randn(&[2, 3, 32, 32], 3));
    let descriptor = Var::leaf(randn(&[2, 4, 1, 1], 4));
    let pyramid = backbone.forward(&s, &image).unwrap();
    let out = rgde.forward(&s, &pyramid, Some(&descriptor), &AblationConfig::default());
    let readout = out.encoded[0]
        .mul(&Var::constant(randn(&[2, 16, 8], 5)))
        .sum();
    readout.backward();
    assert!(image.grad().unwrap().data().iter().any(|&g| g != 0.0));
    assert!(descriptor.grad().unwrap().data().iter().any(|&g| g != 0.0));
}

#[test]
fn encoder_is_deterministic() {
    let run = || {
        let (store, backbone, rgde) = encoder();
        let s = Session::new(&store, false);
        let pyramid = backbone
            .forward(&s, &Var::constant(randn(&[1, 3, 32, 32], 6)))
            .unwrap();
        let out = rgde.forward(
            &s,
            &pyramid,
            Some(&Var::constant(randn(&[1, 4, 1, 1], 7))),
            &AblationConfig::default(),
        );
        out.encoded
            .iter()
            .map(|e| e.value().clone())
            .collect::<Vec<_>>()
    };
    for (a, b) in run().iter().zip(&run()) {
        assert_bit_equal(a, b);
    }
}

#[test]
fn encoder_ignores_the_reference_when_guidance_is_off() {
    let (store, backbone, rgde) = encoder();
    let s = Session::new(&store, false);
    let pyramid = backbone
        .forward(&s, &Var::constant(randn(&[1, 3, 32, 32], 8)))
        .unwrap();
    let mut ablation = AblationConfig::default();
    ablation.disable("rgde").unwrap();
    let a = rgde.forward(
        &s,
        &pyramid,
        Some(&Var::constant(randn(&[1, 4, 1, 1], 9))),
        &ablation,
    );
    let b = rgde.forward(&s, &pyramid, None, &ablation);
    assert!(a.weights.is_empty());
    for (x, y) in a.encoded.iter().zip(&b.encoded) {
        assert_bit_equal(x.value(), y.value());
    }
}
