#![allow(dead_code)]

pub mod oracles;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refcod_core::config::{ModelConfig, RunConfig};
use refcod_tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 32×32 inputs, an 8×8 grid of 2×2 patches (N = 16) and D = 8.
pub fn tiny_model() -> ModelConfig {
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

/// A run small enough to train for a few steps inside a unit test.
pub fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model = tiny_model();
    cfg.data.synth.image_size = 32;
    cfg.data.synth.num_scenes = 2;
    cfg.data.synth.min_radius = 5.0;
    cfg.data.synth.max_radius = 7.0;
    cfg.optim.batch_size = 2;
    cfg.optim.epochs = 2;
    cfg.optim.max_steps = 0;
    cfg.loss.structure_kernel = 7;
    cfg
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

pub fn assert_bit_equal(a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert_eq!(x.to_bits(), y.to_bits(), "element {i}: {x} vs {y}");
    }
}
