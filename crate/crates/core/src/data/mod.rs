//! Samples, the synthetic camouflage generator, the on-disk folder loader and
//! the reference descriptor.

mod descriptor;
mod folder;
mod synth;

use std::path::PathBuf;

use rand::Rng;
use refcod_tensor::Tensor;
use thiserror::Error;

use crate::filters::connected_components;

pub use descriptor::{masked_average_pool, reference_descriptor, ReferenceEncoder};
pub use folder::{load_folder, write_folder, FolderDataset, FolderItem};
pub use synth::{class_texture, synth_generate, TextureClass};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("generator config: {0}")]
    Geometry(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}: image is {found:?}, mask is {expected:?}")]
    SizeMismatch {
        path: PathBuf,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("every reference mask is empty")]
    EmptyReferences,
    #[error("no references given")]
    NoReferences,
}

/// A reference image `[3, H, W]` with its binary object mask `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub category: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub query: Tensor,
    pub references: Vec<Reference>,
    /// `[H, W]` with values in `{0, 1}`.
    pub gt: Tensor,
}

impl Sample {
    /// Number of 4-connected foreground regions of the ground truth.
    pub fn object_count(&self) -> usize {
        connected_components(&self.gt)
    }
}

/// Flips each mask pixel independently with probability `rate`.
pub fn inject_label_noise<R: Rng + ?Sized>(gt: &Tensor, rate: f64, rng: &mut R) -> Tensor {
    let data = gt
        .data()
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < rate {
                1.0 - v
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(gt.shape(), data)
}

/// Replaces each sample's references with those of the next sample whose
/// category differs, cycling through the list. Samples with no such partner keep theirs.
pub fn swap_references(samples: &[Sample]) -> Vec<Sample> {
    let n = samples.len();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let donor = (1..n)
                .map(|k| &samples[(i + k) % n])
                .find(|d| d.category != s.category)
                .unwrap_or(s);
            Sample {
                references: donor.references.clone(),
                ..s.clone()
            }
        })
        .collect()
}
