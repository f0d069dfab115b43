//! Reference descriptor: masked average pooling of a small learned feature map,
//! averaged over the references of one sample.

use rand::Rng;
use refcod_tensor::nn::{Conv2d, ParamGroup, ParamStore, Session};
use refcod_tensor::ops::area_downsample;
use refcod_tensor::{Tensor, Var};

use super::{DataError, Reference};

/// Two stride-2 `conv3×3 → ReLU` layers, `3 → 8 → channels`. Batch statistics
/// are avoided so that each reference is encoded independently of the others.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    pub layers: [Conv2d; 2],
}

impl ReferenceEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Head;
        Self {
            layers: [
                Conv2d::new(store, "reference.0", 3, 8, 3, 2, 1, true, g, rng),
                Conv2d::new(store, "reference.1", 8, channels, 3, 2, 1, true, g, rng),
            ],
        }
    }

    pub fn forward(&self, s: &Session<'_>, images: &Var) -> Var {
        self.layers[1]
            .forward(s, &self.layers[0].forward(s, images).relu())
            .relu()
    }

    /// Descriptor `[1, C, 1, 1]` of one sample's references.
    pub fn describe(&self, s: &Session<'_>, refs: &[Reference]) -> Result<Var, DataError> {
        reference_descriptor(refs, |x| self.forward(s, x))
    }
}

/// `Σ f·m / Σ m` over space for features `[R, C, h, w]` and masks `[R, 1, h, w]`.
pub fn masked_average_pool(features: &Var, mask: &Tensor) -> Var {
    let m = Var::constant(mask.clone());
    let area = Var::constant(mask.sum_axes_keepdim(&[2, 3]));
    features.mul(&m).sum_axes(&[2, 3]).div(&area)
}

/// Mean over references of the masked average pool of `features(image)`.
/// References with empty masks are skipped; the feature map may be coarser
/// than the image by an integer factor, in which case the mask is area-pooled.
pub fn reference_descriptor(
    refs: &[Reference],
    features: impl Fn(&Var) -> Var,
) -> Result<Var, DataError> {
    if refs.is_empty() {
        return Err(DataError::NoReferences);
    }
    let usable: Vec<&Reference> = refs.iter().filter(|r| r.mask.sum() > 0.0).collect();
    if usable.is_empty() {
        return Err(DataError::EmptyReferences);
    }
    let [_, h, w] = usable[0].image.shape() else {
        panic!("reference images are [3, H, W]");
    };
    let (h, w) = (*h, *w);
    let images: Vec<f64> = usable
        .iter()
        .flat_map(|r| r.image.data().iter().copied())
        .collect();
    let masks: Vec<f64> = usable
        .iter()
        .flat_map(|r| r.mask.data().iter().copied())
        .collect();
    let count = usable.len();
    let feats = features(&Var::constant(Tensor::from_vec(&[count, 3, h, w], images)));
    let mask = Tensor::from_vec(&[count, 1, h, w], masks);
    let factor = h / feats.shape()[2];
    let mask = if factor > 1 {
        area_downsample(&mask, factor)
    } else {
        mask
    };
    let pooled = masked_average_pool(&feats, &mask);
    Ok(pooled.sum_axes(&[0]).mul_scalar(1.0 / count as f64))
}
