//! The full network: backbone, reference encoder, reference-guided encoder,
//! evidential decoder and boundary refinement of the two finest predictions.

use rand::Rng;
use refcod_tensor::nn::{ParamStore, Session};
use refcod_tensor::{Tensor, Var};
use thiserror::Error;

use crate::barm::{Barm, Refinement};
use crate::config::{AblationConfig, ConfigError, ModelConfig};
use crate::data::{DataError, Reference, ReferenceEncoder, Sample};
use crate::losses::LossInputs;
use crate::rgde::{Backbone, EncoderOutput, Rgde};
use crate::uaed::{DecodeState, Uaed};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sample {id}: {source}")]
    Reference { id: String, source: DataError },
    #[error("batch: {0}")]
    Batch(String),
}

/// Stacked samples: images `[B, 3, H, W]`, masks `[B, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor,
    pub gt: Tensor,
    pub references: Vec<Vec<Reference>>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self, ModelError> {
        let first = samples
            .first()
            .ok_or_else(|| ModelError::Batch("no samples".into()))?;
        let shape = first.query.shape().to_vec();
        let mut images = Vec::with_capacity(samples.len() * first.query.numel());
        let mut gt = Vec::with_capacity(samples.len() * first.gt.numel());
        for s in samples {
            if s.query.shape() != shape.as_slice() || s.gt.shape() != &shape[1..] {
                return Err(ModelError::Batch(format!(
                    "sample {} is {:?} with mask {:?}, expected {shape:?}",
                    s.id,
                    s.query.shape(),
                    s.gt.shape()
                )));
            }
            images.extend_from_slice(s.query.data());
            gt.extend_from_slice(s.gt.data());
        }
        let b = samples.len();
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: Tensor::from_vec(&[b, 3, shape[1], shape[2]], images),
            gt: Tensor::from_vec(&[b, 1, shape[1], shape[2]], gt),
            references: samples.iter().map(|s| s.references.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub struct ModelOutput {
    pub encoder: EncoderOutput,
    pub decode: DecodeState,
    /// Refinement of scales 1 and 2; absent when refinement is ablated.
    pub refinements: Option<[Refinement; 2]>,
}

impl ModelOutput {
    /// Refined logits at scales 1 and 2 (the decoder logits when refinement is off).
    pub fn refined_logits(&self) -> [&Var; 2] {
        match &self.refinements {
            Some([a, b]) => [&a.logits, &b.logits],
            None => [&self.decode.logits[0], &self.decode.logits[1]],
        }
    }

    /// The prediction that gets evaluated: sigmoid of the refined scale-1 logits, `[B, 1, H, W]`.
    pub fn final_prob(&self) -> Var {
        self.refined_logits()[0].sigmoid()
    }

    pub fn loss_inputs<'a>(&'a self, gt: &'a Tensor) -> LossInputs<'a> {
        LossInputs {
            decoder: [&self.decode.logits[0], &self.decode.logits[1]],
            refined: self.refined_logits(),
            dirichlet: self.decode.dirichlet.as_ref(),
            gt,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub reference: ReferenceEncoder,
    pub rgde: Rgde,
    pub uaed: Uaed,
    pub barm: Barm,
}

impl Model {
    /// Registers every parameter in `store`, drawing initial values from `rng`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            backbone: Backbone::new(store, config.backbone_channels, rng),
            reference: ReferenceEncoder::new(store, config.descriptor_channels, rng),
            rgde: Rgde::new(store, config, rng),
            uaed: Uaed::new(store, config, rng),
            barm: Barm::new(store, config.refine_hidden, rng),
        })
    }

    /// Descriptors `[B, C_r, 1, 1]` for the references of each batch item.
    pub fn describe(&self, s: &Session<'_>, batch: &Batch) -> Result<Var, ModelError> {
        let per_item = batch
            .references
            .iter()
            .zip(&batch.ids)
            .map(|(refs, id)| {
                self.reference
                    .describe(s, refs)
                    .map_err(|source| ModelError::Reference {
                        id: id.clone(),
                        source,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Var::concat(&per_item, 0))
    }

    pub fn forward(
        &self,
        s: &Session<'_>,
        batch: &Batch,
        ablation: &AblationConfig,
    ) -> Result<ModelOutput, ModelError> {
        let size = self.config.image_size;
        if batch.images.shape()[2..] != [size, size] {
            return Err(ModelError::Batch(format!(
                "images are {:?}, the model expects {size}×{size}",
                batch.images.shape()
            )));
        }
        let image = Var::constant(batch.images.clone());
        let pyramid = self.backbone.forward(s, &image)?;
        let descriptor = if ablation.rgde {
            Some(self.describe(s, batch)?)
        } else {
            None
        };
        let encoder = self
            .rgde
            .forward(s, &pyramid, descriptor.as_ref(), ablation);
        let decode = self.uaed.forward(s, &encoder.encoded, ablation);
        let refinements = ablation.barm.then(|| {
            let edge = self.barm.edge_prior(s, &image);
            [0, 1].map(|i| self.barm.forward(s, &decode.logits[i], &edge))
        });
        Ok(ModelOutput {
            encoder,
            decode,
            refinements,
        })
    }
}
