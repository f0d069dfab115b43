//! Training objectives: boundary-weighted evidential loss with a focal term,
//! the weighted BCE + weighted IoU structure loss, and their weighted total.

use refcod_tensor::ops::{area_downsample, avg_pool_same};
use refcod_tensor::{Tensor, Var};
use serde::Serialize;

use crate::config::{LossConfig, Objective};
use crate::evidential::DirichletField;
use crate::filters::sobel_magnitude;

/// Probabilities are clamped this far from 0 and 1 before taking a logit.
pub const PROB_EPS: f64 = 1e-12;

/// `1 + beta · |sobel(gt)| / max |sobel(gt)|` for an `[H, W]` mask; all ones when the mask has no edges.
pub fn boundary_weight_map(gt: &Tensor, beta: f64) -> Tensor {
    let mag = sobel_magnitude(gt);
    let peak = mag.max();
    if peak <= 0.0 {
        return Tensor::ones(gt.shape());
    }
    mag.map(|m| 1.0 + beta * m / peak)
}

/// [`boundary_weight_map`] applied to every image of a `[B, 1, H, W]` batch.
pub fn boundary_weights(gt: &Tensor, beta: f64) -> Tensor {
    let s = gt.shape();
    let plane = s[2] * s[3];
    let data = gt
        .data()
        .chunks(plane)
        .flat_map(|m| {
            boundary_weight_map(&Tensor::from_vec(&[s[2], s[3]], m.to_vec()), beta).into_data()
        })
        .collect();
    Tensor::from_vec(s, data)
}

/// Area-pools a `[B, 1, H, W]` mask by `factor` and thresholds at 0.5.
pub fn downsample_mask(gt: &Tensor, factor: usize) -> Tensor {
    area_downsample(gt, factor).map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Per-pixel focal term `−(1 − p_t)^γ · log p_t` with `p_t = α_y / S`.
pub fn focal_map(field: &DirichletField, target: &Tensor, gamma: f64) -> Var {
    let y = Var::constant(target.clone());
    let alpha_y = field.target_alpha(&y);
    let log_pt = alpha_y.ln().sub(&field.strength.ln());
    let pt = alpha_y.div(&field.strength);
    pt.rsub_scalar(1.0).powf(gamma).mul(&log_pt).neg()
}

/// Evidential objective and its parts, all scalars.
pub struct EvidentialTerms {
    /// `mean(w · (ψ(S) − ψ(α_y))) + λ · mean(focal)`.
    pub total: Var,
    pub nll: Var,
    pub focal: Var,
}

/// `target` and `weights` are `[B, 1, H, W]` at the field's resolution.
pub fn evidential_loss(
    field: &DirichletField,
    target: &Tensor,
    weights: &Tensor,
    lambda: f64,
    gamma: f64,
) -> EvidentialTerms {
    let nll = field
        .nll(target)
        .mul(&Var::constant(weights.clone()))
        .mean();
    let focal = focal_map(field, target, gamma).mean();
    EvidentialTerms {
        total: nll.add(&focal.mul_scalar(lambda)),
        nll,
        focal,
    }
}

/// Position-aware pixel weights `1 + mu · |avgpool_k(gt) − gt|` (zero padding counted).
pub fn structure_weights(gt: &Tensor, kernel: usize, mu: f64) -> Tensor {
    let pooled = avg_pool_same(gt, kernel);
    pooled.zip_map(gt, |p, g| 1.0 + mu * (p - g).abs())
}

/// Weighted BCE plus weighted IoU on `[B, 1, H, W]` logits, averaged over the batch.
pub fn structural_loss_logits(logits: &Var, gt: &Tensor, kernel: usize, mu: f64) -> Var {
    let weit = Var::constant(structure_weights(gt, kernel, mu));
    let y = Var::constant(gt.clone());
    let axes = [1, 2, 3];
    let bce = logits.softplus().sub(&logits.mul(&y));
    let wbce = bce.mul(&weit).sum_axes(&axes).div(&weit.sum_axes(&axes));
    let pred = logits.sigmoid();
    let inter = pred.mul(&y).mul(&weit).sum_axes(&axes);
    let union = pred.add(&y).mul(&weit).sum_axes(&axes);
    let wiou = inter
        .add_scalar(1.0)
        .div(&union.sub(&inter).add_scalar(1.0))
        .rsub_scalar(1.0);
    wbce.add(&wiou).mean()
}

/// Structure loss on probabilities, through a clamped logit.
pub fn structural_loss(pred: &Var, gt: &Tensor, kernel: usize, mu: f64) -> Var {
    structural_loss_logits(&prob_to_logit(pred), gt, kernel, mu)
}

pub fn prob_to_logit(p: &Var) -> Var {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    p.ln().sub(&p.rsub_scalar(1.0).ln())
}

/// Mean binary cross-entropy on logits.
pub fn bce_logits(logits: &Var, gt: &Tensor) -> Var {
    logits
        .softplus()
        .sub(&logits.mul(&Var::constant(gt.clone())))
        .mean()
}

/// Scalar breakdown of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    /// Structure loss of the decoder maps at the two finest scales.
    pub structural: [f64; 2],
    /// Structure loss of the refined maps at the same scales.
    pub structural_refined: [f64; 2],
    /// The full evidential term, focal part included.
    pub evidential: f64,
    /// Unweighted mean focal term.
    pub focal: f64,
}

impl LossReport {
    /// Recomputes the total from the parts.
    pub fn recompose(&self, w: &LossConfig) -> f64 {
        (0..2)
            .map(|i| w.omega[i] * self.structural[i] + w.eta[i] * self.structural_refined[i])
            .sum::<f64>()
            + w.kappa * self.evidential
    }
}

/// Inputs to [`total_loss`] for one batch.
pub struct LossInputs<'a> {
    /// Full-resolution decoder logits at scales 1 and 2.
    pub decoder: [&'a Var; 2],
    /// Refined logits at scales 1 and 2.
    pub refined: [&'a Var; 2],
    pub dirichlet: Option<&'a DirichletField>,
    /// `[B, 1, H, W]` binary ground truth.
    pub gt: &'a Tensor,
}

/// Weighted total of structure, refined-structure and evidential terms.
pub fn total_loss(inputs: &LossInputs<'_>, w: &LossConfig) -> (Var, LossReport) {
    let structure = |z: &Var| match w.objective {
        Objective::Evidential => {
            structural_loss_logits(z, inputs.gt, w.structure_kernel, w.structure_weight)
        }
        Objective::Bce => bce_logits(z, inputs.gt),
    };
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    let mut accumulate = |term: Var, weight: f64| {
        let weighted = term.mul_scalar(weight);
        total = Some(match total.take() {
            Some(t) => t.add(&weighted),
            None => weighted,
        });
    };
    for i in 0..2 {
        let str_dec = structure(inputs.decoder[i]);
        let str_ref = structure(inputs.refined[i]);
        report.structural[i] = str_dec.value().item();
        report.structural_refined[i] = str_ref.value().item();
        accumulate(str_dec, w.omega[i]);
        accumulate(str_ref, w.eta[i]);
    }
    if let Some(field) = inputs.dirichlet {
        let side = field.alpha.shape()[2];
        let factor = inputs.gt.shape()[2] / side;
        let target = downsample_mask(inputs.gt, factor);
        let evid = match w.objective {
            Objective::Evidential => {
                let weights = boundary_weights(&target, w.beta_bnd);
                let terms =
                    evidential_loss(field, &target, &weights, w.lambda_focal, w.gamma_focal);
                report.focal = terms.focal.value().item();
                terms.total
            }
            Objective::Bce => {
                let logit = field
                    .alpha
                    .narrow(1, 1, 1)
                    .ln()
                    .sub(&field.alpha.narrow(1, 0, 1).ln());
                bce_logits(&logit, &target)
            }
        };
        report.evidential = evid.value().item();
        accumulate(evid, w.kappa);
    }
    let total = total.expect("two structure scales are always present");
    report.total = total.value().item();
    (total, report)
}
