//! Two-class Dirichlet evidence: concentration, probability, uncertainty and
//! the expected negative log-likelihood used for supervision.
//!
//! Scalar functions work on a single pixel; [`DirichletField`] carries the same
//! quantities over a `[B, 2, H, W]` evidence map as differentiable [`Var`]s.

use refcod_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvidentialError {
    #[error("digamma is undefined for x = {0} (needs x > 0)")]
    Domain(f64),
    #[error("evidence must be non-negative, found {0}")]
    NegativeEvidence(f64),
    #[error("evidence field must have shape [B, 2, H, W], got {0:?}")]
    EvidenceShape(Vec<usize>),
    #[error("uncertainty weights ({vacuity}, {variance}) can push uncertainty above 1")]
    Weights { vacuity: f64, variance: f64 },
}

/// Shift point of the recurrence; the asymptotic series is used from here up.
const SHIFT: f64 = 6.0;

/// Digamma without the domain check. Returns NaN for `x <= 0`.
pub(crate) fn psi(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Bernoulli terms B_2k / (2k x^2k), k = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 / x - series
}

/// Trigamma, the derivative of digamma. Returns NaN for `x <= 0`.
pub(crate) fn trigamma(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * inv
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2
                                        * (5.0 / 66.0
                                            - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    acc + inv + 0.5 * inv2 + series
}

/// The digamma function ψ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64, EvidentialError> {
    if x > 0.0 && x.is_finite() {
        Ok(psi(x))
    } else {
        Err(EvidentialError::Domain(x))
    }
}

/// Elementwise digamma on a [`Var`], differentiable through trigamma.
pub fn digamma_var(x: &Var) -> Var {
    x.unary(psi, trigamma)
}

/// Weights of the vacuity and variance terms in the unified uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyWeights {
    pub vacuity: f64,
    pub variance: f64,
}

impl Default for UncertaintyWeights {
    fn default() -> Self {
        Self {
            vacuity: 0.9,
            variance: 1.2,
        }
    }
}

impl UncertaintyWeights {
    pub fn new(vacuity: f64, variance: f64) -> Result<Self, EvidentialError> {
        let w = Self { vacuity, variance };
        w.validate()?;
        Ok(w)
    }

    /// Vacuity peaks at 1 and variance at 1/12, so this bound keeps U in [0, 1].
    pub fn validate(&self) -> Result<(), EvidentialError> {
        let bound = self.vacuity + self.variance / 12.0;
        if self.vacuity < 0.0 || self.variance < 0.0 || bound > 1.0 + 1e-12 {
            return Err(EvidentialError::Weights {
                vacuity: self.vacuity,
                variance: self.variance,
            });
        }
        Ok(())
    }
}

/// Dirichlet parameters of a single pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dirichlet2 {
    pub alpha0: f64,
    pub alpha1: f64,
}

impl Dirichlet2 {
    pub fn from_evidence(e0: f64, e1: f64) -> Result<Self, EvidentialError> {
        for e in [e0, e1] {
            if !(e >= 0.0) {
                return Err(EvidentialError::NegativeEvidence(e));
            }
        }
        Ok(Self {
            alpha0: e0 + 1.0,
            alpha1: e1 + 1.0,
        })
    }

    pub fn strength(&self) -> f64 {
        self.alpha0 + self.alpha1
    }

    /// Target-class probability.
    pub fn prob(&self) -> f64 {
        self.alpha1 / self.strength()
    }

    pub fn vacuity(&self) -> f64 {
        2.0 / self.strength()
    }

    pub fn variance(&self) -> f64 {
        let s = self.strength();
        self.alpha1 * (s - self.alpha1) / (s * s * (s + 1.0))
    }

    pub fn uncertainty(&self, w: UncertaintyWeights) -> f64 {
        w.vacuity * self.vacuity() + w.variance * self.variance()
    }

    pub fn confidence(&self, w: UncertaintyWeights) -> f64 {
        1.0 - self.uncertainty(w)
    }

    /// `ψ(S) − ψ(α_y)`, strictly positive.
    pub fn nll(&self, target: bool) -> f64 {
        let alpha_y = if target { self.alpha1 } else { self.alpha0 };
        psi(self.strength()) - psi(alpha_y)
    }
}

/// Dirichlet quantities over a spatial evidence map.
///
/// `alpha` is `[B, 2, H, W]` (background first); every other field is `[B, 1, H, W]`.
#[derive(Clone)]
pub struct DirichletField {
    pub alpha: Var,
    pub strength: Var,
    pub prob: Var,
    pub uncertainty: Var,
    pub confidence: Var,
}

impl DirichletField {
    pub fn from_evidence(
        evidence: &Var,
        weights: UncertaintyWeights,
    ) -> Result<Self, EvidentialError> {
        let shape = evidence.shape();
        if shape.len() != 4 || shape[1] != 2 {
            return Err(EvidentialError::EvidenceShape(shape.to_vec()));
        }
        if let Some(&bad) = evidence.value().data().iter().find(|e| !(**e >= 0.0)) {
            return Err(EvidentialError::NegativeEvidence(bad));
        }
        let alpha = evidence.add_scalar(1.0);
        let a0 = alpha.narrow(1, 0, 1);
        let a1 = alpha.narrow(1, 1, 1);
        let strength = a0.add(&a1);
        let prob = a1.div(&strength);
        let vacuity = strength.powf(-1.0).mul_scalar(2.0);
        let variance = a1
            .mul(&a0)
            .div(&strength.square().mul(&strength.add_scalar(1.0)));
        let uncertainty = vacuity
            .mul_scalar(weights.vacuity)
            .add(&variance.mul_scalar(weights.variance));
        let confidence = uncertainty.rsub_scalar(1.0);
        Ok(Self {
            alpha,
            strength,
            prob,
            uncertainty,
            confidence,
        })
    }

    /// Per-pixel `ψ(S) − ψ(α_y)` for a binary `[B, 1, H, W]` target.
    pub fn nll(&self, target: &Tensor) -> Var {
        let y = Var::constant(target.clone());
        let alpha_y = self.target_alpha(&y);
        digamma_var(&self.strength).sub(&digamma_var(&alpha_y))
    }

    /// `α_y`: the concentration of the labelled class.
    pub fn target_alpha(&self, y: &Var) -> Var {
        let a0 = self.alpha.narrow(1, 0, 1);
        let a1 = self.alpha.narrow(1, 1, 1);
        a1.mul(y).add(&a0.mul(&y.rsub_scalar(1.0)))
    }
}
