//! Training objectives: adversarial, perceptual, transmission-weighted pixel
//! and hint terms, their weighted sum, and the critic objective.

use dpte_autograd::{Float, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::vgg::Vgg16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: f64,
    pub perceptual: f64,
    pub transmission: f64,
    pub hint: f64,
    pub critic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 100.0,
            perceptual: 100.0,
            transmission: 100.0,
            hint: 100.0,
            critic: 1.0,
        }
    }
}

/// Reduction used inside a loss term; always averaged over elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    MeanAbsolute,
    MeanSquare,
}

impl Norm {
    pub fn reduce<T: Float>(self, diff: &Var<T>) -> Var<T> {
        match self {
            Norm::MeanAbsolute => diff.abs().mean_all(),
            Norm::MeanSquare => diff.square().mean_all(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    pub perceptual: Norm,
    pub hint: Norm,
    pub transmission: Norm,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            perceptual: Norm::MeanSquare,
            hint: Norm::MeanSquare,
            transmission: Norm::MeanAbsolute,
        }
    }
}

/// Frozen feature map for the perceptual term.
#[derive(Clone, Debug)]
pub enum Extractor {
    /// `φ(x) = x`, for tests and ablations.
    Identity,
    Vgg(Box<Vgg16>),
}

impl Extractor {
    pub fn features<T: Float>(&self, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Extractor::Identity => Ok(x.clone()),
            Extractor::Vgg(v) => v.features(x),
        }
    }
}

fn same_shape<T: Float>(what: &str, a: &Var<T>, b: &[usize]) -> Result<()> {
    if a.shape() != b {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b));
    }
    Ok(())
}

/// `−mean(C(S(x)))` over a batch of scores.
pub fn adversarial_term<T: Float>(fake_scores: &Var<T>) -> Var<T> {
    fake_scores.mean_all().neg()
}

/// Distance between extractor features of the output and of the clean target.
pub fn perceptual_term<T: Float>(fake: &Var<T>, clean: &Tensor<T>, ext: &Extractor, norm: Norm) -> Result<Var<T>> {
    same_shape("perceptual loss", fake, clean.shape())?;
    let target = ext.features(&Var::constant(clean.clone()))?.detach();
    let f = ext.features(fake)?;
    Ok(norm.reduce(&f.sub(&target)))
}

/// Distance between adapted student features and the teacher hint.
pub fn hint_term<T: Float>(adapted: &Var<T>, hint: &Tensor<T>, norm: Norm) -> Result<Var<T>> {
    same_shape("hint loss", adapted, hint.shape())?;
    Ok(norm.reduce(&adapted.sub(&Var::constant(hint.clone()))))
}

/// `‖τ⊙fake − τ⊙clean‖` with `τ` an `N×1×H×W` weight broadcast over channels.
pub fn transmission_term<T: Float>(fake: &Var<T>, clean: &Tensor<T>, tau: &Tensor<T>, norm: Norm) -> Result<Var<T>> {
    same_shape("transmission loss", fake, clean.shape())?;
    let (n, _, h, w) = clean.dims4();
    if tau.shape() != [n, 1, h, w] {
        return shape_err(format!("weight map {:?} for images {:?}", tau.shape(), clean.shape()));
    }
    let tau = Var::constant(tau.clone());
    let weighted_fake = fake.mul_spatial_map(&tau);
    let weighted_clean = Var::constant(clean.clone()).mul_spatial_map(&tau);
    Ok(norm.reduce(&weighted_fake.sub(&weighted_clean)))
}

/// Graph nodes of the generator objective's parts. `hint` is `None` when the
/// hint term is switched off, so it contributes no graph at all.
pub struct LossTerms<T: Float> {
    pub adversarial: Var<T>,
    pub perceptual: Var<T>,
    pub transmission: Var<T>,
    pub hint: Option<Var<T>>,
}

fn finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            component: component.to_string(),
        })
    }
}

/// Weighted generator objective as a graph node; fails naming the first
/// non-finite part.
pub fn integral_term<T: Float>(terms: &LossTerms<T>, w: &LossWeights, lambda: f64) -> Result<Var<T>> {
    finite("adversarial", terms.adversarial.item().as_f64())?;
    finite("perceptual", terms.perceptual.item().as_f64())?;
    finite("transmission", terms.transmission.item().as_f64())?;
    let c = T::from_f64_lossy;
    let mut total = terms
        .adversarial
        .scale(c(w.adversarial))
        .add(&terms.perceptual.scale(c(w.perceptual)))
        .add(&terms.transmission.scale(c(w.transmission)));
    let hint_weight = lambda * w.hint;
    if let Some(h) = &terms.hint {
        finite("hint", h.item().as_f64())?;
        if hint_weight != 0.0 {
            total = total.add(&h.scale(c(hint_weight)));
        }
    }
    Ok(total)
}

/// Scalar parts of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub adversarial: f64,
    pub perceptual: f64,
    pub transmission: f64,
    pub hint: f64,
}

/// `−score`.
pub fn adversarial_loss(fake_score: f64) -> Result<f64> {
    Ok(-finite("adversarial", fake_score)?)
}

/// `ω_A·adv + ω_P·per + ω_T·trans + λ·ω_H·hint`; the hint term is exactly
/// zero whenever `λ·ω_H` is.
pub fn integral_loss(parts: &LossParts, w: &LossWeights, lambda: f64) -> Result<f64> {
    let adv = finite("adversarial", parts.adversarial)?;
    let per = finite("perceptual", parts.perceptual)?;
    let trans = finite("transmission", parts.transmission)?;
    let hint = finite("hint", parts.hint)?;
    let hint_weight = lambda * w.hint;
    let hint_part = if hint_weight == 0.0 { 0.0 } else { hint_weight * hint };
    Ok(w.adversarial * adv + w.perceptual * per + w.transmission * trans + hint_part)
}

/// `ω_C·(score_real − score_fake) + gp_coeff·gp`.
pub fn critic_loss(score_real: f64, score_fake: f64, w: &LossWeights, gp_coeff: f64, gp: f64) -> Result<f64> {
    let r = finite("critic real score", score_real)?;
    let f = finite("critic fake score", score_fake)?;
    let gp = finite("gradient penalty", gp)?;
    Ok(w.critic * (r - f) + gp_coeff * gp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_examples() {
        assert_eq!(adversarial_loss(5.0).unwrap(), -5.0);
        assert_eq!(adversarial_loss(0.0).unwrap(), 0.0);
        assert!(matches!(adversarial_loss(f64::NAN), Err(Error::Numeric { .. })));
        let w = LossWeights::default();
        let ones = LossParts { adversarial: 1.0, perceptual: 1.0, transmission: 1.0, hint: 1.0 };
        assert_eq!(integral_loss(&ones, &w, 1.0).unwrap(), 400.0);
        assert_eq!(integral_loss(&ones, &w, 0.0).unwrap(), 300.0);
        assert_eq!(integral_loss(&LossParts::default(), &w, 1.0).unwrap(), 0.0);
        assert_eq!(critic_loss(2.0, 5.0, &w, 10.0, 0.0).unwrap(), -3.0);
        assert_eq!(critic_loss(1.0, 1.0, &w, 10.0, 0.0).unwrap(), 0.0);
        assert_eq!(critic_loss(1.0, 1.0, &w, 10.0, 0.5).unwrap(), 5.0);
    }

    #[test]
    fn nan_part_is_named() {
        let parts = LossParts { perceptual: f64::NAN, ..Default::default() };
        match integral_loss(&parts, &LossWeights::default(), 1.0) {
            Err(Error::Numeric { component }) => assert_eq!(component, "perceptual"),
            other => panic!("{other:?}"),
        }
    }
}
