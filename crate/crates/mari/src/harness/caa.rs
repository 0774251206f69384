use serde::{Deserialize, Serialize};

use super::data::Example;
use crate::backbone::{Backbone, InjectionSite};
use crate::diagnostics::pooled_activation;
use crate::error::{ensure_dim, MariError, Result};
use crate::numerics::stats::argmax;

pub const MIN_PAIRS: usize = 10;

/// Strengths tried by [`select_strength`] when none are configured.
pub const DEFAULT_STRENGTHS: [f64; 7] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// Mean-difference steering: `h ↦ h + c·v` on every input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub v: Vec<f64>,
    pub strength: f64,
}

/// Activation of the gold answer and of the model's own (wrong) answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationPair {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl SteeringVector {
    pub fn edit(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .zip(&self.v)
            .map(|(x, v)| x + self.strength * v)
            .collect()
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        SteeringVector {
            v: self.v.clone(),
            strength,
        }
    }

    pub fn option_scores_batch(
        &self,
        backbone: &Backbone,
        items: &[(&[usize], &[Vec<usize>])],
        site: &InjectionSite,
    ) -> Result<Vec<Vec<f64>>> {
        ensure_dim(backbone.d_model(), self.v.len())?;
        backbone.option_scores_batch(items, site, &|_, h| self.edit(h))
    }

    pub fn accuracy(
        &self,
        backbone: &Backbone,
        data: &[Example],
        site: &InjectionSite,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(MariError::Contract("accuracy over an empty set".into()));
        }
        let items: Vec<(&[usize], &[Vec<usize>])> = data
            .iter()
            .map(|e| (e.prompt.as_slice(), e.options.as_slice()))
            .collect();
        let z = self.option_scores_batch(backbone, &items, site)?;
        Ok(data
            .iter()
            .zip(&z)
            .filter(|(e, z)| argmax(z) == e.gold)
            .count() as f64
            / data.len() as f64)
    }
}

/// Pairs from the items the frozen model gets wrong.
pub fn activation_pairs(
    backbone: &Backbone,
    data: &[Example],
    site: &InjectionSite,
) -> Result<Vec<ActivationPair>> {
    let items: Vec<(&[usize], &[Vec<usize>])> = data
        .iter()
        .map(|e| (e.prompt.as_slice(), e.options.as_slice()))
        .collect();
    let base = backbone.option_scores_batch(&items, site, &|_, h| h.to_vec())?;
    let mut out = Vec::new();
    for (e, z) in data.iter().zip(&base) {
        let pred = argmax(z);
        if pred != e.gold {
            out.push(ActivationPair {
                positive: pooled_activation(backbone, &e.prompt, &e.options[e.gold], site)?,
                negative: pooled_activation(backbone, &e.prompt, &e.options[pred], site)?,
            });
        }
    }
    Ok(out)
}

/// `v = mean a(x, y*) − mean a(x, ŷ)`.
pub fn caa_baseline(
    backbone: &Backbone,
    pairs: &[ActivationPair],
    strength: f64,
) -> Result<SteeringVector> {
    if pairs.is_empty() {
        return Err(MariError::Invalid("empty pair set".into()));
    }
    if pairs.len() < MIN_PAIRS {
        return Err(MariError::Contract(format!(
            "{} pairs, need at least {MIN_PAIRS}",
            pairs.len()
        )));
    }
    if !strength.is_finite() {
        return Err(MariError::Invalid(format!(
            "strength {strength} is not finite"
        )));
    }
    let d = backbone.d_model();
    let mut v = vec![0.0; d];
    for p in pairs {
        ensure_dim(d, p.positive.len())?;
        ensure_dim(d, p.negative.len())?;
        for ((a, x), y) in v.iter_mut().zip(&p.positive).zip(&p.negative) {
            *a += x - y;
        }
    }
    v.iter_mut().for_each(|a| *a /= pairs.len() as f64);
    Ok(SteeringVector { v, strength })
}

/// The strength with the best accuracy on `data`; the smallest wins ties.
pub fn select_strength(
    backbone: &Backbone,
    steer: &SteeringVector,
    strengths: &[f64],
    data: &[Example],
    site: &InjectionSite,
) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut sorted = strengths.to_vec();
    sorted.sort_by(f64::total_cmp);
    for c in sorted {
        let acc = steer.with_strength(c).accuracy(backbone, data, site)?;
        if acc > best.0 {
            best = (acc, c);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return Err(MariError::Invalid("no steering strengths to try".into()));
    }
    Ok(best.1)
}
