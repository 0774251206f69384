use serde::{Deserialize, Serialize};

use super::data::{Applicability, Example, Regime};
use crate::adapters::AdapterBank;
use crate::backbone::{Backbone, InjectionSite};
use crate::error::{MariError, Result};
use crate::numerics::stats::argmax;
use crate::router::{routed_edit_batch, Answer};

/// How applicability labels are assigned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// RA/RB applicable, RC not.
    #[default]
    Regime,
    /// Applicable iff the frozen model is wrong and the routed intervention is right.
    Outcome,
}

impl std::str::FromStr for LabelMode {
    type Err = MariError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regime" => Ok(LabelMode::Regime),
            "outcome" => Ok(LabelMode::Outcome),
            _ => Err(MariError::Invalid(format!(
                "unknown label mode {s:?} (expected regime or outcome)"
            ))),
        }
    }
}

/// The trained intervention the outcome rule compares against.
#[derive(Clone, Copy, Debug)]
pub struct Intervention<'a> {
    pub backbone: &'a Backbone,
    pub bank: &'a AdapterBank,
    pub site: &'a InjectionSite,
}

pub fn label_applicability(
    example: &Example,
    mode: LabelMode,
    intervention: Option<&Intervention>,
) -> Result<Applicability> {
    Ok(label_all(std::slice::from_ref(example), mode, intervention)?.remove(0))
}

/// Labels for a whole split; the outcome rule runs in two packed passes.
pub fn label_all(
    data: &[Example],
    mode: LabelMode,
    intervention: Option<&Intervention>,
) -> Result<Vec<Applicability>> {
    match mode {
        LabelMode::Regime => Ok(data
            .iter()
            .map(|e| match e.regime {
                Regime::RA | Regime::RB => Applicability::Applicable,
                Regime::RC => Applicability::NonApplicable,
            })
            .collect()),
        LabelMode::Outcome => {
            let iv = intervention.ok_or_else(|| {
                MariError::MissingArtifact("outcome labels need trained adapters".into())
            })?;
            if data.is_empty() {
                return Ok(Vec::new());
            }
            if data.iter().any(|e| e.gold >= e.options.len()) {
                return Err(MariError::Contract(
                    "outcome labels need gold answers".into(),
                ));
            }
            let items: Vec<(&[usize], &[Vec<usize>])> = data
                .iter()
                .map(|e| (e.prompt.as_slice(), e.options.as_slice()))
                .collect();
            let base = iv
                .backbone
                .option_scores_batch(&items, iv.site, &|_, h| h.to_vec())?;
            let routed = routed_edit_batch(iv.backbone, iv.bank, &items, iv.site, None)?;
            Ok(data
                .iter()
                .zip(base.iter().zip(&routed))
                .map(|(e, (z, r))| {
                    if argmax(z) != e.gold && r.answer == Answer::Option(e.gold) {
                        Applicability::Applicable
                    } else {
                        Applicability::NonApplicable
                    }
                })
                .collect())
        }
    }
}

/// Fraction of positions where two label vectors agree.
pub fn label_agreement(a: &[Applicability], b: &[Applicability]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(MariError::Contract(
            "label vectors must be non-empty and aligned".into(),
        ));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(regime: Regime) -> Example {
        Example {
            id: 0,
            regime,
            prompt: vec![1, 2],
            options: vec![vec![0], vec![1]],
            gold: 0,
            label: Applicability::Unlabeled,
        }
    }

    #[test]
    fn regime_truth() {
        assert_eq!(
            label_applicability(&item(Regime::RC), LabelMode::Regime, None).unwrap(),
            Applicability::NonApplicable
        );
        assert_eq!(
            label_applicability(&item(Regime::RB), LabelMode::Regime, None).unwrap(),
            Applicability::Applicable
        );
    }

    #[test]
    fn outcome_needs_adapters() {
        let e = label_applicability(&item(Regime::RA), LabelMode::Outcome, None).unwrap_err();
        assert_eq!(e.code(), "MISSING_ARTIFACT");
    }

    #[test]
    fn parse_mode() {
        assert_eq!("outcome".parse::<LabelMode>().unwrap(), LabelMode::Outcome);
        assert!("truth".parse::<LabelMode>().is_err());
    }
}
