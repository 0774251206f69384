use std::fmt;

use serde::{Deserialize, Serialize};

use super::caa::SteeringVector;
use super::data::Example;
use crate::adapters::{AdapterBank, ProbeCalibrator};
use crate::backbone::{Backbone, InjectionSite};
use crate::diagnostics::{evaluation_table, risk_from_table, RiskLoss, RiskReport};
use crate::error::{MariError, Result};
use crate::gate::{gated_inference_batch, EnergyReport, GateConfig};
use crate::numerics::stats::argmax;
use crate::router::{option_entropy, stacked_option_scores, Answer, EvalCounter, RouteDecision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Base,
    Caa,
    SingleAdapter,
    MultiUngated,
    MultiGated,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::Caa,
        Variant::SingleAdapter,
        Variant::MultiUngated,
        Variant::MultiGated,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Caa => "caa",
            Variant::SingleAdapter => "single-adapter",
            Variant::MultiUngated => "multi-ungated",
            Variant::MultiGated => "multi-gated",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a variant may need; absent pieces only fail the variants using them.
#[derive(Clone, Copy, Debug)]
pub struct EvalContext<'a> {
    pub backbone: &'a Backbone,
    pub site: &'a InjectionSite,
    pub single: Option<&'a AdapterBank>,
    pub multi: Option<&'a AdapterBank>,
    pub probe: Option<&'a ProbeCalibrator>,
    /// Calibrated gate; its `τ_E` is used as is on every split.
    pub gate: Option<&'a GateConfig>,
    pub caa: Option<&'a SteeringVector>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalSplits<'a> {
    pub applicable: &'a [Example],
    pub benign: &'a [Example],
    pub shifted: &'a [Example],
}

impl<'a> EvalSplits<'a> {
    pub fn named(&self) -> [(&'static str, &'a [Example]); 3] {
        [
            ("applicable", self.applicable),
            ("benign", self.benign),
            ("shifted", self.shifted),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub accuracy: f64,
    /// Fraction of items the gate lets through (1 for always-on edits, 0 for the base model).
    pub gate_rate: f64,
    /// Fraction of edited items sent to each adapter; empty without adapters.
    pub usage: Vec<f64>,
    /// Adapter applications spent on the split.
    pub adapter_forwards: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: Variant,
    pub applicable: SplitMetrics,
    pub benign: SplitMetrics,
    pub shifted: SplitMetrics,
    /// Routing risk on the applicable split (0–1 loss), for adapter variants.
    pub risk: Option<RiskReport>,
}

impl VariantMetrics {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        match name {
            "applicable" => Some(&self.applicable),
            "benign" => Some(&self.benign),
            "shifted" => Some(&self.shifted),
            _ => None,
        }
    }
}

/// One scored item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub variant: Variant,
    pub split: String,
    pub id: u64,
    pub gold: usize,
    pub answer: usize,
    pub correct: bool,
    pub decision: Option<RouteDecision>,
    pub energy: Option<EnergyReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<VariantMetrics>,
    pub traces: Vec<TraceRecord>,
}

impl EvalReport {
    pub fn get(&self, v: Variant) -> Option<&VariantMetrics> {
        self.metrics.iter().find(|m| m.variant == v)
    }
}

struct Scored {
    answers: Vec<usize>,
    decisions: Vec<Option<RouteDecision>>,
    energy: Vec<Option<EnergyReport>>,
    forwards: usize,
}

fn need<'a, T>(x: Option<&'a T>, what: &str, v: Variant) -> Result<&'a T> {
    x.ok_or_else(|| MariError::MissingArtifact(format!("{what} (needed by {v})")))
}

fn routed_scores(
    ctx: &EvalContext,
    bank: &AdapterBank,
    items: &[(&[usize], &[Vec<usize>])],
) -> Result<Scored> {
    let counter = EvalCounter::new();
    let all = stacked_option_scores(ctx.backbone, bank, items, ctx.site, Some(&counter))?;
    let mut answers = Vec::with_capacity(items.len());
    let mut decisions = Vec::with_capacity(items.len());
    for zs in all {
        let d = RouteDecision::from_uncertainties(
            zs.iter()
                .map(|z| option_entropy(z))
                .collect::<Result<_>>()?,
        )?;
        answers.push(argmax(&zs[d.chosen]));
        decisions.push(Some(d));
    }
    Ok(Scored {
        answers,
        energy: vec![None; decisions.len()],
        decisions,
        forwards: counter.get(),
    })
}

fn score(ctx: &EvalContext, v: Variant, data: &[Example]) -> Result<Scored> {
    let items: Vec<(&[usize], &[Vec<usize>])> = data
        .iter()
        .map(|e| (e.prompt.as_slice(), e.options.as_slice()))
        .collect();
    let plain = |z: Vec<Vec<f64>>| Scored {
        answers: z.iter().map(|z| argmax(z)).collect(),
        decisions: vec![None; z.len()],
        energy: vec![None; z.len()],
        forwards: 0,
    };
    match v {
        Variant::Base => Ok(plain(ctx.backbone.option_scores_batch(
            &items,
            ctx.site,
            &|_, h| h.to_vec(),
        )?)),
        Variant::Caa => {
            let s = need(ctx.caa, "steering vector", v)?;
            let mut out = plain(s.option_scores_batch(ctx.backbone, &items, ctx.site)?);
            out.forwards = items.len();
            Ok(out)
        }
        Variant::SingleAdapter => {
            let bank = need(ctx.single, "single adapter", v)?;
            if bank.len() != 1 {
                return Err(MariError::Contract(format!(
                    "single-adapter variant got a bank of {}",
                    bank.len()
                )));
            }
            routed_scores(ctx, bank, &items)
        }
        Variant::MultiUngated => routed_scores(ctx, need(ctx.multi, "adapter bank", v)?, &items),
        Variant::MultiGated => {
            let gate = need(ctx.gate, "gate configuration", v)?;
            gate.tau()?;
            let bank = need(ctx.multi, "adapter bank", v)?;
            let probe = need(ctx.probe, "probe", v)?;
            let counter = EvalCounter::new();
            let out = gated_inference_batch(
                ctx.backbone,
                bank,
                probe,
                gate,
                &items,
                ctx.site,
                Some(&counter),
            )?;
            let mut s = Scored {
                answers: Vec::new(),
                decisions: Vec::new(),
                energy: Vec::new(),
                forwards: counter.get(),
            };
            for o in out {
                match o.answer {
                    Answer::Option(a) => s.answers.push(a),
                    Answer::Tokens(_) => {
                        return Err(MariError::Contract(
                            "choice item answered with tokens".into(),
                        ))
                    }
                }
                s.decisions.push(o.decision);
                s.energy.push(Some(o.report));
            }
            Ok(s)
        }
    }
}

fn split_metrics(v: Variant, data: &[Example], s: &Scored, k: usize) -> SplitMetrics {
    let n = data.len();
    let correct = data
        .iter()
        .zip(&s.answers)
        .filter(|(e, &a)| a == e.gold)
        .count();
    let gate_rate = match v {
        Variant::Base => 0.0,
        Variant::MultiGated => {
            s.energy
                .iter()
                .filter(|r| r.as_ref().is_some_and(|r| r.applicable))
                .count() as f64
                / n as f64
        }
        _ => 1.0,
    };
    let mut usage = vec![0.0; k];
    let routed: Vec<usize> = s.decisions.iter().flatten().map(|d| d.chosen).collect();
    for &c in &routed {
        usage[c] += 1.0;
    }
    if !routed.is_empty() {
        usage.iter_mut().for_each(|u| *u /= routed.len() as f64);
    }
    SplitMetrics {
        n,
        accuracy: correct as f64 / n as f64,
        gate_rate,
        usage,
        adapter_forwards: s.forwards,
    }
}

fn risk(ctx: &EvalContext, bank: &AdapterBank, data: &[Example]) -> Result<RiskReport> {
    let t = evaluation_table(ctx.backbone, bank, data, ctx.site)?;
    risk_from_table(&t.losses(RiskLoss::ZeroOne), &t.routed, 1.0)
}

/// Scores each variant on the three test splits with one fixed gate.
pub fn evaluate(
    ctx: &EvalContext,
    variants: &[Variant],
    splits: &EvalSplits,
) -> Result<EvalReport> {
    for (name, d) in splits.named() {
        if d.is_empty() {
            return Err(MariError::Contract(format!("{name} split is empty")));
        }
        if d.iter().any(|e| e.gold >= e.options.len()) {
            return Err(MariError::Contract(format!(
                "{name} split has items without gold answers"
            )));
        }
    }
    if variants.contains(&Variant::MultiGated) {
        need(ctx.gate, "gate configuration", Variant::MultiGated)?.tau()?;
    }
    let mut metrics = Vec::with_capacity(variants.len());
    let mut traces = Vec::new();
    for &v in variants {
        let k = match v {
            Variant::SingleAdapter => 1,
            Variant::MultiUngated | Variant::MultiGated => {
                need(ctx.multi, "adapter bank", v)?.len()
            }
            _ => 0,
        };
        let mut per = Vec::with_capacity(3);
        for (name, data) in splits.named() {
            let s = score(ctx, v, data)?;
            per.push(split_metrics(v, data, &s, k));
            for (i, e) in data.iter().enumerate() {
                traces.push(TraceRecord {
                    variant: v,
                    split: name.into(),
                    id: e.id,
                    gold: e.gold,
                    answer: s.answers[i],
                    correct: s.answers[i] == e.gold,
                    decision: s.decisions[i].clone(),
                    energy: s.energy[i].clone(),
                });
            }
        }
        let risk = match v {
            Variant::SingleAdapter => Some(risk(
                ctx,
                need(ctx.single, "single adapter", v)?,
                splits.applicable,
            )?),
            Variant::MultiUngated | Variant::MultiGated => Some(risk(
                ctx,
                need(ctx.multi, "adapter bank", v)?,
                splits.applicable,
            )?),
            _ => None,
        };
        let shifted = per.pop().expect("three splits");
        let benign = per.pop().expect("three splits");
        let applicable = per.pop().expect("three splits");
        metrics.push(VariantMetrics {
            variant: v,
            applicable,
            benign,
            shifted,
            risk,
        });
    }
    Ok(EvalReport { metrics, traces })
}
