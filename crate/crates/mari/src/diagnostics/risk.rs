use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterBank;
use crate::backbone::{Backbone, InjectionSite};
use crate::error::{MariError, Result};
use crate::harness::Example;
use crate::numerics::kernels::log_softmax_row;
use crate::numerics::stats::argmax;
use crate::router::{option_entropy, stacked_option_scores, RouteDecision};

/// Bounded per-example loss used for the routing risk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskLoss {
    ZeroOne,
    /// Cross-entropy over the options, clipped at the given bound.
    ClippedCe(f64),
}

impl RiskLoss {
    pub fn bound(&self) -> f64 {
        match self {
            RiskLoss::ZeroOne => 1.0,
            RiskLoss::ClippedCe(c) => *c,
        }
    }

    fn eval(&self, z: &[f64], gold: usize) -> f64 {
        match self {
            RiskLoss::ZeroOne => f64::from(argmax(z) != gold),
            RiskLoss::ClippedCe(c) => (-log_softmax_row(z)[gold]).min(*c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub r_ent: f64,
    pub r_min: f64,
    pub r_single: f64,
    pub eta: f64,
    pub l_bound: f64,
    /// `R_single − R_min`.
    pub delta_spec: f64,
    /// `R_ent ≤ R_min + L·η`.
    pub bound_holds: bool,
    /// `Δ_spec > L·η ⇒ R_ent < R_single`.
    pub improvement_implication_holds: bool,
}

/// Per-item, per-adapter option scores plus the entropy-routed choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTable {
    /// `scores[i][k]`
    pub scores: Vec<Vec<Vec<f64>>>,
    pub golds: Vec<usize>,
    pub routed: Vec<usize>,
}

impl EvaluationTable {
    pub fn losses(&self, loss: RiskLoss) -> Vec<Vec<f64>> {
        self.scores
            .iter()
            .zip(&self.golds)
            .map(|(zs, &g)| zs.iter().map(|z| loss.eval(z, g)).collect())
            .collect()
    }

    pub fn correct(&self) -> Vec<Vec<bool>> {
        self.scores
            .iter()
            .zip(&self.golds)
            .map(|(zs, &g)| zs.iter().map(|z| argmax(z) == g).collect())
            .collect()
    }
}

/// Scores every item under every adapter and records the routing choice.
pub fn evaluation_table(
    backbone: &Backbone,
    bank: &AdapterBank,
    data: &[Example],
    site: &InjectionSite,
) -> Result<EvaluationTable> {
    if data.is_empty() {
        return Err(MariError::Contract("empty dataset".into()));
    }
    if data.iter().any(|e| e.gold >= e.options.len()) {
        return Err(MariError::Contract("dataset items need gold labels".into()));
    }
    let items: Vec<(&[usize], &[Vec<usize>])> = data
        .iter()
        .map(|e| (e.prompt.as_slice(), e.options.as_slice()))
        .collect();
    let scores = stacked_option_scores(backbone, bank, &items, site, None)?;
    let routed = scores
        .iter()
        .map(|zs| {
            Ok(RouteDecision::from_uncertainties(
                zs.iter()
                    .map(|z| option_entropy(z))
                    .collect::<Result<_>>()?,
            )?
            .chosen)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationTable {
        scores,
        golds: data.iter().map(|e| e.gold).collect(),
        routed,
    })
}

/// Risk report from a loss table `losses[i][k]` and routed choices.
///
/// An item counts as misrouted when the routed adapter's loss exceeds the
/// item's minimum, so ties with the oracle are not misroutings.
pub fn risk_from_table(losses: &[Vec<f64>], routed: &[usize], l_bound: f64) -> Result<RiskReport> {
    let n = losses.len();
    if n == 0 || routed.len() != n {
        return Err(MariError::Contract(
            "loss table and routing must be non-empty and aligned".into(),
        ));
    }
    let k = losses[0].len();
    if k == 0 || losses.iter().any(|r| r.len() != k) || routed.iter().any(|&r| r >= k) {
        return Err(MariError::Contract(
            "ragged loss table or routing outside 0..K".into(),
        ));
    }
    if losses
        .iter()
        .flatten()
        .any(|&l| !(0.0..=l_bound).contains(&l))
    {
        return Err(MariError::Contract(format!(
            "losses must lie in [0, {l_bound}]"
        )));
    }
    let nf = n as f64;
    let (mut ent, mut min, mut miss) = (0.0, 0.0, 0usize);
    let mut per_adapter = vec![0.0; k];
    for (row, &r) in losses.iter().zip(routed) {
        let m = row.iter().copied().fold(f64::INFINITY, f64::min);
        ent += row[r];
        min += m;
        if row[r] > m {
            miss += 1;
        }
        for (acc, l) in per_adapter.iter_mut().zip(row) {
            *acc += l;
        }
    }
    let single = per_adapter.iter().copied().fold(f64::INFINITY, f64::min);
    let eta = miss as f64 / nf;
    // Sums, not means, so the 0–1 comparison is exact.
    let bound_holds = ent <= min + l_bound * miss as f64;
    let improvement_implication_holds = !(single - min > l_bound * miss as f64) || ent < single;
    Ok(RiskReport {
        r_ent: ent / nf,
        r_min: min / nf,
        r_single: single / nf,
        eta,
        l_bound,
        delta_spec: (single - min) / nf,
        bound_holds,
        improvement_implication_holds,
    })
}

pub fn verify_risk_bound(
    backbone: &Backbone,
    bank: &AdapterBank,
    data: &[Example],
    loss: RiskLoss,
    site: &InjectionSite,
) -> Result<RiskReport> {
    let t = evaluation_table(backbone, bank, data, site)?;
    risk_from_table(&t.losses(loss), &t.routed, loss.bound())
}

/// Minimum over seeded folds of the fraction of items whose routed adapter
/// is among the correct-most adapters.
pub fn agreement_from_table(
    correct: &[Vec<bool>],
    routed: &[usize],
    folds: usize,
    seed: u64,
) -> Result<f64> {
    let n = correct.len();
    if folds < 2 {
        return Err(MariError::Contract("need at least two folds".into()));
    }
    if routed.len() != n || n < folds {
        return Err(MariError::Contract(format!(
            "{n} items cannot fill {folds} non-empty folds"
        )));
    }
    let agree: Vec<bool> = correct
        .iter()
        .zip(routed)
        .map(|(c, &r)| c[r] || !c.iter().any(|&x| x))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut lb = f64::INFINITY;
    let mut start = 0;
    for f in 0..folds {
        let size = n / folds + usize::from(f < n % folds);
        let block = &order[start..start + size];
        start += size;
        let hits = block.iter().filter(|&&i| agree[i]).count();
        lb = lb.min(hits as f64 / size as f64);
    }
    Ok(lb)
}

pub fn agreement_lower_bound(
    backbone: &Backbone,
    bank: &AdapterBank,
    data: &[Example],
    folds: usize,
    seed: u64,
    site: &InjectionSite,
) -> Result<f64> {
    let t = evaluation_table(backbone, bank, data, site)?;
    agreement_from_table(&t.correct(), &t.routed, folds, seed)
}
