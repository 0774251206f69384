//! Entropy routing: pick the adapter whose prediction is least uncertain.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterBank;
use crate::backbone::forward::{option_sequences, OptionLayout, SeqRole};
use crate::backbone::{Backbone, EditFn, InjectionSite};
use crate::error::{ensure_dim, MariError, Result};
use crate::numerics::kernels::softmax_row;
use crate::numerics::stats::{argmax, argmin, entropy};
use crate::trainer::adapter_edit;

pub const DEFAULT_T_ENT: usize = 8;

/// Counts adapter applications (one per edited site state).
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicUsize);

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub(crate) fn add(&self, n: usize) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub chosen: usize,
    pub uncertainties: Vec<f64>,
}

impl RouteDecision {
    /// Argmin of `u`, lowest index on ties.
    pub fn from_uncertainties(u: Vec<f64>) -> Result<Self> {
        if u.is_empty() {
            return Err(MariError::Contract("routing over zero adapters".into()));
        }
        if let Some(i) = u.iter().position(|x| x.is_nan()) {
            return Err(MariError::NonFinite(format!("uncertainty of adapter {i}")));
        }
        Ok(RouteDecision {
            chosen: argmin(&u),
            uncertainties: u,
        })
    }
}

/// What to route: a multiple-choice item or a free-generation prompt.
#[derive(Clone, Copy, Debug)]
pub enum RouteInput<'a> {
    Choice {
        prompt: &'a [usize],
        options: &'a [Vec<usize>],
    },
    Generate {
        prompt: &'a [usize],
        t_ent: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Answer {
    Option(usize),
    Tokens(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutedOutput {
    pub answer: Answer,
    /// Option scores (choice) or step distributions' entropies (generation) of the chosen adapter.
    pub scores: Vec<f64>,
    pub decision: RouteDecision,
}

/// Entropy of `softmax(z)`.
pub fn option_entropy(z: &[f64]) -> Result<f64> {
    entropy(&softmax_row(z))
}

fn check(backbone: &Backbone, bank: &AdapterBank, site: &InjectionSite) -> Result<()> {
    site.validate(backbone.n_layers())?;
    ensure_dim(backbone.d_model(), bank.dim())
}

/// Option entropy of adapter `k`.
pub fn uncertainty_mc(
    backbone: &Backbone,
    bank: &AdapterBank,
    k: usize,
    prompt: &[usize],
    options: &[Vec<usize>],
    site: &InjectionSite,
) -> Result<f64> {
    check(backbone, bank, site)?;
    bank.adapter(k)?;
    let edit = adapter_edit(bank, k);
    option_entropy(&backbone.option_scores(Some(&edit as EditFn), prompt, options, site)?)
}

/// Mean next-token entropy over the first `t_ent` greedy steps under adapter `k`.
pub fn uncertainty_gen(
    backbone: &Backbone,
    bank: &AdapterBank,
    k: usize,
    prompt: &[usize],
    t_ent: usize,
    site: &InjectionSite,
) -> Result<f64> {
    Ok(generate_with(backbone, bank, k, prompt, t_ent, site)?.1)
}

fn generate_with(
    backbone: &Backbone,
    bank: &AdapterBank,
    k: usize,
    prompt: &[usize],
    t_ent: usize,
    site: &InjectionSite,
) -> Result<(Vec<usize>, f64, Vec<f64>)> {
    check(backbone, bank, site)?;
    bank.adapter(k)?;
    if t_ent == 0 {
        return Err(MariError::Contract("T_ent must be at least 1".into()));
    }
    let edit = adapter_edit(bank, k);
    let (tokens, dists) = backbone.greedy_decode(Some(&edit as EditFn), prompt, t_ent, site)?;
    let ents = dists
        .iter()
        .map(|d| entropy(d))
        .collect::<Result<Vec<_>>>()?;
    let mean = ents.iter().sum::<f64>() / ents.len() as f64;
    Ok((tokens, mean, ents))
}

/// Option scores of every item under every adapter, from one stacked pass.
///
/// `out[i][k]` holds item `i`'s scores under adapter `k`. Bitwise equal to
/// scoring each `(item, adapter)` pair on its own.
pub fn stacked_option_scores(
    backbone: &Backbone,
    bank: &AdapterBank,
    items: &[(&[usize], &[Vec<usize>])],
    site: &InjectionSite,
    counter: Option<&EvalCounter>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    check(backbone, bank, site)?;
    let (n, k) = (items.len(), bank.len());
    if n == 0 {
        return Ok(Vec::new());
    }
    let layout = option_sequences(items)?;
    let prefix = backbone.prefix(&layout.seqs, &layout.prompt_lens, site)?;
    let all: Vec<usize> = (0..layout.seqs.len()).collect();
    let rep = prefix.select(&all, k);
    let per = layout.seqs.len();
    let states = backbone.edited_states(&rep, &|s, h| {
        bank.apply_edit(s / per, h).expect("dimensions checked")
    })?;
    if let Some(c) = counter {
        c.add(rep.len());
    }
    let top = backbone
        .resume(&rep, states)
        .pop()
        .expect("at least the site layer");
    let stacked = OptionLayout {
        seqs: Vec::new(),
        prompt_lens: (0..k)
            .flat_map(|_| layout.prompt_lens.iter().copied())
            .collect(),
        roles: (0..k)
            .flat_map(|j| {
                layout.roles.iter().map(move |r| match r {
                    SeqRole::Single { item, tokens } => SeqRole::Single {
                        item: j * n + item,
                        tokens: tokens.clone(),
                    },
                    SeqRole::Multi {
                        item,
                        option,
                        tokens,
                    } => SeqRole::Multi {
                        item: j * n + item,
                        option: *option,
                        tokens: tokens.clone(),
                    },
                })
            })
            .collect(),
    };
    let flat = backbone.score_from_top(n * k, &rep, &top, &stacked)?;
    let mut out = vec![Vec::with_capacity(k); n];
    for (idx, z) in flat.into_iter().enumerate() {
        out[idx % n].push(z);
    }
    Ok(out)
}

/// Routing decision for one input.
pub fn route(
    backbone: &Backbone,
    bank: &AdapterBank,
    input: &RouteInput,
    site: &InjectionSite,
) -> Result<RouteDecision> {
    Ok(routed_edit_counted(backbone, bank, input, site, None)?.decision)
}

/// Answer produced by the adapter chosen by [`route`].
pub fn routed_edit(
    backbone: &Backbone,
    bank: &AdapterBank,
    input: &RouteInput,
    site: &InjectionSite,
) -> Result<RoutedOutput> {
    routed_edit_counted(backbone, bank, input, site, None)
}

pub fn routed_edit_counted(
    backbone: &Backbone,
    bank: &AdapterBank,
    input: &RouteInput,
    site: &InjectionSite,
    counter: Option<&EvalCounter>,
) -> Result<RoutedOutput> {
    match *input {
        RouteInput::Choice { prompt, options } => {
            let mut scores =
                stacked_option_scores(backbone, bank, &[(prompt, options)], site, counter)?
                    .remove(0);
            let u = scores
                .iter()
                .map(|z| option_entropy(z))
                .collect::<Result<Vec<_>>>()?;
            let decision = RouteDecision::from_uncertainties(u)?;
            let z = scores.swap_remove(decision.chosen);
            Ok(RoutedOutput {
                answer: Answer::Option(argmax(&z)),
                scores: z,
                decision,
            })
        }
        RouteInput::Generate { prompt, t_ent } => {
            let mut runs = Vec::with_capacity(bank.len());
            for k in 0..bank.len() {
                runs.push(generate_with(backbone, bank, k, prompt, t_ent, site)?);
                if let Some(c) = counter {
                    c.add(t_ent);
                }
            }
            let decision = RouteDecision::from_uncertainties(runs.iter().map(|r| r.1).collect())?;
            let (tokens, _, ents) = runs.swap_remove(decision.chosen);
            Ok(RoutedOutput {
                answer: Answer::Tokens(tokens),
                scores: ents,
                decision,
            })
        }
    }
}

/// Routed outputs for many choice items in one stacked pass.
pub fn routed_edit_batch(
    backbone: &Backbone,
    bank: &AdapterBank,
    items: &[(&[usize], &[Vec<usize>])],
    site: &InjectionSite,
    counter: Option<&EvalCounter>,
) -> Result<Vec<RoutedOutput>> {
    let all = stacked_option_scores(backbone, bank, items, site, counter)?;
    all.into_iter()
        .map(|mut scores| {
            let u = scores
                .iter()
                .map(|z| option_entropy(z))
                .collect::<Result<Vec<_>>>()?;
            let decision = RouteDecision::from_uncertainties(u)?;
            let z = scores.swap_remove(decision.chosen);
            Ok(RoutedOutput {
                answer: Answer::Option(argmax(&z)),
                scores: z,
                decision,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_entropy() {
        assert!((option_entropy(&[1.0, -1.0]).unwrap() - 0.365_334).abs() < 1e-6);
        assert!((option_entropy(&[2.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(option_entropy(&[20.0, 0.0, 0.0]).unwrap() < 0.01);
    }

    #[test]
    fn argmin_rule() {
        assert_eq!(
            RouteDecision::from_uncertainties(vec![0.5, 0.2, 0.9])
                .unwrap()
                .chosen,
            1
        );
        assert_eq!(
            RouteDecision::from_uncertainties(vec![0.4, 0.4])
                .unwrap()
                .chosen,
            0
        );
        assert_eq!(
            RouteDecision::from_uncertainties(vec![3.0]).unwrap().chosen,
            0
        );
        assert!(RouteDecision::from_uncertainties(vec![]).is_err());
    }

    #[test]
    fn shift_invariance() {
        let z = [0.3, -1.2, 2.2, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.5).collect();
        assert!((option_entropy(&z).unwrap() - option_entropy(&shifted).unwrap()).abs() < 1e-12);
    }
}
