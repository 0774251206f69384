//! Applicability gate: probe-propagation energy, threshold calibration and
//! gated inference with exact base-model fallback.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{tape_delta, AdapterBank, ProbeCalibrator};
use crate::backbone::{Backbone, InjectionSite};
use crate::error::{ensure_dim, MariError, Result};
use crate::harness::{Applicability, Example};
use crate::numerics::linalg::{pca_fit, project_split, Basis, PcaFit};
use crate::numerics::stats::{argmax, median, quantile};
use crate::numerics::tensor::norm;
use crate::numerics::{backward, Adam, Tape, Tensor};
use crate::router::{routed_edit_batch, stacked_option_scores, Answer, EvalCounter, RouteDecision};
use crate::trainer::stacked_losses;

pub const MIN_CALIBRATION_ITEMS: usize = 20;

/// Which quantile of the non-applicable energies becomes `τ_E`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileConvention {
    /// `ρ`-quantile: a fraction `ρ` of non-applicable inputs is shielded.
    #[default]
    Rho,
    /// `(1 − ρ)`-quantile.
    OneMinusRho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub alpha_probe: f64,
    pub alpha_full: f64,
    pub alpha_safe: f64,
    pub rho: f64,
    /// `None` until calibrated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_e: Option<f64>,
    pub lambda_off: f64,
    pub pca_rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<Basis>,
    pub convention: QuantileConvention,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            alpha_probe: ProbeCalibrator::DEFAULT_ALPHA,
            alpha_full: 1.0,
            alpha_safe: 0.0,
            rho: 0.9,
            tau_e: None,
            lambda_off: 1.0,
            pca_rank: 8,
            basis: None,
            convention: QuantileConvention::Rho,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha_probe", self.alpha_probe),
            ("alpha_full", self.alpha_full),
            ("alpha_safe", self.alpha_safe),
        ] {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(MariError::Invalid(format!(
                    "{name} = {a} must be finite and ≥ 0"
                )));
            }
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(MariError::Invalid(format!(
                "rho = {} outside (0, 1]",
                self.rho
            )));
        }
        if !(self.lambda_off >= 0.0) {
            return Err(MariError::Invalid(format!(
                "lambda_off = {} must be ≥ 0",
                self.lambda_off
            )));
        }
        if self.tau_e.is_some_and(f64::is_nan) {
            return Err(MariError::Invalid("tau_E is NaN".into()));
        }
        Ok(())
    }

    pub fn basis(&self) -> Result<&Basis> {
        self.basis
            .as_ref()
            .ok_or_else(|| MariError::MissingArtifact("PCA basis has not been fitted".into()))
    }

    pub fn tau(&self) -> Result<f64> {
        self.tau_e.ok_or(MariError::CalibrationMissing)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `e_{l*}, …, e_L`.
    pub curve: Vec<f64>,
    pub energy: f64,
    pub applicable: bool,
    pub alpha: f64,
}

/// Site states `h^(l*)_{p*}` of each prompt.
pub fn site_states(
    backbone: &Backbone,
    prompts: &[&[usize]],
    site: &InjectionSite,
) -> Result<Tensor> {
    let seqs: Vec<Vec<usize>> = prompts.iter().map(|p| p.to_vec()).collect();
    let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    Ok(backbone.prefix(&seqs, &lens, site)?.site_states())
}

/// PCA basis of the site states of `inputs` (prompts only, labels unused).
pub fn fit_basis(
    backbone: &Backbone,
    inputs: &[Example],
    rank: usize,
    site: &InjectionSite,
) -> Result<PcaFit> {
    let prompts: Vec<&[usize]> = inputs.iter().map(|e| e.prompt.as_slice()).collect();
    pca_fit(&site_states(backbone, &prompts, site)?, rank)
}

/// Propagation curves of many prompts in one packed pass.
pub fn propagation_curves(
    backbone: &Backbone,
    prompts: &[&[usize]],
    probe: &ProbeCalibrator,
    alpha: f64,
    site: &InjectionSite,
) -> Result<Vec<Vec<f64>>> {
    if !(alpha >= 0.0) {
        return Err(MariError::Contract(format!(
            "probe strength {alpha} must be ≥ 0"
        )));
    }
    ensure_dim(backbone.d_model(), probe.adapter.dim())?;
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    let seqs: Vec<Vec<usize>> = prompts.iter().map(|p| p.to_vec()).collect();
    let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let prefix = backbone.prefix(&seqs, &lens, site)?;
    let deltas = probe.adapter.delta_rows(&prefix.site_states());
    let injected = backbone.edited_states(&prefix, &|s, h| {
        h.iter()
            .zip(deltas.row(s))
            .map(|(x, d)| x + alpha * d)
            .collect()
    })?;
    let clean = backbone.resume(&prefix, prefix.states.clone());
    let hot = backbone.resume(&prefix, injected);
    let mut out = Vec::with_capacity(prompts.len());
    for (s, &row) in prefix.site_rows.iter().enumerate() {
        let mut curve = vec![alpha * norm(deltas.row(s))];
        for (c, h) in clean.iter().zip(&hot).skip(1) {
            let diff: Vec<f64> = h
                .row(row)
                .iter()
                .zip(c.row(row))
                .map(|(a, b)| a - b)
                .collect();
            curve.push(norm(&diff));
        }
        out.push(curve);
    }
    Ok(out)
}

/// `e_m = ‖h^(α,m)_{p*} − h^(m)_{p*}‖` for `m = l*..=L`, with the probe
/// injected additively at the site. `e_{l*}` is `α‖δ_φ(h)‖`.
pub fn propagation_curve(
    backbone: &Backbone,
    prompt: &[usize],
    probe: &ProbeCalibrator,
    alpha: f64,
    site: &InjectionSite,
) -> Result<Vec<f64>> {
    Ok(propagation_curves(backbone, &[prompt], probe, alpha, site)?.remove(0))
}

/// Median of the propagation curve.
pub fn energy(
    backbone: &Backbone,
    prompt: &[usize],
    probe: &ProbeCalibrator,
    alpha: f64,
    site: &InjectionSite,
) -> Result<f64> {
    median(&propagation_curve(backbone, prompt, probe, alpha, site)?)
}

/// Energies of many prompts at the probe's own strength.
pub fn energies(
    backbone: &Backbone,
    prompts: &[&[usize]],
    probe: &ProbeCalibrator,
    site: &InjectionSite,
) -> Result<Vec<f64>> {
    propagation_curves(backbone, prompts, probe, probe.alpha_probe, site)?
        .iter()
        .map(|c| median(c))
        .collect()
}

/// `‖Π_B⊥ δ‖²`.
pub fn off_penalty(basis: &Basis, delta: &[f64]) -> Result<f64> {
    let (_, off) = project_split(basis, delta)?;
    Ok(off.iter().map(|x| x * x).sum())
}

/// Mean `‖Π⊥δ‖/‖δ‖` over the site states of `inputs` (zero deltas skipped).
pub fn off_fraction(
    backbone: &Backbone,
    probe: &ProbeCalibrator,
    basis: &Basis,
    inputs: &[Example],
    site: &InjectionSite,
) -> Result<f64> {
    let prompts: Vec<&[usize]> = inputs.iter().map(|e| e.prompt.as_slice()).collect();
    let h = site_states(backbone, &prompts, site)?;
    let deltas = probe.adapter.delta_rows(&h);
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..deltas.rows() {
        let d = deltas.row(i);
        let total = norm(d);
        if total > 0.0 {
            sum += off_penalty(basis, d)?.sqrt() / total;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MariError::Contract(
            "probe update is zero on every input".into(),
        ));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            learning_rate: 1e-2,
            steps: 500,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeLog {
    pub objective: Vec<f64>,
    pub task_loss: Vec<f64>,
    pub off: Vec<f64>,
    pub off_fraction_initial: f64,
    pub off_fraction_final: f64,
}

fn draw(order: &mut Vec<usize>, n: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b);
    while idx.len() < b {
        if order.is_empty() {
            *order = (0..n).collect();
            order.shuffle(rng);
            order.reverse();
        }
        idx.push(order.pop().expect("refilled"));
    }
    idx
}

/// Trains the probe on `E[ℓ_φ] + λ_off·E_{D_pca}[‖Π_B⊥ δ_φ(h)‖²]` with Adam.
pub fn train_probe(
    backbone: &Backbone,
    probe: &ProbeCalibrator,
    d_train: &[Example],
    d_pca: &[Example],
    config: &GateConfig,
    settings: &ProbeSettings,
    site: &InjectionSite,
) -> Result<(ProbeCalibrator, ProbeLog)> {
    config.validate()?;
    let basis = config.basis()?;
    ensure_dim(backbone.d_model(), basis.dim())?;
    ensure_dim(backbone.d_model(), probe.adapter.dim())?;
    if d_train.is_empty() || d_pca.is_empty() {
        return Err(MariError::Contract(
            "probe training needs non-empty D_train and D_pca".into(),
        ));
    }
    let items: Vec<&Example> = d_train.iter().collect();
    let opts: Vec<Vec<usize>> = items
        .iter()
        .map(|e| e.options.iter().map(|o| o[0]).collect())
        .collect();
    if items
        .iter()
        .any(|e| e.options.iter().any(|o| o.len() != 1) || e.options.len() != opts[0].len())
    {
        return Err(MariError::Contract(
            "probe training needs single-token options".into(),
        ));
    }
    let golds: Vec<usize> = items.iter().map(|e| e.gold).collect();
    let seqs: Vec<Vec<usize>> = items.iter().map(|e| e.prompt.clone()).collect();
    let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let full = backbone.prefix(&seqs, &lens, site)?;
    let pca_prompts: Vec<&[usize]> = d_pca.iter().map(|e| e.prompt.as_slice()).collect();
    let h_pca = site_states(backbone, &pca_prompts, site)?;
    let comp = basis.complement_projector();

    let mut probe = probe.clone();
    let mut log = ProbeLog {
        off_fraction_initial: off_fraction(backbone, &probe, basis, d_pca, site)?,
        ..Default::default()
    };
    let mut opt = Adam::new(settings.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let (mut order_t, mut order_p) = (Vec::new(), Vec::new());
    for step in 0..settings.steps {
        let it = draw(&mut order_t, items.len(), settings.batch_size, &mut rng);
        let ip = draw(&mut order_p, d_pca.len(), settings.batch_size, &mut rng);
        let prefix = full.select(&it, 1);
        let b_opts: Vec<Vec<usize>> = it.iter().map(|&i| opts[i].clone()).collect();
        let b_golds: Vec<usize> = it.iter().map(|&i| golds[i]).collect();

        let mut tape = Tape::new();
        let w = probe.adapter.register(&mut tape, true);
        let losses = stacked_losses(
            &mut tape,
            backbone,
            &[w],
            &[probe.adapter.s],
            &prefix,
            &b_opts,
            &b_golds,
        );
        let task = tape.mean(losses);
        let h = tape.constant(h_pca.gather_rows(&ip));
        let delta = tape_delta(&mut tape, w, h);
        let c = tape.constant(comp.clone());
        let off_vec = tape.matmul(delta, c);
        let off_sum = tape.sum_sq(off_vec);
        let off = tape.scale(off_sum, 1.0 / ip.len() as f64);
        let weighted = tape.scale(off, config.lambda_off);
        let total = tape.add(task, weighted);
        let total_v = tape.value(total).item();
        if !total_v.is_finite() {
            return Err(MariError::Divergence { step });
        }
        let grads = backward(&tape, total).map_err(|_| MariError::Divergence { step })?;
        log.objective.push(total_v);
        log.task_loss.push(tape.value(task).item());
        log.off.push(tape.value(off).item());
        let gs: Vec<Tensor> = [w.u, w.v, w.b]
            .iter()
            .map(|v| grads.get(*v).expect("trainable leaf").clone())
            .collect();
        let grefs: Vec<&Tensor> = gs.iter().collect();
        opt.step(&mut probe.adapter.params_mut(), &grefs);
    }
    probe.adapter.validate()?;
    log.off_fraction_final = off_fraction(backbone, &probe, basis, d_pca, site)?;
    Ok((probe, log))
}

/// Nearest-rank threshold from non-applicable energies.
pub fn calibrate_threshold(
    non_applicable: &[f64],
    rho: f64,
    convention: QuantileConvention,
) -> Result<f64> {
    if non_applicable.len() < MIN_CALIBRATION_ITEMS {
        return Err(MariError::Contract(format!(
            "calibration needs at least {MIN_CALIBRATION_ITEMS} non-applicable items, got {}",
            non_applicable.len()
        )));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(MariError::Contract(format!("rho = {rho} outside (0, 1]")));
    }
    let q = match convention {
        QuantileConvention::Rho => rho,
        QuantileConvention::OneMinusRho => 1.0 - rho,
    };
    quantile(non_applicable, q)
}

/// Energies of the non-applicable control items, then [`calibrate_threshold`].
pub fn calibrate(
    backbone: &Backbone,
    probe: &ProbeCalibrator,
    ctrl: &[Example],
    config: &GateConfig,
    site: &InjectionSite,
) -> Result<f64> {
    let prompts: Vec<&[usize]> = ctrl
        .iter()
        .filter(|e| e.label == Applicability::NonApplicable)
        .map(|e| e.prompt.as_slice())
        .collect();
    if ctrl.iter().any(|e| e.label == Applicability::Unlabeled) {
        return Err(MariError::Contract(
            "control items must carry applicability labels".into(),
        ));
    }
    let e = energies(backbone, &prompts, probe, site)?;
    calibrate_threshold(&e, config.rho, config.convention)
}

/// Fraction of energies strictly below `tau`.
pub fn shield_rate(energies: &[f64], tau: f64) -> f64 {
    energies.iter().filter(|&&e| e < tau).count() as f64 / energies.len() as f64
}

/// Decision for a precomputed curve: applicable iff `E ≥ τ_E`.
pub fn gate_curve(curve: Vec<f64>, config: &GateConfig) -> Result<EnergyReport> {
    let tau = config.tau()?;
    let energy = median(&curve)?;
    let applicable = energy >= tau;
    let alpha = if applicable {
        config.alpha_full
    } else {
        config.alpha_safe
    };
    Ok(EnergyReport {
        curve,
        energy,
        applicable,
        alpha,
    })
}

pub fn gate(
    backbone: &Backbone,
    prompt: &[usize],
    probe: &ProbeCalibrator,
    config: &GateConfig,
    site: &InjectionSite,
) -> Result<EnergyReport> {
    config.tau()?;
    gate_curve(
        propagation_curve(backbone, prompt, probe, config.alpha_probe, site)?,
        config,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedOutput {
    pub answer: Answer,
    /// Option scores behind the answer.
    pub scores: Vec<f64>,
    pub report: EnergyReport,
    /// `None` when the router was skipped.
    pub decision: Option<RouteDecision>,
}

/// Gate, then either the untouched base model or routing plus the chosen
/// adapter at strength `α(x)`.
pub fn gated_inference(
    backbone: &Backbone,
    bank: &AdapterBank,
    probe: &ProbeCalibrator,
    config: &GateConfig,
    prompt: &[usize],
    options: &[Vec<usize>],
    site: &InjectionSite,
    counter: Option<&EvalCounter>,
) -> Result<GatedOutput> {
    Ok(gated_inference_batch(
        backbone,
        bank,
        probe,
        config,
        &[(prompt, options)],
        site,
        counter,
    )?
    .remove(0))
}

/// [`gated_inference`] over many items with packed passes; identical results.
pub fn gated_inference_batch(
    backbone: &Backbone,
    bank: &AdapterBank,
    probe: &ProbeCalibrator,
    config: &GateConfig,
    items: &[(&[usize], &[Vec<usize>])],
    site: &InjectionSite,
    counter: Option<&EvalCounter>,
) -> Result<Vec<GatedOutput>> {
    config.validate()?;
    config.tau()?;
    let prompts: Vec<&[usize]> = items.iter().map(|i| i.0).collect();
    let curves = propagation_curves(backbone, &prompts, probe, config.alpha_probe, site)?;
    let reports = curves
        .into_iter()
        .map(|c| gate_curve(c, config))
        .collect::<Result<Vec<_>>>()?;
    let (mut off_idx, mut on_idx) = (Vec::new(), Vec::new());
    for (i, r) in reports.iter().enumerate() {
        if r.alpha == 0.0 {
            off_idx.push(i);
        } else {
            on_idx.push(i);
        }
    }
    let mut out: Vec<Option<GatedOutput>> = vec![None; items.len()];
    let off_items: Vec<(&[usize], &[Vec<usize>])> = off_idx.iter().map(|&i| items[i]).collect();
    if !off_items.is_empty() {
        let base = backbone.option_scores_batch(&off_items, site, &|_, h| h.to_vec())?;
        for (&i, z) in off_idx.iter().zip(base) {
            out[i] = Some(GatedOutput {
                answer: Answer::Option(argmax(&z)),
                scores: z,
                report: reports[i].clone(),
                decision: None,
            });
        }
    }
    let on_items: Vec<(&[usize], &[Vec<usize>])> = on_idx.iter().map(|&i| items[i]).collect();
    if !on_items.is_empty() {
        let routed = routed_edit_batch(backbone, bank, &on_items, site, counter)?;
        for ((&i, r), item) in on_idx.iter().zip(routed).zip(&on_items) {
            let alpha = reports[i].alpha;
            let scores = if alpha == 1.0 {
                r.scores
            } else {
                let mut scaled = bank.clone();
                scaled.gamma *= alpha;
                let k = r.decision.chosen;
                let one = AdapterBank::new(vec![scaled.adapters[k].clone()], scaled.gamma)?;
                if let Some(c) = counter {
                    c.add(1);
                }
                stacked_option_scores(backbone, &one, &[*item], site, None)?
                    .remove(0)
                    .remove(0)
            };
            out[i] = Some(GatedOutput {
                answer: Answer::Option(argmax(&scores)),
                scores,
                report: reports[i].clone(),
                decision: Some(r.decision),
            });
        }
    }
    Ok(out
        .into_iter()
        .map(|o| o.expect("every item handled"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds() {
        let e: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(
            calibrate_threshold(&e, 1.0, QuantileConvention::Rho).unwrap(),
            100.0
        );
        assert_eq!(
            calibrate_threshold(&e, 0.5, QuantileConvention::Rho).unwrap(),
            50.0
        );
        assert_eq!(
            calibrate_threshold(&e, 0.9, QuantileConvention::Rho).unwrap(),
            90.0
        );
        assert_eq!(
            calibrate_threshold(&e, 0.9, QuantileConvention::OneMinusRho).unwrap(),
            10.0
        );
        assert!(calibrate_threshold(&e[..19], 0.9, QuantileConvention::Rho).is_err());
        assert_eq!(shield_rate(&e, 90.0), 0.89);
    }

    #[test]
    fn gate_boundaries() {
        let mut cfg = GateConfig::default();
        assert!(matches!(
            gate_curve(vec![1.0], &cfg),
            Err(MariError::CalibrationMissing)
        ));
        cfg.tau_e = Some(2.0);
        let r = gate_curve(vec![1.0, 2.0, 3.0], &cfg).unwrap();
        assert!(r.applicable && r.energy == 2.0 && r.alpha == 1.0);
        let r = gate_curve(vec![0.0, 0.0], &cfg).unwrap();
        assert!(!r.applicable && r.alpha == 0.0);
        cfg.tau_e = Some(f64::INFINITY);
        assert!(!gate_curve(vec![1e300], &cfg).unwrap().applicable);
    }

    #[test]
    fn off_penalty_pythagoras() {
        let basis = Basis::new(Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(off_penalty(&basis, &[2.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(off_penalty(&basis, &[0.0, 3.0, 4.0]).unwrap(), 25.0);
        assert!(off_penalty(&basis, &[1.0]).is_err());
    }
}
