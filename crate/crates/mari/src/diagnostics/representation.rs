use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, ProbeCalibrator};
use crate::backbone::{Backbone, InjectionSite};
use crate::error::{ensure_dim, MariError, Result};
use crate::gate::{gated_inference_batch, site_states, GateConfig};
use crate::harness::{Example, Regime};
use crate::numerics::linalg::pca_fit;
use crate::numerics::stats::{argmax, auc, median};
use crate::numerics::tensor::{dot, norm};
use crate::numerics::Tensor;

/// Mean layer-`l*` state over the option's positions after the prompt.
pub fn pooled_activation(
    backbone: &Backbone,
    prompt: &[usize],
    option: &[usize],
    site: &InjectionSite,
) -> Result<Vec<f64>> {
    if option.is_empty() {
        return Err(MariError::Contract("option span is empty".into()));
    }
    site.validate(backbone.n_layers())?;
    let tokens: Vec<usize> = prompt.iter().chain(option).copied().collect();
    let trace = backbone.forward_with_trace(&tokens)?;
    let mut acc = vec![0.0; backbone.d_model()];
    for p in prompt.len()..tokens.len() {
        for (a, x) in acc.iter_mut().zip(trace.state(site.layer, p)) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= option.len() as f64);
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSample {
    pub id: u64,
    pub regime: Regime,
    /// Base model's choice.
    pub predicted: usize,
    /// `a(x, ŷ)`
    pub a_pred: Vec<f64>,
    /// `Δ(x) = a(x, y*) − a(x, ŷ)`
    pub delta: Vec<f64>,
}

/// `a(x, y*) − a(x, ŷ)`, or `None` when the base model is already right.
pub fn correction_vector(
    backbone: &Backbone,
    example: &Example,
    site: &InjectionSite,
) -> Result<Option<CorrectionSample>> {
    let z = backbone.option_scores(None, &example.prompt, &example.options, site)?;
    let predicted = argmax(&z);
    if predicted == example.gold {
        return Ok(None);
    }
    let a_gold = pooled_activation(
        backbone,
        &example.prompt,
        &example.options[example.gold],
        site,
    )?;
    let a_pred = pooled_activation(backbone, &example.prompt, &example.options[predicted], site)?;
    let delta = a_gold.iter().zip(&a_pred).map(|(g, p)| g - p).collect();
    Ok(Some(CorrectionSample {
        id: example.id,
        regime: example.regime,
        predicted,
        a_pred,
        delta,
    }))
}

/// Correction samples for every item the base model gets wrong.
pub fn correction_samples(
    backbone: &Backbone,
    data: &[Example],
    site: &InjectionSite,
) -> Result<Vec<CorrectionSample>> {
    let mut out = Vec::new();
    for e in data {
        if let Some(s) = correction_vector(backbone, e, site)? {
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityProfile {
    /// Mean `t(x)` of each window.
    pub centers: Vec<f64>,
    /// Median `‖Δ(x)‖` per window.
    pub strengths: Vec<f64>,
    /// Median `1 − cos(Δ(x), window mean)` per window.
    pub dispersions: Vec<f64>,
    /// Sample indices of each window, in `t` order.
    pub windows: Vec<Vec<usize>>,
    /// `t(x)` of every sample.
    pub t: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Sliding-window strength and direction spread of the corrections along the
/// first principal axis of `a(x, ŷ)`.
pub fn heterogeneity_profile(
    samples: &[CorrectionSample],
    window: usize,
    stride: usize,
) -> Result<HeterogeneityProfile> {
    if window == 0 || stride == 0 {
        return Err(MariError::Contract(
            "window and stride must be positive".into(),
        ));
    }
    if samples.len() < window {
        return Err(MariError::Contract(format!(
            "{} samples do not fill a window of {window}",
            samples.len()
        )));
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.a_pred.clone()).collect();
    let fit = pca_fit(&Tensor::from_rows(&rows)?, 1)?;
    let t: Vec<f64> = rows.iter().map(|r| fit.scores(r)[0]).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&i, &j| t[i].total_cmp(&t[j]).then(i.cmp(&j)));
    let mut starts: Vec<usize> = (0..=samples.len() - window).step_by(stride).collect();
    if *starts.last().expect("one window") != samples.len() - window {
        starts.push(samples.len() - window);
    }
    let d = samples[0].delta.len();
    let mut prof = HeterogeneityProfile {
        centers: vec![],
        strengths: vec![],
        dispersions: vec![],
        windows: vec![],
        t: t.clone(),
    };
    for s in starts {
        let idx = order[s..s + window].to_vec();
        let mut mean = vec![0.0; d];
        for &i in &idx {
            ensure_dim(d, samples[i].delta.len())?;
            for (m, x) in mean.iter_mut().zip(&samples[i].delta) {
                *m += x / window as f64;
            }
        }
        let norms: Vec<f64> = idx.iter().map(|&i| norm(&samples[i].delta)).collect();
        let dev: Vec<f64> = idx
            .iter()
            .map(|&i| 1.0 - cosine(&samples[i].delta, &mean))
            .collect();
        prof.centers
            .push(idx.iter().map(|&i| t[i]).sum::<f64>() / window as f64);
        prof.strengths.push(median(&norms)?);
        prof.dispersions.push(median(&dev)?);
        prof.windows.push(idx);
    }
    Ok(prof)
}

/// `‖Δμ‖/σ` between two aligned `n × d` state blocks, with `σ` the root-mean
/// per-dimension standard deviation of `base`.
pub fn representation_shift_states(base: &Tensor, edited: &Tensor) -> Result<f64> {
    if base.shape() != edited.shape() || base.rows() == 0 {
        return Err(MariError::Contract(
            "state blocks must be non-empty and the same shape".into(),
        ));
    }
    let (n, d) = (base.rows() as f64, base.cols());
    let mut var_sum = 0.0;
    let mut shift = vec![0.0; d];
    for j in 0..d {
        let col = base.column(j);
        let mu = col.iter().sum::<f64>() / n;
        var_sum += col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        shift[j] = edited.column(j).iter().sum::<f64>() / n - mu;
    }
    let sigma = (var_sum / d as f64).sqrt();
    if sigma == 0.0 {
        return Err(MariError::Contract("base states have zero spread".into()));
    }
    Ok(norm(&shift) / sigma)
}

/// Shift of the site states under `edit(i, h)` over `prompts`.
pub fn representation_shift(
    backbone: &Backbone,
    prompts: &[&[usize]],
    edit: &dyn Fn(usize, &[f64]) -> Vec<f64>,
    site: &InjectionSite,
) -> Result<f64> {
    let base = site_states(backbone, prompts, site)?;
    let mut edited = base.clone();
    for i in 0..base.rows() {
        let e = edit(i, base.row(i));
        ensure_dim(base.cols(), e.len())?;
        edited.row_mut(i).copy_from_slice(&e);
    }
    representation_shift_states(&base, &edited)
}

/// Site states before and after the gated pipeline's edit.
pub fn gated_site_states(
    backbone: &Backbone,
    bank: &AdapterBank,
    probe: &ProbeCalibrator,
    config: &GateConfig,
    items: &[(&[usize], &[Vec<usize>])],
    site: &InjectionSite,
) -> Result<(Tensor, Tensor)> {
    let outs = gated_inference_batch(backbone, bank, probe, config, items, site, None)?;
    let prompts: Vec<&[usize]> = items.iter().map(|i| i.0).collect();
    let base = site_states(backbone, &prompts, site)?;
    let mut edited = base.clone();
    for (i, o) in outs.iter().enumerate() {
        if let Some(dec) = &o.decision {
            let a = bank.adapter(dec.chosen)?;
            let d = a.delta(base.row(i))?;
            let c = o.report.alpha * bank.gamma * a.s;
            for (x, dx) in edited.row_mut(i).iter_mut().zip(d) {
                *x += c * dx;
            }
        }
    }
    Ok((base, edited))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHistogram {
    pub v_global: Vec<f64>,
    /// `samples[k][i] = ⟨δ_k(x_i), v_global⟩`
    pub samples: Vec<Vec<f64>>,
}

/// Projections of each adapter's applied update onto the normalized mean
/// update over all adapters and inputs.
pub fn projection_histogram(
    backbone: &Backbone,
    bank: &AdapterBank,
    prompts: &[&[usize]],
    site: &InjectionSite,
) -> Result<ProjectionHistogram> {
    if prompts.is_empty() {
        return Err(MariError::Contract("empty input set".into()));
    }
    let h = site_states(backbone, prompts, site)?;
    let updates: Vec<Tensor> = (0..bank.len())
        .map(|k| Ok(bank.edit_rows(k, &h)?.sub(&h)))
        .collect::<Result<_>>()?;
    let d = h.cols();
    let mut mean = vec![0.0; d];
    let total = (bank.len() * h.rows()) as f64;
    for u in &updates {
        for i in 0..u.rows() {
            for (m, x) in mean.iter_mut().zip(u.row(i)) {
                *m += x / total;
            }
        }
    }
    let nm = norm(&mean);
    if nm == 0.0 {
        return Err(MariError::Contract("mean update is zero".into()));
    }
    let v: Vec<f64> = mean.iter().map(|x| x / nm).collect();
    let samples = updates
        .iter()
        .map(|u| (0..u.rows()).map(|i| dot(u.row(i), &v)).collect())
        .collect();
    Ok(ProjectionHistogram {
        v_global: v,
        samples,
    })
}

/// Equal-width bins `(lo, hi, count)` spanning the samples.
pub fn histogram(samples: &[f64], bins: usize) -> Result<Vec<(f64, f64, usize)>> {
    if samples.is_empty() || bins == 0 {
        return Err(MariError::Contract(
            "histogram needs samples and at least one bin".into(),
        ));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect())
}

/// AUC of applicable against non-applicable energies.
pub fn energy_separability(applicable: &[f64], non_applicable: &[f64]) -> Result<f64> {
    auc(applicable, non_applicable)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(a: Vec<f64>, delta: Vec<f64>) -> CorrectionSample {
        CorrectionSample {
            id: 0,
            regime: Regime::RA,
            predicted: 0,
            a_pred: a,
            delta,
        }
    }

    #[test]
    fn identical_corrections_have_no_spread() {
        let s: Vec<_> = (0..10)
            .map(|i| sample(vec![i as f64, 0.5 * i as f64], vec![1.0, 2.0]))
            .collect();
        let p = heterogeneity_profile(&s, 4, 2).unwrap();
        assert!(p.dispersions.iter().all(|&d| d.abs() < 1e-12));
        assert!(p.strengths.iter().all(|&x| (x - 5f64.sqrt()).abs() < 1e-12));
        assert_eq!(p.windows.last().unwrap().len(), 4);
    }

    #[test]
    fn antipodal_corrections_spread_to_one() {
        let s: Vec<_> = (0..8)
            .map(|i| {
                sample(
                    vec![i as f64, 1.0],
                    if i % 2 == 0 {
                        vec![1.0, 0.0]
                    } else {
                        vec![-1.0, 0.0]
                    },
                )
            })
            .collect();
        let p = heterogeneity_profile(&s, 8, 8).unwrap();
        assert!((p.dispersions[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_shift() {
        let base = Tensor::matrix(3, 2, vec![0., 1., 2., 3., 4., 8.]).unwrap();
        let c = [0.5, -1.0];
        let mut e = base.clone();
        for i in 0..3 {
            for j in 0..2 {
                e.set(i, j, base.get(i, j) + c[j]);
            }
        }
        let var0 = 8.0 / 3.0;
        let var1 = ((1.0f64 - 4.0).powi(2) + (3.0f64 - 4.0).powi(2) + 16.0) / 3.0;
        let sigma = ((var0 + var1) / 2.0f64).sqrt();
        assert!((representation_shift_states(&base, &e).unwrap() - norm(&c) / sigma).abs() < 1e-12);
        assert_eq!(representation_shift_states(&base, &base).unwrap(), 0.0);
        assert!(
            representation_shift_states(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2])).is_err()
        );
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 0.1, 0.9, 1.0], 2).unwrap();
        assert_eq!(h.iter().map(|b| b.2).collect::<Vec<_>>(), vec![2, 2]);
    }
}
