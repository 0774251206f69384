use serde::{Deserialize, Serialize};

use crate::adapters::ProbeCalibrator;
use crate::backbone::{Backbone, InjectionSite, Prefix};
use crate::error::{ensure_dim, MariError, Result};
use crate::numerics::linalg::{project_split, spectral_norm, sym_eigen, Basis};
use crate::numerics::tensor::norm;
use crate::numerics::Tensor;

/// Central-difference step for site Jacobians.
pub const FD_STEP: f64 = 1e-4;
/// Multiplicative slack on the first-order energy bound.
pub const BOUND_SLACK: f64 = 0.05;

/// A map from the site state to the states at `p*` of the layers from the
/// site onwards (the first entry being the site state itself).
pub trait SiteMap {
    fn dim(&self) -> usize;
    /// Index of the site layer.
    fn site_layer(&self) -> usize;
    fn site_state(&self) -> Vec<f64>;
    /// Layer states at `p*` for each replacement site state.
    fn propagate(&self, hs: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>>;
}

/// One prompt through a frozen backbone.
pub struct BackboneSite<'a> {
    backbone: &'a Backbone,
    prefix: Prefix,
}

impl<'a> BackboneSite<'a> {
    pub fn new(backbone: &'a Backbone, prompt: &[usize], site: &InjectionSite) -> Result<Self> {
        let prefix = backbone.prefix(&[prompt.to_vec()], &[prompt.len()], site)?;
        Ok(BackboneSite { backbone, prefix })
    }
}

impl SiteMap for BackboneSite<'_> {
    fn dim(&self) -> usize {
        self.backbone.d_model()
    }

    fn site_layer(&self) -> usize {
        self.prefix.layer
    }

    fn site_state(&self) -> Vec<f64> {
        self.prefix.site_state(0).to_vec()
    }

    fn propagate(&self, hs: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        if hs.is_empty() {
            return Ok(Vec::new());
        }
        let rep = self.prefix.select(&[0], hs.len());
        for h in hs {
            ensure_dim(self.dim(), h.len())?;
        }
        let states = self.backbone.edited_states(&rep, &|s, _| hs[s].clone())?;
        let layers = self.backbone.resume(&rep, states);
        Ok(rep
            .site_rows
            .iter()
            .map(|&r| layers.iter().map(|t| t.row(r).to_vec()).collect())
            .collect())
    }
}

/// `h ↦ W_L ⋯ W_1 h`, a linear stand-in with closed-form Jacobians.
#[derive(Clone, Debug)]
pub struct LinearToy {
    pub weights: Vec<Tensor>,
    pub h: Vec<f64>,
}

impl LinearToy {
    /// `W_m ⋯ W_1`; identity at `m = 0`.
    pub fn product(&self, m: usize) -> Tensor {
        let mut p = Tensor::identity(self.h.len());
        for w in &self.weights[..m] {
            p = w.matmul(&p);
        }
        p
    }
}

impl SiteMap for LinearToy {
    fn dim(&self) -> usize {
        self.h.len()
    }

    fn site_layer(&self) -> usize {
        0
    }

    fn site_state(&self) -> Vec<f64> {
        self.h.clone()
    }

    fn propagate(&self, hs: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        hs.iter()
            .map(|h| {
                ensure_dim(self.dim(), h.len())?;
                let mut out = vec![h.clone()];
                for w in &self.weights {
                    let next = w.matvec(out.last().expect("non-empty"));
                    out.push(next);
                }
                Ok(out)
            })
            .collect()
    }
}

/// Orthonormal basis of `range(P)` for a symmetric projector.
fn range_basis(projector: &Tensor, d: usize) -> Result<Option<Tensor>> {
    if projector.shape() != [d, d] {
        return Err(MariError::Dimension {
            expected: d,
            got: projector.rows(),
        });
    }
    let (vals, vecs) = sym_eigen(projector)?;
    let keep: Vec<usize> = (0..d).filter(|&i| vals[i] > 0.5).collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let mut q = Tensor::zeros(&[d, keep.len()]);
    for (c, &j) in keep.iter().enumerate() {
        for i in 0..d {
            q.set(i, c, vecs.get(i, j));
        }
    }
    Ok(Some(q))
}

/// `J_m Q` for every layer from the site on, by central differences along
/// the columns of `q`.
pub fn restricted_jacobians(map: &dyn SiteMap, q: &Tensor) -> Result<Vec<Tensor>> {
    let d = map.dim();
    ensure_dim(d, q.rows())?;
    let h = map.site_state();
    let r = q.cols();
    let mut probes = Vec::with_capacity(2 * r);
    for j in 0..r {
        let col = q.column(j);
        probes.push(
            h.iter()
                .zip(&col)
                .map(|(a, b)| a + FD_STEP * b)
                .collect::<Vec<_>>(),
        );
        probes.push(
            h.iter()
                .zip(&col)
                .map(|(a, b)| a - FD_STEP * b)
                .collect::<Vec<_>>(),
        );
    }
    let out = map.propagate(&probes)?;
    let n_layers = out.first().map_or(0, Vec::len);
    let mut jac = vec![Tensor::zeros(&[d, r]); n_layers];
    for j in 0..r {
        for (m, jm) in jac.iter_mut().enumerate() {
            for i in 0..d {
                jm.set(
                    i,
                    j,
                    (out[2 * j][m][i] - out[2 * j + 1][m][i]) / (2.0 * FD_STEP),
                );
            }
        }
    }
    Ok(jac)
}

/// `‖J_m P‖₂` for an absolute layer index `m ≥ l*`.
pub fn restricted_jacobian_norm(map: &dyn SiteMap, m: usize, projector: &Tensor) -> Result<f64> {
    let l0 = map.site_layer();
    if m < l0 {
        return Err(MariError::Contract(format!(
            "layer {m} lies below the site layer {l0}"
        )));
    }
    let Some(q) = range_basis(projector, map.dim())? else {
        return Ok(0.0);
    };
    let jac = restricted_jacobians(map, &q)?;
    let jm = jac
        .get(m - l0)
        .ok_or_else(|| MariError::Contract(format!("layer {m} beyond the last layer")))?;
    spectral_norm(jm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBoundReport {
    /// `‖Π_B δ‖`
    pub s: f64,
    /// `‖Π_B⊥ δ‖`
    pub epsilon: f64,
    /// `‖J_m Π_B‖₂` per layer from the site on.
    pub kappa_layers: Vec<f64>,
    /// `‖J_m Π_B⊥‖₂` per layer.
    pub gamma_layers: Vec<f64>,
    pub kappa: f64,
    pub gamma: f64,
    pub alphas: Vec<f64>,
    /// `e_m(x; α)` per alpha, per layer.
    pub responses: Vec<Vec<f64>>,
    /// `α(κ_m S + Γ_m ε)` per alpha, per layer.
    pub bounds: Vec<Vec<f64>>,
    /// `e_m ≤ bound_m·(1 + slack)` per alpha, per layer.
    pub holds: Vec<Vec<bool>>,
    /// Smallest `bound_m·(1 + slack) − e_m`, relative to the bound.
    pub bound_margin: f64,
    pub max_response_slope: f64,
    /// Largest relative gap in `e_m/α` between the two smallest alphas.
    pub slope_gap: f64,
    pub zero_probe: bool,
}

impl EnergyBoundReport {
    pub fn pairs(&self) -> (usize, usize) {
        let all: Vec<bool> = self.holds.iter().flatten().copied().collect();
        (all.iter().filter(|&&h| h).count(), all.len())
    }

    pub fn all_hold(&self) -> bool {
        self.holds.iter().flatten().all(|&h| h)
    }
}

/// First-order energy bound for the probe update `delta` at `map`'s site.
pub fn energy_bound(
    map: &dyn SiteMap,
    delta: &[f64],
    basis: &Basis,
    alphas: &[f64],
) -> Result<EnergyBoundReport> {
    let d = map.dim();
    ensure_dim(d, delta.len())?;
    ensure_dim(d, basis.dim())?;
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(MariError::Contract(
            "need at least one positive alpha".into(),
        ));
    }
    let (inside, off) = project_split(basis, delta)?;
    let (s, epsilon) = (norm(&inside), norm(&off));
    let on_q = basis.matrix().clone();
    let off_q = if basis.rank() < d {
        Some(basis.complement()?.matrix().clone())
    } else {
        None
    };
    let kappa_layers: Vec<f64> = restricted_jacobians(map, &on_q)?
        .iter()
        .map(spectral_norm)
        .collect::<Result<_>>()?;
    let gamma_layers: Vec<f64> = match &off_q {
        Some(q) => restricted_jacobians(map, q)?
            .iter()
            .map(spectral_norm)
            .collect::<Result<_>>()?,
        None => vec![0.0; kappa_layers.len()],
    };
    let h = map.site_state();
    let mut inputs = vec![h.clone()];
    for a in alphas {
        inputs.push(h.iter().zip(delta).map(|(x, dx)| x + a * dx).collect());
    }
    let runs = map.propagate(&inputs)?;
    let clean = &runs[0];
    let mut responses = Vec::new();
    let mut bounds = Vec::new();
    let mut holds = Vec::new();
    let mut margin = f64::INFINITY;
    for (a, run) in alphas.iter().zip(&runs[1..]) {
        let e: Vec<f64> = run
            .iter()
            .zip(clean)
            .map(|(x, y)| norm(&x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>()))
            .collect();
        let b: Vec<f64> = kappa_layers
            .iter()
            .zip(&gamma_layers)
            .map(|(k, g)| a * (k * s + g * epsilon))
            .collect();
        let ok: Vec<bool> = e
            .iter()
            .zip(&b)
            .map(|(e, b)| *e <= b * (1.0 + BOUND_SLACK))
            .collect();
        for (e, b) in e.iter().zip(&b) {
            if *b > 0.0 {
                margin = margin.min((b * (1.0 + BOUND_SLACK) - e) / b);
            }
        }
        responses.push(e);
        bounds.push(b);
        holds.push(ok);
    }
    let max_response_slope = responses
        .iter()
        .zip(alphas)
        .flat_map(|(e, a)| e.iter().map(move |x| x / a))
        .fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&i, &j| alphas[i].total_cmp(&alphas[j]));
    let slope_gap = if order.len() >= 2 {
        let (i, j) = (order[0], order[1]);
        responses[i]
            .iter()
            .zip(&responses[j])
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| {
                let (si, sj) = (x / alphas[i], y / alphas[j]);
                (si - sj).abs() / si.abs().max(sj.abs())
            })
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(EnergyBoundReport {
        s,
        epsilon,
        kappa: kappa_layers.iter().copied().fold(0.0, f64::max),
        gamma: gamma_layers.iter().copied().fold(0.0, f64::max),
        kappa_layers,
        gamma_layers,
        alphas: alphas.to_vec(),
        responses,
        bounds,
        holds,
        bound_margin: if margin.is_finite() { margin } else { 0.0 },
        max_response_slope,
        slope_gap,
        zero_probe: s == 0.0 && epsilon == 0.0,
    })
}

/// [`energy_bound`] for the trained probe on one prompt.
pub fn verify_energy_bound(
    backbone: &Backbone,
    prompt: &[usize],
    probe: &ProbeCalibrator,
    basis: &Basis,
    alphas: &[f64],
    site: &InjectionSite,
) -> Result<EnergyBoundReport> {
    let map = BackboneSite::new(backbone, prompt, site)?;
    let delta = probe.delta(&map.site_state())?;
    energy_bound(&map, &delta, basis, alphas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> LinearToy {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        LinearToy {
            weights: vec![
                Tensor::randn(&[4, 4], 0.7, &mut rng),
                Tensor::randn(&[4, 4], 0.7, &mut rng),
            ],
            h: vec![0.3, -1.0, 2.0, 0.5],
        }
    }

    #[test]
    fn linear_toy_matches_closed_form() {
        let t = toy();
        let b = Basis::new(Tensor::matrix(4, 2, vec![1., 0., 0., 1., 0., 0., 0., 0.]).unwrap())
            .unwrap();
        let p = b.projector();
        for m in 0..=2 {
            let exact = spectral_norm(&t.product(m).matmul(&p)).unwrap();
            let fd = restricted_jacobian_norm(&t, m, &p).unwrap();
            assert!((exact - fd).abs() < 1e-6, "{m}: {exact} vs {fd}");
        }
        assert_eq!(
            restricted_jacobian_norm(&t, 1, &Tensor::zeros(&[4, 4])).unwrap(),
            0.0
        );
    }

    #[test]
    fn zero_probe_is_flagged() {
        let t = toy();
        let b = Basis::new(Tensor::matrix(4, 1, vec![1., 0., 0., 0.]).unwrap()).unwrap();
        let r = energy_bound(&t, &[0.0; 4], &b, &[1e-3]).unwrap();
        assert!(r.zero_probe && r.responses[0].iter().all(|&e| e == 0.0));
    }
}
