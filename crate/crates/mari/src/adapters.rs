//! Low-rank editors: `h ↦ h + γ·s·U(Vᵀh + b)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Checkpoint;
use crate::error::{ensure_dim, MariError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// One rank-`r` editor on a `d`-dimensional residual stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    /// `d × r`
    pub u: Tensor,
    /// `d × r`
    pub v: Tensor,
    /// `r`
    pub b: Tensor,
    pub s: f64,
}

/// Adapter parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub u: Var,
    pub v: Var,
    pub b: Var,
}

impl LowRankAdapter {
    /// `V ~ N(0, 1/d)`, `U = 0`, `b = 0`, `s = 1`.
    pub fn init(d: usize, r: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(d, r, &mut rng)
    }

    fn init_with(d: usize, r: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if r == 0 || r > d {
            return Err(MariError::Invalid(format!(
                "adapter rank {r} must lie in 1..={d}"
            )));
        }
        Ok(LowRankAdapter {
            u: Tensor::zeros(&[d, r]),
            v: Tensor::randn(&[d, r], 1.0 / (d as f64).sqrt(), rng),
            b: Tensor::zeros(&[r]),
            s: 1.0,
        })
    }

    pub fn new(u: Tensor, v: Tensor, b: Tensor, s: f64) -> Result<Self> {
        let a = LowRankAdapter { u, v, b, s };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, r) = (self.u.rows(), self.u.cols());
        if self.u.shape().len() != 2 || r == 0 || self.v.shape() != [d, r] || self.b.shape() != [r]
        {
            return Err(MariError::Invalid(format!(
                "adapter shapes U {:?}, V {:?}, b {:?} are inconsistent",
                self.u.shape(),
                self.v.shape(),
                self.b.shape()
            )));
        }
        if !(self.s >= 0.0) || !self.s.is_finite() {
            return Err(MariError::Invalid(format!(
                "adapter scale s = {} must be finite and ≥ 0",
                self.s
            )));
        }
        if !(self.u.all_finite() && self.v.all_finite() && self.b.all_finite()) {
            return Err(MariError::NonFinite("adapter parameters".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// `Δ(h) = U(Vᵀh + b)`.
    pub fn delta(&self, h: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.dim(), h.len())?;
        Ok(self
            .delta_rows(&Tensor::raw(vec![1, h.len()], h.to_vec()))
            .into_data())
    }

    /// Row-wise `Δ` for an `n × d` block, computed with the same kernels as
    /// [`tape_delta`] so both agree bitwise.
    pub fn delta_rows(&self, h: &Tensor) -> Tensor {
        let c = crate::numerics::kernels::add_row(&h.matmul(&self.v), &self.b);
        c.matmul(&self.u.transpose())
    }

    /// Registers `U`, `V`, `b` as trainable leaves (or constants).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AdapterVars {
            u: reg(&self.u),
            v: reg(&self.v),
            b: reg(&self.b),
        }
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.u, &mut self.v, &mut self.b]
    }
}

/// `Δ` for the rows of `h` on a tape.
pub fn tape_delta(tape: &mut Tape, w: AdapterVars, h: Var) -> Var {
    let c = tape.matmul(h, w.v);
    let c = tape.add_row(c, w.b);
    let ut = tape.transpose(w.u);
    tape.matmul(c, ut)
}

/// `h + scale·Δ(h)` for the rows of `h` on a tape.
pub fn tape_edit(tape: &mut Tape, w: AdapterVars, h: Var, scale: f64) -> Var {
    let d = tape_delta(tape, w, h);
    let d = tape.scale(d, scale);
    tape.add(h, d)
}

/// K editors sharing one site and one global scale γ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterBank {
    pub adapters: Vec<LowRankAdapter>,
    pub gamma: f64,
}

impl AdapterBank {
    pub fn new(adapters: Vec<LowRankAdapter>, gamma: f64) -> Result<Self> {
        let bank = AdapterBank { adapters, gamma };
        bank.validate()?;
        Ok(bank)
    }

    /// `k` fresh adapters drawn from one seeded stream, γ = 1.
    pub fn init(k: usize, d: usize, r: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapters = (0..k)
            .map(|_| LowRankAdapter::init_with(d, r, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        AdapterBank::new(adapters, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .adapters
            .first()
            .ok_or_else(|| MariError::Invalid("adapter bank is empty".into()))?;
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(MariError::Invalid(format!(
                "global scale γ = {} must be finite and ≥ 0",
                self.gamma
            )));
        }
        for a in &self.adapters {
            a.validate()?;
            if a.dim() != first.dim() || a.rank() != first.rank() {
                return Err(MariError::Invalid(
                    "adapters in a bank must share (d, r)".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.adapters[0].dim()
    }

    pub fn rank(&self) -> usize {
        self.adapters[0].rank()
    }

    pub fn adapter(&self, k: usize) -> Result<&LowRankAdapter> {
        self.adapters.get(k).ok_or_else(|| {
            MariError::Contract(format!(
                "adapter index {k} outside 0..{}",
                self.adapters.len()
            ))
        })
    }

    /// Effective multiplier `γ·s_k`.
    pub fn scale(&self, k: usize) -> Result<f64> {
        Ok(self.gamma * self.adapter(k)?.s)
    }

    /// `h + γ·s_k·Δ_k(h)`.
    pub fn apply_edit(&self, k: usize, h: &[f64]) -> Result<Vec<f64>> {
        let a = self.adapter(k)?;
        ensure_dim(a.dim(), h.len())?;
        Ok(self
            .edit_rows(k, &Tensor::raw(vec![1, h.len()], h.to_vec()))?
            .into_data())
    }

    /// [`apply_edit`](Self::apply_edit) on every row of an `n × d` block.
    pub fn edit_rows(&self, k: usize, h: &Tensor) -> Result<Tensor> {
        let a = self.adapter(k)?;
        ensure_dim(a.dim(), h.cols())?;
        Ok(h.add(&a.delta_rows(h).scale(self.gamma * a.s)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (k, a) in self.adapters.iter().enumerate() {
            tensors.push((format!("adapters.{k}.u"), a.u.clone()));
            tensors.push((format!("adapters.{k}.v"), a.v.clone()));
            tensors.push((format!("adapters.{k}.b"), a.b.clone()));
        }
        let s: Vec<f64> = self.adapters.iter().map(|a| a.s).collect();
        Checkpoint {
            kind: "adapter-bank".into(),
            meta: serde_json::json!({ "gamma": self.gamma, "s": s }),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "adapter-bank" {
            return Err(MariError::Invalid(format!(
                "checkpoint kind {} is not an adapter bank",
                ck.kind
            )));
        }
        let gamma = ck.meta["gamma"]
            .as_f64()
            .ok_or_else(|| MariError::Invalid("missing gamma".into()))?;
        let s: Vec<f64> = serde_json::from_value(ck.meta["s"].clone())?;
        if ck.tensors.len() != 3 * s.len() {
            return Err(MariError::Invalid(
                "adapter checkpoint tensor count mismatch".into(),
            ));
        }
        let adapters = ck
            .tensors
            .chunks(3)
            .zip(s)
            .map(|(c, s)| LowRankAdapter::new(c[0].1.clone(), c[1].1.clone(), c[2].1.clone(), s))
            .collect::<Result<Vec<_>>>()?;
        AdapterBank::new(adapters, gamma)
    }
}

/// Rank-`r_probe` editor used only to inject probes for energy measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCalibrator {
    pub adapter: LowRankAdapter,
    pub alpha_probe: f64,
}

impl ProbeCalibrator {
    pub const DEFAULT_RANK: usize = 2;
    pub const DEFAULT_ALPHA: f64 = 0.1;

    /// Unlike bank adapters, `U` starts random as well so the probe injects
    /// from the first step.
    pub fn init(d: usize, r_probe: usize, alpha_probe: f64, seed: u64) -> Result<Self> {
        if !(alpha_probe >= 0.0) {
            return Err(MariError::Invalid(format!(
                "alpha_probe = {alpha_probe} must be ≥ 0"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapter = LowRankAdapter::init_with(d, r_probe, &mut rng)?;
        adapter.u = Tensor::randn(&[d, r_probe], 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(ProbeCalibrator {
            adapter,
            alpha_probe,
        })
    }

    pub fn delta(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.adapter.delta(h)
    }

    /// `h + α·δ_φ(h)`.
    pub fn inject(&self, h: &[f64], alpha: f64) -> Result<Vec<f64>> {
        let d = self.delta(h)?;
        Ok(h.iter().zip(&d).map(|(x, y)| x + alpha * y).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let a = &self.adapter;
        Checkpoint {
            kind: "probe".into(),
            meta: serde_json::json!({ "alpha_probe": self.alpha_probe, "s": a.s }),
            tensors: vec![
                ("probe.u".into(), a.u.clone()),
                ("probe.v".into(), a.v.clone()),
                ("probe.b".into(), a.b.clone()),
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "probe" || ck.tensors.len() != 3 {
            return Err(MariError::Invalid(format!(
                "checkpoint kind {} is not a probe",
                ck.kind
            )));
        }
        let alpha_probe = ck.meta["alpha_probe"]
            .as_f64()
            .ok_or_else(|| MariError::Invalid("missing alpha_probe".into()))?;
        let s = ck.meta["s"].as_f64().unwrap_or(1.0);
        let t = &ck.tensors;
        Ok(ProbeCalibrator {
            adapter: LowRankAdapter::new(t[0].1.clone(), t[1].1.clone(), t[2].1.clone(), s)?,
            alpha_probe,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand() -> AdapterBank {
        let a = LowRankAdapter::new(
            Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(),
            Tensor::matrix(2, 1, vec![0.5, 0.0]).unwrap(),
            Tensor::vector(vec![0.1]),
            1.0,
        )
        .unwrap();
        AdapterBank::new(vec![a], 1.0).unwrap()
    }

    #[test]
    fn hand_delta_and_edit() {
        let bank = hand();
        let d = bank.adapters[0].delta(&[2.0, -1.0]).unwrap();
        assert!((d[0] - 1.1).abs() < 1e-15 && (d[1] - 2.2).abs() < 1e-15);
        let e = bank.apply_edit(0, &[2.0, -1.0]).unwrap();
        assert!((e[0] - 3.1).abs() < 1e-15 && (e[1] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn zero_gamma_and_fresh_adapters_are_identity() {
        let mut bank = hand();
        bank.gamma = 0.0;
        let h = [0.3, -7.25];
        assert_eq!(bank.apply_edit(0, &h).unwrap(), h);
        let fresh = AdapterBank::init(3, 8, 2, 5).unwrap();
        let h: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        for k in 0..3 {
            assert_eq!(fresh.apply_edit(k, &h).unwrap(), h);
        }
    }

    #[test]
    fn v_zero_gives_constant_update() {
        let mut bank = hand();
        bank.adapters[0].v = Tensor::zeros(&[2, 1]);
        assert_eq!(
            bank.adapters[0].delta(&[5.0, 1.0]).unwrap(),
            bank.adapters[0].delta(&[-3.0, 2.0]).unwrap()
        );
    }

    #[test]
    fn errors() {
        assert!(LowRankAdapter::init(4, 5, 0).is_err());
        assert!(LowRankAdapter::init(4, 0, 0).is_err());
        let bank = hand();
        assert!(bank.apply_edit(1, &[0.0, 0.0]).is_err());
        assert!(bank.apply_edit(0, &[0.0]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = LowRankAdapter::init(6, 2, 11).unwrap();
        assert_eq!(a, LowRankAdapter::init(6, 2, 11).unwrap());
        assert_ne!(a.v, LowRankAdapter::init(6, 2, 12).unwrap().v);
    }

    #[test]
    fn tape_edit_matches_plain_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bank = AdapterBank::init(1, 6, 2, 1).unwrap();
        bank.adapters[0].u = Tensor::randn(&[6, 2], 1.0, &mut rng);
        bank.adapters[0].b = Tensor::randn(&[2], 1.0, &mut rng);
        bank.gamma = 0.7;
        let h = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let w = bank.adapters[0].register(&mut tape, true);
        let hv = tape.constant(h.clone());
        let out = tape_edit(&mut tape, w, hv, bank.scale(0).unwrap());
        assert_eq!(tape.value(out), &bank.edit_rows(0, &h).unwrap());
    }
}
