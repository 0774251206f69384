use serde::{Deserialize, Serialize};

use crate::error::{MariError, Result};

/// Token and cost counts of the inference cost decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Prompt length `P`.
    pub p: f64,
    /// Candidate count `C`.
    pub c: f64,
    /// Mean candidate length `L`.
    pub l_opt: f64,
    pub k: f64,
    pub t_route: f64,
    /// Extra prompt-only probe forwards.
    pub m: f64,
    /// Fraction of inputs the gate lets through.
    pub q: f64,
    pub s_i: f64,
    pub l_i: f64,
    pub s_r: f64,
    pub l_r: f64,
    /// Per-token forward cost.
    pub f: f64,
    /// Per-token-layer injection cost.
    pub a: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub cost_single: f64,
    pub cost_route: f64,
    pub cost_ours: f64,
    pub cost_reft: f64,
    /// `1 + mP/(P+CL) + q(K−1)(P+T)/(P+CL)`.
    pub ratio_single: f64,
    /// The same approximation, stated against ReFT.
    pub ratio_reft: f64,
    /// `cost_ours / cost_single` without dropping `A`.
    pub exact_ratio_single: f64,
    pub exact_ratio_reft: f64,
}

pub fn cost_model(x: &CostInputs) -> Result<CostReport> {
    let fields = [
        x.p, x.c, x.l_opt, x.k, x.t_route, x.m, x.q, x.s_i, x.l_i, x.s_r, x.l_r, x.f, x.a,
    ];
    if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(MariError::Contract(
            "cost inputs must be finite and ≥ 0".into(),
        ));
    }
    if x.f <= 0.0 {
        return Err(MariError::Contract(
            "per-token forward cost F must be > 0".into(),
        ));
    }
    if x.k < 1.0 {
        return Err(MariError::Contract("K must be at least 1".into()));
    }
    let tokens = x.p + x.c * x.l_opt;
    if tokens == 0.0 {
        return Err(MariError::Contract("P + CL is zero".into()));
    }
    let route_tokens = (x.k - 1.0) * (x.p + x.t_route);
    let cost_single = x.f * tokens + x.a * x.s_i * x.l_i;
    let cost_route = x.f * route_tokens;
    let cost_ours =
        x.f * tokens + x.m * x.f * x.p + x.q * x.f * route_tokens + x.q * x.a * x.s_i * x.l_i;
    let cost_reft = x.f * tokens + x.a * x.s_r * x.l_r;
    let ratio = (tokens + x.m * x.p + x.q * route_tokens) / tokens;
    Ok(CostReport {
        cost_single,
        cost_route,
        cost_ours,
        cost_reft,
        ratio_single: ratio,
        ratio_reft: ratio,
        exact_ratio_single: cost_ours / cost_single,
        exact_ratio_reft: cost_ours / cost_reft,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> CostInputs {
        CostInputs {
            p: 32.0,
            c: 4.0,
            l_opt: 1.0,
            k: 3.0,
            t_route: 4.0,
            m: 1.0,
            q: 0.5,
            s_i: 1.0,
            l_i: 1.0,
            s_r: 4.0,
            l_r: 2.0,
            f: 1.0,
            a: 0.0,
        }
    }

    #[test]
    fn worked_example() {
        let r = cost_model(&base()).unwrap();
        assert_eq!(r.ratio_single, 104.0 / 36.0);
        assert_eq!(r.exact_ratio_single, r.ratio_single);
        assert_eq!(r.exact_ratio_reft, r.ratio_reft);
    }

    #[test]
    fn no_routing_no_probe() {
        let r = cost_model(&CostInputs {
            q: 0.0,
            m: 0.0,
            k: 1.0,
            ..base()
        })
        .unwrap();
        assert_eq!(r.ratio_single, 1.0);
        assert_eq!(r.cost_route, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(cost_model(&CostInputs { f: 0.0, ..base() }).is_err());
        assert!(cost_model(&CostInputs {
            p: 0.0,
            c: 0.0,
            ..base()
        })
        .is_err());
        assert!(cost_model(&CostInputs { q: -1.0, ..base() }).is_err());
    }
}
