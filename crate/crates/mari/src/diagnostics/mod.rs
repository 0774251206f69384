//! Numerical checks of the routing and energy bounds, plus the
//! representation-space analyses and the inference cost model.

mod cost;
mod jacobian;
mod representation;
mod risk;

pub use cost::{cost_model, CostInputs, CostReport};
pub use jacobian::{
    energy_bound, restricted_jacobian_norm, restricted_jacobians, verify_energy_bound,
    BackboneSite, EnergyBoundReport, LinearToy, SiteMap, BOUND_SLACK, FD_STEP,
};
pub use representation::{
    correction_samples, correction_vector, energy_separability, gated_site_states,
    heterogeneity_profile, histogram, pooled_activation, projection_histogram,
    representation_shift, representation_shift_states, CorrectionSample, HeterogeneityProfile,
    ProjectionHistogram,
};
pub use risk::{
    agreement_from_table, agreement_lower_bound, evaluation_table, risk_from_table,
    verify_risk_bound, EvaluationTable, RiskLoss, RiskReport,
};
