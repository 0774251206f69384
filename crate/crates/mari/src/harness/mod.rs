//! Synthetic benchmark, applicability labels, the steering baseline,
//! evaluation, run artifacts and the stage-by-stage pipeline.

mod caa;
mod data;
mod evaluate;
pub mod io;
mod labels;
mod manifest;
mod pipeline;

pub use caa::{
    activation_pairs, caa_baseline, select_strength, ActivationPair, SteeringVector,
    DEFAULT_STRENGTHS, MIN_PAIRS,
};
pub use data::{
    generate_synthetic, Applicability, DatasetSplits, Example, Regime, TaskSpec, TokenLayout,
};
pub use evaluate::{
    evaluate, EvalContext, EvalReport, EvalSplits, SplitMetrics, TraceRecord, Variant,
    VariantMetrics,
};
pub use labels::{label_agreement, label_all, label_applicability, Intervention, LabelMode};
pub use manifest::{ArtifactRecord, DiagnosticsConfig, PipelineConfig, RunManifest, MANIFEST_FILE};
pub use pipeline::{CalibrationReport, DiagnosticsReport, EnergyBoundSummary, Run};
