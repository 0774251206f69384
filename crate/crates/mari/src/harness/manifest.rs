use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::caa::DEFAULT_STRENGTHS;
use super::data::{TaskSpec, TokenLayout};
use super::io::{file_checksum, sha256_hex};
use super::labels::LabelMode;
use crate::backbone::{BackboneConfig, InjectionSite, PretrainSettings};
use crate::error::{MariError, Result};
use crate::gate::{GateConfig, ProbeSettings};
use crate::trainer::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "mari-run-v1";

/// Settings of the diagnose stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    /// Probe strengths for the energy-bound check.
    pub bound_alphas: Vec<f64>,
    /// Control items the energy bound is checked on.
    pub bound_items: usize,
    pub agreement_folds: usize,
    pub window: usize,
    pub stride: usize,
    pub histogram_bins: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            bound_alphas: vec![1e-3, 1e-4],
            bound_items: 20,
            agreement_folds: 5,
            window: 32,
            stride: 8,
            histogram_bins: 20,
        }
    }
}

/// Every knob of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub task: TaskSpec,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainSettings,
    pub train: TrainConfig,
    pub k_adapters: usize,
    pub rank: usize,
    pub probe_rank: usize,
    pub probe: ProbeSettings,
    /// Gate settings; basis and `τ_E` are never stored here.
    pub gate: GateConfig,
    pub site_layer: usize,
    pub label_mode: LabelMode,
    pub caa_strengths: Vec<f64>,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            task: TaskSpec::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainSettings::default(),
            train: TrainConfig::default(),
            k_adapters: 2,
            rank: 4,
            probe_rank: 2,
            probe: ProbeSettings::default(),
            gate: GateConfig::default(),
            site_layer: 2,
            label_mode: LabelMode::Regime,
            caa_strengths: DEFAULT_STRENGTHS.to_vec(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Points every stage seed at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.backbone.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
        self
    }

    pub fn site(&self) -> InjectionSite {
        InjectionSite::last_token(self.site_layer)
    }

    pub fn validate(&self) -> Result<()> {
        TokenLayout::new(&self.task)?;
        self.backbone.validate()?;
        self.train.validate()?;
        self.gate.validate()?;
        self.site().validate(self.backbone.n_layers)?;
        if self.backbone.vocab_size != self.task.vocab_size {
            return Err(MariError::Invalid(format!(
                "backbone vocabulary {} differs from task vocabulary {}",
                self.backbone.vocab_size, self.task.vocab_size
            )));
        }
        if self.k_adapters == 0 || self.rank == 0 || self.probe_rank == 0 || self.gate.pca_rank == 0
        {
            return Err(MariError::Invalid(
                "adapter count, ranks and PCA rank must be at least 1".into(),
            ));
        }
        if self.gate.tau_e.is_some() || self.gate.basis.is_some() {
            return Err(MariError::Invalid(
                "τ_E and the PCA basis are run artifacts, not configuration".into(),
            ));
        }
        if self.caa_strengths.is_empty() {
            return Err(MariError::Invalid(
                "need at least one steering strength".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// Seed, configuration, calibrated threshold and artifact checksums of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub seed: u64,
    pub config: PipelineConfig,
    /// The one calibrated gate threshold of the run.
    pub tau_e: Option<f64>,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl RunManifest {
    pub fn new(seed: u64, config: PipelineConfig) -> Result<Self> {
        let config = config.with_seed(seed);
        config.validate()?;
        Ok(RunManifest {
            format: FORMAT.into(),
            seed,
            config,
            tau_e: None,
            artifacts: BTreeMap::new(),
        })
    }

    /// Digest of everything that determines the metrics: seed, configuration and `τ_E`.
    pub fn checksum(&self) -> String {
        let v =
            serde_json::json!({ "seed": self.seed, "config": self.config, "tau_e": self.tau_e });
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Err(MariError::MissingArtifact(format!(
                "{} (run gen-data first)",
                p.display()
            )));
        }
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(&p)?)?;
        if m.format != FORMAT {
            return Err(MariError::Invalid(format!(
                "unknown run manifest format {}",
                m.format
            )));
        }
        Ok(m)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        fs::create_dir_all(run_dir)?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(run_dir.join(MANIFEST_FILE), s)?;
        Ok(())
    }

    /// Stores the current checksum of `rel` under `name`.
    pub fn record(&mut self, run_dir: &Path, name: &str, rel: &str) -> Result<()> {
        let sha256 = file_checksum(&run_dir.join(rel))?;
        self.artifacts.insert(
            name.into(),
            ArtifactRecord {
                path: rel.into(),
                sha256,
            },
        );
        Ok(())
    }

    /// Path of a recorded artifact whose bytes still match the manifest.
    pub fn verified(&self, run_dir: &Path, name: &str) -> Result<std::path::PathBuf> {
        let rec = self.artifacts.get(name).ok_or_else(|| {
            MariError::MissingArtifact(format!("{name} is not recorded in the run manifest"))
        })?;
        let p = run_dir.join(&rec.path);
        let found = file_checksum(&p)?;
        if found != rec.sha256 {
            return Err(MariError::Checksum {
                expected: rec.sha256.clone(),
                found,
            });
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_tau() {
        let mut m = RunManifest::new(3, PipelineConfig::default()).unwrap();
        assert_eq!(m.config.train.seed, 3);
        let a = m.checksum();
        m.tau_e = Some(0.5);
        assert_ne!(a, m.checksum());
    }

    #[test]
    fn config_rejects_artifacts() {
        let mut c = PipelineConfig::default();
        c.gate.tau_e = Some(1.0);
        assert!(RunManifest::new(0, c).is_err());
    }

    #[test]
    fn tau_appears_once() {
        let mut m = RunManifest::new(0, PipelineConfig::default()).unwrap();
        m.tau_e = Some(0.25);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s.matches("tau_e").count(), 1);
    }
}
