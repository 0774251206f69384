//! Stage-by-stage runs over a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json
//! data/<split>.jsonl
//! checkpoints/{backbone,adapters_k1,adapters,probe}.{json,bin}
//! artifacts/{basis,caa}.json
//! logs/{pretrain.json,train_k1.jsonl,train.jsonl,probe.json}
//! labels/ctrl.jsonl          (outcome label mode only)
//! metrics/{calibration,eval,diagnostics}.json, metrics/*.csv
//! traces/eval.jsonl
//! report.md
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::caa::{activation_pairs, caa_baseline, select_strength, SteeringVector};
use super::data::{generate_synthetic, Applicability, DatasetSplits, Example, Regime};
use super::evaluate::{evaluate, EvalContext, EvalReport, EvalSplits, Variant, VariantMetrics};
use super::io::{
    load_dataset, read_metrics_json, save_dataset, write_jsonl, write_metrics_csv,
    write_metrics_json,
};
use super::labels::{label_agreement, label_all, Intervention, LabelMode};
use super::manifest::{PipelineConfig, RunManifest};
use crate::adapters::{AdapterBank, ProbeCalibrator};
use crate::backbone::{load_checkpoint, pretrain, save_checkpoint, Backbone, PretrainReport};
use crate::diagnostics::{
    agreement_lower_bound, correction_samples, cost_model, energy_separability, gated_site_states,
    heterogeneity_profile, histogram, projection_histogram, representation_shift_states,
    verify_energy_bound, verify_risk_bound, CostInputs, CostReport, RiskLoss, RiskReport,
};
use crate::error::{MariError, Result};
use crate::gate::{
    calibrate_threshold, energies, fit_basis, shield_rate, site_states, train_probe, GateConfig,
    ProbeLog,
};
use crate::numerics::linalg::PcaFit;
use crate::numerics::stats::{auc, mean, median, std_dev};
use crate::numerics::tensor::{dot, norm};
use crate::trainer::{train_adapters, TrainLog};

const BACKBONE: &str = "backbone";
const SINGLE: &str = "adapters_k1";
const MULTI: &str = "adapters";
const PROBE: &str = "probe";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub label_mode: LabelMode,
    pub n_applicable: usize,
    pub n_non_applicable: usize,
    /// Fraction of non-applicable control items below `τ_E`.
    pub shield_rate: f64,
    /// `None` when no control item is applicable.
    pub energy_auc: Option<f64>,
    /// Agreement of outcome labels with regime labels (outcome mode only).
    pub label_agreement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBoundSummary {
    pub items: usize,
    pub pairs_holding: usize,
    pub pairs: usize,
    pub min_margin: f64,
    pub max_slope_gap: f64,
    pub median_kappa: f64,
    pub median_gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub energy_bound: EnergyBoundSummary,
    pub risk_applicable: RiskReport,
    pub risk_benign: RiskReport,
    pub agreement_applicable: f64,
    pub agreement_benign: f64,
    pub cost_inputs: CostInputs,
    pub cost: CostReport,
    /// Energy AUC on the control split.
    pub energy_auc: f64,
    /// AUC of the first principal coordinate, in its better orientation.
    pub pc1_auc: f64,
    pub correction_samples: usize,
    /// Cosine between the mean RA and mean RB correction vectors.
    pub correction_cosine: f64,
    /// Median dispersion of windows holding one regime, and of mixed windows.
    pub dispersion_pure: Option<f64>,
    pub dispersion_mixed: Option<f64>,
    pub shift_applicable: f64,
    pub shift_benign: f64,
    /// Mean and standard deviation of each adapter's projection on the mean update.
    pub projection_moments: Vec<(f64, f64)>,
}

/// A run directory plus its manifest.
#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

fn ck_path(stem: &str) -> String {
    format!("checkpoints/{stem}.json")
}

impl Run {
    /// Starts a fresh run, replacing any manifest already in `dir`.
    pub fn create(dir: &Path, seed: u64, config: PipelineConfig) -> Result<Self> {
        let run = Run {
            dir: dir.to_path_buf(),
            manifest: RunManifest::new(seed, config)?,
        };
        run.manifest.save(dir)?;
        Ok(run)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Run {
            dir: dir.to_path_buf(),
            manifest: RunManifest::load(dir)?,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.manifest.config
    }

    /// Replaces the configuration; a recalibration is needed afterwards.
    pub fn set_config(&mut self, config: PipelineConfig) -> Result<()> {
        let config = config.with_seed(self.manifest.seed);
        config.validate()?;
        if config != self.manifest.config {
            self.manifest.config = config;
            self.manifest.tau_e = None;
            self.manifest.save(&self.dir)?;
        }
        Ok(())
    }

    fn record(&mut self, name: &str, rel: &str) -> Result<()> {
        self.manifest.record(&self.dir, name, rel)
    }

    fn commit(&mut self, invalidate_tau: bool) -> Result<()> {
        if invalidate_tau {
            self.manifest.tau_e = None;
        }
        self.manifest.save(&self.dir)
    }

    pub fn gen_data(&mut self) -> Result<DatasetSplits> {
        let splits = generate_synthetic(&self.config().task, self.manifest.seed)?;
        for name in DatasetSplits::NAMES {
            let rel = format!("data/{name}.jsonl");
            save_dataset(&self.dir.join(&rel), splits.get(name).expect("known split"))?;
            self.record(&format!("data.{name}"), &rel)?;
        }
        self.commit(true)?;
        Ok(splits)
    }

    pub fn split(&self, name: &str) -> Result<Vec<Example>> {
        load_dataset(&self.manifest.verified(&self.dir, &format!("data.{name}"))?)
    }

    fn save_ck(&mut self, ck: &crate::backbone::Checkpoint, stem: &str) -> Result<()> {
        save_checkpoint(ck, &self.dir.join("checkpoints"), stem)?;
        self.record(stem, &ck_path(stem))?;
        self.record(
            &format!("{stem}.payload"),
            &format!("checkpoints/{stem}.bin"),
        )
    }

    fn load_ck(&self, stem: &str) -> Result<crate::backbone::Checkpoint> {
        self.manifest.verified(&self.dir, stem)?;
        self.manifest
            .verified(&self.dir, &format!("{stem}.payload"))?;
        load_checkpoint(&self.dir.join("checkpoints"), stem)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, rel: &str, value: &T) -> Result<()> {
        let p = self.dir.join(rel);
        fs::create_dir_all(p.parent().expect("relative path has a parent"))?;
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        fs::write(&p, s)?;
        self.record(name, rel)
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_str(&fs::read_to_string(
            self.manifest.verified(&self.dir, name)?,
        )?)?)
    }

    pub fn pretrain(&mut self) -> Result<PretrainReport> {
        let corpus = DatasetSplits {
            pretrain: self.split("pretrain")?,
            test_benign: self.split("test_benign")?,
            ..Default::default()
        }
        .pretrain_corpus();
        let cfg = self.config().clone();
        let (m, report) = pretrain(cfg.backbone, &corpus, &cfg.pretrain)?;
        self.save_ck(&m.to_checkpoint(), BACKBONE)?;
        self.write_json("log.pretrain", "logs/pretrain.json", &report)?;
        self.commit(true)?;
        Ok(report)
    }

    pub fn backbone(&self) -> Result<Backbone> {
        let mut m = Backbone::from_checkpoint(&self.load_ck(BACKBONE)?)?;
        m.freeze();
        Ok(m)
    }

    pub fn single_bank(&self) -> Result<AdapterBank> {
        AdapterBank::from_checkpoint(&self.load_ck(SINGLE)?)
    }

    pub fn bank(&self) -> Result<AdapterBank> {
        AdapterBank::from_checkpoint(&self.load_ck(MULTI)?)
    }

    pub fn probe(&self) -> Result<ProbeCalibrator> {
        ProbeCalibrator::from_checkpoint(&self.load_ck(PROBE)?)
    }

    pub fn pca(&self) -> Result<PcaFit> {
        self.read_json("basis")
    }

    pub fn steering(&self) -> Result<SteeringVector> {
        self.read_json("caa")
    }

    /// Gate settings with the fitted basis and the recorded `τ_E`, if any.
    pub fn gate_config(&self) -> Result<GateConfig> {
        Ok(GateConfig {
            basis: Some(self.pca()?.basis),
            tau_e: self.manifest.tau_e,
            ..self.config().gate.clone()
        })
    }

    /// Trains the single adapter, the K-adapter bank and the steering baseline.
    pub fn train_adapters(&mut self) -> Result<(TrainLog, TrainLog)> {
        let m = self.backbone()?;
        let train = self.split("train")?;
        let cfg = self.config().clone();
        let site = cfg.site();
        let d = m.d_model();
        let (single, log1) = train_adapters(
            &m,
            &AdapterBank::init(1, d, cfg.rank, cfg.train.seed)?,
            &train,
            &cfg.train,
            &site,
        )?;
        let (multi, log) = train_adapters(
            &m,
            &AdapterBank::init(cfg.k_adapters, d, cfg.rank, cfg.train.seed)?,
            &train,
            &cfg.train,
            &site,
        )?;
        self.save_ck(&single.to_checkpoint(), SINGLE)?;
        self.save_ck(&multi.to_checkpoint(), MULTI)?;
        for (name, rel, l) in [
            ("log.train_k1", "logs/train_k1.jsonl", &log1),
            ("log.train", "logs/train.jsonl", &log),
        ] {
            fs::write(self.dir.join(rel), l.to_jsonl())?;
            self.record(name, rel)?;
        }
        let steer = caa_baseline(&m, &activation_pairs(&m, &train, &site)?, 1.0)?;
        let strength = select_strength(&m, &steer, &cfg.caa_strengths, &train, &site)?;
        self.write_json("caa", "artifacts/caa.json", &steer.with_strength(strength))?;
        self.commit(true)?;
        Ok((log1, log))
    }

    pub fn train_probe(&mut self) -> Result<ProbeLog> {
        let m = self.backbone()?;
        let (pca, train) = (self.split("pca")?, self.split("train")?);
        let cfg = self.config().clone();
        let site = cfg.site();
        let fit = fit_basis(&m, &pca, cfg.gate.pca_rank, &site)?;
        let gate = GateConfig {
            basis: Some(fit.basis.clone()),
            ..cfg.gate.clone()
        };
        let init = ProbeCalibrator::init(
            m.d_model(),
            cfg.probe_rank,
            cfg.gate.alpha_probe,
            cfg.probe.seed,
        )?;
        let (probe, log) = train_probe(&m, &init, &train, &pca, &gate, &cfg.probe, &site)?;
        self.write_json("basis", "artifacts/basis.json", &fit)?;
        self.save_ck(&probe.to_checkpoint(), PROBE)?;
        self.write_json("log.probe", "logs/probe.json", &log)?;
        self.commit(true)?;
        Ok(log)
    }

    /// Control labels under the configured label mode.
    pub fn control(&self, m: &Backbone) -> Result<(Vec<Example>, Option<f64>)> {
        let mut ctrl = self.split("ctrl")?;
        let cfg = self.config();
        if cfg.label_mode == LabelMode::Regime {
            return Ok((ctrl, None));
        }
        let bank = self.bank()?;
        let site = cfg.site();
        let iv = Intervention {
            backbone: m,
            bank: &bank,
            site: &site,
        };
        let outcome = label_all(&ctrl, LabelMode::Outcome, Some(&iv))?;
        let regime = label_all(&ctrl, LabelMode::Regime, None)?;
        for (e, l) in ctrl.iter_mut().zip(&outcome) {
            e.label = *l;
        }
        Ok((ctrl, Some(label_agreement(&outcome, &regime)?)))
    }

    /// Calibrates `τ_E` once on the control split and records it.
    pub fn calibrate(&mut self) -> Result<CalibrationReport> {
        let m = self.backbone()?;
        let probe = self.probe()?;
        let cfg = self.config().clone();
        let site = cfg.site();
        let (ctrl, agreement) = self.control(&m)?;
        if agreement.is_some() {
            #[derive(Serialize)]
            struct Label {
                id: u64,
                label: Applicability,
            }
            let labels: Vec<Label> = ctrl
                .iter()
                .map(|e| Label {
                    id: e.id,
                    label: e.label,
                })
                .collect();
            write_jsonl(&self.dir.join("labels/ctrl.jsonl"), &labels)?;
            self.record("labels.ctrl", "labels/ctrl.jsonl")?;
        }
        let prompts: Vec<&[usize]> = ctrl.iter().map(|e| e.prompt.as_slice()).collect();
        let e = energies(&m, &prompts, &probe, &site)?;
        let pick = |want: Applicability| -> Vec<f64> {
            ctrl.iter()
                .zip(&e)
                .filter(|(x, _)| x.label == want)
                .map(|(_, &v)| v)
                .collect()
        };
        let (app, non) = (
            pick(Applicability::Applicable),
            pick(Applicability::NonApplicable),
        );
        let tau = calibrate_threshold(&non, cfg.gate.rho, cfg.gate.convention)?;
        self.manifest.tau_e = Some(tau);
        let report = CalibrationReport {
            label_mode: cfg.label_mode,
            n_applicable: app.len(),
            n_non_applicable: non.len(),
            shield_rate: shield_rate(&non, tau),
            energy_auc: if app.is_empty() {
                None
            } else {
                Some(auc(&app, &non)?)
            },
            label_agreement: agreement,
        };
        let checksum = self.manifest.checksum();
        write_metrics_json(
            &self.dir.join("metrics/calibration.json"),
            &checksum,
            &report,
        )?;
        self.record("metrics.calibration", "metrics/calibration.json")?;
        self.commit(false)?;
        Ok(report)
    }

    /// Every variant on the three test splits with the recorded `τ_E`.
    pub fn eval(&mut self) -> Result<EvalReport> {
        if self.manifest.tau_e.is_none() {
            return Err(MariError::CalibrationMissing);
        }
        let m = self.backbone()?;
        let (single, multi, probe, gate, caa) = (
            self.single_bank()?,
            self.bank()?,
            self.probe()?,
            self.gate_config()?,
            self.steering()?,
        );
        let (app, benign, shifted) = (
            self.split("test_applicable")?,
            self.split("test_benign")?,
            self.split("shifted")?,
        );
        let site = self.config().site();
        let ctx = EvalContext {
            backbone: &m,
            site: &site,
            single: Some(&single),
            multi: Some(&multi),
            probe: Some(&probe),
            gate: Some(&gate),
            caa: Some(&caa),
        };
        let report = evaluate(
            &ctx,
            &Variant::ALL,
            &EvalSplits {
                applicable: &app,
                benign: &benign,
                shifted: &shifted,
            },
        )?;
        let checksum = self.manifest.checksum();
        let rows: Vec<Vec<String>> = report
            .metrics
            .iter()
            .flat_map(|vm| {
                ["applicable", "benign", "shifted"].map(|s| {
                    let sm = vm.split(s).expect("known split");
                    let usage: Vec<String> = sm.usage.iter().map(f64::to_string).collect();
                    vec![
                        vm.variant.to_string(),
                        s.to_string(),
                        sm.n.to_string(),
                        sm.accuracy.to_string(),
                        sm.gate_rate.to_string(),
                        usage.join(";"),
                        sm.adapter_forwards.to_string(),
                    ]
                })
            })
            .collect();
        write_metrics_csv(
            &self.dir.join("metrics/eval.csv"),
            &checksum,
            &[
                "variant",
                "split",
                "n",
                "accuracy",
                "gate_rate",
                "usage",
                "adapter_forwards",
            ],
            &rows,
        )?;
        write_metrics_json(
            &self.dir.join("metrics/eval.json"),
            &checksum,
            &report.metrics,
        )?;
        write_jsonl(&self.dir.join("traces/eval.jsonl"), &report.traces)?;
        self.record("metrics.eval_csv", "metrics/eval.csv")?;
        self.record("metrics.eval", "metrics/eval.json")?;
        self.record("traces.eval", "traces/eval.jsonl")?;
        self.commit(false)?;
        Ok(report)
    }

    pub fn diagnose(&mut self) -> Result<DiagnosticsReport> {
        if self.manifest.tau_e.is_none() {
            return Err(MariError::CalibrationMissing);
        }
        let m = self.backbone()?;
        let (bank, probe, gate, fit) = (
            self.bank()?,
            self.probe()?,
            self.gate_config()?,
            self.pca()?,
        );
        let (ctrl, _) = self.control(&m)?;
        let (app, benign, shifted) = (
            self.split("test_applicable")?,
            self.split("test_benign")?,
            self.split("shifted")?,
        );
        let cfg = self.config().clone();
        let dc = &cfg.diagnostics;
        let site = cfg.site();

        let step = (ctrl.len() / dc.bound_items.max(1)).max(1);
        let mut eb = EnergyBoundSummary {
            items: 0,
            pairs_holding: 0,
            pairs: 0,
            min_margin: f64::INFINITY,
            max_slope_gap: 0.0,
            median_kappa: 0.0,
            median_gamma: 0.0,
        };
        let (mut kappas, mut gammas) = (Vec::new(), Vec::new());
        for e in ctrl.iter().step_by(step).take(dc.bound_items) {
            let r = verify_energy_bound(
                &m,
                &e.prompt,
                &probe,
                gate.basis()?,
                &dc.bound_alphas,
                &site,
            )?;
            let (ok, tot) = r.pairs();
            eb.items += 1;
            eb.pairs_holding += ok;
            eb.pairs += tot;
            eb.min_margin = eb.min_margin.min(r.bound_margin);
            eb.max_slope_gap = eb.max_slope_gap.max(r.slope_gap);
            kappas.push(r.kappa);
            gammas.push(r.gamma);
        }
        if eb.items > 0 {
            eb.median_kappa = median(&kappas)?;
            eb.median_gamma = median(&gammas)?;
        }

        let risk_applicable = verify_risk_bound(&m, &bank, &app, RiskLoss::ZeroOne, &site)?;
        let risk_benign = verify_risk_bound(&m, &bank, &benign, RiskLoss::ZeroOne, &site)?;
        let agreement_applicable = agreement_lower_bound(
            &m,
            &bank,
            &app,
            dc.agreement_folds,
            self.manifest.seed,
            &site,
        )?;
        let agreement_benign = agreement_lower_bound(
            &m,
            &bank,
            &benign,
            dc.agreement_folds,
            self.manifest.seed,
            &site,
        )?;

        let all: Vec<Example> = app.iter().chain(&benign).chain(&shifted).cloned().collect();
        let prompts: Vec<&[usize]> = all.iter().map(|e| e.prompt.as_slice()).collect();
        let passed = energies(&m, &prompts, &probe, &site)?
            .iter()
            .filter(|&&e| e >= gate.tau().unwrap_or(f64::INFINITY))
            .count();
        let first = &all[0];
        let cost_inputs = CostInputs {
            p: first.prompt.len() as f64,
            c: first.options.len() as f64,
            l_opt: first.options[0].len() as f64,
            k: bank.len() as f64,
            t_route: (first.options.len() * first.options[0].len()) as f64,
            m: 1.0,
            q: passed as f64 / all.len() as f64,
            s_i: 1.0,
            l_i: 1.0,
            s_r: first.prompt.len() as f64,
            l_r: m.n_layers() as f64,
            f: 1.0,
            a: 0.0,
        };
        let cost = cost_model(&cost_inputs)?;

        let cprompts: Vec<&[usize]> = ctrl.iter().map(|e| e.prompt.as_slice()).collect();
        let ce = energies(&m, &cprompts, &probe, &site)?;
        let states = site_states(&m, &cprompts, &site)?;
        let pc1: Vec<f64> = (0..states.rows())
            .map(|i| fit.scores(states.row(i))[0])
            .collect();
        let split = |v: &[f64], want: Applicability| -> Vec<f64> {
            ctrl.iter()
                .zip(v)
                .filter(|(e, _)| e.label == want)
                .map(|(_, &x)| x)
                .collect()
        };
        let energy_auc = energy_separability(
            &split(&ce, Applicability::Applicable),
            &split(&ce, Applicability::NonApplicable),
        )?;
        let a1 = auc(
            &split(&pc1, Applicability::Applicable),
            &split(&pc1, Applicability::NonApplicable),
        )?;
        let pc1_auc = a1.max(1.0 - a1);
        let scatter: Vec<Vec<String>> = ctrl
            .iter()
            .zip(ce.iter().zip(&pc1))
            .map(|(e, (en, p))| {
                vec![
                    e.id.to_string(),
                    e.regime.to_string(),
                    format!("{:?}", e.label),
                    en.to_string(),
                    p.to_string(),
                ]
            })
            .collect();

        let cs = correction_samples(&m, &app, &site)?;
        let mean_dir = |r: Regime| {
            let mut a = vec![0.0; m.d_model()];
            for c in cs.iter().filter(|c| c.regime == r) {
                a.iter_mut().zip(&c.delta).for_each(|(x, y)| *x += y);
            }
            a
        };
        let (ra, rb) = (mean_dir(Regime::RA), mean_dir(Regime::RB));
        let correction_cosine = if norm(&ra) > 0.0 && norm(&rb) > 0.0 {
            dot(&ra, &rb) / (norm(&ra) * norm(&rb))
        } else {
            0.0
        };
        let (mut pure, mut mixed, mut hrows) = (Vec::new(), Vec::new(), Vec::new());
        if cs.len() >= dc.window {
            let hp = heterogeneity_profile(&cs, dc.window, dc.stride)?;
            for (i, w) in hp.windows.iter().enumerate() {
                let ra = w.iter().filter(|&&j| cs[j].regime == Regime::RA).count();
                if ra == 0 || ra == w.len() {
                    pure.push(hp.dispersions[i]);
                } else {
                    mixed.push(hp.dispersions[i]);
                }
                hrows.push(vec![
                    hp.centers[i].to_string(),
                    hp.strengths[i].to_string(),
                    hp.dispersions[i].to_string(),
                    (ra as f64 / w.len() as f64).to_string(),
                ]);
            }
        }

        fn items(xs: &[Example]) -> Vec<(&[usize], &[Vec<usize>])> {
            xs.iter()
                .map(|e| (e.prompt.as_slice(), e.options.as_slice()))
                .collect()
        }
        let (b0, e0) = gated_site_states(&m, &bank, &probe, &gate, &items(&app), &site)?;
        let (b1, e1) = gated_site_states(&m, &bank, &probe, &gate, &items(&benign), &site)?;
        let aprompts: Vec<&[usize]> = app.iter().map(|e| e.prompt.as_slice()).collect();
        let ph = projection_histogram(&m, &bank, &aprompts, &site)?;
        let mut prows = Vec::new();
        for (k, s) in ph.samples.iter().enumerate() {
            for (lo, hi, c) in histogram(s, dc.histogram_bins)? {
                prows.push(vec![
                    k.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    c.to_string(),
                ]);
            }
        }
        let report = DiagnosticsReport {
            energy_bound: eb,
            risk_applicable,
            risk_benign,
            agreement_applicable,
            agreement_benign,
            cost_inputs,
            cost,
            energy_auc,
            pc1_auc,
            correction_samples: cs.len(),
            correction_cosine,
            dispersion_pure: if pure.is_empty() {
                None
            } else {
                Some(median(&pure)?)
            },
            dispersion_mixed: if mixed.is_empty() {
                None
            } else {
                Some(median(&mixed)?)
            },
            shift_applicable: representation_shift_states(&b0, &e0)?,
            shift_benign: representation_shift_states(&b1, &e1)?,
            projection_moments: ph.samples.iter().map(|s| (mean(s), std_dev(s))).collect(),
        };
        let checksum = self.manifest.checksum();
        let dir = self.dir.join("metrics");
        write_metrics_json(&dir.join("diagnostics.json"), &checksum, &report)?;
        write_metrics_csv(
            &dir.join("energy_scatter.csv"),
            &checksum,
            &["id", "regime", "label", "energy", "pc1"],
            &scatter,
        )?;
        write_metrics_csv(
            &dir.join("projection_hist.csv"),
            &checksum,
            &["adapter", "lo", "hi", "count"],
            &prows,
        )?;
        write_metrics_csv(
            &dir.join("heterogeneity.csv"),
            &checksum,
            &["center", "strength", "dispersion", "ra_fraction"],
            &hrows,
        )?;
        for (name, rel) in [
            ("metrics.diagnostics", "metrics/diagnostics.json"),
            ("metrics.energy_scatter", "metrics/energy_scatter.csv"),
            ("metrics.projection_hist", "metrics/projection_hist.csv"),
            ("metrics.heterogeneity", "metrics/heterogeneity.csv"),
        ] {
            self.record(name, rel)?;
        }
        self.commit(false)?;
        Ok(report)
    }

    /// Markdown summary of the evaluation (and diagnostics, when present).
    pub fn report(&mut self) -> Result<String> {
        let eval_path = self.dir.join("metrics/eval.json");
        if !eval_path.exists() {
            return Err(MariError::MissingArtifact(format!(
                "{} (run eval first)",
                eval_path.display()
            )));
        }
        self.manifest.verified(&self.dir, "metrics.eval")?;
        let (checksum, metrics): (String, Vec<VariantMetrics>) = read_metrics_json(&eval_path)?;
        let mut out = String::from("# Run report\n\n");
        out += &format!(
            "seed {}, manifest checksum `{checksum}`\n\n",
            self.manifest.seed
        );
        out += "| variant | applicable | benign | shifted | gate rate (app / benign / shifted) | usage (applicable) |\n";
        out += "|---|---|---|---|---|---|\n";
        for vm in &metrics {
            let usage: Vec<String> = vm
                .applicable
                .usage
                .iter()
                .map(|u| format!("{u:.3}"))
                .collect();
            out += &format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} / {:.3} / {:.3} | {} |\n",
                vm.variant,
                vm.applicable.accuracy,
                vm.benign.accuracy,
                vm.shifted.accuracy,
                vm.applicable.gate_rate,
                vm.benign.gate_rate,
                vm.shifted.gate_rate,
                usage.join(", ")
            );
        }
        if let Some(r) = metrics.iter().find_map(|vm| {
            (vm.variant == Variant::MultiGated)
                .then_some(vm.risk.as_ref())
                .flatten()
        }) {
            out += &format!(
                "\nRouting risk on the applicable split: R_ent {:.3}, R_min {:.3}, R_single {:.3}, misrouting rate {:.3}.\n",
                r.r_ent, r.r_min, r.r_single, r.eta
            );
        }
        let dpath = self.dir.join("metrics/diagnostics.json");
        if dpath.exists() {
            let (_, d): (String, DiagnosticsReport) = read_metrics_json(&dpath)?;
            out += "\n## Diagnostics\n\n";
            out += &format!(
                "- energy bound holds on {}/{} (item, layer, strength) triples over {} control items; largest slope gap {:.4}\n",
                d.energy_bound.pairs_holding, d.energy_bound.pairs, d.energy_bound.items, d.energy_bound.max_slope_gap
            );
            out += &format!(
                "- energy AUC on control {:.3}; first principal coordinate AUC {:.3}\n",
                d.energy_auc, d.pc1_auc
            );
            out += &format!(
                "- router agreement lower bound {:.3} (applicable), {:.3} (benign)\n",
                d.agreement_applicable, d.agreement_benign
            );
            out += &format!(
                "- representation shift {:.3} (applicable) vs {:.3} (benign)\n",
                d.shift_applicable, d.shift_benign
            );
            out += &format!(
                "- correction-direction cosine between RA and RB {:.3}\n",
                d.correction_cosine
            );
            out += &format!(
                "- cost ratio against a single adapter {:.4} (gate rate {:.3})\n",
                d.cost.ratio_single, d.cost_inputs.q
            );
        }
        fs::write(self.dir.join("report.md"), &out)?;
        self.record("report", "report.md")?;
        self.commit(false)?;
        Ok(out)
    }

    /// Every stage in order.
    pub fn run_all(&mut self) -> Result<EvalReport> {
        self.gen_data()?;
        self.pretrain()?;
        self.train_adapters()?;
        self.train_probe()?;
        self.calibrate()?;
        let r = self.eval()?;
        self.diagnose()?;
        self.report()?;
        Ok(r)
    }
}
