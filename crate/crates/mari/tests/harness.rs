use std::collections::HashSet;

use mari::adapters::AdapterBank;
use mari::backbone::{Backbone, BackboneConfig, InjectionSite};
use mari::harness::io::{load_dataset, save_dataset};
use mari::harness::{
    generate_synthetic, label_all, Applicability, DatasetSplits, LabelMode, PipelineConfig, Regime,
    Run, RunManifest, TaskSpec,
};
use mari::numerics::{backward, Tape, Tensor};
use mari::trainer::{per_adapter_loss_mc, tape_choice_loss};
use mari::MariError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gold option token recomputed from the default token layout by hand.
fn rule_token(regime: Regime, prompt: &[usize]) -> usize {
    let (key, group) = match regime {
        Regime::RA => (prompt[1], 0),
        Regime::RB => (prompt[1], 4),
        Regime::RC => (prompt[3], 8),
    };
    let start = match key {
        16..=31 => 16,
        32..=39 => 32,
        40..=47 => 40,
        _ => panic!("key {key} outside every key range"),
    };
    let class = (key - start) % 4;
    let target = match regime {
        Regime::RA => (class + 1) % 4,
        Regime::RB => (class + 3) % 4,
        Regime::RC => class,
    };
    group + target
}

#[test]
fn gold_labels_follow_the_rules() {
    let s = generate_synthetic(&TaskSpec::default(), 7).unwrap();
    for name in [
        "pca",
        "train",
        "ctrl",
        "test_applicable",
        "test_benign",
        "shifted",
    ] {
        for e in s.get(name).unwrap() {
            assert_eq!(
                e.options[e.gold],
                vec![rule_token(e.regime, &e.prompt)],
                "{name} {}",
                e.id
            );
        }
    }
    let noisy = s.pretrain.iter().filter(|e| e.regime != Regime::RC).count();
    let kept = s
        .pretrain
        .iter()
        .filter(|e| e.regime != Regime::RC)
        .filter(|e| {
            let key = e.prompt[1];
            e.gold == (key - 16) % 4
        })
        .count();
    let fidelity = kept as f64 / noisy as f64;
    assert!((fidelity - 0.8).abs() < 0.05, "{fidelity}");
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = TaskSpec::default();
    let (a, b) = (
        generate_synthetic(&spec, 3).unwrap(),
        generate_synthetic(&spec, 3).unwrap(),
    );
    save_dataset(&dir.path().join("a.jsonl"), &a.train).unwrap();
    save_dataset(&dir.path().join("b.jsonl"), &b.train).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a.jsonl")).unwrap(),
        std::fs::read(dir.path().join("b.jsonl")).unwrap()
    );
    assert_ne!(generate_synthetic(&spec, 4).unwrap().train, a.train);
    assert_eq!(load_dataset(&dir.path().join("a.jsonl")).unwrap(), a.train);
}

#[test]
fn splits_are_disjoint_and_sized() {
    let spec = TaskSpec::default();
    let s = generate_synthetic(&spec, 0).unwrap();
    let mut ids = HashSet::new();
    let mut prompts = HashSet::new();
    for name in DatasetSplits::NAMES {
        for e in s.get(name).unwrap() {
            assert!(ids.insert(e.id), "id {} repeats", e.id);
            assert!(prompts.insert(e.prompt.clone()));
        }
    }
    assert_eq!(s.pretrain.len(), 4 * spec.pretrain_per_regime);
    assert_eq!(s.pca.len() + s.train.len(), spec.pool);
    assert_eq!(s.pca.len(), s.train.len());
    let count = |r: Regime| s.ctrl.iter().filter(|e| e.regime == r).count();
    assert_eq!(count(Regime::RA) + count(Regime::RB), spec.ctrl_applicable);
    assert_eq!(count(Regime::RC), spec.ctrl_benign);
    assert_eq!(s.test_applicable.len(), spec.test_applicable);
    assert!(s.shifted.iter().all(|e| (40..48).contains(&e.prompt[3])));
    assert!(s
        .test_benign
        .iter()
        .all(|e| e.label == Applicability::NonApplicable));
}

#[test]
fn tiny_key_space_is_an_error() {
    let spec = TaskSpec {
        pool: 10_000,
        ..TaskSpec::default()
    };
    assert!(generate_synthetic(&spec, 0).is_err());
}

#[test]
fn regime_labels_and_missing_intervention() {
    let s = generate_synthetic(&TaskSpec::default(), 1).unwrap();
    let labels = label_all(&s.ctrl, LabelMode::Regime, None).unwrap();
    for (e, l) in s.ctrl.iter().zip(&labels) {
        assert_eq!(*l == Applicability::Applicable, e.regime != Regime::RC);
    }
    assert!(matches!(
        label_all(&s.ctrl, LabelMode::Outcome, None),
        Err(MariError::MissingArtifact(_))
    ));
}

fn small_backbone() -> Backbone {
    let mut m = Backbone::init(BackboneConfig {
        seed: 9,
        ..BackboneConfig::default()
    })
    .unwrap();
    m.freeze();
    m
}

#[test]
fn full_tape_loss_matches_plain_scoring() {
    let m = small_backbone();
    let site = InjectionSite::last_token(2);
    let mut bank = AdapterBank::init(1, m.d_model(), 4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    bank.adapters[0].u = Tensor::randn(&[m.d_model(), 4], 0.5, &mut rng);
    bank.adapters[0].b = Tensor::randn(&[4], 0.5, &mut rng);
    let batch: Vec<_> = generate_synthetic(&TaskSpec::default(), 2)
        .unwrap()
        .train
        .into_iter()
        .take(6)
        .collect();
    let mut tape = Tape::new();
    let w = m.tape_weights(&mut tape, true, 0);
    let a = bank.adapters[0].register(&mut tape, true);
    let loss =
        tape_choice_loss(&mut tape, &m, &w, a, bank.scale(0).unwrap(), &batch, &site).unwrap();
    let plain: f64 = batch
        .iter()
        .map(|e| per_adapter_loss_mc(&m, &bank, 0, e, &site).unwrap())
        .sum::<f64>()
        / batch.len() as f64;
    assert!((tape.value(loss).item() - plain).abs() < 1e-12);
    let g = backward(&tape, loss).unwrap();
    assert!(w.all().iter().all(|v| g.get(*v).is_some()));
}

#[test]
fn artifacts_are_verified() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::create(dir.path(), 0, PipelineConfig::default()).unwrap();
    run.gen_data().unwrap();
    assert!(matches!(run.eval(), Err(MariError::CalibrationMissing)));
    assert!(matches!(run.backbone(), Err(MariError::MissingArtifact(_))));
    let p = dir.path().join("data/train.jsonl");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(
        Run::open(dir.path()).unwrap().split("train"),
        Err(MariError::Checksum { .. })
    ));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = RunManifest::new(11, PipelineConfig::default()).unwrap();
    m.tau_e = Some(0.125);
    m.save(dir.path()).unwrap();
    let back = RunManifest::load(dir.path()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.checksum(), m.checksum());
}
