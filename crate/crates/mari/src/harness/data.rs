use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::NextToken;
use crate::error::{MariError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    RA,
    RB,
    RC,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::RA => "RA",
            Regime::RB => "RB",
            Regime::RC => "RC",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Applicability {
    Applicable,
    NonApplicable,
    Unlabeled,
}

/// A multiple-choice item.
///
/// In the pretraining split `gold` is the (possibly noisy) pretraining target
/// rather than the intervention answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub regime: Regime,
    pub prompt: Vec<usize>,
    pub options: Vec<Vec<usize>>,
    pub gold: usize,
    pub label: Applicability,
}

impl Example {
    pub fn next_token(&self) -> NextToken {
        NextToken {
            prompt: self.prompt.clone(),
            target: self.options[self.gold][0],
        }
    }
}

/// Token layout and split sizes of the two-regime mapping task.
///
/// Prompts are `[marker, key, f, f, SEP]` on RA/RB and `[marker, f, f, key,
/// SEP]` on RC, with `f` filler. The class of an item is
/// `(key − start of its key range) mod n_classes`. RC and the shifted split
/// have their own key ranges unless `benign_keys` is 0. Every regime
/// answers with its own group of class tokens. The backbone learns the class
/// mapping `g` for all regimes (only with probability `pretrain_fidelity` on
/// RA/RB, so it stays unsure there). Intervention answers shift the class by
/// +1 on RA and −1 on RB; RC keeps `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub primary_keys: usize,
    pub shifted_keys: usize,
    /// Own key range for unshifted RC; 0 shares the primary range.
    pub benign_keys: usize,
    /// RA and RB draw keys from disjoint halves of the primary range.
    pub split_keys: bool,
    /// RB answers with RA's option tokens.
    pub shared_answers: bool,
    pub vocab_size: usize,
    pub pretrain_per_regime: usize,
    pub pretrain_fidelity: f64,
    pub pool: usize,
    pub ctrl_applicable: usize,
    pub ctrl_benign: usize,
    pub test_applicable: usize,
    pub test_benign: usize,
    pub shifted: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            n_classes: 4,
            primary_keys: 16,
            shifted_keys: 8,
            benign_keys: 8,
            split_keys: false,
            shared_answers: false,
            vocab_size: 64,
            pretrain_per_regime: 500,
            pretrain_fidelity: 0.8,
            pool: 400,
            ctrl_applicable: 100,
            ctrl_benign: 100,
            test_applicable: 200,
            test_benign: 200,
            shifted: 200,
        }
    }
}

/// Concrete token ids derived from a [`TaskSpec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_classes: usize,
    pub split_keys: bool,
    pub shared_answers: bool,
    pub markers: [usize; 3],
    pub sep: usize,
    pub primary: std::ops::Range<usize>,
    pub benign: std::ops::Range<usize>,
    pub shifted: std::ops::Range<usize>,
    pub filler: std::ops::Range<usize>,
}

impl TokenLayout {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        let c = spec.n_classes;
        let per_regime = if spec.split_keys {
            spec.primary_keys / 2
        } else {
            spec.primary_keys
        };
        if c < 2
            || per_regime < c
            || spec.shifted_keys < c
            || (spec.benign_keys != 0 && spec.benign_keys < c)
            || (spec.split_keys && per_regime % c != 0)
        {
            return Err(MariError::Invalid(
                "need at least two classes and a whole number of keys per class".into(),
            ));
        }
        let markers = [3 * c, 3 * c + 1, 3 * c + 2];
        let sep = 3 * c + 3;
        let primary = sep + 1..sep + 1 + spec.primary_keys;
        let benign = if spec.benign_keys == 0 {
            primary.clone()
        } else {
            primary.end..primary.end + spec.benign_keys
        };
        let shifted = benign.end.max(primary.end)..benign.end.max(primary.end) + spec.shifted_keys;
        let filler = shifted.end..spec.vocab_size;
        if filler.len() < 2 {
            return Err(MariError::Invalid(format!(
                "key-space too small: vocab {} leaves {} filler tokens",
                spec.vocab_size,
                filler.len()
            )));
        }
        Ok(TokenLayout {
            n_classes: c,
            split_keys: spec.split_keys,
            shared_answers: spec.shared_answers,
            markers,
            sep,
            primary,
            benign,
            shifted,
            filler,
        })
    }

    pub fn answer_token(&self, regime: Regime, class: usize) -> usize {
        let group = match regime {
            Regime::RA => 0,
            Regime::RB if self.shared_answers => 0,
            Regime::RB => 1,
            Regime::RC => 2,
        };
        group * self.n_classes + class
    }

    pub fn marker(&self, regime: Regime) -> usize {
        self.markers[regime as usize]
    }

    pub fn options(&self, regime: Regime) -> Vec<Vec<usize>> {
        (0..self.n_classes)
            .map(|c| vec![self.answer_token(regime, c)])
            .collect()
    }

    /// Keys a regime draws from.
    pub fn keys(&self, regime: Regime, shifted: bool) -> std::ops::Range<usize> {
        let p = &self.primary;
        let mid = p.start + p.len() / 2;
        match (shifted, regime, self.split_keys) {
            (true, _, _) => self.shifted.clone(),
            (false, Regime::RA, true) => p.start..mid,
            (false, Regime::RB, true) => mid..p.end,
            (false, Regime::RC, _) => self.benign.clone(),
            _ => p.clone(),
        }
    }

    /// Class `g` encoded by a prompt's key.
    pub fn class_of(&self, prompt: &[usize]) -> usize {
        let k1 = prompt[1..prompt.len() - 1]
            .iter()
            .copied()
            .find(|t| !self.filler.contains(t))
            .expect("prompt has a key");
        let base = [&self.shifted, &self.benign]
            .into_iter()
            .find(|r| r.contains(&k1))
            .map_or(self.primary.start, |r| r.start);
        (k1 - base) % self.n_classes
    }

    /// Intervention answer class for a regime.
    pub fn target_class(&self, regime: Regime, class: usize) -> usize {
        let c = self.n_classes;
        match regime {
            Regime::RA => (class + 1) % c,
            Regime::RB => (class + c - 1) % c,
            Regime::RC => class,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub pretrain: Vec<Example>,
    pub pca: Vec<Example>,
    pub train: Vec<Example>,
    pub ctrl: Vec<Example>,
    pub test_applicable: Vec<Example>,
    pub test_benign: Vec<Example>,
    pub shifted: Vec<Example>,
}

impl DatasetSplits {
    pub const NAMES: [&'static str; 7] = [
        "pretrain",
        "pca",
        "train",
        "ctrl",
        "test_applicable",
        "test_benign",
        "shifted",
    ];

    pub fn get(&self, name: &str) -> Option<&Vec<Example>> {
        Some(match name {
            "pretrain" => &self.pretrain,
            "pca" => &self.pca,
            "train" => &self.train,
            "ctrl" => &self.ctrl,
            "test_applicable" => &self.test_applicable,
            "test_benign" => &self.test_benign,
            "shifted" => &self.shifted,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<Example>> {
        Some(match name {
            "pretrain" => &mut self.pretrain,
            "pca" => &mut self.pca,
            "train" => &mut self.train,
            "ctrl" => &mut self.ctrl,
            "test_applicable" => &mut self.test_applicable,
            "test_benign" => &mut self.test_benign,
            "shifted" => &mut self.shifted,
            _ => return None,
        })
    }

    pub fn pretrain_corpus(&self) -> crate::backbone::PretrainCorpus {
        crate::backbone::PretrainCorpus {
            train: self.pretrain.iter().map(Example::next_token).collect(),
            heldout: self.test_benign.iter().map(Example::next_token).collect(),
        }
    }
}

struct Generator<'a> {
    layout: &'a TokenLayout,
    rng: ChaCha8Rng,
    used: HashSet<Vec<usize>>,
    next_id: u64,
}

impl Generator<'_> {
    fn prompt(&mut self, regime: Regime, shifted: bool) -> Result<Vec<usize>> {
        let keys = self.layout.keys(regime, shifted);
        let space = keys.len() * self.layout.filler.len() * self.layout.filler.len();
        for _ in 0..space * 20 {
            let mut p = vec![
                self.layout.marker(regime),
                self.rng.random_range(keys.clone()),
                self.rng.random_range(self.layout.filler.clone()),
                self.rng.random_range(self.layout.filler.clone()),
                self.layout.sep,
            ];
            if regime == Regime::RC {
                p.swap(1, 3);
            }
            if self.used.insert(p.clone()) {
                return Ok(p);
            }
        }
        Err(MariError::Invalid(format!(
            "key-space too small for disjoint {regime} splits"
        )))
    }

    fn item(
        &mut self,
        regime: Regime,
        shifted: bool,
        pretrain_fidelity: Option<f64>,
    ) -> Result<Example> {
        let prompt = self.prompt(regime, shifted)?;
        let class = self.layout.class_of(&prompt);
        let gold = match pretrain_fidelity {
            Some(p) if regime != Regime::RC && self.rng.random::<f64>() >= p => {
                let others: Vec<usize> =
                    (0..self.layout.n_classes).filter(|&c| c != class).collect();
                others[self.rng.random_range(0..others.len())]
            }
            Some(_) => class,
            None => self.layout.target_class(regime, class),
        };
        let label = match (pretrain_fidelity, regime) {
            (Some(_), _) => Applicability::Unlabeled,
            (None, Regime::RC) => Applicability::NonApplicable,
            (None, _) => Applicability::Applicable,
        };
        let id = self.next_id;
        self.next_id += 1;
        Ok(Example {
            id,
            regime,
            prompt,
            options: self.layout.options(regime),
            gold,
            label,
        })
    }

    fn many(&mut self, regime: Regime, n: usize, shifted: bool) -> Result<Vec<Example>> {
        (0..n).map(|_| self.item(regime, shifted, None)).collect()
    }

    fn two_regimes(&mut self, n: usize) -> Result<Vec<Example>> {
        let mut v = self.many(Regime::RA, n / 2, false)?;
        v.extend(self.many(Regime::RB, n - n / 2, false)?);
        Ok(v)
    }
}

/// Builds every split from one seed. Prompts never repeat across splits.
pub fn generate_synthetic(spec: &TaskSpec, seed: u64) -> Result<DatasetSplits> {
    let layout = TokenLayout::new(spec)?;
    let mut g = Generator {
        layout: &layout,
        rng: ChaCha8Rng::seed_from_u64(seed),
        used: HashSet::new(),
        next_id: 0,
    };
    let mut pretrain = Vec::with_capacity(4 * spec.pretrain_per_regime);
    for (regime, shifted) in [
        (Regime::RA, false),
        (Regime::RB, false),
        (Regime::RC, false),
        (Regime::RC, true),
    ] {
        for _ in 0..spec.pretrain_per_regime {
            pretrain.push(g.item(regime, shifted, Some(spec.pretrain_fidelity))?);
        }
    }
    pretrain.shuffle(&mut g.rng);

    let mut pool_a = g.many(Regime::RA, spec.pool / 2, false)?;
    let mut pool_b = g.many(Regime::RB, spec.pool - spec.pool / 2, false)?;
    pool_a.shuffle(&mut g.rng);
    pool_b.shuffle(&mut g.rng);
    let (ha, hb) = (pool_a.len() / 2, pool_b.len() / 2);
    let mut pca: Vec<Example> = pool_a[..ha].iter().chain(&pool_b[..hb]).cloned().collect();
    let mut train: Vec<Example> = pool_a[ha..].iter().chain(&pool_b[hb..]).cloned().collect();
    pca.shuffle(&mut g.rng);
    train.shuffle(&mut g.rng);

    let mut ctrl = g.two_regimes(spec.ctrl_applicable)?;
    ctrl.extend(g.many(Regime::RC, spec.ctrl_benign, false)?);
    let test_applicable = g.two_regimes(spec.test_applicable)?;
    let test_benign = g.many(Regime::RC, spec.test_benign, false)?;
    let shifted = g.many(Regime::RC, spec.shifted, true)?;
    Ok(DatasetSplits {
        pretrain,
        pca,
        train,
        ctrl,
        test_applicable,
        test_benign,
        shifted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_the_spec() {
        let s = generate_synthetic(&TaskSpec::default(), 7).unwrap();
        assert_eq!(s.pretrain.len(), 2000);
        assert_eq!((s.pca.len(), s.train.len()), (200, 200));
        assert_eq!(s.ctrl.len(), 200);
        assert_eq!(
            s.ctrl
                .iter()
                .filter(|e| e.label == Applicability::Applicable)
                .count(),
            100
        );
        assert_eq!(
            (
                s.test_applicable.len(),
                s.test_benign.len(),
                s.shifted.len()
            ),
            (200, 200, 200)
        );
    }

    #[test]
    fn key_ranges() {
        let spec = TaskSpec::default();
        let t = TokenLayout::new(&spec).unwrap();
        assert_eq!(
            (
                t.primary.clone(),
                t.benign.clone(),
                t.shifted.clone(),
                t.filler.clone()
            ),
            (16..32, 32..40, 40..48, 48..64)
        );
        let s = generate_synthetic(&spec, 1).unwrap();
        assert!(s
            .test_benign
            .iter()
            .all(|e| t.benign.contains(&e.prompt[3]) && e.gold == t.class_of(&e.prompt)));
        assert!(s.shifted.iter().all(|e| t.shifted.contains(&e.prompt[3])));
        assert!(s
            .test_applicable
            .iter()
            .all(|e| t.primary.contains(&e.prompt[1])));
        let shared = TokenLayout::new(&TaskSpec {
            benign_keys: 0,
            ..spec
        })
        .unwrap();
        assert_eq!((shared.benign.clone(), shared.shifted.start), (16..32, 32));
    }

    #[test]
    fn tiny_vocab_is_rejected() {
        let spec = TaskSpec {
            vocab_size: 41,
            ..TaskSpec::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }
}
