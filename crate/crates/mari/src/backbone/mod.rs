//! A small pre-norm decoder-only transformer with a single-site edit hook.

mod checkpoint;
pub(crate) mod forward;
mod pretrain;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry};
pub use forward::{EditFn, HiddenTrace, InjectionSite, PositionRule, Prefix, TapeWeights};
pub use pretrain::{pretrain, NextToken, PretrainCorpus, PretrainReport, PretrainSettings};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MariError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 4,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 64,
            max_context: 32,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.max_context,
        ];
        if counts.contains(&0) {
            return Err(MariError::Invalid(
                "backbone sizes must all be at least 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(MariError::Invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

impl Layer {
    const NAMES: [&'static str; 12] = [
        "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w_ff1", "b_ff1",
        "w_ff2", "b_ff2",
    ];

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_o,
            &self.b_o,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

/// Transformer parameters θ.
///
/// Every read-only API takes `&Backbone`; only [`pretrain`] mutates weights,
/// and it returns the model already frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<Layer>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Tensor,
    frozen: bool,
}

impl Backbone {
    /// Gaussian initialisation (std 0.02, residual projections scaled by
    /// `1/√(2L)`), unit norm gains, zero biases.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let std = 0.02;
        let res_std = std / ((2 * config.n_layers) as f64).sqrt();
        let tok_emb = Tensor::randn(&[v, d], std, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_context, d], std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                w_qkv: Tensor::randn(&[d, 3 * d], std, &mut rng),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_o: Tensor::randn(&[d, d], res_std, &mut rng),
                b_o: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w_ff1: Tensor::randn(&[d, f], std, &mut rng),
                b_ff1: Tensor::zeros(&[f]),
                w_ff2: Tensor::randn(&[f, d], res_std, &mut rng),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        let head = Tensor::randn(&[d, v], std, &mut rng);
        Ok(Backbone {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Tensor::full(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            head,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in Layer::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head".into(), &self.head));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in self.layers.iter_mut() {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the little-endian bytes of every parameter, in order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "backbone".into(),
            meta: serde_json::json!({ "config": self.config, "frozen": self.frozen }),
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "backbone" {
            return Err(MariError::Invalid(format!(
                "checkpoint kind {} is not a backbone",
                ck.kind
            )));
        }
        let config: BackboneConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut b = Backbone::init(config)?;
        let names: Vec<String> = b.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != ck.tensors.len() {
            return Err(MariError::Invalid(
                "checkpoint tensor count does not match the config".into(),
            ));
        }
        for ((slot, name), (cname, t)) in b.tensors_mut().into_iter().zip(&names).zip(&ck.tensors) {
            if name != cname || slot.shape() != t.shape() {
                return Err(MariError::Invalid(format!(
                    "checkpoint tensor {cname} does not match {name}"
                )));
            }
            *slot = t.clone();
        }
        b.frozen = ck.meta["frozen"].as_bool().unwrap_or(true);
        Ok(b)
    }
}
