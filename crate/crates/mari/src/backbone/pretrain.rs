use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneConfig};
use crate::error::{MariError, Result};
use crate::numerics::{backward, stats, Adam, Tape, Tensor};

/// A prompt and the token that should follow it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextToken {
    pub prompt: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainCorpus {
    pub train: Vec<NextToken>,
    pub heldout: Vec<NextToken>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Held-out accuracy the run must reach; `None` skips the check.
    pub accuracy_floor: Option<f64>,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            learning_rate: 3e-3,
            batch_size: 32,
            steps: 1500,
            seed: 0,
            accuracy_floor: Some(0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub heldout_accuracy: f64,
    pub checksum: String,
}

impl Backbone {
    /// Logits for the token after each prompt.
    pub fn next_token_logits(&self, prompts: &[Vec<usize>]) -> Result<Tensor> {
        let refs: Vec<&[usize]> = prompts.iter().map(|p| p.as_slice()).collect();
        let (x, segs) = self.embed(&refs)?;
        let x = self.blocks(x, &segs, 0, self.n_layers(), &mut Vec::new());
        Ok(self.logits(&x.gather_rows(&segs.lasts())))
    }

    /// Fraction of examples whose argmax next token equals the target.
    pub fn next_token_accuracy(&self, examples: &[NextToken]) -> Result<f64> {
        if examples.is_empty() {
            return Err(MariError::Contract("accuracy over an empty set".into()));
        }
        let prompts: Vec<Vec<usize>> = examples.iter().map(|e| e.prompt.clone()).collect();
        let logits = self.next_token_logits(&prompts)?;
        let hits = examples
            .iter()
            .enumerate()
            .filter(|(i, e)| stats::argmax(logits.row(*i)) == e.target)
            .count();
        Ok(hits as f64 / examples.len() as f64)
    }
}

/// Mean next-token NLL of a batch on a fresh tape with trainable weights.
fn batch_loss(
    model: &Backbone,
    batch: &[&NextToken],
) -> Result<(Tape, Vec<crate::numerics::Var>, crate::numerics::Var)> {
    let mut tape = Tape::new();
    let w = model.tape_weights(&mut tape, true, 0);
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.prompt.as_slice()).collect();
    let (x, segs) = model.tape_embed(&mut tape, &w, &seqs)?;
    let x = model.tape_blocks(&mut tape, &w, x, &segs, 0, model.n_layers());
    let last = tape.gather_rows(x, &segs.lasts());
    let logits = model.tape_logits(&mut tape, &w, last);
    let lp = tape.log_softmax(logits);
    let targets: Vec<Vec<usize>> = batch.iter().map(|e| vec![e.target]).collect();
    let picked = tape.gather_cols(lp, &targets);
    let mean = tape.mean(picked);
    let loss = tape.scale(mean, -1.0);
    Ok((tape, w.all(), loss))
}

/// Trains a fresh backbone with Adam on uniformly sampled minibatches, then
/// freezes it.
pub fn pretrain(
    config: BackboneConfig,
    corpus: &PretrainCorpus,
    settings: &PretrainSettings,
) -> Result<(Backbone, PretrainReport)> {
    if corpus.train.is_empty() && settings.steps > 0 {
        return Err(MariError::Contract("pretraining corpus is empty".into()));
    }
    let mut model = Backbone::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut opt = Adam::new(settings.learning_rate);
    let mut final_loss = f64::NAN;
    for step in 0..settings.steps {
        let batch: Vec<&NextToken> = (0..settings.batch_size)
            .map(|_| &corpus.train[rng.random_range(0..corpus.train.len())])
            .collect();
        let (tape, vars, loss) = batch_loss(&model, &batch)?;
        final_loss = tape.value(loss).item();
        if !final_loss.is_finite() {
            return Err(MariError::Divergence { step });
        }
        let grads = backward(&tape, loss).map_err(|_| MariError::Divergence { step })?;
        let gs: Vec<&Tensor> = vars
            .iter()
            .map(|v| grads.get(*v).expect("gradient"))
            .collect();
        opt.step(&mut model.tensors_mut(), &gs);
    }
    let heldout_accuracy = if corpus.heldout.is_empty() {
        f64::NAN
    } else {
        model.next_token_accuracy(&corpus.heldout)?
    };
    if let Some(floor) = settings.accuracy_floor {
        if !(heldout_accuracy >= floor) {
            return Err(MariError::AccuracyFloor {
                achieved: heldout_accuracy,
                floor,
            });
        }
    }
    model.freeze();
    let checksum = model.checksum();
    Ok((
        model,
        PretrainReport {
            steps: settings.steps,
            final_loss,
            heldout_accuracy,
            checksum,
        },
    ))
}
