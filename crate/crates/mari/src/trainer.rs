//! Competitive winner-take-gradient training of an adapter bank.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{tape_delta, tape_edit, AdapterBank, AdapterVars};
use crate::backbone::{Backbone, EditFn, InjectionSite, PositionRule, Prefix, TapeWeights};
use crate::error::{ensure_dim, MariError, Result};
use crate::harness::Example;
use crate::numerics::kernels::log_softmax_row;
use crate::numerics::linalg::{reduced_qr, singular_values};
use crate::numerics::{backward, Adam, Tape, Tensor, Var};

/// Smallest singular value every `U_k` must exceed before the two diversity
/// penalties switch on.
pub const WARMUP_SIGMA: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub t_bal: f64,
    pub lambda_bal: f64,
    pub lambda_inter: f64,
    pub lambda_out: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            steps: 500,
            batch_size: 32,
            t_bal: 1.0,
            lambda_bal: 0.01,
            lambda_inter: 0.01,
            lambda_out: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_bal > 0.0) {
            return Err(MariError::Invalid(format!(
                "T_bal = {} must be positive",
                self.t_bal
            )));
        }
        for (name, w) in [
            ("lambda_bal", self.lambda_bal),
            ("lambda_inter", self.lambda_inter),
            ("lambda_out", self.lambda_out),
        ] {
            if !(w >= 0.0) {
                return Err(MariError::Invalid(format!("{name} = {w} must be ≥ 0")));
            }
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(MariError::Invalid(
                "batch size and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub routed_loss: f64,
    pub usage: Vec<f64>,
    pub balance: f64,
    pub inter: f64,
    pub diversity: f64,
    /// Whether the inter/diversity penalties were active.
    pub warm: bool,
    pub total: f64,
    /// Dataset indices of the batch and the winner of each.
    pub batch: Vec<usize>,
    pub winners: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Winner of every training example under the final bank.
    pub final_winners: Vec<usize>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.routed_loss)
    }

    /// Mean routed loss over the last `window` steps.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let n = self.records.len();
        if n == 0 || window == 0 {
            return None;
        }
        let tail = &self.records[n - window.min(n)..];
        Some(tail.iter().map(|r| r.routed_loss).sum::<f64>() / tail.len() as f64)
    }

    /// Smallest per-step usage over the last `window` steps.
    pub fn min_usage(&self, window: usize) -> Option<f64> {
        let n = self.records.len();
        self.records[n - window.min(n)..]
            .iter()
            .flat_map(|r| r.usage.iter().copied())
            .min_by(f64::total_cmp)
    }
}

fn check_site(backbone: &Backbone, bank: &AdapterBank, site: &InjectionSite) -> Result<()> {
    site.validate(backbone.n_layers())?;
    ensure_dim(backbone.d_model(), bank.dim())
}

/// Edit closure for adapter `k` (dimensions already checked).
pub(crate) fn adapter_edit(bank: &AdapterBank, k: usize) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |h| bank.apply_edit(k, h).expect("dimensions checked")
}

/// Cross-entropy of `softmax(z)` against `gold`.
pub fn mc_loss_from_scores(z: &[f64], gold: usize) -> Result<f64> {
    if gold >= z.len() {
        return Err(MariError::Contract(format!(
            "gold index {gold} outside {} options",
            z.len()
        )));
    }
    Ok(-log_softmax_row(z)[gold])
}

/// Multiple-choice loss of adapter `k` on one example.
pub fn per_adapter_loss_mc(
    backbone: &Backbone,
    bank: &AdapterBank,
    k: usize,
    ex: &Example,
    site: &InjectionSite,
) -> Result<f64> {
    check_site(backbone, bank, site)?;
    bank.adapter(k)?;
    if ex.gold >= ex.options.len() {
        return Err(MariError::Contract(format!(
            "gold index {} outside {} options",
            ex.gold,
            ex.options.len()
        )));
    }
    let edit = adapter_edit(bank, k);
    let z = backbone.option_scores(Some(&edit as EditFn), &ex.prompt, &ex.options, site)?;
    mc_loss_from_scores(&z, ex.gold)
}

/// Teacher-forced NLL `−Σ_t log p_t(y_t)` of `target` after `prompt`.
pub fn per_adapter_loss_gen(
    backbone: &Backbone,
    bank: &AdapterBank,
    k: usize,
    prompt: &[usize],
    target: &[usize],
    site: &InjectionSite,
) -> Result<f64> {
    check_site(backbone, bank, site)?;
    bank.adapter(k)?;
    if target.is_empty() {
        return Err(MariError::Contract("empty generation target".into()));
    }
    let site = InjectionSite {
        position: PositionRule::Index(site.resolve(prompt.len())?),
        ..*site
    };
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&target[..target.len() - 1]);
    let edit = adapter_edit(bank, k);
    let (logits, _) = backbone.forward_with_edit(&seq, &site, &edit)?;
    let mut nll = 0.0;
    for (t, &y) in target.iter().enumerate() {
        nll -= log_softmax_row(logits.row(prompt.len() - 1 + t))[y];
    }
    Ok(nll)
}

/// Argmin with the lowest index winning ties.
pub fn winner(losses: &[f64]) -> Result<usize> {
    if losses.is_empty() {
        return Err(MariError::Contract("winner of an empty loss vector".into()));
    }
    if let Some(i) = losses.iter().position(|l| l.is_nan()) {
        return Err(MariError::NonFinite(format!("loss of adapter {i}")));
    }
    Ok(crate::numerics::stats::argmin(losses))
}

/// Winner of each row of a `batch × K` loss matrix.
pub fn winners(losses: &Tensor) -> Result<Vec<usize>> {
    (0..losses.rows()).map(|i| winner(losses.row(i))).collect()
}

/// Option ids of single-token items, checking every item has the same count.
fn option_table(items: &[&Example]) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let m = items
        .first()
        .ok_or_else(|| MariError::Contract("empty batch".into()))?
        .options
        .len();
    let mut opts = Vec::with_capacity(items.len());
    let mut golds = Vec::with_capacity(items.len());
    for ex in items {
        if ex.options.len() != m || ex.options.iter().any(|o| o.len() != 1) {
            return Err(MariError::Contract(
                "batched training needs single-token options with one count per batch".into(),
            ));
        }
        if ex.gold >= m {
            return Err(MariError::Contract(format!(
                "gold index {} outside {m} options",
                ex.gold
            )));
        }
        opts.push(ex.options.iter().map(|o| o[0]).collect());
        golds.push(ex.gold);
    }
    Ok((opts, golds))
}

/// Every adapter's loss on every item of `prefix` in one stacked pass.
///
/// Returns a `batch × K` variable. The prefix holds one prompt per item.
pub(crate) fn stacked_losses(
    tape: &mut Tape,
    backbone: &Backbone,
    vars: &[AdapterVars],
    scales: &[f64],
    prefix: &Prefix,
    options: &[Vec<usize>],
    golds: &[usize],
) -> Var {
    let (b, k) = (prefix.len(), vars.len());
    let all: Vec<usize> = (0..b).collect();
    let rep = prefix.select(&all, k);
    let h = tape.constant(prefix.site_states());
    let mut x = tape.constant(rep.states.clone());
    for (j, (&w, &s)) in vars.iter().zip(scales).enumerate() {
        let e = tape_edit(tape, w, h, s);
        x = tape.scatter_rows(x, e, &rep.site_rows[j * b..(j + 1) * b]);
    }
    let weights = backbone.tape_weights(tape, false, prefix.layer);
    let top = backbone.tape_blocks(
        tape,
        &weights,
        x,
        &rep.segs,
        prefix.layer,
        backbone.n_layers(),
    );
    let last = tape.gather_rows(top, &rep.segs.lasts());
    let logits = backbone.tape_logits(tape, &weights, last);
    let lp = tape.log_softmax(logits);
    let cols: Vec<Vec<usize>> = (0..k).flat_map(|_| options.iter().cloned()).collect();
    let z = tape.gather_cols(lp, &cols);
    let lz = tape.log_softmax(z);
    let gold_cols: Vec<Vec<usize>> = (0..k)
        .flat_map(|_| golds.iter().map(|&g| vec![g]))
        .collect();
    let picked = tape.gather_cols(lz, &gold_cols);
    let nll = tape.scale(picked, -1.0);
    let m = tape.reshape(nll, &[k, b]);
    tape.transpose(m)
}

/// Mean multiple-choice loss of `batch` with one adapter at the site, built
/// from the embeddings up so that every backbone weight in `weights` is on
/// the gradient path.
pub fn tape_choice_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    weights: &TapeWeights,
    adapter: AdapterVars,
    scale: f64,
    batch: &[Example],
    site: &InjectionSite,
) -> Result<Var> {
    site.validate(backbone.n_layers())?;
    let items: Vec<&Example> = batch.iter().collect();
    let (options, golds) = option_table(&items)?;
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.prompt.as_slice()).collect();
    let (x, segs) = backbone.tape_embed(tape, weights, &seqs)?;
    let x = backbone.tape_blocks(tape, weights, x, &segs, 0, site.layer);
    let rows = segs
        .starts()
        .iter()
        .zip(&seqs)
        .map(|(s, p)| Ok(s + site.resolve(p.len())?))
        .collect::<Result<Vec<_>>>()?;
    let h = tape.gather_rows(x, &rows);
    let e = tape_edit(tape, adapter, h, scale);
    let x = tape.scatter_rows(x, e, &rows);
    let top = backbone.tape_blocks(tape, weights, x, &segs, site.layer, backbone.n_layers());
    let last = tape.gather_rows(top, &segs.lasts());
    let logits = backbone.tape_logits(tape, weights, last);
    let lp = tape.log_softmax(logits);
    let z = tape.gather_cols(lp, &options);
    let lz = tape.log_softmax(z);
    let gold_cols: Vec<Vec<usize>> = golds.iter().map(|&g| vec![g]).collect();
    let picked = tape.gather_cols(lz, &gold_cols);
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

fn prompts_prefix(backbone: &Backbone, items: &[&Example], site: &InjectionSite) -> Result<Prefix> {
    let seqs: Vec<Vec<usize>> = items.iter().map(|e| e.prompt.clone()).collect();
    let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    backbone.prefix(&seqs, &lens, site)
}

/// `batch × K` matrix of multiple-choice losses, computed in one stacked pass.
pub fn loss_matrix(
    backbone: &Backbone,
    bank: &AdapterBank,
    batch: &[Example],
    site: &InjectionSite,
) -> Result<Tensor> {
    check_site(backbone, bank, site)?;
    let items: Vec<&Example> = batch.iter().collect();
    let (opts, golds) = option_table(&items)?;
    let prefix = prompts_prefix(backbone, &items, site)?;
    let mut tape = Tape::new();
    let vars: Vec<AdapterVars> = bank
        .adapters
        .iter()
        .map(|a| a.register(&mut tape, false))
        .collect();
    let scales: Vec<f64> = (0..bank.len())
        .map(|k| bank.scale(k))
        .collect::<Result<_>>()?;
    let l = stacked_losses(&mut tape, backbone, &vars, &scales, &prefix, &opts, &golds);
    Ok(tape.value(l).clone())
}

/// Mean over rows of the winner's loss; non-winner entries never reach the graph.
pub(crate) fn tape_routed(tape: &mut Tape, losses: Var, winners: &[usize]) -> Var {
    let cols: Vec<Vec<usize>> = winners.iter().map(|&w| vec![w]).collect();
    let picked = tape.gather_cols(losses, &cols);
    tape.mean(picked)
}

/// Routed loss and winner map of a batch.
pub fn routed_batch_loss(
    backbone: &Backbone,
    bank: &AdapterBank,
    batch: &[Example],
    site: &InjectionSite,
) -> Result<(f64, Vec<usize>)> {
    if batch.is_empty() {
        return Err(MariError::Contract("routed loss of an empty batch".into()));
    }
    let l = loss_matrix(backbone, bank, batch, site)?;
    let w = winners(&l)?;
    let v = w.iter().enumerate().map(|(i, &k)| l.get(i, k)).sum::<f64>() / w.len() as f64;
    Ok((v, w))
}

/// Gradients of the routed task loss alone, per adapter as `[∂U, ∂V, ∂b]`,
/// plus the winners.
pub fn routed_task_gradients(
    backbone: &Backbone,
    bank: &AdapterBank,
    batch: &[Example],
    site: &InjectionSite,
) -> Result<(Vec<usize>, Vec<[Tensor; 3]>)> {
    check_site(backbone, bank, site)?;
    let items: Vec<&Example> = batch.iter().collect();
    let (opts, golds) = option_table(&items)?;
    let prefix = prompts_prefix(backbone, &items, site)?;
    let scales: Vec<f64> = (0..bank.len())
        .map(|j| bank.scale(j))
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let vars: Vec<AdapterVars> = bank
        .adapters
        .iter()
        .map(|a| a.register(&mut tape, true))
        .collect();
    let losses = stacked_losses(&mut tape, backbone, &vars, &scales, &prefix, &opts, &golds);
    let win = winners(tape.value(losses))?;
    let routed = tape_routed(&mut tape, losses, &win);
    let grads = backward(&tape, routed)?;
    let g = |v: Var| {
        grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    };
    Ok((win, vars.iter().map(|w| [g(w.u), g(w.v), g(w.b)]).collect()))
}

/// Balance penalty and usage vector `p` on a tape.
pub(crate) fn tape_balance(tape: &mut Tape, losses: Var, t_bal: f64) -> (Var, Var) {
    let k = tape.value(losses).cols();
    let s = tape.scale(losses, -1.0 / t_bal);
    let q = tape.softmax(s);
    let p = tape.mean_rows(q);
    let u = tape.constant(Tensor::full(&[1, k], 1.0 / k as f64));
    let dev = tape.sub(p, u);
    (tape.sum_sq(dev), p)
}

/// `Σ_k (p_k − 1/K)²` with `p` the batch mean of `softmin(losses / T_bal)`.
pub fn balance_penalty(losses: &Tensor, t_bal: f64) -> Result<f64> {
    if !(t_bal > 0.0) {
        return Err(MariError::Contract(format!(
            "T_bal = {t_bal} must be positive"
        )));
    }
    if losses.shape().len() != 2 || losses.rows() == 0 || losses.cols() == 0 {
        return Err(MariError::Contract(
            "balance penalty needs a non-empty batch × K matrix".into(),
        ));
    }
    let mut tape = Tape::new();
    let l = tape.constant(losses.clone());
    let (pen, _) = tape_balance(&mut tape, l, t_bal);
    Ok(tape.value(pen).item())
}

/// `2/(K(K−1)) Σ_{i<j} trace(P_i P_j)` with `P = U(UᵀU)⁻¹Uᵀ`, differentiable in every `U`.
pub(crate) fn tape_inter(tape: &mut Tape, us: &[Var]) -> Result<Var> {
    let k = us.len();
    if k < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut ginv = Vec::with_capacity(k);
    let mut ut = Vec::with_capacity(k);
    for &u in us {
        let t = tape.transpose(u);
        let g = tape.matmul(t, u);
        ginv.push(tape.inverse(g)?);
        ut.push(t);
    }
    let mut terms = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let a = tape.matmul(ut[i], us[j]);
            let at = tape.transpose(a);
            let m1 = tape.matmul(ginv[i], a);
            let m2 = tape.matmul(ginv[j], at);
            let m2t = tape.transpose(m2);
            let prod = tape.mul(m1, m2t);
            terms.push(tape.sum(prod));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    Ok(tape.scale(total, 2.0 / (k * (k - 1)) as f64))
}

/// `2/(K(K−1)) Σ_{i<j} ‖Q_iᵀQ_j‖²_F` with `Q_k` an orthonormal basis of `span(U_k)`.
pub fn inter_orthogonality_penalty(bank: &AdapterBank) -> Result<f64> {
    let k = bank.len();
    if k < 2 {
        return Ok(0.0);
    }
    let qs = bank
        .adapters
        .iter()
        .map(|a| reduced_qr(&a.u))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let c = qs[i].matmul_tn(&qs[j]);
            total += c.data().iter().map(|x| x * x).sum::<f64>();
        }
    }
    Ok(total * 2.0 / (k * (k - 1)) as f64)
}

/// Mean pairwise squared cosine of the rows of `deltas` (one `batch × d`
/// variable per adapter). Pairs involving a zero row contribute 0.
pub(crate) fn tape_diversity(tape: &mut Tape, deltas: &[Var]) -> Var {
    let k = deltas.len();
    if k < 2 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let b = tape.value(deltas[0]).rows();
    let norms: Vec<Var> = deltas
        .iter()
        .map(|&d| {
            let sq = tape.mul(d, d);
            tape.sum_cols(sq)
        })
        .collect();
    let mut terms = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let (ni, nj) = (tape.value(norms[i]).clone(), tape.value(norms[j]).clone());
            let mask: Vec<f64> = ni
                .data()
                .iter()
                .zip(nj.data())
                .map(|(a, c)| if *a > 0.0 && *c > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let pad = tape.constant(Tensor::raw(
                vec![b, 1],
                mask.iter().map(|m| 1.0 - m).collect(),
            ));
            let mask = tape.constant(Tensor::raw(vec![b, 1], mask));
            let prod = tape.mul(deltas[i], deltas[j]);
            let dot = tape.sum_cols(prod);
            let num = tape.mul(dot, dot);
            let den = tape.mul(norms[i], norms[j]);
            let den = tape.add(den, pad);
            let c = tape.div(num, den);
            let c = tape.mul(c, mask);
            terms.push(tape.sum(c));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    tape.scale(total, 2.0 / (k * (k - 1)) as f64 / b as f64)
}

fn scaled_deltas(tape: &mut Tape, vars: &[AdapterVars], scales: &[f64], h: Var) -> Vec<Var> {
    vars.iter()
        .zip(scales)
        .map(|(&w, &s)| {
            let d = tape_delta(tape, w, h);
            tape.scale(d, s)
        })
        .collect()
}

/// Mean over the batch of the pairwise squared cosine between adapter updates
/// `γ·s_k·Δ_k(h)` at the site.
pub fn direction_diversity_penalty(
    backbone: &Backbone,
    bank: &AdapterBank,
    batch: &[Example],
    site: &InjectionSite,
) -> Result<f64> {
    check_site(backbone, bank, site)?;
    if batch.is_empty() {
        return Err(MariError::Contract(
            "diversity penalty of an empty batch".into(),
        ));
    }
    let items: Vec<&Example> = batch.iter().collect();
    let prefix = prompts_prefix(backbone, &items, site)?;
    let mut tape = Tape::new();
    let vars: Vec<AdapterVars> = bank
        .adapters
        .iter()
        .map(|a| a.register(&mut tape, false))
        .collect();
    let scales: Vec<f64> = (0..bank.len())
        .map(|k| bank.scale(k))
        .collect::<Result<_>>()?;
    let h = tape.constant(prefix.site_states());
    let deltas = scaled_deltas(&mut tape, &vars, &scales, h);
    let v = tape_diversity(&mut tape, &deltas);
    Ok(tape.value(v).item())
}

/// Whether every `U_k` has left the rank-deficient start.
pub fn is_warm(bank: &AdapterBank) -> Result<bool> {
    for a in &bank.adapters {
        let sv = singular_values(&a.u)?;
        if !(sv.iter().cloned().fold(f64::INFINITY, f64::min) > WARMUP_SIGMA) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Optimises `L_route + λ_bal·L_bal + λ_inter·L_inter + λ_out·L_out` with Adam
/// over shuffled passes through `data`.
pub fn train_adapters(
    backbone: &Backbone,
    bank: &AdapterBank,
    data: &[Example],
    config: &TrainConfig,
    site: &InjectionSite,
) -> Result<(AdapterBank, TrainLog)> {
    config.validate()?;
    check_site(backbone, bank, site)?;
    if !backbone.is_frozen() {
        return Err(MariError::Contract(
            "adapter training needs a frozen backbone".into(),
        ));
    }
    if data.is_empty() {
        return Err(MariError::Contract("adapter training set is empty".into()));
    }
    let items: Vec<&Example> = data.iter().collect();
    let (opts, golds) = option_table(&items)?;
    let full = prompts_prefix(backbone, &items, site)?;
    let k = bank.len();
    let scales: Vec<f64> = (0..k).map(|j| bank.scale(j)).collect::<Result<_>>()?;

    let mut bank = bank.clone();
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    for step in 0..config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            idx.push(order.pop().expect("refilled"));
        }
        let prefix = full.select(&idx, 1);
        let b_opts: Vec<Vec<usize>> = idx.iter().map(|&i| opts[i].clone()).collect();
        let b_golds: Vec<usize> = idx.iter().map(|&i| golds[i]).collect();

        let warm = is_warm(&bank)?;
        let mut tape = Tape::new();
        let vars: Vec<AdapterVars> = bank
            .adapters
            .iter()
            .map(|a| a.register(&mut tape, true))
            .collect();
        let losses = stacked_losses(
            &mut tape, backbone, &vars, &scales, &prefix, &b_opts, &b_golds,
        );
        let win = winners(tape.value(losses))?;
        let routed = tape_routed(&mut tape, losses, &win);
        let (bal, usage) = tape_balance(&mut tape, losses, config.t_bal);
        let w_bal = tape.scale(bal, config.lambda_bal);
        let mut total = tape.add(routed, w_bal);
        let (mut inter_v, mut div_v) = (0.0, 0.0);
        if warm && k > 1 {
            let us: Vec<Var> = vars.iter().map(|w| w.u).collect();
            let inter = tape_inter(&mut tape, &us)?;
            let h = tape.constant(prefix.site_states());
            let deltas = scaled_deltas(&mut tape, &vars, &scales, h);
            let div = tape_diversity(&mut tape, &deltas);
            inter_v = tape.value(inter).item();
            div_v = tape.value(div).item();
            let wi = tape.scale(inter, config.lambda_inter);
            let wd = tape.scale(div, config.lambda_out);
            total = tape.add(total, wi);
            total = tape.add(total, wd);
        }
        let total_v = tape.value(total).item();
        if !total_v.is_finite() {
            return Err(MariError::Divergence { step });
        }
        let grads = backward(&tape, total).map_err(|_| MariError::Divergence { step })?;
        log.records.push(StepRecord {
            step,
            routed_loss: tape.value(routed).item(),
            usage: tape.value(usage).data().to_vec(),
            balance: tape.value(bal).item(),
            inter: inter_v,
            diversity: div_v,
            warm,
            total: total_v,
            batch: idx,
            winners: win,
        });
        let gs: Vec<Tensor> = vars
            .iter()
            .flat_map(|w| [w.u, w.v, w.b])
            .map(|v| grads.get(v).expect("trainable leaf").clone())
            .collect();
        let grefs: Vec<&Tensor> = gs.iter().collect();
        let mut params: Vec<&mut Tensor> = bank
            .adapters
            .iter_mut()
            .flat_map(|a| a.params_mut())
            .collect();
        opt.step(&mut params, &grefs);
    }
    bank.validate()?;
    log.final_winners = winners(&loss_matrix(backbone, &bank, data, site)?)?;
    Ok((bank, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cross_entropy() {
        let l = mc_loss_from_scores(&[1.0, -1.0], 0).unwrap();
        assert!((l - 0.126928).abs() < 1e-6);
        let u = mc_loss_from_scores(&[0.3; 4], 2).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-15);
        assert!(mc_loss_from_scores(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn winner_ties_and_nan() {
        assert_eq!(winner(&[0.2, 0.5]).unwrap(), 0);
        assert_eq!(winner(&[0.3, 0.3]).unwrap(), 0);
        assert_eq!(winner(&[0.7]).unwrap(), 0);
        assert!(winner(&[0.1, f64::NAN]).is_err());
        assert!(winner(&[]).is_err());
    }

    #[test]
    fn balance_limits() {
        let eq = Tensor::full(&[5, 3], 0.4);
        assert!(balance_penalty(&eq, 1.0).unwrap().abs() < 1e-15);
        assert_eq!(
            balance_penalty(&Tensor::full(&[4, 1], 2.0), 1.0).unwrap(),
            0.0
        );
        for k in 2..6 {
            let mut l = Tensor::full(&[6, k], 1.0);
            for i in 0..6 {
                l.set(i, 0, 0.5);
            }
            let kf = k as f64;
            let expect = (1.0 - 1.0 / kf).powi(2) + (kf - 1.0) / (kf * kf);
            assert!((balance_penalty(&l, 1e-4).unwrap() - expect).abs() < 1e-3);
        }
        assert!(balance_penalty(&eq, 0.0).is_err());
    }
}
