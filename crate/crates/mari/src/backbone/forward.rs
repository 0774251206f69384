use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::error::{ensure_dim, MariError, Result};
use crate::numerics::kernels::{self, Segments};
use crate::numerics::{stats, Tape, Tensor, Var};

/// Replacement map applied to the hidden state at the injection site.
pub type EditFn<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionRule {
    LastPromptToken,
    Index(usize),
}

/// Layer `l*` (1-based block output) and position rule for `p*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSite {
    pub layer: usize,
    pub position: PositionRule,
}

impl InjectionSite {
    pub fn last_token(layer: usize) -> Self {
        InjectionSite {
            layer,
            position: PositionRule::LastPromptToken,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layer == 0 || self.layer > n_layers {
            return Err(MariError::Invalid(format!(
                "injection layer {} outside 1..={n_layers}",
                self.layer
            )));
        }
        Ok(())
    }

    /// Position `p*` inside a prompt of the given length.
    pub fn resolve(&self, prompt_len: usize) -> Result<usize> {
        match self.position {
            PositionRule::LastPromptToken if prompt_len > 0 => Ok(prompt_len - 1),
            PositionRule::Index(i) if i < prompt_len => Ok(i),
            _ => Err(MariError::Invalid(format!(
                "site position {:?} outside a prompt of length {prompt_len}",
                self.position
            ))),
        }
    }
}

/// Residual-stream states `h[m][p]` for `m = 0..=L` plus per-position logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub hidden: Vec<Tensor>,
    pub logits: Tensor,
}

impl HiddenTrace {
    pub fn state(&self, layer: usize, position: usize) -> &[f64] {
        self.hidden[layer].row(position)
    }

    pub fn positions(&self) -> usize {
        self.logits.rows()
    }
}

/// Packed states at the injection layer for a batch of sequences, ready to be
/// resumed with edited site rows.
#[derive(Clone, Debug)]
pub struct Prefix {
    pub segs: Segments,
    pub layer: usize,
    pub states: Tensor,
    /// Packed row index of `p*` for each sequence.
    pub site_rows: Vec<usize>,
}

impl Prefix {
    pub fn site_state(&self, seq: usize) -> &[f64] {
        self.states.row(self.site_rows[seq])
    }

    /// Sequence count.
    pub fn len(&self) -> usize {
        self.site_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.site_rows.is_empty()
    }

    /// Sequences `idx` packed again, the whole list repeated `times` times.
    pub fn select(&self, idx: &[usize], times: usize) -> Prefix {
        let starts = self.segs.starts();
        let mut rows = Vec::new();
        let mut lens = Vec::with_capacity(idx.len() * times);
        let mut site_rows = Vec::with_capacity(idx.len() * times);
        for _ in 0..times {
            for &s in idx {
                site_rows.push(rows.len() + self.site_rows[s] - starts[s]);
                rows.extend(starts[s]..starts[s] + self.segs.lens[s]);
                lens.push(self.segs.lens[s]);
            }
        }
        Prefix {
            segs: Segments { lens },
            layer: self.layer,
            states: self.states.gather_rows(&rows),
            site_rows,
        }
    }

    /// Site rows of every sequence as an `n × d` block.
    pub fn site_states(&self) -> Tensor {
        self.states.gather_rows(&self.site_rows)
    }
}

/// Backbone parameters registered on a tape.
pub struct TapeWeights {
    pub tok_emb: Option<Var>,
    pub pos_emb: Option<Var>,
    pub layers: Vec<Option<[Var; 12]>>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub head: Var,
}

impl TapeWeights {
    /// Inverse of [`TapeWeights::all`]: leaves given in [`Backbone::named_tensors`] order.
    pub fn from_vars(vars: &[Var], n_layers: usize) -> Result<Self> {
        ensure_dim(2 + 12 * n_layers + 3, vars.len())?;
        let layers = (0..n_layers)
            .map(|l| Some(std::array::from_fn(|i| vars[2 + 12 * l + i])))
            .collect();
        let t = &vars[2 + 12 * n_layers..];
        Ok(TapeWeights {
            tok_emb: Some(vars[0]),
            pos_emb: Some(vars[1]),
            layers,
            lnf_g: t[0],
            lnf_b: t[1],
            head: t[2],
        })
    }

    /// Trainable leaves in [`Backbone::named_tensors`] order (full registration only).
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![
            self.tok_emb.expect("embeddings"),
            self.pos_emb.expect("embeddings"),
        ];
        for l in &self.layers {
            out.extend(l.expect("layer"));
        }
        out.extend([self.lnf_g, self.lnf_b, self.head]);
        out
    }
}

impl Backbone {
    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(MariError::Invalid("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(MariError::ContextOverflow {
                len: tokens.len(),
                max: self.config.max_context,
            });
        }
        if let Some((index, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.config.vocab_size)
        {
            return Err(MariError::OutOfVocab { index, token });
        }
        Ok(())
    }

    pub(crate) fn embed(&self, seqs: &[&[usize]]) -> Result<(Tensor, Segments)> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let segs = Segments {
            lens: seqs.iter().map(|s| s.len()).collect(),
        };
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let tok = self.tok_emb.gather_rows(&ids);
        let pos = self.pos_emb.gather_rows(&segs.positions());
        Ok((tok.add(&pos), segs))
    }

    pub(crate) fn block(&self, l: usize, x: &Tensor, segs: &Segments) -> Tensor {
        let p = &self.layers[l];
        let (a, _) = kernels::layer_norm(x, &p.ln1_g, &p.ln1_b);
        let qkv = kernels::add_row(&a.matmul(&p.w_qkv), &p.b_qkv);
        let (att, _) = kernels::attention(&qkv, segs, self.config.n_heads);
        let x = x.add(&kernels::add_row(&att.matmul(&p.w_o), &p.b_o));
        let (f, _) = kernels::layer_norm(&x, &p.ln2_g, &p.ln2_b);
        let h = kernels::add_row(&f.matmul(&p.w_ff1), &p.b_ff1).map(kernels::gelu);
        x.add(&kernels::add_row(&h.matmul(&p.w_ff2), &p.b_ff2))
    }

    /// Applies blocks `from..to`; `record` receives each block output.
    pub(crate) fn blocks(
        &self,
        mut x: Tensor,
        segs: &Segments,
        from: usize,
        to: usize,
        record: &mut Vec<Tensor>,
    ) -> Tensor {
        for l in from..to {
            x = self.block(l, &x, segs);
            record.push(x.clone());
        }
        x
    }

    pub(crate) fn logits(&self, x: &Tensor) -> Tensor {
        let (f, _) = kernels::layer_norm(x, &self.lnf_g, &self.lnf_b);
        f.matmul(&self.head)
    }

    pub fn forward_with_trace(&self, tokens: &[usize]) -> Result<HiddenTrace> {
        let (x, segs) = self.embed(&[tokens])?;
        let mut hidden = vec![x.clone()];
        let x = self.blocks(x, &segs, 0, self.n_layers(), &mut hidden);
        let logits = self.logits(&x);
        finite(&logits)?;
        Ok(HiddenTrace { hidden, logits })
    }

    /// Forward pass with the state at `(l*, p*)` replaced by `edit(h)`.
    pub fn forward_with_edit(
        &self,
        tokens: &[usize],
        site: &InjectionSite,
        edit: EditFn,
    ) -> Result<(Tensor, HiddenTrace)> {
        site.validate(self.n_layers())?;
        let p = site.resolve(tokens.len())?;
        let (x, segs) = self.embed(&[tokens])?;
        let mut hidden = vec![x.clone()];
        let mut x = self.blocks(x, &segs, 0, site.layer, &mut hidden);
        let edited = edit(x.row(p));
        if edited.len() != self.d_model() {
            return Err(MariError::Dimension {
                expected: self.d_model(),
                got: edited.len(),
            });
        }
        x.row_mut(p).copy_from_slice(&edited);
        *hidden.last_mut().unwrap() = x.clone();
        let x = self.blocks(x, &segs, site.layer, self.n_layers(), &mut hidden);
        let logits = self.logits(&x);
        finite(&logits)?;
        Ok((logits.clone(), HiddenTrace { hidden, logits }))
    }

    /// States at the site layer for each `(sequence, prompt length)` pair.
    pub fn prefix(
        &self,
        seqs: &[Vec<usize>],
        prompt_lens: &[usize],
        site: &InjectionSite,
    ) -> Result<Prefix> {
        site.validate(self.n_layers())?;
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let (x, segs) = self.embed(&refs)?;
        let mut site_rows = Vec::with_capacity(seqs.len());
        for ((start, len), &plen) in segs.starts().into_iter().zip(&segs.lens).zip(prompt_lens) {
            let p = site.resolve(plen.min(*len))?;
            site_rows.push(start + p);
        }
        let states = self.blocks(x, &segs, 0, site.layer, &mut Vec::new());
        Ok(Prefix {
            segs,
            layer: site.layer,
            states,
            site_rows,
        })
    }

    /// Runs the blocks above the site layer from `states` (a possibly edited
    /// copy of `prefix.states`). Returns the packed states for layers
    /// `l*..=L`, the first being `states` itself.
    pub fn resume(&self, prefix: &Prefix, states: Tensor) -> Vec<Tensor> {
        let mut out = vec![states.clone()];
        self.blocks(
            states,
            &prefix.segs,
            prefix.layer,
            self.n_layers(),
            &mut out,
        );
        out
    }

    /// Copy of the prefix states with each site row replaced by `edit(seq, h)`.
    pub fn edited_states(
        &self,
        prefix: &Prefix,
        edit: &dyn Fn(usize, &[f64]) -> Vec<f64>,
    ) -> Result<Tensor> {
        let mut states = prefix.states.clone();
        for (s, &row) in prefix.site_rows.iter().enumerate() {
            let e = edit(s, states.row(row));
            if e.len() != self.d_model() {
                return Err(MariError::Dimension {
                    expected: self.d_model(),
                    got: e.len(),
                });
            }
            states.row_mut(row).copy_from_slice(&e);
        }
        Ok(states)
    }

    /// Sequence log-likelihood of each option after the prompt.
    ///
    /// `z_j = Σ_t log p(option_j[t] | prompt, option_j[..t])` with the edit (if
    /// any) applied at the site throughout.
    pub fn option_scores(
        &self,
        edit: Option<EditFn>,
        prompt: &[usize],
        options: &[Vec<usize>],
        site: &InjectionSite,
    ) -> Result<Vec<f64>> {
        Ok(self
            .option_scores_batch(&[(prompt, options)], site, &|_, h| match edit {
                Some(f) => f(h),
                None => h.to_vec(),
            })?
            .remove(0))
    }

    /// Option scores for many items in one packed pass. `edit(i, h)` edits item `i`.
    pub fn option_scores_batch(
        &self,
        items: &[(&[usize], &[Vec<usize>])],
        site: &InjectionSite,
        edit: &dyn Fn(usize, &[f64]) -> Vec<f64>,
    ) -> Result<Vec<Vec<f64>>> {
        let layout = option_sequences(items)?;
        let prefix = self.prefix(&layout.seqs, &layout.prompt_lens, site)?;
        let states = self.edited_states(&prefix, &|s, h| edit(layout.roles[s].item(), h))?;
        let top = self.resume(&prefix, states).pop().unwrap();
        self.score_from_top(items.len(), &prefix, &top, &layout)
    }

    pub(crate) fn score_from_top(
        &self,
        n_items: usize,
        prefix: &Prefix,
        top: &Tensor,
        layout: &OptionLayout,
    ) -> Result<Vec<Vec<f64>>> {
        let starts = prefix.segs.starts();
        let mut rows = Vec::new();
        for (s, role) in layout.roles.iter().enumerate() {
            let base = starts[s] + layout.prompt_lens[s] - 1;
            match role {
                SeqRole::Single { .. } => rows.push(base),
                SeqRole::Multi { tokens, .. } => rows.extend((0..tokens.len()).map(|t| base + t)),
            }
        }
        let lp = kernels::log_softmax_rows(&self.logits(&top.gather_rows(&rows)));
        finite(&lp)?;
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); n_items];
        let mut k = 0;
        for role in &layout.roles {
            match role {
                SeqRole::Single { item, tokens } => {
                    out[*item] = tokens.iter().map(|&t| lp.get(k, t)).collect();
                    k += 1;
                }
                SeqRole::Multi {
                    item,
                    option,
                    tokens,
                } => {
                    if out[*item].len() <= *option {
                        out[*item].resize(option + 1, 0.0);
                    }
                    let mut z = 0.0;
                    for &t in tokens {
                        z += lp.get(k, t);
                        k += 1;
                    }
                    out[*item][*option] = z;
                }
            }
        }
        Ok(out)
    }

    /// Greedy continuation under an optional edit at the prompt's site.
    ///
    /// Ties go to the lowest token id. Returns the tokens and every step's
    /// next-token distribution.
    pub fn greedy_decode(
        &self,
        edit: Option<EditFn>,
        prompt: &[usize],
        steps: usize,
        site: &InjectionSite,
    ) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        if steps == 0 {
            return Err(MariError::Contract(
                "greedy_decode needs at least one step".into(),
            ));
        }
        if prompt.len() + steps - 1 > self.config.max_context {
            return Err(MariError::ContextOverflow {
                len: prompt.len() + steps - 1,
                max: self.config.max_context,
            });
        }
        let identity = |h: &[f64]| h.to_vec();
        let edit = edit.unwrap_or(&identity);
        let site = InjectionSite {
            position: PositionRule::Index(site.resolve(prompt.len())?),
            ..*site
        };
        let mut seq = prompt.to_vec();
        let mut tokens = Vec::with_capacity(steps);
        let mut dists = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (logits, _) = self.forward_with_edit(&seq, &site, edit)?;
            let dist = kernels::softmax_row(logits.row(logits.rows() - 1));
            let next = stats::argmax(&dist);
            tokens.push(next);
            dists.push(dist);
            seq.push(next);
        }
        Ok((tokens, dists))
    }

    /// Registers parameters on `tape`. Blocks below `from_block` and the
    /// embeddings are skipped when `from_block > 0`.
    pub fn tape_weights(&self, tape: &mut Tape, trainable: bool, from_block: usize) -> TapeWeights {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let (tok_emb, pos_emb) = if from_block == 0 {
            (Some(reg(&self.tok_emb)), Some(reg(&self.pos_emb)))
        } else {
            (None, None)
        };
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (i >= from_block).then(|| l.tensors().map(|t| reg(t))))
            .collect();
        TapeWeights {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: reg(&self.lnf_g),
            lnf_b: reg(&self.lnf_b),
            head: reg(&self.head),
        }
    }

    pub fn tape_embed(
        &self,
        tape: &mut Tape,
        w: &TapeWeights,
        seqs: &[&[usize]],
    ) -> Result<(Var, Segments)> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let segs = Segments {
            lens: seqs.iter().map(|s| s.len()).collect(),
        };
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let tok = tape.embed(w.tok_emb.expect("embeddings registered"), &ids);
        let pos = tape.embed(w.pos_emb.expect("embeddings registered"), &segs.positions());
        Ok((tape.add(tok, pos), segs))
    }

    pub fn tape_blocks(
        &self,
        tape: &mut Tape,
        w: &TapeWeights,
        mut x: Var,
        segs: &Segments,
        from: usize,
        to: usize,
    ) -> Var {
        for l in from..to {
            let [ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2] =
                w.layers[l].expect("layer registered");
            let a = tape.layer_norm(x, ln1_g, ln1_b);
            let qkv = tape.matmul(a, w_qkv);
            let qkv = tape.add_row(qkv, b_qkv);
            let att = tape.attention(qkv, segs, self.config.n_heads);
            let proj = tape.matmul(att, w_o);
            let proj = tape.add_row(proj, b_o);
            x = tape.add(x, proj);
            let f = tape.layer_norm(x, ln2_g, ln2_b);
            let h = tape.matmul(f, w_ff1);
            let h = tape.add_row(h, b_ff1);
            let h = tape.gelu(h);
            let o = tape.matmul(h, w_ff2);
            let o = tape.add_row(o, b_ff2);
            x = tape.add(x, o);
        }
        x
    }

    pub fn tape_logits(&self, tape: &mut Tape, w: &TapeWeights, x: Var) -> Var {
        let f = tape.layer_norm(x, w.lnf_g, w.lnf_b);
        tape.matmul(f, w.head)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum SeqRole {
    /// Every option is one token: all are scored from the prompt's last row.
    Single { item: usize, tokens: Vec<usize> },
    /// One sequence per option, scored by teacher forcing.
    Multi {
        item: usize,
        option: usize,
        tokens: Vec<usize>,
    },
}

impl SeqRole {
    pub fn item(&self) -> usize {
        match self {
            SeqRole::Single { item, .. } | SeqRole::Multi { item, .. } => *item,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct OptionLayout {
    pub seqs: Vec<Vec<usize>>,
    pub prompt_lens: Vec<usize>,
    pub roles: Vec<SeqRole>,
}

pub(crate) fn option_sequences(items: &[(&[usize], &[Vec<usize>])]) -> Result<OptionLayout> {
    let mut layout = OptionLayout {
        seqs: Vec::new(),
        prompt_lens: Vec::new(),
        roles: Vec::new(),
    };
    for (item, (prompt, options)) in items.iter().enumerate() {
        if options.len() < 2 {
            return Err(MariError::Contract(
                "option scoring needs at least two options".into(),
            ));
        }
        if options.iter().any(|o| o.is_empty()) {
            return Err(MariError::Contract("empty option".into()));
        }
        if options.iter().all(|o| o.len() == 1) {
            layout.seqs.push(prompt.to_vec());
            layout.prompt_lens.push(prompt.len());
            layout.roles.push(SeqRole::Single {
                item,
                tokens: options.iter().map(|o| o[0]).collect(),
            });
            continue;
        }
        for (option, o) in options.iter().enumerate() {
            let mut s = prompt.to_vec();
            s.extend_from_slice(&o[..o.len() - 1]);
            layout.seqs.push(s);
            layout.prompt_lens.push(prompt.len());
            layout.roles.push(SeqRole::Multi {
                item,
                option,
                tokens: o.clone(),
            });
        }
    }
    Ok(layout)
}

fn finite(t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(MariError::NonFinite("backbone logits".into()))
    }
}
