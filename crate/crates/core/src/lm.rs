//! Decoder-only causal language model over the unified vocabulary,
//! vocabulary extension, and autoregressive generation.
//!
//! Position ids restart at the first `<assistant>` token: prompt tokens use
//! rows `[0, max_seq_len)` of the position table and response tokens use
//! rows `[max_seq_len, 2·max_seq_len)`, counted from the `<assistant>` id.
//! A response token therefore sees the same position id for the same
//! offset into the answer regardless of prompt length, which makes
//! monotone alignments (text → speech frames) easy to learn.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{Adapters, Expert};
use crate::numerics::{argmax, Graph, ParamHost, ParamStore, Real, SeqLayout, Tensor, Var};
use crate::transformer::{init_blocks, run_blocks, BlockDims, Scope, INIT_STD};
use crate::vocab::{UnifiedVocab, ASSISTANT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab: UnifiedVocab,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            vocab: UnifiedVocab::default(),
        }
    }
}

impl LmConfig {
    pub fn dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
        }
    }

    pub fn problems(&self, path: &str) -> Vec<String> {
        let mut out = self.dims().problems(path);
        if self.max_seq_len == 0 {
            out.push(format!("{path}.max_seq_len must be positive"));
        }
        out
    }
}

/// Position-table row of every token in `tokens`.
pub fn position_ids(tokens: &[u32], max_seq_len: usize) -> Vec<usize> {
    let mut answer_start = None;
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if answer_start.is_none() && t == ASSISTANT {
                answer_start = Some(i);
            }
            match answer_start {
                Some(a) => max_seq_len + (i - a),
                None => i,
            }
        })
        .collect()
}

/// The routing prompt of a sequence: everything up to and including the
/// first `<assistant>` id.
pub fn prompt_part(tokens: &[u32]) -> &[u32] {
    match tokens.iter().position(|&t| t == ASSISTANT) {
        Some(i) => &tokens[..=i],
        None => tokens,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<T = f32> {
    pub cfg: LmConfig,
    /// Local names (`tok_emb`, `layers.0.wq`, ...); qualified as `lm/<name>`.
    pub params: ParamStore<T>,
    merged: Vec<String>,
}

pub const LM_PREFIX: &str = "lm";

impl<T: Real> LanguageModel<T> {
    /// A fresh model over the text vocabulary only.
    pub fn new(cfg: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        let problems = cfg.problems("lm");
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (v, d) = (cfg.vocab.n_text as usize, cfg.d_model);
        let mut params = ParamStore::new();
        params.insert("tok_emb", Tensor::randn(&[v, d], INIT_STD, rng));
        params.insert("pos_emb", Tensor::randn(&[2 * cfg.max_seq_len, d], INIT_STD, rng));
        init_blocks(&mut params, &cfg.dims(), rng);
        params.insert("final_norm", Tensor::from_fn(&[d], |_| T::one()));
        params.insert("head", Tensor::randn(&[v, d], INIT_STD, rng));
        Ok(Self {
            cfg,
            params,
            merged: Vec::new(),
        })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(cfg: LmConfig, params: ParamStore<T>, merged: Vec<String>) -> Result<Self> {
        let d = cfg.d_model;
        let v = params.get("tok_emb")?.shape().first().copied().unwrap_or(0);
        let mut want = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![2 * cfg.max_seq_len, d]),
            ("final_norm".to_string(), vec![d]),
            ("head".to_string(), vec![v, d]),
        ];
        for l in 0..cfg.n_layers {
            want.push((format!("layers.{l}.attn_norm"), vec![d]));
            want.push((format!("layers.{l}.ffn_norm"), vec![d]));
        }
        for (name, d_out, d_in) in cfg.dims().lora_targets() {
            want.push((name, vec![d_out, d_in]));
        }
        for (name, shape) in &want {
            let got = params.get(name)?.shape();
            if got != shape.as_slice() {
                return Err(Error::Shape(format!("`lm/{name}` is {got:?}, expected {shape:?}")));
            }
        }
        if params.len() != want.len() {
            return Err(Error::Shape(format!(
                "language model has {} tensors, expected {}",
                params.len(),
                want.len()
            )));
        }
        Ok(Self { cfg, params, merged })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get("tok_emb").map(|t| t.shape()[0]).unwrap_or(0)
    }

    pub fn merged_experts(&self) -> &[String] {
        &self.merged
    }

    pub(crate) fn mark_merged(&mut self, name: &str) {
        self.merged.push(name.to_string());
    }

    pub fn qualified_names(&self) -> Vec<String> {
        self.params.names().map(|n| format!("{LM_PREFIX}/{n}")).collect()
    }

    pub fn cast<U: Real>(&self) -> LanguageModel<U> {
        LanguageModel {
            cfg: self.cfg,
            params: self.params.cast(),
            merged: self.merged.clone(),
        }
    }

    /// Appends `n_new` rows to the embedding and the head, drawn from
    /// N(0, init_scale²). Existing values are untouched.
    pub fn extend_vocabulary(&self, n_new: usize, init_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if n_new == 0 {
            return Err(Error::Contract("extend_vocabulary needs n_new >= 1".into()));
        }
        let mut out = self.clone();
        for name in ["tok_emb", "head"] {
            let old = self.params.get(name)?;
            let (v, d) = old.dims2()?;
            let fresh = Tensor::<T>::randn(&[n_new, d], init_scale, rng);
            let mut data = old.data().to_vec();
            data.extend_from_slice(fresh.data());
            out.params.insert(name, Tensor::new(vec![v + n_new, d], data)?);
        }
        Ok(out)
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        let v = self.vocab_size();
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }

    /// Records the forward pass of a packed batch; returns `[rows, V]`
    /// logits and the packing layout.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        seqs: &[&[u32]],
        adapters: &Adapters<'_, T>,
    ) -> Result<Var> {
        let layout = self.layout(seqs)?;
        self.forward_with_layout(g, seqs, &layout, adapters)
    }

    pub fn layout(&self, seqs: &[&[u32]]) -> Result<Arc<SeqLayout>> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        Ok(Arc::new(SeqLayout::causal(&lens)?))
    }

    pub(crate) fn forward_with_layout(
        &self,
        g: &mut Graph<T>,
        seqs: &[&[u32]],
        layout: &Arc<SeqLayout>,
        adapters: &Adapters<'_, T>,
    ) -> Result<Var> {
        let scope = Scope {
            prefix: LM_PREFIX,
            store: &self.params,
        };
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let pos: Vec<usize> = seqs
            .iter()
            .flat_map(|s| position_ids(s, self.cfg.max_seq_len))
            .collect();
        let tok = scope.p(g, "tok_emb")?;
        let pos_table = scope.p(g, "pos_emb")?;
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(pos_table, &pos)?;
        let x = g.add(te, pe)?;
        let x = run_blocks(g, &scope, &self.cfg.dims(), x, layout, adapters)?;
        let norm = scope.p(g, "final_norm")?;
        let x = g.rms_norm(x, norm)?;
        let head = scope.p(g, "head")?;
        g.linear(x, head)
    }

    /// Logits `[T, V]` of one sequence without adapters.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        self.batch_logits(&[tokens])
    }
}

impl<T: Real> ParamHost<T> for LanguageModel<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let local = name.strip_prefix(LM_PREFIX)?.strip_prefix('/')?;
        self.params.get_mut(local)
    }
    fn has_param(&self, name: &str) -> bool {
        name.strip_prefix(LM_PREFIX)
            .and_then(|r| r.strip_prefix('/'))
            .is_some_and(|l| self.params.contains(l))
    }
}

/// Anything that maps a packed batch of token sequences to next-token
/// logits: the base model, a model with one expert, or a mixture.
pub trait TokenModel<T: Real> {
    fn base(&self) -> &LanguageModel<T>;

    /// `[rows, V]` logits for the packed batch.
    fn forward(&self, g: &mut Graph<T>, seqs: &[&[u32]]) -> Result<Var>;

    fn vocab_size(&self) -> usize {
        self.base().vocab_size()
    }

    fn batch_logits(&self, seqs: &[&[u32]]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, seqs)?;
        let t = g.value(out).clone();
        if !t.all_finite() {
            return Err(Error::Numeric {
                param: "logits".into(),
                detail: "non-finite value in forward pass".into(),
            });
        }
        Ok(t)
    }
}

impl<T: Real> TokenModel<T> for LanguageModel<T> {
    fn base(&self) -> &LanguageModel<T> {
        self
    }
    fn forward(&self, g: &mut Graph<T>, seqs: &[&[u32]]) -> Result<Var> {
        self.forward_graph(g, seqs, &Adapters::None)
    }
}

/// A base model with one expert applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLm<T = f32> {
    pub base: LanguageModel<T>,
    pub expert: Expert<T>,
}

impl<T: Real> TokenModel<T> for AdaptedLm<T> {
    fn base(&self) -> &LanguageModel<T> {
        &self.base
    }
    fn forward(&self, g: &mut Graph<T>, seqs: &[&[u32]]) -> Result<Var> {
        self.base.forward_graph(g, seqs, &Adapters::Single(&self.expert))
    }
}

impl<T: Real> ParamHost<T> for AdaptedLm<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if self.base.has_param(name) {
            self.base.param_mut(name)
        } else {
            self.expert.param_mut(name)
        }
    }
    fn has_param(&self, name: &str) -> bool {
        self.base.has_param(name) || self.expert.has_param(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub sampling: Sampling,
    pub stop_ids: BTreeSet<u32>,
    pub allowed_ids: Option<BTreeSet<u32>>,
}

impl GenerateOptions {
    pub fn greedy(max_new: usize, stop_ids: impl IntoIterator<Item = u32>) -> Self {
        Self {
            max_new,
            sampling: Sampling::Greedy,
            stop_ids: stop_ids.into_iter().collect(),
            allowed_ids: None,
        }
    }

    pub fn allowing(mut self, ids: impl IntoIterator<Item = u32>) -> Self {
        self.allowed_ids = Some(ids.into_iter().collect());
        self
    }
}

/// Continues one prompt; the result excludes the prompt and includes the
/// stop id when one was emitted.
pub fn generate<T: Real, M: TokenModel<T> + ?Sized>(
    model: &M,
    prompt: &[u32],
    opts: &GenerateOptions,
    rng: &mut impl Rng,
) -> Result<Vec<u32>> {
    Ok(generate_batch(model, &[prompt.to_vec()], opts, rng)?.remove(0))
}

/// Continues several prompts in lockstep. Each sequence stops on its own
/// at a stop id, at `max_new` new tokens, or at the context limit.
pub fn generate_batch<T: Real, M: TokenModel<T> + ?Sized>(
    model: &M,
    prompts: &[Vec<u32>],
    opts: &GenerateOptions,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<u32>>> {
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::Contract("generation needs a non-empty prompt".into()));
    }
    let v = model.vocab_size();
    let allowed: Option<Vec<usize>> = opts
        .allowed_ids
        .as_ref()
        .map(|s| s.iter().map(|&i| i as usize).filter(|&i| i < v).collect());
    if allowed.as_ref().is_some_and(|a| a.is_empty()) {
        return Err(Error::Contract("no allowed id lies inside the vocabulary".into()));
    }
    let max_len = model.base().cfg.max_seq_len;
    let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
    let mut outs: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
    let mut live: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..opts.max_new {
        live.retain(|&i| seqs[i].len() < max_len);
        if live.is_empty() {
            break;
        }
        let batch: Vec<&[u32]> = live.iter().map(|&i| seqs[i].as_slice()).collect();
        let logits = model.batch_logits(&batch)?;
        let mut row_end = 0;
        let mut finished = Vec::new();
        for &i in &live {
            row_end += seqs[i].len();
            let row = logits.row(row_end - 1);
            let next = pick(row, allowed.as_deref(), &opts.sampling, rng)? as u32;
            seqs[i].push(next);
            outs[i].push(next);
            if opts.stop_ids.contains(&next) {
                finished.push(i);
            }
        }
        live.retain(|i| !finished.contains(i));
    }
    Ok(outs)
}

fn pick<T: Real>(row: &[T], allowed: Option<&[usize]>, sampling: &Sampling, rng: &mut impl Rng) -> Result<usize> {
    let candidates: Vec<(usize, f64)> = match allowed {
        Some(ids) => ids.iter().map(|&i| (i, row[i].as_f64())).collect(),
        None => row.iter().enumerate().map(|(i, z)| (i, z.as_f64())).collect(),
    };
    match sampling {
        Sampling::Greedy => {
            let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
            Ok(candidates[argmax(&scores)].0)
        }
        Sampling::TopK { k, temperature } => {
            if *k == 0 || !(*temperature > 0.0) {
                return Err(Error::Contract("top-k sampling needs k >= 1 and temperature > 0".into()));
            }
            let mut sorted = candidates;
            // Stable sort keeps the lowest id first among equal scores.
            sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
            sorted.truncate(*k);
            let top = sorted[0].1;
            let weights: Vec<f64> = sorted.iter().map(|c| ((c.1 - top) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (c, w) in sorted.iter().zip(&weights) {
                if u < *w {
                    return Ok(c.0);
                }
                u -= w;
            }
            Ok(sorted[0].0)
        }
    }
}
