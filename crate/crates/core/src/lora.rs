//! Low-rank adapters, expert sets, merging, and per-stage trainable
//! parameter policies.
//!
//! An adapter on a weight `W` (`d_out × d_in`) holds `A` (`r × d_in`) and
//! `B` (`d_out × r`) and contributes `(alpha / r) · B·A`. Adapters start
//! with `B = 0`, so a fresh expert leaves every output unchanged.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::mole::Router;
use crate::numerics::{matmul, Graph, ParamHost, ParamStore, Real, SeqLayout, Tensor, Trainable, Var};
use crate::transformer::INIT_STD;

/// Which adapters a forward pass applies.
pub enum Adapters<'a, T> {
    None,
    Single(&'a Expert<T>),
    /// Per-sequence gated sum of expert deltas; `gates` is `[batch, K]`.
    Mixture {
        experts: &'a [Expert<T>],
        gates: Var,
        layout: Arc<SeqLayout>,
    },
}

/// A named set of adapters, one per adaptable matrix of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T = f32> {
    pub name: String,
    pub rank: usize,
    pub alpha: f64,
    /// `{target}.lora_a` and `{target}.lora_b` for every target.
    pub params: ParamStore<T>,
}

impl<T: Real> Expert<T> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn prefix(&self) -> String {
        format!("expert/{}", self.name)
    }

    pub fn qualified_names(&self) -> Vec<String> {
        let p = self.prefix();
        self.params.names().map(|n| format!("{p}/{n}")).collect()
    }

    pub fn targets(&self) -> Vec<String> {
        self.params
            .names()
            .filter_map(|n| n.strip_suffix(".lora_a"))
            .map(str::to_string)
            .collect()
    }

    pub fn a(&self, target: &str) -> Result<&Tensor<T>> {
        self.params.get(&format!("{target}.lora_a"))
    }

    pub fn b(&self, target: &str) -> Result<&Tensor<T>> {
        self.params.get(&format!("{target}.lora_b"))
    }

    /// `(alpha/r) · (x·Aᵀ)·Bᵀ` recorded in `g`.
    pub(crate) fn delta(&self, g: &mut Graph<T>, x: Var, target: &str) -> Result<Var> {
        let prefix = self.prefix();
        let a = g.param(&format!("{prefix}/{target}.lora_a"), self.a(target)?);
        let b = g.param(&format!("{prefix}/{target}.lora_b"), self.b(target)?);
        let xa = g.linear(x, a)?;
        let xab = g.linear(xa, b)?;
        Ok(g.scale(xab, T::from_f64(self.scale())))
    }

    /// Dense `(alpha/r) · B·A` for one target.
    pub fn dense_delta(&self, target: &str) -> Result<Tensor<T>> {
        let ba = matmul(self.b(target)?, self.a(target)?)?;
        let s = T::from_f64(self.scale());
        Ok(Tensor::from_fn(ba.shape(), |i| ba.data()[i] * s))
    }

    pub fn cast<U: Real>(&self) -> Expert<U> {
        Expert {
            name: self.name.clone(),
            rank: self.rank,
            alpha: self.alpha,
            params: self.params.cast(),
        }
    }

    /// Copy under a new name, e.g. to continue training from another expert.
    pub fn renamed(&self, name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..self.clone()
        }
    }
}

impl<T: Real> ParamHost<T> for Expert<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let local = name.strip_prefix(&self.prefix())?.strip_prefix('/')?;
        self.params.get_mut(local)
    }
    fn has_param(&self, name: &str) -> bool {
        name.strip_prefix(&self.prefix())
            .and_then(|r| r.strip_prefix('/'))
            .is_some_and(|l| self.params.contains(l))
    }
}

/// Creates a zero-delta expert covering every adaptable matrix of `model`.
pub fn inject_lora<T: Real>(
    model: &LanguageModel<T>,
    name: &str,
    rank: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<Expert<T>> {
    if rank == 0 {
        return Err(Error::Contract("LoRA rank must be at least 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Contract("LoRA alpha must be positive".into()));
    }
    let mut params = ParamStore::new();
    for (target, d_out, d_in) in model.cfg.dims().lora_targets() {
        if rank > d_out.min(d_in) {
            return Err(Error::Contract(format!(
                "rank {rank} exceeds min(d_out, d_in) = {} of `{target}`",
                d_out.min(d_in)
            )));
        }
        params.insert(format!("{target}.lora_a"), Tensor::randn(&[rank, d_in], INIT_STD, rng));
        params.insert(format!("{target}.lora_b"), Tensor::zeros(&[d_out, rank]));
    }
    Ok(Expert {
        name: name.to_string(),
        rank,
        alpha,
        params,
    })
}

/// Folds an expert into the dense weights: `W ← W + (alpha/r)·B·A`.
pub fn merge_lora<T: Real>(model: &LanguageModel<T>, expert: &Expert<T>) -> Result<LanguageModel<T>> {
    if model.merged_experts().iter().any(|n| n == &expert.name) {
        return Err(Error::Contract(format!(
            "expert `{}` is already merged into this model; inject a new expert to merge again",
            expert.name
        )));
    }
    let mut out = model.clone();
    for target in expert.targets() {
        let delta = expert.dense_delta(&target)?;
        let w = out
            .params
            .get_mut(&target)
            .ok_or_else(|| Error::Contract(format!("model has no matrix `{target}`")))?;
        if w.shape() != delta.shape() {
            return Err(Error::Shape(format!(
                "`{target}`: weight {:?} vs delta {:?}",
                w.shape(),
                delta.shape()
            )));
        }
        for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
            *wv += *dv;
        }
    }
    out.mark_merged(&expert.name);
    Ok(out)
}

/// The set of qualified parameter names one training stage may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainablePolicy {
    pub stage: u8,
    pub names: BTreeSet<String>,
}

impl TrainablePolicy {
    pub fn new(stage: u8, names: impl IntoIterator<Item = String>) -> Self {
        Self {
            stage,
            names: names.into_iter().collect(),
        }
    }

    /// Stage 0: the whole base model.
    pub fn pretrain<T: Real>(base: &LanguageModel<T>) -> Self {
        Self::new(0, base.qualified_names())
    }

    /// Stage 1: the input embedding tables (token and position), the
    /// prediction head, and the expert's adapters.
    pub fn stage1<T: Real>(expert: &Expert<T>) -> Self {
        let mut names = expert.qualified_names();
        names.push("lm/tok_emb".into());
        names.push("lm/pos_emb".into());
        names.push("lm/head".into());
        Self::new(1, names)
    }

    /// Stage 2: adapters of the expert being trained, nothing else.
    pub fn stage2<T: Real>(expert: &Expert<T>) -> Self {
        Self::new(2, expert.qualified_names())
    }

    /// Stage 3: router parameters only.
    pub fn stage3<T: Real>(router: &Router<T>) -> Self {
        Self::new(3, router.qualified_names())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }
}

/// Graph policy for a validated [`TrainablePolicy`].
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub stage: u8,
    pub trainable: Trainable,
}

/// Checks that every name in `policy` exists in `host`.
pub fn apply_policy<T: Real>(host: &impl ParamHost<T>, policy: &TrainablePolicy) -> Result<TrainingView> {
    let unknown: Vec<String> = policy
        .names
        .iter()
        .filter(|n| !host.has_param(n))
        .map(|n| format!("unknown parameter `{n}` in stage-{} policy", policy.stage))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Config(unknown));
    }
    Ok(TrainingView {
        stage: policy.stage,
        trainable: Trainable::Only(policy.names.iter().cloned().collect()),
    })
}

/// Several parameter hosts addressed as one.
pub struct HostSet<'a, T>(pub Vec<&'a mut dyn ParamHost<T>>);

impl<T: Real> ParamHost<T> for HostSet<'_, T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        for h in self.0.iter_mut() {
            if h.has_param(name) {
                return h.param_mut(name);
            }
        }
        None
    }
    fn has_param(&self, name: &str) -> bool {
        self.0.iter().any(|h| h.has_param(name))
    }
}
