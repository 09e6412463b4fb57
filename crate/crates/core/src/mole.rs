//! Mixture of LoRA experts: a sequence-level router over frozen experts.
//!
//! The router reads the RMS-normalized mean of the base token embeddings
//! of the prompt (through the first `<assistant>`), so gates exist before
//! any expert runs and stay fixed for every generated position. The fused
//! model adds `Σₖ gₖ·Δₖ` to each adapted weight.

use rand::Rng;

use crate::data::{PromptedSample, TaskKind};
use crate::error::{Error, Result};
use crate::lm::{prompt_part, LanguageModel, TokenModel};
use crate::lora::{Adapters, Expert};
use crate::numerics::{argmax, Graph, ParamHost, ParamStore, Real, Tensor, Var};
use crate::train::{train_model, Source, TrainSpec};

pub const ROUTER_PREFIX: &str = "router";
pub const ROUTER_HIDDEN: usize = 64;
const FEATURE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Router<T = f32> {
    /// `w1 [64, d]`, `b1 [64]`, `w2 [K, 64]`, `b2 [K]`.
    pub params: ParamStore<T>,
}

impl<T: Real> Router<T> {
    pub fn new(d_model: usize, n_experts: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Contract("router needs at least one expert".into()));
        }
        let mut params = ParamStore::new();
        params.insert("w1", Tensor::randn(&[ROUTER_HIDDEN, d_model], 1.0 / (d_model as f64).sqrt(), rng));
        params.insert("b1", Tensor::zeros(&[ROUTER_HIDDEN]));
        params.insert("w2", Tensor::randn(&[n_experts, ROUTER_HIDDEN], 0.02, rng));
        params.insert("b2", Tensor::zeros(&[n_experts]));
        Ok(Self { params })
    }

    pub fn n_experts(&self) -> usize {
        self.params.get("b2").map(|t| t.len()).unwrap_or(0)
    }

    pub fn qualified_names(&self) -> Vec<String> {
        self.params.names().map(|n| format!("{ROUTER_PREFIX}/{n}")).collect()
    }

    pub fn cast<U: Real>(&self) -> Router<U> {
        Router {
            params: self.params.cast(),
        }
    }

    /// Gate matrix `[B, K]` for `[B, d]` features.
    fn gates(&self, g: &mut Graph<T>, features: Tensor<T>) -> Result<Var> {
        let p = |g: &mut Graph<T>, n: &str| -> Result<Var> {
            Ok(g.param(&format!("{ROUTER_PREFIX}/{n}"), self.params.get(n)?))
        };
        let (w1, b1, w2, b2) = (p(g, "w1")?, p(g, "b1")?, p(g, "w2")?, p(g, "b2")?);
        let x = g.constant(features);
        let h = g.linear(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let z = g.linear(h, w2)?;
        let z = g.add_row(z, b2)?;
        g.softmax_rows(z)
    }
}

impl<T: Real> ParamHost<T> for Router<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let local = name.strip_prefix(ROUTER_PREFIX)?.strip_prefix('/')?;
        self.params.get_mut(local)
    }
    fn has_param(&self, name: &str) -> bool {
        name.strip_prefix(ROUTER_PREFIX)
            .and_then(|r| r.strip_prefix('/'))
            .is_some_and(|l| self.params.contains(l))
    }
}

/// Router input of one sequence.
pub fn route_features<T: Real>(base: &LanguageModel<T>, tokens: &[u32]) -> Result<Vec<T>> {
    let prompt = prompt_part(tokens);
    base.check_tokens(prompt)?;
    let emb = base.params.get("tok_emb")?;
    let d = base.cfg.d_model;
    let mut mean = vec![0.0f64; d];
    for &t in prompt {
        for (m, v) in mean.iter_mut().zip(emb.row(t as usize)) {
            *m += v.as_f64();
        }
    }
    let n = prompt.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let rms = (mean.iter().map(|m| m * m).sum::<f64>() / d as f64 + FEATURE_EPS).sqrt();
    Ok(mean.into_iter().map(|m| T::from_f64(m / rms)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoleModel<T = f32> {
    pub base: LanguageModel<T>,
    pub experts: Vec<Expert<T>>,
    pub router: Router<T>,
    /// Replace soft gates by the one-hot argmax at forward time.
    pub hard: bool,
}

impl<T: Real> MoleModel<T> {
    pub fn new(base: LanguageModel<T>, experts: Vec<Expert<T>>, router: Router<T>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Contract("a mixture needs at least one expert".into()));
        }
        if router.n_experts() != experts.len() {
            return Err(Error::Contract(format!(
                "router has {} outputs for {} experts",
                router.n_experts(),
                experts.len()
            )));
        }
        Ok(Self {
            base,
            experts,
            router,
            hard: false,
        })
    }

    pub fn expert_index(&self, name: &str) -> Option<usize> {
        self.experts.iter().position(|e| e.name == name)
    }

    fn features(&self, seqs: &[&[u32]]) -> Result<Tensor<T>> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut data = Vec::with_capacity(seqs.len() * self.base.cfg.d_model);
        for s in seqs {
            data.extend(route_features(&self.base, s)?);
        }
        Tensor::new(vec![seqs.len(), self.base.cfg.d_model], data)
    }

    /// Gate vector of one request.
    pub fn route(&self, prompt: &[u32]) -> Result<Vec<f64>> {
        Ok(self.route_batch(&[prompt])?.remove(0))
    }

    pub fn route_batch(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let gates = self.router.gates(&mut g, self.features(prompts)?)?;
        let k = self.experts.len();
        Ok(g.value(gates).data().chunks(k).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }

    /// Forward pass under caller-supplied gates `[B, K]`.
    pub fn forward_with_gates(&self, g: &mut Graph<T>, seqs: &[&[u32]], gates: Var) -> Result<Var> {
        let layout = self.base.layout(seqs)?;
        self.base.forward_with_layout(
            g,
            seqs,
            &layout,
            &Adapters::Mixture {
                experts: &self.experts,
                gates,
                layout: layout.clone(),
            },
        )
    }
}

impl<T: Real> TokenModel<T> for MoleModel<T> {
    fn base(&self) -> &LanguageModel<T> {
        &self.base
    }

    fn forward(&self, g: &mut Graph<T>, seqs: &[&[u32]]) -> Result<Var> {
        let mut gates = self.router.gates(g, self.features(seqs)?)?;
        if self.hard {
            let k = self.experts.len();
            let soft = g.value(gates).clone();
            let mut one_hot = vec![T::zero(); soft.len()];
            for (row, out) in soft.data().chunks(k).zip(one_hot.chunks_mut(k)) {
                out[argmax(row)] = T::one();
            }
            gates = g.constant(Tensor::new(soft.shape().to_vec(), one_hot)?);
        }
        self.forward_with_gates(g, seqs, gates)
    }
}

impl<T: Real> ParamHost<T> for MoleModel<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if self.router.has_param(name) {
            return self.router.param_mut(name);
        }
        if self.base.has_param(name) {
            return self.base.param_mut(name);
        }
        self.experts.iter_mut().find(|e| e.has_param(name))?.param_mut(name)
    }
    fn has_param(&self, name: &str) -> bool {
        self.router.has_param(name) || self.base.has_param(name) || self.experts.iter().any(|e| e.has_param(name))
    }
}

/// Stage-3 outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterTraining {
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Trains only the router on mixed task data with the ordinary
/// next-token loss.
pub fn train_router(
    model: &mut MoleModel<f32>,
    sources: &[Source<'_>],
    spec: &TrainSpec,
    rng: &mut impl Rng,
    on_step: &mut dyn FnMut(&MoleModel<f32>, &crate::train::StepRecord) -> Result<()>,
) -> Result<RouterTraining> {
    let mut warnings = Vec::new();
    if model.experts.len() < 2 {
        warnings.push("router trained over fewer than two experts".to_string());
    }
    let kinds: std::collections::BTreeSet<TaskKind> = sources
        .iter()
        .filter(|s| s.weight > 0.0)
        .flat_map(|s| s.samples.iter().map(|x| x.kind))
        .collect();
    if kinds.len() < 2 {
        warnings.push("router data covers a single task; the router may collapse".to_string());
    }
    let losses = train_model(model, sources, spec, rng, on_step)?;
    Ok(RouterTraining { losses, warnings })
}

/// Fraction of samples whose largest gate belongs to the expert named
/// after the sample's task, and fraction whose gate mass on it is at
/// least `mass`.
pub fn routing_accuracy<T: Real>(model: &MoleModel<T>, samples: &[PromptedSample], mass: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Contract("routing accuracy over no samples".into()));
    }
    let (mut top, mut heavy) = (0usize, 0usize);
    for chunk in samples.chunks(64) {
        let prompts: Vec<&[u32]> = chunk.iter().map(|s| s.input.as_slice()).collect();
        for (s, gates) in chunk.iter().zip(model.route_batch(&prompts)?) {
            let want = model
                .expert_index(s.kind.name())
                .ok_or_else(|| Error::Contract(format!("no expert named `{}`", s.kind.name())))?;
            top += usize::from(argmax(&gates) == want);
            heavy += usize::from(gates[want] >= mass);
        }
    }
    let n = samples.len() as f64;
    Ok((top as f64 / n, heavy as f64 / n))
}
