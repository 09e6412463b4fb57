//! Pre-norm decoder blocks shared by the main LM and the acoustic LM.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::Adapters;
use crate::numerics::{Graph, ParamStore, Real, SeqLayout, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl BlockDims {
    pub fn problems(&self, path: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                out.push(format!("{path}.{name} must be positive"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            out.push(format!("{path}.d_model must be divisible by n_heads"));
        }
        out
    }

    /// Adaptable weight matrices as `(name, d_out, d_in)`: all four
    /// attention projections and both feed-forward matrices per layer.
    pub fn lora_targets(&self) -> Vec<(String, usize, usize)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layers.{l}.{w}"), d, d));
            }
            out.push((format!("layers.{l}.w_up"), f, d));
            out.push((format!("layers.{l}.w_down"), d, f));
        }
        out
    }
}

pub(crate) fn init_blocks<T: Real>(store: &mut ParamStore<T>, dims: &BlockDims, rng: &mut impl Rng) {
    let (d, f) = (dims.d_model, dims.d_ff);
    let out_std = INIT_STD / (2.0 * dims.n_layers as f64).sqrt();
    for l in 0..dims.n_layers {
        store.insert(format!("layers.{l}.attn_norm"), Tensor::from_fn(&[d], |_| T::one()));
        for w in ["wq", "wk", "wv"] {
            store.insert(format!("layers.{l}.{w}"), Tensor::randn(&[d, d], INIT_STD, rng));
        }
        store.insert(format!("layers.{l}.wo"), Tensor::randn(&[d, d], out_std, rng));
        store.insert(format!("layers.{l}.ffn_norm"), Tensor::from_fn(&[d], |_| T::one()));
        store.insert(format!("layers.{l}.w_up"), Tensor::randn(&[f, d], INIT_STD, rng));
        store.insert(format!("layers.{l}.w_down"), Tensor::randn(&[d, f], out_std, rng));
    }
}

/// Binds a parameter store to its qualified-name prefix inside a graph.
pub(crate) struct Scope<'a, T> {
    pub prefix: &'a str,
    pub store: &'a ParamStore<T>,
}

impl<T: Real> Scope<'_, T> {
    pub fn p(&self, g: &mut Graph<T>, local: &str) -> Result<Var> {
        let t = self.store.get(local)?;
        Ok(g.param(&format!("{}/{local}", self.prefix), t))
    }
}

fn adapted_linear<T: Real>(
    g: &mut Graph<T>,
    scope: &Scope<'_, T>,
    x: Var,
    target: &str,
    adapters: &Adapters<'_, T>,
) -> Result<Var> {
    let w = scope.p(g, target)?;
    let base = g.linear(x, w)?;
    match adapters {
        Adapters::None => Ok(base),
        Adapters::Single(e) => {
            let d = e.delta(g, x, target)?;
            g.add(base, d)
        }
        Adapters::Mixture {
            experts,
            gates,
            layout,
        } => {
            let mut acc: Option<Var> = None;
            for (k, e) in experts.iter().enumerate() {
                let d = e.delta(g, x, target)?;
                let gd = g.gate_rows(d, *gates, k, layout)?;
                acc = Some(match acc {
                    None => gd,
                    Some(a) => g.add(a, gd)?,
                });
            }
            match acc {
                Some(mix) => g.add(base, mix),
                None => Ok(base),
            }
        }
    }
}

/// Runs every block over `x` (`[rows, d_model]`) and returns the
/// residual stream before the final norm.
pub(crate) fn run_blocks<T: Real>(
    g: &mut Graph<T>,
    scope: &Scope<'_, T>,
    dims: &BlockDims,
    mut x: Var,
    layout: &Arc<SeqLayout>,
    adapters: &Adapters<'_, T>,
) -> Result<Var> {
    if let Adapters::Mixture { experts, gates, .. } = adapters {
        let (b, k) = g.value(*gates).dims2()?;
        if k != experts.len() || b != layout.segments().len() {
            return Err(Error::Contract(format!(
                "gate matrix {b}x{k} for {} sequences and {} experts",
                layout.segments().len(),
                experts.len()
            )));
        }
    }
    for l in 0..dims.n_layers {
        let norm = scope.p(g, &format!("layers.{l}.attn_norm"))?;
        let h = g.rms_norm(x, norm)?;
        let q = adapted_linear(g, scope, h, &format!("layers.{l}.wq"), adapters)?;
        let k = adapted_linear(g, scope, h, &format!("layers.{l}.wk"), adapters)?;
        let v = adapted_linear(g, scope, h, &format!("layers.{l}.wv"), adapters)?;
        let a = g.attention(q, k, v, layout, dims.n_heads)?;
        let o = adapted_linear(g, scope, a, &format!("layers.{l}.wo"), adapters)?;
        x = g.add(x, o)?;

        let norm = scope.p(g, &format!("layers.{l}.ffn_norm"))?;
        let h = g.rms_norm(x, norm)?;
        let u = adapted_linear(g, scope, h, &format!("layers.{l}.w_up"), adapters)?;
        let u = g.gelu(u);
        let dn = adapted_linear(g, scope, u, &format!("layers.{l}.w_down"), adapters)?;
        x = g.add(x, dn)?;
    }
    Ok(x)
}
