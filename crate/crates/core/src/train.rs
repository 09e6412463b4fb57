//! Teacher-forced training loop shared by every LM stage.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::data::PromptedSample;
use crate::error::{Error, Result};
use crate::lm::TokenModel;
use crate::numerics::{adamw_step, clip_global_norm, AdamWConfig, AdamWState, Graph, ParamHost, Real, Trainable, Var};

/// One weighted source of training samples.
#[derive(Clone, Copy, Debug)]
pub struct Source<'a> {
    pub samples: &'a [PromptedSample],
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub opt: AdamWConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub trainable: Trainable,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Mean next-token loss over the target positions of a packed batch.
pub fn batch_loss<T: Real, M: TokenModel<T> + ?Sized>(
    model: &M,
    g: &mut Graph<T>,
    batch: &[&PromptedSample],
) -> Result<Var> {
    let seqs: Vec<Vec<u32>> = batch.iter().map(|s| s.sequence()).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let targets: Vec<Option<usize>> = batch.iter().flat_map(|s| s.loss_targets()).collect();
    let logits = model.forward(g, &refs)?;
    g.cross_entropy(logits, &targets)
}

/// Loss without recording gradients.
pub fn eval_loss<T: Real, M: TokenModel<T> + ?Sized>(model: &M, batch: &[&PromptedSample]) -> Result<f64> {
    let mut g = Graph::inference();
    let loss = batch_loss(model, &mut g, batch)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// Draws a batch: each slot picks a source by weight, then a sample
/// uniformly within it.
pub fn draw_batch<'a>(sources: &[Source<'a>], n: usize, rng: &mut impl Rng) -> Result<Vec<&'a PromptedSample>> {
    let live: Vec<&Source<'a>> = sources
        .iter()
        .filter(|s| s.weight > 0.0 && !s.samples.is_empty())
        .collect();
    if live.is_empty() {
        return Err(Error::Data("no non-empty training source".into()));
    }
    let total: f64 = live.iter().map(|s| s.weight).sum();
    (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut src = live[live.len() - 1];
            for s in &live {
                if u < s.weight {
                    src = s;
                    break;
                }
                u -= s.weight;
            }
            Ok(src.samples.choose(rng).expect("source is non-empty"))
        })
        .collect()
}

/// Runs `spec.steps` AdamW steps on `model`, updating only the parameters
/// `spec.trainable` admits. `on_step` sees every step's record.
pub fn train_model<M>(
    model: &mut M,
    sources: &[Source<'_>],
    spec: &TrainSpec,
    rng: &mut impl Rng,
    on_step: &mut dyn FnMut(&M, &StepRecord) -> Result<()>,
) -> Result<Vec<f64>>
where
    M: TokenModel<f32> + ParamHost<f32>,
{
    if spec.batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    if spec.steps > spec.opt.total_steps {
        return Err(Error::Contract(format!(
            "{} steps exceed the schedule length {}",
            spec.steps, spec.opt.total_steps
        )));
    }
    let mut state = AdamWState::new();
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let batch = draw_batch(sources, spec.batch_size, rng)?;
        let mut g = Graph::new(spec.trainable.clone());
        let loss = batch_loss(&*model, &mut g, &batch)?;
        g.backward(loss)?;
        let loss = g.value(loss).data()[0].as_f64();
        let mut grads = g.param_grads();
        drop(g);
        let grad_norm = clip_global_norm(&mut grads, spec.opt.clip_norm.unwrap_or(f64::INFINITY));
        let lr = adamw_step(&grads, model, &mut state, &spec.opt, step)?;
        losses.push(loss);
        on_step(
            model,
            &StepRecord {
                step,
                loss,
                lr,
                grad_norm,
            },
        )?;
    }
    Ok(losses)
}
