//! Acoustic language model: semantic tokens in, multi-codebook acoustic
//! tokens out, decoded over a per-codebook delay pattern.
//!
//! The semantic sequence is a bidirectional prefix; the delayed acoustic
//! steps follow it causally. Step `t` takes the sum of the codebook
//! embeddings of step `t − 1` (a start id at `t = 0`) and predicts every
//! codebook of step `t` through its own head.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::AcousticGrid;
use crate::error::{Error, Result};
use crate::lora::Adapters;
use crate::numerics::{
    adamw_step, argmax, clip_global_norm, AdamWConfig, AdamWState, Graph, ParamHost, ParamStore, Real,
    SeqLayout, Tensor, Trainable, Var,
};
use crate::transformer::{init_blocks, run_blocks, BlockDims, Scope, INIT_STD};

pub const ACLM_PREFIX: &str = "aclm";

/// `S × (T + S − 1)` cells; `None` is the PAD id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DelayedGrid {
    pub cells: Vec<Vec<Option<u32>>>,
}

impl DelayedGrid {
    pub fn steps(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }
}

/// Shifts codebook `s` right by `s` steps.
pub fn apply_delay(grid: &AcousticGrid) -> DelayedGrid {
    let (s_n, t_n) = (grid.n_stages(), grid.frames());
    let steps = t_n + s_n - 1;
    let cells = (0..s_n)
        .map(|s| {
            (0..steps)
                .map(|t| (t >= s && t < s + t_n).then(|| grid.codes[s][t - s]))
                .collect()
        })
        .collect();
    DelayedGrid { cells }
}

/// Undoes [`apply_delay`], rejecting grids whose PAD cells are not exactly
/// the triangular margins.
pub fn invert_delay(d: &DelayedGrid) -> Result<AcousticGrid> {
    let s_n = d.cells.len();
    let fmt = |detail: String| Error::Format {
        record: "delayed grid".into(),
        detail,
    };
    if s_n == 0 {
        return Err(fmt("no codebook rows".into()));
    }
    let steps = d.steps();
    if d.cells.iter().any(|r| r.len() != steps) {
        return Err(fmt("rows differ in length".into()));
    }
    if steps + 1 < s_n {
        return Err(fmt(format!("{steps} steps cannot hold {s_n} delayed codebooks")));
    }
    let t_n = steps + 1 - s_n;
    let mut codes = vec![Vec::with_capacity(t_n); s_n];
    for (s, row) in d.cells.iter().enumerate() {
        for (t, cell) in row.iter().enumerate() {
            let inside = t >= s && t < s + t_n;
            match (inside, cell) {
                (true, Some(c)) => codes[s].push(*c),
                (false, None) => {}
                (true, None) => return Err(fmt(format!("PAD inside codebook {s} at step {t}"))),
                (false, Some(_)) => return Err(fmt(format!("code in the PAD margin of codebook {s} at step {t}"))),
            }
        }
    }
    AcousticGrid::new(codes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticLmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_stages: usize,
    pub codebook_size: usize,
    pub n_semantic: usize,
    /// Longest semantic sequence (frames) the position tables cover.
    pub max_frames: usize,
}

impl Default for AcousticLmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            n_stages: 4,
            codebook_size: 64,
            n_semantic: 64,
            max_frames: 64,
        }
    }
}

impl AcousticLmConfig {
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
        for (name, v) in [
            ("n_stages", self.n_stages),
            ("codebook_size", self.codebook_size),
            ("n_semantic", self.n_semantic),
            ("max_frames", self.max_frames),
        ] {
            if v == 0 {
                out.push(format!("{path}.{name} must be positive"));
            }
        }
        out
    }

    fn pad(&self) -> usize {
        self.codebook_size
    }

    fn start(&self) -> usize {
        self.codebook_size + 1
    }
}

/// One training pair: semantic codebook indices and the aligned grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcousticPair {
    pub semantic: Vec<usize>,
    pub grid: AcousticGrid,
}

impl AcousticPair {
    pub fn new(semantic: Vec<usize>, grid: AcousticGrid) -> Result<Self> {
        if semantic.len() != grid.frames() {
            return Err(Error::Data(format!(
                "{} semantic tokens for {} acoustic frames",
                semantic.len(),
                grid.frames()
            )));
        }
        Ok(Self { semantic, grid })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticLm<T = f32> {
    pub cfg: AcousticLmConfig,
    pub params: ParamStore<T>,
}

/// Inputs of one packed forward pass.
struct Packed {
    sem_ids: Vec<usize>,
    sem_pos: Vec<usize>,
    /// Per codebook, the previous-step code id of every step row.
    step_ids: Vec<Vec<usize>>,
    step_pos: Vec<usize>,
    /// Row order: for each sequence its prefix rows then its step rows.
    order: Vec<(bool, usize)>,
    layout: Arc<SeqLayout>,
}

impl<T: Real> AcousticLm<T> {
    pub fn new(cfg: AcousticLmConfig, rng: &mut impl Rng) -> Result<Self> {
        let problems = cfg.problems("acoustic_lm");
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let d = cfg.d_model;
        let mut params = ParamStore::new();
        params.insert("sem_emb", Tensor::randn(&[cfg.n_semantic, d], INIT_STD, rng));
        params.insert("prefix_pos", Tensor::randn(&[cfg.max_frames, d], INIT_STD, rng));
        params.insert("step_pos", Tensor::randn(&[cfg.max_frames + cfg.n_stages, d], INIT_STD, rng));
        for s in 0..cfg.n_stages {
            params.insert(format!("cb{s}_emb"), Tensor::randn(&[cfg.codebook_size + 2, d], INIT_STD, rng));
            params.insert(format!("head{s}"), Tensor::randn(&[cfg.codebook_size, d], INIT_STD, rng));
        }
        init_blocks(&mut params, &cfg.dims(), rng);
        params.insert("final_norm", Tensor::from_fn(&[d], |_| T::one()));
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: AcousticLmConfig, params: ParamStore<T>) -> Result<Self> {
        let mut rng = crate::rng::stream(0, "shape-probe");
        let probe = AcousticLm::<T>::new(cfg, &mut rng)?;
        for (name, t) in probe.params.iter() {
            let got = params.get(name)?.shape();
            if got != t.shape() {
                return Err(Error::Shape(format!("`aclm/{name}` is {got:?}, expected {:?}", t.shape())));
            }
        }
        if params.len() != probe.params.len() {
            return Err(Error::Shape("acoustic LM has unexpected tensors".into()));
        }
        Ok(Self { cfg, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn qualified_names(&self) -> Vec<String> {
        self.params.names().map(|n| format!("{ACLM_PREFIX}/{n}")).collect()
    }

    fn pack(&self, seqs: &[(&[usize], &DelayedGrid)], steps_each: &[usize]) -> Result<Packed> {
        let cfg = &self.cfg;
        let mut p = Packed {
            sem_ids: Vec::new(),
            sem_pos: Vec::new(),
            step_ids: vec![Vec::new(); cfg.n_stages],
            step_pos: Vec::new(),
            order: Vec::new(),
            layout: Arc::new(SeqLayout::causal(&[1])?),
        };
        let mut lens = Vec::with_capacity(seqs.len());
        for ((sem, grid), &steps) in seqs.iter().zip(steps_each) {
            if sem.is_empty() {
                return Err(Error::Contract("empty semantic sequence".into()));
            }
            if sem.len() > cfg.max_frames {
                return Err(Error::Length {
                    len: sem.len(),
                    max: cfg.max_frames,
                });
            }
            if grid.cells.len() != cfg.n_stages {
                return Err(Error::Shape(format!(
                    "delayed grid has {} codebooks, model {}",
                    grid.cells.len(),
                    cfg.n_stages
                )));
            }
            if let Some(&bad) = sem.iter().find(|&&i| i >= cfg.n_semantic) {
                return Err(Error::Index(format!("semantic index {bad} outside {}", cfg.n_semantic)));
            }
            for (i, &id) in sem.iter().enumerate() {
                p.sem_ids.push(id);
                p.sem_pos.push(i);
                p.order.push((true, p.sem_ids.len() - 1));
            }
            for t in 0..steps {
                for s in 0..cfg.n_stages {
                    let prev = if t == 0 {
                        cfg.start()
                    } else {
                        match grid.cells[s][t - 1] {
                            Some(c) if (c as usize) < cfg.codebook_size => c as usize,
                            Some(c) => return Err(Error::Index(format!("acoustic code {c} outside {}", cfg.codebook_size))),
                            None => cfg.pad(),
                        }
                    };
                    p.step_ids[s].push(prev);
                }
                p.step_pos.push(t);
                p.order.push((false, p.step_pos.len() - 1));
            }
            lens.push((sem.len() + steps, sem.len()));
        }
        p.layout = Arc::new(SeqLayout::new(&lens)?);
        Ok(p)
    }

    /// Records the forward pass; returns per-codebook `[rows, K]` logits.
    fn forward(&self, g: &mut Graph<T>, p: &Packed) -> Result<Vec<Var>> {
        let scope = Scope {
            prefix: ACLM_PREFIX,
            store: &self.params,
        };
        let sem_table = scope.p(g, "sem_emb")?;
        let ppos = scope.p(g, "prefix_pos")?;
        let spos = scope.p(g, "step_pos")?;
        let sem = g.embedding(sem_table, &p.sem_ids)?;
        let sp = g.embedding(ppos, &p.sem_pos)?;
        let prefix = g.add(sem, sp)?;
        let mut steps = g.embedding(spos, &p.step_pos)?;
        for s in 0..self.cfg.n_stages {
            let table = scope.p(g, &format!("cb{s}_emb"))?;
            let e = g.embedding(table, &p.step_ids[s])?;
            steps = g.add(steps, e)?;
        }
        // Interleave prefix and step rows into packed order.
        let n_prefix = p.sem_ids.len();
        let stacked = g.concat_rows(&[prefix, steps])?;
        let rows: Vec<usize> = p
            .order
            .iter()
            .map(|&(is_prefix, i)| if is_prefix { i } else { n_prefix + i })
            .collect();
        let x = g.embedding(stacked, &rows)?;
        let x = run_blocks(g, &scope, &self.cfg.dims(), x, &p.layout, &Adapters::None)?;
        let norm = scope.p(g, "final_norm")?;
        let x = g.rms_norm(x, norm)?;
        (0..self.cfg.n_stages)
            .map(|s| {
                let head = scope.p(g, &format!("head{s}"))?;
                g.linear(x, head)
            })
            .collect()
    }
}

impl<T: Real> ParamHost<T> for AcousticLm<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let local = name.strip_prefix(ACLM_PREFIX)?.strip_prefix('/')?;
        self.params.get_mut(local)
    }
    fn has_param(&self, name: &str) -> bool {
        name.strip_prefix(ACLM_PREFIX)
            .and_then(|r| r.strip_prefix('/'))
            .is_some_and(|l| self.params.contains(l))
    }
}

/// Per-codebook next-step targets of packed rows.
fn step_targets(batch: &[(&[usize], &DelayedGrid)], s: usize) -> Vec<Option<usize>> {
    let mut out = Vec::new();
    for (sem, grid) in batch {
        out.extend(std::iter::repeat_n(None, sem.len()));
        out.extend(grid.cells[s].iter().map(|c| c.map(|v| v as usize)));
    }
    out
}

/// Sum over codebooks of the mean cross-entropy of non-PAD cells.
pub fn batch_loss<T: Real>(model: &AcousticLm<T>, g: &mut Graph<T>, batch: &[&AcousticPair]) -> Result<Var> {
    let delayed: Vec<DelayedGrid> = batch.iter().map(|p| apply_delay(&p.grid)).collect();
    let items: Vec<(&[usize], &DelayedGrid)> = batch.iter().zip(&delayed).map(|(p, d)| (p.semantic.as_slice(), d)).collect();
    let steps: Vec<usize> = delayed.iter().map(DelayedGrid::steps).collect();
    let packed = model.pack(&items, &steps)?;
    let logits = model.forward(g, &packed)?;
    let mut total: Option<Var> = None;
    for (s, l) in logits.into_iter().enumerate() {
        let ce = g.cross_entropy(l, &step_targets(&items, s))?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    total.ok_or_else(|| Error::Contract("acoustic LM has no codebooks".into()))
}

/// Teacher-forced training on aligned pairs.
pub fn train_acoustic_lm(
    model: &mut AcousticLm<f32>,
    pairs: &[AcousticPair],
    opt: &AdamWConfig,
    steps: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Data("no acoustic training pairs".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.grid.n_stages() != model.cfg.n_stages) {
        return Err(Error::Data(format!(
            "pair with {} codebooks for a {}-codebook model",
            p.grid.n_stages(),
            model.cfg.n_stages
        )));
    }
    let mut state = AdamWState::new();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<&AcousticPair> = (0..batch_size).map(|_| pairs.choose(rng).expect("non-empty")).collect();
        let mut g = Graph::new(Trainable::All);
        let loss = batch_loss(model, &mut g, &batch)?;
        g.backward(loss)?;
        losses.push(g.value(loss).data()[0] as f64);
        let mut grads = g.param_grads();
        drop(g);
        clip_global_norm(&mut grads, opt.clip_norm.unwrap_or(f64::INFINITY));
        adamw_step(&grads, model, &mut state, opt, step)?;
    }
    Ok(losses)
}

/// Fraction of non-PAD cells each codebook head predicts correctly under
/// teacher forcing.
pub fn teacher_forced_accuracy<T: Real>(model: &AcousticLm<T>, pairs: &[AcousticPair]) -> Result<Vec<f64>> {
    let s_n = model.cfg.n_stages;
    let mut hits = vec![0usize; s_n];
    let mut total = vec![0usize; s_n];
    for chunk in pairs.chunks(32) {
        let delayed: Vec<DelayedGrid> = chunk.iter().map(|p| apply_delay(&p.grid)).collect();
        let items: Vec<(&[usize], &DelayedGrid)> =
            chunk.iter().zip(&delayed).map(|(p, d)| (p.semantic.as_slice(), d)).collect();
        let steps: Vec<usize> = delayed.iter().map(DelayedGrid::steps).collect();
        let packed = model.pack(&items, &steps)?;
        let mut g = Graph::inference();
        let logits = model.forward(&mut g, &packed)?;
        for (s, l) in logits.iter().enumerate() {
            let l = g.value(*l);
            for (r, t) in step_targets(&items, s).into_iter().enumerate() {
                if let Some(t) = t {
                    total[s] += 1;
                    hits[s] += usize::from(argmax(l.row(r)) == t);
                }
            }
        }
    }
    Ok(hits.iter().zip(&total).map(|(&h, &n)| h as f64 / n.max(1) as f64).collect())
}

/// Greedy decoding of one grid per semantic sequence.
pub fn acoustic_generate_batch<T: Real>(model: &AcousticLm<T>, semantic: &[Vec<usize>]) -> Result<Vec<AcousticGrid>> {
    let s_n = model.cfg.n_stages;
    if semantic.iter().any(Vec::is_empty) {
        return Err(Error::Contract("acoustic generation needs a non-empty semantic sequence".into()));
    }
    let totals: Vec<usize> = semantic.iter().map(|s| s.len() + s_n - 1).collect();
    let mut grids: Vec<DelayedGrid> = totals
        .iter()
        .map(|&n| DelayedGrid {
            cells: vec![vec![None; n]; s_n],
        })
        .collect();
    let max_steps = totals.iter().copied().max().unwrap_or(0);
    for t in 0..max_steps {
        let live: Vec<usize> = (0..semantic.len()).filter(|&b| t < totals[b]).collect();
        let items: Vec<(&[usize], &DelayedGrid)> = live.iter().map(|&b| (semantic[b].as_slice(), &grids[b])).collect();
        let steps = vec![t + 1; live.len()];
        let packed = model.pack(&items, &steps)?;
        let mut g = Graph::inference();
        let logits = model.forward(&mut g, &packed)?;
        let mut offset = 0;
        let mut picks = Vec::with_capacity(live.len());
        for &b in &live {
            let row = offset + semantic[b].len() + t;
            offset += semantic[b].len() + t + 1;
            let t_n = semantic[b].len();
            let cells: Vec<Option<u32>> = (0..s_n)
                .map(|s| (t >= s && t < s + t_n).then(|| argmax(g.value(logits[s]).row(row)) as u32))
                .collect();
            picks.push((b, cells));
        }
        for (b, cells) in picks {
            for (s, c) in cells.into_iter().enumerate() {
                grids[b].cells[s][t] = c;
            }
        }
    }
    grids.iter().map(invert_delay).collect()
}

pub fn acoustic_generate<T: Real>(model: &AcousticLm<T>, semantic: &[usize]) -> Result<AcousticGrid> {
    Ok(acoustic_generate_batch(model, &[semantic.to_vec()])?.remove(0))
}
