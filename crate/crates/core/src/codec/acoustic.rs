//! Acoustic tokenizer: a linear frame autoencoder with a residual vector
//! quantizer in its bottleneck. The decoder doubles as the vocoder.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::audio::{Waveform, FRAME_LEN};
use super::kmeans::{fit_kmeans, nearest, KMeansOptions, Points};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWConfig, AdamWState, Graph, ParamStore, Tensor, Trainable, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// RVQ stages S.
    pub n_stages: usize,
    /// Entries per stage K_ac.
    pub codebook_size: usize,
    pub latent_dim: usize,
    /// Semantic codebook size K_sem.
    pub semantic_size: usize,
    pub kmeans_iters: usize,
    /// Random strings rendered for the fitting corpus.
    pub corpus_strings: usize,
    /// Standard deviation of the noisy frame copies added to the corpus.
    pub noise_std: f64,
    pub ae_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            n_stages: 4,
            codebook_size: 64,
            latent_dim: 16,
            semantic_size: 64,
            kmeans_iters: 50,
            corpus_strings: 200,
            noise_std: 0.02,
            ae_steps: 1500,
            finetune_steps: 500,
            batch_size: 128,
            lr: 3e-3,
        }
    }
}

impl CodecConfig {
    pub fn problems(&self, path: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("n_stages", self.n_stages),
            ("codebook_size", self.codebook_size),
            ("latent_dim", self.latent_dim),
            ("semantic_size", self.semantic_size),
            ("kmeans_iters", self.kmeans_iters),
            ("corpus_strings", self.corpus_strings),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                out.push(format!("{path}.{name} must be positive"));
            }
        }
        if self.codebook_size < 2 {
            out.push(format!("{path}.codebook_size must be at least 2 (entry 0 is reserved)"));
        }
        if self.latent_dim > FRAME_LEN {
            out.push(format!("{path}.latent_dim must not exceed the frame length {FRAME_LEN}"));
        }
        if !(self.noise_std >= 0.0) {
            out.push(format!("{path}.noise_std must be non-negative"));
        }
        if !(self.lr > 0.0) {
            out.push(format!("{path}.lr must be positive"));
        }
        out
    }
}

/// S stages of `K × d` codebooks; entry 0 of each stage is the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Rvq {
    pub stages: Vec<Tensor<f32>>,
}

impl Rvq {
    pub fn new(stages: Vec<Tensor<f32>>) -> Result<Self> {
        let first = stages.first().ok_or_else(|| Error::Shape("RVQ needs at least one stage".into()))?;
        let shape = first.shape().to_vec();
        for (s, t) in stages.iter().enumerate() {
            if t.shape() != shape.as_slice() || shape.len() != 2 {
                return Err(Error::Shape(format!("RVQ stage {s} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if t.row(0).iter().any(|&v| v != 0.0) {
                return Err(Error::Contract(format!("RVQ stage {s}: entry 0 must be the zero vector")));
            }
        }
        Ok(Self { stages })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.stages[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.stages[0].shape()[1]
    }

    fn stage_f64(&self, s: usize) -> Vec<f64> {
        self.stages[s].data().iter().map(|&v| v as f64).collect()
    }

    /// Greedy residual coding with the first `n` stages; returns the codes
    /// and every residual `r_0 … r_n`.
    pub fn quantize_with_residuals(&self, x: &[f64], n: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::Shape(format!("latent of width {} for a {d}-dim quantizer", x.len())));
        }
        if n > self.n_stages() {
            return Err(Error::Contract(format!("{n} stages requested from a {}-stage RVQ", self.n_stages())));
        }
        let mut r = x.to_vec();
        let mut codes = Vec::with_capacity(n);
        let mut residuals = vec![r.clone()];
        for s in 0..n {
            let book = self.stage_f64(s);
            let (c, _) = nearest(&book, d, &r);
            for (ri, e) in r.iter_mut().zip(&book[c * d..(c + 1) * d]) {
                *ri -= e;
            }
            codes.push(c);
            residuals.push(r.clone());
        }
        Ok((codes, residuals))
    }

    pub fn quantize(&self, x: &[f64]) -> Result<Vec<usize>> {
        Ok(self.quantize_with_residuals(x, self.n_stages())?.0)
    }

    pub fn dequantize(&self, codes: &[usize]) -> Result<Vec<f64>> {
        if codes.len() > self.n_stages() {
            return Err(Error::Shape(format!("{} codes for {} stages", codes.len(), self.n_stages())));
        }
        let (k, d) = (self.codebook_size(), self.dim());
        let mut out = vec![0.0; d];
        for (s, &c) in codes.iter().enumerate() {
            if c >= k {
                return Err(Error::Index(format!("code {c} outside stage {s} of {k} entries")));
            }
            for (o, &e) in out.iter_mut().zip(self.stages[s].row(c)) {
                *o += e as f64;
            }
        }
        Ok(out)
    }
}

/// S × T acoustic codes, one column per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcousticGrid {
    pub codes: Vec<Vec<u32>>,
}

impl AcousticGrid {
    pub fn new(codes: Vec<Vec<u32>>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Shape("acoustic grid needs at least one codebook row".into()));
        }
        let t = codes[0].len();
        if codes.iter().any(|r| r.len() != t) {
            return Err(Error::Shape("acoustic grid rows differ in length".into()));
        }
        Ok(Self { codes })
    }

    pub fn n_stages(&self) -> usize {
        self.codes.len()
    }

    pub fn frames(&self) -> usize {
        self.codes[0].len()
    }

    pub fn column(&self, t: usize) -> Vec<usize> {
        self.codes.iter().map(|r| r[t] as usize).collect()
    }
}

/// Encoder, decoder and quantizer of the acoustic tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticCodec {
    /// `enc_w [d_lat, 64]`, `enc_b [d_lat]`, `dec_w [64, d_lat]`, `dec_b [64]`.
    pub params: ParamStore<f32>,
    pub rvq: Rvq,
}

/// Diagnostics of one codec fit.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecFitReport {
    pub ae_loss: Vec<f64>,
    pub finetune_loss: Vec<f64>,
    /// k-means objective trace per RVQ stage.
    pub kmeans_objective: Vec<Vec<f64>>,
}

fn affine(w: &Tensor<f32>, b: &Tensor<f32>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|r| {
            let row = &w.data()[r * cols..(r + 1) * cols];
            b.data()[r] as f64 + row.iter().zip(x).map(|(&a, &v)| a as f64 * v).sum::<f64>()
        })
        .collect()
}

impl AcousticCodec {
    pub fn new(params: ParamStore<f32>, rvq: Rvq) -> Result<Self> {
        let d = rvq.dim();
        for (name, shape) in [
            ("enc_w", vec![d, FRAME_LEN]),
            ("enc_b", vec![d]),
            ("dec_w", vec![FRAME_LEN, d]),
            ("dec_b", vec![FRAME_LEN]),
        ] {
            let got = params.get(name)?.shape();
            if got != shape.as_slice() {
                return Err(Error::Shape(format!("codec `{name}` is {got:?}, expected {shape:?}")));
            }
        }
        Ok(Self { params, rvq })
    }

    fn p(&self, name: &str) -> &Tensor<f32> {
        self.params.get(name).expect("shapes checked at construction")
    }

    pub fn encode_latent(&self, frame: &[f32]) -> Vec<f64> {
        let x: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
        affine(self.p("enc_w"), self.p("enc_b"), &x)
    }

    /// Decoder output for one latent, before clamping.
    pub fn decode_latent(&self, z: &[f64]) -> Vec<f64> {
        affine(self.p("dec_w"), self.p("dec_b"), z)
    }

    /// Encoder then RVQ per frame.
    pub fn encode(&self, w: &Waveform) -> Result<AcousticGrid> {
        self.encode_with_stages(w, self.rvq.n_stages())
    }

    pub fn encode_with_stages(&self, w: &Waveform, n: usize) -> Result<AcousticGrid> {
        let mut codes = vec![Vec::with_capacity(w.frame_count()); n];
        for f in w.frames()? {
            let (c, _) = self.rvq.quantize_with_residuals(&self.encode_latent(f), n)?;
            for (row, v) in codes.iter_mut().zip(c) {
                row.push(v as u32);
            }
        }
        Ok(AcousticGrid { codes })
    }

    /// Dequantize, decode and clamp each column; frames are concatenated.
    pub fn decode(&self, grid: &AcousticGrid) -> Result<Waveform> {
        if grid.n_stages() > self.rvq.n_stages() {
            return Err(Error::Shape(format!(
                "grid has {} codebooks, codec {}",
                grid.n_stages(),
                self.rvq.n_stages()
            )));
        }
        let mut samples = Vec::with_capacity(grid.frames() * FRAME_LEN);
        for t in 0..grid.frames() {
            let z = self.rvq.dequantize(&grid.column(t))?;
            samples.extend(self.decode_latent(&z).into_iter().map(|v| v.clamp(-1.0, 1.0) as f32));
        }
        Ok(Waveform::new(samples))
    }
}

pub fn acoustic_encode(w: &Waveform, codec: &AcousticCodec) -> Result<AcousticGrid> {
    codec.encode(w)
}

pub fn vocoder_decode(grid: &AcousticGrid, codec: &AcousticCodec) -> Result<Waveform> {
    codec.decode(grid)
}

fn mse(g: &mut Graph<f32>, y: Var, target: Var) -> Result<Var> {
    let n = g.value(y).len();
    let neg = g.scale(target, -1.0);
    let diff = g.add(y, neg)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f32))
}

fn batch_of(frames: &[f32], idx: &[usize]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(idx.len() * FRAME_LEN);
    for &i in idx {
        data.extend_from_slice(&frames[i * FRAME_LEN..(i + 1) * FRAME_LEN]);
    }
    Tensor::new(vec![idx.len(), FRAME_LEN], data)
}

/// Fits the codec in three phases: autoencoder on unquantized latents,
/// greedy per-stage k-means on residuals, then decoder fine-tuning on
/// quantized latents.
pub fn fit_acoustic_codec(
    frames: &[f32],
    cfg: &CodecConfig,
    rng: &mut impl Rng,
) -> Result<(AcousticCodec, CodecFitReport)> {
    let problems = cfg.problems("codec");
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if frames.len() % FRAME_LEN != 0 {
        return Err(Error::Framing("codec corpus is not whole frames".into()));
    }
    let n = frames.len() / FRAME_LEN;
    if n < 10 * cfg.codebook_size {
        return Err(Error::Data(format!(
            "{n} frames is fewer than 10 x {} codebook entries",
            cfg.codebook_size
        )));
    }
    let d = cfg.latent_dim;
    let mut params = ParamStore::new();
    let std = 1.0 / (FRAME_LEN as f64).sqrt();
    params.insert("enc_w", Tensor::randn(&[d, FRAME_LEN], std, rng));
    params.insert("enc_b", Tensor::zeros(&[d]));
    params.insert("dec_w", Tensor::randn(&[FRAME_LEN, d], std, rng));
    params.insert("dec_b", Tensor::zeros(&[FRAME_LEN]));
    let all: Vec<usize> = (0..n).collect();

    let opt = AdamWConfig::default().with_lr(cfg.lr).with_steps(cfg.ae_steps.max(1));
    let mut state = AdamWState::new();
    let mut ae_loss = Vec::with_capacity(cfg.ae_steps);
    for step in 0..cfg.ae_steps {
        let idx: Vec<usize> = all.choose_multiple(rng, cfg.batch_size.min(n)).copied().collect();
        let x = batch_of(frames, &idx)?;
        let mut g = Graph::new(Trainable::All);
        let xv = g.constant(x);
        let (ew, eb, dw, db) = (
            g.param("enc_w", params.get("enc_w")?),
            g.param("enc_b", params.get("enc_b")?),
            g.param("dec_w", params.get("dec_w")?),
            g.param("dec_b", params.get("dec_b")?),
        );
        let z = g.linear(xv, ew)?;
        let z = g.add_row(z, eb)?;
        let y = g.linear(z, dw)?;
        let y = g.add_row(y, db)?;
        let loss = mse(&mut g, y, xv)?;
        g.backward(loss)?;
        ae_loss.push(g.value(loss).data()[0] as f64);
        let grads = g.param_grads();
        adamw_step(&grads, &mut params, &mut state, &opt, step)?;
    }

    let enc_w = params.get("enc_w")?.clone();
    let enc_b = params.get("enc_b")?.clone();
    let mut residuals: Vec<f64> = Vec::with_capacity(n * d);
    for i in 0..n {
        let x: Vec<f64> = frames[i * FRAME_LEN..(i + 1) * FRAME_LEN].iter().map(|&v| v as f64).collect();
        residuals.extend(affine(&enc_w, &enc_b, &x));
    }
    let mut stages = Vec::with_capacity(cfg.n_stages);
    let mut kmeans_objective = Vec::with_capacity(cfg.n_stages);
    let kopts = KMeansOptions {
        k: cfg.codebook_size,
        max_iters: cfg.kmeans_iters,
        pin_zero: true,
    };
    for _ in 0..cfg.n_stages {
        let fit = fit_kmeans(&Points::new(&residuals, d)?, &kopts, rng)?;
        let book = Tensor::new(
            vec![cfg.codebook_size, d],
            fit.centroids.iter().map(|&v| v as f32).collect(),
        )?;
        let book64: Vec<f64> = book.data().iter().map(|&v| v as f64).collect();
        for r in residuals.chunks_exact_mut(d) {
            let (c, _) = nearest(&book64, d, r);
            for (ri, e) in r.iter_mut().zip(&book64[c * d..(c + 1) * d]) {
                *ri -= e;
            }
        }
        kmeans_objective.push(fit.objective);
        stages.push(book);
    }
    let rvq = Rvq::new(stages)?;

    let mut quantized = Vec::with_capacity(n * d);
    for i in 0..n {
        let x: Vec<f64> = frames[i * FRAME_LEN..(i + 1) * FRAME_LEN].iter().map(|&v| v as f64).collect();
        let z = affine(&enc_w, &enc_b, &x);
        let codes = rvq.quantize(&z)?;
        quantized.extend(rvq.dequantize(&codes)?.into_iter().map(|v| v as f32));
    }
    let opt = AdamWConfig::default().with_lr(cfg.lr).with_steps(cfg.finetune_steps.max(1));
    let mut state = AdamWState::new();
    let mut finetune_loss = Vec::with_capacity(cfg.finetune_steps);
    let dec_only = Trainable::Only(["dec_w".to_string(), "dec_b".to_string()].into_iter().collect());
    for step in 0..cfg.finetune_steps {
        let idx: Vec<usize> = all.choose_multiple(rng, cfg.batch_size.min(n)).copied().collect();
        let x = batch_of(frames, &idx)?;
        let mut zq = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            zq.extend_from_slice(&quantized[i * d..(i + 1) * d]);
        }
        let mut g = Graph::new(dec_only.clone());
        let xv = g.constant(x);
        let zv = g.constant(Tensor::new(vec![idx.len(), d], zq)?);
        let dw = g.param("dec_w", params.get("dec_w")?);
        let db = g.param("dec_b", params.get("dec_b")?);
        let y = g.linear(zv, dw)?;
        let y = g.add_row(y, db)?;
        let loss = mse(&mut g, y, xv)?;
        g.backward(loss)?;
        finetune_loss.push(g.value(loss).data()[0] as f64);
        let grads = g.param_grads();
        adamw_step(&grads, &mut params, &mut state, &opt, step)?;
    }

    let codec = AcousticCodec::new(params, rvq)?;
    Ok((
        codec,
        CodecFitReport {
            ae_loss,
            finetune_loss,
            kmeans_objective,
        },
    ))
}
