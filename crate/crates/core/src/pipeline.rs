//! Dataset builders, the stage-0 to stage-3 training runs, inference, and
//! the conversions between in-memory artifacts and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aclm::{acoustic_generate, acoustic_generate_batch, train_acoustic_lm, AcousticLm, AcousticPair, ACLM_PREFIX};
use crate::checkpoint::Checkpoint;
use crate::codec::{fit_codec, render, AcousticCodec, Codec, CodecFitReport, Rvq, SemanticCodebook, Waveform};
use crate::config::{AdapterInit, Config, StagePlan, MAX_TTS_CHARS, MIN_TTS_CHARS};
use crate::data::{qa_items, random_text, speech_qa_sample, text_qa_sample, tts_sample, PromptedSample, TaskKind};
use crate::error::{Error, Result};
use crate::lm::{generate, generate_batch, AdaptedLm, GenerateOptions, LanguageModel, TokenModel, LM_PREFIX};
use crate::lora::{apply_policy, inject_lora, Expert, TrainablePolicy};
use crate::mole::{train_router, MoleModel, Router, ROUTER_PREFIX};
use crate::rng::stream;
use crate::train::{Source, StepRecord, TrainSpec};
use crate::vocab::{UnifiedVocab, EOS, SPEECH};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: u8,
    /// Expert being trained, when the stage trains several.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

pub type MetricSink<'a> = &'a mut dyn FnMut(&MetricRecord) -> Result<()>;

/// Where a run keeps its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn codec(&self) -> PathBuf {
        self.root.join("codec.mslb")
    }
    pub fn data(&self, kind: TaskKind) -> PathBuf {
        self.root.join("data").join(format!("{}.jsonl", kind.name()))
    }
    pub fn stage(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}.mslb"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
}

// ---------------------------------------------------------------- datasets

/// Semantic ids of a rendered string.
pub fn semantic_ids(codec: &Codec, vocab: &UnifiedVocab, text: &str) -> Result<Vec<u32>> {
    crate::codec::semantic_encode(&render(text)?, &codec.semantic, vocab)
}

/// Builds `n_samples` samples of one task. TTS strings are random; the QA
/// kinds cycle through the 100 toy questions in canonical order.
pub fn build_dataset(
    kind: TaskKind,
    n_samples: usize,
    seed: u64,
    codec: Option<&Codec>,
    vocab: &UnifiedVocab,
) -> Result<Vec<PromptedSample>> {
    let need_codec = || codec.ok_or_else(|| Error::Dependency(format!("the {} dataset needs a fitted codec", kind.name())));
    let items = qa_items();
    match kind {
        TaskKind::Tts => {
            let codec = need_codec()?;
            let mut rng = stream(seed, "data/tts");
            (0..n_samples)
                .map(|_| {
                    let text = random_text(&mut rng, MIN_TTS_CHARS, MAX_TTS_CHARS);
                    tts_sample(&text, &semantic_ids(codec, vocab, &text)?)
                })
                .collect()
        }
        TaskKind::TextQa => items
            .iter()
            .cycle()
            .take(n_samples)
            .map(|(q, a)| text_qa_sample(q, a))
            .collect(),
        TaskKind::SpeechQa => {
            let codec = need_codec()?;
            items
                .iter()
                .cycle()
                .take(n_samples)
                .map(|(q, a)| speech_qa_sample(q, a, &semantic_ids(codec, vocab, a)?))
                .collect()
        }
    }
}

/// Held-out TTS strings that do not occur in `train`.
pub fn heldout_texts(seed: u64, n: usize, train: &[PromptedSample]) -> Vec<String> {
    let seen: BTreeSet<&str> = train.iter().map(|s| s.payload.as_str()).collect();
    let mut rng = stream(seed, "heldout/tts");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = random_text(&mut rng, MIN_TTS_CHARS, MAX_TTS_CHARS);
        if !seen.contains(t.as_str()) && !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

pub fn write_dataset(path: &Path, samples: &[PromptedSample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    for s in samples {
        text.push_str(&serde_json::to_string(s).expect("sample serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path, vocab: &UnifiedVocab) -> Result<Vec<PromptedSample>> {
    if !path.exists() {
        return Err(Error::Dependency(format!("missing dataset {}; run gen-data first", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let s: PromptedSample = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
            s.check(vocab)?;
            Ok(s)
        })
        .collect()
}

// ------------------------------------------------------------ speech side

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechSideReport {
    pub codec: CodecFitReport,
    pub aclm_loss: Vec<f64>,
}

/// Fits both tokenizers, then trains the acoustic LM on rendered random
/// strings of 1 to 12 symbols.
pub fn fit_speech_side(cfg: &Config) -> Result<(Codec, AcousticLm<f32>, SpeechSideReport)> {
    let (codec, codec_report) = fit_codec(&cfg.codec, &mut stream(cfg.seed, "codec"))?;
    let a = &cfg.acoustic_lm;
    let mut rng = stream(cfg.seed, "aclm/data");
    let pairs = (0..a.train_pairs)
        .map(|_| {
            let w = render(&random_text(&mut rng, 1, MAX_TTS_CHARS))?;
            AcousticPair::new(codec.semantic.encode_indices(&w)?, codec.acoustic.encode(&w)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut aclm = AcousticLm::new(cfg.aclm_config(), &mut stream(cfg.seed, "aclm/init"))?;
    let opt = crate::config::OptimizerSpec::with_lr(a.lr).adamw(a.steps);
    let aclm_loss = train_acoustic_lm(&mut aclm, &pairs, &opt, a.steps, a.batch_size, &mut rng)?;
    Ok((
        codec,
        aclm,
        SpeechSideReport {
            codec: codec_report,
            aclm_loss,
        },
    ))
}

pub fn speech_checkpoint(cfg: &Config, codec: &Codec, aclm: &AcousticLm<f32>) -> Checkpoint {
    let mut c = Checkpoint::new(cfg.to_canonical_json());
    c.insert("semantic/centroids", codec.semantic.centroids.clone());
    c.insert_store("codec", &codec.acoustic.params);
    for (s, t) in codec.acoustic.rvq.stages.iter().enumerate() {
        c.insert(format!("rvq/{s}"), t.clone());
    }
    c.insert_store(ACLM_PREFIX, &aclm.params);
    c
}

pub fn load_speech(cfg: &Config, c: &Checkpoint) -> Result<(Codec, AcousticLm<f32>)> {
    let semantic = SemanticCodebook::new(c.get("semantic/centroids")?.clone())?;
    let stages = (0..cfg.codec.n_stages)
        .map(|s| c.get(&format!("rvq/{s}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let acoustic = AcousticCodec::new(c.store("codec"), Rvq::new(stages)?)?;
    let aclm = AcousticLm::from_params(cfg.aclm_config(), c.store(ACLM_PREFIX))?;
    Ok((Codec { semantic, acoustic }, aclm))
}

// ----------------------------------------------------------- LM artifacts

/// The language-model side of a stage checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LmArtifacts {
    pub lm: LanguageModel<f32>,
    /// In training order: tts, text_qa, speech_qa.
    pub experts: Vec<Expert<f32>>,
    pub router: Option<Router<f32>>,
}

impl LmArtifacts {
    pub fn expert(&self, name: &str) -> Result<&Expert<f32>> {
        self.experts
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Dependency(format!("no `{name}` expert in these artifacts")))
    }

    pub fn adapted(&self, name: &str) -> Result<AdaptedLm<f32>> {
        Ok(AdaptedLm {
            base: self.lm.clone(),
            expert: self.expert(name)?.clone(),
        })
    }

    pub fn mole(&self, cfg: &Config) -> Result<MoleModel<f32>> {
        let router = self
            .router
            .clone()
            .ok_or_else(|| Error::Dependency("these artifacts have no router; run stage3".into()))?;
        let mut m = MoleModel::new(self.lm.clone(), self.experts.clone(), router)?;
        m.hard = cfg.mole.hard_routing;
        Ok(m)
    }

    pub fn to_checkpoint(&self, cfg: &Config) -> Checkpoint {
        let mut c = Checkpoint::new(cfg.to_canonical_json());
        c.insert_store(LM_PREFIX, &self.lm.params);
        for e in &self.experts {
            c.insert_store(&e.prefix(), &e.params);
        }
        if let Some(r) = &self.router {
            c.insert_store(ROUTER_PREFIX, &r.params);
        }
        c
    }

    pub fn from_checkpoint(cfg: &Config, c: &Checkpoint) -> Result<Self> {
        let lm = LanguageModel::from_params(cfg.lm_config(), c.store(LM_PREFIX), Vec::new())?;
        let mut experts = Vec::new();
        for kind in [TaskKind::Tts, TaskKind::TextQa, TaskKind::SpeechQa] {
            let prefix = format!("expert/{}", kind.name());
            if !c.has_prefix(&prefix) {
                continue;
            }
            let params = c.store(&prefix);
            let rank = params.get("layers.0.wq.lora_a")?.shape()[0];
            let expert = Expert {
                name: kind.name().to_string(),
                rank,
                alpha: cfg.lora.alpha,
                params,
            };
            let want: BTreeSet<String> = inject_lora(&lm, kind.name(), rank, cfg.lora.alpha, &mut stream(0, "shape-probe"))?
                .params
                .iter()
                .map(|(n, t)| format!("{n}{:?}", t.shape()))
                .collect();
            let got: BTreeSet<String> = expert.params.iter().map(|(n, t)| format!("{n}{:?}", t.shape())).collect();
            if want != got {
                return Err(Error::Shape(format!("expert `{}` does not fit the language model", kind.name())));
            }
            experts.push(expert);
        }
        let router = if c.has_prefix(ROUTER_PREFIX) {
            let r = Router { params: c.store(ROUTER_PREFIX) };
            let probe = Router::<f32>::new(lm.cfg.d_model, experts.len().max(1), &mut stream(0, "shape-probe"))?;
            for (n, t) in probe.params.iter() {
                if r.params.get(n)?.shape() != t.shape() {
                    return Err(Error::Shape(format!("`router/{n}` does not fit {} experts", experts.len())));
                }
            }
            Some(r)
        } else {
            None
        };
        Ok(Self { lm, experts, router })
    }
}

// ------------------------------------------------------------------ stages

fn stage_sources<'a>(plan: &StagePlan, data: &'a BTreeMap<TaskKind, Vec<PromptedSample>>) -> Result<Vec<Source<'a>>> {
    plan.datasets
        .iter()
        .map(|d| {
            let samples = data
                .get(&d.kind)
                .ok_or_else(|| Error::Dependency(format!("stage {} needs the {} dataset", plan.stage, d.kind.name())))?;
            Ok(Source {
                samples: &samples[..d.n_samples.min(samples.len())],
                weight: d.weight,
            })
        })
        .collect()
}

fn recorder<'s, M>(
    plan: &StagePlan,
    task: Option<&str>,
    sink: &'s mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> impl FnMut(&M, &StepRecord) -> Result<()> + 's {
    let (stage, every, last) = (plan.stage, plan.eval_every, plan.steps.saturating_sub(1));
    let task = task.map(str::to_string);
    move |_: &M, r: &StepRecord| {
        if (r.step + 1) % every == 0 || r.step == last {
            sink(&MetricRecord {
                stage,
                task: task.clone(),
                step: r.step + 1,
                loss: r.loss,
                lr: r.lr,
                grad_norm: r.grad_norm,
                metrics: BTreeMap::new(),
            })?;
        }
        Ok(())
    }
}

fn spec(plan: &StagePlan, trainable: crate::numerics::Trainable) -> TrainSpec {
    TrainSpec {
        opt: plan.optimizer.adamw(plan.steps),
        steps: plan.steps,
        batch_size: plan.batch_size,
        trainable,
    }
}

/// Stage 0: trains a fresh base model on text QA (the desk stand-in for a
/// pretrained instruction-following model).
pub fn run_stage0(
    cfg: &Config,
    data: &BTreeMap<TaskKind, Vec<PromptedSample>>,
    sink: MetricSink<'_>,
) -> Result<LmArtifacts> {
    let plan = cfg.stage(0)?;
    let mut lm = LanguageModel::new(cfg.lm_config(), &mut stream(cfg.seed, "stage0/init"))?;
    let view = apply_policy(&lm, &TrainablePolicy::pretrain(&lm))?;
    let sources = stage_sources(plan, data)?;
    let mut on_step = recorder(plan, None, sink);
    crate::train::train_model(&mut lm, &sources, &spec(plan, view.trainable), &mut stream(cfg.seed, "stage0/train"), &mut on_step)?;
    Ok(LmArtifacts {
        lm,
        experts: Vec::new(),
        router: None,
    })
}

/// Stage 1: extends the vocabulary with the semantic ids and trains the
/// TTS expert together with the embedding tables and the head.
pub fn run_stage1(
    cfg: &Config,
    base: &LmArtifacts,
    data: &BTreeMap<TaskKind, Vec<PromptedSample>>,
    sink: MetricSink<'_>,
) -> Result<LmArtifacts> {
    let plan = cfg.stage(1)?;
    if base.lm.vocab_size() != cfg.vocab.n_text as usize {
        return Err(Error::Dependency("stage 1 expects the stage-0 base model".into()));
    }
    let mut rng = stream(cfg.seed, "stage1/init");
    let lm = base
        .lm
        .extend_vocabulary(cfg.vocab.n_semantic as usize, cfg.lora.vocab_init_scale, &mut rng)?;
    let expert = inject_lora(&lm, TaskKind::Tts.name(), cfg.lora.rank, cfg.lora.alpha, &mut rng)?;
    let mut model = AdaptedLm { base: lm, expert };
    let view = apply_policy(&model, &TrainablePolicy::stage1(&model.expert))?;
    let sources = stage_sources(plan, data)?;
    let mut on_step = recorder(plan, Some(TaskKind::Tts.name()), sink);
    crate::train::train_model(&mut model, &sources, &spec(plan, view.trainable), &mut stream(cfg.seed, "stage1/train"), &mut on_step)?;
    Ok(LmArtifacts {
        lm: model.base,
        experts: vec![model.expert],
        router: None,
    })
}

/// Stage 2: trains one expert per listed QA dataset with everything else
/// frozen.
pub fn run_stage2(
    cfg: &Config,
    prev: &LmArtifacts,
    data: &BTreeMap<TaskKind, Vec<PromptedSample>>,
    sink: MetricSink<'_>,
) -> Result<LmArtifacts> {
    let plan = cfg.stage(2)?;
    let tts = prev
        .expert(TaskKind::Tts.name())
        .map_err(|_| Error::Dependency("stage 2 needs the stage-1 TTS expert".into()))?;
    let mut out = LmArtifacts {
        lm: prev.lm.clone(),
        experts: vec![tts.clone()],
        router: None,
    };
    // The text expert trains first so the speech-QA expert can start from
    // it: its answers begin with the same text, and two nearby experts mix
    // without a loss barrier between them.
    let mut plans: Vec<_> = plan.datasets.iter().collect();
    plans.sort_by_key(|d| d.kind);
    for d in plans {
        let name = d.kind.name();
        let text_expert = out.experts.iter().find(|e| e.name == TaskKind::TextQa.name());
        let expert = match (cfg.lora.stage2_init, d.kind, text_expert) {
            (_, TaskKind::SpeechQa, Some(text)) => text.renamed(name),
            (AdapterInit::Continue, ..) => tts.renamed(name),
            (AdapterInit::Fresh, ..) => inject_lora(
                &prev.lm,
                name,
                cfg.lora.rank,
                cfg.lora.alpha,
                &mut stream(cfg.seed, &format!("stage2/init/{name}")),
            )?,
        };
        let mut model = AdaptedLm {
            base: prev.lm.clone(),
            expert,
        };
        let view = apply_policy(&model, &TrainablePolicy::stage2(&model.expert))?;
        let samples = data
            .get(&d.kind)
            .ok_or_else(|| Error::Dependency(format!("stage 2 needs the {name} dataset")))?;
        let sources = [Source {
            samples: &samples[..d.n_samples.min(samples.len())],
            weight: 1.0,
        }];
        let mut on_step = recorder(plan, Some(name), &mut *sink);
        let mut rng = stream(cfg.seed, &format!("stage2/train/{name}"));
        crate::train::train_model(&mut model, &sources, &spec(plan, view.trainable), &mut rng, &mut on_step)?;
        out.experts.push(model.expert);
    }
    Ok(out)
}

/// Stage 3: assembles the mixture over every expert and trains only the
/// router on the mixed data. Returns router warnings alongside.
pub fn run_stage3(
    cfg: &Config,
    prev: &LmArtifacts,
    data: &BTreeMap<TaskKind, Vec<PromptedSample>>,
    sink: MetricSink<'_>,
) -> Result<(LmArtifacts, Vec<String>)> {
    let plan = cfg.stage(3)?;
    if prev.experts.len() < 2 {
        return Err(Error::Dependency("stage 3 needs the stage-2 experts".into()));
    }
    let router = Router::new(prev.lm.cfg.d_model, prev.experts.len(), &mut stream(cfg.seed, "stage3/init"))?;
    let mut model = MoleModel::new(prev.lm.clone(), prev.experts.clone(), router)?;
    model.hard = cfg.mole.hard_routing;
    let view = apply_policy(&model, &TrainablePolicy::stage3(&model.router))?;
    let known: BTreeSet<&str> = model.experts.iter().map(|e| e.name.as_str()).collect();
    if let Some(d) = plan.datasets.iter().find(|d| !known.contains(d.kind.name())) {
        return Err(Error::Dependency(format!("stage 3 mixes {} data but no such expert was trained", d.kind.name())));
    }
    let sources = stage_sources(plan, data)?;
    let mut on_step = recorder(plan, None, sink);
    let report = train_router(&mut model, &sources, &spec(plan, view.trainable), &mut stream(cfg.seed, "stage3/train"), &mut on_step)?;
    Ok((
        LmArtifacts {
            lm: model.base,
            experts: model.experts,
            router: Some(model.router),
        },
        report.warnings,
    ))
}

// --------------------------------------------------------------- inference

fn semantic_options<M: TokenModel<f32> + ?Sized>(model: &M) -> GenerateOptions {
    let vocab = model.base().cfg.vocab;
    GenerateOptions::greedy(model.base().cfg.max_seq_len, [EOS]).allowing(vocab.semantic_range().chain([EOS]))
}

fn semantic_indices(vocab: &UnifiedVocab, out: &[u32], text: &str) -> Result<Vec<usize>> {
    let idx: Vec<usize> = out
        .iter()
        .take_while(|&&t| t != EOS)
        .map(|&t| (t - vocab.n_text) as usize)
        .collect();
    if idx.is_empty() {
        return Err(Error::Synthesis(format!("no semantic tokens generated for {text:?}")));
    }
    Ok(idx)
}

fn tts_prompt(text: &str) -> Result<Vec<u32>> {
    if text.is_empty() {
        return Err(Error::Synthesis("empty text".into()));
    }
    for c in text.chars() {
        crate::vocab::symbol_index(c)?;
    }
    crate::data::prompt(TaskKind::Tts, text)
}

/// Semantic indices the model generates for `text` under the TTS prompt.
pub fn generate_semantic<M: TokenModel<f32> + ?Sized>(model: &M, text: &str) -> Result<Vec<usize>> {
    let out = generate(model, &tts_prompt(text)?, &semantic_options(model), &mut stream(0, "greedy"))?;
    semantic_indices(&model.base().cfg.vocab, &out, text)
}

/// Text to waveform: LM semantic tokens, acoustic LM, vocoder.
pub fn synthesize<M: TokenModel<f32> + ?Sized>(
    model: &M,
    codec: &Codec,
    aclm: &AcousticLm<f32>,
    text: &str,
) -> Result<Waveform> {
    let semantic = generate_semantic(model, text)?;
    codec.acoustic.decode(&acoustic_generate(aclm, &semantic)?)
}

/// Batched [`synthesize`]; each text gets its own outcome.
pub fn synthesize_batch<M: TokenModel<f32> + ?Sized>(
    model: &M,
    codec: &Codec,
    aclm: &AcousticLm<f32>,
    texts: &[String],
) -> Result<Vec<Result<Waveform>>> {
    let vocab = model.base().cfg.vocab;
    let prompts = texts.iter().map(|t| tts_prompt(t)).collect::<Result<Vec<_>>>()?;
    let outs = generate_batch(model, &prompts, &semantic_options(model), &mut stream(0, "greedy"))?;
    let semantic: Vec<Result<Vec<usize>>> = outs
        .iter()
        .zip(texts)
        .map(|(o, t)| {
            let idx = semantic_indices(&vocab, o, t)?;
            if idx.len() > aclm.cfg.max_frames {
                return Err(Error::Synthesis(format!(
                    "{} semantic tokens exceed the acoustic LM limit of {}",
                    idx.len(),
                    aclm.cfg.max_frames
                )));
            }
            Ok(idx)
        })
        .collect();
    let ok: Vec<Vec<usize>> = semantic.iter().filter_map(|s| s.as_ref().ok().cloned()).collect();
    let mut grids = if ok.is_empty() { Vec::new() } else { acoustic_generate_batch(aclm, &ok)? }.into_iter();
    Ok(semantic
        .into_iter()
        .map(|s| s.and_then(|_| codec.acoustic.decode(&grids.next().expect("one grid per success"))))
        .collect())
}

/// Outcome of one chain-of-modality request.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechAnswer {
    /// Generated ids after the prompt.
    pub tokens: Vec<u32>,
    pub text: String,
    pub waveform: Option<Waveform>,
    /// Set when the output breaks the `text, <speech>, semantic, <eos>`
    /// layout; `text` then holds the text-only fallback.
    pub format_error: Option<String>,
}

/// Checks the chain-of-modality layout; returns the answer ids and the
/// semantic indices.
pub fn split_speech_answer(vocab: &UnifiedVocab, tokens: &[u32]) -> Result<(Vec<u32>, Vec<usize>)> {
    let bad = |d: &str| Error::Format {
        record: "speech answer".into(),
        detail: d.into(),
    };
    let end = tokens.iter().position(|&t| t == EOS).ok_or_else(|| bad("no <eos> emitted"))?;
    let body = &tokens[..end];
    let sp = body.iter().position(|&t| t == SPEECH).ok_or_else(|| bad("no <speech> emitted before <eos>"))?;
    let (text, speech) = (&body[..sp], &body[sp + 1..]);
    if text.is_empty() || text.iter().any(|&t| vocab.decode_text(&[t]).is_empty()) {
        return Err(bad("answer part must be printable text ids"));
    }
    if speech.is_empty() || !speech.iter().all(|&t| vocab.is_semantic(t)) {
        return Err(bad("speech part must be one or more semantic ids"));
    }
    Ok((text.to_vec(), speech.iter().map(|&t| (t - vocab.n_text) as usize).collect()))
}

fn answer_from(vocab: &UnifiedVocab, model_out: &[u32], codec: &Codec, aclm: &AcousticLm<f32>) -> Result<SpeechAnswer> {
    match split_speech_answer(vocab, model_out) {
        Ok((text, semantic)) => {
            let waveform = if semantic.len() > aclm.cfg.max_frames {
                None
            } else {
                Some(codec.acoustic.decode(&acoustic_generate(aclm, &semantic)?)?)
            };
            Ok(SpeechAnswer {
                tokens: model_out.to_vec(),
                text: vocab.decode_text(&text),
                format_error: waveform.is_none().then(|| "speech part exceeds the acoustic LM limit".to_string()),
                waveform,
            })
        }
        Err(e) => {
            let text: Vec<u32> = model_out
                .iter()
                .take_while(|&&t| t != EOS && t != SPEECH)
                .copied()
                .collect();
            Ok(SpeechAnswer {
                tokens: model_out.to_vec(),
                text: vocab.decode_text(&text),
                waveform: None,
                format_error: Some(e.to_string()),
            })
        }
    }
}

/// Answers a toy question in text and speech from one decoding pass.
pub fn speech_qa_infer<M: TokenModel<f32> + ?Sized>(
    model: &M,
    codec: &Codec,
    aclm: &AcousticLm<f32>,
    question: &str,
) -> Result<SpeechAnswer> {
    Ok(speech_qa_batch(model, codec, aclm, &[question.to_string()])?.remove(0))
}

pub fn speech_qa_batch<M: TokenModel<f32> + ?Sized>(
    model: &M,
    codec: &Codec,
    aclm: &AcousticLm<f32>,
    questions: &[String],
) -> Result<Vec<SpeechAnswer>> {
    let vocab = model.base().cfg.vocab;
    let prompts = questions
        .iter()
        .map(|q| crate::data::prompt(TaskKind::SpeechQa, q))
        .collect::<Result<Vec<_>>>()?;
    let opts = GenerateOptions::greedy(model.base().cfg.max_seq_len, [EOS]);
    let outs = generate_batch(model, &prompts, &opts, &mut stream(0, "greedy"))?;
    outs.iter().map(|o| answer_from(&vocab, o, codec, aclm)).collect()
}

/// Greedy answer to a text question, cut at `<eos>`.
pub fn answer_batch<M: TokenModel<f32> + ?Sized>(model: &M, questions: &[String]) -> Result<Vec<String>> {
    let vocab = model.base().cfg.vocab;
    let prompts = questions
        .iter()
        .map(|q| crate::data::prompt(TaskKind::TextQa, q))
        .collect::<Result<Vec<_>>>()?;
    let outs = generate_batch(model, &prompts, &GenerateOptions::greedy(4, [EOS]), &mut stream(0, "greedy"))?;
    Ok(outs
        .iter()
        .map(|o| {
            let body: Vec<u32> = o.iter().take_while(|&&t| t != EOS).copied().collect();
            if body.iter().all(|&t| vocab.is_text(t)) && o.contains(&EOS) {
                vocab.decode_text(&body)
            } else {
                // Anything outside the text vocabulary cannot match an answer.
                format!("<{}>", body.len())
            }
        })
        .collect())
}

/// Every parameter of an artifact set, checksummed by qualified name.
pub fn checksums(a: &LmArtifacts) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for (n, c) in a.lm.params.checksums() {
        out.insert(format!("{LM_PREFIX}/{n}"), c);
    }
    for e in &a.experts {
        for (n, c) in e.params.checksums() {
            out.insert(format!("{}/{n}", e.prefix()), c);
        }
    }
    if let Some(r) = &a.router {
        for (n, c) in r.params.checksums() {
            out.insert(format!("{ROUTER_PREFIX}/{n}"), c);
        }
    }
    out
}
