//! The run configuration: one JSON document, validated as a whole.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aclm::AcousticLmConfig;
use crate::codec::audio::FRAMES_PER_SYMBOL;
use crate::codec::CodecConfig;
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::numerics::AdamWConfig;
use crate::vocab::UnifiedVocab;

/// Longest TTS payload in characters.
pub const MAX_TTS_CHARS: usize = 12;
pub const MIN_TTS_CHARS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// Stage-2 experts start from the stage-1 adapter weights.
    Continue,
    Fresh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub stage2_init: AdapterInit,
    /// Standard deviation of the rows added by vocabulary extension.
    pub vocab_init_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoleSection {
    /// Route with the one-hot argmax gate instead of the soft gates.
    pub hard_routing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticLmSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_stages: usize,
    pub codebook_size: usize,
    pub max_frames: usize,
    pub train_pairs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: TaskKind,
    pub n_samples: usize,
    /// Relative share of each batch drawn from this dataset.
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl OptimizerSpec {
    pub fn with_lr(lr_max: f64) -> Self {
        let d = AdamWConfig::default();
        Self {
            lr_max,
            lr_min: d.lr_min,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
            clip_norm: d.clip_norm,
        }
    }

    pub fn adamw(&self, total_steps: usize) -> AdamWConfig {
        AdamWConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            total_steps: total_steps.max(1),
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: u8,
    pub datasets: Vec<DatasetSpec>,
    pub steps: usize,
    pub batch_size: usize,
    /// Steps between metric records (the last step is always recorded).
    pub eval_every: usize,
    pub optimizer: OptimizerSpec,
}

impl StagePlan {
    pub fn dataset(&self, kind: TaskKind) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.kind == kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub vocab: UnifiedVocab,
    pub lm: LmSection,
    pub lora: LoraSection,
    pub mole: MoleSection,
    pub codec: CodecConfig,
    pub acoustic_lm: AcousticLmSection,
    pub stages: Vec<StagePlan>,
    pub seed: u64,
}

fn plan(stage: u8, datasets: &[(TaskKind, usize, f64)], steps: usize, batch_size: usize, lr: f64) -> StagePlan {
    StagePlan {
        stage,
        datasets: datasets
            .iter()
            .map(|&(kind, n_samples, weight)| DatasetSpec { kind, n_samples, weight })
            .collect(),
        steps,
        batch_size,
        eval_every: (steps / 10).max(1),
        optimizer: OptimizerSpec::with_lr(lr),
    }
}

impl Config {
    /// The shipped desk-scale configuration.
    pub fn desk() -> Self {
        use TaskKind::*;
        Self {
            vocab: UnifiedVocab::default(),
            lm: LmSection {
                d_model: 128,
                n_layers: 2,
                n_heads: 4,
                d_ff: 256,
                max_seq_len: 80,
            },
            lora: LoraSection {
                rank: 16,
                alpha: 32.0,
                stage2_init: AdapterInit::Fresh,
                vocab_init_scale: 0.02,
            },
            mole: MoleSection { hard_routing: false },
            codec: CodecConfig::default(),
            acoustic_lm: AcousticLmSection {
                d_model: 64,
                n_layers: 2,
                n_heads: 2,
                d_ff: 256,
                n_stages: 4,
                codebook_size: 64,
                max_frames: 48,
                train_pairs: 1000,
                steps: 800,
                batch_size: 8,
                lr: 1e-3,
            },
            stages: vec![
                plan(0, &[(TextQa, 100, 1.0)], 4000, 16, 1e-3),
                plan(1, &[(Tts, 2000, 1.0)], 1500, 16, 1e-3),
                plan(2, &[(TextQa, 100, 1.0), (SpeechQa, 100, 1.0)], 2000, 16, 1e-3),
                plan(3, &[(Tts, 2000, 1.0), (TextQa, 100, 1.0), (SpeechQa, 100, 1.0)], 1000, 16, 1e-3),
            ],
            seed: 1234,
        }
    }

    /// A minutes-free configuration that exercises every stage; for
    /// plumbing tests, not for quality.
    pub fn smoke() -> Self {
        use TaskKind::*;
        let mut c = Self::desk();
        c.lm = LmSection {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 72,
        };
        c.lora.rank = 4;
        c.lora.alpha = 8.0;
        c.codec.kmeans_iters = 10;
        c.codec.corpus_strings = 40;
        c.codec.ae_steps = 60;
        c.codec.finetune_steps = 20;
        c.codec.batch_size = 32;
        c.acoustic_lm = AcousticLmSection {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            train_pairs: 40,
            steps: 10,
            batch_size: 4,
            ..c.acoustic_lm
        };
        c.stages = vec![
            plan(0, &[(TextQa, 100, 1.0)], 10, 4, 1e-3),
            plan(1, &[(Tts, 40, 1.0)], 10, 4, 1e-3),
            plan(2, &[(TextQa, 100, 1.0), (SpeechQa, 20, 1.0)], 10, 4, 1e-3),
            plan(3, &[(Tts, 40, 1.0), (TextQa, 100, 1.0), (SpeechQa, 20, 1.0)], 10, 4, 1e-3),
        ];
        c
    }

    /// Full-scale reference values; never trained here.
    pub fn paper() -> Self {
        use TaskKind::*;
        let mut c = Self::desk();
        c.vocab = UnifiedVocab {
            n_text: 64,
            n_semantic: 4096,
        };
        c.lm = LmSection {
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            d_ff: 14336,
            max_seq_len: 2048,
        };
        c.lora.rank = 128;
        c.lora.alpha = 64.0;
        c.codec.semantic_size = 4096;
        c.stages = vec![
            plan(1, &[(Tts, 20000 * 256, 1.0)], 20000, 256, 3e-4),
            plan(2, &[(TextQa, 100, 1.0), (SpeechQa, 100, 1.0)], 20000, 256, 3e-4),
            plan(3, &[(Tts, 20000 * 256, 1.0), (TextQa, 100, 1.0)], 20000, 256, 1e-4),
        ];
        c
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            d_model: self.lm.d_model,
            n_layers: self.lm.n_layers,
            n_heads: self.lm.n_heads,
            d_ff: self.lm.d_ff,
            max_seq_len: self.lm.max_seq_len,
            vocab: self.vocab,
        }
    }

    pub fn aclm_config(&self) -> AcousticLmConfig {
        let a = &self.acoustic_lm;
        AcousticLmConfig {
            d_model: a.d_model,
            n_layers: a.n_layers,
            n_heads: a.n_heads,
            d_ff: a.d_ff,
            n_stages: a.n_stages,
            codebook_size: a.codebook_size,
            n_semantic: self.vocab.n_semantic as usize,
            max_frames: a.max_frames,
        }
    }

    pub fn stage(&self, id: u8) -> Result<&StagePlan> {
        self.stages
            .iter()
            .find(|s| s.stage == id)
            .ok_or_else(|| Error::Config(vec![format!("stages: no plan for stage {id}")]))
    }

    /// Canonical JSON text (stable key order, pretty-printed).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Range and cross-section checks on an already typed config.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.vocab.problems();
        out.extend(self.lm_config().problems("lm"));
        out.extend(self.codec.problems("codec"));
        out.extend(self.aclm_config().problems("acoustic_lm"));
        let l = &self.lora;
        if l.rank == 0 {
            out.push("lora.rank must be at least 1".into());
        } else if l.rank > self.lm.d_model.min(self.lm.d_ff) {
            out.push(format!(
                "lora.rank {} exceeds the smallest adapted dimension {}",
                l.rank,
                self.lm.d_model.min(self.lm.d_ff)
            ));
        }
        if !(l.alpha > 0.0) {
            out.push("lora.alpha must be positive".into());
        }
        if !(l.vocab_init_scale > 0.0) {
            out.push("lora.vocab_init_scale must be positive".into());
        }
        if self.codec.semantic_size != self.vocab.n_semantic as usize {
            out.push(format!(
                "codec.semantic_size ({}) must equal vocab.n_semantic ({})",
                self.codec.semantic_size, self.vocab.n_semantic
            ));
        }
        let a = &self.acoustic_lm;
        if a.n_stages != self.codec.n_stages {
            out.push(format!(
                "acoustic_lm.n_stages ({}) must equal codec.n_stages ({})",
                a.n_stages, self.codec.n_stages
            ));
        }
        if a.codebook_size != self.codec.codebook_size {
            out.push(format!(
                "acoustic_lm.codebook_size ({}) must equal codec.codebook_size ({})",
                a.codebook_size, self.codec.codebook_size
            ));
        }
        let max_frames = MAX_TTS_CHARS * FRAMES_PER_SYMBOL;
        if a.max_frames < max_frames {
            out.push(format!("acoustic_lm.max_frames must be at least {max_frames}"));
        }
        for (name, v) in [("train_pairs", a.train_pairs), ("batch_size", a.batch_size)] {
            if v == 0 {
                out.push(format!("acoustic_lm.{name} must be positive"));
            }
        }
        if !(a.lr > 0.0) {
            out.push("acoustic_lm.lr must be positive".into());
        }
        // <bos> sys <user> text <assistant> semantic <eos>
        let longest = 4 + MAX_TTS_CHARS + max_frames + 1;
        if self.lm.max_seq_len < longest {
            out.push(format!("lm.max_seq_len must be at least {longest} to hold the longest TTS sample"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, s) in self.stages.iter().enumerate() {
            let path = format!("stages[{i}]");
            if s.stage > 3 {
                out.push(format!("{path}.stage must be 0..=3"));
            }
            if !seen.insert(s.stage) {
                out.push(format!("{path}.stage {} is planned twice", s.stage));
            }
            if s.batch_size == 0 {
                out.push(format!("{path}.batch_size must be positive"));
            }
            if s.eval_every == 0 {
                out.push(format!("{path}.eval_every must be positive"));
            }
            out.extend(s.optimizer.adamw(s.steps).problems(&format!("{path}.optimizer")));
            if s.datasets.is_empty() {
                out.push(format!("{path}.datasets must not be empty"));
            }
            for (j, d) in s.datasets.iter().enumerate() {
                if d.n_samples == 0 {
                    out.push(format!("{path}.datasets[{j}].n_samples must be positive"));
                }
                if !(d.weight >= 0.0) {
                    out.push(format!("{path}.datasets[{j}].weight must be non-negative"));
                }
            }
            let kinds: Vec<TaskKind> = s.datasets.iter().map(|d| d.kind).collect();
            let allowed: &[TaskKind] = match s.stage {
                0 => &[TaskKind::TextQa],
                1 => &[TaskKind::Tts],
                2 => &[TaskKind::TextQa, TaskKind::SpeechQa],
                _ => &[TaskKind::Tts, TaskKind::TextQa, TaskKind::SpeechQa],
            };
            for k in &kinds {
                if !allowed.contains(k) {
                    out.push(format!("{path}: dataset kind `{}` is not used in stage {}", k.name(), s.stage));
                }
            }
            if s.stage == 2 && !kinds.contains(&TaskKind::TextQa) {
                out.push(format!("{path}: stage 2 needs a text_qa dataset"));
            }
        }
        out
    }
}

/// Collects keys of `doc` that `schema` does not have and keys `schema`
/// has that `doc` lacks, with JSON paths.
fn compare_keys(doc: &Value, schema: &Value, path: &str, out: &mut Vec<String>) {
    match (doc, schema) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in d {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match s.get(k) {
                    Some(sv) => compare_keys(v, sv, &p, out),
                    None => out.push(format!("unknown key `{p}`")),
                }
            }
            for k in s.keys() {
                if !d.contains_key(k) {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    out.push(format!("missing key `{p}`"));
                }
            }
        }
        (Value::Array(d), Value::Array(s)) => {
            if let Some(elem) = s.first() {
                for (i, v) in d.iter().enumerate() {
                    compare_keys(v, elem, &format!("{path}[{i}]"), out);
                }
            }
        }
        _ => {}
    }
}

fn section<T: DeserializeOwned>(doc: &Value, key: &str, out: &mut Vec<String>) -> Option<T> {
    let v = doc.get(key)?;
    match serde_json::from_value(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            out.push(format!("{key}: {e}"));
            None
        }
    }
}

/// Parses and validates a config document, reporting every problem found.
pub fn validate_config(text: &str) -> std::result::Result<Config, Vec<String>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| vec![format!("invalid JSON: {e}")])?;
    if !doc.is_object() {
        return Err(vec!["config must be a JSON object".into()]);
    }
    let schema = serde_json::to_value(Config::desk()).expect("config serializes");
    let mut problems = Vec::new();
    compare_keys(&doc, &schema, "", &mut problems);
    let vocab = section(&doc, "vocab", &mut problems);
    let lm = section(&doc, "lm", &mut problems);
    let lora = section(&doc, "lora", &mut problems);
    let mole = section(&doc, "mole", &mut problems);
    let codec = section(&doc, "codec", &mut problems);
    let acoustic_lm = section(&doc, "acoustic_lm", &mut problems);
    let stages = section(&doc, "stages", &mut problems);
    let seed = section(&doc, "seed", &mut problems);
    if !problems.is_empty() {
        return Err(problems);
    }
    match (vocab, lm, lora, mole, codec, acoustic_lm, stages, seed) {
        (Some(vocab), Some(lm), Some(lora), Some(mole), Some(codec), Some(acoustic_lm), Some(stages), Some(seed)) => {
            let cfg = Config {
                vocab,
                lm,
                lora,
                mole,
                codec,
                acoustic_lm,
                stages,
                seed,
            };
            let p = cfg.problems();
            if p.is_empty() {
                Ok(cfg)
            } else {
                Err(p)
            }
        }
        _ => Err(vec!["config is incomplete".into()]),
    }
}

/// [`validate_config`] with the problems folded into one error.
pub fn load_config_text(text: &str) -> Result<Config> {
    validate_config(text).map_err(Error::Config)
}
