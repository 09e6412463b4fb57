//! Prompted samples for the three tasks and their layout contracts.
//!
//! Every sample is `[<bos>, <sys_*>, <user>, payload…, <assistant>]`
//! followed by a target; the loss covers target positions only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{
    char_id, UnifiedVocab, ASSISTANT, BOS, EOS, SPEECH, SYMBOLS, SYS_QA, SYS_SQA, SYS_TTS, USER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Tts,
    TextQa,
    SpeechQa,
}

impl TaskKind {
    pub fn system_id(self) -> u32 {
        match self {
            TaskKind::Tts => SYS_TTS,
            TaskKind::TextQa => SYS_QA,
            TaskKind::SpeechQa => SYS_SQA,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Tts => "tts",
            TaskKind::TextQa => "text_qa",
            TaskKind::SpeechQa => "speech_qa",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedSample {
    pub kind: TaskKind,
    /// The payload in characters (TTS text or QA question).
    pub payload: String,
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

impl PromptedSample {
    pub fn sequence(&self) -> Vec<u32> {
        let mut s = self.input.clone();
        s.extend_from_slice(&self.target);
        s
    }

    /// Per-position next-token targets: the following token where it lies
    /// in the target, `None` elsewhere.
    pub fn loss_targets(&self) -> Vec<Option<usize>> {
        let n = self.input.len() + self.target.len();
        (0..n)
            .map(|i| {
                let next = i + 1;
                (next >= self.input.len() && next < n).then(|| self.target[next - self.input.len()] as usize)
            })
            .collect()
    }

    /// Checks the task's layout contract against `vocab`.
    pub fn check(&self, vocab: &UnifiedVocab) -> Result<()> {
        let bad = |why: &str| Err(Error::Data(format!("{} sample {:?}: {why}", self.kind.name(), self.payload)));
        let n = self.input.len();
        if n < 4
            || self.input[..3] != [BOS, self.kind.system_id(), USER]
            || self.input[n - 1] != ASSISTANT
        {
            return bad("malformed prompt");
        }
        if self.target.last() != Some(&EOS) {
            return bad("target does not end in <eos>");
        }
        let body = &self.target[..self.target.len() - 1];
        let text_ok = |ids: &[u32]| ids.iter().all(|&t| t < SYMBOLS.len() as u32);
        match self.kind {
            TaskKind::Tts => {
                if body.is_empty() || !body.iter().all(|&t| vocab.is_semantic(t)) {
                    return bad("target must be semantic ids");
                }
            }
            TaskKind::TextQa => {
                if body.is_empty() || !text_ok(body) {
                    return bad("target must be answer characters");
                }
            }
            TaskKind::SpeechQa => {
                let Some(split) = body.iter().position(|&t| t == SPEECH) else {
                    return bad("no <speech> id");
                };
                let (text, speech) = (&body[..split], &body[split + 1..]);
                if text.is_empty() || !text_ok(text) {
                    return bad("text part must be answer characters");
                }
                if speech.is_empty() || !speech.iter().all(|&t| vocab.is_semantic(t)) {
                    return bad("speech part must be semantic ids");
                }
            }
        }
        Ok(())
    }
}

/// `[<bos>, sys, <user>, chars…, <assistant>]`.
pub fn prompt(kind: TaskKind, payload: &str) -> Result<Vec<u32>> {
    let mut ids = vec![BOS, kind.system_id(), USER];
    for c in payload.chars() {
        ids.push(char_id(c)?);
    }
    ids.push(ASSISTANT);
    Ok(ids)
}

/// The 100 single-digit addition questions `"a+b=?"` in canonical order.
pub fn qa_items() -> Vec<(String, String)> {
    (0..10)
        .flat_map(|a| (0..10).map(move |b| (format!("{a}+{b}=?"), ((a + b) % 10).to_string())))
        .collect()
}

/// Answers a toy question, or `None` when it is not one.
pub fn answer_question(q: &str) -> Option<String> {
    let b = q.as_bytes();
    if b.len() != 5 || b[1] != b'+' || &b[3..] != b"=?" || !b[0].is_ascii_digit() || !b[2].is_ascii_digit() {
        return None;
    }
    Some((((b[0] - b'0') + (b[2] - b'0')) % 10).to_string())
}

pub fn text_qa_sample(question: &str, answer: &str) -> Result<PromptedSample> {
    let mut target = answer.chars().map(char_id).collect::<Result<Vec<_>>>()?;
    target.push(EOS);
    Ok(PromptedSample {
        kind: TaskKind::TextQa,
        payload: question.to_string(),
        input: prompt(TaskKind::TextQa, question)?,
        target,
    })
}

pub fn tts_sample(text: &str, semantic: &[u32]) -> Result<PromptedSample> {
    let mut target = semantic.to_vec();
    target.push(EOS);
    Ok(PromptedSample {
        kind: TaskKind::Tts,
        payload: text.to_string(),
        input: prompt(TaskKind::Tts, text)?,
        target,
    })
}

/// Chain-of-modality target: answer characters, `<speech>`, the answer's
/// semantic ids, `<eos>`.
pub fn speech_qa_sample(question: &str, answer: &str, semantic: &[u32]) -> Result<PromptedSample> {
    let mut target = answer.chars().map(char_id).collect::<Result<Vec<_>>>()?;
    target.push(SPEECH);
    target.extend_from_slice(semantic);
    target.push(EOS);
    Ok(PromptedSample {
        kind: TaskKind::SpeechQa,
        payload: question.to_string(),
        input: prompt(TaskKind::SpeechQa, question)?,
        target,
    })
}

/// A random string over the tone alphabet with length in `[min_len, max_len]`.
pub fn random_text(rng: &mut impl Rng, min_len: usize, max_len: usize) -> String {
    let n = rng.random_range(min_len..=max_len);
    (0..n).map(|_| SYMBOLS[rng.random_range(0..SYMBOLS.len())]).collect()
}
