//! The unified token space shared by text and speech.
//!
//! Text ids occupy `[0, n_text)` and semantic-speech ids occupy
//! `[n_text, n_text + n_semantic)`. Inside the text range the layout is
//! fixed: 16 renderable symbols, three operators, nine control ids, then
//! reserved ids up to `n_text`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Renderable symbols in tone order; symbol `i` has text id `i`.
pub const SYMBOLS: [char; 16] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', 'a', 'b', 'c', 'd', 'e', ' ',
];
pub const OPERATORS: [char; 3] = ['+', '=', '?'];

pub const BOS: u32 = 19;
pub const EOS: u32 = 20;
pub const PAD: u32 = 21;
pub const USER: u32 = 22;
pub const ASSISTANT: u32 = 23;
pub const SPEECH: u32 = 24;
pub const SYS_TTS: u32 = 25;
pub const SYS_QA: u32 = 26;
pub const SYS_SQA: u32 = 27;

/// Number of text ids with an assigned role.
pub const NAMED_TEXT_IDS: u32 = 28;

/// The English system prompt each system control id stands for. The
/// character-level toy tokenizer cannot spell them, so one id carries
/// the whole prompt.
pub const SYSTEM_PROMPTS: [(u32, &str); 3] = [
    (
        SYS_TTS,
        "Transform the input written-form English text into non-language tokens that represent the corresponding speech in audio",
    ),
    (SYS_QA, "You are a helpful AI assistant"),
    (
        SYS_SQA,
        "Answer the input text questions using non-language tokens that represent the corresponding speech",
    ),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Symbol(char),
    Operator(char),
    Control(&'static str),
    Reserved,
    Semantic(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnifiedVocab {
    pub n_text: u32,
    pub n_semantic: u32,
}

impl Default for UnifiedVocab {
    fn default() -> Self {
        Self {
            n_text: 64,
            n_semantic: 64,
        }
    }
}

impl UnifiedVocab {
    pub fn total(&self) -> usize {
        (self.n_text + self.n_semantic) as usize
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_text < NAMED_TEXT_IDS {
            out.push(format!(
                "vocab.n_text must be at least {NAMED_TEXT_IDS} to hold the named text ids"
            ));
        }
        if self.n_semantic == 0 {
            out.push("vocab.n_semantic must be positive".into());
        }
        out
    }

    pub fn role(&self, id: u32) -> Option<TokenRole> {
        let role = match id {
            i if i < 16 => TokenRole::Symbol(SYMBOLS[i as usize]),
            i if i < 19 => TokenRole::Operator(OPERATORS[(i - 16) as usize]),
            BOS => TokenRole::Control("<bos>"),
            EOS => TokenRole::Control("<eos>"),
            PAD => TokenRole::Control("<pad>"),
            USER => TokenRole::Control("<user>"),
            ASSISTANT => TokenRole::Control("<assistant>"),
            SPEECH => TokenRole::Control("<speech>"),
            SYS_TTS => TokenRole::Control("<sys_tts>"),
            SYS_QA => TokenRole::Control("<sys_qa>"),
            SYS_SQA => TokenRole::Control("<sys_sqa>"),
            i if i < self.n_text => TokenRole::Reserved,
            i if i < self.n_text + self.n_semantic => TokenRole::Semantic(i - self.n_text),
            _ => return None,
        };
        Some(role)
    }

    pub fn is_text(&self, id: u32) -> bool {
        id < self.n_text
    }

    pub fn is_semantic(&self, id: u32) -> bool {
        id >= self.n_text && id < self.n_text + self.n_semantic
    }

    pub fn semantic_id(&self, index: u32) -> u32 {
        debug_assert!(index < self.n_semantic);
        self.n_text + index
    }

    pub fn semantic_range(&self) -> std::ops::Range<u32> {
        self.n_text..self.n_text + self.n_semantic
    }

    /// Text ids of a string over symbols and operators.
    pub fn encode_text(&self, s: &str) -> Result<Vec<u32>> {
        s.chars().map(char_id).collect()
    }

    /// Renders text ids back to characters; non-printable ids are skipped.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| match self.role(id) {
                Some(TokenRole::Symbol(c)) | Some(TokenRole::Operator(c)) => Some(c),
                _ => None,
            })
            .collect()
    }
}

pub fn char_id(c: char) -> Result<u32> {
    if let Some(i) = SYMBOLS.iter().position(|&s| s == c) {
        return Ok(i as u32);
    }
    if let Some(i) = OPERATORS.iter().position(|&s| s == c) {
        return Ok(16 + i as u32);
    }
    Err(Error::Alphabet(c))
}

/// Index of a renderable symbol in tone order.
pub fn symbol_index(c: char) -> Result<usize> {
    SYMBOLS
        .iter()
        .position(|&s| s == c)
        .ok_or(Error::Alphabet(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_id_has_one_role() {
        let v = UnifiedVocab::default();
        let mut symbols = 0;
        let mut semantic = 0;
        for id in 0..v.total() as u32 {
            match v.role(id).unwrap() {
                TokenRole::Symbol(_) => symbols += 1,
                TokenRole::Semantic(i) => {
                    assert_eq!(v.semantic_id(i), id);
                    semantic += 1
                }
                _ => {}
            }
        }
        assert_eq!(symbols, 16);
        assert_eq!(semantic, 64);
        assert!(v.role(128).is_none());
    }

    #[test]
    fn text_round_trip() {
        let v = UnifiedVocab::default();
        let ids = v.encode_text("3a 7e+1=?").unwrap();
        assert_eq!(v.decode_text(&ids), "3a 7e+1=?");
        assert!(matches!(v.encode_text("x"), Err(Error::Alphabet('x'))));
    }
}
