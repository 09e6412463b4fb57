//! Metrics and the forgetting report.
//!
//! Listening tests are replaced by two objective measures: character
//! error rate of the oracle transcription, and codec SNR. Report headers
//! say so.

use serde::{Deserialize, Serialize};

use crate::aclm::AcousticLm;
use crate::codec::{oracle_transcribe, Codec, Waveform};
use crate::data::qa_items;
use crate::error::{Error, Result};
use crate::lm::TokenModel;
use crate::config::Config;
use crate::pipeline::{answer_batch, speech_qa_batch, synthesize_batch, LmArtifacts};

/// SNR reported for an exact reconstruction.
pub const SNR_CAP_DB: f64 = 300.0;

/// The reference pattern of text accuracy (%) for the base model, the TTS
/// expert, the text expert, and the mixture.
pub const REFERENCE_PATTERN: [(&str, f64); 4] = [
    ("base_lm", 67.1),
    ("tts_expert", 27.2),
    ("text_expert", 56.7),
    ("mole", 54.8),
];

/// Levenshtein distance over characters divided by the reference length.
pub fn char_error_rate(hyp: &str, reference: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(Error::Contract("character error rate needs a non-empty reference".into()));
    }
    Ok(strsim::levenshtein(hyp, reference) as f64 / n as f64)
}

/// `10·log10(‖ref‖² / ‖ref − rec‖²)`, capped at [`SNR_CAP_DB`].
pub fn codec_snr(reference: &Waveform, reconstruction: &Waveform) -> Result<f64> {
    if reference.len() != reconstruction.len() {
        return Err(Error::Contract(format!(
            "SNR over waveforms of {} and {} samples",
            reference.len(),
            reconstruction.len()
        )));
    }
    let (mut signal, mut noise) = (0.0f64, 0.0f64);
    for (&a, &b) in reference.samples.iter().zip(&reconstruction.samples) {
        signal += (a as f64).powi(2);
        noise += (a as f64 - b as f64).powi(2);
    }
    if signal == 0.0 {
        return Err(Error::Contract("SNR of an all-zero reference".into()));
    }
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).min(SNR_CAP_DB))
}

/// Codec round trip over rendered strings, pooled over all samples.
pub fn codec_round_trip_snr(codec: &Codec, texts: &[String]) -> Result<f64> {
    let mut reference = Vec::new();
    let mut rec = Vec::new();
    for t in texts {
        let w = crate::codec::render(t)?;
        rec.extend(codec.acoustic.decode(&codec.acoustic.encode(&w)?)?.samples);
        reference.extend(w.samples);
    }
    codec_snr(&Waveform::new(reference), &Waveform::new(rec))
}

/// Percentage of QA items answered exactly under greedy decoding.
pub fn text_accuracy<M: TokenModel<f32> + ?Sized>(model: &M, items: &[(String, String)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Contract("text accuracy over an empty set".into()));
    }
    let mut hits = 0usize;
    for chunk in items.chunks(50) {
        let qs: Vec<String> = chunk.iter().map(|(q, _)| q.clone()).collect();
        for (got, (_, want)) in answer_batch(model, &qs)?.iter().zip(chunk) {
            hits += usize::from(got == want);
        }
    }
    Ok(100.0 * hits as f64 / items.len() as f64)
}

/// Pooled oracle CER (%) of synthesized speech; a failed synthesis counts
/// as an empty transcription.
pub fn tts_cer<M: TokenModel<f32> + ?Sized>(
    model: &M,
    codec: &Codec,
    aclm: &AcousticLm<f32>,
    texts: &[String],
) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Contract("TTS CER over an empty set".into()));
    }
    let (mut edits, mut chars) = (0usize, 0usize);
    for chunk in texts.chunks(25) {
        for (w, t) in synthesize_batch(model, codec, aclm, chunk)?.into_iter().zip(chunk) {
            // Failed synthesis or unframeable audio transcribes as nothing.
            let hyp = w.ok().and_then(|w| oracle_transcribe(&w).ok()).unwrap_or_default();
            edits += strsim::levenshtein(&hyp, t);
            chars += t.chars().count();
        }
    }
    Ok(100.0 * edits as f64 / chars as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeechQaReport {
    /// Outputs in the `text, <speech>, semantic, <eos>` layout (%).
    pub layout_ok: f64,
    pub text_correct: f64,
    /// Text correct and the transcribed speech equals it (%).
    pub spoken_correct: f64,
}

pub fn speech_qa_eval<M: TokenModel<f32> + ?Sized>(model: &M, codec: &Codec, aclm: &AcousticLm<f32>) -> Result<SpeechQaReport> {
    let items = qa_items();
    let (mut layout, mut text, mut spoken) = (0usize, 0usize, 0usize);
    for chunk in items.chunks(50) {
        let qs: Vec<String> = chunk.iter().map(|(q, _)| q.clone()).collect();
        for (ans, (_, want)) in speech_qa_batch(model, codec, aclm, &qs)?.iter().zip(chunk) {
            layout += usize::from(ans.format_error.is_none());
            let ok = &ans.text == want;
            text += usize::from(ok);
            if let (true, Some(w)) = (ok, &ans.waveform) {
                spoken += usize::from(oracle_transcribe(w).is_ok_and(|h| &h == want));
            }
        }
    }
    let pct = |n: usize| 100.0 * n as f64 / items.len() as f64;
    Ok(SpeechQaReport {
        layout_ok: pct(layout),
        text_correct: pct(text),
        spoken_correct: pct(spoken),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    /// Checkpoint the row was measured from.
    pub source: String,
    pub text_accuracy: f64,
    pub tts_cer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub rows: Vec<ReportRow>,
}

/// The ordering checks of the report, as `(description, holds)`.
pub type Check = (String, bool);

impl ForgettingReport {
    pub fn new(rows: Vec<ReportRow>) -> Result<Self> {
        for r in &rows {
            let bad = |v: f64| !(0.0..=100.0).contains(&v);
            if bad(r.text_accuracy) {
                return Err(Error::Contract(format!("{}: text accuracy {} outside [0, 100]", r.name, r.text_accuracy)));
            }
            if r.source.is_empty() {
                return Err(Error::Contract(format!("{}: row has no source checkpoint", r.name)));
            }
        }
        for (name, _) in REFERENCE_PATTERN {
            if !rows.iter().any(|r| r.name == name) {
                return Err(Error::Dependency(format!("forgetting report is missing the {name} row")));
            }
        }
        Ok(Self { rows })
    }

    pub fn row(&self, name: &str) -> &ReportRow {
        self.rows.iter().find(|r| r.name == name).expect("rows checked at construction")
    }

    /// The qualitative pattern: the TTS expert forgets, the text expert
    /// and the mixture recover, and the mixture keeps the TTS quality.
    pub fn checks(&self) -> Vec<Check> {
        let acc = |n: &str| self.row(n).text_accuracy;
        let (base, tts, text, mole) = (acc("base_lm"), acc("tts_expert"), acc("text_expert"), acc("mole"));
        let mut out = vec![
            (format!("tts_expert text accuracy {tts:.1} <= base {base:.1} - 30"), tts <= base - 30.0),
            (format!("mole text accuracy {mole:.1} within 5 of text_expert {text:.1}"), (mole - text).abs() <= 5.0),
            (format!("base {base:.1} > text_expert {text:.1} or both at ceiling"), base > text || (base >= 99.0 && text >= 99.0)),
            (format!("mole {mole:.1} well above tts_expert {tts:.1}"), mole >= tts + 30.0),
        ];
        if let (Some(t), Some(m)) = (self.row("tts_expert").tts_cer, self.row("mole").tts_cer) {
            out.push((format!("mole TTS CER {m:.1} <= tts_expert {t:.1} + 2"), m <= t + 2.0));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,source,text_accuracy_pct,tts_cer_pct\n");
        for r in &self.rows {
            let cer = r.tts_cer.map(|c| format!("{c:.2}")).unwrap_or_default();
            s.push_str(&format!("{},{},{:.2},{}\n", r.name, r.source, r.text_accuracy, cer));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("Catastrophic forgetting report (toy text QA)\n");
        s.push_str("Speech quality is scored by oracle-transcription CER, not by listening tests (MOS);\n");
        s.push_str("these numbers are not perceptual scores.\n\n");
        s.push_str(&format!("{:<12} {:>10} {:>10}  {}\n", "model", "text acc %", "TTS CER %", "source"));
        for r in &self.rows {
            let cer = r.tts_cer.map(|c| format!("{c:.2}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{:<12} {:>10.2} {:>10}  {}\n", r.name, r.text_accuracy, cer, r.source));
        }
        s.push_str("\nChecks:\n");
        for (what, ok) in self.checks() {
            s.push_str(&format!("  [{}] {what}\n", if ok { "ok" } else { "FAIL" }));
        }
        let pattern: Vec<String> = REFERENCE_PATTERN.iter().map(|(_, v)| format!("{v}")).collect();
        s.push_str(&format!(
            "\nReference pattern at full scale (MMLU %, base -> TTS -> text expert -> MoLE): {}\n",
            pattern.join(" / ")
        ));
        s
    }
}

/// Artifacts of one stage and the checkpoint they were read from.
pub type Sourced<'a> = (&'a LmArtifacts, &'a str);

/// Measures the four report rows: the base model, the TTS expert, the
/// text expert, and the mixture.
pub fn forgetting_report(
    cfg: &Config,
    stages: [Sourced<'_>; 4],
    codec: &Codec,
    aclm: &AcousticLm<f32>,
    heldout: &[String],
) -> Result<ForgettingReport> {
    let [(base, base_src), (s1, s1_src), (s2, s2_src), (s3, s3_src)] = stages;
    let items = qa_items();
    let tts = s1.adapted("tts")?;
    let text = s2.adapted("text_qa")?;
    let mole = s3.mole(cfg)?;
    let row = |name: &str, src: &str, acc: f64, cer: Option<f64>| ReportRow {
        name: name.into(),
        source: src.into(),
        text_accuracy: acc,
        tts_cer: cer,
    };
    ForgettingReport::new(vec![
        row("base_lm", base_src, text_accuracy(&base.lm, &items)?, None),
        row("tts_expert", s1_src, text_accuracy(&tts, &items)?, Some(tts_cer(&tts, codec, aclm, heldout)?)),
        row("text_expert", s2_src, text_accuracy(&text, &items)?, None),
        row("mole", s3_src, text_accuracy(&mole, &items)?, Some(tts_cer(&mole, codec, aclm, heldout)?)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cer_examples() {
        assert_eq!(char_error_rate("abc", "abc").unwrap(), 0.0);
        assert!((char_error_rate("abd", "abc").unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(char_error_rate("x", "").is_err());
    }

    #[test]
    fn snr_conventions() {
        let a = Waveform::new(vec![0.5, -0.25, 0.1]);
        assert_eq!(codec_snr(&a, &a).unwrap(), SNR_CAP_DB);
        let z = Waveform::new(vec![0.0; 3]);
        assert!(codec_snr(&a, &z).unwrap().abs() < 1e-12);
        assert!(codec_snr(&a, &Waveform::new(vec![0.0; 2])).is_err());
    }
}
