//! Synthetic audio, the semantic and acoustic tokenizers, and the vocoder.

pub mod acoustic;
pub mod audio;
pub mod kmeans;
pub mod semantic;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use acoustic::{
    acoustic_encode, fit_acoustic_codec, vocoder_decode, AcousticCodec, AcousticGrid, CodecConfig,
    CodecFitReport, Rvq,
};
pub use audio::{oracle_transcribe, read_wav, render, write_wav, Waveform, FRAME_LEN, SAMPLE_RATE};
pub use semantic::{fit_semantic_codebook, semantic_encode, SemanticCodebook};

use crate::data::random_text;
use crate::error::{Error, Result};

/// Both tokenizers of the speech side.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub semantic: SemanticCodebook,
    pub acoustic: AcousticCodec,
}

/// Frames for fitting: every frame of `corpus_strings` rendered random
/// strings, a noisy copy of each, and silent frames. The noise makes the
/// corpus hold many more distinct points than any codebook has entries;
/// the clean frames keep the exact tones represented.
pub fn training_frames(cfg: &CodecConfig, rng: &mut impl Rng) -> Result<Vec<f32>> {
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Contract(format!("noise distribution: {e}")))?;
    let mut clean = Vec::new();
    for _ in 0..cfg.corpus_strings {
        clean.extend(render(&random_text(rng, 3, 12))?.samples);
    }
    let silent_frames = clean.len() / FRAME_LEN / 16;
    clean.extend(std::iter::repeat_n(0.0, silent_frames * FRAME_LEN));
    let mut out = clean.clone();
    out.extend(clean.iter().map(|&v| v + noise.sample(rng) as f32));
    Ok(out)
}

/// Fits the semantic codebook and the acoustic codec on one corpus.
pub fn fit_codec(cfg: &CodecConfig, rng: &mut impl Rng) -> Result<(Codec, CodecFitReport)> {
    let frames = training_frames(cfg, rng)?;
    let feats = semantic::waveform_features(&Waveform::new(frames.clone()))?;
    let semantic = fit_semantic_codebook(&feats, cfg.semantic_size, cfg.kmeans_iters, rng)?;
    let (acoustic, report) = fit_acoustic_codec(&frames, cfg, rng)?;
    Ok((Codec { semantic, acoustic }, report))
}
