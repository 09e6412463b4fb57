//! The synthetic tone domain: renderer, oracle transcriber, framing, DFT
//! helpers and WAV I/O.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::vocab::{symbol_index, SYMBOLS};

pub const SAMPLE_RATE: u32 = 8000;
pub const FRAME_LEN: usize = 64;
pub const FRAMES_PER_SYMBOL: usize = 4;
pub const SYMBOL_LEN: usize = FRAME_LEN * FRAMES_PER_SYMBOL;
pub const AMPLITUDE: f64 = 0.5;
/// Number of non-negative-frequency DFT bins of one frame.
pub const SPECTRUM_BINS: usize = FRAME_LEN / 2 + 1;
/// A frame whose strongest tone bin is weaker than this is silent.
const SILENCE_MAGNITUDE: f64 = 0.5;
const FIRST_TONE_BIN: usize = 2;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits into 64-sample frames.
    pub fn frames(&self) -> Result<std::slice::ChunksExact<'_, f32>> {
        if self.samples.len() % FRAME_LEN != 0 {
            return Err(Error::Framing(format!(
                "{} samples is not a multiple of the {FRAME_LEN}-sample frame",
                self.samples.len()
            )));
        }
        Ok(self.samples.chunks_exact(FRAME_LEN))
    }

    pub fn frame_count(&self) -> usize {
        self.samples.len() / FRAME_LEN
    }
}

/// Tone frequency of alphabet symbol `i` in Hz.
pub fn symbol_frequency(i: usize) -> f64 {
    (i + FIRST_TONE_BIN) as f64 * 125.0
}

/// Renders each symbol as 256 samples of its tone, phase reset per symbol.
pub fn render(text: &str) -> Result<Waveform> {
    let mut samples = Vec::with_capacity(text.chars().count() * SYMBOL_LEN);
    for c in text.chars() {
        let f = symbol_frequency(symbol_index(c)?);
        let w = 2.0 * std::f64::consts::PI * f / SAMPLE_RATE as f64;
        samples.extend((0..SYMBOL_LEN).map(|n| (AMPLITUDE * (w * n as f64).sin()) as f32));
    }
    Ok(Waveform::new(samples))
}

/// 64-point DFT magnitudes of single frames.
#[derive(Clone)]
pub struct FrameDft {
    fft: Arc<dyn Fft<f64>>,
}

impl Default for FrameDft {
    fn default() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(FRAME_LEN),
        }
    }
}

impl std::fmt::Debug for FrameDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FrameDft")
    }
}

impl FrameDft {
    /// `|X_k|` for `k` in `0..=32`.
    pub fn magnitudes(&self, frame: &[f32]) -> [f64; SPECTRUM_BINS] {
        debug_assert_eq!(frame.len(), FRAME_LEN);
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x as f64, 0.0)).collect();
        self.fft.process(&mut buf);
        let mut out = [0.0; SPECTRUM_BINS];
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = c.norm();
        }
        out
    }

    /// The alphabet symbol whose tone bin is strongest, or `None` for a
    /// silent frame. Ties go to the lowest bin.
    pub fn frame_symbol(&self, frame: &[f32]) -> Option<usize> {
        let mags = self.magnitudes(frame);
        let tone = &mags[FIRST_TONE_BIN..FIRST_TONE_BIN + SYMBOLS.len()];
        let mut best = 0;
        for (i, m) in tone.iter().enumerate() {
            if *m > tone[best] {
                best = i;
            }
        }
        (tone[best] >= SILENCE_MAGNITUDE).then_some(best)
    }
}

/// Inverts [`render`]: per 256-sample block, the majority of the four
/// frames' strongest tone bins (lowest bin on ties). Blocks with no
/// audible frame read as `' '`.
pub fn oracle_transcribe(w: &Waveform) -> Result<String> {
    if w.len() % SYMBOL_LEN != 0 {
        return Err(Error::Framing(format!(
            "{} samples is not a multiple of the {SYMBOL_LEN}-sample symbol block",
            w.len()
        )));
    }
    let dft = FrameDft::default();
    let mut out = String::with_capacity(w.len() / SYMBOL_LEN);
    for block in w.samples.chunks_exact(SYMBOL_LEN) {
        let mut votes = [0usize; SYMBOLS.len()];
        for frame in block.chunks_exact(FRAME_LEN) {
            if let Some(s) = dft.frame_symbol(frame) {
                votes[s] += 1;
            }
        }
        let mut best = 0;
        for (i, v) in votes.iter().enumerate() {
            if *v > votes[best] {
                best = i;
            }
        }
        out.push(if votes[best] == 0 { ' ' } else { SYMBOLS[best] });
    }
    Ok(out)
}

/// Writes 16-bit PCM mono WAV at 8000 Hz; samples are clamped to [−1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE || spec.bits_per_sample != 16 {
        return Err(Error::Format {
            record: path.display().to_string(),
            detail: format!("expected 16-bit mono at {SAMPLE_RATE} Hz, found {spec:?}"),
        });
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples))
}
