//! Single-codebook semantic tokenizer over log-magnitude frame spectra.

use rand::Rng;

use super::audio::{FrameDft, Waveform, SPECTRUM_BINS};
use super::kmeans::{fit_kmeans, nearest, KMeansOptions, Points};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vocab::UnifiedVocab;

const LOG_FLOOR: f64 = 1e-6;

/// `log(1e-6 + |X_k|)` for DFT bins `0..=32` of one frame.
pub fn frame_features(dft: &FrameDft, frame: &[f32]) -> [f64; SPECTRUM_BINS] {
    dft.magnitudes(frame).map(|m| (LOG_FLOOR + m).ln())
}

/// Features of every frame of `w`, row-major.
pub fn waveform_features(w: &Waveform) -> Result<Vec<f64>> {
    let dft = FrameDft::default();
    let mut out = Vec::with_capacity(w.frame_count() * SPECTRUM_BINS);
    for f in w.frames()? {
        out.extend_from_slice(&frame_features(&dft, f));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticCodebook {
    /// `[K_sem, 33]`.
    pub centroids: Tensor<f32>,
}

impl SemanticCodebook {
    pub fn new(centroids: Tensor<f32>) -> Result<Self> {
        let (_, dim) = centroids.dims2()?;
        if dim != SPECTRUM_BINS {
            return Err(Error::Shape(format!("semantic centroids have width {dim}, expected {SPECTRUM_BINS}")));
        }
        if !centroids.all_finite() {
            return Err(Error::Numeric {
                param: "semantic/centroids".into(),
                detail: "non-finite centroid".into(),
            });
        }
        Ok(Self { centroids })
    }

    pub fn size(&self) -> usize {
        self.centroids.shape()[0]
    }

    fn centroids_f64(&self) -> Vec<f64> {
        self.centroids.data().iter().map(|&v| v as f64).collect()
    }

    /// Codebook index per frame (nearest centroid, lowest index on ties).
    pub fn encode_indices(&self, w: &Waveform) -> Result<Vec<usize>> {
        let feats = waveform_features(w)?;
        let c = self.centroids_f64();
        Ok(feats
            .chunks_exact(SPECTRUM_BINS)
            .map(|f| nearest(&c, SPECTRUM_BINS, f).0)
            .collect())
    }
}

/// Fits `k` centroids to feature rows (`n × 33`).
pub fn fit_semantic_codebook(
    features: &[f64],
    k: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<SemanticCodebook> {
    let points = Points::new(features, SPECTRUM_BINS)?;
    let fit = fit_kmeans(&points, &KMeansOptions { k, max_iters: iters, pin_zero: false }, rng)?;
    let c = Tensor::new(vec![k, SPECTRUM_BINS], fit.centroids.iter().map(|&v| v as f32).collect())?;
    SemanticCodebook::new(c)
}

/// One semantic token id per frame, in the LM's semantic id range.
pub fn semantic_encode(w: &Waveform, cb: &SemanticCodebook, vocab: &UnifiedVocab) -> Result<Vec<u32>> {
    if cb.size() != vocab.n_semantic as usize {
        return Err(Error::Contract(format!(
            "codebook of {} entries for {} semantic ids",
            cb.size(),
            vocab.n_semantic
        )));
    }
    Ok(cb
        .encode_indices(w)?
        .into_iter()
        .map(|i| vocab.semantic_id(i as u32))
        .collect())
}
