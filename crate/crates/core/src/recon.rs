//! Cross-modal masked image reconstruction.
//!
//! Local image features are masked position-wise (Bernoulli draws keyed by
//! `(seed, step, sample, position)`) and replaced by a learnable mask
//! vector. The masked features are completed by channel-concatenating the
//! cross-modal text-to-image features, fused by a linear map back to width
//! D, reshaped onto the region grid, and decoded by five stages of bilinear
//! x2 upsampling + 3x3 convolution + relu. A final head resizes bilinearly
//! to the exact image resolution and maps to one channel with a 1x1
//! convolution. The objective is the mean absolute pixel error, averaged
//! over the batch.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{mix3, purpose, KeyedRng};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const DECODER_STAGES: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    /// Per-position masking probability.
    pub probability: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { probability: 0.5 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) || !self.probability.is_finite() {
            return Err(Error::Config(format!(
                "mask probability ({}) must lie in [0, 1]",
                self.probability
            )));
        }
        Ok(())
    }
}

/// Per-stage output channel widths: halving from D with a floor of one.
pub fn decoder_widths(d: usize) -> Vec<usize> {
    (0..DECODER_STAGES).map(|i| (d >> (i + 1)).max(1)).collect()
}

/// Bernoulli mask flags for one sample at one step: draw `p` positions from
/// the stream keyed by `(seed, step, sample_id)`; position index is the draw
/// index within the stream.
pub fn mask_flags_for_sample(
    seed: u64,
    step: u64,
    sample_id: u64,
    positions: usize,
    probability: f64,
) -> Vec<bool> {
    let mut rng = KeyedRng::new(seed, mix3(purpose::MASK, step, sample_id));
    (0..positions).map(|_| rng.uniform() < probability).collect()
}

/// Replace flagged rows of `features` ((n x d), row per position) with the
/// learnable `mask_vec` (1 x d). Gradients reach `features` only through
/// unmasked rows and reach `mask_vec` only through masked ones.
pub fn mask_features(t: &Tape, features: Var, flags: &[bool], mask_vec: Var) -> Var {
    let shape = t.shape(features);
    assert_eq!(shape.len(), 2, "mask_features expects a matrix");
    assert_eq!(flags.len(), shape[0], "one flag per position row");
    let (n, d) = (shape[0], shape[1]);
    let mut keep = Array2::zeros((n, d));
    let mut fill = Array2::zeros((n, d));
    for (i, &flagged) in flags.iter().enumerate() {
        let (k, f) = if flagged { (0.0, 1.0) } else { (1.0, 0.0) };
        for c in 0..d {
            keep[[i, c]] = k;
            fill[[i, c]] = f;
        }
    }
    let kept = t.mul_const(features, keep.into_dyn());
    let filled = t.mul_const(t.broadcast_row(mask_vec, n), fill.into_dyn());
    t.add(kept, filled)
}

/// Decoder parameter handles on the tape.
pub struct DecoderVars {
    pub fusion_w: Var,
    pub fusion_b: Var,
    /// Five (conv weight, conv bias) pairs.
    pub stages: Vec<(Var, Var)>,
    pub head_w: Var,
    pub head_b: Var,
}

/// Fuse cross-modal and masked image features and decode to pixels.
///
/// Both feature matrices are (batch * P) x d with rows sample-major and
/// region row-major; P must be a square grid. Output is (batch, 1, h, w).
pub fn fuse_and_decode(
    t: &Tape,
    cross_modal: Var,
    masked_image: Var,
    dec: &DecoderVars,
    batch: usize,
    regions: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let grid = (regions as f64).sqrt() as usize;
    if grid * grid != regions {
        return Err(Error::Shape(format!("P ({regions}) is not a square grid")));
    }
    let (sc, sm) = (t.shape(cross_modal), t.shape(masked_image));
    if sc != sm || sc[0] != batch * regions {
        return Err(Error::Shape(format!(
            "fuse_and_decode rows {sc:?} vs {sm:?}, expected {}",
            batch * regions
        )));
    }
    let fused = t.add_row(t.matmul(t.concat_cols(cross_modal, masked_image), dec.fusion_w), dec.fusion_b);
    let mut x = t.grid_from_rows(fused, batch, grid);
    for (w, b) in &dec.stages {
        let shape = t.shape(x);
        let up = t.bilinear_resize(x, shape[2] * 2, shape[3] * 2);
        x = t.relu(t.conv2d(up, *w, *b, 1));
    }
    let resized = t.bilinear_resize(x, out_h, out_w);
    Ok(t.conv2d(resized, dec.head_w, dec.head_b, 0))
}

/// Mean absolute error per pixel, then mean over the batch (identical for
/// equal-sized images, kept as one global mean).
pub fn recon_loss(t: &Tape, reconstruction: Var, target: Var) -> Result<Var> {
    let (sr, st) = (t.shape(reconstruction), t.shape(target));
    if sr != st {
        return Err(Error::Shape(format!("recon_loss shapes {sr:?} vs {st:?}")));
    }
    Ok(t.mean_all(t.abs(t.sub(reconstruction, target))))
}
