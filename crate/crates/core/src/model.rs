//! Model assembly: parameter container, batch packing, and the forward pass
//! from pixels/tokens to every loss term.
//!
//! Ragged reports are packed: all real sentences of a batch are stacked into
//! one row matrix with per-sample offsets, so no padded row ever enters a
//! pooling, attention, loss, or clustering computation.

use crate::attention::{cross_attend, AttnVars};
use crate::autodiff::{Tape, Var};
use crate::corpus::{CorpusConfig, PairedSample};
use crate::encoders::{attention_pool, encode_image, encode_text, image_to_patches, mlp, MlpVars};
use crate::error::{Error, Result};
use crate::losses::{
    capture_simsiam, compose_total, global_infonce, simsiam_local_image, LossBreakdown,
    LossWeights, SimSiamFrozen,
};
use crate::mining::{
    bml_loss, cluster_and_select, false_negative_denominator_mask, hard_negative_matrices,
    local_report_loss, CgnsConfig, ClusterOutcome,
};
use crate::recon::{
    decoder_widths, fuse_and_decode, mask_features, mask_flags_for_sample, recon_loss,
    DecoderVars, MaskSpec, DECODER_STAGES,
};
use crate::rng::{mix2, purpose, KeyedRng};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image local feature width before projection.
    pub c_img: usize,
    /// Text local feature width before projection.
    pub c_txt: usize,
    /// Common projected dimension.
    pub d: usize,
    /// Share one Q/K/V triple across both attention directions.
    pub xattn_shared: bool,
    pub mask: MaskSpec,
    pub cgns: CgnsConfig,
    pub weights: LossWeights,
    /// Clustering-guided negatives and margin loss on/off (ablation).
    pub cgns_enabled: bool,
    /// Masked reconstruction on/off (ablation).
    pub mir_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_img: 40,
            c_txt: 24,
            d: 32,
            xattn_shared: false,
            mask: MaskSpec::default(),
            cgns: CgnsConfig::default(),
            weights: LossWeights::default(),
            cgns_enabled: true,
            mir_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_img == 0 || self.c_txt == 0 || self.d == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        self.mask.validate()?;
        self.cgns.validate()?;
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: ArrayD<f64>,
    pub b1: ArrayD<f64>,
    pub w2: ArrayD<f64>,
    pub b2: ArrayD<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub q: ArrayD<f64>,
    pub k: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
}

/// Every learnable tensor. Field order is the canonical checkpoint and
/// optimizer order; `named` and `ParamVars::create` must list fields
/// identically.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_w: ArrayD<f64>,
    pub patch_b: ArrayD<f64>,
    pub tok_embed: ArrayD<f64>,
    pub mix_w: ArrayD<f64>,
    pub mix_b: ArrayD<f64>,
    pub pool_q_img: ArrayD<f64>,
    pub pool_q_txt: ArrayD<f64>,
    pub proj_local_img: MlpParams,
    pub proj_local_txt: MlpParams,
    pub proj_global_img: MlpParams,
    pub proj_global_txt: MlpParams,
    pub xattn_text: AttnParams,
    pub xattn_image: AttnParams,
    pub simsiam_head: MlpParams,
    pub mask_vec: ArrayD<f64>,
    pub fusion_w: ArrayD<f64>,
    pub fusion_b: ArrayD<f64>,
    pub dec_stages: Vec<ConvParams>,
    pub dec_head: ConvParams,
}

fn uniform(rng: &mut KeyedRng, dims: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    ArrayD::from_shape_vec(IxDyn(dims), data).unwrap()
}

fn zeros(dims: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(dims))
}

fn init_mlp(rng: &mut KeyedRng, cin: usize, d: usize) -> MlpParams {
    MlpParams {
        w1: uniform(rng, &[cin, d], cin),
        b1: zeros(&[1, d]),
        w2: uniform(rng, &[d, d], d),
        b2: zeros(&[1, d]),
    }
}

fn init_attn(rng: &mut KeyedRng, d: usize) -> AttnParams {
    AttnParams {
        q: uniform(rng, &[d, d], d),
        k: uniform(rng, &[d, d], d),
        v: uniform(rng, &[d, d], d),
    }
}

impl ModelParams {
    /// Deterministic initialization from one shared stream: weights uniform
    /// in +-1/sqrt(fan_in), biases and pooling queries zero.
    pub fn init(mcfg: &ModelConfig, ccfg: &CorpusConfig, seed: u64) -> Result<Self> {
        mcfg.validate()?;
        ccfg.validate()?;
        let mut rng = KeyedRng::new(seed, purpose::INIT);
        let px = (ccfg.image_res * ccfg.image_res) as usize;
        let (ci, ct, d) = (mcfg.c_img, mcfg.c_txt, mcfg.d);
        let widths = decoder_widths(d);
        let mut dec_stages = Vec::with_capacity(DECODER_STAGES);
        let mut cin = d;
        for &cout in &widths {
            dec_stages.push(ConvParams {
                w: uniform(&mut rng, &[cout, cin, 3, 3], cin * 9),
                b: zeros(&[cout]),
            });
            cin = cout;
        }
        Ok(Self {
            patch_w: uniform(&mut rng, &[px, ci], px),
            patch_b: zeros(&[1, ci]),
            tok_embed: uniform(&mut rng, &[ccfg.vocab_size as usize, ct], ct),
            mix_w: uniform(&mut rng, &[ct, ct], ct),
            mix_b: zeros(&[1, ct]),
            pool_q_img: zeros(&[1, ci]),
            pool_q_txt: zeros(&[1, ct]),
            proj_local_img: init_mlp(&mut rng, ci, d),
            proj_local_txt: init_mlp(&mut rng, ct, d),
            proj_global_img: init_mlp(&mut rng, ci, d),
            proj_global_txt: init_mlp(&mut rng, ct, d),
            xattn_text: init_attn(&mut rng, d),
            xattn_image: init_attn(&mut rng, d),
            simsiam_head: init_mlp(&mut rng, d, d),
            mask_vec: uniform(&mut rng, &[1, d], d),
            fusion_w: uniform(&mut rng, &[2 * d, d], 2 * d),
            fusion_b: zeros(&[1, d]),
            dec_stages,
            dec_head: ConvParams {
                w: uniform(&mut rng, &[1, cin, 1, 1], cin),
                b: zeros(&[1]),
            },
        })
    }

    pub fn named(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out: Vec<(String, &ArrayD<f64>)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("tok_embed".into(), &self.tok_embed),
            ("mix_w".into(), &self.mix_w),
            ("mix_b".into(), &self.mix_b),
            ("pool_q_img".into(), &self.pool_q_img),
            ("pool_q_txt".into(), &self.pool_q_txt),
        ];
        for (name, m) in [
            ("proj_local_img", &self.proj_local_img),
            ("proj_local_txt", &self.proj_local_txt),
            ("proj_global_img", &self.proj_global_img),
            ("proj_global_txt", &self.proj_global_txt),
        ] {
            out.push((format!("{name}.w1"), &m.w1));
            out.push((format!("{name}.b1"), &m.b1));
            out.push((format!("{name}.w2"), &m.w2));
            out.push((format!("{name}.b2"), &m.b2));
        }
        for (name, a) in [("xattn_text", &self.xattn_text), ("xattn_image", &self.xattn_image)] {
            out.push((format!("{name}.q"), &a.q));
            out.push((format!("{name}.k"), &a.k));
            out.push((format!("{name}.v"), &a.v));
        }
        out.push(("simsiam.w1".into(), &self.simsiam_head.w1));
        out.push(("simsiam.b1".into(), &self.simsiam_head.b1));
        out.push(("simsiam.w2".into(), &self.simsiam_head.w2));
        out.push(("simsiam.b2".into(), &self.simsiam_head.b2));
        out.push(("mask_vec".into(), &self.mask_vec));
        out.push(("fusion_w".into(), &self.fusion_w));
        out.push(("fusion_b".into(), &self.fusion_b));
        for (i, c) in self.dec_stages.iter().enumerate() {
            out.push((format!("dec.{i}.w"), &c.w));
            out.push((format!("dec.{i}.b"), &c.b));
        }
        out.push(("dec_head.w".into(), &self.dec_head.w));
        out.push(("dec_head.b".into(), &self.dec_head.b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>)> {
        let mut out: Vec<(String, &mut ArrayD<f64>)> = vec![
            ("patch_w".into(), &mut self.patch_w),
            ("patch_b".into(), &mut self.patch_b),
            ("tok_embed".into(), &mut self.tok_embed),
            ("mix_w".into(), &mut self.mix_w),
            ("mix_b".into(), &mut self.mix_b),
            ("pool_q_img".into(), &mut self.pool_q_img),
            ("pool_q_txt".into(), &mut self.pool_q_txt),
        ];
        for (name, m) in [
            ("proj_local_img", &mut self.proj_local_img),
            ("proj_local_txt", &mut self.proj_local_txt),
            ("proj_global_img", &mut self.proj_global_img),
            ("proj_global_txt", &mut self.proj_global_txt),
        ] {
            out.push((format!("{name}.w1"), &mut m.w1));
            out.push((format!("{name}.b1"), &mut m.b1));
            out.push((format!("{name}.w2"), &mut m.w2));
            out.push((format!("{name}.b2"), &mut m.b2));
        }
        for (name, a) in [
            ("xattn_text", &mut self.xattn_text),
            ("xattn_image", &mut self.xattn_image),
        ] {
            out.push((format!("{name}.q"), &mut a.q));
            out.push((format!("{name}.k"), &mut a.k));
            out.push((format!("{name}.v"), &mut a.v));
        }
        out.push(("simsiam.w1".into(), &mut self.simsiam_head.w1));
        out.push(("simsiam.b1".into(), &mut self.simsiam_head.b1));
        out.push(("simsiam.w2".into(), &mut self.simsiam_head.w2));
        out.push(("simsiam.b2".into(), &mut self.simsiam_head.b2));
        out.push(("mask_vec".into(), &mut self.mask_vec));
        out.push(("fusion_w".into(), &mut self.fusion_w));
        out.push(("fusion_b".into(), &mut self.fusion_b));
        for (i, c) in self.dec_stages.iter_mut().enumerate() {
            out.push((format!("dec.{i}.w"), &mut c.w));
            out.push((format!("dec.{i}.b"), &mut c.b));
        }
        out.push(("dec_head.w".into(), &mut self.dec_head.w));
        out.push(("dec_head.b".into(), &mut self.dec_head.b));
        out
    }
}

/// Tape handles for every parameter, in the same canonical order.
pub struct ParamVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub tok_embed: Var,
    pub mix_w: Var,
    pub mix_b: Var,
    pub pool_q_img: Var,
    pub pool_q_txt: Var,
    pub proj_local_img: MlpVars,
    pub proj_local_txt: MlpVars,
    pub proj_global_img: MlpVars,
    pub proj_global_txt: MlpVars,
    pub xattn_text: AttnVars,
    pub xattn_image: AttnVars,
    pub simsiam_head: MlpVars,
    pub mask_vec: Var,
    pub fusion_w: Var,
    pub fusion_b: Var,
    pub dec_stages: Vec<(Var, Var)>,
    pub dec_head: (Var, Var),
}

impl ParamVars {
    pub fn create(t: &Tape, p: &ModelParams) -> Self {
        let mlp_vars = |m: &MlpParams| MlpVars {
            w1: t.var(m.w1.clone()),
            b1: t.var(m.b1.clone()),
            w2: t.var(m.w2.clone()),
            b2: t.var(m.b2.clone()),
        };
        let attn_vars = |a: &AttnParams| AttnVars {
            q: t.var(a.q.clone()),
            k: t.var(a.k.clone()),
            v: t.var(a.v.clone()),
        };
        Self {
            patch_w: t.var(p.patch_w.clone()),
            patch_b: t.var(p.patch_b.clone()),
            tok_embed: t.var(p.tok_embed.clone()),
            mix_w: t.var(p.mix_w.clone()),
            mix_b: t.var(p.mix_b.clone()),
            pool_q_img: t.var(p.pool_q_img.clone()),
            pool_q_txt: t.var(p.pool_q_txt.clone()),
            proj_local_img: mlp_vars(&p.proj_local_img),
            proj_local_txt: mlp_vars(&p.proj_local_txt),
            proj_global_img: mlp_vars(&p.proj_global_img),
            proj_global_txt: mlp_vars(&p.proj_global_txt),
            xattn_text: attn_vars(&p.xattn_text),
            xattn_image: attn_vars(&p.xattn_image),
            simsiam_head: mlp_vars(&p.simsiam_head),
            mask_vec: t.var(p.mask_vec.clone()),
            fusion_w: t.var(p.fusion_w.clone()),
            fusion_b: t.var(p.fusion_b.clone()),
            dec_stages: p
                .dec_stages
                .iter()
                .map(|c| (t.var(c.w.clone()), t.var(c.b.clone())))
                .collect(),
            dec_head: (t.var(p.dec_head.w.clone()), t.var(p.dec_head.b.clone())),
        }
    }

    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = vec![
            ("patch_w".into(), self.patch_w),
            ("patch_b".into(), self.patch_b),
            ("tok_embed".into(), self.tok_embed),
            ("mix_w".into(), self.mix_w),
            ("mix_b".into(), self.mix_b),
            ("pool_q_img".into(), self.pool_q_img),
            ("pool_q_txt".into(), self.pool_q_txt),
        ];
        for (name, m) in [
            ("proj_local_img", &self.proj_local_img),
            ("proj_local_txt", &self.proj_local_txt),
            ("proj_global_img", &self.proj_global_img),
            ("proj_global_txt", &self.proj_global_txt),
        ] {
            out.push((format!("{name}.w1"), m.w1));
            out.push((format!("{name}.b1"), m.b1));
            out.push((format!("{name}.w2"), m.w2));
            out.push((format!("{name}.b2"), m.b2));
        }
        for (name, a) in [("xattn_text", &self.xattn_text), ("xattn_image", &self.xattn_image)] {
            out.push((format!("{name}.q"), a.q));
            out.push((format!("{name}.k"), a.k));
            out.push((format!("{name}.v"), a.v));
        }
        out.push(("simsiam.w1".into(), self.simsiam_head.w1));
        out.push(("simsiam.b1".into(), self.simsiam_head.b1));
        out.push(("simsiam.w2".into(), self.simsiam_head.w2));
        out.push(("simsiam.b2".into(), self.simsiam_head.b2));
        out.push(("mask_vec".into(), self.mask_vec));
        out.push(("fusion_w".into(), self.fusion_w));
        out.push(("fusion_b".into(), self.fusion_b));
        for (i, (w, b)) in self.dec_stages.iter().enumerate() {
            out.push((format!("dec.{i}.w"), *w));
            out.push((format!("dec.{i}.b"), *b));
        }
        out.push(("dec_head.w".into(), self.dec_head.0));
        out.push(("dec_head.b".into(), self.dec_head.1));
        out
    }
}

/// One packed mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sample_ids: Vec<u64>,
    /// (B * P) x res^2 region pixels.
    pub patches: Array2<f64>,
    /// (B, 1, H, W) reconstruction targets.
    pub targets: ArrayD<f64>,
    /// Batch-flattened token ids.
    pub tokens: Vec<u32>,
    /// Per packed sentence: token count.
    pub sentence_lens: Vec<usize>,
    /// Per sample: number of sentences.
    pub sentences_per_sample: Vec<usize>,
    /// Per packed sentence: ground-truth region index.
    pub truth_regions: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn total_sentences(&self) -> usize {
        self.sentence_lens.len()
    }

    /// Packed sentence row range of sample `b`.
    pub fn sentence_range(&self, b: usize) -> (usize, usize) {
        let start: usize = self.sentences_per_sample[..b].iter().sum();
        (start, start + self.sentences_per_sample[b])
    }
}

pub fn make_batch(samples: &[&PairedSample], ccfg: &CorpusConfig) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("batch".into()));
    }
    let side = ccfg.image_side();
    let p = ccfg.regions();
    let px = (ccfg.image_res * ccfg.image_res) as usize;
    let b = samples.len();
    let mut patches = Array2::zeros((b * p, px));
    let mut targets = ArrayD::zeros(IxDyn(&[b, 1, side, side]));
    let mut tokens = Vec::new();
    let mut sentence_lens = Vec::new();
    let mut sentences_per_sample = Vec::with_capacity(b);
    let mut truth_regions = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.image.nrows() != side || s.image.ncols() != side {
            return Err(Error::Shape(format!(
                "sample {} image is {}x{}, config expects {side}x{side}",
                s.sample_id,
                s.image.nrows(),
                s.image.ncols()
            )));
        }
        let sp = image_to_patches(&s.image, ccfg.grid_side as usize, ccfg.image_res as usize);
        patches
            .slice_mut(ndarray::s![i * p..(i + 1) * p, ..])
            .assign(&sp);
        for y in 0..side {
            for x in 0..side {
                targets[[i, 0, y, x]] = f64::from(s.image[[y, x]]);
            }
        }
        sentences_per_sample.push(s.sentences.len());
        for sent in &s.sentences {
            sentence_lens.push(sent.len());
            tokens.extend_from_slice(sent);
        }
        truth_regions.extend_from_slice(&s.truth_map);
    }
    Ok(Batch {
        sample_ids: samples.iter().map(|s| s.sample_id).collect(),
        patches,
        targets,
        tokens,
        sentence_lens,
        sentences_per_sample,
        truth_regions,
    })
}

/// Forward features of one batch: raw and projected locals, pooled globals,
/// and both cross-attention directions with their score maps.
pub struct Features {
    pub local_img_raw: Var,
    pub local_txt_raw: Var,
    /// Projected local image features, (B*P) x d.
    pub local_img: Var,
    /// Projected local text features, (sum M) x d.
    pub local_txt: Var,
    pub global_img: Var,
    pub global_txt: Var,
    /// Text-as-image-context rows, aligned with `local_txt`.
    pub cross_txt: Var,
    /// Image-as-text-context rows, aligned with `local_img`.
    pub cross_img: Var,
    /// Per sample: M_b x P sigmoid scores of sentences over regions.
    pub attn_text_over_regions: Vec<Array2<f64>>,
    /// Per sample: P x M_b sigmoid scores of regions over sentences.
    pub attn_region_over_sentences: Vec<Array2<f64>>,
}

pub fn forward_features(
    t: &Tape,
    pv: &ParamVars,
    batch: &Batch,
    mcfg: &ModelConfig,
    ccfg: &CorpusConfig,
) -> Result<Features> {
    let b = batch.len();
    let p = ccfg.regions();

    let patches = t.constant2(batch.patches.clone());
    let local_img_raw = encode_image(t, patches, pv.patch_w, pv.patch_b);
    let local_txt_raw = encode_text(
        t,
        pv.tok_embed,
        pv.mix_w,
        pv.mix_b,
        &batch.tokens,
        &batch.sentence_lens,
        ccfg.vocab_size,
    )?;

    // Pool raw locals per sample, then project pooled features to d.
    let mut img_pooled = Vec::with_capacity(b);
    let mut txt_pooled = Vec::with_capacity(b);
    for i in 0..b {
        let img_rows: Vec<usize> = (i * p..(i + 1) * p).collect();
        let img_local = t.gather_rows(local_img_raw, &img_rows);
        img_pooled.push(attention_pool(t, img_local, &vec![true; p], pv.pool_q_img)?);
        let (s0, s1) = batch.sentence_range(i);
        let txt_rows: Vec<usize> = (s0..s1).collect();
        let txt_local = t.gather_rows(local_txt_raw, &txt_rows);
        txt_pooled.push(attention_pool(
            t,
            txt_local,
            &vec![true; s1 - s0],
            pv.pool_q_txt,
        )?);
    }
    let global_img = mlp(t, t.concat_rows(&img_pooled), &pv.proj_global_img);
    let global_txt = mlp(t, t.concat_rows(&txt_pooled), &pv.proj_global_txt);

    let local_img = mlp(t, local_img_raw, &pv.proj_local_img);
    let local_txt = mlp(t, local_txt_raw, &pv.proj_local_txt);

    let image_triple = if mcfg.xattn_shared { &pv.xattn_text } else { &pv.xattn_image };
    let mut cross_txt_parts = Vec::with_capacity(b);
    let mut cross_img_parts = Vec::with_capacity(b);
    let mut attn_text_over_regions = Vec::with_capacity(b);
    let mut attn_region_over_sentences = Vec::with_capacity(b);
    for i in 0..b {
        let img_rows: Vec<usize> = (i * p..(i + 1) * p).collect();
        let (s0, s1) = batch.sentence_range(i);
        let txt_rows: Vec<usize> = (s0..s1).collect();
        let img_i = t.gather_rows(local_img, &img_rows);
        let txt_i = t.gather_rows(local_txt, &txt_rows);
        let (f_i2r, scores_t) = cross_attend(t, txt_i, img_i, &pv.xattn_text, &vec![true; p])?;
        let (f_r2i, scores_r) =
            cross_attend(t, img_i, txt_i, image_triple, &vec![true; s1 - s0])?;
        cross_txt_parts.push(f_i2r);
        cross_img_parts.push(f_r2i);
        attn_text_over_regions.push(t.value2(scores_t));
        attn_region_over_sentences.push(t.value2(scores_r));
    }

    Ok(Features {
        local_img_raw,
        local_txt_raw,
        local_img,
        local_txt,
        global_img,
        global_txt,
        cross_txt: t.concat_rows(&cross_txt_parts),
        cross_img: t.concat_rows(&cross_img_parts),
        attn_text_over_regions,
        attn_region_over_sentences,
    })
}

/// What the per-step objective optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Alignment only (no masking/reconstruction built).
    Alignment,
    /// Full objective: alignment plus weighted reconstruction.
    Full,
    /// Reconstruction only; alignment terms are still computed for logging
    /// but excluded from the optimized total.
    ReconOnly,
}

/// Constant selections captured at a base point so finite differences see
/// the same piecewise-smooth function the implemented gradient describes.
pub struct FrozenSelections {
    pub cluster: Option<FrozenCluster>,
    pub simsiam: SimSiamFrozen,
}

pub struct FrozenCluster {
    pub outcome: ClusterOutcome,
    pub hard_centers: Array2<f64>,
    pub hard_weights: Array2<f64>,
    pub denominator_mask: Array2<f64>,
}

/// Individual loss nodes, for targeted gradient checks.
pub struct LossVars {
    pub global_i2r: Var,
    pub global_r2i: Var,
    pub local_report: Var,
    pub bml: Var,
    pub local_image: Var,
    pub re: Option<Var>,
    pub total: Var,
}

pub struct StepOutputs {
    pub breakdown: LossBreakdown,
    pub vars: LossVars,
    pub cluster: Option<ClusterOutcome>,
    /// Selections captured from this forward (reusable for freezing).
    pub frozen: FrozenSelections,
    /// Packed (B*P) mask flags; empty when no reconstruction ran.
    pub mask_flags: Vec<bool>,
    /// Decoded (B, 1, H, W) pixels when reconstruction ran.
    pub recon_images: Option<ArrayD<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn forward_losses(
    t: &Tape,
    pv: &ParamVars,
    feats: &Features,
    batch: &Batch,
    mcfg: &ModelConfig,
    ccfg: &CorpusConfig,
    seed: u64,
    step: u64,
    objective: Objective,
    frozen: Option<&FrozenSelections>,
) -> Result<StepOutputs> {
    let b = batch.len();
    let p = ccfg.regions();
    let side = ccfg.image_side();
    let w = &mcfg.weights;

    let (global_i2r, global_r2i, _) =
        global_infonce(t, feats.global_img, feats.global_txt, w.tau1)?;

    // Clustering-guided local report alignment.
    let zero = |t: &Tape| t.constant(ArrayD::zeros(IxDyn(&[1])));
    let (local_report, bml, cluster, frozen_cluster) = if mcfg.cgns_enabled {
        let anchors_vals = t.value2(feats.local_txt);
        let points_vals = t.value2(feats.cross_txt);
        let prepared: Option<FrozenCluster> = match frozen {
            Some(f) => f.cluster.as_ref().map(|c| FrozenCluster {
                outcome: c.outcome.clone(),
                hard_centers: c.hard_centers.clone(),
                hard_weights: c.hard_weights.clone(),
                denominator_mask: c.denominator_mask.clone(),
            }),
            None => {
                let kmeans_seed = mix2(seed, step);
                match cluster_and_select(&anchors_vals, &points_vals, &mcfg.cgns, kmeans_seed) {
                    Ok(outcome) => {
                        let (hard_centers, hard_weights) =
                            hard_negative_matrices(&outcome, &mcfg.cgns)?;
                        let denominator_mask = if mcfg.cgns.exclude_false_negatives {
                            false_negative_denominator_mask(&outcome)
                        } else {
                            Array2::from_elem(
                                (outcome.assignments.len(), outcome.assignments.len()),
                                1.0,
                            )
                        };
                        Some(FrozenCluster {
                            outcome,
                            hard_centers,
                            hard_weights,
                            denominator_mask,
                        })
                    }
                    Err(Error::BatchTooSmall(_)) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        match prepared {
            Some(fc) => {
                let report = local_report_loss(
                    t,
                    feats.local_txt,
                    feats.cross_txt,
                    &fc.hard_centers,
                    &fc.hard_weights,
                    &fc.denominator_mask,
                    mcfg.cgns.tau3,
                )?;
                let margin = bml_loss(
                    t,
                    feats.local_txt,
                    feats.cross_txt,
                    &fc.outcome.false_negatives,
                    mcfg.cgns.alpha,
                    mcfg.cgns.beta,
                )?;
                let outcome = fc.outcome.clone();
                (report, margin, Some(outcome), Some(fc))
            }
            None => (zero(t), zero(t), None, None),
        }
    } else {
        // Ablation: plain in-batch sentence contrast, no hard negatives, no
        // margin loss.
        let m = batch.total_sentences();
        let empty_centers = Array2::zeros((0, mcfg.d));
        let empty_weights = Array2::zeros((m, 0));
        let ones = Array2::from_elem((m, m), 1.0);
        let report = local_report_loss(
            t,
            feats.local_txt,
            feats.cross_txt,
            &empty_centers,
            &empty_weights,
            &ones,
            mcfg.cgns.tau3,
        )?;
        (report, zero(t), None, None)
    };

    let simsiam_frozen = frozen.map(|f| &f.simsiam);
    let local_image = simsiam_local_image(
        t,
        feats.local_img,
        feats.cross_img,
        &pv.simsiam_head,
        simsiam_frozen,
    )?;

    let build_recon = objective != Objective::Alignment && mcfg.mir_enabled;
    let (re_var, mask_flags, recon_images) = if build_recon {
        let mut flags = Vec::with_capacity(b * p);
        for &sid in &batch.sample_ids {
            flags.extend(mask_flags_for_sample(seed, step, sid, p, mcfg.mask.probability));
        }
        let masked = mask_features(t, feats.local_img, &flags, pv.mask_vec);
        let dec = DecoderVars {
            fusion_w: pv.fusion_w,
            fusion_b: pv.fusion_b,
            stages: pv.dec_stages.clone(),
            head_w: pv.dec_head.0,
            head_b: pv.dec_head.1,
        };
        let decoded = fuse_and_decode(t, feats.cross_img, masked, &dec, b, p, side, side)?;
        let target = t.constant(batch.targets.clone());
        let loss = recon_loss(t, decoded, target)?;
        (Some(loss), flags, Some(t.value(decoded)))
    } else {
        (None, Vec::new(), None)
    };

    // Weighted total for the requested objective.
    let alignment_on = objective != Objective::ReconOnly;
    let mut total = zero(t);
    if alignment_on {
        let g = t.scale(t.add(global_i2r, global_r2i), w.lambda_global);
        let l = t.scale(
            t.add(t.add(local_report, bml), local_image),
            w.lambda_local,
        );
        total = t.add(total, t.add(g, l));
    }
    if let Some(re) = re_var {
        total = t.add(total, t.scale(re, w.lambda_re));
    }

    let effective = LossWeights {
        lambda_global: if alignment_on { w.lambda_global } else { 0.0 },
        lambda_local: if alignment_on { w.lambda_local } else { 0.0 },
        lambda_re: if re_var.is_some() { w.lambda_re } else { 0.0 },
        tau1: w.tau1,
    };
    let breakdown = compose_total(
        t.scalar(global_i2r),
        t.scalar(global_r2i),
        t.scalar(local_report),
        t.scalar(bml),
        t.scalar(local_image),
        re_var.map(|v| t.scalar(v)).unwrap_or(0.0),
        &effective,
    );

    let frozen_out = FrozenSelections {
        cluster: frozen_cluster,
        simsiam: capture_simsiam(t, feats.local_img, feats.cross_img),
    };

    Ok(StepOutputs {
        breakdown,
        vars: LossVars {
            global_i2r,
            global_r2i,
            local_report,
            bml,
            local_image,
            re: re_var,
            total,
        },
        cluster,
        frozen: frozen_out,
        mask_flags,
        recon_images,
    })
}

/// First non-finite loss term of a breakdown, if any.
pub fn first_non_finite(b: &LossBreakdown) -> Option<&'static str> {
    [
        ("l_global_i2r", b.l_global_i2r),
        ("l_global_r2i", b.l_global_r2i),
        ("l_local_report", b.l_local_report),
        ("l_bml", b.l_bml),
        ("l_local_img", b.l_local_image),
        ("l_re", b.l_re),
        ("total", b.total),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(name, _)| name)
}

/// Per-sample feature snapshot for exports.
pub struct FeatureBundle {
    pub sample_id: u64,
    pub local_image: Array2<f64>,
    pub local_text: Array2<f64>,
    pub global_image: Vec<f64>,
    pub global_text: Vec<f64>,
}

pub fn feature_bundles(t: &Tape, feats: &Features, batch: &Batch, regions: usize) -> Vec<FeatureBundle> {
    let li = t.value2(feats.local_img);
    let lt = t.value2(feats.local_txt);
    let gi = t.value2(feats.global_img);
    let gt = t.value2(feats.global_txt);
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let (s0, s1) = batch.sentence_range(i);
        out.push(FeatureBundle {
            sample_id: batch.sample_ids[i],
            local_image: li.slice(ndarray::s![i * regions..(i + 1) * regions, ..]).to_owned(),
            local_text: lt.slice(ndarray::s![s0..s1, ..]).to_owned(),
            global_image: gi.row(i).to_vec(),
            global_text: gt.row(i).to_vec(),
        });
    }
    out
}
