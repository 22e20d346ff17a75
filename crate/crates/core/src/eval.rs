//! Retrieval evaluation, attention-alignment reporting, and file exports
//! (CSV and binary PGM).

use crate::autodiff::Tape;
use crate::corpus::{CorpusConfig, PairedSample};
use crate::error::{Error, Result};
use crate::model::{
    forward_features, forward_losses, make_batch, ModelConfig, ModelParams, Objective, ParamVars,
};
use ndarray::Array2;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ImageToReport,
    ReportToImage,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::ImageToReport => write!(f, "image-to-report"),
            Direction::ReportToImage => write!(f, "report-to-image"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub top1: f64,
    pub top5: f64,
    pub mean_reciprocal_rank: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttnAlignmentReport {
    /// Mean renormalized attention mass on the ground-truth region.
    pub mean_truth_mass: f64,
    /// 1 / P.
    pub uniform_baseline: f64,
    pub ratio: f64,
    pub sentences: usize,
}

/// Forward outputs needed by evaluation and exports.
pub struct EvalForward {
    pub sample_ids: Vec<u64>,
    pub img_globals: Array2<f64>,
    pub txt_globals: Array2<f64>,
    /// Per sample: M x P sigmoid scores of sentences over regions.
    pub attn_text: Vec<Array2<f64>>,
    /// Per sample: P x M scores of regions over sentences.
    pub attn_image: Vec<Array2<f64>>,
    pub truth_maps: Vec<Vec<u32>>,
}

/// Embed samples (read-only forward, chunked) and collect attention maps.
pub fn eval_forward(
    params: &ModelParams,
    samples: &[&PairedSample],
    mcfg: &ModelConfig,
    ccfg: &CorpusConfig,
) -> Result<EvalForward> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let d = mcfg.d;
    let mut img_globals = Array2::zeros((samples.len(), d));
    let mut txt_globals = Array2::zeros((samples.len(), d));
    let mut attn_text = Vec::with_capacity(samples.len());
    let mut attn_image = Vec::with_capacity(samples.len());
    let mut offset = 0;
    for chunk in samples.chunks(64) {
        let batch = make_batch(chunk, ccfg)?;
        let t = Tape::new();
        let pv = ParamVars::create(&t, params);
        let feats = forward_features(&t, &pv, &batch, mcfg, ccfg)?;
        let gi = t.value2(feats.global_img);
        let gt = t.value2(feats.global_txt);
        for i in 0..chunk.len() {
            img_globals.row_mut(offset + i).assign(&gi.row(i));
            txt_globals.row_mut(offset + i).assign(&gt.row(i));
        }
        attn_text.extend(feats.attn_text_over_regions);
        attn_image.extend(feats.attn_region_over_sentences);
        offset += chunk.len();
    }
    Ok(EvalForward {
        sample_ids: samples.iter().map(|s| s.sample_id).collect(),
        img_globals,
        txt_globals,
        attn_text,
        attn_image,
        truth_maps: samples.iter().map(|s| s.truth_map.clone()).collect(),
    })
}

fn normalize_rows(a: &Array2<f64>, context: &str) -> Result<Array2<f64>> {
    let mut out = a.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm(format!("{context} row {i}")));
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(out)
}

/// Rank paired embeddings by cosine similarity in one direction. Query i's
/// correct partner is row i of the other modality; ties rank the lower
/// index first.
pub fn retrieval(
    img_globals: &Array2<f64>,
    txt_globals: &Array2<f64>,
    direction: Direction,
) -> Result<RetrievalReport> {
    let n = img_globals.nrows();
    if n == 0 {
        return Err(Error::EmptySplit("retrieval".into()));
    }
    let img_n = normalize_rows(img_globals, "image globals")?;
    let txt_n = normalize_rows(txt_globals, "text globals")?;
    let sims = match direction {
        Direction::ImageToReport => img_n.dot(&txt_n.t()),
        Direction::ReportToImage => txt_n.dot(&img_n.t()),
    };
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut mrr = 0.0;
    for i in 0..n {
        let row = sims.row(i);
        let own = row[i];
        // Rank = number of candidates strictly better, plus earlier-index
        // ties.
        let mut rank = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            if row[j] > own || (row[j] == own && j < i) {
                rank += 1;
            }
        }
        if rank == 0 {
            top1 += 1;
        }
        if rank < 5 {
            top5 += 1;
        }
        mrr += 1.0 / (rank as f64 + 1.0);
    }
    Ok(RetrievalReport {
        direction,
        top1: top1 as f64 / n as f64,
        top5: top5 as f64 / n as f64,
        mean_reciprocal_rank: mrr / n as f64,
        queries: n,
    })
}

/// Mean renormalized sentence-over-region attention mass on the true region,
/// against the uniform 1/P baseline. Sigmoid rows do not sum to one, so each
/// row is renormalized for reporting only.
pub fn attention_alignment(
    attn_text: &[Array2<f64>],
    truth_maps: &[Vec<u32>],
    regions: usize,
) -> Result<AttnAlignmentReport> {
    let mut total_mass = 0.0;
    let mut count = 0usize;
    for (map, truth) in attn_text.iter().zip(truth_maps.iter()) {
        if map.nrows() != truth.len() || map.ncols() != regions {
            return Err(Error::Shape(format!(
                "attention map {}x{} vs {} sentences over {regions} regions",
                map.nrows(),
                map.ncols(),
                truth.len()
            )));
        }
        for (m, &region) in truth.iter().enumerate() {
            let row = map.row(m);
            let sum: f64 = row.iter().sum();
            if sum <= 0.0 {
                return Err(Error::ZeroNorm(format!("attention row {m}")));
            }
            total_mass += row[region as usize] / sum;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySplit("attention alignment".into()));
    }
    let mean = total_mass / count as f64;
    let baseline = 1.0 / regions as f64;
    Ok(AttnAlignmentReport {
        mean_truth_mass: mean,
        uniform_baseline: baseline,
        ratio: mean / baseline,
        sentences: count,
    })
}

/// Binary (P5) PGM with values scaled from [lo, hi] to 0..=255.
pub fn write_pgm(path: &Path, values: &Array2<f64>, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = (values.nrows(), values.ncols());
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in values.iter() {
        let scaled = ((v - lo) / span).clamp(0.0, 1.0);
        out.push((scaled * 255.0).round() as u8);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// CSV of a score matrix at full f64 round-trip precision.
pub fn matrix_csv(values: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in values.rows() {
        let mut first = true;
        for v in row.iter() {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    out
}

/// Parse a matrix CSV written by [`matrix_csv`].
pub fn parse_matrix_csv(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|tok| tok.parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Config(format!("matrix csv: {e}")))?);
    }
    if rows.is_empty() {
        return Err(Error::Config("matrix csv: empty".into()));
    }
    let w = rows[0].len();
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Config("matrix csv: ragged rows".into()));
    }
    let h = rows.len();
    Ok(Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect()).unwrap())
}

/// Reconstruction snapshot of one evaluation batch at a fixed step key.
pub struct ReconSnapshot {
    pub sample_ids: Vec<u64>,
    /// (B, 1, H, W) decoded pixels.
    pub recon: ndarray::ArrayD<f64>,
    /// Packed (B * P) mask flags.
    pub mask_flags: Vec<bool>,
}

/// Run the masked-reconstruction path on `samples` (step key 0) and return
/// the decoded images with their mask layouts.
pub fn recon_snapshot(
    params: &ModelParams,
    samples: &[&PairedSample],
    mcfg: &ModelConfig,
    ccfg: &CorpusConfig,
    seed: u64,
) -> Result<ReconSnapshot> {
    let batch = make_batch(samples, ccfg)?;
    let t = Tape::new();
    let pv = ParamVars::create(&t, params);
    let feats = forward_features(&t, &pv, &batch, mcfg, ccfg)?;
    let out = forward_losses(
        &t, &pv, &feats, &batch, mcfg, ccfg, seed, 0, Objective::Full, None,
    )?;
    let recon = out
        .recon_images
        .ok_or_else(|| Error::Config("reconstruction disabled in this configuration".into()))?;
    Ok(ReconSnapshot { sample_ids: batch.sample_ids.clone(), recon, mask_flags: out.mask_flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn identity_pairing_is_perfect_retrieval() {
        let e = Array2::eye(4);
        let r = retrieval(&e, &e, Direction::ImageToReport).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.top5, 1.0);
        assert_eq!(r.mean_reciprocal_rank, 1.0);
    }

    #[test]
    fn anti_diagonal_pairing_is_zero_top1() {
        // Embeddings paired with the wrong partner: image i matches text
        // n-1-i exactly (even n, so nothing self-pairs).
        let img = Array2::eye(4);
        let txt = arr2(&[
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
        ]);
        let r = retrieval(&img, &txt, Direction::ImageToReport).unwrap();
        assert_eq!(r.top1, 0.0);
    }

    #[test]
    fn single_pair_is_trivially_top1() {
        let img = arr2(&[[0.3, 0.4]]);
        let txt = arr2(&[[-0.8, 0.1]]);
        let r = retrieval(&img, &txt, Direction::ReportToImage).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.queries, 1);
    }

    #[test]
    fn top5_at_least_top1() {
        let img = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let txt = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 2 + j * 5) % 9) as f64 - 4.0);
        for dir in [Direction::ImageToReport, Direction::ReportToImage] {
            let r = retrieval(&img, &txt, dir).unwrap();
            assert!(r.top5 >= r.top1);
            assert!((0.0..=1.0).contains(&r.top1));
        }
    }

    #[test]
    fn attention_alignment_on_concentrated_maps() {
        // One sample, two sentences over four regions; all mass on truth.
        let map = arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        let report = attention_alignment(&[map], &[vec![0, 2]], 4).unwrap();
        assert!((report.mean_truth_mass - 1.0).abs() < 1e-15);
        assert!((report.ratio - 4.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_attention_sits_at_baseline() {
        let map = Array2::from_elem((3, 4), 0.37);
        let report = attention_alignment(&[map], &[vec![1, 2, 3]], 4).unwrap();
        assert!((report.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_csv_roundtrips_exactly() {
        let m = arr2(&[[0.1234567890123456789, -1e-17], [3.5, f64::MIN_POSITIVE]]);
        let text = matrix_csv(&m);
        let back = parse_matrix_csv(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn pgm_has_correct_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let m = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 / 14.0);
        write_pgm(&path, &m, 0.0, 1.0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(bytes.len(), b"P5\n5 3\n255\n".len() + 15);
        assert_eq!(*bytes.last().unwrap(), 255);
    }
}
