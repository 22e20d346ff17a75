//! Global contrastive alignment, SimSiam-style local image alignment, and
//! loss composition.

use crate::autodiff::{Tape, Var};
use crate::encoders::{mlp, MlpVars};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub lambda_re: f64,
    /// Temperature for the global contrastive loss.
    pub tau1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_global: 1.0, lambda_local: 1.0, lambda_re: 10.0, tau1: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_global", self.lambda_global),
            ("lambda_local", self.lambda_local),
            ("lambda_re", self.lambda_re),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} ({v}) must be >= 0")));
            }
        }
        if self.tau1 <= 0.0 {
            return Err(Error::Config(format!("tau1 ({}) must be > 0", self.tau1)));
        }
        Ok(())
    }
}

/// Every scalar term of the overall objective, for logging and verification.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_global_i2r: f64,
    pub l_global_r2i: f64,
    pub l_local_report: f64,
    pub l_bml: f64,
    pub l_local_image: f64,
    pub l_re: f64,
    pub total: f64,
}

/// Local loss composition: report + margin + image terms.
pub fn compose_local(l_report: f64, l_bml: f64, l_image: f64) -> f64 {
    l_report + l_bml + l_image
}

/// Weighted total over the global, local, and reconstruction terms.
pub fn compose_total(
    l_global_i2r: f64,
    l_global_r2i: f64,
    l_local_report: f64,
    l_bml: f64,
    l_local_image: f64,
    l_re: f64,
    w: &LossWeights,
) -> LossBreakdown {
    let total = w.lambda_global * (l_global_i2r + l_global_r2i)
        + w.lambda_local * compose_local(l_local_report, l_bml, l_local_image)
        + w.lambda_re * l_re;
    LossBreakdown {
        l_global_i2r,
        l_global_r2i,
        l_local_report,
        l_bml,
        l_local_image,
        l_re,
        total,
    }
}

/// Plain cosine similarity of two vectors.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine_sim lengths {} vs {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim argument".into()));
    }
    Ok(u.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

fn check_nonzero_rows(t: &Tape, v: Var, context: &str) -> Result<()> {
    let arr = t.value2(v);
    if arr.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(context.into()));
    }
    for (i, row) in arr.rows().into_iter().enumerate() {
        if row.iter().map(|x| x * x).sum::<f64>() == 0.0 {
            return Err(Error::ZeroNorm(format!("{context} row {i}")));
        }
    }
    Ok(())
}

/// Batch contrastive alignment of paired global embeddings with in-batch
/// negatives and cosine similarity at temperature `tau1`. Returns the
/// image-to-report direction, the report-to-image direction, and their sum.
pub fn global_infonce(t: &Tape, img: Var, txt: Var, tau1: f64) -> Result<(Var, Var, Var)> {
    let (si, st) = (t.shape(img), t.shape(txt));
    if si != st || si.len() != 2 {
        return Err(Error::Shape(format!("global_infonce shapes {si:?} vs {st:?}")));
    }
    let b = si[0];
    check_nonzero_rows(t, img, "global image embeddings")?;
    check_nonzero_rows(t, txt, "global text embeddings")?;
    let img_n = t.normalize_rows(img);
    let txt_n = t.normalize_rows(txt);
    // sims[i][j] = cos(image_i, report_j); bounded, so the exponentials are
    // safe without a max shift even at tau = 0.01.
    let sims = t.matmul(img_n, t.transpose(txt_n));
    let e = t.exp(t.scale(sims, 1.0 / tau1));
    let diag = t.row_sums(t.mul_const(e, Array2::eye(b).into_dyn()));
    let row_den = t.row_sums(e);
    let col_den = t.transpose(t.col_sums(e));
    let i2r = t.scale(t.sum_all(t.ln(t.div(diag, row_den))), -1.0 / b as f64);
    let r2i = t.scale(t.sum_all(t.ln(t.div(diag, col_den))), -1.0 / b as f64);
    let total = t.add(i2r, r2i);
    Ok((i2r, r2i, total))
}

/// Row-wise cosine similarity between two (n x d) matrices, as an n x 1
/// column.
fn row_cosines(t: &Tape, a: Var, b: Var) -> Var {
    let an = t.normalize_rows(a);
    let bn = t.normalize_rows(b);
    t.row_sums(t.mul(an, bn))
}

/// Values captured at the base point so a finite-difference pass can hold
/// the stop-gradient branches constant.
#[derive(Debug, Clone)]
pub struct SimSiamFrozen {
    pub image_locals: Array2<f64>,
    pub cross_locals: Array2<f64>,
}

/// Symmetric predictor alignment between projected local image features and
/// their cross-modal counterparts:
///
/// `-(1/n) sum_r [ cos(h(img_r), S(cross_r)) + cos(h(cross_r), S(img_r)) ] / 2`
///
/// where `h` is the predictor perceptron and `S` stops gradients. With
/// `frozen` set, the stop-gradient branches are replaced by the captured
/// constants (used by the gradient checker; values agree at the capture
/// point).
pub fn simsiam_local_image(
    t: &Tape,
    image_locals: Var,
    cross_locals: Var,
    head: &MlpVars,
    frozen: Option<&SimSiamFrozen>,
) -> Result<Var> {
    let (si, sc) = (t.shape(image_locals), t.shape(cross_locals));
    if si != sc || si.len() != 2 {
        return Err(Error::Shape(format!("simsiam shapes {si:?} vs {sc:?}")));
    }
    let n = si[0];
    check_nonzero_rows(t, image_locals, "simsiam image locals")?;
    check_nonzero_rows(t, cross_locals, "simsiam cross-modal locals")?;

    let (img_stopped, cross_stopped) = match frozen {
        Some(f) => (t.constant2(f.image_locals.clone()), t.constant2(f.cross_locals.clone())),
        None => (t.stop_grad(image_locals), t.stop_grad(cross_locals)),
    };
    let h_img = mlp(t, image_locals, head);
    let h_cross = mlp(t, cross_locals, head);
    check_nonzero_rows(t, h_img, "simsiam predictor(image) output")?;
    check_nonzero_rows(t, h_cross, "simsiam predictor(cross) output")?;

    let term_a = row_cosines(t, h_img, cross_stopped);
    let term_b = row_cosines(t, h_cross, img_stopped);
    let sum = t.add(t.sum_all(term_a), t.sum_all(term_b));
    Ok(t.scale(sum, -0.5 / n as f64))
}

/// Capture the current values feeding the stop-gradient branches.
pub fn capture_simsiam(t: &Tape, image_locals: Var, cross_locals: Var) -> SimSiamFrozen {
    SimSiamFrozen {
        image_locals: t.value2(image_locals),
        cross_locals: t.value2(cross_locals),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn identity_head(t: &Tape, d: usize) -> MlpVars {
        MlpVars {
            w1: t.var2(Array2::eye(d)),
            b1: t.var2(Array2::zeros((1, d))),
            w2: t.var2(Array2::eye(d)),
            b2: t.var2(Array2::zeros((1, d))),
        }
    }

    #[test]
    fn cosine_basic_identities() {
        let v = vec![0.3, -0.4, 1.2];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 3.0];
        assert!(cosine_sim(&a, &b).unwrap().abs() < 1e-15);
        assert!(matches!(cosine_sim(&a, &[0.0, 0.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn infonce_single_pair_is_zero() {
        let t = Tape::new();
        let img = t.var2(arr2(&[[0.3, 0.4]]));
        let txt = t.var2(arr2(&[[-0.1, 0.9]]));
        let (i2r, r2i, total) = global_infonce(&t, img, txt, 0.5).unwrap();
        assert!(t.scalar(i2r).abs() < 1e-15);
        assert!(t.scalar(r2i).abs() < 1e-15);
        assert!(t.scalar(total).abs() < 1e-15);
    }

    #[test]
    fn infonce_all_equal_embeddings_is_ln_b() {
        let t = Tape::new();
        let rows = arr2(&[[0.5, 0.5]; 4]);
        let img = t.var2(rows.clone());
        let txt = t.var2(rows);
        let (i2r, r2i, total) = global_infonce(&t, img, txt, 0.01).unwrap();
        let ln4 = 4.0_f64.ln();
        assert!((t.scalar(i2r) - ln4).abs() < 1e-12);
        assert!((t.scalar(r2i) - ln4).abs() < 1e-12);
        assert!((t.scalar(total) - 2.0 * ln4).abs() < 1e-12);
    }

    #[test]
    fn infonce_identity_cosine_matrix_value() {
        // B=2, orthogonal pairs, tau=1: each direction
        // -log(e / (e + 1)), total twice that.
        let t = Tape::new();
        let img = t.var2(arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        let txt = t.var2(arr2(&[[2.0, 0.0], [0.0, 0.5]]));
        let (i2r, r2i, total) = global_infonce(&t, img, txt, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e / (e + 1.0)).ln();
        assert!((t.scalar(i2r) - expect).abs() < 1e-12);
        assert!((t.scalar(r2i) - expect).abs() < 1e-12);
        assert!((t.scalar(total) - 2.0 * expect).abs() < 1e-12);
        assert!((t.scalar(total) - 0.6266).abs() < 1e-3);
    }

    #[test]
    fn infonce_decreases_as_positive_margin_grows() {
        // Fixed 2x2 family: diag cosine c, off-diagonal 0; loss must fall
        // as c rises.
        let eval = |c: f64| {
            let t = Tape::new();
            let s = (1.0 - c * c).sqrt();
            let img = t.var2(arr2(&[[1.0, 0.0], [0.0, 1.0]]));
            let txt = t.var2(arr2(&[[c, s], [s, c]]));
            let (_, _, total) = global_infonce(&t, img, txt, 0.3).unwrap();
            t.scalar(total)
        };
        let mut prev = f64::INFINITY;
        for c in [0.0, 0.3, 0.6, 0.9, 0.99] {
            let v = eval(c);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn infonce_is_batch_permutation_invariant_and_nonnegative() {
        let img_a = arr2(&[[0.9, 0.1], [0.2, 0.8], [-0.5, 0.4]]);
        let txt_a = arr2(&[[0.7, 0.3], [0.1, 0.9], [-0.4, 0.6]]);
        let eval = |perm: &[usize]| {
            let t = Tape::new();
            let sel = |arr: &Array2<f64>| {
                let mut out = Array2::zeros(arr.raw_dim());
                for (i, &p) in perm.iter().enumerate() {
                    out.row_mut(i).assign(&arr.row(p));
                }
                out
            };
            let img = t.var2(sel(&img_a));
            let txt = t.var2(sel(&txt_a));
            let (_, _, total) = global_infonce(&t, img, txt, 0.2).unwrap();
            t.scalar(total)
        };
        let base = eval(&[0, 1, 2]);
        let perm = eval(&[2, 0, 1]);
        assert!(base >= 0.0);
        assert!((base - perm).abs() < 1e-12);
    }

    #[test]
    fn simsiam_equal_inputs_identity_head_is_minus_one() {
        let t = Tape::new();
        let rows = arr2(&[[0.6, 0.8], [1.0, 0.0]]);
        let img = t.var2(rows.clone());
        let cross = t.var2(rows);
        let head = identity_head(&t, 2);
        let loss = simsiam_local_image(&t, img, cross, &head, None).unwrap();
        assert!((t.scalar(loss) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn simsiam_orthogonal_inputs_identity_head_is_zero() {
        let t = Tape::new();
        let img = t.var2(arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        let cross = t.var2(arr2(&[[0.0, 1.0], [1.0, 0.0]]));
        let head = identity_head(&t, 2);
        let loss = simsiam_local_image(&t, img, cross, &head, None).unwrap();
        assert!(t.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn simsiam_matches_direct_scalar_oracle() {
        // B=1, P=2, D=3 random case, identity head so the oracle is a bare
        // cosine computation.
        let img_a = arr2(&[[0.3, -0.7, 0.2], [1.1, 0.4, -0.2]]);
        let cross_a = arr2(&[[0.5, 0.1, -0.6], [-0.2, 0.9, 0.3]]);
        let t = Tape::new();
        let img = t.var2(img_a.clone());
        let cross = t.var2(cross_a.clone());
        let head = identity_head(&t, 3);
        let loss = simsiam_local_image(&t, img, cross, &head, None).unwrap();
        let got = t.scalar(loss);

        let relu = |v: f64| v.max(0.0);
        let mut total = 0.0;
        for r in 0..2 {
            let hi: Vec<f64> = img_a.row(r).iter().map(|&x| relu(x)).collect();
            let hc: Vec<f64> = cross_a.row(r).iter().map(|&x| relu(x)).collect();
            let ci = cosine_sim(&hi, &cross_a.row(r).to_vec()).unwrap();
            let cc = cosine_sim(&hc, &img_a.row(r).to_vec()).unwrap();
            total += 0.5 * ci + 0.5 * cc;
        }
        let expect = -total / 2.0;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn simsiam_range_is_bounded() {
        let t = Tape::new();
        let img = t.var2(arr2(&[[0.9, -0.2], [0.3, 0.8], [0.5, 0.5]]));
        let cross = t.var2(arr2(&[[-0.4, 0.6], [0.7, 0.1], [0.2, -0.9]]));
        let head = identity_head(&t, 2);
        let loss = simsiam_local_image(&t, img, cross, &head, None).unwrap();
        let v = t.scalar(loss);
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn simsiam_stop_grad_branches_carry_no_gradient() {
        // Cross locals feed the predictor branch and a stop-grad branch;
        // with the predictor branch for cross removed (by checking only the
        // first term) the gradient through S must be exactly zero.
        let t = Tape::new();
        let img = t.var2(arr2(&[[0.6, 0.8]]));
        let cross = t.var2(arr2(&[[0.9, 0.1]]));
        let head = identity_head(&t, 2);
        let h_img = mlp(&t, img, &head);
        let stopped = t.stop_grad(cross);
        let term = row_cosines(&t, h_img, stopped);
        let loss = t.scale(t.sum_all(term), -1.0);
        let grads = t.backward(loss);
        assert!(grads.get(cross).is_none());
        assert!(grads.get(img).is_some());
    }

    #[test]
    fn frozen_mode_equals_live_at_capture_point() {
        let t = Tape::new();
        let img = t.var2(arr2(&[[0.5, -0.3], [0.2, 0.9]]));
        let cross = t.var2(arr2(&[[0.1, 0.7], [-0.6, 0.4]]));
        let head = identity_head(&t, 2);
        let live = simsiam_local_image(&t, img, cross, &head, None).unwrap();
        let frozen = capture_simsiam(&t, img, cross);
        let frozen_loss = simsiam_local_image(&t, img, cross, &head, Some(&frozen)).unwrap();
        assert_eq!(t.scalar(live), t.scalar(frozen_loss));
    }

    #[test]
    fn compose_matches_weighted_sum() {
        let w = LossWeights { lambda_global: 1.0, lambda_local: 1.0, lambda_re: 10.0, tau1: 0.01 };
        let b = compose_total(1.0, 1.0, 1.0, 2.0, 3.0, 0.5, &w);
        assert_eq!(compose_local(1.0, 2.0, 3.0), 6.0);
        assert_eq!(b.total, 2.0 + 6.0 + 5.0);
        let zero = compose_total(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, &w);
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn default_weights_round_trip_through_json() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_global, 1.0);
        assert_eq!(w.lambda_local, 1.0);
        assert_eq!(w.lambda_re, 10.0);
        let text = serde_json::to_string(&w).unwrap();
        let back: LossWeights = serde_json::from_str(&text).unwrap();
        assert_eq!(w, back);
    }
}
