//! Clustering-guided negative sampling over cross-modal sentence features.
//!
//! Per mini-batch: k-means (k-means++ init, Lloyd iterations, deterministic
//! tie-breaks) over the pooled cross-modal sentence representations; per
//! anchor, centers ranked by cosine similarity, the second-ranked center
//! taken as its hard negative, and the members of the top-ranked cluster
//! (minus the anchor) as its false negatives. The weighted local contrastive
//! loss adds every anchor's hard-negative center to every denominator, with
//! weight `mu_hard` on the anchor's own center and 1 elsewhere; the
//! bidirectional margin loss constrains false negatives to the similarity
//! band `[-beta, -alpha]` relative to the positive.
//!
//! Cluster centers and selections are recomputed from the current values
//! each step and enter the losses as constants: no gradient flows through
//! the clustering.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CgnsConfig {
    /// Requested cluster count; clamped to [2, batch sentence count].
    pub k: usize,
    /// Diagonal hard-negative weight.
    pub mu_hard: f64,
    /// Temperature for the local report loss.
    pub tau3: f64,
    /// Set alongside tau1/tau3 in the source hyperparameters but used by no
    /// implemented formula; kept so configs round-trip.
    pub tau2_reserved: f64,
    /// Lower margin of the bidirectional margin loss.
    pub alpha: f64,
    /// Upper margin of the bidirectional margin loss.
    pub beta: f64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Collapse duplicate hard-negative centers into single denominator
    /// columns instead of following the per-anchor sum shape literally.
    pub dedup_hard_negatives: bool,
    /// Drop false negatives from the contrastive denominator instead of
    /// leaving them in (their default treatment is the margin loss only).
    pub exclude_false_negatives: bool,
}

impl Default for CgnsConfig {
    fn default() -> Self {
        Self {
            k: 16,
            mu_hard: 3.0,
            tau3: 0.01,
            tau2_reserved: 0.01,
            alpha: 0.2,
            beta: 0.5,
            kmeans_max_iters: 50,
            kmeans_tol: 1e-6,
            dedup_hard_negatives: false,
            exclude_false_negatives: false,
        }
    }
}

impl CgnsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("cgns k ({}) must be >= 2", self.k)));
        }
        if self.mu_hard < 0.0 {
            return Err(Error::Config(format!("mu_hard ({}) must be >= 0", self.mu_hard)));
        }
        if self.tau3 <= 0.0 {
            return Err(Error::Config(format!("tau3 ({}) must be > 0", self.tau3)));
        }
        if !(self.alpha > 0.0 && self.alpha < self.beta) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 < alpha ({}) < beta ({})",
                self.alpha, self.beta
            )));
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::Config("kmeans_max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// K-means result plus the per-anchor negative selections derived from it.
#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    /// Nearest-center index per point.
    pub assignments: Vec<usize>,
    /// k_eff x d matrix of centers.
    pub centers: Array2<f64>,
    pub k_eff: usize,
    /// Within-cluster sum of squared distances after the final iteration.
    pub inertia: f64,
    /// Inertia after every Lloyd iteration; non-increasing.
    pub inertia_history: Vec<f64>,
    /// Per anchor: center indices sorted by descending cosine similarity to
    /// the anchor, ties broken by lower center index.
    pub ranking: Vec<Vec<usize>>,
    /// Per anchor: the second-ranked center index (its hard negative).
    pub hard_center: Vec<usize>,
    /// Per anchor: points assigned to its top-ranked center's cluster,
    /// excluding the anchor itself.
    pub false_negatives: Vec<Vec<usize>>,
}

fn dist2(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ initialization.
///
/// `k` is clamped to `[2, points.nrows()]`. Empty clusters are repaired each
/// iteration by reseeding them with the point farthest from its assigned
/// center (never stealing from singleton clusters), which keeps the inertia
/// sequence non-increasing.
pub fn kmeans(
    points: &Array2<f64>,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(Vec<usize>, Array2<f64>, f64, Vec<f64>)> {
    let m = points.nrows();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("kmeans points".into()));
    }
    let k_eff = k.clamp(2, m);
    let d = points.ncols();
    let mut rng = KeyedRng::new(seed, crate::rng::purpose::KMEANS);

    // k-means++ seeding.
    let mut centers = Array2::zeros((k_eff, d));
    let first = rng.below(m as u64) as usize;
    centers.row_mut(0).assign(&points.row(first));
    let mut best_d2: Vec<f64> = (0..m).map(|i| dist2(points.row(i), centers.row(0))).collect();
    for c in 1..k_eff {
        let pick = rng.sample_weighted(&best_d2);
        centers.row_mut(c).assign(&points.row(pick));
        for i in 0..m {
            let nd = dist2(points.row(i), centers.row(c));
            if nd < best_d2[i] {
                best_d2[i] = nd;
            }
        }
    }

    let mut assignments = vec![0usize; m];
    let mut history = Vec::new();
    for _iter in 0..max_iters {
        // Assign to nearest center, lowest index on ties.
        for i in 0..m {
            let mut best = 0usize;
            let mut best_val = dist2(points.row(i), centers.row(0));
            for c in 1..k_eff {
                let v = dist2(points.row(i), centers.row(c));
                if v < best_val {
                    best_val = v;
                    best = c;
                }
            }
            assignments[i] = best;
        }

        // Repair empty clusters.
        let mut sizes = vec![0usize; k_eff];
        for &a in &assignments {
            sizes[a] += 1;
        }
        for empty in 0..k_eff {
            if sizes[empty] > 0 {
                continue;
            }
            let mut far_idx = None;
            let mut far_val = f64::NEG_INFINITY;
            for i in 0..m {
                if sizes[assignments[i]] < 2 {
                    continue;
                }
                let v = dist2(points.row(i), centers.row(assignments[i]));
                if v > far_val {
                    far_val = v;
                    far_idx = Some(i);
                }
            }
            if let Some(i) = far_idx {
                sizes[assignments[i]] -= 1;
                assignments[i] = empty;
                sizes[empty] = 1;
                centers.row_mut(empty).assign(&points.row(i));
            }
        }

        // Update centers to cluster means.
        let mut new_centers = Array2::<f64>::zeros((k_eff, d));
        let mut counts = vec![0usize; k_eff];
        for i in 0..m {
            let mut row = new_centers.row_mut(assignments[i]);
            row += &points.row(i);
            counts[assignments[i]] += 1;
        }
        let mut shift: f64 = 0.0;
        for c in 0..k_eff {
            if counts[c] > 0 {
                let mut row = new_centers.row_mut(c);
                row /= counts[c] as f64;
            } else {
                new_centers.row_mut(c).assign(&centers.row(c));
            }
            shift = shift.max(dist2(new_centers.row(c), centers.row(c)).sqrt());
        }
        centers = new_centers;

        let inertia: f64 = (0..m)
            .map(|i| dist2(points.row(i), centers.row(assignments[i])))
            .sum();
        history.push(inertia);
        if shift < tol {
            break;
        }
    }
    let inertia = *history.last().unwrap();
    Ok((assignments, centers, inertia, history))
}

fn cosine_to_center(anchor: ndarray::ArrayView1<f64>, center: ndarray::ArrayView1<f64>) -> f64 {
    let na = anchor.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nc = center.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nc == 0.0 {
        // A zero center carries no direction; rank it below any real cosine.
        return -2.0;
    }
    anchor.iter().zip(center.iter()).map(|(a, b)| a * b).sum::<f64>() / (na * nc)
}

/// Run k-means over `points` and derive per-anchor rankings, hard negatives,
/// and false-negative sets. `anchors` and `points` are row-aligned (anchor j
/// corresponds to point j).
pub fn cluster_and_select(
    anchors: &Array2<f64>,
    points: &Array2<f64>,
    cfg: &CgnsConfig,
    seed: u64,
) -> Result<ClusterOutcome> {
    cfg.validate()?;
    if anchors.nrows() != points.nrows() {
        return Err(Error::Shape(format!(
            "anchors ({}) and points ({}) row counts differ",
            anchors.nrows(),
            points.nrows()
        )));
    }
    for (j, row) in anchors.rows().into_iter().enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>();
        if norm == 0.0 {
            return Err(Error::ZeroNorm(format!("anchor row {j}")));
        }
    }
    let (assignments, centers, inertia, inertia_history) =
        kmeans(points, cfg.k, cfg.kmeans_max_iters, cfg.kmeans_tol, seed)?;
    let k_eff = centers.nrows();
    let m = anchors.nrows();

    let mut ranking = Vec::with_capacity(m);
    let mut hard_center = Vec::with_capacity(m);
    let mut false_negatives = Vec::with_capacity(m);
    for j in 0..m {
        let mut order: Vec<usize> = (0..k_eff).collect();
        let sims: Vec<f64> = (0..k_eff)
            .map(|c| cosine_to_center(anchors.row(j), centers.row(c)))
            .collect();
        order.sort_by(|&a, &b| {
            sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b))
        });
        let top = order[0];
        hard_center.push(order[1]);
        false_negatives.push(
            (0..m).filter(|&i| i != j && assignments[i] == top).collect(),
        );
        ranking.push(order);
    }

    Ok(ClusterOutcome {
        assignments,
        centers,
        k_eff,
        inertia,
        inertia_history,
        ranking,
        hard_center,
        false_negatives,
    })
}

fn normalize_rows_arr(a: &Array2<f64>, context: &str) -> Result<Array2<f64>> {
    let mut out = a.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm(format!("{context} row {i}")));
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(out)
}

/// Constant matrices for the hard-negative term of the local report loss:
/// the (column-stacked, L2-normalized) hard-negative centers and the weight
/// matrix giving the anchor's own center weight `mu_hard` and 1 elsewhere.
pub fn hard_negative_matrices(
    outcome: &ClusterOutcome,
    cfg: &CgnsConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let m = outcome.hard_center.len();
    let d = outcome.centers.ncols();
    let cols: Vec<usize> = if cfg.dedup_hard_negatives {
        let mut uniq: Vec<usize> = outcome.hard_center.clone();
        uniq.sort_unstable();
        uniq.dedup();
        uniq
    } else {
        outcome.hard_center.clone()
    };
    let mut centers = Array2::zeros((cols.len(), d));
    for (i, &c) in cols.iter().enumerate() {
        centers.row_mut(i).assign(&outcome.centers.row(c));
    }
    let centers = normalize_rows_arr(&centers, "hard-negative center")?;
    let mut weights = Array2::from_elem((m, cols.len()), 1.0);
    for j in 0..m {
        if cfg.dedup_hard_negatives {
            let col = cols.iter().position(|&c| c == outcome.hard_center[j]).unwrap();
            weights[[j, col]] = cfg.mu_hard;
        } else {
            weights[[j, j]] = cfg.mu_hard;
        }
    }
    Ok((centers, weights))
}

/// 0/1 mask over the in-batch similarity matrix that drops each anchor's
/// false negatives from the contrastive denominator (identity-preserving).
pub fn false_negative_denominator_mask(outcome: &ClusterOutcome) -> Array2<f64> {
    let m = outcome.false_negatives.len();
    let mut mask = Array2::from_elem((m, m), 1.0);
    for (j, set) in outcome.false_negatives.iter().enumerate() {
        for &i in set {
            mask[[j, i]] = 0.0;
        }
    }
    mask
}

/// Weighted local contrastive loss over anchors `f_txt` (m x d) against
/// positives `f_cross` (m x d) with hard-negative centers as additional
/// denominator terms:
///
/// `L = -(1/m) sum_j log( exp(s_jj/tau) / H_j )`,
/// `H_j = sum_k mask_jk exp(s_jk/tau) + sum_k w_jk exp(shat_jk/tau)`,
///
/// with `s` the anchor/positive cosine matrix and `shat` the anchor/center
/// cosine matrix. All dot products are over L2-normalized rows.
pub fn local_report_loss(
    t: &Tape,
    anchors: Var,
    positives: Var,
    hard_centers: &Array2<f64>,
    hard_weights: &Array2<f64>,
    denominator_mask: &Array2<f64>,
    tau3: f64,
) -> Result<Var> {
    let m = t.shape(anchors)[0];
    let av = t.value2(anchors);
    let pv = t.value2(positives);
    if av.iter().chain(pv.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("local report loss inputs".into()));
    }
    for (name, arr) in [("anchors", &av), ("positives", &pv)] {
        for (i, row) in arr.rows().into_iter().enumerate() {
            if row.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                return Err(Error::ZeroNorm(format!("{name} row {i}")));
            }
        }
    }
    let a_n = t.normalize_rows(anchors);
    let p_n = t.normalize_rows(positives);
    let sims = t.matmul(a_n, t.transpose(p_n));
    let e_s = t.exp(t.scale(sims, 1.0 / tau3));
    let pos_terms = t.row_sums(t.mul_const(e_s, Array2::eye(m).into_dyn()));
    let mut denom = t.row_sums(t.mul_const(e_s, denominator_mask.clone().into_dyn()));
    if hard_centers.nrows() > 0 {
        let c_n = t.constant2(hard_centers.clone());
        let shat = t.matmul(a_n, t.transpose(c_n));
        let e_hat = t.exp(t.scale(shat, 1.0 / tau3));
        let weighted = t.mul_const(e_hat, hard_weights.clone().into_dyn());
        denom = t.add(denom, t.row_sums(weighted));
    }
    let ratios = t.div(pos_terms, denom);
    Ok(t.scale(t.sum_all(t.ln(ratios)), -1.0 / m as f64))
}

/// Bidirectional margin loss over (anchor, false negative) pairs:
/// `relu(dx + alpha) + relu(-dx - beta)` with
/// `dx = cos(anchor_j, positive_k) - cos(anchor_j, positive_j)`, averaged
/// over all pairs. Anchors with empty sets contribute nothing; all-empty
/// yields exactly zero.
pub fn bml_loss(
    t: &Tape,
    anchors: Var,
    positives: Var,
    false_negatives: &[Vec<usize>],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let m = t.shape(anchors)[0];
    assert_eq!(false_negatives.len(), m, "false-negative sets per anchor");
    let n_pairs: usize = false_negatives.iter().map(|s| s.len()).sum();
    if n_pairs == 0 {
        return Ok(t.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1]))));
    }
    let av = t.value2(anchors);
    let pv = t.value2(positives);
    if av.iter().chain(pv.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("bml loss inputs".into()));
    }
    let a_n = t.normalize_rows(anchors);
    let p_n = t.normalize_rows(positives);
    let sims = t.matmul(a_n, t.transpose(p_n));
    let diag = t.row_sums(t.mul_const(sims, Array2::eye(m).into_dyn()));
    let delta = t.sub(sims, t.broadcast_col(diag, m));
    let lower = t.relu(t.add_scalar(delta, alpha));
    let upper = t.relu(t.add_scalar(t.scale(delta, -1.0), -beta));
    let hinges = t.add(lower, upper);
    let mut pair_mask = Array2::zeros((m, m));
    for (j, set) in false_negatives.iter().enumerate() {
        for &i in set {
            assert_ne!(i, j, "anchor in its own false-negative set");
            pair_mask[[j, i]] = 1.0;
        }
    }
    let selected = t.mul_const(hinges, pair_mask.into_dyn());
    Ok(t.scale(t.sum_all(selected), 1.0 / n_pairs as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn kmeans_separates_two_obvious_clusters() {
        let pts = arr2(&[[0.0], [0.1], [10.0], [10.1]]);
        let (assign, centers, inertia, history) = kmeans(&pts, 2, 50, 1e-9, 3).unwrap();
        let mut cs: Vec<f64> = centers.column(0).to_vec();
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((cs[0] - 0.05).abs() < 1e-12);
        assert!((cs[1] - 10.05).abs() < 1e-12);
        assert!((inertia - 0.01).abs() < 1e-12);
        assert_eq!(assign[0], assign[1]);
        assert_eq!(assign[2], assign[3]);
        assert_ne!(assign[0], assign[2]);
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn kmeans_k_equals_m_gives_singletons() {
        let pts = arr2(&[[0.0, 1.0], [2.0, -1.0], [5.0, 5.0]]);
        let (_, _, inertia, _) = kmeans(&pts, 3, 50, 1e-9, 11).unwrap();
        assert!(inertia.abs() < 1e-15);
    }

    #[test]
    fn kmeans_identical_points_center_on_them() {
        let pts = arr2(&[[2.5, -1.0], [2.5, -1.0], [2.5, -1.0]]);
        let (_, centers, inertia, _) = kmeans(&pts, 2, 50, 1e-9, 1).unwrap();
        assert!(inertia.abs() < 1e-15);
        for c in centers.rows() {
            assert!((c[0] - 2.5).abs() < 1e-15);
            assert!((c[1] + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kmeans_single_point_is_batch_too_small() {
        let pts = arr2(&[[1.0, 2.0]]);
        assert!(matches!(kmeans(&pts, 2, 50, 1e-9, 1), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn assignments_are_nearest_center() {
        let pts = Array2::from_shape_fn((40, 3), |(i, j)| {
            ((i * 7 + j * 13) % 17) as f64 / 17.0 + if i % 3 == 0 { 4.0 } else { 0.0 }
        });
        let (assign, centers, _, _) = kmeans(&pts, 5, 50, 1e-9, 9).unwrap();
        for i in 0..pts.nrows() {
            let own = dist2(pts.row(i), centers.row(assign[i]));
            for c in 0..centers.nrows() {
                assert!(own <= dist2(pts.row(i), centers.row(c)) + 1e-12);
            }
        }
    }

    #[test]
    fn ranking_orders_by_cosine_and_picks_second() {
        let anchors = arr2(&[[1.0, 0.0]]);
        let centers = arr2(&[[1.0, 0.1], [0.0, 1.0], [-1.0, 0.0]]);
        let sims: Vec<f64> = (0..3)
            .map(|c| cosine_to_center(anchors.row(0), centers.row(c)))
            .collect();
        let mut order: Vec<usize> = vec![0, 1, 2];
        order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(order, vec![0, 1, 2]);
        // In the full selection path the hard negative is the rank-2 center.
        // Build data whose k-means centers land on these three directions.
        let pts = arr2(&[
            [1.0, 0.1],
            [1.0, 0.1],
            [0.0, 1.0],
            [0.0, 1.0],
            [-1.0, 0.0],
            [-1.0, 0.0],
        ]);
        let anchors6 = arr2(&[
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
        ]);
        let cfg = CgnsConfig { k: 3, ..Default::default() };
        let out = cluster_and_select(&anchors6, &pts, &cfg, 5).unwrap();
        for j in 0..6 {
            let hard = out.centers.row(out.hard_center[j]);
            assert!((hard[0] - 0.0).abs() < 1e-12 && (hard[1] - 1.0).abs() < 1e-12);
            assert_ne!(out.hard_center[j], out.ranking[j][0]);
        }
    }

    #[test]
    fn two_clusters_hard_negative_is_the_other_center() {
        let pts = arr2(&[[0.0, 1.0], [0.1, 1.0], [5.0, 0.0], [5.1, 0.0]]);
        let anchors = pts.clone();
        let cfg = CgnsConfig { k: 2, ..Default::default() };
        let out = cluster_and_select(&anchors, &pts, &cfg, 21).unwrap();
        for j in 0..4 {
            assert_ne!(out.hard_center[j], out.ranking[j][0]);
            assert_eq!(out.ranking[j][1], out.hard_center[j]);
        }
    }

    #[test]
    fn selection_is_scale_invariant() {
        let pts = Array2::from_shape_fn((10, 4), |(i, j)| ((i * 5 + j * 3) % 11) as f64 - 5.0);
        let anchors = Array2::from_shape_fn((10, 4), |(i, j)| ((i * 7 + j * 2) % 13) as f64 - 6.0);
        let cfg = CgnsConfig { k: 3, ..Default::default() };
        let a = cluster_and_select(&anchors, &pts, &cfg, 77).unwrap();
        let b = cluster_and_select(
            &anchors.mapv(|x| 5.0 * x),
            &pts.mapv(|x| 5.0 * x),
            &cfg,
            77,
        )
        .unwrap();
        // Scaling anchors leaves cosine rankings unchanged; scaling points
        // scales centers but preserves the partition, so selections agree.
        assert_eq!(a.ranking, b.ranking);
        assert_eq!(a.hard_center, b.hard_center);
        assert_eq!(a.false_negatives, b.false_negatives);
    }

    #[test]
    fn zero_norm_anchor_is_an_error() {
        let pts = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let anchors = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        let cfg = CgnsConfig::default();
        assert!(matches!(
            cluster_and_select(&anchors, &pts, &cfg, 3),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn report_loss_single_sentence_no_hard_weight_is_zero() {
        let t = Tape::new();
        let anchors = t.var2(arr2(&[[0.6, 0.8]]));
        let positives = t.var2(arr2(&[[0.0, 1.0]]));
        let centers = arr2(&[[1.0, 0.0]]);
        let weights = arr2(&[[0.0]]);
        let mask = arr2(&[[1.0]]);
        let loss =
            local_report_loss(&t, anchors, positives, &centers, &weights, &mask, 0.5).unwrap();
        assert!(t.scalar(loss).abs() < 1e-15);
    }

    #[test]
    fn report_loss_matches_direct_evaluation_m2() {
        // M=2, D=2, tau=1; direct scalar evaluation of the formula.
        let anchors_a = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let positives_a = arr2(&[[0.8, 0.6], [0.6, 0.8]]);
        let centers_a = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let mu = 3.0;

        let t = Tape::new();
        let anchors = t.var2(anchors_a.clone());
        let positives = t.var2(positives_a.clone());
        let weights = arr2(&[[mu, 1.0], [1.0, mu]]);
        let mask = Array2::from_elem((2, 2), 1.0);
        let loss =
            local_report_loss(&t, anchors, positives, &centers_a, &weights, &mask, 1.0).unwrap();
        let got = t.scalar(loss);

        // anchors and centers are already unit rows; positives are unit too.
        let s = |j: usize, k: usize| {
            anchors_a.row(j).dot(&positives_a.row(k))
        };
        let shat = |j: usize, k: usize| anchors_a.row(j).dot(&centers_a.row(k));
        let mut total = 0.0;
        for j in 0..2 {
            let mut h = 0.0;
            for k in 0..2 {
                h += s(j, k).exp();
                let w = if j == k { mu } else { 1.0 };
                h += w * shat(j, k).exp();
            }
            total += -(s(j, j).exp() / h).ln();
        }
        let expect = total / 2.0;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn report_loss_increases_with_mu() {
        let anchors_a = arr2(&[[1.0, 0.2], [-0.3, 1.0], [0.5, 0.5]]);
        let positives_a = arr2(&[[0.9, 0.1], [0.1, 0.9], [0.6, 0.4]]);
        let centers_a = arr2(&[[0.3, 0.7], [0.8, 0.2], [0.1, 0.5]]);
        let eval = |mu: f64| {
            let t = Tape::new();
            let anchors = t.var2(anchors_a.clone());
            let positives = t.var2(positives_a.clone());
            let mut weights = Array2::from_elem((3, 3), 1.0);
            for j in 0..3 {
                weights[[j, j]] = mu;
            }
            let mask = Array2::from_elem((3, 3), 1.0);
            let centers = normalize_rows_arr(&centers_a, "c").unwrap();
            let loss =
                local_report_loss(&t, anchors, positives, &centers, &weights, &mask, 0.1)
                    .unwrap();
            t.scalar(loss)
        };
        assert!(eval(3.0) > eval(1.0));
        assert!(eval(1.0) > eval(0.0));
    }

    #[test]
    fn report_loss_is_nonnegative_and_permutation_invariant() {
        let anchors_a = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j * 7) % 11) as f64 - 5.0);
        let positives_a =
            Array2::from_shape_fn((5, 3), |(i, j)| ((i * 5 + j * 2) % 13) as f64 - 6.0);
        let centers_a = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 2 + j * 9) % 7) as f64 - 3.0);
        let centers_a = normalize_rows_arr(&centers_a, "c").unwrap();

        let eval = |perm: &[usize]| {
            let t = Tape::new();
            let sel = |arr: &Array2<f64>| {
                let mut out = Array2::zeros(arr.raw_dim());
                for (i, &p) in perm.iter().enumerate() {
                    out.row_mut(i).assign(&arr.row(p));
                }
                out
            };
            let anchors = t.var2(sel(&anchors_a));
            let positives = t.var2(sel(&positives_a));
            let centers = sel(&centers_a);
            let mut weights = Array2::from_elem((5, 5), 1.0);
            for j in 0..5 {
                weights[[j, j]] = 3.0;
            }
            let mask = Array2::from_elem((5, 5), 1.0);
            let loss =
                local_report_loss(&t, anchors, positives, &centers, &weights, &mask, 0.07)
                    .unwrap();
            t.scalar(loss)
        };
        let base = eval(&[0, 1, 2, 3, 4]);
        let perm = eval(&[3, 0, 4, 1, 2]);
        assert!(base >= 0.0);
        assert!((base - perm).abs() < 1e-9, "{base} vs {perm}");
    }

    #[test]
    fn bml_arithmetic_cases() {
        // One anchor with one false negative; engineer dx directly.
        let eval = |cos_pos: f64, cos_fn: f64| {
            let t = Tape::new();
            let anchors = t.var2(arr2(&[
                [1.0, 0.0],
                [0.0, 1.0],
            ]));
            let positives = t.var2(arr2(&[
                [cos_pos, (1.0 - cos_pos * cos_pos).sqrt()],
                [cos_fn, (1.0 - cos_fn * cos_fn).sqrt()],
            ]));
            // Anchor 0's false negative is row 1; anchor 1 has none.
            // dx = cos(a0, p1) - cos(a0, p0) = cos_fn - cos_pos.
            let sets = vec![vec![1usize], vec![]];
            let loss = bml_loss(&t, anchors, positives, &sets, 0.2, 0.5).unwrap();
            t.scalar(loss)
        };
        // dx = -0.3: inside the feasible band, zero loss.
        assert!(eval(0.8, 0.5).abs() < 1e-12);
        // dx = 0: relu(0.2) + relu(-0.5) = 0.2.
        assert!((eval(0.5, 0.5) - 0.2).abs() < 1e-12);
        // dx = -0.7: relu(-0.5) + relu(0.2) = 0.2.
        assert!((eval(0.8, 0.1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn bml_empty_sets_are_exactly_zero() {
        let t = Tape::new();
        let anchors = t.var2(arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        let positives = t.var2(arr2(&[[0.5, 0.5], [0.3, 0.7]]));
        let sets = vec![vec![], vec![]];
        let loss = bml_loss(&t, anchors, positives, &sets, 0.2, 0.5).unwrap();
        assert_eq!(t.scalar(loss), 0.0);
    }
}
