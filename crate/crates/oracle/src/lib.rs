//! Independent brute-force oracles for the loss formulas and clustering.
//!
//! Everything here is written as naive 64-bit loops straight from the
//! formula definitions, on plain `Vec` types, with no code shared with the
//! production implementations it checks. Used only from tests and the
//! golden-case generator.

use serde::{Deserialize, Serialize};

pub type Mat = Vec<Vec<f64>>;

// ---- tiny self-contained RNG for case generation ----

/// SplitMix64 stream; independent of the production generator.
pub struct OracleRng {
    state: u64,
}

impl OracleRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
        (0..rows).map(|_| (0..cols).map(|_| self.range(lo, hi)).collect()).collect()
    }
}

// ---- shared little helpers (naive on purpose) ----

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|x| x / n).collect()
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn matvec(m: &Mat, x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, x)).collect()
}

// ---- formula oracles ----

/// Symmetric batch contrastive loss over paired embeddings at temperature
/// `tau`: returns (image-to-report, report-to-image, sum).
pub fn oracle_infonce(img: &Mat, txt: &Mat, tau: f64) -> (f64, f64, f64) {
    let b = img.len();
    let img_n: Vec<Vec<f64>> = img.iter().map(|r| unit(r)).collect();
    let txt_n: Vec<Vec<f64>> = txt.iter().map(|r| unit(r)).collect();
    let mut i2r = 0.0;
    let mut r2i = 0.0;
    for i in 0..b {
        let pos = (dot(&img_n[i], &txt_n[i]) / tau).exp();
        let mut den_i2r = 0.0;
        let mut den_r2i = 0.0;
        for j in 0..b {
            den_i2r += (dot(&img_n[i], &txt_n[j]) / tau).exp();
            den_r2i += (dot(&txt_n[i], &img_n[j]) / tau).exp();
        }
        i2r += -(pos / den_i2r).ln();
        r2i += -(pos / den_r2i).ln();
    }
    i2r /= b as f64;
    r2i /= b as f64;
    (i2r, r2i, i2r + r2i)
}

/// Sigmoid-scored cross attention: output row n is
/// `sum_m sigmoid((Q q_n . K kv_m)/sqrt(d)) * (V kv_m)`.
pub fn oracle_xattn(query: &Mat, kv: &Mat, q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let d = q.len();
    let mut out = Vec::with_capacity(query.len());
    let mut scores = Vec::with_capacity(query.len());
    for qrow in query {
        let qf = matvec(q, qrow);
        let mut orow = vec![0.0; d];
        let mut srow = Vec::with_capacity(kv.len());
        for krow in kv {
            let kf = matvec(k, krow);
            let vf = matvec(v, krow);
            let logit = dot(&qf, &kf) / (d as f64).sqrt();
            let s = 1.0 / (1.0 + (-logit).exp());
            srow.push(s);
            for c in 0..d {
                orow[c] += s * vf[c];
            }
        }
        out.push(orow);
        scores.push(srow);
    }
    (out, scores)
}

/// Weighted local contrastive loss with per-anchor hard-negative centers.
/// All dot products over L2-normalized rows; `hard_centers[k]` is anchor
/// k's hard-negative center; weight `mu` applies at j == k and 1 elsewhere.
pub fn oracle_eq7(anchors: &Mat, positives: &Mat, hard_centers: &Mat, mu: f64, tau: f64) -> f64 {
    let m = anchors.len();
    let a: Vec<Vec<f64>> = anchors.iter().map(|r| unit(r)).collect();
    let p: Vec<Vec<f64>> = positives.iter().map(|r| unit(r)).collect();
    let c: Vec<Vec<f64>> = hard_centers.iter().map(|r| unit(r)).collect();
    let mut total = 0.0;
    for j in 0..m {
        let num = (dot(&a[j], &p[j]) / tau).exp();
        let mut h = 0.0;
        for k in 0..m {
            h += (dot(&a[j], &p[k]) / tau).exp();
            let w = if j == k { mu } else { 1.0 };
            h += w * (dot(&a[j], &c[k]) / tau).exp();
        }
        total += -(num / h).ln();
    }
    total / m as f64
}

/// Bidirectional margin loss over (anchor, false-negative) pairs, averaged.
pub fn oracle_eq9(
    anchors: &Mat,
    positives: &Mat,
    false_sets: &[Vec<usize>],
    alpha: f64,
    beta: f64,
) -> f64 {
    let relu = |x: f64| x.max(0.0);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (j, set) in false_sets.iter().enumerate() {
        let pos = oracle_cosine(&anchors[j], &positives[j]);
        for &i in set {
            let dx = oracle_cosine(&anchors[j], &positives[i]) - pos;
            total += relu(dx + alpha) + relu(-dx - beta);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Scalar bidirectional margin contribution for a given similarity gap.
pub fn oracle_bml_pair(dx: f64, alpha: f64, beta: f64) -> f64 {
    (dx + alpha).max(0.0) + (-dx - beta).max(0.0)
}

fn mlp_row(x: &[f64], w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Vec<f64> {
    let d_out = b1.len();
    let mut hidden = vec![0.0; d_out];
    for o in 0..d_out {
        let mut acc = b1[o];
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w1[i][o];
        }
        hidden[o] = acc.max(0.0);
    }
    let d2 = b2.len();
    let mut out = vec![0.0; d2];
    for o in 0..d2 {
        let mut acc = b2[o];
        for (i, hi) in hidden.iter().enumerate() {
            acc += hi * w2[i][o];
        }
        out[o] = acc;
    }
    out
}

/// Symmetric stop-gradient alignment value: mean over rows of
/// `-(cos(h(x_r), y_r) + cos(h(y_r), x_r)) / 2` with `h` a relu perceptron.
pub fn oracle_eq10(
    img: &Mat,
    cross: &Mat,
    w1: &Mat,
    b1: &[f64],
    w2: &Mat,
    b2: &[f64],
) -> f64 {
    let n = img.len();
    let mut total = 0.0;
    for r in 0..n {
        let h_img = mlp_row(&img[r], w1, b1, w2, b2);
        let h_cross = mlp_row(&cross[r], w1, b1, w2, b2);
        total += 0.5 * oracle_cosine(&h_img, &cross[r]) + 0.5 * oracle_cosine(&h_cross, &img[r]);
    }
    -total / n as f64
}

/// Mean absolute error over all pixels of all samples.
pub fn oracle_eq12(recon: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..recon.len() {
        acc += (recon[i] - target[i]).abs();
    }
    acc / recon.len() as f64
}

/// Exhaustive k-means optimum: enumerate every assignment of the points to
/// at most `k` groups and return the best (assignments, inertia). Feasible
/// for `k^n` up to a few million.
pub fn oracle_kmeans_bruteforce(points: &Mat, k: usize) -> (Vec<usize>, f64) {
    let n = points.len();
    let d = points[0].len();
    let combos = (k as u128).pow(n as u32);
    assert!(combos <= 20_000_000, "brute-force k-means instance too large");
    let mut best_assign = vec![0usize; n];
    let mut best_inertia = f64::INFINITY;
    let mut assign = vec![0usize; n];
    for code in 0..combos {
        let mut c = code;
        for a in assign.iter_mut() {
            *a = (c % k as u128) as usize;
            c /= k as u128;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for c in 0..d {
                sums[a][c] += points[i][c];
            }
        }
        let mut inertia = 0.0;
        for (i, &a) in assign.iter().enumerate() {
            for c in 0..d {
                let center = sums[a][c] / counts[a] as f64;
                let diff = points[i][c] - center;
                inertia += diff * diff;
            }
        }
        if inertia < best_inertia {
            best_inertia = inertia;
            best_assign = assign.clone();
        }
    }
    (best_assign, best_inertia)
}

// ---- golden cases ----

pub const GOLDEN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub formula: String,
    pub inputs: serde_json::Value,
    pub expected: Vec<f64>,
    pub tolerance: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GoldenFile {
    pub format_version: u32,
    pub seed: u64,
    pub cases: Vec<GoldenCase>,
}

/// Deterministically generate a small frozen case set per formula.
pub fn generate_golden(seed: u64, per_formula: usize) -> GoldenFile {
    let mut rng = OracleRng::new(seed);
    let mut cases = Vec::new();
    let tol = 1e-10;

    for i in 0..per_formula {
        let b = 2 + rng.below(3);
        let d = 2 + rng.below(3);
        let img = rng.matrix(b, d, -1.0, 1.0);
        let txt = rng.matrix(b, d, -1.0, 1.0);
        let tau = rng.range(0.05, 1.0);
        let (i2r, r2i, total) = oracle_infonce(&img, &txt, tau);
        cases.push(GoldenCase {
            name: format!("infonce_{i}"),
            formula: "infonce".into(),
            inputs: serde_json::json!({ "img": img, "txt": txt, "tau": tau }),
            expected: vec![i2r, r2i, total],
            tolerance: tol,
        });
    }

    for i in 0..per_formula {
        let m = 1 + rng.below(3);
        let p = 1 + rng.below(4);
        let d = 2 + rng.below(3);
        let query = rng.matrix(m, d, -1.0, 1.0);
        let kv = rng.matrix(p, d, -1.0, 1.0);
        let q = rng.matrix(d, d, -0.7, 0.7);
        let k = rng.matrix(d, d, -0.7, 0.7);
        let v = rng.matrix(d, d, -0.7, 0.7);
        let (out, scores) = oracle_xattn(&query, &kv, &q, &k, &v);
        let mut expected: Vec<f64> = out.into_iter().flatten().collect();
        expected.extend(scores.into_iter().flatten());
        cases.push(GoldenCase {
            name: format!("xattn_{i}"),
            formula: "xattn".into(),
            inputs: serde_json::json!({ "query": query, "kv": kv, "q": q, "k": k, "v": v }),
            expected,
            tolerance: tol,
        });
    }

    for i in 0..per_formula {
        let m = 2 + rng.below(4);
        let d = 2 + rng.below(3);
        let anchors = rng.matrix(m, d, 0.1, 1.0);
        let positives = rng.matrix(m, d, 0.1, 1.0);
        let centers = rng.matrix(m, d, 0.1, 1.0);
        let mu = rng.range(0.0, 4.0);
        let tau = rng.range(0.05, 1.0);
        let loss = oracle_eq7(&anchors, &positives, &centers, mu, tau);
        cases.push(GoldenCase {
            name: format!("eq7_{i}"),
            formula: "eq7".into(),
            inputs: serde_json::json!({
                "anchors": anchors, "positives": positives, "hard_centers": centers,
                "mu": mu, "tau": tau
            }),
            expected: vec![loss],
            tolerance: tol,
        });
    }

    for i in 0..per_formula {
        let m = 2 + rng.below(4);
        let d = 2 + rng.below(3);
        let anchors = rng.matrix(m, d, 0.1, 1.0);
        let positives = rng.matrix(m, d, 0.1, 1.0);
        let mut false_sets: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (j, set) in false_sets.iter_mut().enumerate() {
            for cand in 0..m {
                if cand != j && rng.uniform() < 0.5 {
                    set.push(cand);
                }
            }
        }
        let alpha = rng.range(0.05, 0.3);
        let beta = alpha + rng.range(0.05, 0.5);
        let loss = oracle_eq9(&anchors, &positives, &false_sets, alpha, beta);
        cases.push(GoldenCase {
            name: format!("eq9_{i}"),
            formula: "eq9".into(),
            inputs: serde_json::json!({
                "anchors": anchors, "positives": positives, "false_sets": false_sets,
                "alpha": alpha, "beta": beta
            }),
            expected: vec![loss],
            tolerance: tol,
        });
    }

    for i in 0..per_formula {
        let n = 2 + rng.below(4);
        let d = 2 + rng.below(3);
        let img = rng.matrix(n, d, 0.1, 1.0);
        let cross = rng.matrix(n, d, 0.1, 1.0);
        let w1 = rng.matrix(d, d, 0.05, 0.8);
        let b1 = vec![0.0; d];
        let w2 = rng.matrix(d, d, 0.05, 0.8);
        let b2 = vec![0.0; d];
        let loss = oracle_eq10(&img, &cross, &w1, &b1, &w2, &b2);
        cases.push(GoldenCase {
            name: format!("eq10_{i}"),
            formula: "eq10".into(),
            inputs: serde_json::json!({
                "img": img, "cross": cross, "w1": w1, "b1": b1, "w2": w2, "b2": b2
            }),
            expected: vec![loss],
            tolerance: tol,
        });
    }

    for i in 0..per_formula {
        let n = 8 + rng.below(24);
        let recon: Vec<f64> = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.range(0.0, 1.0)).collect();
        let loss = oracle_eq12(&recon, &target);
        cases.push(GoldenCase {
            name: format!("eq12_{i}"),
            formula: "eq12".into(),
            inputs: serde_json::json!({ "recon": recon, "target": target }),
            expected: vec![loss],
            tolerance: tol,
        });
    }

    for i in 0..per_formula {
        let n = 4 + rng.below(5); // up to 8 points
        let k = 2 + rng.below(2); // 2 or 3 groups
        let d = 1 + rng.below(2);
        let points = rng.matrix(n, d, -2.0, 2.0);
        let (_, inertia) = oracle_kmeans_bruteforce(&points, k);
        cases.push(GoldenCase {
            name: format!("kmeans_{i}"),
            formula: "kmeans".into(),
            inputs: serde_json::json!({ "points": points, "k": k }),
            expected: vec![inertia],
            tolerance: 0.05, // production Lloyd must land within 5% of optimum
        });
    }

    GoldenFile { format_version: GOLDEN_FORMAT_VERSION, seed, cases }
}
