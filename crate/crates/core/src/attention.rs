//! Sigmoid-scored cross-modal attention.
//!
//! Queries from one modality attend over the other modality's local
//! features. Scores are `sigmoid((Q q_n . K v_m) / sqrt(D))` -- not softmax,
//! so rows do not sum to one and each key contributes independently. The
//! output row is the score-weighted sum of value projections `V v_m`.
//! Masked key rows are dropped before any product, so they contribute
//! exactly zero terms rather than `sigmoid(-inf)` approximations.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// One direction's learnable square matrices, each d x d.
#[derive(Copy, Clone)]
pub struct AttnVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Cross attention of `query` rows (n x d) over unmasked `kv` rows (m x d).
///
/// Returns the attended output (n x d) and the sigmoid score map
/// (n x m_unmasked), with score columns in the order of the surviving kv
/// rows.
pub fn cross_attend(
    t: &Tape,
    query: Var,
    kv: Var,
    params: &AttnVars,
    kv_mask: &[bool],
) -> Result<(Var, Var)> {
    let qs = t.shape(query);
    let ks = t.shape(kv);
    let d = t.shape(params.q)[0];
    if qs.len() != 2 || ks.len() != 2 || qs[1] != d || ks[1] != d {
        return Err(Error::Shape(format!(
            "cross_attend: query {qs:?}, kv {ks:?}, params d={d}"
        )));
    }
    if kv_mask.len() != ks[0] {
        return Err(Error::Shape(format!(
            "cross_attend: mask length {} != kv rows {}",
            kv_mask.len(),
            ks[0]
        )));
    }
    let keep: Vec<usize> = kv_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if keep.is_empty() {
        return Err(Error::AllMasked("cross_attend keys".into()));
    }
    let kv_rows = t.gather_rows(kv, &keep);

    let q_proj = t.matmul(query, t.transpose(params.q));
    let k_proj = t.matmul(kv_rows, t.transpose(params.k));
    let v_proj = t.matmul(kv_rows, t.transpose(params.v));
    let logits = t.scale(t.matmul(q_proj, t.transpose(k_proj)), 1.0 / (d as f64).sqrt());
    let scores = t.sigmoid(logits);
    let out = t.matmul(scores, v_proj);
    Ok((out, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    fn triple(t: &Tape, q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> AttnVars {
        AttnVars { q: t.var2(q), k: t.var2(k), v: t.var2(v) }
    }

    #[test]
    fn zero_logit_scalar_case() {
        // D=1, Q=K=V=[1], one region value 2.0, sentence value 0.0:
        // score = sigmoid(0) = 0.5, output = 0.5 * 2.0 = 1.0.
        let t = Tape::new();
        let p = triple(&t, arr2(&[[1.0]]), arr2(&[[1.0]]), arr2(&[[1.0]]));
        let query = t.var2(arr2(&[[0.0]]));
        let kv = t.var2(arr2(&[[2.0]]));
        let (out, scores) = cross_attend(&t, query, kv, &p, &[true]).unwrap();
        assert!((t.value2(scores)[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((t.value2(out)[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_values_zero_output_scores_unchanged() {
        let t = Tape::new();
        let p = triple(
            &t,
            arr2(&[[0.4, -0.2], [0.1, 0.9]]),
            arr2(&[[1.2, 0.3], [-0.5, 0.8]]),
            Array2::zeros((2, 2)),
        );
        let query = t.var2(arr2(&[[0.7, -1.1]]));
        let kv = t.var2(arr2(&[[0.2, 0.5], [1.5, -0.3]]));
        let (out, scores) = cross_attend(&t, query, kv, &p, &[true, true]).unwrap();
        assert!(t.value2(out).iter().all(|&x| x == 0.0));
        let sv = t.value2(scores);
        assert!(sv.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn matches_naive_triple_loop_oracle() {
        let (m, p, d) = (2, 3, 4);
        let idx = |i: usize, j: usize, c: usize| ((i * 31 + j * 17 + c) % 23) as f64 / 23.0 - 0.4;
        let text = Array2::from_shape_fn((m, d), |(i, j)| idx(i, j, 1));
        let image = Array2::from_shape_fn((p, d), |(i, j)| idx(i, j, 5));
        let qm = Array2::from_shape_fn((d, d), |(i, j)| idx(i, j, 9));
        let km = Array2::from_shape_fn((d, d), |(i, j)| idx(i, j, 13));
        let vm = Array2::from_shape_fn((d, d), |(i, j)| idx(i, j, 19));

        let t = Tape::new();
        let params = triple(&t, qm.clone(), km.clone(), vm.clone());
        let query = t.var2(text.clone());
        let kv = t.var2(image.clone());
        let (out, scores) = cross_attend(&t, query, kv, &params, &[true; 3]).unwrap();
        let out = t.value2(out);
        let scores = t.value2(scores);

        // Naive loops straight from the definition.
        let matvec = |mat: &Array2<f64>, row: ndarray::ArrayView1<f64>| -> Vec<f64> {
            (0..d)
                .map(|i| (0..d).map(|j| mat[[i, j]] * row[j]).sum())
                .collect()
        };
        for s in 0..m {
            let qf = matvec(&qm, text.row(s));
            let mut expect = vec![0.0; d];
            for r in 0..p {
                let kf = matvec(&km, image.row(r));
                let vf = matvec(&vm, image.row(r));
                let logit: f64 =
                    qf.iter().zip(kf.iter()).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                let sc = 1.0 / (1.0 + (-logit).exp());
                assert!((scores[[s, r]] - sc).abs() < 1e-12);
                for c in 0..d {
                    expect[c] += sc * vf[c];
                }
            }
            for c in 0..d {
                assert!((out[[s, c]] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_keys_contribute_nothing() {
        let t = Tape::new();
        let p = triple(
            &t,
            arr2(&[[0.4, -0.2], [0.1, 0.9]]),
            arr2(&[[1.2, 0.3], [-0.5, 0.8]]),
            arr2(&[[0.6, 0.2], [-0.1, 0.7]]),
        );
        let query = t.var2(arr2(&[[0.7, -1.1]]));
        let kv_full = t.var2(arr2(&[[0.2, 0.5], [f64::NAN, f64::NAN], [1.5, -0.3]]));
        let kv_clean = t.var2(arr2(&[[0.2, 0.5], [1.5, -0.3]]));
        let (out_masked, _) = cross_attend(&t, query, kv_full, &p, &[true, false, true]).unwrap();
        let (out_clean, _) = cross_attend(&t, query, kv_clean, &p, &[true, true]).unwrap();
        let a = t.value2(out_masked);
        let b = t.value2(out_clean);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(x.is_finite());
            assert_eq!(x, y);
        }
    }

    #[test]
    fn doubling_values_doubles_outputs_with_scores_fixed() {
        let t = Tape::new();
        let qm = arr2(&[[0.4, -0.2], [0.1, 0.9]]);
        let km = arr2(&[[1.2, 0.3], [-0.5, 0.8]]);
        let vm = arr2(&[[0.6, 0.2], [-0.1, 0.7]]);
        let query_arr = arr2(&[[0.7, -1.1], [0.0, 0.4]]);
        let kv_arr = arr2(&[[0.2, 0.5], [1.5, -0.3]]);

        let p1 = triple(&t, qm.clone(), km.clone(), vm.clone());
        let query = t.var2(query_arr.clone());
        let kv = t.var2(kv_arr.clone());
        let (out1, s1) = cross_attend(&t, query, kv, &p1, &[true, true]).unwrap();

        let p2 = triple(&t, qm, km, vm.mapv(|x| 2.0 * x));
        let (out2, s2) = cross_attend(&t, query, kv, &p2, &[true, true]).unwrap();

        let (o1, o2) = (t.value2(out1), t.value2(out2));
        for (a, b) in o1.iter().zip(o2.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        assert_eq!(t.value2(s1), t.value2(s2));
    }

    #[test]
    fn output_norm_bounded_by_value_norms() {
        let t = Tape::new();
        let p = triple(
            &t,
            arr2(&[[0.9, 0.1], [-0.3, 0.5]]),
            arr2(&[[0.2, -0.6], [0.8, 0.4]]),
            arr2(&[[1.4, -0.2], [0.3, 0.9]]),
        );
        let query = t.var2(arr2(&[[2.0, -1.0]]));
        let kv_arr = arr2(&[[0.5, 1.0], [-0.7, 0.2], [1.1, 0.9]]);
        let kv = t.var2(kv_arr.clone());
        let (out, _) = cross_attend(&t, query, kv, &p, &[true; 3]).unwrap();
        let o = t.value2(out);
        let out_norm = o.row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        // Sum of ||V v_p|| over keys bounds any sigmoid-weighted combination.
        let vm = t.value2(p.v);
        let mut bound = 0.0;
        for r in 0..3 {
            let vv: Vec<f64> = (0..2)
                .map(|i| (0..2).map(|j| vm[[i, j]] * kv_arr[[r, j]]).sum())
                .collect();
            bound += vv.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        assert!(out_norm <= bound + 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let t = Tape::new();
        let p = triple(&t, Array2::eye(2), Array2::eye(2), Array2::eye(2));
        let query = t.var2(arr2(&[[0.7, -1.1, 0.3]]));
        let kv = t.var2(arr2(&[[0.2, 0.5]]));
        assert!(matches!(
            cross_attend(&t, query, kv, &p, &[true]),
            Err(Error::Shape(_))
        ));
    }
}
