//! Toy image and text encoders, projection heads, and attention pooling.
//!
//! The image encoder is a per-sub-region linear patch embedding: row p of
//! the output depends only on the pixels of sub-region p. The text encoder
//! is mean-of-token-embeddings followed by a linear mixing layer. Four
//! two-layer perceptrons project local and pooled features to the common
//! dimension D. Global features come from single-query scaled-dot-product
//! attention pooling over the raw local features of each modality.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::Array2;

/// Two-layer perceptron vars: relu hidden layer of the same width as the
/// output.
#[derive(Copy, Clone)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn linear(t: &Tape, x: Var, w: Var, b: Var) -> Var {
    t.add_row(t.matmul(x, w), b)
}

pub fn mlp(t: &Tape, x: Var, p: &MlpVars) -> Var {
    let h = t.relu(linear(t, x, p.w1, p.b1));
    linear(t, h, p.w2, p.b2)
}

/// Slice an image into its P = grid^2 sub-regions, each flattened row-major,
/// producing a P x res^2 matrix in region row-major order.
pub fn image_to_patches(image: &Array2<f32>, grid_side: usize, image_res: usize) -> Array2<f64> {
    let p = grid_side * grid_side;
    let px = image_res * image_res;
    let mut out = Array2::zeros((p, px));
    for region in 0..p {
        let gy = (region / grid_side) * image_res;
        let gx = (region % grid_side) * image_res;
        for y in 0..image_res {
            for x in 0..image_res {
                out[[region, y * image_res + x]] = f64::from(image[[gy + y, gx + x]]);
            }
        }
    }
    out
}

/// Linear patch embedding of stacked region pixels (n x res^2 -> n x C_I).
pub fn encode_image(t: &Tape, patches: Var, w: Var, b: Var) -> Var {
    linear(t, patches, w, b)
}

/// Row-averaging matrix mapping a stack of token embeddings to per-sentence
/// means: entry (s, j) is 1/len(s) when token j belongs to sentence s.
pub fn sentence_mean_matrix(sentence_lens: &[usize]) -> Array2<f64> {
    let total: usize = sentence_lens.iter().sum();
    let mut out = Array2::zeros((sentence_lens.len(), total));
    let mut offset = 0;
    for (s, &len) in sentence_lens.iter().enumerate() {
        assert!(len > 0, "empty sentence");
        for j in 0..len {
            out[[s, offset + j]] = 1.0 / len as f64;
        }
        offset += len;
    }
    out
}

/// Mean-of-token-embeddings text encoder with a linear mixing layer.
/// `tokens` is the batch-flattened token stream; `sentence_lens` delimits
/// sentences within it.
pub fn encode_text(
    t: &Tape,
    embed_table: Var,
    mix_w: Var,
    mix_b: Var,
    tokens: &[u32],
    sentence_lens: &[usize],
    vocab_size: u32,
) -> Result<Var> {
    for &tok in tokens {
        if tok >= vocab_size {
            return Err(Error::OutOfVocab { id: tok, vocab: vocab_size });
        }
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let gathered = t.gather_rows(embed_table, &idx);
    let means = t.matmul(t.constant2(sentence_mean_matrix(sentence_lens)), gathered);
    Ok(linear(t, means, mix_w, mix_b))
}

/// Single-query scaled-dot-product attention pooling over the unmasked rows
/// of `local` (n x c). The query is 1 x c; weights are a softmax over
/// `local_i . query / sqrt(c)` and the output is the weighted row sum, a
/// convex combination of unmasked rows.
pub fn attention_pool(t: &Tape, local: Var, mask: &[bool], query: Var) -> Result<Var> {
    let shape = t.shape(local);
    assert_eq!(shape.len(), 2, "attention_pool expects a matrix");
    assert_eq!(mask.len(), shape[0], "mask length");
    let keep: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if keep.is_empty() {
        return Err(Error::AllMasked("attention_pool".into()));
    }
    let rows = t.gather_rows(local, &keep);
    let logits = t.scale(t.matmul(rows, t.transpose(query)), 1.0 / (shape[1] as f64).sqrt());
    // Softmax over a single column; max-shifted for stability.
    let m = t.stop_grad(t.max_all(logits));
    let e = t.exp(t.add_scalar_var(logits, m, -1.0));
    let den = t.sum_all(e);
    let w = t.div_scalar_var(e, den);
    Ok(t.matmul(t.transpose(w), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn image_rows_depend_only_on_their_region() {
        // Permuting two sub-regions permutes the corresponding feature rows.
        let grid = 2;
        let res = 2;
        let mut img = Array2::<f32>::zeros((4, 4));
        for (i, v) in img.iter_mut().enumerate() {
            *v = i as f32 * 0.05;
        }
        let mut swapped = img.clone();
        // Swap regions 0 (rows 0..2, cols 0..2) and 3 (rows 2..4, cols 2..4).
        for y in 0..res {
            for x in 0..res {
                let a = swapped[[y, x]];
                swapped[[y, x]] = swapped[[2 + y, 2 + x]];
                swapped[[2 + y, 2 + x]] = a;
            }
        }
        let w0 = arr2(&[
            [0.3, -0.1],
            [0.2, 0.5],
            [-0.7, 0.9],
            [0.11, -0.4],
        ]);
        let b0 = arr2(&[[0.01, -0.02]]);

        let run = |image: &Array2<f32>| -> Array2<f64> {
            let t = Tape::new();
            let patches = t.constant2(image_to_patches(image, grid, res));
            let w = t.var2(w0.clone());
            let b = t.var2(b0.clone());
            t.value2(encode_image(&t, patches, w, b))
        };
        let base = run(&img);
        let perm = run(&swapped);
        assert_eq!(base.row(0), perm.row(3));
        assert_eq!(base.row(3), perm.row(0));
        assert_eq!(base.row(1), perm.row(1));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let t = Tape::new();
        let patches = t.constant2(Array2::zeros((4, 4)));
        let w = t.var2(arr2(&[
            [0.3, -0.1],
            [0.2, 0.5],
            [-0.7, 0.9],
            [0.11, -0.4],
        ]));
        let b = t.var2(Array2::zeros((1, 2)));
        let out = t.value2(encode_image(&t, patches, w, b));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_encoding_matches_naive_matmul_oracle() {
        let grid = 2;
        let res = 3;
        let mut img = Array2::<f32>::zeros((6, 6));
        for (i, v) in img.iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f32) / 101.0;
        }
        let c_i = 5;
        let px = res * res;
        let mut w = Array2::<f64>::zeros((px, c_i));
        for (i, v) in w.iter_mut().enumerate() {
            *v = ((i * 13 % 29) as f64) / 29.0 - 0.5;
        }
        let mut b = Array2::<f64>::zeros((1, c_i));
        for (i, v) in b.iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }

        let t = Tape::new();
        let patches = image_to_patches(&img, grid, res);
        let out = {
            let pv = t.constant2(patches.clone());
            let wv = t.var2(w.clone());
            let bv = t.var2(b.clone());
            t.value2(encode_image(&t, pv, wv, bv))
        };

        // Independent explicit triple loop.
        for p in 0..grid * grid {
            for c in 0..c_i {
                let mut acc = b[[0, c]];
                for k in 0..px {
                    acc += patches[[p, k]] * w[[k, c]];
                }
                assert!((out[[p, c]] - acc).abs() < 1e-12, "({p},{c})");
            }
        }
    }

    #[test]
    fn text_rows_are_token_order_invariant() {
        let t = Tape::new();
        let table = t.var2(arr2(&[
            [0.1, 0.2],
            [0.3, -0.1],
            [-0.5, 0.7],
            [0.9, 0.4],
        ]));
        let mix_w = t.var2(arr2(&[[1.1, -0.2], [0.05, 0.8]]));
        let mix_b = t.var2(arr2(&[[0.01, 0.02]]));
        let a = encode_text(&t, table, mix_w, mix_b, &[0, 2, 3], &[3], 4).unwrap();
        let b = encode_text(&t, table, mix_w, mix_b, &[3, 0, 2], &[3], 4).unwrap();
        let av = t.value2(a);
        let bv = t.value2(b);
        for (x, y) in av.iter().zip(bv.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_sentence_is_its_embedding_through_mixing() {
        let t = Tape::new();
        let table = t.var2(arr2(&[[0.1, 0.2], [0.3, -0.1], [-0.5, 0.7]]));
        let mix_w = t.var2(arr2(&[[2.0, 0.0], [0.0, 2.0]]));
        let mix_b = t.var2(arr2(&[[0.5, -0.5]]));
        let out = encode_text(&t, table, mix_w, mix_b, &[1], &[1], 3).unwrap();
        let v = t.value2(out);
        assert!((v[[0, 0]] - (0.3 * 2.0 + 0.5)).abs() < 1e-15);
        assert!((v[[0, 1]] - (-0.1 * 2.0 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn out_of_vocab_token_is_an_error() {
        let t = Tape::new();
        let table = t.var2(arr2(&[[0.1, 0.2], [0.3, -0.1]]));
        let mix_w = t.var2(Array2::eye(2));
        let mix_b = t.var2(Array2::zeros((1, 2)));
        let err = encode_text(&t, table, mix_w, mix_b, &[5], &[1], 2).unwrap_err();
        assert!(matches!(err, Error::OutOfVocab { id: 5, vocab: 2 }));
    }

    #[test]
    fn text_encoding_matches_naive_sum_oracle() {
        let vocab = 6;
        let c_r = 3;
        let mut table = Array2::<f64>::zeros((vocab, c_r));
        for (i, v) in table.iter_mut().enumerate() {
            *v = ((i * 17 % 23) as f64) / 23.0 - 0.4;
        }
        let mut mix_w = Array2::<f64>::zeros((c_r, c_r));
        for (i, v) in mix_w.iter_mut().enumerate() {
            *v = ((i * 11 % 19) as f64) / 19.0 - 0.3;
        }
        let mix_b_arr = arr2(&[[0.1, -0.2, 0.3]]);

        let tokens: Vec<u32> = vec![0, 3, 5, 1, 1, 2, 4];
        let lens = vec![3usize, 2, 2];

        let t = Tape::new();
        let out = {
            let tv = t.var2(table.clone());
            let wv = t.var2(mix_w.clone());
            let bv = t.var2(mix_b_arr.clone());
            t.value2(encode_text(&t, tv, wv, bv, &tokens, &lens, vocab as u32).unwrap())
        };

        // Naive embedding-sum oracle.
        let mut offset = 0;
        for (s, &len) in lens.iter().enumerate() {
            let mut mean = vec![0.0; c_r];
            for j in 0..len {
                for c in 0..c_r {
                    mean[c] += table[[tokens[offset + j] as usize, c]];
                }
            }
            for m in mean.iter_mut() {
                *m /= len as f64;
            }
            for c_out in 0..c_r {
                let mut acc = mix_b_arr[[0, c_out]];
                for c_in in 0..c_r {
                    acc += mean[c_in] * mix_w[[c_in, c_out]];
                }
                assert!((out[[s, c_out]] - acc).abs() < 1e-12);
            }
            offset += len;
        }
    }

    #[test]
    fn pooling_single_row_returns_that_row() {
        let t = Tape::new();
        let local = t.var2(arr2(&[[0.4, -1.2, 0.9]]));
        let query = t.var2(arr2(&[[5.0, -2.0, 0.3]]));
        let pooled = attention_pool(&t, local, &[true], query).unwrap();
        let v = t.value2(pooled);
        assert!((v[[0, 0]] - 0.4).abs() < 1e-15);
        assert!((v[[0, 1]] + 1.2).abs() < 1e-15);
        assert!((v[[0, 2]] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn pooling_identical_rows_is_query_independent() {
        let rows = arr2(&[[0.7, -0.3], [0.7, -0.3], [0.7, -0.3]]);
        for q in [[0.0, 0.0], [3.0, -1.0], [-9.0, 2.5]] {
            let t = Tape::new();
            let local = t.var2(rows.clone());
            let query = t.var2(arr2(&[q]));
            let pooled = attention_pool(&t, local, &[true; 3], query).unwrap();
            let v = t.value2(pooled);
            assert!((v[[0, 0]] - 0.7).abs() < 1e-12);
            assert!((v[[0, 1]] + 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_two_rows_matches_hand_softmax() {
        let t = Tape::new();
        let local = t.var2(arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        let query = t.var2(arr2(&[[2.0, -1.0]]));
        let pooled = attention_pool(&t, local, &[true, true], query).unwrap();
        let v = t.value2(pooled);
        // logits = [2, -1] / sqrt(2)
        let s = 2.0_f64.sqrt();
        let (l0, l1) = (2.0 / s, -1.0 / s);
        let z = l0.exp() + l1.exp();
        let (w0, w1) = (l0.exp() / z, l1.exp() / z);
        assert!((v[[0, 0]] - w0).abs() < 1e-12);
        assert!((v[[0, 1]] - w1).abs() < 1e-12);
    }

    #[test]
    fn masked_rows_never_influence_pooling() {
        let t = Tape::new();
        let local = t.var2(arr2(&[[1.0, 2.0], [f64::NAN, f64::NAN], [3.0, 4.0]]));
        let query = t.var2(arr2(&[[0.5, 0.5]]));
        let pooled = attention_pool(&t, local, &[true, false, true], query).unwrap();
        let v = t.value2(pooled);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn all_masked_is_an_error() {
        let t = Tape::new();
        let local = t.var2(arr2(&[[1.0, 2.0]]));
        let query = t.var2(arr2(&[[0.5, 0.5]]));
        let err = attention_pool(&t, local, &[false], query).unwrap_err();
        assert!(matches!(err, Error::AllMasked(_)));
    }

    #[test]
    fn pooling_output_stays_in_convex_hull() {
        // 1-D check: pooled value lies between min and max of unmasked rows.
        for seed in 0..20u64 {
            let t = Tape::new();
            let vals: Vec<f64> = (0..5)
                .map(|i| ((seed * 31 + i * 17) % 13) as f64 - 6.0)
                .collect();
            let local = t.var2(Array2::from_shape_vec((5, 1), vals.clone()).unwrap());
            let query = t.var2(arr2(&[[((seed % 7) as f64) - 3.0]]));
            let pooled = attention_pool(&t, local, &[true; 5], query).unwrap();
            let v = t.value2(pooled)[[0, 0]];
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
