//! Multi-head self-attention with relative positional encoding.
//!
//! Scores carry two terms per head: a content term `(q_i + u) . k_j` and a
//! position term `(q_i + v) . r_{i-j}`, where `r` is a sinusoidal table over
//! relative offsets projected by a learned matrix and `u`, `v` are learned
//! bias vectors. The relative term is computed as a dense `T x (2T-1)` score
//! matrix followed by a constant-index gather; the per-pair loop oracle in
//! `oracles` is the structurally independent reference.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Result, Tensor, TensorError};

/// Sinusoidal embeddings of relative offsets `T-1 .. -(T-1)`, one row per
/// offset, interleaved [sin, cos] per frequency. The offset-0 row is the
/// standard sinusoid at position 0 (sin terms 0, cos terms 1).
pub fn relative_position_embeddings(t: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(TensorError::OddDimension(d));
    }
    if t == 0 {
        return Err(TensorError::Invalid("empty sequence".into()));
    }
    let rows = 2 * t - 1;
    let mut data = vec![0.0; rows * d];
    for row in 0..rows {
        let offset = (t as i64 - 1 - row as i64) as f64;
        for f in 0..d / 2 {
            let rate = 10000f64.powf(-2.0 * f as f64 / d as f64);
            data[row * d + 2 * f] = (offset * rate).sin();
            data[row * d + 2 * f + 1] = (offset * rate).cos();
        }
    }
    Tensor::new(&[rows, d], data)
}

/// Graph nodes for one attention instance.
#[derive(Debug, Clone, Copy)]
pub struct MhsaNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub wpos: NodeId,
    pub u: NodeId,
    pub v: NodeId,
    pub heads: usize,
}

/// Relative-position multi-head self-attention. `mask`, when present, marks
/// valid frames; masked keys receive a -1e30 score and end up with exactly
/// zero weight after the stabilized softmax.
pub fn relative_mhsa(
    g: &mut Graph,
    x: NodeId,
    p: &MhsaNodes,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    relative_mhsa_with_weights(g, x, p, mask).map(|(out, _)| out)
}

/// Same as [`relative_mhsa`] but also returns the per-head attention-weight
/// nodes (each `T x T`, rows summing to 1 over valid keys).
pub fn relative_mhsa_with_weights(
    g: &mut Graph,
    x: NodeId,
    p: &MhsaNodes,
    mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
    if d % p.heads != 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "heads {} must divide model dim {d}",
            p.heads
        )));
    }
    for (name, w) in [("wq", p.wq), ("wk", p.wk), ("wv", p.wv), ("wo", p.wo), ("wpos", p.wpos)] {
        if g.shape(w) != [d, d] {
            return Err(TensorError::ShapeMismatch(format!(
                "{name} must be {d}x{d}, got {:?}",
                g.shape(w)
            )));
        }
    }
    if let Some(m) = mask {
        if m.len() != t {
            return Err(TensorError::MaskLengthMismatch { mask: m.len(), seq: t });
        }
    }
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.matmul(x, p.wv)?;

    let table = relative_position_embeddings(t, d)?;
    let table = g.leaf(table);
    let rproj = g.matmul(table, p.wpos)?; // (2T-1) x d

    // flat gather indices rearranging the T x (2T-1) position scores into
    // T x T: entry (i, j) reads column T-1-i+j.
    let gather_idx: Vec<i64> = (0..t)
        .flat_map(|i| {
            (0..t).map(move |j| (i * (2 * t - 1) + (t - 1 - i + j)) as i64)
        })
        .collect();

    let mask_bias = match mask {
        Some(m) => {
            let bias: Vec<f64> = m.iter().map(|&ok| if ok { 0.0 } else { -1e30 }).collect();
            Some(g.constant(&[t], bias)?)
        }
        None => None,
    };

    let mut head_outputs = Vec::with_capacity(p.heads);
    let mut head_weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let uh = g.narrow(p.u, 0, h * dh, dh)?;
        let vbh = g.narrow(p.v, 0, h * dh, dh)?;
        let rh = g.narrow(rproj, 1, h * dh, dh)?;

        let q_u = g.add(qh, uh)?;
        let kt = g.transpose(kh)?;
        let content = g.matmul(q_u, kt)?; // T x T

        let q_v = g.add(qh, vbh)?;
        let rt = g.transpose(rh)?;
        let pos_full = g.matmul(q_v, rt)?; // T x (2T-1)
        let pos_flat = g.reshape(pos_full, &[t * (2 * t - 1), 1])?;
        let pos_gathered = g.gather_rows(pos_flat, &gather_idx)?;
        let pos = g.reshape(pos_gathered, &[t, t])?;

        let raw = g.add(content, pos)?;
        let mut scores = g.scale(raw, scale)?;
        if let Some(b) = mask_bias {
            scores = g.add(scores, b)?; // bias broadcasts across rows
        }
        let attn = g.softmax(scores, 1)?;
        head_weights.push(attn);
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat(1, &head_outputs)?;
    let out = g.matmul(merged, p.wo)?;
    Ok((out, head_weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_diff_check;
    use crate::oracles;
    use crate::rng::StreamRng;

    fn make_params(
        g: &mut Graph,
        rng: &mut StreamRng,
        d: usize,
        heads: usize,
    ) -> (MhsaNodes, Vec<Tensor>) {
        let tensors: Vec<Tensor> = vec![
            rng.tensor(&[d, d], -0.5, 0.5), // wq
            rng.tensor(&[d, d], -0.5, 0.5), // wk
            rng.tensor(&[d, d], -0.5, 0.5), // wv
            rng.tensor(&[d, d], -0.5, 0.5), // wo
            rng.tensor(&[d, d], -0.5, 0.5), // wpos
            rng.tensor(&[d], -0.5, 0.5),    // u
            rng.tensor(&[d], -0.5, 0.5),    // v
        ];
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        (
            MhsaNodes {
                wq: ids[0],
                wk: ids[1],
                wv: ids[2],
                wo: ids[3],
                wpos: ids[4],
                u: ids[5],
                v: ids[6],
                heads,
            },
            tensors,
        )
    }

    #[test]
    fn offset_zero_row_is_unit_cosine() {
        let table = relative_position_embeddings(3, 4).unwrap();
        // offsets 2,1,0,-1,-2 -> offset 0 is row 2
        let row: Vec<f64> = table.data()[2 * 4..3 * 4].to_vec();
        assert_eq!(row, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn table_has_2t_minus_1_rows() {
        let table = relative_position_embeddings(5, 4).unwrap();
        assert_eq!(table.shape(), &[9, 4]);
    }

    #[test]
    fn opposite_offsets_mirror_sin_components() {
        let d = 6;
        let table = relative_position_embeddings(4, d).unwrap();
        let plus_one = &table.data()[2 * d..3 * d]; // offset +1
        let minus_one = &table.data()[4 * d..5 * d]; // offset -1
        for f in 0..d / 2 {
            assert!((plus_one[2 * f] + minus_one[2 * f]).abs() < 1e-15, "sin mirrored");
            assert!((plus_one[2 * f + 1] - minus_one[2 * f + 1]).abs() < 1e-15, "cos even");
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(
            relative_position_embeddings(4, 5),
            Err(TensorError::OddDimension(5))
        ));
    }

    #[test]
    fn single_frame_weight_is_one() {
        let mut rng = StreamRng::new(1, "mhsa-t1");
        let mut g = Graph::new();
        let (p, tensors) = make_params(&mut g, &mut rng, 4, 2);
        let x = rng.tensor(&[1, 4], -1.0, 1.0);
        let xn = g.leaf(x.clone());
        let (out, weights) = relative_mhsa_with_weights(&mut g, xn, &p, None).unwrap();
        for &w in &weights {
            assert_eq!(g.data(w), &[1.0]);
        }
        // out = x @ Wv @ Wo
        let expect = oracles::naive_matmul(
            &oracles::naive_matmul(&x, &tensors[2]).unwrap(),
            &tensors[3],
        )
        .unwrap();
        assert!(oracles::max_abs_diff(g.value(out), &expect) < 1e-12);
    }

    #[test]
    fn identical_frames_give_uniform_weights() {
        let mut rng = StreamRng::new(2, "mhsa-uniform");
        let t = 4;
        let d = 4;
        let mut g = Graph::new();
        let (mut p, tensors) = make_params(&mut g, &mut rng, d, 2);
        p.wpos = g.constant(&[d, d], vec![0.0; d * d]).unwrap();
        let row = rng.tensor(&[1, d], -1.0, 1.0);
        let x = Tensor::new(&[t, d], row.data().repeat(t)).unwrap();
        let xn = g.leaf(x.clone());
        let (out, weights) = relative_mhsa_with_weights(&mut g, xn, &p, None).unwrap();
        for &w in &weights {
            for &v in g.data(w) {
                assert!((v - 1.0 / t as f64).abs() < 1e-12);
            }
        }
        let expect = oracles::naive_matmul(
            &oracles::naive_matmul(&x, &tensors[2]).unwrap(),
            &tensors[3],
        )
        .unwrap();
        assert!(oracles::max_abs_diff(g.value(out), &expect) < 1e-10);
    }

    #[test]
    fn matches_per_pair_oracle() {
        let mut rng = StreamRng::new(3, "mhsa-oracle");
        let (t, d, h) = (5, 8, 2);
        let mut g = Graph::new();
        let (p, tensors) = make_params(&mut g, &mut rng, d, h);
        let x = rng.tensor(&[t, d], -1.0, 1.0);
        let xn = g.leaf(x.clone());
        let out = relative_mhsa(&mut g, xn, &p, None).unwrap();
        let expect = oracles::naive_relative_mhsa(
            &x, &tensors[0], &tensors[1], &tensors[2], &tensors[3], &tensors[4],
            tensors[5].data(), tensors[6].data(), h, None,
        )
        .unwrap();
        assert!(oracles::max_abs_diff(g.value(out), &expect) < 1e-10);
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let mut rng = StreamRng::new(4, "mhsa-rows");
        let (t, d, h) = (6, 8, 4);
        let mut g = Graph::new();
        let (p, _) = make_params(&mut g, &mut rng, d, h);
        let x = rng.tensor(&[t, d], -2.0, 2.0);
        let xn = g.leaf(x);
        let mask = vec![true, true, false, true, false, true];
        let (_, weights) = relative_mhsa_with_weights(&mut g, xn, &p, Some(&mask)).unwrap();
        for &w in &weights {
            for row in g.data(w).chunks(t) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                // masked keys hold exactly zero weight
                assert_eq!(row[2], 0.0);
                assert_eq!(row[4], 0.0);
            }
        }
    }

    #[test]
    fn reduces_to_plain_attention_without_position_terms() {
        let mut rng = StreamRng::new(5, "mhsa-plain");
        let (t, d, h) = (5, 8, 2);
        let mut g = Graph::new();
        let (mut p, tensors) = make_params(&mut g, &mut rng, d, h);
        p.wpos = g.constant(&[d, d], vec![0.0; d * d]).unwrap();
        p.u = g.constant(&[d], vec![0.0; d]).unwrap();
        p.v = g.constant(&[d], vec![0.0; d]).unwrap();
        let x = rng.tensor(&[t, d], -1.0, 1.0);
        let xn = g.leaf(x.clone());
        let out = relative_mhsa(&mut g, xn, &p, None).unwrap();
        let expect =
            oracles::naive_plain_mhsa(&x, &tensors[0], &tensors[1], &tensors[2], &tensors[3], h)
                .unwrap();
        assert!(oracles::max_abs_diff(g.value(out), &expect) < 1e-10);
    }

    #[test]
    fn masked_content_cannot_leak() {
        let mut rng = StreamRng::new(6, "mhsa-mask");
        let (t, d, h) = (5, 4, 2);
        let mask = vec![true, true, true, false, true];
        let mut x = rng.tensor(&[t, d], -1.0, 1.0);
        let params: Vec<Tensor> = vec![
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d], -0.5, 0.5),
            rng.tensor(&[d], -0.5, 0.5),
        ];
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|t| g.leaf(t.clone())).collect();
            let p = MhsaNodes {
                wq: ids[0], wk: ids[1], wv: ids[2], wo: ids[3], wpos: ids[4],
                u: ids[5], v: ids[6], heads: h,
            };
            let xn = g.leaf(x.clone());
            let out = relative_mhsa(&mut g, xn, &p, Some(&mask)).unwrap();
            g.data(out).to_vec()
        };
        let before = run(&x);
        for c in 0..d {
            x.data_mut()[3 * d + c] = 17.0 + c as f64; // rewrite the masked frame
        }
        let after = run(&x);
        for i in 0..t {
            if mask[i] {
                for c in 0..d {
                    assert_eq!(
                        before[i * d + c].to_bits(),
                        after[i * d + c].to_bits(),
                        "unmasked output moved at ({i},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn mask_length_mismatch_rejected() {
        let mut rng = StreamRng::new(7, "mhsa-masklen");
        let mut g = Graph::new();
        let (p, _) = make_params(&mut g, &mut rng, 4, 2);
        let x = rng.tensor(&[3, 4], -1.0, 1.0);
        let xn = g.leaf(x);
        let err = relative_mhsa(&mut g, xn, &p, Some(&[true, true])).unwrap_err();
        assert!(matches!(err, TensorError::MaskLengthMismatch { .. }));
    }

    #[test]
    fn gradients_flow_through_all_parameters() {
        let mut rng = StreamRng::new(8, "mhsa-grad");
        let (t, d, h) = (4, 4, 2);
        let inputs = vec![
            rng.tensor(&[t, d], -1.0, 1.0),
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d, d], -0.5, 0.5),
            rng.tensor(&[d], -0.5, 0.5),
            rng.tensor(&[d], -0.5, 0.5),
        ];
        let rep = finite_diff_check(
            "relative_mhsa",
            &|g, ids| {
                let p = MhsaNodes {
                    wq: ids[1], wk: ids[2], wv: ids[3], wo: ids[4], wpos: ids[5],
                    u: ids[6], v: ids[7], heads: h,
                };
                relative_mhsa(g, ids[0], &p, None)
            },
            &inputs,
            crate::check::COMPOSITE_EPSILON,
            1e-5,
            8,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.line());
    }
}
