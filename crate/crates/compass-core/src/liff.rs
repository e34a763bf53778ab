//! Implicit inter-layer predictor.
//!
//! Predicts an enhancement-layer image at arbitrary target dims from the
//! previous layer's reconstruction:
//!
//! 1. a residual-dense feature extractor turns the source image into a
//!    stride-1 feature map,
//! 2. 3x3 feature unfolding concatenates each pixel's neighborhood (9x
//!    channels),
//! 3. nearest-neighbor upsampling (via the integer correspondence map)
//!    carries features to the target grid,
//! 4. an MLP maps each target pixel's `[features | local offset | scale
//!    token]` vector to a per-pixel filter, and
//! 5. the filter is applied to the same feature vector to produce RGB.
//!
//! The prediction is intentionally unclamped; the caller clamps after adding
//! the decoded residual.

use crate::coords::{grid_info, CorrespondenceMap};
use crate::model::LiffConfig;
use crate::params::Bound;
use crate::tensor::{Graph, Var};

/// Stride-1 residual-dense feature extraction; `(h, w, 3)` → `(h, w, C)`.
pub fn extract_features(g: &Graph, b: &Bound, cfg: &LiffConfig, img: Var) -> Var {
    let conv = |x: Var, name: &str, pad: usize| -> Var {
        g.conv2d(
            x,
            b.var(&format!("liff.{name}.w")),
            Some(b.var(&format!("liff.{name}.b"))),
            1,
            pad,
        )
    };
    let shallow = conv(img, "sfe1", 1);
    let mut cur = conv(shallow, "sfe2", 1);
    let mut block_outs = Vec::with_capacity(cfg.rdb_count);
    for d in 0..cfg.rdb_count {
        let block_in = cur;
        let mut cat = block_in;
        for c in 0..cfg.rdb_convs {
            let grown = g.relu(conv(cat, &format!("rdb{d}.conv{c}"), 1));
            cat = g.concat_last(&[cat, grown]);
        }
        let fused = conv(cat, &format!("rdb{d}.lff"), 0);
        let local = g.add(fused, block_in);
        block_outs.push(local);
        cur = local;
    }
    let all_blocks = if block_outs.len() == 1 {
        block_outs[0]
    } else {
        g.concat_last(&block_outs)
    };
    let fused = conv(conv(all_blocks, "gff1", 0), "gff2", 1);
    g.add(fused, shallow)
}

/// Filter-generation MLP on `(n, in)` rows: hidden layers with ReLU, linear
/// output of width `C*3`.
fn filter_mlp(g: &Graph, b: &Bound, cfg: &LiffConfig, x: Var) -> Var {
    let mut cur = x;
    for i in 0..=cfg.mlp_layers {
        cur = g.add_row(
            g.matmul(cur, b.var(&format!("liff.mlp.{i}.w"))),
            b.var(&format!("liff.mlp.{i}.b")),
        );
        if i < cfg.mlp_layers {
            cur = g.relu(cur);
        }
    }
    cur
}

/// Predict a `(dst_h, dst_w, 3)` image from a source reconstruction.
pub fn predict(
    g: &Graph,
    b: &Bound,
    cfg: &LiffConfig,
    source: Var,
    dst_h: usize,
    dst_w: usize,
) -> Var {
    let shape = g.shape(source);
    let (src_h, src_w) = (shape[0], shape[1]);
    let feats = extract_features(g, b, cfg, source);
    let unfolded = g.unfold3(feats);
    let map = CorrespondenceMap::new(src_h, src_w, dst_h, dst_w);
    let gi = grid_info(src_h, src_w, dst_h, dst_w, &map);
    let up = g.upsample_nearest(unfolded, map.rows, map.cols);
    let n = dst_h * dst_w;
    let c = cfg.unfolded_channels();
    let flat = g.reshape(up, &[n, c]);
    let offsets = g.input(gi.local_offset.into_dyn());
    let scales = g.input(gi.scale_token.into_dyn());
    let cond = g.concat_last(&[flat, offsets, scales]);
    let filters = filter_mlp(g, b, cfg, cond);
    let rgb = g.pixelwise_filter(flat, filters);
    g.reshape(rgb, &[dst_h, dst_w, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CompassModel, ModelConfig};
    use crate::params::Params;
    use crate::tensor::ops;
    use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix1, Ix2, Ix3, Ix4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tiny() -> (CompassModel, LiffConfig) {
        let m = CompassModel::init(ModelConfig::tiny(), 123).unwrap();
        let cfg = m.config.liff.clone();
        (m, cfg)
    }

    fn rand_img(h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>()).into_dyn()
    }

    #[test]
    fn features_preserve_spatial_dims() {
        let (m, cfg) = tiny();
        for (h, w) in [(8, 8), (5, 3), (1, 1), (2, 9)] {
            let g = Graph::inference();
            let b = m.params.bind(&g);
            let img = g.input(rand_img(h, w, 4));
            let f = extract_features(&g, &b, &cfg, img);
            assert_eq!(g.shape(f), vec![h, w, cfg.feat_channels]);
        }
    }

    #[test]
    fn zeroed_weights_predict_zero() {
        let (mut m, cfg) = tiny();
        let names: Vec<String> =
            m.params.names().filter(|n| n.starts_with("liff.")).map(String::from).collect();
        for n in names {
            let arr = m.params.get(&n).unwrap();
            let z = ArrayD::zeros(arr.raw_dim());
            m.params.set(&n, z).unwrap();
        }
        let g = Graph::inference();
        let b = m.params.bind(&g);
        let img = g.input(rand_img(4, 4, 7));
        let pred = predict(&g, &b, &cfg, img, 7, 9);
        assert_eq!(g.shape(pred), vec![7, 9, 3]);
        for v in g.value(pred).iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn prediction_matches_an_independent_layer_composition() {
        // Re-run the layer sequence with plain kernel calls and hand indexing,
        // independently of the tape wiring.
        let (m, cfg) = tiny();
        let (sh, sw, dh, dw) = (4, 5, 7, 6);
        let img = rand_img(sh, sw, 11);

        let g = Graph::inference();
        let b = m.params.bind(&g);
        let pred = predict(&g, &b, &cfg, g.input(img.clone()), dh, dw);
        let got = g.value(pred);

        // plain reference
        let p = &m.params;
        let w4 = |n: &str| p.get(n).unwrap().view().into_dimensionality::<Ix4>().unwrap();
        let b1 = |n: &str| {
            p.get(n)
                .unwrap()
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        };
        let conv = |x: &Array3<f64>, name: &str, pad: usize| -> Array3<f64> {
            ops::conv2d(x.view(), w4(&format!("liff.{name}.w")), Some(&b1(&format!("liff.{name}.b"))), 1, pad)
        };
        let relu = |x: Array3<f64>| x.mapv(|v| v.max(0.0));
        let x3 = img.view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let shallow = conv(&x3, "sfe1", 1);
        let mut cur = conv(&shallow, "sfe2", 1);
        let mut blocks: Vec<Array3<f64>> = Vec::new();
        for d in 0..cfg.rdb_count {
            let block_in = cur.clone();
            let mut cat = block_in.clone();
            for c in 0..cfg.rdb_convs {
                let grown = relu(conv(&cat, &format!("rdb{d}.conv{c}"), 1));
                cat = ndarray::concatenate(
                    ndarray::Axis(2),
                    &[cat.view(), grown.view()],
                )
                .unwrap();
            }
            let fused = conv(&cat, &format!("rdb{d}.lff"), 0);
            let local = fused + &block_in;
            blocks.push(local.clone());
            cur = local;
        }
        let all = if blocks.len() == 1 {
            blocks[0].clone()
        } else {
            let views: Vec<_> = blocks.iter().map(|a| a.view()).collect();
            ndarray::concatenate(ndarray::Axis(2), &views).unwrap()
        };
        let feats = conv(&conv(&all, "gff1", 0), "gff2", 1) + &shallow;

        let unfolded = ops::unfold3(feats.view());
        let map = CorrespondenceMap::new(sh, sw, dh, dw);
        let gi = grid_info(sh, sw, dh, dw, &map);
        let c = cfg.unfolded_channels();
        // per-target-pixel gather + MLP + filtering, all with explicit loops
        let mut expect = Array3::<f64>::zeros((dh, dw, 3));
        for i in 0..dh {
            for j in 0..dw {
                let (si, sj) = (map.rows[i], map.cols[j]);
                let fvec: Vec<f64> = (0..c).map(|ch| unfolded[(si, sj, ch)]).collect();
                let nidx = i * dw + j;
                let mut row: Vec<f64> = fvec.clone();
                row.push(gi.local_offset[(nidx, 0)]);
                row.push(gi.local_offset[(nidx, 1)]);
                row.push(gi.scale_token[(nidx, 0)]);
                row.push(gi.scale_token[(nidx, 1)]);
                // MLP
                let mut act = row;
                for l in 0..=cfg.mlp_layers {
                    let w = p
                        .get(&format!("liff.mlp.{l}.w"))
                        .unwrap()
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let bias = b1(&format!("liff.mlp.{l}.b"));
                    let (win, wout) = w.dim();
                    assert_eq!(act.len(), win);
                    let mut next = vec![0.0; wout];
                    for o in 0..wout {
                        let mut acc = bias[o];
                        for ii in 0..win {
                            acc += act[ii] * w[(ii, o)];
                        }
                        next[o] = if l < cfg.mlp_layers { acc.max(0.0) } else { acc };
                    }
                    act = next;
                }
                for k in 0..3 {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += fvec[ch] * act[ch * 3 + k];
                    }
                    expect[(i, j, k)] = acc;
                }
            }
        }
        let gv = got.view().into_dimensionality::<Ix3>().unwrap();
        for i in 0..dh {
            for j in 0..dw {
                for k in 0..3 {
                    let (a, e) = (gv[(i, j, k)], expect[(i, j, k)]);
                    assert!(
                        (a - e).abs() < 1e-9 * (1.0 + e.abs()),
                        "({i},{j},{k}): {a} vs {e}"
                    );
                }
            }
        }
        let _ = (Array1::<f64>::zeros(1), Array2::<f64>::zeros((1, 1)), Array4::<f64>::zeros((1, 1, 1, 1)));
    }

    #[test]
    fn identity_scale_prediction_uses_zero_offsets() {
        // with dst == src the conditioning offsets are exactly zero and the
        // scale token is exactly 2; check the prediction is finite and shaped
        let (m, cfg) = tiny();
        let g = Graph::inference();
        let b = m.params.bind(&g);
        let img = g.input(rand_img(6, 6, 3));
        let pred = predict(&g, &b, &cfg, img, 6, 6);
        assert_eq!(g.shape(pred), vec![6, 6, 3]);
        assert!(g.value(pred).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prediction_is_differentiable_end_to_end() {
        let (m, cfg) = tiny();
        let g = Graph::recording();
        let b = m.params.bind(&g);
        let img = g.input(rand_img(3, 3, 8));
        let pred = predict(&g, &b, &cfg, img, 5, 4);
        let target = g.input(ArrayD::zeros(ndarray::IxDyn(&[5, 4, 3])));
        let loss = g.mse(pred, target);
        let grads = g.backward(loss);
        // gradient reaches the earliest extractor layer and the last MLP layer
        assert!(grads.get(b.var("liff.sfe1.w")).is_some());
        let last = cfg.mlp_layers;
        let gw = grads.get(b.var(&format!("liff.mlp.{last}.w"))).unwrap();
        assert!(gw.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn frozen_predictor_receives_no_gradients() {
        let (mut m, cfg) = tiny();
        m.params.set_trainable_prefix("liff.", false);
        let g = Graph::recording();
        let b = m.params.bind(&g);
        let img = g.input(rand_img(3, 3, 8));
        let pred = predict(&g, &b, &cfg, img, 4, 4);
        let target = g.input(ArrayD::zeros(ndarray::IxDyn(&[4, 4, 3])));
        let loss = g.mse(pred, target);
        let grads = g.backward(loss);
        assert!(grads.get(b.var("liff.sfe1.w")).is_none());
        assert!(grads.get(b.var("liff.mlp.0.w")).is_none());
    }

    #[test]
    fn one_by_one_source_predicts_constant_rows() {
        // a 1x1 source makes every target pixel share the same feature vector;
        // outputs differ only through the (row, col) offsets in the MLP input
        let (m, cfg) = tiny();
        let g = Graph::inference();
        let b = m.params.bind(&g);
        let img = g.input(rand_img(1, 1, 5));
        let pred = predict(&g, &b, &cfg, img, 3, 3);
        assert_eq!(g.shape(pred), vec![3, 3, 3]);
        assert!(g.value(pred).iter().all(|v| v.is_finite()));

        // make the MLP input-independent by zeroing its first weight matrix:
        // then all 9 target pixels must be identical
        let mut frozen = Params::new();
        for (n, a) in m.params.iter() {
            frozen.insert(n, a.clone());
        }
        let w0 = frozen.get("liff.mlp.0.w").unwrap().clone();
        frozen.set("liff.mlp.0.w", ArrayD::zeros(w0.raw_dim())).unwrap();
        let g2 = Graph::inference();
        let b2 = frozen.bind(&g2);
        let img2 = g2.input(rand_img(1, 1, 5));
        let pred2 = predict(&g2, &b2, &cfg, img2, 3, 3);
        let v = g2.value(pred2);
        let v3 = v.view().into_dimensionality::<Ix3>().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(v3[(i, j, k)], v3[(0, 0, k)]);
                }
            }
        }
    }
}
