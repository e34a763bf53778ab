//! Normalized pixel-center coordinates and cross-resolution correspondence.
//!
//! Pixel `i` of an axis with `n` samples sits at the normalized center
//! `((2i + 1) - n) / n`, i.e. the open interval (-1, 1) sampled at cell
//! centers. The same formula is used everywhere so coordinate symmetry is
//! bitwise exact: `coord(i) == -coord(n - 1 - i)`.
//!
//! Correspondence between two resolutions of the same axis is resolved in
//! integer arithmetic only, so ties and rounding never depend on float
//! behavior. Target center `i` maps to continuous source position
//! `t = (2i + 1) * n_src / (2 * n_tgt)` (in source index units, centers at
//! integers); the nearest integer index is `floor(t)` rounded to nearest with
//! exact-half ties taking the smaller index, then clamped to the valid range.

/// Normalized center coordinate of sample `i` on an axis of length `n`.
#[inline]
pub fn center_coord(i: usize, n: usize) -> f64 {
    ((2 * i + 1) as f64 - n as f64) / n as f64
}

/// Nearest source index on an axis of `n_src` samples for target sample `i`
/// of `n_tgt` samples. Integer-exact; half-way ties choose the smaller index.
pub fn nearest_source_index(i: usize, n_tgt: usize, n_src: usize) -> usize {
    debug_assert!(n_tgt > 0 && n_src > 0 && i < n_tgt);
    // The target center in source *index* units (source centers at integers):
    // pos = (2i + 1) * n_src / (2 * n_tgt) - 1/2 = a / b with
    let a = (2 * i as i128 + 1) * n_src as i128 - n_tgt as i128;
    let b = 2 * n_tgt as i128;
    // Nearest integer with half-way ties rounding down: ceil(pos - 1/2),
    // i.e. ceil((2a - b) / (2b)) in exact integer arithmetic.
    let num = 2 * a - b;
    let den = 2 * b;
    let k = -((-num).div_euclid(den));
    k.clamp(0, n_src as i128 - 1) as usize
}

/// Row/column source-index maps realizing nearest-neighbor correspondence
/// from a `(src_h, src_w)` grid onto a `(dst_h, dst_w)` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceMap {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl CorrespondenceMap {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        CorrespondenceMap {
            rows: (0..dst_h).map(|i| nearest_source_index(i, dst_h, src_h)).collect(),
            cols: (0..dst_w).map(|j| nearest_source_index(j, dst_w, src_w)).collect(),
        }
    }
}

/// Per-pixel conditioning inputs for the implicit predictor at one target
/// resolution: the local coordinate offset to the matched source center and
/// the relative-scale token, both flattened row-major to `(dst_h * dst_w, 2)`.
pub struct GridInfo {
    /// (n, 2): target center minus matched source center, (row_off, col_off).
    pub local_offset: ndarray::Array2<f64>,
    /// (n, 2): `(2 * src_h / dst_h, 2 * src_w / dst_w)` repeated per pixel.
    pub scale_token: ndarray::Array2<f64>,
}

/// Build the local-offset grid and scale token for predicting a
/// `(dst_h, dst_w)` layer from a `(src_h, src_w)` layer.
pub fn grid_info(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize, map: &CorrespondenceMap) -> GridInfo {
    let n = dst_h * dst_w;
    let mut local = ndarray::Array2::<f64>::zeros((n, 2));
    let row_off: Vec<f64> = (0..dst_h)
        .map(|i| center_coord(i, dst_h) - center_coord(map.rows[i], src_h))
        .collect();
    let col_off: Vec<f64> = (0..dst_w)
        .map(|j| center_coord(j, dst_w) - center_coord(map.cols[j], src_w))
        .collect();
    for i in 0..dst_h {
        for j in 0..dst_w {
            let idx = i * dst_w + j;
            local[(idx, 0)] = row_off[i];
            local[(idx, 1)] = col_off[j];
        }
    }
    let sh = 2.0 * src_h as f64 / dst_h as f64;
    let sw = 2.0 * src_w as f64 / dst_w as f64;
    let mut scale = ndarray::Array2::<f64>::zeros((n, 2));
    scale.column_mut(0).fill(sh);
    scale.column_mut(1).fill(sw);
    GridInfo { local_offset: local, scale_token: scale }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_coords_tile_the_open_interval() {
        let n = 7;
        for i in 0..n {
            let c = center_coord(i, n);
            assert!(c > -1.0 && c < 1.0);
        }
        // spacing is uniform: 2/n
        let step = center_coord(1, n) - center_coord(0, n);
        for i in 1..n {
            let d = center_coord(i, n) - center_coord(i - 1, n);
            assert!((d - step).abs() < 1e-15);
        }
        assert!((step - 2.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn center_coords_are_bitwise_symmetric() {
        for n in 1..=64 {
            for i in 0..n {
                let a = center_coord(i, n);
                let b = -center_coord(n - 1 - i, n);
                if a == 0.0 {
                    // odd-length center: 0.0 vs -0.0, numerically identical
                    assert_eq!(b, 0.0, "n={n} i={i}");
                } else {
                    assert_eq!(a.to_bits(), b.to_bits(), "n={n} i={i}");
                }
            }
        }
    }

    /// Brute-force oracle: compare |t - (k + 0.5)| over all k via exact
    /// integer cross-multiplication, preferring the smaller index on ties.
    fn oracle_nearest(i: usize, n_tgt: usize, n_src: usize) -> usize {
        // distance to source center k (in axis units scaled by 2*n_tgt*n_src):
        // t = (2i+1)/(2 n_tgt) in [0,1); center_k = (2k+1)/(2 n_src)
        // |t - center_k| ∝ |(2i+1) n_src - (2k+1) n_tgt|
        let mut best = 0usize;
        let mut best_d = i128::MAX;
        for k in 0..n_src {
            let d = ((2 * i as i128 + 1) * n_src as i128 - (2 * k as i128 + 1) * n_tgt as i128)
                .abs();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    #[test]
    fn nearest_index_matches_integer_oracle_exhaustively() {
        for n_src in 1..=8 {
            for n_tgt in 1..=8 {
                for i in 0..n_tgt {
                    assert_eq!(
                        nearest_source_index(i, n_tgt, n_src),
                        oracle_nearest(i, n_tgt, n_src),
                        "i={i} n_tgt={n_tgt} n_src={n_src}"
                    );
                }
            }
        }
    }

    #[test]
    fn nearest_index_matches_oracle_on_larger_mixed_sizes() {
        let sizes = [1usize, 2, 3, 5, 7, 12, 17, 33, 64, 97];
        for &n_src in &sizes {
            for &n_tgt in &sizes {
                for i in 0..n_tgt {
                    assert_eq!(
                        nearest_source_index(i, n_tgt, n_src),
                        oracle_nearest(i, n_tgt, n_src),
                        "i={i} n_tgt={n_tgt} n_src={n_src}"
                    );
                }
            }
        }
    }

    #[test]
    fn midpoint_ties_take_the_smaller_index() {
        // n_src = 2, n_tgt = 1: the single target center t = 0.5 (axis units)
        // is equidistant from source centers 0.25 and 0.75 → index 0.
        assert_eq!(nearest_source_index(0, 1, 2), 0);
        // n_src = 4, n_tgt = 2: targets at 0.25, 0.75 are each equidistant
        // between two source centers (0.125/0.375 and 0.625/0.875).
        assert_eq!(nearest_source_index(0, 2, 4), 0);
        assert_eq!(nearest_source_index(1, 2, 4), 2);
        // and the oracle agrees by construction
        assert_eq!(oracle_nearest(0, 2, 4), 0);
        assert_eq!(oracle_nearest(1, 2, 4), 2);
    }

    #[test]
    fn identity_correspondence_is_identity() {
        let m = CorrespondenceMap::new(5, 9, 5, 9);
        assert_eq!(m.rows, vec![0, 1, 2, 3, 4]);
        assert_eq!(m.cols, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn integer_upscale_repeats_each_source_sample() {
        let m = CorrespondenceMap::new(2, 3, 4, 6);
        assert_eq!(m.rows, vec![0, 0, 1, 1]);
        assert_eq!(m.cols, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn local_offsets_vanish_at_identity_scale() {
        let map = CorrespondenceMap::new(4, 4, 4, 4);
        let gi = grid_info(4, 4, 4, 4, &map);
        for v in gi.local_offset.iter() {
            assert_eq!(*v, 0.0);
        }
        for v in gi.scale_token.iter() {
            assert_eq!(*v, 2.0);
        }
    }

    #[test]
    fn local_offsets_are_bounded_by_source_cell_size() {
        // nearest-center matching keeps |offset| <= source cell half-width
        // (1/n_src in normalized units) plus target half-cell slack.
        for (sh, sw, dh, dw) in [(3, 5, 7, 11), (4, 4, 9, 6), (2, 3, 5, 5)] {
            let map = CorrespondenceMap::new(sh, sw, dh, dw);
            let gi = grid_info(sh, sw, dh, dw, &map);
            for r in 0..dh * dw {
                assert!(gi.local_offset[(r, 0)].abs() <= 1.0 / sh as f64 + 1e-12);
                assert!(gi.local_offset[(r, 1)].abs() <= 1.0 / sw as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn grid_rows_are_flattened_row_major() {
        let map = CorrespondenceMap::new(2, 2, 3, 4);
        let gi = grid_info(2, 2, 3, 4, &map);
        // pixel (i, j) lives at row i * w + j: row offset constant along a row
        for i in 0..3 {
            let base = gi.local_offset[(i * 4, 0)];
            for j in 0..4 {
                assert_eq!(gi.local_offset[(i * 4 + j, 0)], base);
            }
        }
        // column offset pattern repeats every row
        for j in 0..4 {
            let c = gi.local_offset[(j, 1)];
            for i in 1..3 {
                assert_eq!(gi.local_offset[(i * 4 + j, 1)], c);
            }
        }
    }

    #[test]
    fn scale_token_encodes_axis_ratios() {
        let map = CorrespondenceMap::new(3, 5, 6, 20);
        let gi = grid_info(3, 5, 6, 20, &map);
        assert_eq!(gi.scale_token[(0, 0)], 2.0 * 3.0 / 6.0);
        assert_eq!(gi.scale_token[(0, 1)], 2.0 * 5.0 / 20.0);
    }
}
