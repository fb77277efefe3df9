//! Brute-force reference attention.
//!
//! Everything here is deliberately naive and independent of the fast path:
//! group membership is recomputed from modular arithmetic, Q/K/V come from
//! direct convolution loops, and attention is a per-group, per-head,
//! per-query triple loop with no gathering or batching tricks. The fast
//! implementations are tested against this module, never the other way
//! round.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{AttentionMode, AttentionParams, SepConv};
use crate::partition::{AttentionMask, PartitionSpec};
use crate::tensor::{Real, Shape, Tensor};
use crate::{Error, Result};

/// Naive scaled dot-product attention over one `(b, n, 1, d)` group.
pub fn oracle_msa<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    key_valid: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let s = q.shape();
    let (b, n, d) = (s.b, s.h, s.c);
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument {
            op: "oracle_msa",
            detail: "width not divisible by heads".into(),
        });
    }
    if let Some(flags) = key_valid {
        if !flags.iter().any(|&f| f) {
            return Err(Error::FullyMasked { op: "oracle_msa" });
        }
    }
    let dh = d / heads;
    let scale = T::from_f64(1.0 / libm::sqrt(dh as f64));
    let valid = |j: usize| key_valid.map_or(true, |m| m[j]);
    let mut out = Tensor::zeros(s);
    for bi in 0..b {
        for head in 0..heads {
            let off = head * dh;
            for qi in 0..n {
                let mut scores = vec![T::zero(); n];
                let mut max = T::neg_infinity();
                for kj in 0..n {
                    if !valid(kj) {
                        continue;
                    }
                    let mut dot = T::zero();
                    for e in 0..dh {
                        dot = dot + q.at(bi, qi, 0, off + e) * k.at(bi, kj, 0, off + e);
                    }
                    scores[kj] = dot * scale;
                    if scores[kj] > max {
                        max = scores[kj];
                    }
                }
                let mut denom = T::zero();
                for kj in 0..n {
                    if valid(kj) {
                        scores[kj] = (scores[kj] - max).exp();
                        denom = denom + scores[kj];
                    }
                }
                for kj in 0..n {
                    if !valid(kj) {
                        continue;
                    }
                    let weight = scores[kj] / denom;
                    for e in 0..dh {
                        let cur = out.at(bi, qi, 0, off + e);
                        out.set(bi, qi, 0, off + e, cur + weight * v.at(bi, kj, 0, off + e));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn naive_depthwise3x3<T: Real>(x: &Tensor<T>, dw: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for b in 0..s.b {
        for ch in 0..s.c {
            for y in 0..s.h {
                for x_ in 0..s.w {
                    let mut acc = T::zero();
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = y as isize + ky as isize - 1;
                            let ix = x_ as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            acc =
                                acc + x.at(b, iy as usize, ix as usize, ch) * dw.at(ky, kx, 0, ch);
                        }
                    }
                    out.set(b, y, x_, ch, acc);
                }
            }
        }
    }
    out
}

fn naive_pointwise<T: Real>(x: &Tensor<T>, pw: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let s = x.shape();
    let cout = pw.shape().c;
    let mut out = Tensor::zeros(Shape::new(s.b, s.h, s.w, cout));
    for b in 0..s.b {
        for y in 0..s.h {
            for x_ in 0..s.w {
                for co in 0..cout {
                    let mut acc = bias.map_or(T::zero(), |bb| bb.data()[co]);
                    for ci in 0..s.c {
                        acc = acc + x.at(b, y, x_, ci) * pw.at(0, 0, ci, co);
                    }
                    out.set(b, y, x_, co, acc);
                }
            }
        }
    }
    out
}

fn naive_generator<T: Real>(x: &Tensor<T>, sep: &SepConv<Tensor<T>>) -> Tensor<T> {
    match &sep.depthwise {
        Some(dw) => naive_pointwise(&naive_depthwise3x3(x, dw), &sep.pointwise, Some(&sep.bias)),
        None => naive_pointwise(x, &sep.pointwise, Some(&sep.bias)),
    }
}

/// Reference attention over explicit token groups.
///
/// Generates Q/K/V with direct convolution loops, attends within the
/// channel range `chan = (start, len)` using a per-query loop, and writes
/// each token's output back to its map position. Tokens flagged invalid
/// never act as keys; groups without any valid token produce zeros.
pub fn oracle_attention<T: Real>(
    x: &Tensor<T>,
    groups: &[Vec<(usize, usize)>],
    chan: (usize, usize),
    params: &AttentionParams<Tensor<T>>,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    let q = naive_generator(x, &params.query);
    let k = naive_generator(x, &params.key);
    let v = naive_generator(x, &params.value);
    let pairs: GroupPairs = groups.iter().map(|g| (g.clone(), g.clone())).collect();
    oracle_attend_maps(&q, &k, &v, &pairs, chan, heads, mask)
}

/// The attention stage alone, on precomputed Q/K/V maps. Output positions
/// come from each group's query list; its key list supplies the attended
/// tokens (they coincide except for whole pales).
pub fn oracle_attend_maps<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    groups: &[(Vec<(usize, usize)>, Vec<(usize, usize)>)],
    chan: (usize, usize),
    heads: usize,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    let s = q.shape();
    let (start, len) = chan;
    if heads == 0 || len % heads != 0 || start + len > s.c {
        return Err(Error::InvalidArgument {
            op: "oracle_attention",
            detail: "bad channel range or head count".into(),
        });
    }
    let dh = len / heads;
    let scale = T::from_f64(1.0 / libm::sqrt(dh as f64));
    let mut out = Tensor::zeros(Shape::new(s.b, s.h, s.w, len));
    for (queries, key_coords) in groups {
        let keys: Vec<(usize, usize)> =
            key_coords.iter().copied().filter(|&(y, x_)| mask.is_valid(y, x_)).collect();
        if keys.is_empty() {
            continue;
        }
        for bi in 0..s.b {
            for head in 0..heads {
                let off = start + head * dh;
                for &(qy, qx) in queries {
                    let mut weights = vec![T::zero(); keys.len()];
                    let mut max = T::neg_infinity();
                    for (j, &(ky, kx)) in keys.iter().enumerate() {
                        let mut dot = T::zero();
                        for e in 0..dh {
                            dot = dot + q.at(bi, qy, qx, off + e) * k.at(bi, ky, kx, off + e);
                        }
                        weights[j] = dot * scale;
                        if weights[j] > max {
                            max = weights[j];
                        }
                    }
                    let mut denom = T::zero();
                    for wgt in weights.iter_mut() {
                        *wgt = (*wgt - max).exp();
                        denom = denom + *wgt;
                    }
                    for (j, &(ky, kx)) in keys.iter().enumerate() {
                        let weight = weights[j] / denom;
                        for e in 0..dh {
                            let cur = out.at(bi, qy, qx, head * dh + e);
                            out.set(
                                bi,
                                qy,
                                qx,
                                head * dh + e,
                                cur + weight * v.at(bi, ky, kx, off + e),
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

type GroupPairs = Vec<(Vec<(usize, usize)>, Vec<(usize, usize)>)>;

fn row_groups(hp: usize, wp: usize, per_group: usize, interlaced: bool) -> GroupPairs {
    let n = hp / per_group;
    let mut groups = vec![Vec::new(); n];
    for y in 0..hp {
        let g = if interlaced { y % n } else { y / per_group };
        for x in 0..wp {
            groups[g].push((y, x));
        }
    }
    groups.into_iter().map(|g| (g.clone(), g)).collect()
}

fn col_groups(hp: usize, wp: usize, per_group: usize, interlaced: bool) -> GroupPairs {
    let n = wp / per_group;
    let mut groups = vec![Vec::new(); n];
    for x in 0..wp {
        let g = if interlaced { x % n } else { x / per_group };
        for y in 0..hp {
            groups[g].push((y, x));
        }
    }
    groups.into_iter().map(|g| (g.clone(), g)).collect()
}

/// Whole pales overlap, so each comes as a (queries, keys) pair: the
/// pale's keys are all its tokens, while output positions (queries) are
/// only the tokens whose row the pale owns.
fn whole_pale_groups(
    hp: usize,
    wp: usize,
    s_r: usize,
    s_c: usize,
    interlaced: bool,
) -> Vec<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let n = hp / s_r;
    let mut pairs = vec![(Vec::new(), Vec::new()); n];
    for y in 0..hp {
        let gr = if interlaced { y % n } else { y / s_r };
        for x in 0..wp {
            let gc = if interlaced { x % n } else { x / s_c };
            pairs[gr].0.push((y, x));
            pairs[gr].1.push((y, x));
            if gc != gr {
                pairs[gc].1.push((y, x));
            }
        }
    }
    pairs
}

fn pad_map<T: Real>(x: &Tensor<T>, hp: usize, wp: usize) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.b, hp, wp, s.c));
    for b in 0..s.b {
        for y in 0..s.h {
            for x_ in 0..s.w {
                for ch in 0..s.c {
                    out.set(b, y, x_, ch, x.at(b, y, x_, ch));
                }
            }
        }
    }
    out
}

/// Reference implementation of a whole attention layer in any mode,
/// mirroring the fast path's semantics (padding rules included) with none
/// of its machinery.
pub fn oracle_mode_forward<T: Real>(
    x: &Tensor<T>,
    mode: AttentionMode,
    block_index: usize,
    spec: &PartitionSpec,
    params: &AttentionParams<Tensor<T>>,
    external: Option<&AttentionMask>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let (h, w, c) = (s.h, s.w, s.c);
    let (s_r, s_c, interlaced) = match mode {
        AttentionMode::Axial => (1, 1, true),
        AttentionMode::CrossShaped => (spec.rows_per_pale, spec.cols_per_pale, false),
        _ => (spec.rows_per_pale, spec.cols_per_pale, spec.interlaced),
    };
    let (hp, wp) = match mode {
        AttentionMode::Global => (h, w),
        AttentionMode::PaleVanilla => {
            let n = h.div_ceil(s_r).max(w.div_ceil(s_c));
            (n * s_r, n * s_c)
        }
        AttentionMode::PaleSequential => {
            if block_index % 2 == 0 {
                (h.div_ceil(s_r) * s_r, w)
            } else {
                (h, w.div_ceil(s_c) * s_c)
            }
        }
        _ => (h.div_ceil(s_r) * s_r, w.div_ceil(s_c) * s_c),
    };

    let xp = pad_map(x, hp, wp);
    let mask = match external {
        Some(m) => m.extend(hp, wp),
        None => AttentionMask::padded(hp, wp, h, w),
    };

    let q = naive_generator(&xp, &params.query);
    let k = naive_generator(&xp, &params.key);
    let v = naive_generator(&xp, &params.value);

    let attended = match mode {
        AttentionMode::Global => {
            let coords: Vec<(usize, usize)> =
                (0..hp).flat_map(|y| (0..wp).map(move |x_| (y, x_))).collect();
            oracle_attend_maps(&q, &k, &v, &[(coords.clone(), coords)], (0, c), params.heads, &mask)?
        }
        AttentionMode::PaleVanilla => {
            let groups = whole_pale_groups(hp, wp, s_r, s_c, interlaced);
            oracle_attend_maps(&q, &k, &v, &groups, (0, c), params.heads, &mask)?
        }
        AttentionMode::PaleSequential => {
            let groups = if block_index % 2 == 0 {
                row_groups(hp, wp, s_r, interlaced)
            } else {
                col_groups(hp, wp, s_c, interlaced)
            };
            oracle_attend_maps(&q, &k, &v, &groups, (0, c), params.heads, &mask)?
        }
        _ => {
            let half = c / 2;
            let hh = params.heads / 2;
            let rows = row_groups(hp, wp, s_r, interlaced);
            let cols = col_groups(hp, wp, s_c, interlaced);
            let y_r = oracle_attend_maps(&q, &k, &v, &rows, (0, half), hh, &mask)?;
            let y_c = oracle_attend_maps(&q, &k, &v, &cols, (half, half), hh, &mask)?;
            let mut cat = Tensor::zeros(Shape::new(s.b, hp, wp, c));
            for b in 0..s.b {
                for y in 0..hp {
                    for x_ in 0..wp {
                        for ch in 0..half {
                            cat.set(b, y, x_, ch, y_r.at(b, y, x_, ch));
                            cat.set(b, y, x_, half + ch, y_c.at(b, y, x_, ch));
                        }
                    }
                }
            }
            cat
        }
    };

    let projected = naive_pointwise(&attended, &params.proj_weight, Some(&params.proj_bias));
    let mut out = Tensor::zeros(s);
    for b in 0..s.b {
        for y in 0..h {
            for x_ in 0..w {
                for ch in 0..c {
                    out.set(b, y, x_, ch, projected.at(b, y, x_, ch));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention;
    use crate::rng::Rng;
    use crate::tape::Tape;
    use alloc::vec;

    #[test]
    fn hand_case_uniform_average() {
        // n = 2, d = 1, Q = K = [0, 0], V = [2, 4] -> both outputs 3
        let q = Tensor::<f64>::new(Shape::new(1, 2, 1, 1), vec![0.0, 0.0]).unwrap();
        let v = Tensor::<f64>::new(Shape::new(1, 2, 1, 1), vec![2.0, 4.0]).unwrap();
        let out = oracle_msa(&q, &q, &v, 1, None).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
        assert!((out.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_group_passes_value_through() {
        let mut rng = Rng::new(1);
        let q = Tensor::<f64>::from_fn(Shape::new(2, 1, 1, 4), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let v = Tensor::<f64>::from_fn(Shape::new(2, 1, 1, 4), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let out = oracle_msa(&q, &q, &v, 2, None).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn oracle_msa_agrees_with_fast_msa_group() {
        let mut rng = Rng::new(2);
        for heads in [1usize, 2] {
            let (n, d) = (6, 8);
            let q =
                Tensor::<f64>::from_fn(Shape::new(2, n, 1, d), |_, _, _, _| rng.uniform(-1.0, 1.0));
            let k =
                Tensor::<f64>::from_fn(Shape::new(2, n, 1, d), |_, _, _, _| rng.uniform(-1.0, 1.0));
            let v =
                Tensor::<f64>::from_fn(Shape::new(2, n, 1, d), |_, _, _, _| rng.uniform(-1.0, 1.0));
            let reference = oracle_msa(&q, &k, &v, heads, None).unwrap();

            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v));
            let fast = attention::msa_group(&mut tape, qv, kv, vv, heads, None).unwrap();
            let diff = reference.max_abs_diff(tape.value(fast));
            assert!(diff < 1e-12, "diff {diff}");
        }
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let mut rng = Rng::new(3);
        let n = 5;
        let q = Tensor::<f64>::from_fn(Shape::new(1, n, 1, 2), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let k = Tensor::<f64>::from_fn(Shape::new(1, n, 1, 2), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let mut v =
            Tensor::<f64>::from_fn(Shape::new(1, n, 1, 2), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let flags = [true, true, false, true, false];
        let before = oracle_msa(&q, &k, &v, 1, Some(&flags)).unwrap();
        // corrupt masked values; outputs must not move at all
        for t in [2usize, 4] {
            for ch in 0..2 {
                v.set(0, t, 0, ch, 1e9);
            }
        }
        let after = oracle_msa(&q, &k, &v, 1, Some(&flags)).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn mode_forward_matches_fast_path_on_a_padded_shape() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::from_fn(Shape::new(1, 5, 6, 8), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let mut prng = Rng::new(5);
        let params = AttentionParams::<Tensor<f64>>::init(8, 2, true, &mut prng);
        let spec = PartitionSpec::pale(2, 2);
        let (fast, _) = attention::attention_forward_pure(
            &x,
            AttentionMode::PaleParallel,
            0,
            &spec,
            &params,
            None,
        )
        .unwrap();
        let slow =
            oracle_mode_forward(&x, AttentionMode::PaleParallel, 0, &spec, &params, None).unwrap();
        let diff = fast.max_abs_diff(&slow);
        assert!(diff < 1e-12, "diff {diff}");
    }
}
