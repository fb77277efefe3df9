//! Token groupings that define pales, stripes, and their padding policy.
//!
//! A pale of size `(s_r, s_c)` on an `h x w` map is `s_r` interlaced rows
//! plus `s_c` interlaced columns. Interlaced members of group `g` sit at
//! indices `g, g+N, g+2N, ...` where `N = h/s_r` (or `w/s_c`) is the group
//! count, so intervals between adjacent members are equal for every group.
//! With `interlaced = false` the same machinery produces the contiguous
//! stripes of the cross-shaped baseline.
//!
//! Extents that do not divide by the pale size are zero-padded on the
//! bottom/right; padded tokens are flagged invalid in an [`AttentionMask`]
//! so they never act as attention keys, and their outputs are discarded
//! when the map is cropped back.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Pale size and grouping style.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    /// Rows per pale (`s_r`).
    pub rows_per_pale: usize,
    /// Columns per pale (`s_c`).
    pub cols_per_pale: usize,
    /// Interlaced groups (pale) if true, contiguous stripes (cross-shaped)
    /// if false.
    pub interlaced: bool,
}

impl PartitionSpec {
    pub fn new(rows_per_pale: usize, cols_per_pale: usize, interlaced: bool) -> Self {
        Self { rows_per_pale, cols_per_pale, interlaced }
    }

    /// Interlaced pale of the given size.
    pub fn pale(rows_per_pale: usize, cols_per_pale: usize) -> Self {
        Self::new(rows_per_pale, cols_per_pale, true)
    }

    /// Contiguous stripes of the given size (cross-shaped baseline).
    pub fn cross_shaped(rows_per_pale: usize, cols_per_pale: usize) -> Self {
        Self::new(rows_per_pale, cols_per_pale, false)
    }

    /// Degenerate pale of single rows/columns (axial baseline).
    pub fn axial() -> Self {
        Self::pale(1, 1)
    }

    fn validate(&self) -> Result<()> {
        if self.rows_per_pale == 0 || self.cols_per_pale == 0 {
            return Err(Error::InvalidArgument {
                op: "PartitionSpec",
                detail: "pale size must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Which spatial axis a grouping slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

/// The ordered token-coordinate lists of one axis' groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGroups {
    pub axis: Axis,
    /// `groups[g]` lists `(row, col)` coordinates of group `g` in gather order.
    pub groups: Vec<Vec<(usize, usize)>>,
}

impl IndexGroups {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

fn member_indices(extent: usize, per_group: usize, interlaced: bool, g: usize) -> Vec<usize> {
    let n = extent / per_group;
    if interlaced {
        (0..per_group).map(|k| g + k * n).collect()
    } else {
        (g * per_group..(g + 1) * per_group).collect()
    }
}

/// Build the row-wise or column-wise groups for an `h x w` map.
///
/// The relevant extent must already divide by the pale size; call
/// [`pad_to_divisible`] first when it does not.
pub fn build_groups(h: usize, w: usize, spec: &PartitionSpec, axis: Axis) -> Result<IndexGroups> {
    spec.validate()?;
    let (extent, per_group) = match axis {
        Axis::Row => (h, spec.rows_per_pale),
        Axis::Column => (w, spec.cols_per_pale),
    };
    if extent == 0 || extent % per_group != 0 {
        return Err(Error::InvalidArgument {
            op: "build_groups",
            detail: format!("extent {extent} not divisible by pale size {per_group}"),
        });
    }
    let n = extent / per_group;
    let mut groups = Vec::with_capacity(n);
    for g in 0..n {
        let members = member_indices(extent, per_group, spec.interlaced, g);
        let mut coords = Vec::with_capacity(per_group * if axis == Axis::Row { w } else { h });
        match axis {
            Axis::Row => {
                for &r in &members {
                    for x in 0..w {
                        coords.push((r, x));
                    }
                }
            }
            Axis::Column => {
                for &col in &members {
                    for y in 0..h {
                        coords.push((y, col));
                    }
                }
            }
        }
        groups.push(coords);
    }
    Ok(IndexGroups { axis, groups })
}

/// Coordinates of whole pale `g`: its row group united with its column
/// group, each token exactly once (row tokens first, then the column tokens
/// not already covered by a selected row).
pub fn pale_coords(
    h: usize,
    w: usize,
    spec: &PartitionSpec,
    g: usize,
) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    if h % spec.rows_per_pale != 0 || w % spec.cols_per_pale != 0 {
        return Err(Error::InvalidArgument {
            op: "pale_coords",
            detail: format!("{h}x{w} not divisible by pale size"),
        });
    }
    let n_r = h / spec.rows_per_pale;
    let n_c = w / spec.cols_per_pale;
    if n_r != n_c {
        return Err(Error::InvalidArgument {
            op: "pale_coords",
            detail: format!("row group count {n_r} != column group count {n_c}"),
        });
    }
    let rows = member_indices(h, spec.rows_per_pale, spec.interlaced, g);
    let cols = member_indices(w, spec.cols_per_pale, spec.interlaced, g);
    let mut in_rows = vec![false; h];
    for &r in &rows {
        in_rows[r] = true;
    }
    let mut coords = Vec::with_capacity(spec.rows_per_pale * w + spec.cols_per_pale * h);
    for &r in &rows {
        for x in 0..w {
            coords.push((r, x));
        }
    }
    for &col in &cols {
        for y in 0..h {
            if !in_rows[y] {
                coords.push((y, col));
            }
        }
    }
    Ok(coords)
}

/// Tokens covered by one pale: `s_r*w + s_c*h - s_r*s_c`.
pub fn pale_token_count(h: usize, w: usize, s_r: usize, s_c: usize) -> Result<usize> {
    if s_r == 0 || s_c == 0 || h % s_r != 0 || w % s_c != 0 {
        return Err(Error::InvalidArgument {
            op: "pale_token_count",
            detail: format!("{h}x{w} not divisible by ({s_r}, {s_c})"),
        });
    }
    Ok(s_r * w + s_c * h - s_r * s_c)
}

/// Validity of each token on a (possibly padded) map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub h: usize,
    pub w: usize,
    valid: Vec<bool>,
}

impl AttentionMask {
    pub fn all_valid(h: usize, w: usize) -> Self {
        Self { h, w, valid: vec![true; h * w] }
    }

    /// Marks the top-left `valid_h x valid_w` region valid, the rest padded.
    pub fn padded(h: usize, w: usize, valid_h: usize, valid_w: usize) -> Self {
        let mut valid = vec![false; h * w];
        for y in 0..valid_h.min(h) {
            for x in 0..valid_w.min(w) {
                valid[y * w + x] = true;
            }
        }
        Self { h, w, valid }
    }

    pub fn from_flags(h: usize, w: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "AttentionMask::from_flags",
                detail: format!("{} flags for {h}x{w}", valid.len()),
            });
        }
        Ok(Self { h, w, valid })
    }

    /// Grow onto a larger canvas; the new positions are invalid.
    pub fn extend(&self, hp: usize, wp: usize) -> AttentionMask {
        let mut valid = vec![false; hp * wp];
        for y in 0..self.h {
            for x in 0..self.w {
                valid[y * wp + x] = self.is_valid(y, x);
            }
        }
        AttentionMask { h: hp, w: wp, valid }
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.w + x]
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| !v).count()
    }

    /// Key-validity flags in the order of a group's coordinates.
    pub fn flags_for(&self, coords: &[(usize, usize)]) -> Vec<bool> {
        coords.iter().map(|&(y, x)| self.is_valid(y, x)).collect()
    }

    /// Both masks must agree on extents; a token is valid if valid in both.
    pub fn intersect(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::ShapeMismatch {
                op: "AttentionMask::intersect",
                detail: format!("{}x{} vs {}x{}", self.h, self.w, other.h, other.w),
            });
        }
        Ok(AttentionMask {
            h: self.h,
            w: self.w,
            valid: self.valid.iter().zip(&other.valid).map(|(a, b)| *a && *b).collect(),
        })
    }
}

fn next_multiple(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Zero-pad bottom/right until both extents divide by the pale size.
///
/// Returns the padded tensor, the validity mask on the padded geometry and
/// the original extents.
pub fn pad_to_divisible<T: Real>(
    x: &Tensor<T>,
    spec: &PartitionSpec,
) -> Result<(Tensor<T>, AttentionMask, (usize, usize))> {
    spec.validate()?;
    let s = x.shape();
    let hp = next_multiple(s.h, spec.rows_per_pale);
    let wp = next_multiple(s.w, spec.cols_per_pale);
    let padded = crate::ops::pad_spatial(x, hp, wp)?;
    let mask = if hp == s.h && wp == s.w {
        AttentionMask::all_valid(hp, wp)
    } else {
        AttentionMask::padded(hp, wp, s.h, s.w)
    };
    Ok((padded, mask, (s.h, s.w)))
}

/// Gather every group of `g` out of `x` as `(b, n, 1, c)` tensors.
pub fn gather_groups<T: Real>(x: &Tensor<T>, g: &IndexGroups) -> Result<Vec<Tensor<T>>> {
    g.groups.iter().map(|coords| crate::ops::gather_tokens(x, coords)).collect()
}

/// Inverse of [`gather_groups`]: scatter group tensors back onto the map.
pub fn scatter_groups<T: Real>(
    groups: &[Tensor<T>],
    g: &IndexGroups,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<T>> = groups.iter().collect();
    crate::ops::scatter_tokens(&refs, &g.groups, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Shape;
    use std::collections::BTreeSet;

    fn rows_of(groups: &IndexGroups, g: usize) -> Vec<usize> {
        let mut rows: Vec<usize> = groups.groups[g].iter().map(|&(r, _)| r).collect();
        rows.dedup();
        rows
    }

    #[test]
    fn interlaced_rows_follow_stride_n() {
        let g = build_groups(4, 4, &PartitionSpec::pale(2, 2), Axis::Row).unwrap();
        assert_eq!(g.group_count(), 2);
        assert_eq!(rows_of(&g, 0), [0, 2]);
        assert_eq!(rows_of(&g, 1), [1, 3]);

        let g = build_groups(6, 6, &PartitionSpec::pale(3, 3), Axis::Row).unwrap();
        assert_eq!(rows_of(&g, 0), [0, 2, 4]);
        assert_eq!(rows_of(&g, 1), [1, 3, 5]);
    }

    #[test]
    fn contiguous_rows_are_stripes() {
        let g = build_groups(4, 4, &PartitionSpec::cross_shaped(2, 2), Axis::Row).unwrap();
        assert_eq!(rows_of(&g, 0), [0, 1]);
        assert_eq!(rows_of(&g, 1), [2, 3]);
    }

    #[test]
    fn cross_shaped_seven_wide_stripes() {
        let g = build_groups(14, 14, &PartitionSpec::cross_shaped(7, 7), Axis::Row).unwrap();
        assert_eq!(rows_of(&g, 0), (0..7).collect::<Vec<_>>());
        assert_eq!(rows_of(&g, 1), (7..14).collect::<Vec<_>>());
    }

    #[test]
    fn axial_groups_are_single_rows() {
        let g = build_groups(5, 3, &PartitionSpec::axial(), Axis::Row).unwrap();
        assert_eq!(g.group_count(), 5);
        for (i, coords) in g.groups.iter().enumerate() {
            assert_eq!(coords.len(), 3);
            assert!(coords.iter().all(|&(r, _)| r == i));
        }
    }

    #[test]
    fn build_groups_rejects_non_divisible() {
        assert!(build_groups(5, 5, &PartitionSpec::pale(2, 2), Axis::Row).is_err());
    }

    #[test]
    fn token_counts_match_formula() {
        assert_eq!(pale_token_count(56, 56, 7, 7).unwrap(), 735);
        assert_eq!(pale_token_count(4, 4, 1, 1).unwrap(), 7);
        assert_eq!(pale_token_count(6, 8, 6, 8).unwrap(), 48); // whole map
    }

    #[test]
    fn pale_count_matches_union_of_groups() {
        for (h, w, s_r, s_c) in [(14, 14, 7, 7), (8, 8, 2, 2), (6, 9, 2, 3), (4, 4, 1, 1)] {
            let spec = PartitionSpec::pale(s_r, s_c);
            for g in 0..h / s_r {
                let rows = build_groups(h, w, &spec, Axis::Row).unwrap();
                let cols = build_groups(h, w, &spec, Axis::Column).unwrap();
                let union: BTreeSet<(usize, usize)> = rows.groups[g]
                    .iter()
                    .chain(cols.groups[g].iter())
                    .copied()
                    .collect();
                assert_eq!(union.len(), pale_token_count(h, w, s_r, s_c).unwrap());
                let pale: BTreeSet<(usize, usize)> =
                    pale_coords(h, w, &spec, g).unwrap().into_iter().collect();
                assert_eq!(pale, union);
            }
        }
    }

    #[test]
    fn groups_partition_tokens_exactly_once() {
        for interlaced in [true, false] {
            for (h, w, s) in [(8, 8, 2), (12, 8, 4), (9, 6, 3)] {
                let spec = PartitionSpec::new(s, s, interlaced);
                for axis in [Axis::Row, Axis::Column] {
                    let g = build_groups(h, w, &spec, axis).unwrap();
                    let mut seen = BTreeSet::new();
                    let mut total = 0;
                    for coords in &g.groups {
                        total += coords.len();
                        seen.extend(coords.iter().copied());
                    }
                    assert_eq!(total, h * w);
                    assert_eq!(seen.len(), h * w);
                }
            }
        }
    }

    #[test]
    fn padding_to_next_multiple_masks_new_tokens() {
        let x = Tensor::<f32>::filled(Shape::new(1, 8, 8, 2), 1.0);
        let (padded, mask, orig) = pad_to_divisible(&x, &PartitionSpec::pale(7, 7)).unwrap();
        assert_eq!((padded.shape().h, padded.shape().w), (14, 14));
        assert_eq!(orig, (8, 8));
        assert_eq!(mask.invalid_count(), 14 * 14 - 64); // 132 padded tokens
        assert!(mask.is_valid(7, 7));
        assert!(!mask.is_valid(8, 0));
    }

    #[test]
    fn divisible_input_needs_no_padding() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 14, 14, 2));
        let (padded, mask, _) = pad_to_divisible(&x, &PartitionSpec::pale(7, 7)).unwrap();
        assert_eq!(padded.shape(), x.shape());
        assert_eq!(mask.invalid_count(), 0);
    }

    #[test]
    fn pad_then_crop_restores_content() {
        let mut rng = Rng::new(9);
        let x = Tensor::<f32>::from_fn(Shape::new(2, 9, 11, 3), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let (padded, _, (h, w)) = pad_to_divisible(&x, &PartitionSpec::pale(4, 4)).unwrap();
        let back = crate::ops::crop_spatial(&padded, h, w).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn gather_scatter_groups_roundtrip() {
        let mut rng = Rng::new(10);
        let x = Tensor::<f32>::from_fn(Shape::new(2, 6, 4, 3), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let spec = PartitionSpec::pale(2, 2);
        for axis in [Axis::Row, Axis::Column] {
            let g = build_groups(6, 4, &spec, axis).unwrap();
            let parts = gather_groups(&x, &g).unwrap();
            let back = scatter_groups(&parts, &g, 6, 4).unwrap();
            assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn gathered_row_groups_carry_row_values() {
        // field value = row index; s_r = 2 on h = 4
        let x = Tensor::<f32>::from_fn(Shape::new(1, 4, 4, 1), |_, y, _, _| y as f32);
        let g = build_groups(4, 4, &PartitionSpec::pale(2, 2), Axis::Row).unwrap();
        let parts = gather_groups(&x, &g).unwrap();
        let values0: BTreeSet<i32> = parts[0].data().iter().map(|&v| v as i32).collect();
        let values1: BTreeSet<i32> = parts[1].data().iter().map(|&v| v as i32).collect();
        assert_eq!(values0, BTreeSet::from([0, 2]));
        assert_eq!(values1, BTreeSet::from([1, 3]));
    }
}
