//! Pale-shaped self-attention and its ablation baselines.
//!
//! Six modes share one parameter layout: query/key/value each come from a
//! separable convolution (depthwise 3x3 then pointwise 1x1) applied to the
//! full feature map, followed by a single c x c output projection. The
//! global baseline generates Q/K/V with plain pointwise layers instead, so
//! its generator costs `3hwc^2` rather than `3(9hwc + hwc^2)`.
//!
//! The parallel form halves the channels: the first half attends within
//! row-wise token groups, the second within column-wise groups, each branch
//! with half the heads so the per-head width stays `c / heads` everywhere.
//! The vanilla form attends over whole pales, the sequential form
//! alternates row- and column-wise attention across consecutive blocks.
//!
//! Non-divisible extents are zero-padded up front; padded tokens never act
//! as keys (the softmax excludes them exactly) and their outputs are cut
//! away when the map is cropped back. QKV generation, grouping, and the
//! output projection all run on the padded geometry.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::partition::{build_groups, pale_coords, AttentionMask, Axis, PartitionSpec};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};
use crate::trace::FlopTrace;
use crate::{Error, Result};

/// Which attention a block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Global,
    Axial,
    CrossShaped,
    PaleVanilla,
    PaleSequential,
    PaleParallel,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 6] = [
        AttentionMode::Global,
        AttentionMode::Axial,
        AttentionMode::CrossShaped,
        AttentionMode::PaleVanilla,
        AttentionMode::PaleSequential,
        AttentionMode::PaleParallel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttentionMode::Global => "global",
            AttentionMode::Axial => "axial",
            AttentionMode::CrossShaped => "cross",
            AttentionMode::PaleVanilla => "pale-vanilla",
            AttentionMode::PaleSequential => "pale-sequential",
            AttentionMode::PaleParallel => "pale-parallel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global" => Some(AttentionMode::Global),
            "axial" => Some(AttentionMode::Axial),
            "cross" | "cross-shaped" => Some(AttentionMode::CrossShaped),
            "pale-vanilla" | "vanilla" => Some(AttentionMode::PaleVanilla),
            "pale-sequential" | "sequential" => Some(AttentionMode::PaleSequential),
            "pale-parallel" | "parallel" | "pale" => Some(AttentionMode::PaleParallel),
            _ => None,
        }
    }

    /// Q/K/V come from separable convs everywhere except the global
    /// baseline, which uses plain linear projections.
    pub fn separable_qkv(&self) -> bool {
        !matches!(self, AttentionMode::Global)
    }

    /// Channel-halving modes run two branches with half the heads each.
    pub fn splits_channels(&self) -> bool {
        matches!(
            self,
            AttentionMode::Axial | AttentionMode::CrossShaped | AttentionMode::PaleParallel
        )
    }
}

/// Separable convolution weights for one of Q, K, V.
///
/// `depthwise` is `(3, 3, 1, c)` without bias; `pointwise` is `(1, 1, c, c)`
/// with bias. The global baseline carries no depthwise part.
#[derive(Debug, Clone)]
pub struct SepConv<P> {
    pub depthwise: Option<P>,
    pub pointwise: P,
    pub bias: P,
}

impl<P> SepConv<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> SepConv<Q> {
        SepConv {
            depthwise: self.depthwise.as_ref().map(|d| f(d)),
            pointwise: f(&self.pointwise),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        if let Some(d) = &self.depthwise {
            f(format!("{prefix}.depthwise"), d);
        }
        f(format!("{prefix}.pointwise"), &self.pointwise);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        if let Some(d) = &mut self.depthwise {
            f(format!("{prefix}.depthwise"), d);
        }
        f(format!("{prefix}.pointwise"), &mut self.pointwise);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Per-block attention weights: the three QKV generators, the output
/// projection, and the head count.
#[derive(Debug, Clone)]
pub struct AttentionParams<P> {
    pub query: SepConv<P>,
    pub key: SepConv<P>,
    pub value: SepConv<P>,
    /// `(1, 1, c, c)` output projection.
    pub proj_weight: P,
    pub proj_bias: P,
    pub heads: usize,
}

impl<P> AttentionParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            proj_weight: f(&self.proj_weight),
            proj_bias: f(&self.proj_bias),
            heads: self.heads,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.query.visit(&format!("{prefix}.query"), f);
        self.key.visit(&format!("{prefix}.key"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        f(format!("{prefix}.proj.weight"), &self.proj_weight);
        f(format!("{prefix}.proj.bias"), &self.proj_bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.query.visit_mut(&format!("{prefix}.query"), f);
        self.key.visit_mut(&format!("{prefix}.key"), f);
        self.value.visit_mut(&format!("{prefix}.value"), f);
        f(format!("{prefix}.proj.weight"), &mut self.proj_weight);
        f(format!("{prefix}.proj.bias"), &mut self.proj_bias);
    }
}

impl<T: Real> AttentionParams<Tensor<T>> {
    /// Truncated-normal weights (std 0.02), zero biases.
    pub fn init(c: usize, heads: usize, separable: bool, rng: &mut Rng) -> Self {
        let mut sep = || {
            let depthwise = separable.then(|| {
                let mut t = Tensor::zeros(Shape::new(3, 3, 1, c));
                rng.fill_truncated_normal(t.data_mut(), 0.02);
                t
            });
            let mut pointwise = Tensor::zeros(Shape::new(1, 1, c, c));
            rng.fill_truncated_normal(pointwise.data_mut(), 0.02);
            SepConv { depthwise, pointwise, bias: Tensor::zeros(Shape::new(1, 1, 1, c)) }
        };
        let query = sep();
        let key = sep();
        let value = sep();
        let mut proj_weight = Tensor::zeros(Shape::new(1, 1, c, c));
        rng.fill_truncated_normal(proj_weight.data_mut(), 0.02);
        AttentionParams {
            query,
            key,
            value,
            proj_weight,
            proj_bias: Tensor::zeros(Shape::new(1, 1, 1, c)),
            heads,
        }
    }

    /// All-zero weights with the right shapes.
    pub fn zeroed(c: usize, heads: usize, separable: bool) -> Self {
        let sep = || SepConv {
            depthwise: separable.then(|| Tensor::zeros(Shape::new(3, 3, 1, c))),
            pointwise: Tensor::zeros(Shape::new(1, 1, c, c)),
            bias: Tensor::zeros(Shape::new(1, 1, 1, c)),
        };
        AttentionParams {
            query: sep(),
            key: sep(),
            value: sep(),
            proj_weight: Tensor::zeros(Shape::new(1, 1, c, c)),
            proj_bias: Tensor::zeros(Shape::new(1, 1, 1, c)),
            heads,
        }
    }

    pub fn channels(&self) -> usize {
        self.proj_weight.shape().c
    }
}

fn check_params<T: Real>(
    tape: &Tape<T>,
    x: Var,
    params: &AttentionParams<Var>,
    mode: AttentionMode,
) -> Result<()> {
    let c = tape.shape(x).c;
    if tape.shape(params.proj_weight).w != c {
        return Err(Error::ShapeMismatch {
            op: "attention_forward",
            detail: format!(
                "params built for {} channels, input has {c}",
                tape.shape(params.proj_weight).w
            ),
        });
    }
    if params.heads == 0 || c % params.heads != 0 {
        return Err(Error::InvalidArgument {
            op: "attention_forward",
            detail: format!("{c} channels not divisible by {} heads", params.heads),
        });
    }
    if mode.splits_channels() {
        if c % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "attention_forward",
                detail: format!("channel-splitting mode needs even channels, got {c}"),
            });
        }
        if params.heads < 2 || params.heads % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "attention_forward",
                detail: format!(
                    "channel-splitting mode needs an even head count >= 2, got {}",
                    params.heads
                ),
            });
        }
    }
    if mode.separable_qkv() != params.query.depthwise.is_some() {
        return Err(Error::InvalidArgument {
            op: "attention_forward",
            detail: format!("params are not consistent with mode {}", mode.name()),
        });
    }
    Ok(())
}

/// Q, K, V from the mode's generator applied to the full feature map:
/// `pointwise(depthwise3x3(x))` when a depthwise kernel is present, a plain
/// pointwise projection otherwise.
pub fn qkv_generate<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams<Var>,
) -> Result<(Var, Var, Var)> {
    let one = |tape: &mut Tape<T>, sep: &SepConv<Var>| -> Result<Var> {
        let inner = match sep.depthwise {
            Some(dw) => {
                let c = tape.shape(x).c;
                tape.conv2d(x, dw, None, (1, 1), (1, 1), c)?
            }
            None => x,
        };
        tape.conv2d(inner, sep.pointwise, Some(sep.bias), (1, 1), (0, 0), 1)
    };
    Ok((
        one(tape, &params.query)?,
        one(tape, &params.key)?,
        one(tape, &params.value)?,
    ))
}

/// Multi-head self-attention over one token group `(b, n, 1, d)`:
/// per head, `softmax(Q K^T / sqrt(d/heads)) V`, heads re-concatenated.
///
/// `key_valid`, when given, must flag at least one key; flagged-out keys
/// receive exactly zero weight.
pub fn msa_group<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.shape(q).c;
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument {
            op: "msa_group",
            detail: format!("width {d} not divisible by {heads} heads"),
        });
    }
    if let Some(flags) = key_valid {
        if !flags.iter().any(|&f| f) {
            return Err(Error::FullyMasked { op: "msa_group" });
        }
    }
    let head_dim = d / heads;
    let scale = T::from_f64(1.0 / libm::sqrt(head_dim as f64));
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_channels(q, h * head_dim, head_dim)?;
        let kh = tape.slice_channels(k, h * head_dim, head_dim)?;
        let vh = tape.slice_channels(v, h * head_dim, head_dim)?;
        let scores = tape.bmm_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let weights = tape.softmax_lastdim(scaled, key_valid.map(|m| m.to_vec()))?;
        outputs.push(tape.bmm_nn(weights, vh)?);
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        tape.concat_channels(&outputs)
    }
}

/// Attention over explicit coordinate groups of one channel range of the
/// Q/K/V maps; returns the scattered `(b, hp, wp, len)` output map.
#[allow(clippy::too_many_arguments)]
fn grouped_branch<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    chan: (usize, usize),
    groups: &[Vec<(usize, usize)>],
    heads: usize,
    mask: &AttentionMask,
) -> Result<Var> {
    let (start, len) = chan;
    let batch = tape.shape(q).b;
    let mut outputs = Vec::with_capacity(groups.len());
    for coords in groups {
        let flags = mask.flags_for(coords);
        if !flags.iter().any(|&f| f) {
            // group of padded tokens only: its output is cropped away later
            outputs.push(tape.leaf(Tensor::zeros(Shape::new(batch, coords.len(), 1, len))));
            continue;
        }
        let qg = tape.gather_tokens(q, coords.clone())?;
        let kg = tape.gather_tokens(k, coords.clone())?;
        let vg = tape.gather_tokens(v, coords.clone())?;
        let qs = tape.slice_channels(qg, start, len)?;
        let ks = tape.slice_channels(kg, start, len)?;
        let vs = tape.slice_channels(vg, start, len)?;
        let all_valid = flags.iter().all(|&f| f);
        let out = msa_group(tape, qs, ks, vs, heads, (!all_valid).then_some(&flags[..]))?;
        outputs.push(out);
    }
    tape.scatter_tokens(outputs, groups.to_vec(), mask.h, mask.w)
}

fn pad_and_mask<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    hp: usize,
    wp: usize,
    external: Option<&AttentionMask>,
) -> Result<(Var, AttentionMask)> {
    let s = tape.shape(x);
    let base = match external {
        Some(m) => {
            if m.h != s.h || m.w != s.w {
                return Err(Error::ShapeMismatch {
                    op: "attention_forward",
                    detail: format!("mask {}x{} vs input {}x{}", m.h, m.w, s.h, s.w),
                });
            }
            m.clone()
        }
        None => AttentionMask::all_valid(s.h, s.w),
    };
    if hp == s.h && wp == s.w {
        Ok((x, base))
    } else {
        Ok((tape.pad_spatial(x, hp, wp)?, base.extend(hp, wp)))
    }
}

fn div_ceil_mul(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// One attention layer in the requested mode; output shape equals input
/// shape. `block_index` selects the axis for the sequential form (even
/// index: rows). An `external` mask marks tokens of a pre-padded input that
/// must not act as keys.
pub fn attention_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    mode: AttentionMode,
    block_index: usize,
    spec: &PartitionSpec,
    params: &AttentionParams<Var>,
    external: Option<&AttentionMask>,
) -> Result<Var> {
    check_params(tape, x, params, mode)?;
    let in_shape = tape.shape(x);
    let (h, w, c) = (in_shape.h, in_shape.w, in_shape.c);

    let spec = match mode {
        AttentionMode::Axial => PartitionSpec::axial(),
        AttentionMode::CrossShaped => {
            PartitionSpec::cross_shaped(spec.rows_per_pale, spec.cols_per_pale)
        }
        _ => *spec,
    };

    let (hp, wp) = match mode {
        AttentionMode::Global => (h, w),
        AttentionMode::PaleVanilla => {
            // equal row/column group counts
            let n = h.div_ceil(spec.rows_per_pale).max(w.div_ceil(spec.cols_per_pale));
            (n * spec.rows_per_pale, n * spec.cols_per_pale)
        }
        AttentionMode::PaleSequential => {
            if block_index % 2 == 0 {
                (div_ceil_mul(h, spec.rows_per_pale), w)
            } else {
                (h, div_ceil_mul(w, spec.cols_per_pale))
            }
        }
        _ => (
            div_ceil_mul(h, spec.rows_per_pale),
            div_ceil_mul(w, spec.cols_per_pale),
        ),
    };
    let (xp, mask) = pad_and_mask(tape, x, hp, wp, external)?;

    let (q, k, v) = tape.scoped("qkv", |t| qkv_generate(t, xp, params))?;

    let attended = match mode {
        AttentionMode::Global => {
            let coords: Vec<(usize, usize)> =
                (0..hp).flat_map(|y| (0..wp).map(move |x_| (y, x_))).collect();
            tape.scoped("attn", |t| {
                grouped_branch(t, q, k, v, (0, c), &[coords], params.heads, &mask)
            })?
        }
        AttentionMode::PaleVanilla => {
            // Pales overlap: a token sits in one pale through its row and
            // in another through its column. Attention runs over each whole
            // pale; a token's output is taken from the pale owning its row
            // (row coordinates lead in `pale_coords`), which tiles the map.
            let n = hp / spec.rows_per_pale;
            let row_tokens = spec.rows_per_pale * wp;
            let batch = tape.shape(q).b;
            tape.scoped("attn", |t| {
                let mut outputs = Vec::with_capacity(n);
                let mut row_coords = Vec::with_capacity(n);
                for g in 0..n {
                    let coords = pale_coords(hp, wp, &spec, g)?;
                    let rows = coords[..row_tokens].to_vec();
                    let flags = mask.flags_for(&coords);
                    if !flags.iter().any(|&f| f) {
                        outputs.push(t.leaf(Tensor::zeros(Shape::new(batch, row_tokens, 1, c))));
                        row_coords.push(rows);
                        continue;
                    }
                    let qg = t.gather_tokens(q, coords.clone())?;
                    let kg = t.gather_tokens(k, coords.clone())?;
                    let vg = t.gather_tokens(v, coords)?;
                    let all_valid = flags.iter().all(|&f| f);
                    let out = msa_group(
                        t,
                        qg,
                        kg,
                        vg,
                        params.heads,
                        (!all_valid).then_some(&flags[..]),
                    )?;
                    outputs.push(t.slice_tokens(out, 0, row_tokens)?);
                    row_coords.push(rows);
                }
                t.scatter_tokens(outputs, row_coords, hp, wp)
            })?
        }
        AttentionMode::PaleSequential => {
            let axis = if block_index % 2 == 0 { Axis::Row } else { Axis::Column };
            let groups = build_groups(hp, wp, &spec, axis)?;
            let label = if axis == Axis::Row { "row" } else { "col" };
            tape.scoped(label, |t| {
                grouped_branch(t, q, k, v, (0, c), &groups.groups, params.heads, &mask)
            })?
        }
        // channel-splitting family: parallel, axial, cross-shaped
        _ => {
            let half = c / 2;
            let half_heads = params.heads / 2;
            let rows = build_groups(hp, wp, &spec, Axis::Row)?;
            let cols = build_groups(hp, wp, &spec, Axis::Column)?;
            let y_r = tape.scoped("row", |t| {
                grouped_branch(t, q, k, v, (0, half), &rows.groups, half_heads, &mask)
            })?;
            let y_c = tape.scoped("col", |t| {
                grouped_branch(t, q, k, v, (half, half), &cols.groups, half_heads, &mask)
            })?;
            tape.concat_channels(&[y_r, y_c])?
        }
    };

    let projected = tape.scoped("proj", |t| {
        t.conv2d(attended, params.proj_weight, Some(params.proj_bias), (1, 1), (0, 0), 1)
    })?;

    if (hp, wp) == (h, w) {
        Ok(projected)
    } else {
        tape.crop_spatial(projected, h, w)
    }
}

/// Parallel PS-Attention: channel-halved row-wise plus column-wise MSA.
pub fn ps_attention_parallel<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &PartitionSpec,
    params: &AttentionParams<Var>,
    external: Option<&AttentionMask>,
) -> Result<Var> {
    attention_forward(tape, x, AttentionMode::PaleParallel, 0, spec, params, external)
}

/// Vanilla PS-Attention: full-width MSA over each whole pale.
pub fn ps_attention_vanilla<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &PartitionSpec,
    params: &AttentionParams<Var>,
    external: Option<&AttentionMask>,
) -> Result<Var> {
    attention_forward(tape, x, AttentionMode::PaleVanilla, 0, spec, params, external)
}

/// Run one attention layer outside any surrounding tape; returns the output
/// and its instrumentation trace (children: `qkv`, `row`/`col`/`attn`,
/// `proj`).
pub fn attention_forward_pure<T: Real>(
    x: &Tensor<T>,
    mode: AttentionMode,
    block_index: usize,
    spec: &PartitionSpec,
    params: &AttentionParams<Tensor<T>>,
    external: Option<&AttentionMask>,
) -> Result<(Tensor<T>, FlopTrace)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = params.map(&mut |t: &Tensor<T>| tape.leaf(t.clone()));
    let out = attention_forward(&mut tape, xv, mode, block_index, spec, &pv, external)?;
    let value = tape.value(out).clone();
    Ok((value, tape.take_trace()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_params<T: Real>(c: usize, heads: usize, separable: bool) -> AttentionParams<Tensor<T>> {
        let ident_pw = Tensor::from_fn(Shape::new(1, 1, c, c), |_, _, ci, co| {
            if ci == co {
                T::one()
            } else {
                T::zero()
            }
        });
        let center_dw = Tensor::from_fn(Shape::new(3, 3, 1, c), |ky, kx, _, _| {
            if ky == 1 && kx == 1 {
                T::one()
            } else {
                T::zero()
            }
        });
        let sep = SepConv {
            depthwise: separable.then(|| center_dw.clone()),
            pointwise: ident_pw.clone(),
            bias: Tensor::zeros(Shape::new(1, 1, 1, c)),
        };
        AttentionParams {
            query: sep.clone(),
            key: sep.clone(),
            value: sep,
            proj_weight: ident_pw,
            proj_bias: Tensor::zeros(Shape::new(1, 1, 1, c)),
            heads,
        }
    }

    #[test]
    fn identity_qkv_passes_input_through() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 4, 4, 6), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let params = identity_params::<f32>(6, 2, true);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = params.map(&mut |t| tape.leaf(t.clone()));
        let (q, _, _) = qkv_generate(&mut tape, xv, &pv).unwrap();
        assert_eq!(tape.value(q).data(), x.data());
    }

    #[test]
    fn zero_pointwise_kills_qkv() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 3, 3, 4), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let mut params = identity_params::<f32>(4, 2, true);
        params.query.pointwise = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let pv = params.map(&mut |t| tape.leaf(t.clone()));
        let (q, _, _) = qkv_generate(&mut tape, xv, &pv).unwrap();
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qkv_trace_matches_separable_cost() {
        // 3 * (9hwc + hwc^2) at (8, 8, 16) = 76_800
        let x = Tensor::<f32>::zeros(Shape::new(1, 8, 8, 16));
        let params = identity_params::<f32>(16, 2, true);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let pv = params.map(&mut |t| tape.leaf(t.clone()));
        tape.scoped("qkv", |t| qkv_generate(t, xv, &pv)).unwrap();
        assert_eq!(tape.trace().child("qkv").unwrap().conv, 76_800);
    }

    #[test]
    fn msa_single_token_returns_value() {
        let mut rng = Rng::new(3);
        let q = Tensor::<f32>::from_fn(Shape::new(2, 1, 1, 4), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let k = q.clone();
        let v = Tensor::<f32>::from_fn(Shape::new(2, 1, 1, 4), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v.clone()));
        let out = msa_group(&mut tape, qv, kv, vv, 2, None).unwrap();
        assert_eq!(tape.value(out).data(), v.data());
    }

    #[test]
    fn msa_identical_keys_average_values() {
        // all K rows equal -> uniform weights -> output = mean of V rows
        let n = 5;
        let k = Tensor::<f64>::filled(Shape::new(1, n, 1, 2), 0.7);
        let q = Tensor::<f64>::filled(Shape::new(1, n, 1, 2), -0.3);
        let v = Tensor::<f64>::from_fn(Shape::new(1, n, 1, 2), |_, t, _, ch| (t * 2 + ch) as f64);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v.clone()));
        let out = msa_group(&mut tape, qv, kv, vv, 1, None).unwrap();
        for t in 0..n {
            for ch in 0..2 {
                let mean: f64 = (0..n).map(|j| v.at(0, j, 0, ch)).sum::<f64>() / n as f64;
                assert!((tape.value(out).at(0, t, 0, ch) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_rejects_fully_masked() {
        let q = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 2));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(q.clone()), tape.leaf(q));
        let r = msa_group(&mut tape, qv, kv, vv, 1, Some(&[false, false]));
        assert!(matches!(r, Err(Error::FullyMasked { .. })));
    }

    #[test]
    fn parallel_output_shape_matches_input() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::from_fn(Shape::new(2, 14, 14, 64), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let mut prng = Rng::new(5);
        let params = AttentionParams::<Tensor<f32>>::init(64, 4, true, &mut prng);
        let spec = PartitionSpec::pale(7, 7);
        let (y, _) =
            attention_forward_pure(&x, AttentionMode::PaleParallel, 0, &spec, &params, None)
                .unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }

    #[test]
    fn parallel_rejects_odd_channels_and_single_head() {
        let mut rng = Rng::new(6);
        let x6 = Tensor::<f32>::zeros(Shape::new(1, 4, 4, 6));
        let spec = PartitionSpec::pale(2, 2);
        let odd_heads = AttentionParams::<Tensor<f32>>::init(6, 3, true, &mut rng);
        assert!(
            attention_forward_pure(&x6, AttentionMode::PaleParallel, 0, &spec, &odd_heads, None)
                .is_err()
        );

        let x5 = Tensor::<f32>::zeros(Shape::new(1, 4, 4, 5));
        let odd_c = AttentionParams::<Tensor<f32>>::init(5, 1, true, &mut rng);
        assert!(
            attention_forward_pure(&x5, AttentionMode::PaleParallel, 0, &spec, &odd_c, None)
                .is_err()
        );
    }

    #[test]
    fn sequential_alternates_axes() {
        let mut rng = Rng::new(9);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 6, 6, 8), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let mut prng = Rng::new(10);
        let params = AttentionParams::<Tensor<f32>>::init(8, 2, true, &mut prng);
        let spec = PartitionSpec::pale(3, 3);
        let (even, even_trace) =
            attention_forward_pure(&x, AttentionMode::PaleSequential, 0, &spec, &params, None)
                .unwrap();
        let (odd, odd_trace) =
            attention_forward_pure(&x, AttentionMode::PaleSequential, 1, &spec, &params, None)
                .unwrap();
        assert!(even_trace.child("row").is_some());
        assert!(odd_trace.child("col").is_some());
        assert!(even.max_abs_diff(&odd) > 1e-6, "axes should differ on generic input");
    }

    #[test]
    fn axial_uses_unit_pale_regardless_of_spec() {
        let mut rng = Rng::new(11);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 4, 4, 8), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let mut prng = Rng::new(12);
        let params = AttentionParams::<Tensor<f32>>::init(8, 2, true, &mut prng);
        let (a, _) = attention_forward_pure(
            &x,
            AttentionMode::Axial,
            0,
            &PartitionSpec::pale(2, 2),
            &params,
            None,
        )
        .unwrap();
        let (b, _) = attention_forward_pure(
            &x,
            AttentionMode::PaleParallel,
            0,
            &PartitionSpec::pale(1, 1),
            &params,
            None,
        )
        .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn global_mode_uses_linear_qkv() {
        let mut rng = Rng::new(13);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 2, 2, 4), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let mut prng = Rng::new(14);
        let params = AttentionParams::<Tensor<f32>>::init(4, 2, false, &mut prng);
        let (_, trace) = attention_forward_pure(
            &x,
            AttentionMode::Global,
            0,
            &PartitionSpec::pale(1, 1),
            &params,
            None,
        )
        .unwrap();
        // 3hwc^2 = 3 * 4 * 16 = 192
        assert_eq!(trace.child("qkv").unwrap().conv, 192);
        assert_eq!(trace.child("proj").unwrap().conv, 64);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(15);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 8, 6, 8), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let mut prng = Rng::new(16);
        let params = AttentionParams::<Tensor<f32>>::init(8, 2, true, &mut prng);
        let spec = PartitionSpec::pale(4, 3);
        let (a, _) = attention_forward_pure(&x, AttentionMode::PaleParallel, 0, &spec, &params, None)
            .unwrap();
        let (b, _) = attention_forward_pure(&x, AttentionMode::PaleParallel, 0, &spec, &params, None)
            .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn trace_has_qkv_row_col_proj_phases() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 8, 8, 16));
        let mut prng = Rng::new(17);
        let params = AttentionParams::<Tensor<f32>>::init(16, 2, true, &mut prng);
        let spec = PartitionSpec::pale(2, 2);
        let (_, trace) =
            attention_forward_pure(&x, AttentionMode::PaleParallel, 0, &spec, &params, None)
                .unwrap();
        assert_eq!(trace.child("qkv").unwrap().conv, 76_800);
        // row branch: h * w^2 * c * s_r multiply-adds
        assert_eq!(trace.child("row").unwrap().matmul, (8 * 8 * 8 * 16 * 2) as u64);
        assert_eq!(trace.child("col").unwrap().matmul, (8 * 8 * 8 * 16 * 2) as u64);
        assert_eq!(trace.child("proj").unwrap().conv, (8 * 8 * 16 * 16) as u64);
    }
}
