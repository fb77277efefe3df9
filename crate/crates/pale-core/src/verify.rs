//! Runnable verification suites: oracle equivalence, gradient checks,
//! formula-trace exactness, partition properties, and the padding
//! contract. The CLI's `verify` command and the acceptance tests both
//! drive these.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{attention_forward_pure, AttentionMode, AttentionParams};
use crate::complexity::{flops_global_attention, flops_pale_attention, verify_against_trace};
use crate::gradcheck::grad_check;
use crate::oracle;
use crate::partition::{build_groups, pale_token_count, AttentionMask, Axis, PartitionSpec};
use crate::rng::Rng;
use crate::tensor::{Real, Shape, Tensor};
use crate::Result;

/// One violated invariant.
#[derive(Debug, Clone)]
pub struct Failure {
    pub invariant: String,
    pub detail: String,
}

/// Outcome of one suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub failures: Vec<Failure>,
    /// Human-readable observations (worst errors seen, grid sizes, ...).
    pub notes: Vec<String>,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self { name, checks: 0, failures: Vec::new(), notes: Vec::new() }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, invariant: &str, detail: String) {
        self.failures.push(Failure { invariant: invariant.to_string(), detail });
    }
}

/// Deliberate defect injection for negative-testing the suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Treat padded tokens as valid attention keys.
    SkipMask,
}

fn random_tensor<T: Real>(shape: Shape, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64(rng.uniform(-1.0, 1.0)))
}

fn mode_tag(mode: AttentionMode, block_index: usize) -> String {
    if mode == AttentionMode::PaleSequential {
        format!("{}[{}]", mode.name(), block_index)
    } else {
        mode.name().to_string()
    }
}

/// Grid selection for [`equivalence_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquivGrid {
    /// `(h, w)` in `{4..16}^2`, pale sizes 1, 2, 4, channels 8 and 16,
    /// heads 2 and 4.
    Full,
    /// A few padded shapes; enough to exercise every code path.
    Quick,
}

impl EquivGrid {
    fn extents(&self) -> Vec<usize> {
        match self {
            EquivGrid::Full => (4..=16).collect(),
            EquivGrid::Quick => vec![5, 8, 9],
        }
    }
}

/// Every attention mode against the brute-force oracle.
pub fn equivalence_suite<T: Real>(tolerance: f64, fault: Fault, grid: EquivGrid) -> SuiteReport {
    let mut report = SuiteReport::new("equiv");
    let mut rng = Rng::new(0x1eaf);
    let mut worst = 0.0f64;
    let extents = grid.extents();
    let channel_cases: &[(usize, usize)] = match grid {
        EquivGrid::Full => &[(8, 2), (8, 4), (16, 2), (16, 4)],
        EquivGrid::Quick => &[(8, 2)],
    };
    for &h in &extents {
        for &w in &extents {
            for s in [1usize, 2, 4] {
                for &(c, heads) in channel_cases {
                    let spec = PartitionSpec::pale(s, s);
                    let x: Tensor<T> = random_tensor(Shape::new(1, h, w, c), &mut rng);
                    for mode in AttentionMode::ALL {
                        if mode == AttentionMode::Axial && s != 1 {
                            continue; // axial ignores the pale size
                        }
                        let block_index = h % 2;
                        let mut prng = Rng::new((h * 31 + w * 7 + s + c + heads) as u64);
                        let params = AttentionParams::<Tensor<T>>::init(
                            c,
                            heads,
                            mode.separable_qkv(),
                            &mut prng,
                        );
                        report.checks += 1;
                        let fast = match fault {
                            Fault::None => {
                                attention_forward_pure(&x, mode, block_index, &spec, &params, None)
                            }
                            Fault::SkipMask => faulty_forward(&x, mode, block_index, &spec, &params),
                        };
                        let slow =
                            oracle::oracle_mode_forward(&x, mode, block_index, &spec, &params, None);
                        match (fast, slow) {
                            (Ok((fast, _)), Ok(slow)) => {
                                let diff = fast.max_abs_diff(&slow).as_f64();
                                worst = worst.max(diff);
                                if diff > tolerance {
                                    report.fail(
                                        "oracle equivalence",
                                        format!(
                                            "mode {} at h={h} w={w} s={s} c={c} heads={heads}: \
                                             max |fast - oracle| = {diff:e} > {tolerance:e} \
                                             (padding invariant: masked keys must not contribute)",
                                            mode_tag(mode, block_index)
                                        ),
                                    );
                                }
                            }
                            (fast, slow) => {
                                report.fail(
                                    "oracle equivalence",
                                    format!(
                                        "mode {} at h={h} w={w} s={s} c={c} heads={heads}: \
                                         fast={:?} oracle={:?}",
                                        mode_tag(mode, block_index),
                                        fast.map(|_| ()),
                                        slow.map(|_| ())
                                    ),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    report.notes.push(format!("worst |fast - oracle| = {worst:e} over {} runs", report.checks));
    report
}

/// The skip-mask fault: pre-pad the input and declare every token valid.
fn faulty_forward<T: Real>(
    x: &Tensor<T>,
    mode: AttentionMode,
    block_index: usize,
    spec: &PartitionSpec,
    params: &AttentionParams<Tensor<T>>,
) -> Result<(Tensor<T>, crate::trace::FlopTrace)> {
    let s = x.shape();
    let (s_r, s_c) = match mode {
        AttentionMode::Axial => (1, 1),
        _ => (spec.rows_per_pale, spec.cols_per_pale),
    };
    let (hp, wp) = match mode {
        AttentionMode::Global => (s.h, s.w),
        AttentionMode::PaleVanilla => {
            let n = s.h.div_ceil(s_r).max(s.w.div_ceil(s_c));
            (n * s_r, n * s_c)
        }
        AttentionMode::PaleSequential => {
            if block_index % 2 == 0 {
                (s.h.div_ceil(s_r) * s_r, s.w)
            } else {
                (s.h, s.w.div_ceil(s_c) * s_c)
            }
        }
        _ => (s.h.div_ceil(s_r) * s_r, s.w.div_ceil(s_c) * s_c),
    };
    let padded = crate::ops::pad_spatial(x, hp, wp)?;
    let all_valid = AttentionMask::all_valid(hp, wp);
    let (out, trace) =
        attention_forward_pure(&padded, mode, block_index, spec, params, Some(&all_valid))?;
    Ok((crate::ops::crop_spatial(&out, s.h, s.w)?, trace))
}

struct GradCase {
    name: &'static str,
    threshold: f64,
    error: f64,
}

/// Finite-difference checks of every primitive backward pass, every
/// attention mode, and a full block. 64-bit.
pub fn gradcheck_suite() -> SuiteReport {
    let mut report = SuiteReport::new("gradcheck");
    let mut rng = Rng::new(0x97ad);
    let eps = 1e-5;
    let mut cases: Vec<GradCase> = Vec::new();

    let run = |name: &'static str,
                   threshold: f64,
                   result: Result<f64>,
                   report: &mut SuiteReport,
                   cases: &mut Vec<GradCase>| {
        report.checks += 1;
        match result {
            Ok(error) => {
                cases.push(GradCase { name, threshold, error });
                if error > threshold {
                    report.fail(
                        "gradient check",
                        format!("{name}: rel err {error:e} > {threshold:e}"),
                    );
                }
            }
            Err(e) => report.fail("gradient check", format!("{name}: {e}")),
        }
    };

    // primitives
    let x = random_tensor::<f64>(Shape::new(1, 3, 1, 4), &mut rng);
    let y = random_tensor::<f64>(Shape::new(1, 4, 1, 5), &mut rng);
    run(
        "matmul",
        1e-6,
        grad_check(|t, vs| t.bmm_nn(vs[0], vs[1]), &[x, y], eps).map(|e| e),
        &mut report,
        &mut cases,
    );

    let x = random_tensor::<f64>(Shape::new(2, 5, 4, 4), &mut rng);
    let w = random_tensor::<f64>(Shape::new(3, 3, 2, 6), &mut rng);
    let b = random_tensor::<f64>(Shape::new(1, 1, 1, 6), &mut rng);
    run(
        "conv2d (stride 2, pad 1, groups 2)",
        1e-6,
        grad_check(|t, vs| t.conv2d(vs[0], vs[1], Some(vs[2]), (2, 1), (1, 1), 2), &[x, w, b], eps),
        &mut report,
        &mut cases,
    );

    let x = random_tensor::<f64>(Shape::new(1, 4, 1, 6), &mut rng);
    let mask = vec![true, false, true, true, false, true];
    run(
        "masked softmax",
        1e-6,
        grad_check(
            |t, vs| t.softmax_lastdim(vs[0], Some(mask.clone())),
            core::slice::from_ref(&x),
            eps,
        ),
        &mut report,
        &mut cases,
    );

    let x = random_tensor::<f64>(Shape::new(2, 2, 2, 5), &mut rng);
    let gamma = random_tensor::<f64>(Shape::new(1, 1, 1, 5), &mut rng);
    let beta = random_tensor::<f64>(Shape::new(1, 1, 1, 5), &mut rng);
    run(
        "layer_norm",
        1e-6,
        grad_check(|t, vs| t.layer_norm(vs[0], vs[1], vs[2], 1e-5), &[x, gamma, beta], eps),
        &mut report,
        &mut cases,
    );

    let x = random_tensor::<f64>(Shape::new(1, 3, 3, 4), &mut rng);
    run(
        "gelu + mean_pool",
        1e-6,
        grad_check(
            |t, vs| {
                let g = t.gelu(vs[0]);
                Ok(t.mean_pool_spatial(g))
            },
            core::slice::from_ref(&x),
            eps,
        ),
        &mut report,
        &mut cases,
    );

    let x = random_tensor::<f64>(Shape::new(1, 4, 4, 4), &mut rng);
    run(
        "gather/scatter + split/concat",
        1e-6,
        grad_check(
            |t, vs| {
                let c = t.shape(vs[0]).c;
                let a = t.slice_channels(vs[0], 0, c / 2)?;
                let b = t.slice_channels(vs[0], c / 2, c / 2)?;
                let cat = t.concat_channels(&[a, b])?;
                let g0: Vec<(usize, usize)> =
                    [0usize, 2].iter().flat_map(|&r| (0..4).map(move |col| (r, col))).collect();
                let g1: Vec<(usize, usize)> =
                    [1usize, 3].iter().flat_map(|&r| (0..4).map(move |col| (r, col))).collect();
                let t0 = t.gather_tokens(cat, g0.clone())?;
                let t1 = t.gather_tokens(cat, g1.clone())?;
                t.scatter_tokens(vec![t0, t1], vec![g0, g1], 4, 4)
            },
            core::slice::from_ref(&x),
            eps,
        ),
        &mut report,
        &mut cases,
    );

    let logits = random_tensor::<f64>(Shape::new(3, 1, 1, 4), &mut rng);
    run(
        "cross entropy",
        1e-6,
        grad_check(
            |t, vs| t.cross_entropy_mean(vs[0], vec![0, 2, 3]),
            core::slice::from_ref(&logits),
            eps,
        ),
        &mut report,
        &mut cases,
    );

    // every attention mode end to end at (4, 4, 8); weights rescaled to
    // O(1) so the score-path gradients stay clear of difference noise
    for mode in AttentionMode::ALL {
        let spec = PartitionSpec::pale(2, 2);
        let mut prng = Rng::new(77);
        let mut params =
            AttentionParams::<Tensor<f64>>::init(8, 2, mode.separable_qkv(), &mut prng);
        params.visit_mut("attn", &mut |_, t| {
            for v in t.data_mut() {
                *v = prng.uniform(-0.5, 0.5);
            }
        });
        let x = random_tensor::<f64>(Shape::new(1, 4, 4, 8), &mut rng);
        let name: &'static str = mode.name();
        run(
            name,
            1e-4,
            grad_check(
                |t, vs| {
                    let pv = params.map(&mut |tensor: &Tensor<f64>| t.leaf(tensor.clone()));
                    crate::attention::attention_forward(t, vs[0], mode, 0, &spec, &pv, None)
                },
                core::slice::from_ref(&x),
                eps,
            ),
            &mut report,
            &mut cases,
        );
    }

    // a full block, gradients wrt input and all block parameters
    {
        use crate::backbone::{pale_block, StageConfig, VariantConfig};
        let config = VariantConfig {
            stages: vec![StageConfig {
                merge_stride: 1,
                channels: 8,
                pale_size: 2,
                heads: 2,
                mlp_ratio: 2,
                depth: 1,
            }],
            num_classes: 2,
            in_channels: 8,
            mode: AttentionMode::PaleParallel,
            interlaced: true,
        };
        let model = crate::backbone::Model::<f64>::init(config.clone(), 31).unwrap();
        let mut block = model.params.stages[0].blocks[0].clone();
        let mut wrng = Rng::new(99);
        block.visit_mut("block", &mut |_, t| {
            for v in t.data_mut() {
                *v = wrng.uniform(-0.5, 0.5);
            }
        });
        let mut inputs: Vec<Tensor<f64>> = vec![random_tensor(Shape::new(1, 4, 4, 8), &mut rng)];
        block.visit("block", &mut |_, t: &Tensor<f64>| inputs.push(t.clone()));
        run(
            "full block (input + all parameters)",
            1e-4,
            grad_check(
                |t, vs| {
                    let mut i = 1usize;
                    let bv = block.map(&mut |_| {
                        let v = vs[i];
                        i += 1;
                        v
                    });
                    pale_block(t, vs[0], &bv, &config, &config.stages[0], 0)
                },
                &inputs,
                eps,
            ),
            &mut report,
            &mut cases,
        );
    }

    let worst = cases.iter().map(|c| c.error).fold(0.0, f64::max);
    report.notes.push(format!("worst rel err {worst:e} over {} cases", cases.len()));
    for c in &cases {
        report.notes.push(format!("{}: {:e} (limit {:e})", c.name, c.error, c.threshold));
    }
    report
}

/// Formula-vs-trace exactness over `(h, w)` in `{8, 14, 16}^2`, `c` in
/// `{16, 32}`, pale sizes 1, 2, and 7 (which forces padding for most
/// extents); plus the global formula on the same spatial grid.
pub fn flop_suite() -> SuiteReport {
    let mut report = SuiteReport::new("flops");
    let mut rng = Rng::new(0xf10b);
    for h in [8usize, 14, 16] {
        for w in [8usize, 14, 16] {
            for c in [16usize, 32] {
                for s in [1usize, 2, 7] {
                    let spec = PartitionSpec::pale(s, s);
                    let x: Tensor<f32> = random_tensor(Shape::new(1, h, w, c), &mut rng);
                    let mut prng = Rng::new((h + w + c + s) as u64);
                    let params = AttentionParams::<Tensor<f32>>::init(c, 2, true, &mut prng);
                    report.checks += 1;
                    let (hp, wp) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
                    let analytic = flops_pale_attention(hp, wp, c, s, s).unwrap();
                    match attention_forward_pure(
                        &x,
                        AttentionMode::PaleParallel,
                        0,
                        &spec,
                        &params,
                        None,
                    ) {
                        Ok((_, trace)) => {
                            let cmp = verify_against_trace(&analytic, &trace);
                            for term in cmp.failures() {
                                report.fail(
                                    "formula-trace exactness (pale)",
                                    format!(
                                        "h={h} w={w} c={c} s={s} (padded {hp}x{wp}): {} analytic \
                                         {} vs traced {}",
                                        term.term, term.analytic, term.traced
                                    ),
                                );
                            }
                        }
                        Err(e) => report.fail("formula-trace exactness (pale)", format!("{e}")),
                    }
                }

                // global attention on the same spatial extents
                let x: Tensor<f32> = random_tensor(Shape::new(1, h, w, c), &mut rng);
                let mut prng = Rng::new((h * w + c) as u64);
                let params = AttentionParams::<Tensor<f32>>::init(c, 2, false, &mut prng);
                report.checks += 1;
                let analytic = flops_global_attention(h, w, c);
                match attention_forward_pure(
                    &x,
                    AttentionMode::Global,
                    0,
                    &PartitionSpec::pale(1, 1),
                    &params,
                    None,
                ) {
                    Ok((_, trace)) => {
                        let cmp = verify_against_trace(&analytic, &trace);
                        for term in cmp.failures() {
                            report.fail(
                                "formula-trace exactness (global)",
                                format!(
                                    "h={h} w={w} c={c}: {} analytic {} vs traced {}",
                                    term.term, term.analytic, term.traced
                                ),
                            );
                        }
                    }
                    Err(e) => report.fail("formula-trace exactness (global)", format!("{e}")),
                }
            }
        }
    }
    report
}

/// Partition properties for every `h, w <= 32` and pale size `<= 8`:
/// bijection, the token-count formula against a brute-force union, equal
/// member intervals, and the axial / unit-pale structural identity.
pub fn partition_suite() -> SuiteReport {
    let mut report = SuiteReport::new("partition");
    for h in 1..=32usize {
        for w in 1..=32usize {
            for s_r in 1..=8usize {
                for s_c in 1..=8usize {
                    let hp = h.div_ceil(s_r) * s_r;
                    let wp = w.div_ceil(s_c) * s_c;
                    let spec = PartitionSpec::pale(s_r, s_c);
                    report.checks += 1;

                    let rows = match build_groups(hp, wp, &spec, Axis::Row) {
                        Ok(g) => g,
                        Err(e) => {
                            report.fail("partition bijection", format!("rows {hp}x{wp}: {e}"));
                            continue;
                        }
                    };
                    let cols = match build_groups(hp, wp, &spec, Axis::Column) {
                        Ok(g) => g,
                        Err(e) => {
                            report.fail("partition bijection", format!("cols {hp}x{wp}: {e}"));
                            continue;
                        }
                    };

                    for (axis, groups) in [("row", &rows), ("col", &cols)] {
                        let mut seen = BTreeSet::new();
                        let mut total = 0usize;
                        for coords in &groups.groups {
                            total += coords.len();
                            seen.extend(coords.iter().copied());
                        }
                        if total != hp * wp || seen.len() != hp * wp {
                            report.fail(
                                "partition bijection",
                                format!(
                                    "{axis} groups at {hp}x{wp} s=({s_r},{s_c}): {total} tokens, \
                                     {} unique",
                                    seen.len()
                                ),
                            );
                        }
                    }

                    // interlaced members keep a constant interval
                    let n_r = hp / s_r;
                    for (g, coords) in rows.groups.iter().enumerate() {
                        let mut member_rows: Vec<usize> = coords.iter().map(|&(r, _)| r).collect();
                        member_rows.dedup();
                        for (k, &r) in member_rows.iter().enumerate() {
                            if r != g + k * n_r {
                                report.fail(
                                    "constant interlace interval",
                                    format!("{hp}x{wp} s_r={s_r} group {g}: row {r} at slot {k}"),
                                );
                            }
                        }
                    }

                    // token-count formula against the measured union
                    if hp / s_r == wp / s_c {
                        let expected = pale_token_count(hp, wp, s_r, s_c).unwrap();
                        for g in 0..hp / s_r {
                            let union: BTreeSet<(usize, usize)> = rows.groups[g]
                                .iter()
                                .chain(cols.groups[g].iter())
                                .copied()
                                .collect();
                            if union.len() != expected {
                                report.fail(
                                    "pale token count",
                                    format!(
                                        "{hp}x{wp} s=({s_r},{s_c}) pale {g}: union {} vs formula \
                                         {expected}",
                                        union.len()
                                    ),
                                );
                            }
                        }
                    }
                }
            }

            // axial groups are structurally the unit-pale groups
            report.checks += 1;
            let axial_rows = build_groups(h, w, &PartitionSpec::axial(), Axis::Row).unwrap();
            let unit_rows = build_groups(h, w, &PartitionSpec::pale(1, 1), Axis::Row).unwrap();
            if axial_rows != unit_rows {
                report.fail("axial = pale(1,1)", format!("row groups differ at {h}x{w}"));
            }
        }
    }
    report
}

/// The padding contract:
/// 1. auto-padding equals running on a zero-embedded input with an
///    explicit mask (bitwise);
/// 2. garbage in the padded region beyond the depthwise halo never moves
///    valid outputs;
/// 3. for modes whose valid-token grouping is independent of the padded
///    extent (global, axial, cross-shaped), enlarging the padding leaves
///    valid outputs unchanged.
pub fn padding_suite<T: Real>(tolerance: f64) -> SuiteReport {
    let mut report = SuiteReport::new("padding");
    let mut rng = Rng::new(0x9add);

    let shapes = [(5usize, 6usize, 2usize), (9, 11, 4), (8, 8, 7), (6, 10, 4)];
    for (h, w, s) in shapes {
        let spec = PartitionSpec::pale(s, s);
        for mode in AttentionMode::ALL {
            if mode == AttentionMode::Global {
                continue; // global never pads; covered by the enlargement check
            }
            let c = 8;
            let x: Tensor<T> = random_tensor(Shape::new(1, h, w, c), &mut rng);
            let mut prng = Rng::new((h * w + s) as u64);
            let params =
                AttentionParams::<Tensor<T>>::init(c, 2, mode.separable_qkv(), &mut prng);
            let block_index = 0;

            let auto = attention_forward_pure(&x, mode, block_index, &spec, &params, None);

            // padded geometry of this mode
            let (hp, wp) = match mode {
                AttentionMode::PaleVanilla => {
                    let n = h.div_ceil(s).max(w.div_ceil(s));
                    (n * s, n * s)
                }
                AttentionMode::PaleSequential => (h.div_ceil(s) * s, w),
                AttentionMode::Axial => (h, w),
                _ => (h.div_ceil(s) * s, w.div_ceil(s) * s),
            };
            let embedded = crate::ops::pad_spatial(&x, hp, wp).unwrap();
            let mask = AttentionMask::padded(hp, wp, h, w);
            let manual = attention_forward_pure(&embedded, mode, block_index, &spec, &params, Some(&mask));

            report.checks += 1;
            match (&auto, &manual) {
                (Ok((a, _)), Ok((m, _))) => {
                    let m_valid = crate::ops::crop_spatial(m, h, w).unwrap();
                    let diff = a.max_abs_diff(&m_valid).as_f64();
                    if diff != 0.0 {
                        report.fail(
                            "embed equivalence",
                            format!("mode {} at {h}x{w} s={s}: diff {diff:e}", mode.name()),
                        );
                    }
                }
                _ => report.fail(
                    "embed equivalence",
                    format!("mode {} at {h}x{w} s={s}: run failed", mode.name()),
                ),
            }

            // garbage beyond the depthwise halo must not leak through the mask
            if hp > h + 1 || wp > w + 1 {
                let mut garbage = embedded.clone();
                let gs = garbage.shape();
                for b in 0..gs.b {
                    for y in 0..gs.h {
                        for x_ in 0..gs.w {
                            if y > h || x_ > w {
                                for ch in 0..gs.c {
                                    garbage.set(b, y, x_, ch, T::from_f64(rng.uniform(-9.0, 9.0)));
                                }
                            }
                        }
                    }
                }
                let dirty =
                    attention_forward_pure(&garbage, mode, block_index, &spec, &params, Some(&mask));
                report.checks += 1;
                match (&auto, &dirty) {
                    (Ok((a, _)), Ok((d, _))) => {
                        let d_valid = crate::ops::crop_spatial(d, h, w).unwrap();
                        let diff = a.max_abs_diff(&d_valid).as_f64();
                        if diff > tolerance {
                            report.fail(
                                "masked-key exactness",
                                format!(
                                    "mode {} at {h}x{w} s={s}: masked garbage moved valid outputs \
                                     by {diff:e}",
                                    mode.name()
                                ),
                            );
                        }
                    }
                    _ => report.fail(
                        "masked-key exactness",
                        format!("mode {} at {h}x{w} s={s}: run failed", mode.name()),
                    ),
                }
            }
        }
    }

    // enlarging the padding: stable for global / axial / cross-shaped
    for mode in [AttentionMode::Global, AttentionMode::Axial, AttentionMode::CrossShaped] {
        let (h, w, s) = (8usize, 8usize, 2usize);
        let spec = PartitionSpec::new(s, s, mode != AttentionMode::CrossShaped);
        let c = 8;
        let x: Tensor<T> = random_tensor(Shape::new(1, h, w, c), &mut rng);
        let mut prng = Rng::new(1234);
        let params = AttentionParams::<Tensor<T>>::init(c, 2, mode.separable_qkv(), &mut prng);

        let base = attention_forward_pure(&x, mode, 0, &spec, &params, None);
        let embedded = crate::ops::pad_spatial(&x, h + 2 * s, w + 2 * s).unwrap();
        let mask = AttentionMask::padded(h + 2 * s, w + 2 * s, h, w);
        let grown = attention_forward_pure(&embedded, mode, 0, &spec, &params, Some(&mask));
        report.checks += 1;
        match (base, grown) {
            (Ok((b, _)), Ok((g, _))) => {
                let g_valid = crate::ops::crop_spatial(&g, h, w).unwrap();
                let diff = b.max_abs_diff(&g_valid).as_f64();
                if diff > tolerance {
                    report.fail(
                        "padding-amount independence",
                        format!("mode {}: enlarged padding moved outputs by {diff:e}", mode.name()),
                    );
                }
            }
            _ => report.fail(
                "padding-amount independence",
                format!("mode {}: run failed", mode.name()),
            ),
        }
    }

    report
}

/// Run every suite at the given floating-point flavor.
pub fn run_all(tolerance_equiv: f64, tolerance_pad: f64) -> Vec<SuiteReport> {
    vec![
        equivalence_suite::<f32>(tolerance_equiv, Fault::None, EquivGrid::Full),
        gradcheck_suite(),
        flop_suite(),
        partition_suite(),
        padding_suite::<f32>(tolerance_pad),
    ]
}
