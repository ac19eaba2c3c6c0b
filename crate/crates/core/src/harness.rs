//! Error measurement and oracle-equality suites.
//!
//! Every suite is deterministic for a fixed seed: samples are drawn up front
//! from a seeded ChaCha stream and evaluated in parallel with an ordered
//! reduction.

use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{Metric, TransformerPipeline};
use crate::attention::{make_column_sum_attention, AttentionLayer};
use crate::error::{KstError, Result};
use crate::ffn::{FfnBlock, VectorNet};
use crate::inner::{inner_matrix_reference, make_scaling_segmentation, phi_k_reference, synth_sr_block, FlawReport, InnerVariant};
use crate::matrix::Matrix;
use crate::memo::{build_label_table, decode_index, MemoBackend, DEFAULT_ENUM_CAP};
use crate::scalar::{f64_to_rational, pow_int, pow_rational, rational_to_f64, ActivationKind, Mode, Scalar};
use crate::target::TargetOracle;

/// Float-mode comparison tolerance.
pub const FLOAT_TOL: f64 = 1e-9;
const DISCREPANCY_LIMIT: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn extend(&mut self, other: SuiteReport) {
        self.checks.extend(other.checks);
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| KstError::Parse(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let name_w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:<name_w$} {:>14} {:>14}  detail", "status", "check", "measured", "threshold");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<6} {:<name_w$} {:>14.6e} {:>14.6e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.threshold,
                c.detail
            );
        }
        out
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Matrix<f64> {
    Matrix::from_fn(d, n, |_, _| rng.gen::<f64>())
}

fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DinfReport {
    pub sup: f64,
    pub argmax: Vec<Vec<f64>>,
    pub points: usize,
    pub mode: Mode,
    /// Grid probing covers every memorization cell and the outer block only
    /// reads the first `K` digits, so the grid sup is the true sup.
    pub certified: bool,
}

/// Sup deviation over a tensor grid with spacing `1/grid_per_axis` (endpoints
/// included) plus `extra_random` uniform points.
pub fn measure_dinf(
    pipeline: &TransformerPipeline,
    f: &TargetOracle,
    grid_per_axis: usize,
    extra_random: usize,
    seed: u64,
) -> Result<DinfReport> {
    if grid_per_axis < 2 {
        return Err(KstError::OutOfDomain("grid_per_axis must be at least 2".into()));
    }
    let (d, n) = f.shape();
    let axis = grid_per_axis + 1;
    let total = (axis as u64).checked_pow((d * n) as u32).filter(|t| *t <= DEFAULT_ENUM_CAP).ok_or_else(|| {
        KstError::CapExceeded {
            what: "grid points".into(),
            value: format!("{axis}^{}", d * n),
            cap: DEFAULT_ENUM_CAP.to_string(),
        }
    })?;
    let mut points: Vec<Matrix<f64>> = (0..total)
        .map(|mut i| {
            Matrix::from_fn(d, n, |_, _| {
                let v = (i % axis as u64) as f64 / grid_per_axis as f64;
                i /= axis as u64;
                v
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    points.extend((0..extra_random).map(|_| random_matrix(&mut rng, d, n)));

    let outputs = pipeline.eval_batch(&points)?;
    let devs = points
        .par_iter()
        .zip(outputs.par_iter())
        .map(|(x, g)| Ok(max_abs_diff(g, &f.evaluate(x)?)))
        .collect::<Result<Vec<f64>>>()?;
    let (best, sup) = devs.iter().enumerate().fold((0, 0.0), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    let mode = pipeline.preferred_mode();
    let cell_grid = grid_per_axis as u64 >= 1u64 << pipeline.params.k.min(63);
    Ok(DinfReport {
        sup,
        argmax: points[best].to_rows(),
        points: points.len(),
        mode,
        certified: mode == Mode::Exact
            && pipeline.params.memo_backend == MemoBackend::Bitpack
            && pipeline.params.inner_variant == InnerVariant::Floor
            && cell_grid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpReport {
    pub estimate: f64,
    pub std_error: f64,
    /// Estimate of `d_p^p`, the integral itself.
    pub integral: f64,
    pub integral_std_error: f64,
    pub samples: usize,
}

fn dp_from_samples(values: &[f64], p: f64) -> DpReport {
    let count = values.len() as f64;
    let mean = values.iter().sum::<f64>() / count;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0).max(1.0);
    let se = (var / count).sqrt();
    let estimate = mean.powf(1.0 / p);
    // Delta method on I -> I^(1/p).
    let std_error = if mean > 0.0 { mean.powf(1.0 / p - 1.0) * se / p } else { 0.0 };
    DpReport { estimate, std_error, integral: mean, integral_std_error: se, samples: values.len() }
}

pub fn measure_dp(pipeline: &TransformerPipeline, f: &TargetOracle, p: f64, n_samples: usize, seed: u64) -> Result<DpReport> {
    let (d, n) = f.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Matrix<f64>> = (0..n_samples).map(|_| random_matrix(&mut rng, d, n)).collect();
    let outputs = pipeline.eval_batch(&points)?;
    measure_dp_with(&points, &outputs, f, p)
}

/// `d_p` between precomputed outputs and `f`; exposed for closed-form checks.
pub fn measure_dp_with(points: &[Matrix<f64>], outputs: &[Matrix<f64>], f: &TargetOracle, p: f64) -> Result<DpReport> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(KstError::OutOfDomain(format!("p = {p} outside [1, inf)")));
    }
    if points.len() < 2 {
        return Err(KstError::OutOfDomain("need at least 2 samples".into()));
    }
    let values = points
        .par_iter()
        .zip(outputs.par_iter())
        .map(|(x, g)| Ok(g.iter().zip(f.evaluate(x)?.iter()).map(|(a, b)| (a - b).abs().powf(p)).sum::<f64>()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(dp_from_samples(&values, p))
}

/// Right side of the L^p decomposition:
/// `dn (g_range/2^H + 2^beta Q / 2^((K+2) beta))^p + d^2 n^2 (B_sigma + f_max)^p / 2^(K beta p)`.
pub fn lp_decomposition_bound(pipeline: &TransformerPipeline) -> Result<f64> {
    let c = &pipeline.params;
    let p = c.metric.p().ok_or_else(|| KstError::IncompatibleVariant("decomposition bound needs an L^p metric".into()))?;
    let dn = (c.d * c.n) as f64;
    let (k, h) = (c.k as f64, c.h as f64);
    let local = c.g_range() / h.exp2() + c.beta.exp2() * c.q / ((k + 2.0) * c.beta).exp2();
    Ok(dn * local.powf(p) + dn * dn * (c.b_sigma + c.f_max).powf(p) / (k * c.beta * p).exp2())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlawMeasure {
    pub fraction: f64,
    pub samples: usize,
    /// `2^(-K beta p)`, when a flaw report was supplied.
    pub budget: Option<f64>,
    /// Deviations at points outside the reported flaw intervals.
    pub unflagged_mismatches: usize,
}

/// Fraction of uniform `x` in [0,1] where a scalar inner network differs
/// from `phi_K` by more than `1e-12`.
pub fn estimate_flaw_measure(
    net: &VectorNet,
    k: usize,
    dn: usize,
    n_samples: usize,
    seed: u64,
    flaw: Option<&FlawReport>,
) -> Result<FlawMeasure> {
    let lowered = net.block().lower::<BigRational>()?;
    let tol = f64_to_rational(1e-12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n_samples).map(|_| rng.gen()).collect();
    let outcomes = xs
        .par_iter()
        .map(|x| {
            let exact = f64_to_rational(*x)?;
            let got = lowered.eval(&Matrix::filled(1, 1, exact.clone()))?;
            let want = phi_k_reference(&exact, k, dn)?;
            let bad = (got.get(0, 0) - want).abs() > tol;
            let flagged = flaw.is_some_and(|fr| fr.contains(&exact));
            Ok((bad, bad && !flagged))
        })
        .collect::<Result<Vec<(bool, bool)>>>()?;
    let bad = outcomes.iter().filter(|o| o.0).count();
    Ok(FlawMeasure {
        fraction: bad as f64 / n_samples.max(1) as f64,
        samples: n_samples,
        budget: flaw.map(|fr| fr.budget),
        unflagged_mismatches: outcomes.iter().filter(|o| o.1).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerReport {
    pub variant: InnerVariant,
    pub checked: usize,
    pub mismatches: usize,
    /// Points skipped because they lie in a reported flaw interval.
    pub flaw_hits: usize,
    pub first_failure: Option<String>,
    pub passed: bool,
}

/// Blocks producing the inner matrix, exactly as the pipeline runs them.
pub struct InnerStages<'a> {
    pub sr_block: &'a FfnBlock,
    pub attention: &'a AttentionLayer,
    pub scale_seg: &'a FfnBlock,
    pub flaw: Option<&'a FlawReport>,
}

/// Network inner matrix against the reference on every `K`-bit dyadic cell
/// corner (plus the all-ones input) and `n_random` uniform points.
pub fn verify_inner_stages(
    stages: &InnerStages<'_>,
    k: usize,
    d: usize,
    n: usize,
    variant: InnerVariant,
    n_random: usize,
    seed: u64,
) -> Result<InnerReport> {
    let dn = d * n;
    let sr = stages.sr_block.lower::<BigRational>()?;
    let attn = stages.attention.lower::<BigRational>()?;
    let scale = stages.scale_seg.lower::<BigRational>()?;
    let kdn = k * dn;
    if kdn >= 24 {
        return Err(KstError::CapExceeded { what: "dyadic cells 2^(Kdn)".into(), value: format!("2^{kdn}"), cap: "2^23".into() });
    }
    let step = pow_rational(2, -(k as i64));
    let mut points: Vec<Matrix<Scalar>> = (0..1u64 << kdn)
        .map(|mut i| {
            Matrix::from_fn(d, n, |_, _| {
                let v = BigRational::from_integer(BigInt::from(i % (1 << k))) * &step;
                i >>= k;
                Scalar::Exact(v)
            })
        })
        .collect();
    points.push(Matrix::filled(d, n, Scalar::int(1)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_random {
        let x = random_matrix(&mut rng, d, n);
        points.push(x.try_map(|v| f64_to_rational(*v).map(Scalar::Exact))?);
    }

    let outcomes = points
        .par_iter()
        .map(|x| -> Result<Option<Option<String>>> {
            if let Some(fr) = stages.flaw {
                if fr.contains_any(x)? {
                    return Ok(None);
                }
            }
            let xr: Matrix<BigRational> = x.read()?;
            let z = scale.eval(&attn.eval(&sr.eval(&xr)?)?)?;
            let want = inner_matrix_reference(x, k, d, n)?;
            let mismatch = (0..d)
                .flat_map(|r| (0..n).map(move |c| (r, c)))
                .find(|(r, c)| want.get(*r, *c).as_exact() != Some(z.get(*r, *c)));
            Ok(Some(mismatch.map(|(r, c)| {
                format!(
                    "X = {:?}: Z[{},{}] = {} but reference gives {}",
                    x.to_f64().to_rows(),
                    r + 1,
                    c + 1,
                    z.get(r, c),
                    want.get(r, c)
                )
            })))
        })
        .collect::<Result<Vec<_>>>()?;
    let flaw_hits = outcomes.iter().filter(|o| o.is_none()).count();
    let failures: Vec<&String> = outcomes.iter().flatten().flatten().collect();
    Ok(InnerReport {
        variant,
        checked: points.len() - flaw_hits,
        mismatches: failures.len(),
        flaw_hits,
        first_failure: failures.first().map(|s| s.to_string()),
        passed: failures.is_empty(),
    })
}

/// Synthesizes fresh inner stages and checks them against the reference.
#[allow(clippy::too_many_arguments)]
pub fn verify_inner_equality(
    k: usize,
    d: usize,
    n: usize,
    variant: InnerVariant,
    n_random: usize,
    seed: u64,
    p: f64,
    beta: f64,
) -> Result<InnerReport> {
    let (sr_block, flaw) = synth_sr_block(k, d, n, variant, p, beta)?;
    let attention = make_column_sum_attention(d, n);
    let scale_seg = make_scaling_segmentation(k, d, n);
    let stages = InnerStages { sr_block: &sr_block, attention: &attention, scale_seg: &scale_seg, flaw: flaw.as_ref() };
    verify_inner_stages(&stages, k, d, n, variant, n_random, seed)
}

pub fn verify_pipeline_inner(pipeline: &TransformerPipeline, n_random: usize, seed: u64) -> Result<InnerReport> {
    let c = &pipeline.params;
    let stages = InnerStages {
        sr_block: &pipeline.sr_block,
        attention: &pipeline.attention,
        scale_seg: &pipeline.scale_seg,
        flaw: pipeline.manifest.flaw.as_ref(),
    };
    verify_inner_stages(&stages, c.k, c.d, c.n, c.inner_variant, n_random, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub m: String,
    pub s: usize,
    pub r: usize,
    pub expected: f64,
    pub got: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoReport {
    pub checked: usize,
    pub exhaustive: bool,
    pub max_deviation: f64,
    pub bound: f64,
    pub discrepancies: Vec<Discrepancy>,
    pub passed: bool,
}

/// Pipeline output at every memorization point `X_trunc` against the stored
/// label. Bitpack is held to `(g_max - g_min) 2^(-H)` in exact arithmetic,
/// winding to its achieved tolerance. Exhaustive when `|Lambda| <= max_points`.
pub fn verify_memo(pipeline: &TransformerPipeline, f: &TargetOracle, max_points: usize, seed: u64) -> Result<MemoReport> {
    let c = &pipeline.params;
    let labels = build_label_table(f, c.k, c.anchor, DEFAULT_ENUM_CAP)?;
    // One evaluation covers all n columns of a cell, so walk column 1.
    let firsts: Vec<usize> = (0..labels.entries.len()).filter(|i| labels.entries[*i].s == 1).collect();
    let budget = (max_points / c.n).max(1);
    let exhaustive = firsts.len() <= budget;
    let chosen: Vec<usize> = if exhaustive {
        firsts
    } else {
        let mut picks: Vec<usize> =
            sample(&mut ChaCha8Rng::seed_from_u64(seed), firsts.len(), budget).into_iter().map(|i| firsts[i]).collect();
        picks.sort_unstable();
        picks
    };
    let block = pow_int(3, c.kdn() as u64);
    let exact = pipeline.preferred_mode() == Mode::Exact;
    let bound_exact = (f64_to_rational(c.g_max)? - f64_to_rational(c.g_min)?) * pow_rational(2, -(c.h as i64));
    let bound = if c.memo_backend == MemoBackend::Bitpack || c.g_range() == 0.0 {
        rational_to_f64(&bound_exact)
    } else {
        pipeline.manifest.winding.iter().map(|w| w.achieved_delta).fold(0.0, f64::max) + FLOAT_TOL
    };
    let compiled_exact = if exact { Some(pipeline.compile::<BigRational>()?) } else { None };
    let compiled_float = if exact { None } else { Some(pipeline.compile::<f64>()?) };

    let per_point = chosen
        .par_iter()
        .map(|idx| -> Result<Vec<(f64, bool, Discrepancy)>> {
            let entry = &labels.entries[*idx];
            let point = decode_index(&entry.m, c.k, c.d, c.n)?;
            let out: Matrix<f64> = match (&compiled_exact, &compiled_float) {
                (Some(ce), _) => {
                    let out = ce.eval(&point.x_trunc.read()?)?;
                    let mut flags = Vec::new();
                    for col in 0..c.n {
                        let m = &entry.m + &block * BigInt::from(col);
                        let e = labels.lookup(&m).ok_or_else(|| KstError::NotInLambda(m.to_string()))?;
                        for r in 0..c.d {
                            let diff = (out.get(r, col) - f64_to_rational(e.values[r])?).abs();
                            flags.push((
                                rational_to_f64(&diff),
                                diff <= bound_exact,
                                Discrepancy {
                                    m: m.to_string(),
                                    s: col + 1,
                                    r: r + 1,
                                    expected: e.values[r],
                                    got: rational_to_f64(out.get(r, col)),
                                },
                            ));
                        }
                    }
                    return Ok(flags);
                }
                (None, Some(cf)) => cf.eval(&point.x_trunc.to_f64())?,
                (None, None) => unreachable!("one backend is always compiled"),
            };
            let mut flags = Vec::new();
            for col in 0..c.n {
                let m = &entry.m + &block * BigInt::from(col);
                let e = labels.lookup(&m).ok_or_else(|| KstError::NotInLambda(m.to_string()))?;
                for r in 0..c.d {
                    let diff = (out.get(r, col) - e.values[r]).abs();
                    flags.push((
                        diff,
                        diff <= bound,
                        Discrepancy { m: m.to_string(), s: col + 1, r: r + 1, expected: e.values[r], got: *out.get(r, col) },
                    ));
                }
            }
            Ok(flags)
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<(f64, bool, Discrepancy)> = per_point.into_iter().flatten().collect();
    let max_deviation = flat.iter().map(|f| f.0).fold(0.0, f64::max);
    let discrepancies: Vec<Discrepancy> = flat.iter().filter(|f| !f.1).take(DISCREPANCY_LIMIT).map(|f| f.2.clone()).collect();
    Ok(MemoReport {
        checked: flat.len(),
        exhaustive,
        max_deviation,
        bound,
        passed: discrepancies.is_empty(),
        discrepancies,
    })
}

/// Copy of a bitpack pipeline with bit `m` of the stored digit `i` (0-based)
/// of row `r` flipped. Used to check that the suites catch corruption.
pub fn flip_memo_bit(pipeline: &TransformerPipeline, r: usize, i: usize, m: u64) -> Result<TransformerPipeline> {
    let c = &pipeline.params;
    if c.memo_backend != MemoBackend::Bitpack || c.g_range() == 0.0 {
        return Err(KstError::IncompatibleVariant("only a non-constant bitpack outer block stores bits".into()));
    }
    let m_total: u64 = pipeline.manifest.m_total.parse().map_err(|_| KstError::Parse("m_total".into()))?;
    if r >= c.d || i >= c.h || m == 0 || m > m_total {
        return Err(KstError::OutOfRange(format!("bit (r={r}, i={i}, m={m}) not stored")));
    }
    let mut layers = pipeline.outer_block.layers().to_vec();
    let unit = 2 * (r * c.h + i);
    let theta = layers[2].weight.get(unit, r).to_rational()?;
    let place = BigInt::from(2u8).pow((m_total - m) as u32);
    let set = (theta.to_integer() / &place) % BigInt::from(2u8) == BigInt::from(1u8);
    let delta = BigRational::from_integer(if set { -place } else { place });
    let flipped = theta + delta;
    layers[2].weight.set(unit, r, Scalar::Exact(flipped.clone()));
    layers[2].weight.set(unit + 1, r, Scalar::Exact(flipped / BigInt::from(2u8)));
    let mut out = pipeline.clone();
    out.outer_block = FfnBlock::new(layers, c.n)?;
    debug_assert_eq!(out.outer_block.layers()[2].activations[0], ActivationKind::Floor);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Inner,
    Memo,
    E2e,
    All,
}

impl std::str::FromStr for Suite {
    type Err = KstError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(Suite::Inner),
            "memo" => Ok(Suite::Memo),
            "e2e" => Ok(Suite::E2e),
            "all" => Ok(Suite::All),
            other => Err(KstError::Parse(format!("unknown suite '{other}' (inner, memo, e2e, all)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub inner_random: usize,
    pub memo_points: usize,
    pub dinf_random: usize,
    pub dp_samples: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { seed: 0, inner_random: 200, memo_points: 1000, dinf_random: 1000, dp_samples: 10_000 }
    }
}

pub fn run_suite(pipeline: &TransformerPipeline, f: &TargetOracle, suite: Suite, opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let c = &pipeline.params;
    if matches!(suite, Suite::Inner | Suite::All) {
        let inner = verify_pipeline_inner(pipeline, opts.inner_random, opts.seed)?;
        report.checks.push(CheckResult {
            name: "inner_matrix".into(),
            passed: inner.passed,
            measured: inner.mismatches as f64,
            threshold: 0.0,
            detail: match &inner.first_failure {
                Some(s) => s.clone(),
                None => format!("{} points exact ({} in flaw set skipped)", inner.checked, inner.flaw_hits),
            },
        });
    }
    if matches!(suite, Suite::Memo | Suite::All) {
        let memo = verify_memo(pipeline, f, opts.memo_points, opts.seed)?;
        let detail = match memo.discrepancies.first() {
            Some(x) => format!("m = {}, s = {}, r = {}: expected {} got {}", x.m, x.s, x.r, x.expected, x.got),
            None => format!("{} entries{}", memo.checked, if memo.exhaustive { ", exhaustive" } else { ", sampled" }),
        };
        report.checks.push(CheckResult {
            name: "memorization".into(),
            passed: memo.passed,
            measured: memo.max_deviation,
            threshold: memo.bound,
            detail,
        });
    }
    if matches!(suite, Suite::E2e | Suite::All) {
        match c.metric {
            Metric::Linf => {
                let grid = 1usize << (c.k + 2);
                let r = measure_dinf(pipeline, f, grid, opts.dinf_random, opts.seed)?;
                report.checks.push(CheckResult {
                    name: "d_inf".into(),
                    passed: r.sup <= c.epsilon,
                    measured: r.sup,
                    threshold: c.epsilon,
                    detail: format!(
                        "{} points, argmax {:?}, {}",
                        r.points,
                        r.argmax,
                        if r.certified { "certified" } else { "sampled, not certified" }
                    ),
                });
            }
            Metric::Lp(p) => {
                let r = measure_dp(pipeline, f, p, opts.dp_samples, opts.seed)?;
                let limit = c.epsilon + 3.0 * r.std_error;
                report.checks.push(CheckResult {
                    name: "d_p".into(),
                    passed: r.estimate <= limit,
                    measured: r.estimate,
                    threshold: limit,
                    detail: format!("p = {p}, {} samples, std error {:.3e}", r.samples, r.std_error),
                });
                let bound = lp_decomposition_bound(pipeline)?;
                let limit = bound + 3.0 * r.integral_std_error;
                report.checks.push(CheckResult {
                    name: "lp_decomposition".into(),
                    passed: r.integral <= limit,
                    measured: r.integral,
                    threshold: limit,
                    detail: format!("d_p^p against decomposition bound {bound:.6e}"),
                });
            }
        }
    }
    Ok(report)
}

/// Largest `|x - y|` over entries; used where exact zero is required.
pub fn exact_max_diff(a: &Matrix<BigRational>, b: &Matrix<BigRational>) -> BigRational {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(BigRational::zero(), |m, v| if v > m { v } else { m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{build_transformer, BuildOptions};
    use crate::inner::{synth_inner_floor, synth_inner_relu};
    use crate::memo::LabelAnchor;

    fn mean_pipeline(metric: Metric, variant: InnerVariant, anchor: LabelAnchor) -> (TransformerPipeline, TargetOracle) {
        let f = TargetOracle::mean(1, 2).unwrap();
        let opts = BuildOptions { anchor, ..BuildOptions::default() };
        let eps = if metric == Metric::Linf { 0.25 } else { 0.5 };
        (build_transformer(&f, eps, metric, variant, MemoBackend::Bitpack, 0, &opts).unwrap(), f)
    }

    #[test]
    fn constant_pipeline_has_zero_error() {
        let f = TargetOracle::constant(1, 2, 0.7).unwrap();
        let p = build_transformer(&f, 0.5, Metric::Linf, InnerVariant::Floor, MemoBackend::Bitpack, 0, &BuildOptions::default()).unwrap();
        assert_eq!(measure_dinf(&p, &f, 8, 50, 0).unwrap().sup, 0.0);
        assert_eq!(measure_dp(&p, &f, 2.0, 1000, 0).unwrap().estimate, 0.0);
    }

    #[test]
    fn dp_of_constant_offset_matches_closed_form() {
        // f = 0 against g = c: the integral is dn |c|^p exactly.
        let f = TargetOracle::constant(2, 2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Matrix<f64>> = (0..1000).map(|_| random_matrix(&mut rng, 2, 2)).collect();
        let outputs = vec![Matrix::filled(2, 2, 0.3); 1000];
        let r = measure_dp_with(&points, &outputs, &f, 3.0).unwrap();
        assert!((r.estimate - 4f64.powf(1.0 / 3.0) * 0.3).abs() < 1e-12);
        assert!(r.std_error < 1e-12);
    }

    #[test]
    fn dp_is_deterministic_under_seed() {
        let (p, f) = mean_pipeline(Metric::Lp(2.0), InnerVariant::Relu, LabelAnchor::Center);
        assert_eq!(measure_dp(&p, &f, 2.0, 1000, 9).unwrap(), measure_dp(&p, &f, 2.0, 1000, 9).unwrap());
    }

    #[test]
    fn mean_pipeline_within_epsilon_and_flip_is_caught() {
        let (p, f) = mean_pipeline(Metric::Linf, InnerVariant::Floor, LabelAnchor::Center);
        let r = measure_dinf(&p, &f, 16, 200, 1).unwrap();
        assert!(r.sup <= 0.25 && r.certified);
        // Leading digit has weight g_range / 2, well above the memorization bound.
        let bad = flip_memo_bit(&p, 0, 0, 1).unwrap();
        let r = measure_dinf(&bad, &f, 16, 0, 1).unwrap();
        let before = measure_dinf(&p, &f, 16, 0, 1).unwrap();
        assert!(r.sup >= p.params.g_range() * (-(p.params.h as f64)).exp2());
        assert_ne!(r.sup, before.sup);
        let memo = verify_memo(&bad, &f, 1000, 0).unwrap();
        assert!(!memo.passed);
        assert_eq!(memo.discrepancies[0].m, "1");
    }

    #[test]
    fn memo_bound_holds_on_corner_labels() {
        let (p, f) = mean_pipeline(Metric::Linf, InnerVariant::Floor, LabelAnchor::Corner);
        let memo = verify_memo(&p, &f, 1000, 0).unwrap();
        assert!(memo.passed && memo.exhaustive);
        assert_eq!(memo.checked, 32);
        assert!(memo.max_deviation <= p.params.g_range() / 8.0);
        assert_eq!(memo.bound, p.params.g_range() / 8.0);
    }

    #[test]
    fn inner_equality_small_cases() {
        let r = verify_inner_equality(1, 1, 1, InnerVariant::Floor, 100, 0, 1.0, 1.0).unwrap();
        assert!(r.passed && r.checked == 3 + 100);
        let r = verify_inner_equality(2, 1, 2, InnerVariant::Relu, 100, 0, 1.0, 1.0).unwrap();
        assert!(r.passed, "{:?}", r.first_failure);
    }

    #[test]
    fn flaw_measure_small_cases() {
        let floor = synth_inner_floor(2, 1, 2);
        assert_eq!(estimate_flaw_measure(&floor, 2, 2, 2000, 0, None).unwrap().fraction, 0.0);
        let (relu, fr) = synth_inner_relu(2, 1, 2, 1.0, 1.0).unwrap();
        let m = estimate_flaw_measure(&relu, 2, 2, 5000, 0, Some(&fr)).unwrap();
        assert!(m.fraction <= 1.5 * fr.budget);
        assert_eq!(m.unflagged_mismatches, 0);
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn text_report_has_one_line_per_check() {
        let (p, f) = mean_pipeline(Metric::Linf, InnerVariant::Floor, LabelAnchor::Center);
        let opts = SuiteOptions { inner_random: 20, dinf_random: 50, ..SuiteOptions::default() };
        let report = run_suite(&p, &f, Suite::All, &opts).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        assert_eq!(report.to_text().lines().count(), 1 + report.checks.len());
    }
}
