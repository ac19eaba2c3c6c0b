//! Memory indices, labels and memorization networks for the outer block.
//!
//! A memory index `m` is an integer whose base-3 digits (after removing the
//! column shift) are all 0 or 2; each digit 2 marks one binary digit of one
//! input entry. The outer block maps every index to its label.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KstError, Result};
use crate::ffn::{block_diagonal, FfnBlock, Layer};
use crate::matrix::Matrix;
use crate::scalar::{f64_to_rational, pow_int, pow_rational, ActivationKind, AnalyticFn, Arith, Scalar, Transcendental};
use crate::target::TargetOracle;

pub const DEFAULT_ENUM_CAP: u64 = 1 << 20;
pub const DEFAULT_BITPACK_CAP: u64 = 1 << 24;
pub const DEFAULT_WINDING_CAP: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoPoint {
    pub m: BigInt,
    /// 1-based column.
    pub s: usize,
    /// `bits[(j-1)dn + (p-1)n + (q-1)]` is digit `j` of `x_pq`.
    pub bits: Vec<u8>,
    pub x_trunc: Matrix<Scalar>,
}

impl MemoPoint {
    fn from_bits(bits: Vec<u8>, s: usize, k: usize, d: usize, n: usize) -> MemoPoint {
        let dn = d * n;
        let kdn = k * dn;
        let mut m = BigInt::one() + pow_int(3, kdn as u64) * BigInt::from(s - 1);
        for (i, b) in bits.iter().enumerate() {
            if *b == 1 {
                m += pow_int(3, (kdn - i - 1) as u64) * BigInt::from(2);
            }
        }
        let x_trunc = Matrix::from_fn(d, n, |p, q| {
            let v = (0..k).fold(BigRational::zero(), |acc, j| {
                if bits[j * dn + p * n + q] == 1 {
                    acc + pow_rational(2, -(j as i64) - 1)
                } else {
                    acc
                }
            });
            Scalar::Exact(v)
        });
        MemoPoint { m, s, bits, x_trunc }
    }

    /// Representative input of the memorization cell.
    pub fn anchor_point(&self, anchor: LabelAnchor, k: usize) -> Matrix<Scalar> {
        match anchor {
            LabelAnchor::Corner => self.x_trunc.clone(),
            LabelAnchor::Center => {
                let half_cell = pow_rational(2, -(k as i64) - 1);
                self.x_trunc.map(|v| Scalar::Exact(v.as_exact().expect("exact") + &half_cell))
            }
        }
    }
}

fn lambda_size(k: usize, d: usize, n: usize) -> Option<u64> {
    let kdn = u32::try_from(k * d * n).ok()?;
    1u64.checked_shl(kdn).filter(|_| kdn < 63)?.checked_mul(n as u64)
}

/// All `n 2^(Kdn)` memory indices in increasing order.
pub fn enumerate_lambda(k: usize, d: usize, n: usize, cap: u64) -> Result<Vec<MemoPoint>> {
    let count = lambda_size(k, d, n).filter(|c| *c <= cap).ok_or_else(|| KstError::CapExceeded {
        what: "|Lambda| = n 2^(Kdn)".into(),
        value: format!("{n} * 2^{}", k * d * n),
        cap: cap.to_string(),
    })?;
    let kdn = k * d * n;
    let per_column = count / n as u64;
    let points = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = (i / per_column) as usize + 1;
            let idx = i % per_column;
            let bits = (0..kdn).map(|e| ((idx >> (kdn - 1 - e)) & 1) as u8).collect();
            MemoPoint::from_bits(bits, s, k, d, n)
        })
        .collect();
    Ok(points)
}

/// Inverse of the index encoding.
pub fn decode_index(m: &BigInt, k: usize, d: usize, n: usize) -> Result<MemoPoint> {
    let kdn = k * d * n;
    let block = pow_int(3, kdn as u64);
    if m < &BigInt::one() || m > &(&block * BigInt::from(n)) {
        return Err(KstError::NotInLambda(m.to_string()));
    }
    let (col, mut rest) = (m - BigInt::one()).div_rem(&block);
    let mut bits = vec![0u8; kdn];
    let three = BigInt::from(3);
    for e in (0..kdn).rev() {
        let (q, digit) = rest.div_rem(&three);
        match digit.to_u8() {
            Some(0) => {}
            Some(2) => bits[e] = 1,
            _ => return Err(KstError::NotInLambda(m.to_string())),
        }
        rest = q;
    }
    let s = col.to_usize().expect("column index fits") + 1;
    Ok(MemoPoint::from_bits(bits, s, k, d, n))
}

/// Which point of a memorization cell supplies its label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelAnchor {
    /// `f(X_trunc)`, the lower-left corner of the cell.
    Corner,
    /// `f` at the cell midpoint; halves the worst-case Hölder term.
    #[default]
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub m: BigInt,
    pub s: usize,
    /// Label per output row `r`.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub anchor: LabelAnchor,
    pub entries: Vec<LabelEntry>,
    pub g_min: f64,
    pub g_max: f64,
    /// Largest label magnitude.
    pub f_max: f64,
}

impl LabelTable {
    pub fn g_range(&self) -> f64 {
        self.g_max - self.g_min
    }

    pub fn lookup(&self, m: &BigInt) -> Option<&LabelEntry> {
        self.entries.binary_search_by(|e| e.m.cmp(m)).ok().map(|i| &self.entries[i])
    }

    /// `(m, s, r, label)` rows for audit export; `r` is 1-based.
    pub fn rows(&self) -> impl Iterator<Item = (String, usize, usize, f64)> + '_ {
        self.entries
            .iter()
            .flat_map(|e| e.values.iter().enumerate().map(move |(r, v)| (e.m.to_string(), e.s, r + 1, *v)))
    }
}

pub fn build_label_table(f: &TargetOracle, k: usize, anchor: LabelAnchor, cap: u64) -> Result<LabelTable> {
    let (d, n) = f.shape();
    let points = enumerate_lambda(k, d, n, cap)?;
    let entries = points
        .par_iter()
        .map(|pt| {
            let x = pt.anchor_point(anchor, k).to_f64();
            let out = f.evaluate(&x)?;
            Ok(LabelEntry { m: pt.m.clone(), s: pt.s, values: out.column(pt.s - 1) })
        })
        .collect::<Result<Vec<_>>>()?;
    let all = || entries.iter().flat_map(|e| e.values.iter().copied());
    let g_min = all().fold(f64::INFINITY, f64::min);
    let g_max = all().fold(f64::NEG_INFINITY, f64::max);
    let f_max = all().fold(0.0, |acc: f64, v| acc.max(v.abs()));
    Ok(LabelTable { k, d, n, anchor, entries, g_min, g_max, f_max })
}

/// Truncated binary digits of `(v - g_min)/(g_max - g_min)`; the value 1
/// maps to all ones.
pub fn binary_expand_label(v: &BigRational, g_min: &BigRational, g_max: &BigRational, h: usize) -> Result<Vec<u8>> {
    if g_max <= g_min {
        return Ok(vec![0; h]);
    }
    if v < g_min || v > g_max {
        return Err(KstError::OutOfRange(format!("label {v} outside [{g_min}, {g_max}]")));
    }
    let z = (v - g_min) / (g_max - g_min);
    let top = BigInt::one() << h;
    let scaled = (z * BigRational::from_integer(top.clone())).floor().to_integer().min(&top - BigInt::one());
    Ok((0..h).map(|i| u8::from(((&scaled >> (h - 1 - i)) & BigInt::one()).is_one())).collect())
}

/// `sum_k theta_k 2^(M-k)` for bits set at 1-based positions `ones`.
fn pack_bits(ones: impl Iterator<Item = usize>, m_total: usize) -> BigInt {
    let mut words = vec![0u32; m_total / 32 + 1];
    for k in ones {
        let pos = m_total - k;
        words[pos / 32] |= 1 << (pos % 32);
    }
    BigInt::from(BigUint::new(words))
}

fn bitpack_cap_check(m_total: u64, cap: u64) -> Result<()> {
    if m_total > cap {
        return Err(KstError::CapExceeded { what: "M_total".into(), value: m_total.to_string(), cap: cap.to_string() });
    }
    Ok(())
}

fn ex(r: BigRational) -> Scalar {
    Scalar::Exact(r)
}

/// Scalar network with `out(m) = theta_m` for every integer `m` in `[1, M]`:
/// `floor(Theta 2^(m-M)) - 2 floor(Theta 2^(m-M-1))`. Depth 3, width 2.
pub fn synth_memo_bitpack(theta: &[u8]) -> Result<FfnBlock> {
    let m_total = theta.len();
    if m_total == 0 {
        return Err(KstError::ShapeMismatch("nothing to memorize".into()));
    }
    bitpack_cap_check(m_total as u64, DEFAULT_BITPACK_CAP)?;
    let packed = BigRational::from_integer(pack_bits(
        theta.iter().enumerate().filter(|(_, b)| **b == 1).map(|(i, _)| i + 1),
        m_total,
    ));
    let col = |v: Vec<BigRational>| Matrix::from_fn(v.len(), 1, |r, _| ex(v[r].clone()));
    let layers = vec![
        Layer::uniform(Matrix::identity(1), Matrix::filled(1, 1, Scalar::int(-(m_total as i64))), ActivationKind::Exp2),
        Layer::uniform(col(vec![packed.clone(), packed / BigInt::from(2)]), Matrix::exact_zeros(2, 1), ActivationKind::Floor),
        Layer::uniform(
            Matrix::from_rows(vec![vec![Scalar::int(1), Scalar::int(-2)]])?,
            Matrix::exact_zeros(1, 1),
            ActivationKind::Identity,
        ),
    ];
    FfnBlock::new(layers, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindingBackend {
    /// `w3 saw(w2 exp(w0 + w1 m)) + w4`.
    Np,
    /// `w1 saw(w0 / (pi + m)) + w2`.
    Rc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindingParams {
    pub backend: WindingBackend,
    pub w: Vec<f64>,
    pub achieved_delta: f64,
    pub samples_used: u64,
    /// `exp(w0 + w1 m)` or `1/(pi + m)` at each memorized `m`.
    pub generators: Vec<f64>,
}

fn saw(x: f64) -> f64 {
    f64::activate(ActivationKind::PeriodicSaw, x).expect("float activation")
}

fn generator(backend: WindingBackend, w: &[f64], m: f64) -> f64 {
    let kind = match backend {
        WindingBackend::Np => ActivationKind::AnalyticNP(AnalyticFn::Exp),
        WindingBackend::Rc => ActivationKind::Reciprocal(Transcendental::Pi),
    };
    let arg = match backend {
        WindingBackend::Np => w[0] + w[1] * m,
        WindingBackend::Rc => m,
    };
    f64::activate(kind, arg).expect("float activation")
}

impl WindingParams {
    pub fn eval(&self, m: f64) -> f64 {
        let g = generator(self.backend, &self.w, m);
        match self.backend {
            WindingBackend::Np => self.w[3] * saw(self.w[2] * g) + self.w[4],
            WindingBackend::Rc => self.w[1] * saw(self.w[0] * g) + self.w[2],
        }
    }

    fn constant(backend: WindingBackend, value: f64, generators: Vec<f64>) -> Self {
        let w = match backend {
            WindingBackend::Np => vec![0.0, 0.0, 1.0, 0.0, value],
            WindingBackend::Rc => vec![1.0, 0.0, value],
        };
        WindingParams { backend, w, achieved_delta: 0.0, samples_used: 0, generators }
    }
}

/// Minimax line `u t + v` through `(t_i, xi_i)`; the optimum is parallel to
/// the chord of some pair of points. Returns `(u, v, max deviation)`.
fn minimax_affine(t: &[f64], xi: &[f64], max_slope: f64) -> (f64, f64, f64) {
    let spread = |u: f64| {
        let (lo, hi) = t.iter().zip(xi).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
            let r = b - u * a;
            (lo.min(r), hi.max(r))
        });
        ((lo + hi) / 2.0, (hi - lo) / 2.0)
    };
    let (v0, dev0) = spread(0.0);
    let mut best = (0.0, v0, dev0);
    for i in 0..t.len() {
        for j in i + 1..t.len() {
            let dt = t[i] - t[j];
            if dt.abs() < 1e-9 {
                continue;
            }
            let u = (xi[i] - xi[j]) / dt;
            if u.abs() > max_slope {
                continue;
            }
            let (v, dev) = spread(u);
            if dev < best.2 {
                best = (u, v, dev);
            }
        }
    }
    best
}

/// Randomized search for winding parameters that put every `(m, xi)` within
/// `delta`. Frequencies are drawn from ranges that grow with the sample
/// count; density of the winding guarantees existence, not a budget.
pub fn synth_memo_winding(
    points: &[(f64, f64)],
    delta: f64,
    backend: WindingBackend,
    budget: u64,
    seed: u64,
) -> Result<WindingParams> {
    if points.is_empty() {
        return Err(KstError::ShapeMismatch("nothing to memorize".into()));
    }
    if points.len() > DEFAULT_WINDING_CAP {
        return Err(KstError::CapExceeded {
            what: "winding memory size M".into(),
            value: points.len().to_string(),
            cap: DEFAULT_WINDING_CAP.to_string(),
        });
    }
    if delta.is_nan() || delta <= 0.0 {
        return Err(KstError::OutOfDomain(format!("winding tolerance {delta} must be positive")));
    }
    let ms: Vec<f64> = points.iter().map(|p| p.0).collect();
    let xi: Vec<f64> = points.iter().map(|p| p.1).collect();
    let m_max = ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if points.len() == 1 {
        let w = WindingParams::constant(backend, xi[0], vec![]);
        let generators = vec![generator(backend, &w.w, ms[0])];
        return Ok(WindingParams { generators, ..w });
    }
    let max_dev = |p: &WindingParams| ms.iter().zip(&xi).map(|(m, x)| (p.eval(*m) - x).abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    let mut t = vec![0.0; ms.len()];
    for i in 0..budget {
        let scale = 4.0 * ((i + 1) as f64).sqrt().max(1.0);
        let (mut w, freq_slot) = match backend {
            WindingBackend::Np => {
                let w1 = rng.gen_range(0.05..1.0);
                (vec![-w1 * m_max, w1, rng.gen_range(0.0..scale), 0.0, 0.0], 2)
            }
            WindingBackend::Rc => (vec![rng.gen_range(0.0..scale) * (std::f64::consts::PI + m_max), 0.0, 0.0], 0),
        };
        for (slot, m) in t.iter_mut().zip(&ms) {
            *slot = saw(w[freq_slot] * generator(backend, &w, *m));
        }
        let (u, v, dev) = minimax_affine(&t, &xi, 1e3);
        best = best.min(dev);
        if dev <= delta {
            match backend {
                WindingBackend::Np => {
                    w[3] = u;
                    w[4] = v;
                }
                WindingBackend::Rc => {
                    w[1] = u;
                    w[2] = v;
                }
            }
            let generators = ms.iter().map(|m| generator(backend, &w, *m)).collect();
            let mut params = WindingParams { backend, w, achieved_delta: 0.0, samples_used: i + 1, generators };
            params.achieved_delta = max_dev(&params);
            if params.achieved_delta <= delta {
                return Ok(params);
            }
        }
    }
    Err(KstError::SearchExhausted { budget, best })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoBackend {
    Bitpack,
    WindingNp,
    WindingRc,
}

impl std::fmt::Display for MemoBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MemoBackend::Bitpack => "bitpack",
            MemoBackend::WindingNp => "winding_np",
            MemoBackend::WindingRc => "winding_rc",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterOptions {
    pub winding_delta: f64,
    pub winding_budget: u64,
    pub seed: u64,
    /// Realize the sawtooth with ReLU/floor units instead of the native activation.
    pub saw_gadget: bool,
    pub bitpack_cap: u64,
}

impl Default for OuterOptions {
    fn default() -> Self {
        OuterOptions { winding_delta: 0.05, winding_budget: 1_000_000, seed: 0, saw_gadget: false, bitpack_cap: DEFAULT_BITPACK_CAP }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterBlock {
    pub block: FfnBlock,
    pub winding: Vec<WindingParams>,
    /// `n 3^(Kdn)`, the largest memory index.
    pub m_total: BigInt,
}

/// Outer block on the inner matrix `Z` (d x n, integer entries).
pub fn assemble_outer_block(labels: &LabelTable, h: usize, backend: MemoBackend, opts: &OuterOptions) -> Result<OuterBlock> {
    let (d, n) = (labels.d, labels.n);
    let m_total = pow_int(3, (labels.k * d * n) as u64) * BigInt::from(n);
    if labels.g_max <= labels.g_min {
        let block = FfnBlock::affine(
            Matrix::exact_zeros(d, d),
            Matrix::filled(d, n, ex(f64_to_rational(labels.g_min)?)),
        )?;
        return Ok(OuterBlock { block, winding: vec![], m_total });
    }
    match backend {
        MemoBackend::Bitpack => assemble_bitpack(labels, h, &m_total, opts).map(|block| OuterBlock {
            block,
            winding: vec![],
            m_total,
        }),
        MemoBackend::WindingNp | MemoBackend::WindingRc => {
            let kind = if backend == MemoBackend::WindingNp { WindingBackend::Np } else { WindingBackend::Rc };
            let params = (0..d)
                .into_par_iter()
                .map(|r| {
                    let points: Vec<(f64, f64)> = labels
                        .entries
                        .iter()
                        .map(|e| (e.m.to_f64().unwrap_or(f64::INFINITY), e.values[r]))
                        .collect();
                    synth_memo_winding(&points, opts.winding_delta, kind, opts.winding_budget, opts.seed.wrapping_add(r as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = params
                .iter()
                .map(|p| winding_row_block(p, opts.saw_gadget).and_then(|b| b.broadcast(n)))
                .collect::<Result<Vec<_>>>()?;
            Ok(OuterBlock { block: block_diagonal(&rows)?, winding: params, m_total })
        }
    }
}

fn assemble_bitpack(labels: &LabelTable, h: usize, m_total: &BigInt, opts: &OuterOptions) -> Result<FfnBlock> {
    let (d, n) = (labels.d, labels.n);
    let m_usize = m_total.to_u64().filter(|m| *m <= opts.bitpack_cap).ok_or_else(|| KstError::CapExceeded {
        what: "M_total = n 3^(Kdn)".into(),
        value: m_total.to_string(),
        cap: opts.bitpack_cap.to_string(),
    })? as usize;
    let g_min = f64_to_rational(labels.g_min)?;
    let g_max = f64_to_rational(labels.g_max)?;
    let expansions = labels
        .entries
        .par_iter()
        .map(|e| {
            e.values
                .iter()
                .map(|v| binary_expand_label(&f64_to_rational(*v)?, &g_min, &g_max, h))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let indices: Vec<usize> = labels.entries.iter().map(|e| e.m.to_usize().expect("index within cap")).collect();
    let packed: Vec<BigRational> = (0..d * h)
        .into_par_iter()
        .map(|ri| {
            let (r, i) = (ri / h, ri % h);
            let ones = indices.iter().zip(&expansions).filter(|(_, bits)| bits[r][i] == 1).map(|(m, _)| *m);
            BigRational::from_integer(pack_bits(ones, m_usize))
        })
        .collect();

    let units = 2 * d * h;
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let range = &g_max - &g_min;
    let layers = vec![
        Layer::uniform(Matrix::identity(d), Matrix::filled(d, n, ex(half)), ActivationKind::Floor),
        Layer::uniform(Matrix::identity(d), Matrix::filled(d, n, Scalar::int(-(m_usize as i64))), ActivationKind::Exp2),
        Layer::uniform(
            Matrix::from_fn(units, d, |u, r| {
                let ri = u / 2;
                if ri / h != r {
                    Scalar::int(0)
                } else if u % 2 == 0 {
                    ex(packed[ri].clone())
                } else {
                    ex(&packed[ri] / BigInt::from(2))
                }
            }),
            Matrix::exact_zeros(units, n),
            ActivationKind::Floor,
        ),
        Layer::uniform(
            Matrix::from_fn(d, units, |r, u| {
                let ri = u / 2;
                if ri / h != r {
                    return Scalar::int(0);
                }
                let weight = &range * pow_rational(2, -((ri % h) as i64) - 1);
                ex(if u % 2 == 0 { weight } else { -weight * BigInt::from(2) })
            }),
            Matrix::filled(d, n, ex(g_min)),
            ActivationKind::Identity,
        ),
    ];
    FfnBlock::new(layers, n)
}

/// One-row winding network on a single input; depth 3.
pub fn winding_row_block(p: &WindingParams, saw_gadget: bool) -> Result<FfnBlock> {
    let f = |v: f64| Matrix::filled(1, 1, Scalar::float(v));
    let (first, freq, scale, offset) = match p.backend {
        WindingBackend::Np => (
            Layer::uniform(f(p.w[1]), f(p.w[0]), ActivationKind::AnalyticNP(AnalyticFn::Exp)),
            p.w[2],
            p.w[3],
            p.w[4],
        ),
        WindingBackend::Rc => (
            Layer::uniform(f(1.0), f(0.0), ActivationKind::Reciprocal(Transcendental::Pi)),
            p.w[0],
            p.w[1],
            p.w[2],
        ),
    };
    let (saw_layer, readout) = if saw_gadget {
        // relu(x) - relu(-x) - floor(x) = x - floor(x)
        (
            Layer::new(
                Matrix::from_f64(3, 1, &[freq, -freq, freq])?,
                Matrix::from_f64(3, 1, &[0.0; 3])?,
                vec![ActivationKind::ReLU, ActivationKind::ReLU, ActivationKind::Floor],
            ),
            Layer::uniform(Matrix::from_f64(1, 3, &[scale, -scale, -scale])?, f(offset), ActivationKind::Identity),
        )
    } else {
        (
            Layer::uniform(f(freq), f(0.0), ActivationKind::PeriodicSaw),
            Layer::uniform(f(scale), f(offset), ActivationKind::Identity),
        )
    };
    FfnBlock::new(vec![first, saw_layer, readout], 1)
}

/// Rigorous tail bound `|phi(x) - phi_K(x)| <= 2 3^(-dn(K-1)) / (3^(dn+1) - 3)`.
pub fn phi_tail_bound(k: usize, dn: usize) -> BigRational {
    let num = pow_rational(3, -((dn * (k - 1)) as i64)) * BigInt::from(2);
    num / (BigRational::from_integer(pow_int(3, dn as u64 + 1)) - BigInt::from(3))
}
