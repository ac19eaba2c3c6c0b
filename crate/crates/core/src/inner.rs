//! Inner functions, the translated sr-block and the inner matrix `Z`.
//!
//! `phi_K(x) = sum_j 2 a_j 3^(-1-dn(j-1))` maps the first `K` binary digits
//! of `x` to base-3 digits in {0, 2}. Two network realizations exist: a floor
//! network that is exact on all of [0, 1], and a ReLU network that is exact
//! outside a small set of flaw intervals.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{KstError, Result};
use crate::ffn::{block_diagonal, concat_parallel, stack, FfnBlock, Layer, VectorNet};
use crate::matrix::Matrix;
use crate::scalar::{pow_int, pow_rational, ActivationKind, Scalar};

pub const DEFAULT_KDN_CAP: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerVariant {
    Floor,
    Relu,
}

impl std::fmt::Display for InnerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InnerVariant::Floor => "floor",
            InnerVariant::Relu => "relu",
        })
    }
}

/// Refuses constructions whose integers `3^(Kdn)` would be unreasonably large.
pub fn check_kdn_cap(k: usize, d: usize, n: usize, cap: usize) -> Result<()> {
    let kdn = k * d * n;
    if kdn > cap {
        return Err(KstError::CapExceeded { what: "Kdn".into(), value: kdn.to_string(), cap: cap.to_string() });
    }
    Ok(())
}

fn rat(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn ex(r: BigRational) -> Scalar {
    Scalar::Exact(r)
}

fn col_matrix(values: Vec<BigRational>) -> Matrix<Scalar> {
    Matrix::from_fn(values.len(), 1, |r, _| ex(values[r].clone()))
}

fn row_matrix(rows: Vec<Vec<BigRational>>) -> Matrix<Scalar> {
    Matrix::from_rows(rows.into_iter().map(|r| r.into_iter().map(ex).collect()).collect())
        .expect("rectangular weight rows")
}

fn in_unit_interval(x: &BigRational) -> bool {
    !x.is_negative() && *x <= BigRational::one()
}

/// First `k` binary digits. Dyadics take the terminating expansion and
/// `x = 1` takes all ones.
pub fn binary_digits(x: &BigRational, k: usize) -> Result<Vec<u8>> {
    if !in_unit_interval(x) {
        return Err(KstError::OutOfDomain(format!("{x} is outside [0, 1]")));
    }
    if x.is_one() {
        return Ok(vec![1; k]);
    }
    let mut digits = Vec::with_capacity(k);
    let mut rest = x.clone();
    let two = BigRational::from_integer(BigInt::from(2));
    for _ in 0..k {
        rest *= &two;
        if rest >= BigRational::one() {
            digits.push(1);
            rest -= BigRational::one();
        } else {
            digits.push(0);
        }
    }
    Ok(digits)
}

/// Coefficient `2 * 3^(-1-dn(j-1))` of digit `j` (1-based).
fn digit_weight(j: usize, dn: usize) -> BigRational {
    pow_rational(3, -1 - (dn * (j - 1)) as i64) * BigInt::from(2)
}

pub fn phi_from_digits(digits: &[u8], dn: usize) -> BigRational {
    digits
        .iter()
        .enumerate()
        .filter(|(_, a)| **a == 1)
        .map(|(i, _)| digit_weight(i + 1, dn))
        .fold(BigRational::zero(), |acc, w| acc + w)
}

pub fn phi_k_reference(x: &BigRational, k: usize, dn: usize) -> Result<BigRational> {
    Ok(phi_from_digits(&binary_digits(x, k)?, dn))
}

/// Floor network of depth `K + 1` and width 3 computing `phi_K` on [0, 1].
///
/// The first layer reads `floor(2^K x)`, `floor(2x)` and `floor(x)`; the last
/// one is 1 only at `x = 1` and turns the terminating expansion of 1 into
/// all ones. Later layers keep the remaining digits as an integer, the next
/// digit, and a base-3 accumulator scaled to integers.
pub fn synth_inner_floor(k: usize, d: usize, n: usize) -> VectorNet {
    assert!(k >= 1 && d >= 1 && n >= 1);
    use ActivationKind::Floor;
    let dn = (d * n) as i64;
    let k_i = k as i64;
    let zero3 = || col_matrix(vec![BigRational::zero(), BigRational::zero(), BigRational::zero()]);
    let mut layers = vec![Layer::uniform(
        col_matrix(vec![pow_rational(2, k_i), rat(2, 1), rat(1, 1)]),
        zero3(),
        Floor,
    )];
    if k == 1 {
        layers.push(Layer::uniform(
            row_matrix(vec![vec![rat(0, 1), rat(2, 3), rat(-2, 3)]]),
            col_matrix(vec![BigRational::zero()]),
            ActivationKind::Identity,
        ));
        return VectorNet::new(layers).expect("floor inner net is well formed");
    }
    let half_span = pow_rational(2, k_i - 1);
    let next_scale = pow_rational(2, 2 - k_i);
    let acc = pow_rational(3, dn * (k_i - 1)) * BigInt::from(2);
    layers.push(Layer::uniform(
        row_matrix(vec![
            vec![rat(1, 1), -half_span.clone(), half_span - rat(1, 1)],
            vec![next_scale.clone(), rat(-2, 1), rat(2, 1) - next_scale],
            vec![rat(0, 1), acc.clone(), -acc],
        ]),
        zero3(),
        Floor,
    ));
    for j in 2..k as i64 {
        layers.push(Layer::uniform(
            row_matrix(vec![
                vec![rat(1, 1), -pow_rational(2, k_i - j), rat(0, 1)],
                vec![pow_rational(2, j + 1 - k_i), rat(-2, 1), rat(0, 1)],
                vec![rat(0, 1), pow_rational(3, dn * (k_i - j)) * BigInt::from(2), rat(1, 1)],
            ]),
            zero3(),
            Floor,
        ));
    }
    let scale = pow_rational(3, -(dn * (k_i - 1) + 1));
    layers.push(Layer::uniform(
        row_matrix(vec![vec![rat(0, 1), scale.clone() * BigInt::from(2), scale]]),
        col_matrix(vec![BigRational::zero()]),
        ActivationKind::Identity,
    ));
    VectorNet::new(layers).expect("floor inner net is well formed")
}

/// Tent `relu(y) - 2 relu(y-1) + relu(y-2)`, passed through
/// `-relu(-t + 1) + 1`. It agrees with the identity on [0, 1] and vanishes
/// outside (0, 2), so branches for other columns read exactly 0.
pub fn window_filter() -> VectorNet {
    use ActivationKind::{Identity, ReLU};
    VectorNet::new(vec![
        Layer::uniform(col_matrix(vec![rat(1, 1), rat(1, 1), rat(1, 1)]), col_matrix(vec![rat(0, 1), rat(-1, 1), rat(-2, 1)]), ReLU),
        Layer::uniform(row_matrix(vec![vec![rat(-1, 1), rat(2, 1), rat(-1, 1)]]), col_matrix(vec![rat(1, 1)]), ReLU),
        Layer::uniform(row_matrix(vec![vec![rat(-1, 1)]]), col_matrix(vec![rat(1, 1)]), Identity),
    ])
    .expect("window filter is well formed")
}

/// `y -> sum_q 3^(1-q) g(y - 2q)` for `q = 0..n`.
fn piecewise_sum(g: &VectorNet, n: usize) -> Result<VectorNet> {
    let branches = (0..n)
        .map(|q| g.block().with_input_shift(&col_matrix(vec![rat(-2 * q as i64, 1)])))
        .collect::<Result<Vec<_>>>()?;
    let weights = row_matrix(vec![(0..n).map(|q| pow_rational(3, 1 - q as i64)).collect()]);
    let sum = FfnBlock::affine(weights, col_matrix(vec![BigRational::zero()]))?;
    VectorNet::from_block(stack(&[concat_parallel(&branches)?, sum])?)
}

/// Depth `K + 3`, width `3n`; equals `3^(1-q) phi_K(y - 2q)` on each `[2q, 2q+1]`.
pub fn synth_piecewise_inner_floor(k: usize, d: usize, n: usize) -> VectorNet {
    let single = VectorNet::from_block(
        stack(&[window_filter().block().clone(), synth_inner_floor(k, d, n).block().clone()])
            .expect("filter feeds the inner net"),
    )
    .expect("single column");
    piecewise_sum(&single, n).expect("piecewise floor net is well formed")
}

/// Where the ReLU inner network may deviate from `phi_K`.
///
/// Bit `j` is read by a ramp of width `delta_j`; it is wrong only when
/// `frac(2^(j-1) x)` lies in `((1 - delta_j)/2, 1/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlawReport {
    pub deltas: Vec<Scalar>,
    pub end_delta: Scalar,
    pub total_measure_bound: Scalar,
    /// `2^(-K beta p)`.
    pub budget: f64,
}

impl FlawReport {
    fn delta(&self, j: usize) -> BigRational {
        self.deltas[j - 1].as_exact().expect("exact deltas").clone()
    }

    /// Flaw intervals of bit `j` (1-based) inside [0, 1].
    pub fn intervals(&self, j: usize) -> Vec<(BigRational, BigRational)> {
        let delta = self.delta(j);
        let step = pow_rational(2, 1 - j as i64);
        let lo_off = (BigRational::one() - &delta) / BigInt::from(2);
        let hi_off = rat(1, 2);
        (0..1usize << (j - 1))
            .map(|k| {
                let base = BigRational::from_integer(BigInt::from(k));
                ((&base + &lo_off) * &step, (&base + &hi_off) * &step)
            })
            .collect()
    }

    pub fn contains(&self, x: &BigRational) -> bool {
        (1..=self.deltas.len()).any(|j| {
            let scaled = x * pow_rational(2, j as i64 - 1);
            let frac = &scaled - scaled.floor();
            let lo = (BigRational::one() - self.delta(j)) / BigInt::from(2);
            frac > lo && frac < rat(1, 2)
        })
    }

    pub fn contains_any(&self, x: &Matrix<Scalar>) -> Result<bool> {
        for v in x.iter() {
            if self.contains(&v.to_rational()?) {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

fn ceil_log2(v: usize) -> i64 {
    (usize::BITS - (v.max(1) - 1).leading_zeros()) as i64
}

/// Flaw schedule: `delta_j = 2^-(ceil(K beta p) + ceil(log2 K) + j + 1)`.
pub fn flaw_report(k: usize, p: f64, beta: f64) -> Result<FlawReport> {
    if !(p >= 1.0 && p.is_finite()) || !(beta > 0.0 && beta <= 1.0) {
        return Err(KstError::OutOfDomain(format!("need p in [1, inf) and beta in (0, 1], got p={p}, beta={beta}")));
    }
    let kbp = (k as f64 * beta * p - 1e-9).ceil().max(0.0) as i64;
    let base = kbp + ceil_log2(k) + 1;
    let deltas: Vec<BigRational> = (1..=k as i64).map(|j| pow_rational(2, -(base + j))).collect();
    let total = deltas.iter().fold(BigRational::zero(), |acc, d| acc + d / BigInt::from(2));
    let end_delta = deltas[k - 1].clone();
    Ok(FlawReport {
        deltas: deltas.into_iter().map(ex).collect(),
        end_delta: ex(end_delta),
        total_measure_bound: ex(total),
        budget: (-(k as f64) * beta * p).exp2(),
    })
}

/// Affine rows over the previous layer reading the residual `T = 2t - 2u + 2v`.
struct StageInputs {
    width: usize,
    u: usize,
    v: usize,
    t: usize,
    s: Option<usize>,
}

impl StageInputs {
    fn residual(&self, scale: &BigRational) -> Vec<BigRational> {
        let mut row = vec![BigRational::zero(); self.width];
        row[self.t] = scale * BigInt::from(2);
        row[self.u] = -(scale * BigInt::from(2));
        row[self.v] = scale * BigInt::from(2);
        row
    }

    fn accumulate(&self, weight: &BigRational) -> Vec<BigRational> {
        let mut row = vec![BigRational::zero(); self.width];
        if let Some(s) = self.s {
            row[s] = BigRational::one();
        }
        row[self.u] = weight.clone();
        row[self.v] = -weight.clone();
        row
    }
}

/// ReLU network equal to `phi_K` on [0, 1] off the flaw set, 0 below 0 and
/// 1 from `1 + end_delta / 2^(K+1)` on. Depth `K + 2` (2 for `K = 1`), width 4.
pub fn synth_inner_relu(k: usize, d: usize, n: usize, p: f64, beta: f64) -> Result<(VectorNet, FlawReport)> {
    assert!(k >= 1 && d >= 1 && n >= 1);
    use ActivationKind::{Identity, ReLU};
    let report = flaw_report(k, p, beta)?;
    let dn = d * n;
    let delta = |j: usize| report.delta(j);
    let end = report.end_delta.as_exact().expect("exact").clone();
    let phi_one = phi_from_digits(&vec![1; k], dn);
    let one = BigRational::one();

    if k == 1 {
        let d1 = delta(1);
        let layers = vec![
            Layer::uniform(
                col_matrix(vec![rat(2, 1) / &d1, rat(2, 1) / &d1, &one / &end, &one / &end]),
                col_matrix(vec![&one - &one / &d1, -(&one / &d1), -(&one / &end), -(&one / &end) - &one]),
                ReLU,
            ),
            Layer::uniform(
                row_matrix(vec![vec![
                    digit_weight(1, dn),
                    -digit_weight(1, dn),
                    &one - &phi_one,
                    -(&one - &phi_one),
                ]]),
                col_matrix(vec![BigRational::zero()]),
                Identity,
            ),
        ];
        return Ok((VectorNet::new(layers)?, report));
    }

    let d1 = delta(1);
    let mut layers = vec![Layer::uniform(
        col_matrix(vec![rat(2, 1) / &d1, rat(2, 1) / &d1, rat(2, 1)]),
        col_matrix(vec![&one - &one / &d1, -(&one / &d1), BigRational::zero()]),
        ReLU,
    )];
    let mut inputs = StageInputs { width: 3, u: 0, v: 1, t: 2, s: None };
    for j in 2..=k {
        let dj = delta(j);
        let inv = &one / &dj;
        layers.push(Layer::uniform(
            row_matrix(vec![
                inputs.residual(&inv),
                inputs.residual(&inv),
                inputs.residual(&one),
                inputs.accumulate(&digit_weight(j - 1, dn)),
            ]),
            col_matrix(vec![&one - &inv, -inv.clone(), BigRational::zero(), BigRational::zero()]),
            ReLU,
        ));
        inputs = StageInputs { width: 4, u: 0, v: 1, t: 2, s: Some(3) };
    }
    let inv_end = &one / &end;
    layers.push(Layer::uniform(
        row_matrix(vec![
            inputs.residual(&inv_end),
            inputs.residual(&inv_end),
            inputs.accumulate(&digit_weight(k, dn)),
        ]),
        col_matrix(vec![-(&inv_end * BigInt::from(2)), -(&inv_end * BigInt::from(2)) - &one, BigRational::zero()]),
        ReLU,
    ));
    layers.push(Layer::uniform(
        row_matrix(vec![vec![&one - &phi_one, -(&one - &phi_one), one.clone()]]),
        col_matrix(vec![BigRational::zero()]),
        Identity,
    ));
    Ok((VectorNet::new(layers)?, report))
}

/// ReLU counterpart of the piecewise block. No filter is needed because the
/// ReLU inner net saturates at 0 and 1 by itself. Depth `K + 2`, width `4n`.
pub fn synth_piecewise_inner_relu(k: usize, d: usize, n: usize, p: f64, beta: f64) -> Result<(VectorNet, FlawReport)> {
    let (inner, report) = synth_inner_relu(k, d, n, p, beta)?;
    Ok((piecewise_sum(&inner, n)?, report))
}

/// Maps `X` (d x n) to `Z_2` (2d x n): every top row holds
/// `3 sum_p 3^-((p-1)n+s) phi_K(x_ps)` in column `s`, the bottom block is 0.
pub fn synth_sr_block(
    k: usize,
    d: usize,
    n: usize,
    variant: InnerVariant,
    p: f64,
    beta: f64,
) -> Result<(FfnBlock, Option<FlawReport>)> {
    let (piecewise, report) = match variant {
        InnerVariant::Floor => (synth_piecewise_inner_floor(k, d, n), None),
        InnerVariant::Relu => {
            let (net, report) = synth_piecewise_inner_relu(k, d, n, p, beta)?;
            (net, Some(report))
        }
    };
    let translate = FfnBlock::affine(
        Matrix::identity(d),
        Matrix::from_fn(d, n, |_, c| Scalar::int(2 * c as i64)),
    )?;
    let per_row = piecewise.broadcast_to_block(n)?;
    let diag = block_diagonal(&vec![per_row; d])?;

    // Each column sees constant contributions from branches of other
    // columns; probe them at x = 0 and cancel them in the readout bias.
    let offsets = (0..n)
        .map(|c| {
            piecewise
                .eval_scalar(&Scalar::int(2 * c as i64))
                .and_then(|v| v.to_rational())
        })
        .collect::<Result<Vec<_>>>()?;
    let row_weight = |p: usize| pow_rational(3, -((p * n) as i64 + 1));
    let weight_sum = (0..d).fold(BigRational::zero(), |acc, p| acc + row_weight(p));
    let readout_w = Matrix::from_fn(2 * d, d, |r, p| if r < d { ex(row_weight(p)) } else { Scalar::int(0) });
    let readout_b = Matrix::from_fn(2 * d, n, |r, c| {
        if r < d {
            ex(-(&weight_sum * &offsets[c]))
        } else {
            Scalar::int(0)
        }
    });
    let readout = FfnBlock::affine(readout_w, readout_b)?;
    Ok((stack(&[translate, diag, readout])?, report))
}

/// `Z_3 -> 3^(Kdn) * bottom(Z_3) + b` with `b` shifting column `s` by
/// `1 + (s-1) 3^(Kdn)`.
pub fn make_scaling_segmentation(k: usize, d: usize, n: usize) -> FfnBlock {
    let big = BigRational::from_integer(pow_int(3, (k * d * n) as u64));
    let weight = Matrix::from_fn(d, 2 * d, |r, c| if c == d + r { ex(big.clone()) } else { Scalar::int(0) });
    let bias = Matrix::from_fn(d, n, |_, c| ex(BigRational::one() + &big * BigInt::from(c)));
    FfnBlock::affine(weight, bias).expect("scaling map is well formed")
}

/// `Z_rs = sum_{p,q} 3^(Kdn+1-((p-1)n+q)) phi_K(x_pq) + 1 + (s-1) 3^(Kdn)`.
pub fn inner_matrix_reference(x: &Matrix<Scalar>, k: usize, d: usize, n: usize) -> Result<Matrix<Scalar>> {
    if x.shape() != (d, n) {
        return Err(KstError::ShapeMismatch(format!("expected {d}x{n} input, got {}x{}", x.rows(), x.cols())));
    }
    let kdn = (k * d * n) as i64;
    let mut total = BigRational::zero();
    for p in 0..d {
        for q in 0..n {
            let phi = phi_k_reference(&x.get(p, q).to_rational()?, k, d * n)?;
            total += phi * pow_rational(3, kdn - (p * n + q) as i64);
        }
    }
    let big = BigRational::from_integer(pow_int(3, kdn as u64));
    Ok(Matrix::from_fn(d, n, |_, c| ex(&total + BigRational::one() + &big * BigInt::from(c))))
}

/// True when `z` is an integer in `[1, n 3^(Kdn)]`.
pub fn is_valid_index(z: &BigRational, k: usize, d: usize, n: usize) -> bool {
    z.is_integer() && {
        let v = z.to_integer();
        v >= BigInt::one() && v <= pow_int(3, (k * d * n) as u64) * BigInt::from(n)
    }
}

/// `x` with its binary digits after position `k` replaced by those of `tail`.
pub fn splice_tail(x: &BigRational, k: usize, tail: &BigRational) -> Result<BigRational> {
    let digits = binary_digits(x, k)?;
    let head = digits
        .iter()
        .enumerate()
        .fold(BigRational::zero(), |acc, (i, a)| acc + pow_rational(2, -(i as i64) - 1) * BigInt::from(*a));
    let scaled_tail = tail * pow_rational(2, -(k as i64));
    let out = head + scaled_tail;
    if x.is_one() || out > BigRational::one() {
        return Ok(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{eval_attention, make_column_sum_attention};
    use crate::ffn::eval_ffn;
    use crate::scalar::{f64_to_rational, Mode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r(num: i64, den: i64) -> BigRational {
        rat(num, den)
    }

    fn eval_net(net: &VectorNet, x: &BigRational) -> BigRational {
        net.eval_scalar(&ex(x.clone())).unwrap().to_rational().unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> BigRational {
        f64_to_rational(rng.gen::<f64>()).unwrap()
    }

    #[test]
    fn digit_examples() {
        assert_eq!(binary_digits(&r(1, 2), 3).unwrap(), vec![1, 0, 0]);
        assert_eq!(binary_digits(&r(3, 4), 2).unwrap(), vec![1, 1]);
        assert_eq!(binary_digits(&r(1, 1), 2).unwrap(), vec![1, 1]);
        assert!(matches!(binary_digits(&r(-1, 3), 2), Err(KstError::OutOfDomain(_))));
        assert!(binary_digits(&r(4, 3), 2).is_err());
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_k_reference(&r(0, 1), 4, 3).unwrap(), r(0, 1));
        assert_eq!(phi_k_reference(&r(1, 2), 1, 2).unwrap(), r(2, 3));
        assert_eq!(phi_k_reference(&r(3, 4), 2, 1).unwrap(), r(8, 9));
    }

    #[test]
    fn floor_inner_examples_and_size() {
        let net = synth_inner_floor(1, 1, 2);
        assert_eq!(eval_net(&net, &r(0, 1)), r(0, 1));
        assert_eq!(eval_net(&net, &r(1, 2)), r(2, 3));
        let net4 = synth_inner_floor(4, 1, 2);
        let x = r(11, 16);
        assert_eq!(eval_net(&net4, &x), phi_k_reference(&x, 4, 2).unwrap());
        for k in 1..6 {
            let b = synth_inner_floor(k, 2, 1);
            assert_eq!((b.block().depth(), b.block().width()), (k + 1, 3));
        }
    }

    #[test]
    fn floor_inner_exhaustive_on_dyadics() {
        for dn in [1usize, 2, 4] {
            for k in 1..=5 {
                let net = synth_inner_floor(k, dn, 1);
                for i in 0..=(1i64 << k) {
                    let x = r(i, 1 << k);
                    assert_eq!(eval_net(&net, &x), phi_k_reference(&x, k, dn).unwrap(), "k={k} dn={dn} x={x}");
                }
            }
        }
    }

    #[test]
    fn floor_inner_ignores_digits_past_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = synth_inner_floor(3, 1, 2);
        for _ in 0..200 {
            let x = random_unit(&mut rng);
            let y = splice_tail(&x, 3, &random_unit(&mut rng)).unwrap();
            assert_eq!(eval_net(&net, &x), eval_net(&net, &y));
        }
    }

    #[test]
    fn window_filter_values() {
        let w = window_filter();
        for (x, want) in [(r(-1, 1), r(0, 1)), (r(3, 10), r(3, 10)), (r(1, 1), r(1, 1)), (r(2, 1), r(0, 1)), (r(5, 2), r(0, 1))] {
            assert_eq!(eval_net(&w, &x), want);
        }
    }

    #[test]
    fn piecewise_floor_examples() {
        let net = synth_piecewise_inner_floor(1, 1, 2);
        assert_eq!((net.block().depth(), net.block().width()), (4, 6));
        assert_eq!(eval_net(&net, &r(0, 1)), r(0, 1));
        assert_eq!(eval_net(&net, &r(2, 1)), r(0, 1));
        assert_eq!(eval_net(&net, &r(1, 2)), r(2, 1));
        assert_eq!(eval_net(&net, &r(5, 2)), phi_k_reference(&r(1, 2), 1, 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = synth_piecewise_inner_floor(3, 1, 3);
        for _ in 0..200 {
            let q = rng.gen_range(0..3i64);
            let x = random_unit(&mut rng);
            let got = eval_net(&net, &(&x + r(2 * q, 1)));
            let want = phi_k_reference(&x, 3, 3).unwrap() * pow_rational(3, 1 - q);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn relu_inner_contract() {
        let (net, report) = synth_inner_relu(3, 1, 2, 1.0, 1.0).unwrap();
        assert_eq!(eval_net(&net, &r(-1, 1)), r(0, 1));
        assert_eq!(eval_net(&net, &r(2, 1)), r(1, 1));
        let x = r(1, 2) + pow_rational(2, -7);
        assert!(!report.contains(&x));
        assert_eq!(eval_net(&net, &x), phi_k_reference(&x, 3, 2).unwrap());
        assert!(net.block().depth() <= 6 && net.block().width() <= 4);
        assert!(net.block().activation_set().iter().all(|a| *a == ActivationKind::ReLU));
        assert!(report.total_measure_bound.to_f64() <= report.budget);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, p, beta) in [(1, 1.0, 1.0), (2, 2.0, 0.5), (3, 2.0, 0.5), (4, 1.0, 1.0)] {
            let (net, report) = synth_inner_relu(k, 1, 2, p, beta).unwrap();
            assert!(net.block().depth() <= 2 * k.max(1) && net.block().width() <= 4);
            for i in 0..=(1i64 << k) {
                let x = r(i, 1 << k);
                assert_eq!(eval_net(&net, &x), phi_k_reference(&x, k, 2).unwrap());
            }
            for _ in 0..300 {
                let x = random_unit(&mut rng);
                if !report.contains(&x) {
                    assert_eq!(eval_net(&net, &x), phi_k_reference(&x, k, 2).unwrap(), "k={k} x={x}");
                }
            }
        }
    }

    #[test]
    fn flaw_intervals_match_membership() {
        let report = flaw_report(3, 1.0, 1.0).unwrap();
        for j in 1..=3 {
            let ivs = report.intervals(j);
            assert_eq!(ivs.len(), 1 << (j - 1));
            for (lo, hi) in ivs {
                let mid = (&lo + &hi) / BigInt::from(2);
                assert!(report.contains(&mid));
                assert!(!report.contains(&hi));
            }
        }
    }

    #[test]
    fn inner_matrix_examples() {
        let one = |v| Matrix::from_rows(vec![vec![ex(v)]]).unwrap();
        assert_eq!(inner_matrix_reference(&one(r(1, 2)), 1, 1, 1).unwrap().get(0, 0), &Scalar::int(3));
        assert_eq!(inner_matrix_reference(&one(r(0, 1)), 1, 1, 1).unwrap().get(0, 0), &Scalar::int(1));
        let x = Matrix::from_rows(vec![vec![ex(r(1, 2)), ex(r(0, 1))]]).unwrap();
        let z = inner_matrix_reference(&x, 1, 1, 2).unwrap();
        assert_eq!(z.to_rows(), vec![vec![Scalar::int(7), Scalar::int(16)]]);
    }

    #[test]
    fn sr_block_examples() {
        let (b, _) = synth_sr_block(1, 1, 1, InnerVariant::Floor, 1.0, 1.0).unwrap();
        let x = Matrix::from_rows(vec![vec![ex(r(1, 2))]]).unwrap();
        let z2 = eval_ffn(&b, &x, Mode::Exact).unwrap();
        assert_eq!(z2.to_rows(), vec![vec![ex(r(2, 3))], vec![Scalar::int(0)]]);

        let (b, _) = synth_sr_block(1, 1, 2, InnerVariant::Floor, 1.0, 1.0).unwrap();
        let x = Matrix::from_rows(vec![vec![ex(r(1, 2)), ex(r(1, 2))]]).unwrap();
        let z2 = eval_ffn(&b, &x, Mode::Exact).unwrap();
        assert_eq!(z2.row(0), &[ex(r(2, 3)), ex(r(2, 9))]);
        assert_eq!(eval_ffn(&b, &Matrix::exact_zeros(1, 2), Mode::Exact).unwrap(), Matrix::exact_zeros(2, 2));

        for (k, d, n) in [(1, 1, 1), (2, 2, 2), (3, 1, 3)] {
            let (b, _) = synth_sr_block(k, d, n, InnerVariant::Floor, 1.0, 1.0).unwrap();
            assert_eq!((b.depth(), b.width()), (k + 3, 3 * d * n));
            let (b, _) = synth_sr_block(k, d, n, InnerVariant::Relu, 1.0, 1.0).unwrap();
            assert!(b.depth() <= 2 * k.max(2) && b.width() <= 4 * d * n);
        }
    }

    #[test]
    fn scaling_segmentation_examples() {
        let a = make_scaling_segmentation(1, 1, 1);
        let z3 = Matrix::from_rows(vec![vec![Scalar::int(5)], vec![ex(r(2, 3))]]).unwrap();
        assert_eq!(eval_ffn(&a, &z3, Mode::Exact).unwrap().get(0, 0), &Scalar::int(3));
        let a = make_scaling_segmentation(1, 2, 3);
        let out = eval_ffn(&a, &Matrix::exact_zeros(4, 3), Mode::Exact).unwrap();
        assert_eq!(out.row(1), &[Scalar::int(1), Scalar::int(730), Scalar::int(1459)]);
    }

    fn pipeline_z(x: &Matrix<Scalar>, k: usize, d: usize, n: usize, variant: InnerVariant) -> Matrix<Scalar> {
        let (sr, _) = synth_sr_block(k, d, n, variant, 1.0, 1.0).unwrap();
        let z2 = eval_ffn(&sr, x, Mode::Exact).unwrap();
        let z3 = eval_attention(&make_column_sum_attention(d, n), &z2, Mode::Exact).unwrap();
        eval_ffn(&make_scaling_segmentation(k, d, n), &z3, Mode::Exact).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn inner_matrix_identity_floor(
            k in 1usize..4, d in 1usize..3, n in 1usize..3,
            raw in proptest::collection::vec(0u32..=1000, 4),
        ) {
            let x = Matrix::from_fn(d, n, |p, q| ex(r(raw[p * 2 + q] as i64, 1000)));
            let z = inner_matrix_reference(&x, k, d, n).unwrap();
            prop_assert_eq!(pipeline_z(&x, k, d, n, InnerVariant::Floor), z.clone());
            for v in z.iter() {
                prop_assert!(is_valid_index(&v.to_rational().unwrap(), k, d, n));
            }
        }

        #[test]
        fn inner_matrix_identity_relu_off_flaw(
            k in 1usize..4, n in 1usize..3,
            raw in proptest::collection::vec(0u32..=1024, 2),
        ) {
            let x = Matrix::from_fn(1, n, |_, q| ex(r(raw[q] as i64, 1024)));
            let report = flaw_report(k, 1.0, 1.0).unwrap();
            prop_assume!(!report.contains_any(&x).unwrap());
            prop_assert_eq!(pipeline_z(&x, k, 1, n, InnerVariant::Relu), inner_matrix_reference(&x, k, 1, n).unwrap());
        }
    }
}
