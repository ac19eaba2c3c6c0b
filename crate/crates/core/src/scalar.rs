//! Dual-mode numbers, activation functions and the ReLU/floor gadgets.
//!
//! Every quantity in a construction is either an exact rational (arbitrary
//! precision numerator and denominator) or an `f64`. The two never mix inside
//! one expression: combining an exact value with a float is a
//! [`KstError::ModeMismatch`].

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{KstError, Result};

/// Largest |k| accepted by exact `2^k` / `3^k`.
const EXACT_EXPONENT_CAP: i64 = 1 << 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Float,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Exact => f.write_str("exact"),
            Mode::Float => f.write_str("float"),
        }
    }
}

impl FromStr for Mode {
    type Err = KstError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Mode::Exact),
            "float" => Ok(Mode::Float),
            other => Err(KstError::Parse(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scalar {
    Exact(BigRational),
    Float(f64),
}

impl Scalar {
    pub fn int(v: i64) -> Self {
        Scalar::Exact(BigRational::from_integer(BigInt::from(v)))
    }

    pub fn ratio(num: i64, den: i64) -> Self {
        Scalar::Exact(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn float(v: f64) -> Self {
        Scalar::Float(v)
    }

    pub fn zero(mode: Mode) -> Self {
        match mode {
            Mode::Exact => Scalar::Exact(BigRational::zero()),
            Mode::Float => Scalar::Float(0.0),
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Scalar::Exact(_) => Mode::Exact,
            Scalar::Float(_) => Mode::Float,
        }
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Scalar::Exact(r) => rational_to_f64(r),
            Scalar::Float(f) => *f,
        }
    }

    /// The exact value of an exact scalar, or the exact binary value of a float.
    pub fn to_rational(&self) -> Result<BigRational> {
        match self {
            Scalar::Exact(r) => Ok(r.clone()),
            Scalar::Float(f) => f64_to_rational(*f),
        }
    }

    pub fn as_exact(&self) -> Option<&BigRational> {
        match self {
            Scalar::Exact(r) => Some(r),
            Scalar::Float(_) => None,
        }
    }

    /// Re-expresses the value in `mode`. Exact -> float rounds; float -> exact
    /// is the exact binary value of the float.
    pub fn convert(&self, mode: Mode) -> Result<Scalar> {
        match (self, mode) {
            (Scalar::Exact(_), Mode::Exact) | (Scalar::Float(_), Mode::Float) => Ok(self.clone()),
            (Scalar::Exact(r), Mode::Float) => Ok(Scalar::Float(rational_to_f64(r))),
            (Scalar::Float(f), Mode::Exact) => Ok(Scalar::Exact(f64_to_rational(*f)?)),
        }
    }

    fn binary(&self, other: &Scalar, op: &str) -> Result<(Scalar, Scalar)> {
        if self.mode() != other.mode() {
            return Err(KstError::ModeMismatch(format!(
                "{op} of {} and {} values",
                self.mode(),
                other.mode()
            )));
        }
        Ok((self.clone(), other.clone()))
    }

    pub fn try_add(&self, other: &Scalar) -> Result<Scalar> {
        Ok(match self.binary(other, "sum")? {
            (Scalar::Exact(a), Scalar::Exact(b)) => Scalar::Exact(a + b),
            (Scalar::Float(a), Scalar::Float(b)) => Scalar::Float(a + b),
            _ => unreachable!(),
        })
    }

    pub fn try_sub(&self, other: &Scalar) -> Result<Scalar> {
        Ok(match self.binary(other, "difference")? {
            (Scalar::Exact(a), Scalar::Exact(b)) => Scalar::Exact(a - b),
            (Scalar::Float(a), Scalar::Float(b)) => Scalar::Float(a - b),
            _ => unreachable!(),
        })
    }

    pub fn try_mul(&self, other: &Scalar) -> Result<Scalar> {
        Ok(match self.binary(other, "product")? {
            (Scalar::Exact(a), Scalar::Exact(b)) => Scalar::Exact(a * b),
            (Scalar::Float(a), Scalar::Float(b)) => Scalar::Float(a * b),
            _ => unreachable!(),
        })
    }

    pub fn try_div(&self, other: &Scalar) -> Result<Scalar> {
        Ok(match self.binary(other, "quotient")? {
            (Scalar::Exact(_), Scalar::Exact(b)) if b.is_zero() => {
                return Err(KstError::OutOfDomain("division by zero".into()))
            }
            (Scalar::Exact(a), Scalar::Exact(b)) => Scalar::Exact(a / b),
            (Scalar::Float(a), Scalar::Float(b)) => Scalar::Float(a / b),
            _ => unreachable!(),
        })
    }

    pub fn floor(&self) -> Scalar {
        match self {
            Scalar::Exact(r) => Scalar::Exact(r.floor()),
            Scalar::Float(f) => Scalar::Float(f.floor()),
        }
    }

    pub fn is_integer(&self) -> bool {
        match self {
            Scalar::Exact(r) => r.is_integer(),
            Scalar::Float(f) => f.fract() == 0.0,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Exact(r) => f.write_str(&format_rational(r)),
            Scalar::Float(v) => write!(f, "{v}"),
        }
    }
}

pub fn format_rational(r: &BigRational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

pub fn parse_rational(s: &str) -> Result<BigRational> {
    let s = s.trim();
    let bad = || KstError::Parse(format!("`{s}` is not a rational `p/q`"));
    match s.split_once('/') {
        Some((p, q)) => {
            let p = BigInt::from_str(p.trim()).map_err(|_| bad())?;
            let q = BigInt::from_str(q.trim()).map_err(|_| bad())?;
            if q.is_zero() {
                return Err(bad());
            }
            Ok(BigRational::new(p, q))
        }
        None => {
            if let Ok(p) = BigInt::from_str(s) {
                return Ok(BigRational::from_integer(p));
            }
            // Decimal literal such as "0.375": exact base-10 value.
            let (int, frac) = s.split_once('.').ok_or_else(bad)?;
            let digits = format!("{int}{frac}");
            let num = BigInt::from_str(&digits).map_err(|_| bad())?;
            let den = num_traits::pow(BigInt::from(10), frac.len());
            Ok(BigRational::new(num, den))
        }
    }
}

impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Scalar::Exact(r) => serializer.serialize_str(&format_rational(r)),
            Scalar::Float(v) => serializer.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Number(f64),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Text(s) => parse_rational(&s)
                .map(Scalar::Exact)
                .map_err(serde::de::Error::custom),
            Repr::Number(v) => Ok(Scalar::Float(v)),
        }
    }
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    if let (Some(n), Some(d)) = (r.numer().to_f64(), r.denom().to_f64()) {
        if n.is_finite() && d.is_finite() && n.abs() < 9.0e15 && d < 9.0e15 {
            return n / d;
        }
    }
    r.to_f64().unwrap_or(f64::NAN)
}

pub fn f64_to_rational(v: f64) -> Result<BigRational> {
    BigRational::from_float(v).ok_or_else(|| KstError::OutOfDomain(format!("{v} is not finite")))
}

pub fn pow_rational(base: u32, exp: i64) -> BigRational {
    let magnitude = num_traits::pow(BigInt::from(base), exp.unsigned_abs() as usize);
    if exp >= 0 {
        BigRational::from_integer(magnitude)
    } else {
        BigRational::new(BigInt::one(), magnitude)
    }
}

pub fn pow_int(base: u32, exp: u64) -> BigInt {
    num_traits::pow(BigInt::from(base), exp as usize)
}

/// Named transcendental offsets for the reciprocal activation `1/(alpha + x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Transcendental {
    #[default]
    Pi,
    E,
}

impl Transcendental {
    pub fn value(self) -> f64 {
        match self {
            Transcendental::Pi => std::f64::consts::PI,
            Transcendental::E => std::f64::consts::E,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Transcendental::Pi => "pi",
            Transcendental::E => "e",
        }
    }
}

/// Real-analytic, non-polynomial functions usable as the NP activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum AnalyticFn {
    #[default]
    Exp,
}

impl AnalyticFn {
    fn apply(self, x: f64) -> f64 {
        match self {
            AnalyticFn::Exp => x.exp(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            AnalyticFn::Exp => "exp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    ReLU,
    Floor,
    Sine,
    Cosine,
    Exp2,
    Exp3,
    /// Period-1 sawtooth `x - floor(x)`.
    PeriodicSaw,
    Reciprocal(Transcendental),
    AnalyticNP(AnalyticFn),
    Identity,
}

impl ActivationKind {
    pub fn exact_capable(self) -> bool {
        matches!(
            self,
            ActivationKind::ReLU
                | ActivationKind::Floor
                | ActivationKind::PeriodicSaw
                | ActivationKind::Identity
                | ActivationKind::Exp2
                | ActivationKind::Exp3
        )
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::ReLU => f.write_str("relu"),
            ActivationKind::Floor => f.write_str("floor"),
            ActivationKind::Sine => f.write_str("sine"),
            ActivationKind::Cosine => f.write_str("cosine"),
            ActivationKind::Exp2 => f.write_str("exp2"),
            ActivationKind::Exp3 => f.write_str("exp3"),
            ActivationKind::PeriodicSaw => f.write_str("saw"),
            ActivationKind::Reciprocal(a) => write!(f, "reciprocal:{}", a.name()),
            ActivationKind::AnalyticNP(g) => write!(f, "np:{}", g.name()),
            ActivationKind::Identity => f.write_str("identity"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = KstError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "relu" => ActivationKind::ReLU,
            "floor" => ActivationKind::Floor,
            "sine" => ActivationKind::Sine,
            "cosine" => ActivationKind::Cosine,
            "exp2" => ActivationKind::Exp2,
            "exp3" => ActivationKind::Exp3,
            "saw" => ActivationKind::PeriodicSaw,
            "reciprocal:pi" => ActivationKind::Reciprocal(Transcendental::Pi),
            "reciprocal:e" => ActivationKind::Reciprocal(Transcendental::E),
            "np:exp" => ActivationKind::AnalyticNP(AnalyticFn::Exp),
            "identity" => ActivationKind::Identity,
            other => return Err(KstError::Parse(format!("unknown activation `{other}`"))),
        })
    }
}

impl Serialize for ActivationKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ActivationKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Numeric backend shared by the exact and float evaluation paths.
pub trait Arith: Clone + Send + Sync + PartialOrd + fmt::Debug {
    const MODE: Mode;
    fn zero_value() -> Self;
    fn add(&self, other: &Self) -> Self;
    fn mul(&self, other: &Self) -> Self;
    fn is_zero_value(&self) -> bool;
    fn activate(kind: ActivationKind, x: Self) -> Result<Self>;
    /// Lowers a stored weight into this backend (exact -> float is allowed).
    fn lower(s: &Scalar) -> Result<Self>;
    /// Reads an input value; its mode must match the backend.
    fn read(s: &Scalar) -> Result<Self>;
    fn into_scalar(self) -> Scalar;
    fn from_ratio(num: i64, den: i64) -> Self;
}

fn exact_power(base: u32, x: &BigRational) -> Result<BigRational> {
    if !x.is_integer() {
        return Err(KstError::ModeUnsupported(format!(
            "{base}^x at non-integer x = {} is irrational",
            format_rational(x)
        )));
    }
    let k = x
        .to_integer()
        .to_i64()
        .filter(|k| k.abs() <= EXACT_EXPONENT_CAP)
        .ok_or_else(|| KstError::CapExceeded {
            what: format!("exact {base}^x exponent"),
            value: format_rational(x),
            cap: EXACT_EXPONENT_CAP.to_string(),
        })?;
    Ok(pow_rational(base, k))
}

impl Arith for BigRational {
    const MODE: Mode = Mode::Exact;

    fn zero_value() -> Self {
        Zero::zero()
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn is_zero_value(&self) -> bool {
        Zero::is_zero(self)
    }
    fn activate(kind: ActivationKind, x: Self) -> Result<Self> {
        match kind {
            ActivationKind::Identity => Ok(x),
            ActivationKind::ReLU => Ok(if x.is_negative() { Zero::zero() } else { x }),
            ActivationKind::Floor => Ok(x.floor()),
            ActivationKind::PeriodicSaw => {
                let fl = x.floor();
                Ok(x - fl)
            }
            ActivationKind::Exp2 => exact_power(2, &x),
            ActivationKind::Exp3 => exact_power(3, &x),
            other => Err(KstError::ModeUnsupported(format!(
                "activation `{other}` has irrational outputs and cannot run in exact mode"
            ))),
        }
    }
    fn lower(s: &Scalar) -> Result<Self> {
        match s {
            Scalar::Exact(r) => Ok(r.clone()),
            Scalar::Float(_) => Err(KstError::ModeUnsupported(
                "float-valued weights cannot be evaluated in exact mode".into(),
            )),
        }
    }
    fn read(s: &Scalar) -> Result<Self> {
        match s {
            Scalar::Exact(r) => Ok(r.clone()),
            Scalar::Float(_) => Err(KstError::ModeMismatch(
                "float input supplied to an exact evaluation".into(),
            )),
        }
    }
    fn into_scalar(self) -> Scalar {
        Scalar::Exact(self)
    }
    fn from_ratio(num: i64, den: i64) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

impl Arith for f64 {
    const MODE: Mode = Mode::Float;

    fn zero_value() -> Self {
        0.0
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn is_zero_value(&self) -> bool {
        *self == 0.0
    }
    fn activate(kind: ActivationKind, x: Self) -> Result<Self> {
        Ok(match kind {
            ActivationKind::Identity => x,
            ActivationKind::ReLU => x.max(0.0),
            ActivationKind::Floor => x.floor(),
            ActivationKind::PeriodicSaw => x - x.floor(),
            ActivationKind::Sine => x.sin(),
            ActivationKind::Cosine => x.cos(),
            ActivationKind::Exp2 => x.exp2(),
            ActivationKind::Exp3 => 3f64.powf(x),
            ActivationKind::Reciprocal(alpha) => 1.0 / (alpha.value() + x),
            ActivationKind::AnalyticNP(g) => g.apply(x),
        })
    }
    fn lower(s: &Scalar) -> Result<Self> {
        Ok(s.to_f64())
    }
    fn read(s: &Scalar) -> Result<Self> {
        match s {
            Scalar::Float(v) => Ok(*v),
            Scalar::Exact(_) => Err(KstError::ModeMismatch(
                "exact input supplied to a float evaluation".into(),
            )),
        }
    }
    fn into_scalar(self) -> Scalar {
        Scalar::Float(self)
    }
    fn from_ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }
}

pub fn apply_activation(kind: ActivationKind, x: &Scalar) -> Result<Scalar> {
    match x {
        Scalar::Exact(r) => BigRational::activate(kind, r.clone()).map(Scalar::Exact),
        Scalar::Float(v) => {
            if !v.is_finite() {
                return Err(KstError::OutOfDomain(format!("{v} is not finite")));
            }
            f64::activate(kind, *v).map(Scalar::Float)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gadget {
    /// `1_{x >= 0}` from ReLU and floor.
    Indicator,
    /// Period-1 sawtooth from two ReLUs and a floor.
    Sawtooth,
    /// Piecewise-linear ramp with knee at `cos(4*pi/9)`.
    RampT,
    /// Clamp to `[0, 1]` from two ReLUs.
    Filter,
}

/// Evaluates a gadget as its literal ReLU/floor composition.
pub fn eval_gadget(kind: Gadget, x: &Scalar) -> Result<Scalar> {
    use ActivationKind::{Floor, ReLU};
    let mode = x.mode();
    let c = |num: i64| -> Result<Scalar> { Scalar::int(num).convert(mode) };
    let relu = |v: &Scalar| apply_activation(ReLU, v);
    let floor = |v: &Scalar| apply_activation(Floor, v);
    let neg = |v: &Scalar| -> Result<Scalar> { c(0)?.try_sub(v) };
    match kind {
        Gadget::Indicator => {
            // floor(-relu(-relu(x + 1) + 1) + 1)
            let a = relu(&x.try_add(&c(1)?)?)?;
            let b = relu(&neg(&a)?.try_add(&c(1)?)?)?;
            floor(&neg(&b)?.try_add(&c(1)?)?)
        }
        Gadget::Sawtooth => {
            // relu(x) - relu(-x) - floor(x)
            let pos = relu(x)?;
            let negpart = relu(&neg(x)?)?;
            pos.try_sub(&negpart)?.try_sub(&floor(x)?)
        }
        Gadget::RampT => {
            let Scalar::Float(v) = x else {
                return Err(KstError::ModeUnsupported(
                    "the ramp gadget divides by cos(4*pi/9), which is irrational".into(),
                ));
            };
            let knee = (4.0 * std::f64::consts::PI / 9.0).cos();
            let inner = (-v / knee + 1.0).max(0.0);
            let outer = (-inner + 1.0).max(0.0);
            Ok(Scalar::Float(-outer + 1.0))
        }
        Gadget::Filter => {
            // -relu(-relu(x) + 1) + 1
            let a = relu(x)?;
            let b = relu(&neg(&a)?.try_add(&c(1)?)?)?;
            neg(&b)?.try_add(&c(1)?)
        }
    }
}

/// Floor of an exact rational as a big integer.
pub fn floor_int(r: &BigRational) -> BigInt {
    r.numer().div_floor(r.denom())
}
