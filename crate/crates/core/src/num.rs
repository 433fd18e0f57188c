//! Arithmetic backends for the engine.
//!
//! Two modes share one [`Scalar`] interface:
//!
//! * [`Exact`] wraps an arbitrary-precision rational (malachite). Every closed-form
//!   premium curve is a rational function, so reserve identities hold with
//!   exact equality in this mode.
//! * [`Dec`] is a 38-significant-digit decimal with round-half-even after
//!   every operation.
//!
//! The amortization index `exp(-q t)` is irrational; it is produced once per
//! timestamp by [`exp_neg`] as a correctly rounded 38-digit decimal and then
//! converted losslessly into either mode.

use std::cmp::Ordering;
use std::fmt;
use std::num::NonZeroU64;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;
use std::sync::OnceLock;

use bigdecimal::{BigDecimal, Context, RoundingMode};
use malachite_base::num::arithmetic::traits::{Ceiling, Floor};
use malachite_base::num::basic::traits::{One as _, Zero as _};
use malachite_nz::integer::Integer as MInteger;
use malachite_nz::natural::Natural;
use malachite_q::Rational;
use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Significant digits carried by [`Dec`] and by the amortization index.
pub const DECIMAL_DIGITS: u64 = 38;

/// Working precision used while evaluating the exponential.
const EXP_WORKING_DIGITS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumError {
    #[error("invalid decimal literal `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Rational,
    Decimal,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Rational => f.write_str("rational"),
            Mode::Decimal => f.write_str("decimal"),
        }
    }
}

impl FromStr for Mode {
    type Err = NumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rational" => Ok(Mode::Rational),
            "decimal" => Ok(Mode::Decimal),
            other => Err(NumError::Parse(other.to_string())),
        }
    }
}

/// Number type the engine is generic over.
pub trait Scalar:
    Clone
    + fmt::Debug
    + fmt::Display
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    const MODE: Mode;

    fn from_ratio(r: &BigRational) -> Self;
    fn to_ratio(&self) -> BigRational;
    fn to_f64(&self) -> f64;

    fn zero() -> Self {
        Self::from_ratio(&BigRational::zero())
    }

    fn one() -> Self {
        Self::from_ratio(&BigRational::one())
    }

    fn from_i64(v: i64) -> Self {
        Self::from_ratio(&BigRational::from_integer(BigInt::from(v)))
    }

    fn parse(s: &str) -> Result<Self, NumError> {
        parse_ratio(s).map(|r| Self::from_ratio(&r))
    }

    fn is_zero(&self) -> bool {
        *self == Self::zero()
    }

    fn is_negative(&self) -> bool {
        *self < Self::zero()
    }

    fn is_positive(&self) -> bool {
        *self > Self::zero()
    }

    fn abs(&self) -> Self {
        if self.is_negative() {
            -self.clone()
        } else {
            self.clone()
        }
    }

    fn min_of(a: Self, b: Self) -> Self {
        if b < a {
            b
        } else {
            a
        }
    }

    /// Largest multiple of `quantum` not above `self`.
    fn floor_to(&self, quantum: &Self) -> Self {
        let q = quantum.to_ratio();
        let n = (self.to_ratio() / &q).floor();
        Self::from_ratio(&(n * q))
    }

    /// Smallest multiple of `quantum` not below `self`.
    fn ceil_to(&self, quantum: &Self) -> Self {
        let q = quantum.to_ratio();
        let n = (self.to_ratio() / &q).ceil();
        Self::from_ratio(&(n * q))
    }

    /// `|self - other| <= rel * max(|self|, |other|, floor)`.
    fn approx_eq(&self, other: &Self, rel: f64, floor: f64) -> bool {
        if self == other {
            return true;
        }
        let a = self.to_ratio();
        let b = other.to_ratio();
        let diff = (&a - &b).abs();
        let scale = a.abs().max(b.abs()).max(ratio_from_f64(floor));
        diff <= scale * ratio_from_f64(rel)
    }
}

/// Exact rational scalar.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Exact(Rational);

fn natural_from(b: &BigUint) -> Natural {
    Natural::from_limbs_asc(&b.to_u64_digits())
}

fn biguint_from(n: &Natural) -> BigUint {
    let mut words = Vec::new();
    for limb in n.to_limbs_asc() {
        let limb = limb as u64;
        words.push(limb as u32);
        words.push((limb >> 32) as u32);
    }
    BigUint::new(words)
}

impl Scalar for Exact {
    const MODE: Mode = Mode::Rational;

    fn from_ratio(r: &BigRational) -> Self {
        Exact(Rational::from_sign_and_naturals(
            !r.is_negative(),
            natural_from(r.numer().magnitude()),
            natural_from(r.denom().magnitude()),
        ))
    }

    fn to_ratio(&self) -> BigRational {
        let sign = if self.0 < Rational::ZERO { Sign::Minus } else { Sign::Plus };
        let num = BigInt::from_biguint(sign, biguint_from(&self.0.to_numerator()));
        let den = BigInt::from_biguint(Sign::Plus, biguint_from(&self.0.to_denominator()));
        BigRational::new_raw(num, den)
    }

    fn to_f64(&self) -> f64 {
        ratio_to_f64(&self.to_ratio())
    }

    fn zero() -> Self {
        Exact(Rational::ZERO)
    }

    fn one() -> Self {
        Exact(Rational::ONE)
    }

    fn from_i64(v: i64) -> Self {
        Exact(Rational::from(v))
    }

    fn is_zero(&self) -> bool {
        self.0 == Rational::ZERO
    }

    fn is_negative(&self) -> bool {
        self.0 < Rational::ZERO
    }

    fn is_positive(&self) -> bool {
        self.0 > Rational::ZERO
    }

    fn floor_to(&self, quantum: &Self) -> Self {
        let n: MInteger = (&self.0 / &quantum.0).floor();
        Exact(Rational::from(n) * &quantum.0)
    }

    fn ceil_to(&self, quantum: &Self) -> Self {
        let n: MInteger = (&self.0 / &quantum.0).ceiling();
        Exact(Rational::from(n) * &quantum.0)
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_ratio(&self.to_ratio()))
    }
}

macro_rules! exact_binop {
    ($tr:ident, $m:ident, $op:tt) => {
        impl $tr for Exact {
            type Output = Exact;
            fn $m(self, rhs: Exact) -> Exact {
                Exact(self.0 $op rhs.0)
            }
        }
    };
}

exact_binop!(Add, add, +);
exact_binop!(Sub, sub, -);
exact_binop!(Mul, mul, *);
exact_binop!(Div, div, /);

impl Neg for Exact {
    type Output = Exact;
    fn neg(self) -> Exact {
        Exact(-self.0)
    }
}

/// 38-digit decimal, round-half-even after every operation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Dec(BigDecimal);

impl Dec {
    fn rounded(v: BigDecimal) -> Dec {
        Dec(round_sig(&v))
    }

    pub fn as_bigdecimal(&self) -> &BigDecimal {
        &self.0
    }
}

impl Scalar for Dec {
    const MODE: Mode = Mode::Decimal;

    fn from_ratio(r: &BigRational) -> Self {
        Dec(round_ratio(r, DECIMAL_DIGITS))
    }

    fn to_ratio(&self) -> BigRational {
        decimal_to_ratio(&self.0)
    }

    fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    fn zero() -> Self {
        Dec(BigDecimal::zero())
    }

    fn one() -> Self {
        Dec(BigDecimal::one())
    }

    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    fn approx_eq(&self, other: &Self, rel: f64, floor: f64) -> bool {
        if self == other {
            return true;
        }
        let (Ok(rel), Ok(floor)) = (BigDecimal::try_from(rel), BigDecimal::try_from(floor)) else {
            return false;
        };
        let diff = (&self.0 - &other.0).abs();
        let scale = self.0.abs().max(other.0.abs()).max(floor);
        diff <= scale * rel
    }

    fn floor_to(&self, quantum: &Self) -> Self {
        let (n, q, scale) = quantum_steps(&self.0, &quantum.0);
        Dec::rounded(BigDecimal::new(n.div_floor(&q) * quantum_mantissa(&quantum.0), scale))
    }

    fn ceil_to(&self, quantum: &Self) -> Self {
        let (n, q, scale) = quantum_steps(&self.0, &quantum.0);
        Dec::rounded(BigDecimal::new(n.div_ceil(&q) * quantum_mantissa(&quantum.0), scale))
    }
}

/// `value / quantum` as an integer fraction `n / q`, plus the quantum's scale.
fn quantum_steps(value: &BigDecimal, quantum: &BigDecimal) -> (BigInt, BigInt, i64) {
    let (mv, sv) = value.as_bigint_and_exponent();
    let (mq, sq) = quantum.as_bigint_and_exponent();
    let shift = sq - sv;
    if shift >= 0 {
        (mv * pow10(shift as u64), mq, sq)
    } else {
        (mv, mq * pow10(shift.unsigned_abs()), sq)
    }
}

fn quantum_mantissa(quantum: &BigDecimal) -> BigInt {
    quantum.as_bigint_and_exponent().0
}

impl fmt::Display for Dec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&plain(&self.0))
    }
}

impl Add for Dec {
    type Output = Dec;
    fn add(self, rhs: Dec) -> Dec {
        Dec::rounded(self.0 + rhs.0)
    }
}

impl Sub for Dec {
    type Output = Dec;
    fn sub(self, rhs: Dec) -> Dec {
        Dec::rounded(self.0 - rhs.0)
    }
}

impl Mul for Dec {
    type Output = Dec;
    fn mul(self, rhs: Dec) -> Dec {
        Dec::rounded(self.0 * rhs.0)
    }
}

impl Div for Dec {
    type Output = Dec;
    fn div(self, rhs: Dec) -> Dec {
        // Divide the integer mantissas exactly so the result is rounded once.
        let (ma, sa) = self.0.as_bigint_and_exponent();
        let (mb, sb) = rhs.0.as_bigint_and_exponent();
        let (mut num, mut den) = (ma, mb);
        if den.is_negative() {
            num = -num;
            den = -den;
        }
        let shift = sb - sa;
        if shift >= 0 {
            num *= pow10(shift as u64);
        } else {
            den *= pow10(shift.unsigned_abs());
        }
        Dec(round_ratio(&BigRational::new_raw(num, den), DECIMAL_DIGITS))
    }
}

impl Neg for Dec {
    type Output = Dec;
    fn neg(self) -> Dec {
        Dec(-self.0)
    }
}

/// Value that is either finite or the explicit infinite sentinel.
///
/// No arithmetic is defined on the sentinel; callers must branch on it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Extended<S> {
    Finite(S),
    Infinite,
}

impl<S: Scalar> Extended<S> {
    pub fn is_finite(&self) -> bool {
        matches!(self, Extended::Finite(_))
    }

    pub fn finite(&self) -> Option<&S> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::Infinite => None,
        }
    }

    pub fn into_finite(self) -> Option<S> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::Infinite => None,
        }
    }
}

impl<S: Scalar> PartialOrd for Extended<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Extended::Infinite, Extended::Infinite) => Some(Ordering::Equal),
            (Extended::Infinite, _) => Some(Ordering::Greater),
            (_, Extended::Infinite) => Some(Ordering::Less),
            (Extended::Finite(a), Extended::Finite(b)) => a.partial_cmp(b),
        }
    }
}

impl<S: Scalar> fmt::Display for Extended<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Finite(v) => fmt::Display::fmt(v, f),
            Extended::Infinite => f.write_str("inf"),
        }
    }
}

/// Parses a decimal literal (`"1.5"`, `"-2"`, `"1e-18"`) into an exact rational.
pub fn parse_ratio(s: &str) -> Result<BigRational, NumError> {
    let d = BigDecimal::from_str(s.trim()).map_err(|_| NumError::Parse(s.to_string()))?;
    Ok(decimal_to_ratio(&d))
}

pub fn decimal_to_ratio(d: &BigDecimal) -> BigRational {
    let (digits, scale) = d.as_bigint_and_exponent();
    if scale >= 0 {
        BigRational::new(digits, pow10(scale as u64))
    } else {
        BigRational::from_integer(digits * pow10(scale.unsigned_abs()))
    }
}

pub fn pow10(exp: u64) -> BigInt {
    const CACHED: usize = 160;
    static TABLE: OnceLock<Vec<BigInt>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut v = Vec::with_capacity(CACHED);
        let mut p = BigInt::one();
        for _ in 0..CACHED {
            v.push(p.clone());
            p *= 10u8;
        }
        v
    });
    match table.get(exp as usize) {
        Some(p) => p.clone(),
        None => num_traits::pow(BigInt::from(10u8), exp as usize),
    }
}

fn ratio_from_f64(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap_or_else(BigRational::zero)
}

fn ratio_to_f64(r: &BigRational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    match (r.numer().to_f64(), r.denom().to_f64()) {
        (Some(n), Some(d)) if n.is_finite() && d.is_finite() => n / d,
        _ => round_ratio(r, 20).to_f64().unwrap_or(f64::NAN),
    }
}

fn plain(d: &BigDecimal) -> String {
    if d.is_zero() {
        return "0".to_string();
    }
    d.normalized().to_plain_string()
}

fn decimal_digits(n: &BigInt) -> i64 {
    if n.is_zero() {
        return 1;
    }
    n.abs().to_str_radix(10).len() as i64
}

fn round_sig(v: &BigDecimal) -> BigDecimal {
    v.with_precision_round(NonZeroU64::new(DECIMAL_DIGITS).unwrap(), RoundingMode::HalfEven)
}

/// Rounds an exact rational to `digits` significant decimal digits, half-even.
/// The fraction need not be in lowest terms but its denominator must be positive.
pub fn round_ratio(r: &BigRational, digits: u64) -> BigDecimal {
    if r.is_zero() {
        return BigDecimal::zero();
    }
    let neg = r.is_negative();
    let num = r.numer().abs();
    let den = r.denom().clone();
    // Choose a scale so that |r| * 10^scale lies in [10^(digits-1), 10^digits).
    let mag = decimal_digits(&num) - decimal_digits(&den);
    let mut scale = digits as i64 - 1 - mag;
    let lower = pow10(digits - 1);
    let (mut q, mut rem, mut d) = scaled_divrem(&num, &den, scale);
    if q < lower {
        scale += 1;
        (q, rem, d) = scaled_divrem(&num, &den, scale);
    }
    let twice = &rem * 2u8;
    let round_up = match twice.cmp(&d) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => q.is_odd(),
    };
    if round_up {
        q += 1u8;
    }
    let q = if neg { -q } else { q };
    BigDecimal::new(q, scale).normalized()
}

fn scaled_divrem(num: &BigInt, den: &BigInt, scale: i64) -> (BigInt, BigInt, BigInt) {
    let (n, d) = if scale >= 0 {
        (num * pow10(scale as u64), den.clone())
    } else {
        (num.clone(), den * pow10(scale.unsigned_abs()))
    };
    let (q, r) = n.div_rem(&d);
    (q, r, d)
}

/// Renders a rational as a decimal string: exact when the expansion
/// terminates, otherwise rounded to 38 significant digits.
pub fn format_ratio(r: &BigRational) -> String {
    if r.is_zero() {
        return "0".to_string();
    }
    let mut den = r.denom().clone();
    let (mut twos, mut fives) = (0u64, 0u64);
    let two = BigInt::from(2u8);
    let five = BigInt::from(5u8);
    while (&den % &two).is_zero() {
        den /= &two;
        twos += 1;
    }
    while (&den % &five).is_zero() {
        den /= &five;
        fives += 1;
    }
    if den.is_one() {
        let scale = twos.max(fives);
        let digits = r.numer() * pow10(scale) / r.denom();
        plain(&BigDecimal::new(digits, scale as i64))
    } else {
        plain(&round_ratio(r, DECIMAL_DIGITS))
    }
}

/// `exp(-x)` for `x >= 0`, correctly rounded to 38 significant digits.
pub fn exp_neg(x: &BigRational) -> BigRational {
    if x.is_zero() {
        return BigRational::one();
    }
    let arg = -round_ratio(x, EXP_WORKING_DIGITS);
    let ctx = Context::new(
        NonZeroU64::new(EXP_WORKING_DIGITS).unwrap(),
        RoundingMode::HalfEven,
    );
    let wide = arg.exp_with_context(&ctx);
    decimal_to_ratio(&round_ratio(&decimal_to_ratio(&wide), DECIMAL_DIGITS))
}

/// Sign of a rational as -1, 0, 1.
pub fn signum(r: &BigRational) -> i8 {
    match r.numer().sign() {
        Sign::Minus => -1,
        Sign::NoSign => 0,
        Sign::Plus => 1,
    }
}
