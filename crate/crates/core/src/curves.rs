//! Premium curves and the perspective cost function.
//!
//! A curve is described by its marginal premium `P(U)` on utilization
//! `U = X / C`. Its running integral `phi(U)` is the net premium, and the
//! perspective `Phi(X, C) = C * phi(X / C)` is the reserve the pool must hold
//! for open interest `X` against collateral `C`. Every market operation is
//! priced as a difference of `Phi`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{Extended, NumError, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CurveError {
    #[error("utilization {0} outside [0, 1]")]
    Domain(String),
    #[error("negative input: {0}")]
    NegativeInput(String),
    #[error("operation endpoint ({x}, {c}) has infinite total premium")]
    InfeasibleEndpoint { x: String, c: String },
    #[error("invalid premium table: {0}")]
    InvalidTable(String),
    #[error("invalid curve specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

impl fmt::Display for OptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptionKind::Call => f.write_str("call"),
            OptionKind::Put => f.write_str("put"),
        }
    }
}

/// Utilization `X / C`, always inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Utilization<S>(S);

impl<S: Scalar> Utilization<S> {
    pub fn new(u: S) -> Result<Self, CurveError> {
        if u.is_negative() || u > S::one() {
            return Err(CurveError::Domain(u.to_string()));
        }
        Ok(Utilization(u))
    }

    /// `X / C`, with `U = 0` on the empty market. `X > C` is rejected.
    pub fn of(open_interest: &S, collateral: &S) -> Result<Self, CurveError> {
        if open_interest.is_negative() || collateral.is_negative() {
            return Err(CurveError::NegativeInput(format!(
                "X = {open_interest}, C = {collateral}"
            )));
        }
        if open_interest.is_zero() {
            return Ok(Utilization(S::zero()));
        }
        if collateral.is_zero() || open_interest > collateral {
            return Err(CurveError::Domain(format!("{open_interest} / {collateral}")));
        }
        Ok(Utilization(open_interest.clone() / collateral.clone()))
    }

    pub fn value(&self) -> &S {
        &self.0
    }
}

/// Piecewise-linear premium table with the running integral cached at nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PremiumTable<S> {
    points: Vec<(S, S)>,
    cumulative: Vec<S>,
}

impl<S: Scalar> PremiumTable<S> {
    /// Rows must start at `u = 0`, end at `u = 1`, and have non-decreasing
    /// `u`. A repeated `u` encodes a jump (the right value applies at the node).
    pub fn new(points: Vec<(S, S)>) -> Result<Self, CurveError> {
        if points.len() < 2 {
            return Err(CurveError::InvalidTable("need at least two rows".into()));
        }
        if !points[0].0.is_zero() {
            return Err(CurveError::InvalidTable("first row must be at u = 0".into()));
        }
        if points[points.len() - 1].0 != S::one() {
            return Err(CurveError::InvalidTable("last row must be at u = 1".into()));
        }
        for w in points.windows(2) {
            if w[1].0 < w[0].0 {
                return Err(CurveError::InvalidTable(format!(
                    "u must be non-decreasing ({} after {})",
                    w[1].0, w[0].0
                )));
            }
        }
        if let Some((u, p)) = points.iter().find(|(_, p)| p.is_negative()) {
            return Err(CurveError::InvalidTable(format!("negative premium {p} at u = {u}")));
        }
        let two = S::from_i64(2);
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = S::zero();
        cumulative.push(acc.clone());
        for w in points.windows(2) {
            let width = w[1].0.clone() - w[0].0.clone();
            acc = acc + width * (w[0].1.clone() + w[1].1.clone()) / two.clone();
            cumulative.push(acc.clone());
        }
        Ok(PremiumTable { points, cumulative })
    }

    pub fn points(&self) -> &[(S, S)] {
        &self.points
    }

    pub fn has_jumps(&self) -> bool {
        self.points.windows(2).any(|w| w[0].0 == w[1].0)
    }

    // Last node with u_i <= u; the next node (if any) is strictly to the right.
    fn segment(&self, u: &S) -> usize {
        self.points.partition_point(|(ui, _)| ui <= u) - 1
    }

    fn premium(&self, u: &S) -> S {
        let i = self.segment(u);
        if i + 1 == self.points.len() {
            return self.points[i].1.clone();
        }
        let (u0, p0) = &self.points[i];
        let (u1, p1) = &self.points[i + 1];
        p0.clone() + (p1.clone() - p0.clone()) * (u.clone() - u0.clone()) / (u1.clone() - u0.clone())
    }

    fn net_premium(&self, u: &S) -> S {
        let i = self.segment(u);
        let (u0, p0) = &self.points[i];
        let partial = (u.clone() - u0.clone()) * (p0.clone() + self.premium(u)) / S::from_i64(2);
        self.cumulative[i].clone() + partial
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CurveForm<S> {
    /// `P(U) = 2U / (1 - U)^3`, `phi(U) = (U / (1 - U))^2`.
    StandardCall,
    /// `P(U) = K U`, `phi(U) = K U^2 / 2`.
    StandardPut,
    Table(PremiumTable<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PremiumCurve<S> {
    pub kind: OptionKind,
    pub strike: S,
    pub form: CurveForm<S>,
    /// Claim that `phi(U) -> inf` as `U -> 1`, so the pool can never be fully
    /// utilized at finite cost.
    pub strict_solvency: bool,
}

impl<S: Scalar> PremiumCurve<S> {
    pub fn standard_call(strike: S) -> Self {
        PremiumCurve {
            kind: OptionKind::Call,
            strike,
            form: CurveForm::StandardCall,
            strict_solvency: true,
        }
    }

    pub fn standard_put(strike: S) -> Self {
        PremiumCurve {
            kind: OptionKind::Put,
            strike,
            form: CurveForm::StandardPut,
            strict_solvency: false,
        }
    }

    pub fn table(
        kind: OptionKind,
        strike: S,
        points: Vec<(S, S)>,
        strict_solvency: bool,
    ) -> Result<Self, CurveError> {
        Ok(PremiumCurve {
            kind,
            strike,
            form: CurveForm::Table(PremiumTable::new(points)?),
            strict_solvency,
        })
    }

    fn check_unit(u: &S) -> Result<(), CurveError> {
        if u.is_negative() || *u > S::one() {
            return Err(CurveError::Domain(u.to_string()));
        }
        Ok(())
    }

    /// Marginal premium `P(u)`.
    pub fn premium(&self, u: &S) -> Result<Extended<S>, CurveError> {
        Self::check_unit(u)?;
        let one = S::one();
        Ok(match &self.form {
            CurveForm::StandardCall => {
                if *u == one {
                    Extended::Infinite
                } else {
                    let idle = one - u.clone();
                    Extended::Finite(S::from_i64(2) * u.clone() / (idle.clone() * idle.clone() * idle))
                }
            }
            CurveForm::StandardPut => Extended::Finite(self.strike.clone() * u.clone()),
            CurveForm::Table(t) => Extended::Finite(t.premium(u)),
        })
    }

    /// Net premium `phi(u) = integral of P over [0, u]`.
    pub fn net_premium(&self, u: &S) -> Result<Extended<S>, CurveError> {
        Self::check_unit(u)?;
        let one = S::one();
        Ok(match &self.form {
            CurveForm::StandardCall => {
                if *u == one {
                    Extended::Infinite
                } else {
                    let odds = u.clone() / (one - u.clone());
                    Extended::Finite(odds.clone() * odds)
                }
            }
            CurveForm::StandardPut => {
                Extended::Finite(self.strike.clone() * u.clone() * u.clone() / S::from_i64(2))
            }
            CurveForm::Table(t) => Extended::Finite(t.net_premium(u)),
        })
    }

    /// Total premium `Phi(X, C)`: the perspective of `phi`, infinite when `X > C`.
    pub fn total_premium(&self, open_interest: &S, collateral: &S) -> Result<Extended<S>, CurveError> {
        let (x, c) = (open_interest, collateral);
        if x.is_negative() || c.is_negative() {
            return Err(CurveError::NegativeInput(format!("X = {x}, C = {c}")));
        }
        if x.is_zero() {
            return Ok(Extended::Finite(S::zero()));
        }
        if x > c {
            return Ok(Extended::Infinite);
        }
        Ok(match &self.form {
            CurveForm::StandardCall => {
                if x == c {
                    Extended::Infinite
                } else {
                    let idle = c.clone() - x.clone();
                    let sq = x.clone() * x.clone();
                    Extended::Finite(c.clone() * sq / (idle.clone() * idle))
                }
            }
            CurveForm::StandardPut => Extended::Finite(
                self.strike.clone() * x.clone() * x.clone() / (S::from_i64(2) * c.clone()),
            ),
            CurveForm::Table(t) => Extended::Finite(c.clone() * t.net_premium(&(x.clone() / c.clone()))),
        })
    }

    /// Finite `Phi(X, C)` or an infeasible-endpoint error.
    pub fn total_premium_finite(&self, open_interest: &S, collateral: &S) -> Result<S, CurveError> {
        self.total_premium(open_interest, collateral)?
            .into_finite()
            .ok_or_else(|| CurveError::InfeasibleEndpoint {
                x: open_interest.to_string(),
                c: collateral.to_string(),
            })
    }

    /// Cost of moving the state from `(X, C)` to `(X + dx, C + dc)`.
    /// Positive is paid into the pool, negative is a rebate.
    pub fn delta_phi(&self, open_interest: &S, dx: &S, collateral: &S, dc: &S) -> Result<S, CurveError> {
        let x1 = open_interest.clone() + dx.clone();
        let c1 = collateral.clone() + dc.clone();
        if x1.is_negative() || c1.is_negative() {
            return Err(CurveError::NegativeInput(format!(
                "operation ({dx}, {dc}) leaves ({x1}, {c1})"
            )));
        }
        let before = self.total_premium_finite(open_interest, collateral)?;
        let after = self.total_premium_finite(&x1, &c1)?;
        Ok(after - before)
    }

    /// Whether `phi(U)` is unbounded as `U -> 1`.
    pub fn unbounded_at_full_utilization(&self) -> bool {
        matches!(self.net_premium(&S::one()), Ok(Extended::Infinite))
    }

    /// Samples the curve on `grid_size` evenly spaced utilizations and checks
    /// the premium-function conditions.
    pub fn validate(&self, grid_size: usize) -> ValidationReport {
        validate_curve(self, grid_size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub kind: OptionKind,
    pub grid_size: usize,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    /// Whether `phi` is unbounded at full utilization.
    pub strict_solvency: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} curve, {} grid points", self.kind, self.grid_size)?;
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "  [{tag}] {}: {}", c.name, c.detail)?;
        }
        for w in &self.warnings {
            writeln!(f, "  [warn] {w}")?;
        }
        write!(f, "  strict_solvency = {}", self.strict_solvency)
    }
}

fn check(name: &'static str, failure: Option<String>, ok: &str) -> Check {
    match failure {
        None => Check { name, passed: true, detail: ok.to_string() },
        Some(detail) => Check { name, passed: false, detail },
    }
}

/// Grid validation of a premium curve. Failures are report entries, never errors.
pub fn validate_curve<S: Scalar>(curve: &PremiumCurve<S>, grid_size: usize) -> ValidationReport {
    let grid_size = grid_size.max(2);
    let steps = S::from_i64(grid_size as i64 - 1);
    let grid: Vec<S> = (0..grid_size)
        .map(|k| S::from_i64(k as i64) / steps.clone())
        .collect();
    let premiums: Vec<Extended<S>> = grid.iter().map(|u| curve.premium(u).unwrap()).collect();
    let phis: Vec<Extended<S>> = grid.iter().map(|u| curve.net_premium(u).unwrap()).collect();
    let mut checks = Vec::new();
    let mut warnings = Vec::new();

    let monotone = premiums
        .windows(2)
        .zip(grid.windows(2))
        .find(|(p, _)| p[1] < p[0])
        .map(|(p, u)| format!("P({}) = {} < P({}) = {}", u[1], p[1], u[0], p[0]));
    checks.push(check("premium_non_decreasing", monotone, "P non-decreasing on the grid"));

    let positive = premiums
        .iter()
        .zip(&grid)
        .skip(1)
        .find(|(p, _)| **p <= Extended::Finite(S::zero()))
        .map(|(p, u)| format!("P({u}) = {p} is not positive"));
    checks.push(check("premium_positive", positive, "P(U) > 0 for U > 0"));

    checks.push(limit_check(curve));

    let origin = match &phis[0] {
        Extended::Finite(v) if v.is_zero() => None,
        other => Some(format!("phi(0) = {other}")),
    };
    checks.push(check("net_premium_zero_at_origin", origin, "phi(0) = 0"));

    let increasing = phis
        .windows(2)
        .zip(grid.windows(2))
        .find(|(p, _)| p[1] <= p[0] && p[0].is_finite())
        .map(|(p, u)| format!("phi({}) = {} <= phi({}) = {}", u[1], p[1], u[0], p[0]));
    checks.push(check("net_premium_strictly_increasing", increasing, "phi strictly increasing"));

    // Rounded decimal values of an affine stretch can show a second
    // difference of a few units in the last place.
    let slack = match S::MODE {
        crate::num::Mode::Rational => 0.0,
        crate::num::Mode::Decimal => 1e-30,
    };
    let convex = phis.windows(3).zip(grid.windows(3)).find_map(|(p, u)| {
        let (a, b, c) = (p[0].finite()?, p[1].finite()?, p[2].finite()?);
        let second = a.clone() - S::from_i64(2) * b.clone() + c.clone();
        let tol = S::from_ratio(&num_rational::BigRational::from_float(slack).unwrap())
            * c.abs();
        (second < -tol).then(|| format!("second difference {second} < 0 at u = {}", u[1]))
    });
    checks.push(check("net_premium_convex", convex, "phi convex (second differences >= 0)"));

    let derivative = derivative_mismatch(curve, &grid);
    match (&curve.form, derivative) {
        (CurveForm::Table(_), Some(msg)) => {
            warnings.push(format!("net premium derivative differs from P: {msg}"));
            checks.push(check("net_premium_derivative", None, "phi' = P (table; see warnings)"));
        }
        (_, d) => checks.push(check("net_premium_derivative", d, "phi' matches P within 1e-9")),
    }
    if let CurveForm::Table(t) = &curve.form {
        if t.has_jumps() {
            warnings.push("table has jump discontinuities; phi' = P only holds between jumps".into());
        }
    }

    let unbounded = phis.last().map(|p| !p.is_finite()).unwrap_or(false);
    let strict = if curve.strict_solvency && !unbounded {
        Some(format!("strict_solvency claimed but phi(1) = {}", phis[grid_size - 1]))
    } else {
        None
    };
    checks.push(check(
        "strict_solvency",
        strict,
        if unbounded { "phi(U) -> inf as U -> 1" } else { "bounded phi, not claimed strict" },
    ));
    if curve.kind == OptionKind::Call && !unbounded {
        warnings.push(
            "call curve with bounded phi: full utilization is reachable at finite cost".into(),
        );
    }

    ValidationReport {
        kind: curve.kind,
        grid_size,
        checks,
        warnings,
        strict_solvency: unbounded,
    }
}

fn limit_check<S: Scalar>(curve: &PremiumCurve<S>) -> Check {
    let one = S::one();
    let at_one = curve.premium(&one).unwrap();
    let approach: Vec<Extended<S>> = (1..=12)
        .map(|k| {
            let h = S::one() / S::parse(&format!("1e{k}")).unwrap();
            curve.premium(&(one.clone() - h)).unwrap()
        })
        .collect();
    let failure = match curve.kind {
        OptionKind::Call => {
            if at_one.is_finite() {
                Some(format!("call premium P(1) = {at_one} must be infinite"))
            } else if approach.windows(2).any(|w| w[1] <= w[0]) {
                Some("call premium does not grow as U -> 1".to_string())
            } else {
                None
            }
        }
        OptionKind::Put => {
            let k = Extended::Finite(curve.strike.clone());
            let near = approach[8].finite().cloned();
            if at_one != k {
                Some(format!("put premium P(1) = {at_one} must equal K = {}", curve.strike))
            } else {
                match near {
                    Some(p) if p.approx_eq(&curve.strike, 1e-6, 0.0) => None,
                    Some(p) => Some(format!("P(1 - 1e-9) = {p} does not approach K = {}", curve.strike)),
                    None => Some("put premium is infinite below U = 1".to_string()),
                }
            }
        }
    };
    let ok = match curve.kind {
        OptionKind::Call => "P(U) -> inf as U -> 1",
        OptionKind::Put => "P(U) -> K as U -> 1",
    };
    check("limit_at_full_utilization", failure, ok)
}

fn derivative_mismatch<S: Scalar>(curve: &PremiumCurve<S>, grid: &[S]) -> Option<String> {
    let one = S::one();
    let two = S::from_i64(2);
    let base_step = S::parse("1e-8").unwrap();
    let scale = S::parse("1e-8").unwrap();
    for u in &grid[1..grid.len() - 1] {
        let step = S::min_of(base_step.clone(), (one.clone() - u.clone()) * scale.clone());
        let step = S::min_of(step, u.clone() * scale.clone());
        let hi = curve.net_premium(&(u.clone() + step.clone())).ok()?.into_finite()?;
        let lo = curve.net_premium(&(u.clone() - step.clone())).ok()?.into_finite()?;
        let numeric = (hi - lo) / (two.clone() * step);
        let exact = curve.premium(u).ok()?.into_finite()?;
        if !numeric.approx_eq(&exact, 1e-9, 1e-12) {
            return Some(format!("at u = {u}: finite difference {numeric} vs P = {exact}"));
        }
    }
    None
}

/// JSON curve description used by scenario and CLI configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub kind: OptionKind,
    #[serde(default = "default_strike")]
    pub strike: String,
    pub form: CurveFormSpec,
    #[serde(default)]
    pub table: Vec<(String, String)>,
    #[serde(default)]
    pub strict_solvency: Option<bool>,
}

fn default_strike() -> String {
    "1".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveFormSpec {
    #[serde(rename = "paper_example", alias = "standard")]
    Standard,
    Table,
}

impl CurveSpec {
    pub fn standard(kind: OptionKind, strike: &str) -> Self {
        CurveSpec {
            kind,
            strike: strike.to_string(),
            form: CurveFormSpec::Standard,
            table: Vec::new(),
            strict_solvency: None,
        }
    }

    pub fn build<S: Scalar>(&self) -> Result<PremiumCurve<S>, CurveError> {
        let strike = S::parse(&self.strike)?;
        if !strike.is_positive() {
            return Err(CurveError::InvalidSpec(format!("strike {strike} must be positive")));
        }
        let mut curve = match self.form {
            CurveFormSpec::Standard => match self.kind {
                OptionKind::Call => PremiumCurve::standard_call(strike),
                OptionKind::Put => PremiumCurve::standard_put(strike),
            },
            CurveFormSpec::Table => {
                let rows = self
                    .table
                    .iter()
                    .map(|(u, p)| Ok((S::parse(u)?, S::parse(p)?)))
                    .collect::<Result<Vec<_>, NumError>>()?;
                let strict = self.strict_solvency.unwrap_or(false);
                PremiumCurve::table(self.kind, strike, rows, strict)?
            }
        };
        if let Some(strict) = self.strict_solvency {
            curve.strict_solvency = strict;
        }
        Ok(curve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{Dec, Exact};

    fn e(s: &str) -> Exact {
        Exact::parse(s).unwrap()
    }

    fn fin(v: Extended<Exact>) -> Exact {
        v.into_finite().expect("finite")
    }

    fn call() -> PremiumCurve<Exact> {
        PremiumCurve::standard_call(e("1"))
    }

    fn put(k: &str) -> PremiumCurve<Exact> {
        PremiumCurve::standard_put(e(k))
    }

    #[test]
    fn premium_examples() {
        assert_eq!(fin(call().premium(&e("0")).unwrap()), e("0"));
        assert_eq!(fin(call().premium(&e("0.5")).unwrap()), e("8"));
        assert_eq!(fin(put("1").premium(&e("0.5")).unwrap()), e("0.5"));
        assert_eq!(call().premium(&e("1")).unwrap(), Extended::Infinite);
        assert_eq!(fin(put("1").premium(&e("1")).unwrap()), e("1"));
    }

    #[test]
    fn premium_domain_errors() {
        assert!(matches!(call().premium(&e("1.01")), Err(CurveError::Domain(_))));
        assert!(matches!(put("1").net_premium(&e("-0.1")), Err(CurveError::Domain(_))));
    }

    #[test]
    fn net_premium_examples() {
        for c in [call(), put("1")] {
            assert_eq!(fin(c.net_premium(&e("0")).unwrap()), e("0"));
        }
        assert_eq!(fin(call().net_premium(&e("0.5")).unwrap()), e("1"));
        assert_eq!(fin(put("1").net_premium(&e("1")).unwrap()), e("0.5"));
        assert_eq!(call().net_premium(&e("1")).unwrap(), Extended::Infinite);
    }

    #[test]
    fn total_premium_examples() {
        assert_eq!(fin(call().total_premium(&e("0"), &e("5")).unwrap()), e("0"));
        assert_eq!(fin(call().total_premium(&e("1"), &e("2")).unwrap()), e("2"));
        assert_eq!(fin(put("1").total_premium(&e("1"), &e("2")).unwrap()), e("0.25"));
        assert_eq!(call().total_premium(&e("3"), &e("2")).unwrap(), Extended::Infinite);
        assert_eq!(put("1").total_premium(&e("3"), &e("2")).unwrap(), Extended::Infinite);
        assert_eq!(fin(call().total_premium(&e("0"), &e("0")).unwrap()), e("0"));
        assert_eq!(call().total_premium(&e("1"), &e("0")).unwrap(), Extended::Infinite);
        // Full utilization: infinite for the call, finite for the put.
        assert_eq!(call().total_premium(&e("2"), &e("2")).unwrap(), Extended::Infinite);
        assert_eq!(fin(put("1").total_premium(&e("2"), &e("2")).unwrap()), e("1"));
        assert!(call().total_premium(&e("-1"), &e("2")).is_err());
    }

    #[test]
    fn delta_phi_examples() {
        let c = call();
        assert_eq!(c.delta_phi(&e("1"), &e("0"), &e("2"), &e("0")).unwrap(), e("0"));
        assert_eq!(c.delta_phi(&e("0"), &e("1"), &e("2"), &e("0")).unwrap(), e("2"));
        assert_eq!(c.delta_phi(&e("1"), &e("-1"), &e("2"), &e("0")).unwrap(), e("-2"));
        assert!(matches!(
            c.delta_phi(&e("1"), &e("1"), &e("2"), &e("0")),
            Err(CurveError::InfeasibleEndpoint { .. })
        ));
        assert!(matches!(
            c.delta_phi(&e("1"), &e("-2"), &e("2"), &e("0")),
            Err(CurveError::NegativeInput(_))
        ));
    }

    #[test]
    fn perspective_matches_net_premium() {
        // Closed-form Phi agrees with C * phi(X / C) for both standard curves.
        for c in [call(), put("1.5")] {
            for (x, cc) in [("1", "3"), ("0.25", "2"), ("7", "8")] {
                let (x, cc) = (e(x), e(cc));
                let via_phi = cc.clone() * fin(c.net_premium(&(x.clone() / cc.clone())).unwrap());
                assert_eq!(fin(c.total_premium(&x, &cc).unwrap()), via_phi);
            }
        }
    }

    #[test]
    fn table_curve_integrates_exactly() {
        // Linear table reproduces the standard put exactly.
        let t = PremiumCurve::table(
            OptionKind::Put,
            e("2"),
            vec![(e("0"), e("0")), (e("0.5"), e("1")), (e("1"), e("2"))],
            false,
        )
        .unwrap();
        let p = put("2");
        for u in ["0", "0.1", "0.5", "0.73", "1"] {
            assert_eq!(t.net_premium(&e(u)).unwrap(), p.net_premium(&e(u)).unwrap());
            assert_eq!(t.premium(&e(u)).unwrap(), p.premium(&e(u)).unwrap());
        }
        assert!(t.validate(101).passed());
    }

    #[test]
    fn table_rejects_bad_rows() {
        let rows = vec![(e("0.1"), e("0")), (e("1"), e("1"))];
        assert!(PremiumCurve::table(OptionKind::Put, e("1"), rows, false).is_err());
        let rows = vec![(e("0"), e("0")), (e("0.6"), e("1")), (e("0.5"), e("1")), (e("1"), e("1"))];
        assert!(PremiumCurve::table(OptionKind::Put, e("1"), rows, false).is_err());
        let rows = vec![(e("0"), e("0")), (e("1"), e("-1"))];
        assert!(PremiumCurve::table(OptionKind::Put, e("1"), rows, false).is_err());
    }

    #[test]
    fn jump_table_warns_but_validates() {
        let rows = vec![
            (e("0"), e("0")),
            (e("0.5"), e("0.2")),
            (e("0.5"), e("0.6")),
            (e("1"), e("1")),
        ];
        let t = PremiumCurve::table(OptionKind::Put, e("1"), rows, false).unwrap();
        assert_eq!(fin(t.premium(&e("0.5")).unwrap()), e("0.6"));
        // phi(0.5) = 0.5 * 0.2 / 2
        assert_eq!(fin(t.net_premium(&e("0.5")).unwrap()), e("0.05"));
        let report = t.validate(201);
        assert!(report.passed(), "{report}");
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn validate_standard_curves() {
        let report = call().validate(10_000);
        assert!(report.passed(), "{report}");
        assert!(report.strict_solvency);
        let report = put("1").validate(10_000);
        assert!(report.passed(), "{report}");
        assert!(!report.strict_solvency);
    }

    #[test]
    fn validate_flags_decreasing_premium() {
        let rows = vec![(e("0"), e("0")), (e("0.5"), e("2")), (e("1"), e("1"))];
        let t = PremiumCurve::table(OptionKind::Put, e("1"), rows, false).unwrap();
        let report = t.validate(101);
        assert!(!report.passed());
        assert!(!report.check("premium_non_decreasing").unwrap().passed);
        assert!(!report.check("net_premium_convex").unwrap().passed);
    }

    #[test]
    fn validate_flags_false_strict_claim_and_bad_limits() {
        let rows = vec![(e("0"), e("0")), (e("1"), e("3"))];
        let t = PremiumCurve::table(OptionKind::Call, e("1"), rows, true).unwrap();
        let report = t.validate(11);
        assert!(!report.check("strict_solvency").unwrap().passed);
        assert!(!report.check("limit_at_full_utilization").unwrap().passed);

        let rows = vec![(e("0"), e("0")), (e("1"), e("0.5"))];
        let t = PremiumCurve::table(OptionKind::Put, e("1"), rows, false).unwrap();
        assert!(!t.validate(11).check("limit_at_full_utilization").unwrap().passed);
    }

    #[test]
    fn decimal_mode_validates_standard_curves() {
        let c: PremiumCurve<Dec> = PremiumCurve::standard_call(Dec::one());
        assert!(c.validate(2_000).passed());
        let p: PremiumCurve<Dec> = PremiumCurve::standard_put(Dec::parse("1.25").unwrap());
        assert!(p.validate(2_000).passed());
    }

    #[test]
    fn utilization_construction() {
        assert_eq!(Utilization::of(&e("0"), &e("0")).unwrap().value(), &e("0"));
        assert_eq!(Utilization::of(&e("1"), &e("4")).unwrap().value(), &e("0.25"));
        assert!(Utilization::of(&e("1"), &e("0")).is_err());
        assert!(Utilization::of(&e("3"), &e("2")).is_err());
        assert!(Utilization::new(e("1.5")).is_err());
    }

    #[test]
    fn curve_spec_json() {
        let spec: CurveSpec = serde_json::from_str(
            r#"{"kind":"put","strike":"1","form":"table","table":[["0","0"],["1","1"]]}"#,
        )
        .unwrap();
        let c: PremiumCurve<Exact> = spec.build().unwrap();
        assert_eq!(c.kind, OptionKind::Put);
        assert!(!c.strict_solvency);
        let spec: CurveSpec =
            serde_json::from_str(r#"{"kind":"call","form":"paper_example"}"#).unwrap();
        let c: PremiumCurve<Exact> = spec.build().unwrap();
        assert!(c.strict_solvency);
        assert_eq!(c.form, CurveForm::StandardCall);
    }
}
