//! Applications built on the market: protective-put loan collateral and
//! an at-the-peg put market used as de-peg insurance.

use std::fmt;
use std::io;

use serde::Serialize;
use thiserror::Error;

use crate::curves::{OptionKind, PremiumCurve};
use crate::engine::{EngineConfig, SeriesParams};
use crate::ledger::Asset;
use crate::num::{Extended, Scalar};
use crate::sim::{run_scenario, BlockSchedule, EventOp, RunOptions, Scenario, ScriptedEvent, SimError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AppError {
    #[error("invalid loan position: {0}")]
    InvalidPosition(String),
    #[error("no crossing: {0}")]
    NoCrossing(String),
    #[error("closed form {closed} and bisection {bisected} disagree for {boundary}")]
    CrossCheck { boundary: &'static str, closed: f64, bisected: f64 },
}

/// Converts a simple annual rate to a per-day rate.
pub fn per_day_rate(annual: f64) -> f64 {
    annual / 365.0
}

/// Loan collateralized by `E` underlying tokens plus `alpha * E` put
/// options of strike `K` that amortize at `q` per day. The debt grows at
/// `r` per day; liquidation triggers once collateral falls to `theta`
/// times the debt. Collateral is valued by option notional alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LoanPosition {
    pub e: f64,
    pub alpha: f64,
    pub d0: f64,
    pub r: f64,
    pub theta: f64,
    pub q: f64,
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollateralValue {
    /// `alpha e^{-qt} E K`.
    pub notional: f64,
    /// `min(alpha e^{-qt}, 1) E K`.
    pub exercise_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    /// No liquidation.
    Green,
    /// Liquidation is safe: collateral still covers the debt.
    Yellow,
    /// Bad debt.
    Red,
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Zone::Green => "green",
            Zone::Yellow => "yellow",
            Zone::Red => "red",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZoneReport {
    pub t_liq: f64,
    pub t_bad: f64,
    pub t_liq_bisection: f64,
    pub t_bad_bisection: f64,
}

impl ZoneReport {
    pub fn zone_at(&self, t: f64) -> Zone {
        if t < self.t_liq {
            Zone::Green
        } else if t < self.t_bad {
            Zone::Yellow
        } else {
            Zone::Red
        }
    }
}

/// Largest allowed gap between closed-form and bisected crossings (days).
pub const CROSSING_TOLERANCE: f64 = 1e-9;

impl LoanPosition {
    pub fn new(e: f64, alpha: f64, d0: f64, r: f64, theta: f64, q: f64, k: f64) -> Result<Self, AppError> {
        let bad = |what: &str| Err(AppError::InvalidPosition(what.to_string()));
        if !(e > 0.0 && e.is_finite()) {
            return bad("E must be > 0");
        }
        if !(alpha > 1.0 && alpha.is_finite()) {
            return bad("alpha must be > 1");
        }
        if !(theta >= 1.0 && theta.is_finite()) {
            return bad("theta must be >= 1");
        }
        if !(d0 > 0.0 && d0.is_finite()) {
            return bad("D0 must be > 0");
        }
        if !(k > 0.0 && k.is_finite()) {
            return bad("K must be > 0");
        }
        if !(r >= 0.0 && q >= 0.0 && r.is_finite() && q.is_finite()) {
            return bad("rates must be >= 0");
        }
        Ok(LoanPosition { e, alpha, d0, r, theta, q, k })
    }

    /// Normalized position with one token, unit strike and debt `E K`.
    pub fn normalized(alpha: f64, theta: f64, q: f64, r: f64) -> Result<Self, AppError> {
        Self::new(1.0, alpha, 1.0, r, theta, q, 1.0)
    }

    pub fn collateral_value(&self, t: f64) -> CollateralValue {
        let cover = self.alpha * (-self.q * t).exp();
        CollateralValue {
            notional: cover * self.e * self.k,
            exercise_value: cover.min(1.0) * self.e * self.k,
        }
    }

    pub fn debt(&self, t: f64) -> f64 {
        self.d0 * (self.r * t).exp()
    }

    pub fn liquidation_threshold(&self, t: f64) -> f64 {
        self.theta * self.debt(t)
    }

    pub fn ltv(&self, t: f64) -> f64 {
        self.debt(t) / self.collateral_value(t).notional
    }

    pub fn zone(&self, t: f64) -> Zone {
        let v = self.collateral_value(t).notional;
        if v > self.liquidation_threshold(t) {
            Zone::Green
        } else if v > self.debt(t) {
            Zone::Yellow
        } else {
            Zone::Red
        }
    }

    /// Time at which collateral notional meets `mult` times the debt.
    fn closed_form(&self, mult: f64) -> f64 {
        (self.alpha * self.e * self.k / (mult * self.d0)).ln() / (self.q + self.r)
    }

    fn bisect(&self, mult: f64) -> f64 {
        // Log gap between collateral and the boundary; decreasing in t.
        let gap = |t: f64| {
            (self.alpha * self.e * self.k).ln() - self.q * t - (mult * self.d0).ln() - self.r * t
        };
        if gap(0.0) <= 0.0 {
            return 0.0;
        }
        let mut hi = 1.0;
        while gap(hi) > 0.0 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if gap(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Liquidation and bad-debt crossing times, cross-checked by bisection.
    pub fn crossing_times(&self) -> Result<ZoneReport, AppError> {
        if self.q + self.r <= 0.0 {
            return Err(AppError::NoCrossing("q + r must be > 0".into()));
        }
        let cover = self.alpha * self.e * self.k;
        if cover < self.theta * self.d0 {
            return Err(AppError::NoCrossing(format!(
                "collateral {cover} starts below the liquidation threshold {}",
                self.theta * self.d0
            )));
        }
        let t_liq = self.closed_form(self.theta);
        let t_bad = self.closed_form(1.0);
        let t_liq_bisection = self.bisect(self.theta);
        let t_bad_bisection = self.bisect(1.0);
        for (boundary, closed, bisected) in [
            ("liquidation", t_liq, t_liq_bisection),
            ("bad debt", t_bad, t_bad_bisection),
        ] {
            if (closed - bisected).abs() > CROSSING_TOLERANCE {
                return Err(AppError::CrossCheck { boundary, closed, bisected });
            }
        }
        Ok(ZoneReport { t_liq, t_bad, t_liq_bisection, t_bad_bisection })
    }

    /// Samples the position every `step` days up to `horizon`.
    pub fn report(&self, horizon: f64, step: f64) -> Vec<LendingRow> {
        let n = if step > 0.0 { (horizon / step).floor() as usize } else { 0 };
        (0..=n)
            .map(|i| {
                let t = i as f64 * step;
                let v = self.collateral_value(t);
                LendingRow {
                    t,
                    collateral_notional: v.notional,
                    collateral_exercise_value: v.exercise_value,
                    debt: self.debt(t),
                    liq_threshold: self.liquidation_threshold(t),
                    ltv: self.ltv(t),
                    zone: self.zone(t),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LendingRow {
    pub t: f64,
    pub collateral_notional: f64,
    pub collateral_exercise_value: f64,
    pub debt: f64,
    pub liq_threshold: f64,
    pub ltv: f64,
    pub zone: Zone,
}

pub const LENDING_HEADER: [&str; 7] = [
    "t",
    "collateral_notional",
    "collateral_exercise_value",
    "debt",
    "liq_threshold",
    "ltv",
    "zone",
];

pub fn write_lending_csv<W: io::Write>(rows: &[LendingRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LENDING_HEADER)?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.collateral_notional.to_string(),
            r.collateral_exercise_value.to_string(),
            r.debt.to_string(),
            r.liq_threshold.to_string(),
            r.ltv.to_string(),
            r.zone.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// An underwriter backs an at-the-peg put market on a stablecoin; the
/// live premium is read as a fear index.
#[derive(Debug, Clone)]
pub struct DepegConfig<S> {
    /// Numéraire deposited by the underwriter.
    pub deposit: S,
    pub underwriter: String,
    pub strike: S,
    pub q: S,
    /// Defaults to the linear put curve.
    pub curve: Option<PremiumCurve<S>>,
    pub schedule: BlockSchedule<S>,
    pub demand: Vec<ScriptedEvent<S>>,
    pub engine: EngineConfig<S>,
}

impl<S: Scalar> DepegConfig<S> {
    pub fn new(deposit: S, schedule: BlockSchedule<S>, demand: Vec<ScriptedEvent<S>>) -> Self {
        DepegConfig {
            deposit,
            underwriter: "underwriter".into(),
            strike: S::one(),
            q: S::parse("0.003").unwrap(),
            curve: None,
            schedule,
            demand,
            engine: EngineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FearIndexRow<S> {
    pub block: usize,
    pub time: S,
    pub u: S,
    pub premium_index: Extended<S>,
    pub cum_exercised: S,
    /// Cumulative numéraire yield credited to underwriters.
    pub lp_yield: S,
}

#[derive(Debug, Clone)]
pub struct DepegReport<S> {
    pub rows: Vec<FearIndexRow<S>>,
    pub cum_exercised: S,
    /// Numéraire paid out of collateral to exercisers.
    pub cum_paid: S,
    /// Underlying delivered to the pool by exercisers.
    pub cum_delivered: S,
    pub settlement_complete: bool,
    /// First block whose audit failed.
    pub audit_failure: Option<(usize, String)>,
    pub final_holdings: (S, S),
}

impl<S: Scalar> DepegReport<S> {
    pub fn passed(&self) -> bool {
        self.settlement_complete && self.audit_failure.is_none()
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(FEAR_INDEX_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.block.to_string(),
                r.time.to_string(),
                r.u.to_string(),
                r.premium_index.to_string(),
                r.cum_exercised.to_string(),
                r.lp_yield.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const FEAR_INDEX_HEADER: [&str; 6] = ["block", "time", "U", "premium_index", "cum_exercised", "lp_yield"];

/// Runs the de-peg market, auditing after every block.
pub fn depeg_scenario<S: Scalar>(config: &DepegConfig<S>) -> Result<DepegReport<S>, SimError> {
    if !config.deposit.is_positive() {
        return Err(SimError::Config(format!("deposit {} must be > 0", config.deposit)));
    }
    if config.schedule.is_empty() {
        return Err(SimError::Config("schedule has no blocks".into()));
    }
    let params = SeriesParams::new(OptionKind::Put, config.strike.clone(), config.q.clone(), S::zero())?;
    let curve = config
        .curve
        .clone()
        .unwrap_or_else(|| PremiumCurve::standard_put(config.strike.clone()));
    let mut events = Vec::with_capacity(config.demand.len() + 1);
    let mut seed_event = ScriptedEvent::new(
        0,
        &config.underwriter,
        EventOp::SellOpen,
        Some(config.deposit.clone() / config.strike.clone()),
    );
    seed_event.order = i64::MIN;
    events.push(seed_event);
    events.extend(config.demand.iter().cloned());
    let scenario = Scenario {
        params,
        curve,
        config: config.engine.clone(),
        schedule: config.schedule.clone(),
        events,
        price_path: None,
    };
    let opts = RunOptions { lenient: false, audit_every_block: true };
    let run = run_scenario(&scenario, opts)?;

    let mut exercised_by_block = vec![S::zero(); scenario.schedule.len()];
    let mut cum_paid = S::zero();
    let mut cum_delivered = S::zero();
    for (i, outcome) in &run.outcomes {
        if outcome.op != EventOp::Exercise {
            continue;
        }
        let block = scenario.events[*i].block;
        let (_, delivered) = &outcome.paid;
        exercised_by_block[block] = exercised_by_block[block].clone() + delivered.clone();
        cum_delivered = cum_delivered + delivered.clone();
        for (asset, amount) in &outcome.received {
            if *asset == Asset::Numeraire {
                cum_paid = cum_paid + amount.clone();
            }
        }
    }

    let mut rows = Vec::with_capacity(run.trajectory.blocks.len());
    let mut cum_exercised = S::zero();
    let mut lp_yield = S::zero();
    for (b, snap) in run.trajectory.blocks.iter().enumerate() {
        cum_exercised = cum_exercised + exercised_by_block[b].clone();
        lp_yield = lp_yield + snap.yield_numeraire.clone();
        rows.push(FearIndexRow {
            block: snap.block,
            time: snap.time.clone(),
            u: snap.u.clone(),
            premium_index: snap.premium.clone(),
            cum_exercised: cum_exercised.clone(),
            lp_yield: lp_yield.clone(),
        });
    }
    let settlement_complete = cum_paid == config.strike.clone() * cum_exercised.clone();
    let holdings = run.market.holdings();
    Ok(DepegReport {
        rows,
        cum_exercised,
        cum_paid,
        cum_delivered,
        settlement_complete,
        audit_failure: run.audit_failure.clone(),
        final_holdings: (holdings.numeraire.clone(), holdings.underlying.clone()),
    })
}

/// Demand burst: `holders` buyers take `peak` of the collateral in block 1,
/// the market sits one block at the peak, then one holder per block
/// exercises in full. Returns the schedule and the script (without the
/// underwriter deposit).
pub fn depeg_burst<S: Scalar>(
    deposit: &S,
    strike: &S,
    peak: &S,
    holders: usize,
) -> Result<(BlockSchedule<S>, Vec<ScriptedEvent<S>>), SimError> {
    let holders = holders.max(1);
    let collateral = deposit.clone() / strike.clone();
    let each = collateral * peak.clone() / S::from_i64(holders as i64);
    let mut events = Vec::with_capacity(2 * holders);
    for h in 0..holders {
        let mut buy = ScriptedEvent::new(1, &format!("holder{h}"), EventOp::BuyOpen, Some(each.clone()));
        buy.order = h as i64;
        events.push(buy);
    }
    for h in 0..holders {
        events.push(ScriptedEvent::new(3 + h, &format!("holder{h}"), EventOp::Exercise, None));
    }
    let schedule = BlockSchedule::fixed(&S::one(), holders + 4)?;
    Ok((schedule, events))
}
