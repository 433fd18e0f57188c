//! Block-clocked scenario runner and property harnesses.
//!
//! Time is measured in days. Events inside a block run sequentially at the
//! block timestamp; the market is accrued to every block end so empty
//! blocks still report amortization yield.

use std::collections::BTreeMap;
use std::io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::{CurveError, CurveSpec, OptionKind, PremiumCurve};
use crate::engine::{EngineConfig, EngineError, Market, SeriesParams, RESERVE_SCALE_FLOOR, RESERVE_REL_TOL};
use crate::ledger::Asset;
use crate::num::{Extended, Mode, NumError, Scalar};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("event {seq} ({op} by {actor:?} in block {block}) failed: {source}")]
    Event {
        seq: usize,
        block: usize,
        op: &'static str,
        actor: String,
        source: EngineError,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invariant violated in block {block}: {detail}")]
    Invariant { block: usize, detail: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Strictly increasing block timestamps starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSchedule<S> {
    times: Vec<S>,
}

impl<S: Scalar> BlockSchedule<S> {
    pub fn new(times: Vec<S>) -> Result<Self, SimError> {
        if let Some(first) = times.first() {
            if !first.is_zero() {
                return Err(SimError::Config(format!("first block time must be 0, got {first}")));
            }
        }
        for w in times.windows(2) {
            if w[0] >= w[1] {
                return Err(SimError::Config(format!(
                    "block times must increase strictly: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(BlockSchedule { times })
    }

    /// Evenly spaced blocks `0, dt, 2 dt, ...`.
    pub fn fixed(dt: &S, blocks: usize) -> Result<Self, SimError> {
        if !dt.is_positive() {
            return Err(SimError::Config(format!("block spacing {dt} must be > 0")));
        }
        let times = (0..blocks).map(|i| dt.clone() * S::from_i64(i as i64)).collect();
        Self::new(times)
    }

    /// Exponential gaps with the given mean rate (blocks per day), seeded.
    /// Gaps are rounded to 12 decimals so both arithmetic modes see the same times.
    pub fn poisson(rate: f64, blocks: usize, seed: u64) -> Result<Self, SimError> {
        let exp = Exp::new(rate).map_err(|e| SimError::Config(format!("poisson rate {rate}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut times = Vec::with_capacity(blocks);
        let mut t = S::zero();
        let tick = S::parse("1e-12")?;
        for i in 0..blocks {
            if i > 0 {
                let gap = S::parse(&format!("{:.12}", exp.sample(&mut rng)))?;
                t = t + if gap.is_positive() { gap } else { tick.clone() };
            }
            times.push(t.clone());
        }
        Self::new(times)
    }

    pub fn times(&self) -> &[S] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventOp {
    BuyOpen,
    SellClose,
    SellOpen,
    BuyClose,
    Exercise,
    Claim,
}

impl EventOp {
    pub fn tag(&self) -> &'static str {
        match self {
            EventOp::BuyOpen => "buy_open",
            EventOp::SellClose => "sell_close",
            EventOp::SellOpen => "sell_open",
            EventOp::BuyClose => "buy_close",
            EventOp::Exercise => "exercise",
            EventOp::Claim => "claim",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedEvent<S> {
    pub block: usize,
    pub order: i64,
    pub actor: String,
    pub op: EventOp,
    /// `None` means the actor's whole position: full notional for
    /// sell_close and exercise, withdrawable collateral for buy_close.
    pub amount: Option<S>,
    /// Exercise payment; defaults to the amount the series requires.
    pub payment: Option<S>,
}

impl<S: Scalar> ScriptedEvent<S> {
    pub fn new(block: usize, actor: &str, op: EventOp, amount: Option<S>) -> Self {
        ScriptedEvent { block, order: 0, actor: actor.to_string(), op, amount, payment: None }
    }

    /// Concrete amount at time `t` against the current market.
    pub fn resolve_amount(&self, market: &Market<S>, t: &S) -> S {
        if let Some(a) = &self.amount {
            return a.clone();
        }
        match self.op {
            EventOp::SellClose | EventOp::Exercise => market.notional_of(&self.actor, t),
            EventOp::BuyClose => {
                let idle = market.collateral().clone() - market.open_interest();
                S::min_of(market.collateral_of(&self.actor), idle)
            }
            EventOp::BuyOpen | EventOp::SellOpen | EventOp::Claim => S::zero(),
        }
    }
}

/// Cash flows of one successful event as seen by the actor
/// (positive `paid` leaves the actor, positive `received` reaches it).
#[derive(Debug, Clone, PartialEq)]
pub struct EventOutcome<S> {
    pub op: EventOp,
    pub paid: (Asset, S),
    pub received: Vec<(Asset, S)>,
}

/// Applies one scripted operation at time `t`.
pub fn apply_op<S: Scalar>(
    market: &mut Market<S>,
    t: &S,
    actor: &str,
    op: EventOp,
    amount: &S,
    payment: Option<&S>,
) -> Result<EventOutcome<S>, EngineError> {
    let num = Asset::Numeraire;
    let outcome = match op {
        EventOp::BuyOpen => {
            let r = market.buy_to_open(actor, t, amount)?;
            EventOutcome { op, paid: (num, r.cost), received: vec![] }
        }
        EventOp::SellClose => {
            let r = market.sell_to_close(actor, t, amount)?;
            EventOutcome { op, paid: (num, S::zero()), received: vec![(num, r.rebate)] }
        }
        EventOp::SellOpen => {
            let deposit = match market.params().kind {
                OptionKind::Call => amount.clone(),
                OptionKind::Put => market.params().strike.clone() * amount.clone(),
            };
            let r = market.sell_to_open(actor, t, amount)?;
            EventOutcome {
                op,
                paid: (market.params().collateral_asset(), deposit),
                received: vec![(num, r.rebate)],
            }
        }
        EventOp::BuyClose => {
            let r = market.buy_to_close(actor, t, amount)?;
            EventOutcome {
                op,
                paid: (num, r.cost),
                received: vec![
                    r.returned,
                    (num, r.yield_paid.numeraire),
                    (Asset::Underlying, r.yield_paid.underlying),
                ],
            }
        }
        EventOp::Exercise => {
            let required = market.exercise_payment(amount).1;
            let pay = payment.cloned().unwrap_or(required);
            let s = market.exercise(actor, t, amount, &pay)?;
            EventOutcome { op, paid: s.pay, received: vec![s.receive] }
        }
        EventOp::Claim => {
            let y = market.claim_yield(actor, t)?;
            EventOutcome {
                op,
                paid: (num, S::zero()),
                received: vec![(num, y.numeraire), (Asset::Underlying, y.underlying)],
            }
        }
    };
    Ok(outcome)
}

/// Exogenous spot prices, step-interpolated. Only agents read it.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePath<S> {
    points: Vec<(S, S)>,
}

impl<S: Scalar> PricePath<S> {
    pub fn new(points: Vec<(S, S)>) -> Result<Self, SimError> {
        if points.is_empty() {
            return Err(SimError::Config("price path is empty".into()));
        }
        for (t, p) in &points {
            if !p.is_positive() {
                return Err(SimError::Config(format!("price {p} at t = {t} must be > 0")));
            }
        }
        for w in points.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(SimError::Config("price path times must increase".into()));
            }
        }
        Ok(PricePath { points })
    }

    pub fn constant(price: S) -> Result<Self, SimError> {
        Self::new(vec![(S::zero(), price)])
    }

    /// Last quoted price at or before `t` (the first price before the path starts).
    pub fn price_at(&self, t: &S) -> &S {
        let idx = self.points.partition_point(|(pt, _)| pt <= t);
        &self.points[idx.saturating_sub(1)].1
    }

    pub fn points(&self) -> &[(S, S)] {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<S> {
    pub params: SeriesParams<S>,
    pub curve: PremiumCurve<S>,
    pub config: EngineConfig<S>,
    pub schedule: BlockSchedule<S>,
    pub events: Vec<ScriptedEvent<S>>,
    pub price_path: Option<PricePath<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesSpec {
    pub kind: OptionKind,
    #[serde(default = "one")]
    pub strike: String,
    pub q: String,
    #[serde(default)]
    pub genesis: Option<String>,
}

fn one() -> String {
    "1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    Fixed {
        #[serde(default = "one")]
        dt: String,
        blocks: usize,
    },
    Poisson { rate: String, blocks: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub block: usize,
    #[serde(default)]
    pub order: i64,
    pub actor: String,
    pub op: EventOp,
    #[serde(default)]
    pub amount: Option<String>,
    #[serde(default)]
    pub payment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricePointSpec {
    pub t: String,
    pub price: String,
}

/// On-disk scenario. All numbers are decimal strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub series: SeriesSpec,
    #[serde(default)]
    pub curve: Option<CurveSpec>,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub price_path: Option<Vec<PricePointSpec>>,
    #[serde(default)]
    pub quantum: Option<String>,
    #[serde(default)]
    pub allow_non_strict_calls: bool,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Builds a runnable scenario. `quantum` overrides the file's value.
    pub fn build<S: Scalar>(&self, seed: u64, quantum: Option<&str>) -> Result<Scenario<S>, SimError> {
        let strike = S::parse(&self.series.strike)?;
        let genesis = match &self.series.genesis {
            Some(g) => S::parse(g)?,
            None => S::zero(),
        };
        let params = SeriesParams::new(self.series.kind, strike, S::parse(&self.series.q)?, genesis)?;
        let curve_spec = self
            .curve
            .clone()
            .unwrap_or_else(|| CurveSpec::standard(self.series.kind, &self.series.strike));
        let curve = curve_spec.build::<S>()?;
        let mut config = EngineConfig::<S>::default();
        if let Some(q) = quantum.or(self.quantum.as_deref()) {
            config.quantum = S::parse(q)?;
        }
        config.allow_non_strict_calls = self.allow_non_strict_calls;
        let schedule = match &self.schedule {
            ScheduleSpec::Fixed { dt, blocks } => BlockSchedule::fixed(&S::parse(dt)?, *blocks)?,
            ScheduleSpec::Poisson { rate, blocks } => {
                let rate: f64 = rate
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad poisson rate {rate:?}")))?;
                BlockSchedule::poisson(rate, *blocks, seed)?
            }
        };
        let mut events = Vec::with_capacity(self.events.len());
        for (i, e) in self.events.iter().enumerate() {
            if e.block >= schedule.len() {
                return Err(SimError::Config(format!(
                    "event {i} targets block {} but the schedule has {} blocks",
                    e.block,
                    schedule.len()
                )));
            }
            let amount = match (e.amount.as_deref(), e.op) {
                (None | Some("all"), EventOp::BuyOpen | EventOp::SellOpen) => {
                    return Err(SimError::Config(format!("event {i} ({}) needs an amount", e.op.tag())))
                }
                (None | Some("all"), _) => None,
                (Some(a), _) => Some(S::parse(a)?),
            };
            let payment = e.payment.as_deref().map(S::parse).transpose()?;
            events.push(ScriptedEvent {
                block: e.block,
                order: e.order,
                actor: e.actor.clone(),
                op: e.op,
                amount,
                payment,
            });
        }
        let price_path = match &self.price_path {
            Some(points) => {
                let pts = points
                    .iter()
                    .map(|p| Ok((S::parse(&p.t)?, S::parse(&p.price)?)))
                    .collect::<Result<Vec<_>, NumError>>()?;
                Some(PricePath::new(pts)?)
            }
            None => None,
        };
        Ok(Scenario { params, curve, config, schedule, events, price_path })
    }
}

/// End-of-block snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSnapshot<S> {
    pub block: usize,
    pub time: S,
    pub x: S,
    pub c: S,
    pub r: S,
    pub u: S,
    pub premium: Extended<S>,
    pub yield_numeraire: S,
    pub yield_underlying: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub blocks: Vec<BlockSnapshot<S>>,
}

pub const TRAJECTORY_HEADER: [&str; 9] = [
    "block",
    "time",
    "X",
    "C",
    "R",
    "U",
    "premium",
    "yield_numeraire",
    "yield_underlying",
];

impl<S: Scalar> Trajectory<S> {
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAJECTORY_HEADER)?;
        for b in &self.blocks {
            w.write_record([
                b.block.to_string(),
                b.time.to_string(),
                b.x.to_string(),
                b.c.to_string(),
                b.r.to_string(),
                b.u.to_string(),
                b.premium.to_string(),
                b.yield_numeraire.to_string(),
                b.yield_underlying.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Skip infeasible events instead of aborting.
    pub lenient: bool,
    /// Run a full audit after every block, not only at the end.
    pub audit_every_block: bool,
}

#[derive(Debug, Clone)]
pub struct SkippedEvent {
    pub seq: usize,
    pub block: usize,
    pub op: EventOp,
    pub actor: String,
    pub error: EngineError,
}

#[derive(Debug, Clone)]
pub struct RunResult<S> {
    pub trajectory: Trajectory<S>,
    pub market: Market<S>,
    pub outcomes: Vec<(usize, EventOutcome<S>)>,
    pub skipped: Vec<SkippedEvent>,
    /// First block whose audit failed, if any.
    pub audit_failure: Option<(usize, String)>,
}

fn within_tolerance<S: Scalar>(a: &S, b: &S) -> bool {
    match S::MODE {
        Mode::Rational => a == b,
        Mode::Decimal => a.approx_eq(b, RESERVE_REL_TOL, RESERVE_SCALE_FLOOR),
    }
}

/// Executes a scenario block by block. Events are ordered by
/// `(block, order, position in the script)`.
pub fn run_scenario<S: Scalar>(scenario: &Scenario<S>, opts: RunOptions) -> Result<RunResult<S>, SimError> {
    let mut market = Market::create(
        scenario.params.clone(),
        scenario.curve.clone(),
        scenario.config.clone(),
    )?;
    let mut order: Vec<usize> = (0..scenario.events.len()).collect();
    order.sort_by_key(|&i| (scenario.events[i].block, scenario.events[i].order, i));
    let mut pending = order.into_iter().peekable();

    let mut blocks = Vec::with_capacity(scenario.schedule.len());
    let mut outcomes = Vec::new();
    let mut skipped = Vec::new();
    let mut audit_failure = None;
    let genesis = scenario.params.genesis.clone();

    for (b, tau) in scenario.schedule.times().iter().enumerate() {
        let t = genesis.clone() + tau.clone();
        let start_phi = market.reserve().clone();
        let start_state = (market.open_interest(), market.collateral().clone());
        let start_yield = market.ledger().distributed().clone();

        while let Some(&i) = pending.peek() {
            if scenario.events[i].block != b {
                break;
            }
            pending.next();
            let ev = &scenario.events[i];
            let amount = ev.resolve_amount(&market, &t);
            match apply_op(&mut market, &t, &ev.actor, ev.op, &amount, ev.payment.as_ref()) {
                Ok(o) => outcomes.push((i, o)),
                Err(error) if opts.lenient => skipped.push(SkippedEvent {
                    seq: i,
                    block: b,
                    op: ev.op,
                    actor: ev.actor.clone(),
                    error,
                }),
                Err(source) => {
                    return Err(SimError::Event {
                        seq: i,
                        block: b,
                        op: ev.op.tag(),
                        actor: ev.actor.clone(),
                        source,
                    })
                }
            }
        }
        if market.last_accrual() < &t {
            market.accrue(&t)?;
        }

        // The block's reserve change telescopes to the change in Phi.
        let curve = market.curve();
        let phi_start = curve.total_premium_finite(&start_state.0, &start_state.1)?;
        let phi_end = curve.total_premium_finite(&market.open_interest(), market.collateral())?;
        let moved = market.reserve().clone() - start_phi;
        if !within_tolerance(&moved, &(phi_end - phi_start)) {
            return Err(SimError::Invariant {
                block: b,
                detail: format!("reserve moved by {moved}, Phi differs"),
            });
        }

        if opts.audit_every_block && audit_failure.is_none() {
            let report = market.audit();
            if !report.passed() {
                audit_failure = Some((b, report.to_string()));
            }
        }

        let distributed = market.ledger().distributed();
        blocks.push(BlockSnapshot {
            block: b,
            time: tau.clone(),
            x: market.open_interest(),
            c: market.collateral().clone(),
            r: market.reserve().clone(),
            u: market.utilization(),
            premium: market.premium(),
            yield_numeraire: distributed.numeraire.clone() - start_yield.numeraire,
            yield_underlying: distributed.underlying.clone() - start_yield.underlying,
        });
    }

    if audit_failure.is_none() {
        let report = market.audit();
        if !report.passed() {
            audit_failure = Some((blocks.len().saturating_sub(1), report.to_string()));
        }
    }

    Ok(RunResult {
        trajectory: Trajectory { blocks },
        market,
        outcomes,
        skipped,
        audit_failure,
    })
}

/// One operation in a permutation multiset.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessOp<S> {
    pub actor: String,
    pub op: EventOp,
    pub amount: S,
}

impl<S: Scalar> HarnessOp<S> {
    pub fn new(actor: &str, op: EventOp, amount: S) -> Self {
        HarnessOp { actor: actor.to_string(), op, amount }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PermutationReport {
    pub attempted: usize,
    pub feasible: usize,
    pub end_states: usize,
    /// Permutations whose reserve change disagreed with another permutation
    /// reaching the same end state, or with `Phi(end) - Phi(start)`.
    pub mismatches: usize,
}

impl PermutationReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Applies random orderings of `ops` to copies of `base` at its last
/// accrual time until `trials` feasible orderings are found (or
/// `20 * trials` attempts are spent) and compares net reserve changes.
pub fn permutation_harness<S: Scalar>(
    base: &Market<S>,
    ops: &[HarnessOp<S>],
    trials: usize,
    seed: u64,
) -> PermutationReport {
    let mut report = PermutationReport { attempted: 0, feasible: 0, end_states: 0, mismatches: 0 };
    if ops.is_empty() {
        return report;
    }
    let t = base.last_accrual().clone();
    let r0 = base.reserve().clone();
    let cash0 = base.reserve_cash().clone();
    let phi0 = base.total_premium();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: BTreeMap<String, (S, S)> = BTreeMap::new();
    let mut perm: Vec<usize> = (0..ops.len()).collect();

    while report.feasible < trials && report.attempted < trials.saturating_mul(20) {
        report.attempted += 1;
        perm.shuffle(&mut rng);
        let mut m = base.clone();
        let feasible = perm.iter().all(|&i| {
            let op = &ops[i];
            apply_op(&mut m, &t, &op.actor, op.op, &op.amount, None).is_ok()
        });
        if !feasible {
            continue;
        }
        report.feasible += 1;
        let dr = m.reserve().clone() - r0.clone();
        let dcash = m.reserve_cash().clone() - cash0.clone();
        let phi_ok = match (&phi0, m.total_premium()) {
            (Extended::Finite(a), Extended::Finite(b)) => within_tolerance(&dr, &(b - a.clone())),
            _ => false,
        };
        let key = format!("{:?}|{:?}", m.open_interest(), m.collateral());
        let consistent = match seen.get(&key) {
            Some((r, c)) => within_tolerance(r, &dr) && within_tolerance(c, &dcash),
            None => {
                seen.insert(key, (dr, dcash));
                true
            }
        };
        if !(phi_ok && consistent) {
            report.mismatches += 1;
        }
    }
    report.end_states = seen.len();
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionRow<S> {
    pub steps: usize,
    pub index: S,
    pub total_yield: S,
    pub x: S,
    pub r: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport<S> {
    pub rows: Vec<PartitionRow<S>>,
    pub index_bit_exact: bool,
    pub yield_consistent: bool,
    pub state_consistent: bool,
}

impl<S> PartitionReport<S> {
    pub fn passed(&self) -> bool {
        self.index_bit_exact && self.yield_consistent && self.state_consistent
    }
}

/// Accrues copies of `base` over `horizon` in each number of equal steps.
pub fn accrual_partition_harness<S: Scalar>(
    base: &Market<S>,
    horizon: &S,
    partitions: &[usize],
) -> Result<PartitionReport<S>, EngineError> {
    let t0 = base.last_accrual().clone();
    let end = t0.clone() + horizon.clone();
    let mut rows = Vec::with_capacity(partitions.len());
    for &steps in partitions {
        let steps = steps.max(1);
        let mut m = base.clone();
        let mut total = S::zero();
        for k in 1..=steps {
            let t = if k == steps {
                end.clone()
            } else {
                t0.clone() + horizon.clone() * S::from_i64(k as i64) / S::from_i64(steps as i64)
            };
            total = total + m.accrue(&t)?;
        }
        rows.push(PartitionRow {
            steps,
            index: m.index().clone(),
            total_yield: total,
            x: m.open_interest(),
            r: m.reserve().clone(),
        });
    }
    let first = rows.first();
    let all = |f: &dyn Fn(&PartitionRow<S>, &PartitionRow<S>) -> bool| {
        first.map_or(true, |a| rows.iter().all(|b| f(a, b)))
    };
    let index_bit_exact = all(&|a, b| a.index == b.index);
    let yield_consistent = all(&|a, b| {
        a.total_yield.approx_eq(&b.total_yield, RESERVE_REL_TOL, RESERVE_SCALE_FLOOR)
    });
    let state_consistent = all(&|a, b| {
        a.x.approx_eq(&b.x, RESERVE_REL_TOL, RESERVE_SCALE_FLOOR)
            && a.r.approx_eq(&b.r, RESERVE_REL_TOL, RESERVE_SCALE_FLOOR)
    });
    Ok(PartitionReport { rows, index_bit_exact, yield_consistent, state_consistent })
}

/// When a holder exercises: once the intrinsic value of the position
/// beats the pool's sell-to-close rebate by more than `min_advantage`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExercisePolicy<S> {
    pub min_advantage: S,
}

impl<S: Scalar> Default for ExercisePolicy<S> {
    fn default() -> Self {
        ExercisePolicy { min_advantage: S::zero() }
    }
}

/// Walks the schedule against a private copy of the market and emits an
/// exercise of the holder's full notional at the first block where the
/// policy triggers. The market never sees the prices.
pub fn rational_exercise_agent<S: Scalar>(
    market: &Market<S>,
    schedule: &BlockSchedule<S>,
    path: &PricePath<S>,
    holder: &str,
    policy: &ExercisePolicy<S>,
) -> Vec<ScriptedEvent<S>> {
    let strike = market.params().strike.clone();
    let genesis = market.params().genesis.clone();
    for (b, tau) in schedule.times().iter().enumerate() {
        let t = genesis.clone() + tau.clone();
        if &t < market.last_accrual() {
            continue;
        }
        let n = market.notional_of(holder, &t);
        if !n.is_positive() {
            continue;
        }
        let spot = path.price_at(tau).clone();
        let moneyness = match market.params().kind {
            OptionKind::Call => spot - strike.clone(),
            OptionKind::Put => strike.clone() - spot,
        };
        let intrinsic = if moneyness.is_positive() { moneyness * n.clone() } else { S::zero() };
        let rebate = match market.quote_sell_to_close(&t, &n) {
            Ok(r) => r,
            Err(_) => continue,
        };
        if intrinsic.is_positive() && intrinsic - rebate > policy.min_advantage {
            return vec![ScriptedEvent::new(b, holder, EventOp::Exercise, Some(n))];
        }
    }
    Vec::new()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub operations: usize,
    pub attempts: usize,
    /// Operations after which `R = Phi(X, C)` failed.
    pub violations: usize,
    pub max_relative_error: f64,
    pub audit_passed: bool,
    /// Failed audit checks at the end of the walk.
    pub audit_failures: Vec<String>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.audit_passed
    }
}

fn fraction<S: Scalar>(rng: &mut ChaCha8Rng, of: &S, grid: &S) -> S {
    let k = rng.gen_range(1..=1000);
    (of.clone() * S::from_i64(k) / S::from_i64(1000)).floor_to(grid)
}

/// Seeded random walk of `operations` successful market operations,
/// checking the reserve identity after each one.
pub fn reserve_identity_harness<S: Scalar>(
    kind: OptionKind,
    seed: u64,
    operations: usize,
) -> Result<IdentityReport, SimError> {
    let strike = match kind {
        OptionKind::Call => S::one(),
        OptionKind::Put => S::parse("1.5")?,
    };
    let params = SeriesParams::new(kind, strike.clone(), S::parse("0.003")?, S::zero())?;
    let curve = match kind {
        OptionKind::Call => PremiumCurve::standard_call(strike),
        OptionKind::Put => PremiumCurve::standard_put(strike),
    };
    let mut m = Market::create(params, curve, EngineConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = S::parse("1e-6")?;
    let lps = ["lp0", "lp1", "lp2"];
    let holders = ["h0", "h1", "h2", "h3"];
    let mut t = S::zero();
    let mut report = IdentityReport {
        operations: 0,
        attempts: 0,
        violations: 0,
        max_relative_error: 0.0,
        audit_passed: false,
        audit_failures: Vec::new(),
    };

    while report.operations < operations && report.attempts < operations * 10 {
        report.attempts += 1;
        if rng.gen_bool(0.1) {
            t = t + S::from_i64(rng.gen_range(1..=500)) / S::from_i64(1000);
        }
        let lp = lps[rng.gen_range(0..lps.len())];
        let holder = holders[rng.gen_range(0..holders.len())];
        let x = m.open_interest();
        let c = m.collateral().clone();
        let idle = c.clone() - x.clone();
        let held = m.notional_of(holder, &t);
        let result = match rng.gen_range(0..8) {
            0 | 1 => {
                let amount = S::from_i64(rng.gen_range(1..=2000)) / S::from_i64(1000);
                apply_op(&mut m, &t, lp, EventOp::SellOpen, &amount, None)
            }
            2 | 3 => {
                let cap = idle * S::parse("0.9")?;
                let amount = fraction(&mut rng, &cap, &grid);
                apply_op(&mut m, &t, holder, EventOp::BuyOpen, &amount, None)
            }
            4 => {
                let amount = fraction(&mut rng, &held, &grid);
                apply_op(&mut m, &t, holder, EventOp::SellClose, &amount, None)
            }
            5 => {
                let share = S::min_of(m.collateral_of(lp), idle);
                let amount = fraction(&mut rng, &share, &grid);
                apply_op(&mut m, &t, lp, EventOp::BuyClose, &amount, None)
            }
            6 => {
                let amount = fraction(&mut rng, &held, &grid);
                apply_op(&mut m, &t, holder, EventOp::Exercise, &amount, None)
            }
            _ => apply_op(&mut m, &t, lp, EventOp::Claim, &S::zero(), None),
        };
        if result.is_err() {
            continue;
        }
        report.operations += 1;
        match m.total_premium() {
            Extended::Finite(phi) => {
                if !within_tolerance(m.reserve(), &phi) {
                    report.violations += 1;
                }
                let r = m.reserve().to_f64();
                let p = phi.to_f64();
                if p != 0.0 {
                    report.max_relative_error = report.max_relative_error.max(((r - p) / p).abs());
                }
            }
            Extended::Infinite => report.violations += 1,
        }
    }
    let audit = m.audit();
    report.audit_passed = audit.passed();
    report.audit_failures = audit.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundTripReport {
    pub trials: usize,
    pub option_failures: usize,
    pub collateral_failures: usize,
}

impl RoundTripReport {
    pub fn passed(&self) -> bool {
        self.option_failures == 0 && self.collateral_failures == 0
    }
}

/// Random states, then buy/sell and deposit/withdraw round trips by a fresh
/// actor at the same instant. Each must net to zero and restore `(X, C, R)`.
pub fn round_trip_harness<S: Scalar>(kind: OptionKind, seed: u64, trials: usize) -> Result<RoundTripReport, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = S::parse("1e-6")?;
    let mut report = RoundTripReport { trials, option_failures: 0, collateral_failures: 0 };
    for _ in 0..trials {
        let strike = S::from_i64(rng.gen_range(1..=4000)) / S::from_i64(1000);
        let params = SeriesParams::new(kind, strike.clone(), S::parse("0.003")?, S::zero())?;
        let curve = match kind {
            OptionKind::Call => PremiumCurve::standard_call(strike),
            OptionKind::Put => PremiumCurve::standard_put(strike),
        };
        let mut m = Market::create(params, curve, EngineConfig::default())?;
        let t = S::from_i64(rng.gen_range(0..=30_000)) / S::from_i64(1000);
        let c = S::from_i64(rng.gen_range(1..=10_000)) / S::from_i64(1000);
        m.sell_to_open("lp", &S::zero(), &c)?;
        let u = S::from_i64(rng.gen_range(0..=900)) / S::from_i64(1000);
        let x = (c * u).floor_to(&grid);
        if x.is_positive() {
            m.buy_to_open("holder", &S::zero(), &x)?;
        }
        m.accrue(&t)?;

        let before = (m.open_interest(), m.collateral().clone(), m.reserve().clone(), m.holdings().clone());
        let idle = m.collateral().clone() - m.open_interest();
        let size = fraction(&mut rng, &(idle * S::parse("0.9")?), &grid);
        let ok = if size.is_positive() {
            let bought = m.buy_to_open("trader", &t, &size)?;
            let sold = m.sell_to_close("trader", &t, &bought.notional)?;
            bought.cost == sold.rebate && sold.forfeited_raw.is_zero()
        } else {
            true
        };
        let after = (m.open_interest(), m.collateral().clone(), m.reserve().clone(), m.holdings().clone());
        if !ok || before != after {
            report.option_failures += 1;
        }

        let deposit = S::from_i64(rng.gen_range(1..=5000)) / S::from_i64(1000);
        let opened = m.sell_to_open("fresh", &t, &deposit)?;
        let closed = m.buy_to_close("fresh", &t, &deposit)?;
        let after2 = (m.open_interest(), m.collateral().clone(), m.reserve().clone(), m.holdings().clone());
        let net = opened.rebate - closed.cost;
        let returned = closed.returned.1.clone()
            == match kind {
                OptionKind::Call => deposit.clone(),
                OptionKind::Put => m.params().strike.clone() * deposit.clone(),
            };
        if !net.is_zero() || !returned || after2 != after {
            report.collateral_failures += 1;
        }
    }
    Ok(report)
}
