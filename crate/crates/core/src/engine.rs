//! Peer-to-pool market for one amortizing perpetual option series.
//!
//! State is `(X, C, R)`: open interest, collateral (both in notional units)
//! and the premium reserve. Every trade moves the state and settles the
//! difference `Phi(after) - Phi(before)`, so the reserve equals
//! `Phi(X, C)` after every operation regardless of the path taken.
//!
//! Open interest is stored as raw token units; the notional is
//! `raw * exp(-q (t - genesis))`, evaluated from absolute time whenever a
//! user touches the market. The reserve released by that decay is the
//! amortization yield, credited to liquidity providers.
//!
//! Cash transfers are quantized: the numéraire set aside for the reserve is
//! always `ceil(Phi(X, C))` on the cash grid, and each operation moves the
//! difference between two such levels. Round trips therefore net to exactly
//! zero and the pool always holds at least `Phi(X, C)`.

use std::io;

use serde::Serialize;
use thiserror::Error;

use crate::curves::{Check, CurveError, OptionKind, PremiumCurve, Utilization};
use crate::ledger::{Asset, Ledger, LedgerError, PerAsset};
use crate::num::{exp_neg, Extended, Mode, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("time {t} precedes last accrual at {last}")]
    TimeRegression { last: String, t: String },
    #[error("insufficient capacity: requested {requested}, available {available}")]
    InsufficientCapacity { requested: String, available: String },
    #[error("exercise payment mismatch: expected {expected}, got {got}")]
    PaymentMismatch { expected: String, got: String },
    #[error("curve does not match series: {0}")]
    SeriesMismatch(String),
    #[error("invalid series parameters: {0}")]
    InvalidParams(String),
    #[error("amount must be positive, got {0}")]
    NonPositive(String),
    #[error("amount {0} rounds to zero token units")]
    AmountTooSmall(String),
}

/// Immutable identity of an option series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesParams<S> {
    pub kind: OptionKind,
    pub strike: S,
    /// Amortization rate per unit time.
    pub rate: S,
    pub genesis: S,
}

impl<S: Scalar> SeriesParams<S> {
    pub fn new(kind: OptionKind, strike: S, rate: S, genesis: S) -> Result<Self, EngineError> {
        if !strike.is_positive() {
            return Err(EngineError::InvalidParams(format!("strike {strike} must be > 0")));
        }
        if !rate.is_positive() {
            return Err(EngineError::InvalidParams(format!("amortization rate {rate} must be > 0")));
        }
        Ok(SeriesParams { kind, strike, rate, genesis })
    }

    /// Asset that backs the options: the underlying for calls, the numéraire for puts.
    pub fn collateral_asset(&self) -> Asset {
        match self.kind {
            OptionKind::Call => Asset::Underlying,
            OptionKind::Put => Asset::Numeraire,
        }
    }

    /// `exp(-q (t - genesis))`, rounded to 38 significant digits.
    pub fn index_at(&self, t: &S) -> S {
        let elapsed = t.clone() - self.genesis.clone();
        S::from_ratio(&exp_neg(&(self.rate.clone() * elapsed).to_ratio()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig<S> {
    /// Smallest transferable unit of any token (cash, collateral, options).
    pub quantum: S,
    /// Allow call markets whose curve keeps `phi` bounded at full utilization.
    pub allow_non_strict_calls: bool,
}

impl<S: Scalar> Default for EngineConfig<S> {
    fn default() -> Self {
        EngineConfig {
            quantum: S::parse("1e-18").unwrap(),
            allow_non_strict_calls: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Accrue,
    BuyOpen,
    SellClose,
    SellOpen,
    BuyClose,
    Exercise,
    Claim,
    Transfer,
}

impl OpKind {
    pub fn tag(&self) -> &'static str {
        match self {
            OpKind::Accrue => "accrue",
            OpKind::BuyOpen => "buy_open",
            OpKind::SellClose => "sell_close",
            OpKind::SellOpen => "sell_open",
            OpKind::BuyClose => "buy_close",
            OpKind::Exercise => "exercise",
            OpKind::Claim => "claim",
            OpKind::Transfer => "transfer",
        }
    }
}

/// One row of the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord<S> {
    pub seq: u64,
    pub time: S,
    pub op: OpKind,
    pub actor: String,
    pub dx: S,
    pub dc: S,
    pub dr: S,
    /// Yield credited to liquidity providers during the operation,
    /// including the accrual that preceded it.
    pub lp_yield: PerAsset<S>,
    pub inflow: PerAsset<S>,
    pub outflow: PerAsset<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenReceipt<S> {
    pub cost: S,
    /// Notional actually minted (`raw * index`, never above the request).
    pub notional: S,
    pub raw: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloseReceipt<S> {
    pub rebate: S,
    pub notional: S,
    pub raw: S,
    /// Raw balance below one token unit that lapsed to the pool.
    pub forfeited_raw: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepositReceipt<S> {
    pub rebate: S,
    pub shares: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WithdrawReceipt<S> {
    pub cost: S,
    pub collateral: S,
    pub returned: (Asset, S),
    pub shares_burned: S,
    pub yield_paid: PerAsset<S>,
}

/// Physical settlement of an exercise.
#[derive(Debug, Clone, PartialEq)]
pub struct Settlement<S> {
    /// What the holder delivers.
    pub pay: (Asset, S),
    /// What the holder receives out of collateral.
    pub receive: (Asset, S),
    /// Reserve released to liquidity providers by the utilization drop.
    pub lp_rebate: S,
    pub raw_burned: S,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl std::fmt::Display for AuditReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "[{tag}] {}: {}", c.name, c.detail)?;
        }
        for w in &self.warnings {
            writeln!(f, "[warn] {w}")?;
        }
        Ok(())
    }
}

struct Before<S> {
    x: S,
    c: S,
    r: S,
}

/// The market state machine. Single writer: operations take `&mut self`.
#[derive(Debug, Clone)]
pub struct Market<S> {
    params: SeriesParams<S>,
    curve: PremiumCurve<S>,
    config: EngineConfig<S>,
    raw_open_interest: S,
    collateral: S,
    reserve: S,
    reserve_cash: S,
    last_accrual: S,
    index: S,
    holdings: PerAsset<S>,
    ledger: Ledger<S>,
    log: Vec<EventRecord<S>>,
    op_yield: PerAsset<S>,
    op_in: PerAsset<S>,
    op_out: PerAsset<S>,
}

impl<S: Scalar> Market<S> {
    /// Empty market at genesis: `X = C = R = 0`, index 1.
    pub fn create(
        params: SeriesParams<S>,
        curve: PremiumCurve<S>,
        config: EngineConfig<S>,
    ) -> Result<Self, EngineError> {
        if curve.kind != params.kind {
            return Err(EngineError::SeriesMismatch(format!(
                "curve is {}, series is {}",
                curve.kind, params.kind
            )));
        }
        if params.kind == OptionKind::Put && curve.strike != params.strike {
            return Err(EngineError::SeriesMismatch(format!(
                "curve strike {} differs from series strike {}",
                curve.strike, params.strike
            )));
        }
        let unbounded = curve.unbounded_at_full_utilization();
        if curve.strict_solvency && !unbounded {
            return Err(EngineError::SeriesMismatch(
                "curve claims strict solvency but phi is bounded at U = 1".into(),
            ));
        }
        if params.kind == OptionKind::Call && !curve.strict_solvency && !config.allow_non_strict_calls {
            return Err(EngineError::SeriesMismatch(
                "call markets require a strictly solvent curve".into(),
            ));
        }
        if !config.quantum.is_positive() {
            return Err(EngineError::InvalidParams(format!(
                "quantum {} must be > 0",
                config.quantum
            )));
        }
        Ok(Market {
            last_accrual: params.genesis.clone(),
            index: S::one(),
            ledger: Ledger::new(config.quantum.clone()),
            params,
            curve,
            config,
            raw_open_interest: S::zero(),
            collateral: S::zero(),
            reserve: S::zero(),
            reserve_cash: S::zero(),
            holdings: PerAsset::zero(),
            log: Vec::new(),
            op_yield: PerAsset::zero(),
            op_in: PerAsset::zero(),
            op_out: PerAsset::zero(),
        })
    }

    pub fn params(&self) -> &SeriesParams<S> {
        &self.params
    }

    pub fn curve(&self) -> &PremiumCurve<S> {
        &self.curve
    }

    pub fn config(&self) -> &EngineConfig<S> {
        &self.config
    }

    pub fn ledger(&self) -> &Ledger<S> {
        &self.ledger
    }

    pub fn events(&self) -> &[EventRecord<S>] {
        &self.log
    }

    pub fn raw_open_interest(&self) -> &S {
        &self.raw_open_interest
    }

    /// Open interest `X` at the last accrual.
    pub fn open_interest(&self) -> S {
        self.raw_open_interest.clone() * self.index.clone()
    }

    pub fn collateral(&self) -> &S {
        &self.collateral
    }

    /// Premium reserve `R`.
    pub fn reserve(&self) -> &S {
        &self.reserve
    }

    /// Numéraire set aside for the reserve, `ceil(R)` on the cash grid.
    pub fn reserve_cash(&self) -> &S {
        &self.reserve_cash
    }

    pub fn holdings(&self) -> &PerAsset<S> {
        &self.holdings
    }

    pub fn last_accrual(&self) -> &S {
        &self.last_accrual
    }

    pub fn index(&self) -> &S {
        &self.index
    }

    pub fn utilization(&self) -> S {
        Utilization::of(&self.open_interest(), &self.collateral)
            .map(|u| u.value().clone())
            .unwrap_or_else(|_| S::one())
    }

    /// Current marginal premium `P(U)`.
    pub fn premium(&self) -> Extended<S> {
        self.curve
            .premium(&self.utilization())
            .unwrap_or(Extended::Infinite)
    }

    /// `Phi(X, C)` recomputed from the state.
    pub fn total_premium(&self) -> Extended<S> {
        self.curve
            .total_premium(&self.open_interest(), &self.collateral)
            .unwrap_or(Extended::Infinite)
    }

    /// Holder's notional at time `t` (no state change).
    pub fn notional_of(&self, actor: &str, t: &S) -> S {
        self.ledger.option_raw(actor) * self.index_for(t)
    }

    /// Index at `t`, reusing the stored value at the last accrual time.
    fn index_for(&self, t: &S) -> S {
        if *t == self.last_accrual {
            self.index.clone()
        } else {
            self.params.index_at(t)
        }
    }

    /// Collateral currently backing an LP's shares (one share per notional unit).
    pub fn collateral_of(&self, actor: &str) -> S {
        self.ledger.lp_shares(actor)
    }

    fn phi(&self, x: &S, c: &S) -> Result<S, EngineError> {
        Ok(self.curve.total_premium_finite(x, c)?)
    }

    fn cash_level(&self, phi: &S) -> S {
        phi.ceil_to(&self.config.quantum)
    }

    fn check_time(&self, t: &S) -> Result<(), EngineError> {
        if *t < self.last_accrual {
            return Err(EngineError::TimeRegression {
                last: self.last_accrual.to_string(),
                t: t.to_string(),
            });
        }
        Ok(())
    }

    fn take_in(&mut self, asset: Asset, amount: &S) {
        let h = self.holdings.get_mut(asset);
        *h = h.clone() + amount.clone();
        let f = self.op_in.get_mut(asset);
        *f = f.clone() + amount.clone();
    }

    fn pay_out(&mut self, asset: Asset, amount: &S) {
        let h = self.holdings.get_mut(asset);
        *h = h.clone() - amount.clone();
        let f = self.op_out.get_mut(asset);
        *f = f.clone() + amount.clone();
    }

    fn pay_lps(&mut self, asset: Asset, amount: &S) {
        if amount.is_zero() {
            return;
        }
        self.ledger.distribute(asset, amount);
        let y = self.op_yield.get_mut(asset);
        *y = y.clone() + amount.clone();
    }

    /// Moves the reserve to `Phi(x_new, c_new)`; returns the cash change
    /// (positive: the pool needs more cash).
    fn move_reserve(&mut self, phi_old: &S, phi_new: &S) -> S {
        self.reserve = self.reserve.clone() + (phi_new.clone() - phi_old.clone());
        let level = self.cash_level(phi_new);
        let delta = level.clone() - self.reserve_cash.clone();
        self.reserve_cash = level;
        delta
    }

    fn accrue_inner(&mut self, t: &S) -> Result<S, EngineError> {
        self.check_time(t)?;
        if *t == self.last_accrual {
            return Ok(S::zero());
        }
        let index = self.params.index_at(t);
        let mut released = S::zero();
        if self.raw_open_interest.is_positive() {
            let x_old = self.open_interest();
            let x_new = self.raw_open_interest.clone() * index.clone();
            let phi_old = self.phi(&x_old, &self.collateral)?;
            let phi_new = self.phi(&x_new, &self.collateral)?;
            released = -self.move_reserve(&phi_old, &phi_new);
            self.pay_lps(Asset::Numeraire, &released);
        }
        self.index = index;
        self.last_accrual = t.clone();
        Ok(released)
    }

    fn record(&mut self, t: &S, op: OpKind, actor: &str, before: Before<S>) {
        let rec = EventRecord {
            seq: self.log.len() as u64,
            time: t.clone(),
            op,
            actor: actor.to_string(),
            dx: self.open_interest() - before.x,
            dc: self.collateral.clone() - before.c,
            dr: self.reserve.clone() - before.r,
            lp_yield: std::mem::replace(&mut self.op_yield, PerAsset::zero()),
            inflow: std::mem::replace(&mut self.op_in, PerAsset::zero()),
            outflow: std::mem::replace(&mut self.op_out, PerAsset::zero()),
        };
        self.log.push(rec);
    }

    /// Accrues, then runs `body`. Bodies validate before mutating, so a
    /// failed body leaves only the accrual behind (logged as such).
    fn run<T>(
        &mut self,
        t: &S,
        op: OpKind,
        actor: &str,
        body: impl FnOnce(&mut Self) -> Result<T, EngineError>,
    ) -> Result<T, EngineError> {
        self.check_time(t)?;
        let before = Before {
            x: self.open_interest(),
            c: self.collateral.clone(),
            r: self.reserve.clone(),
        };
        self.accrue_inner(t)?;
        match body(self) {
            Ok(v) => {
                self.record(t, op, actor, before);
                Ok(v)
            }
            Err(e) => {
                if !self.op_yield.is_zero() || before.x != self.open_interest() {
                    self.record(t, OpKind::Accrue, "", before);
                }
                Err(e)
            }
        }
    }

    /// Brings the market to time `t`, releasing amortization yield to LPs.
    pub fn accrue(&mut self, t: &S) -> Result<S, EngineError> {
        self.check_time(t)?;
        let before = Before {
            x: self.open_interest(),
            c: self.collateral.clone(),
            r: self.reserve.clone(),
        };
        let released = self.accrue_inner(t)?;
        self.record(t, OpKind::Accrue, "", before);
        Ok(released)
    }

    fn require_positive(amount: &S) -> Result<(), EngineError> {
        if !amount.is_positive() {
            return Err(EngineError::NonPositive(amount.to_string()));
        }
        Ok(())
    }

    fn strict_boundary(&self) -> bool {
        self.curve.unbounded_at_full_utilization()
    }

    /// Buys `notional` new options, paying `Phi(X + x, C) - Phi(X, C)`.
    pub fn buy_to_open(&mut self, actor: &str, t: &S, notional: &S) -> Result<OpenReceipt<S>, EngineError> {
        Self::require_positive(notional)?;
        self.run(t, OpKind::BuyOpen, actor, |m| {
            let x = m.open_interest();
            let c = m.collateral.clone();
            let room = c.clone() - x.clone();
            let at_boundary = *notional == room && m.strict_boundary();
            if *notional > room || at_boundary {
                return Err(EngineError::InsufficientCapacity {
                    requested: notional.to_string(),
                    available: room.to_string(),
                });
            }
            let raw = (notional.clone() / m.index.clone()).floor_to(&m.config.quantum);
            if raw.is_zero() {
                return Err(EngineError::AmountTooSmall(notional.to_string()));
            }
            let minted = raw.clone() * m.index.clone();
            let phi_old = m.phi(&x, &c)?;
            let phi_new = m.phi(&(x + minted.clone()), &c)?;
            let cost = m.move_reserve(&phi_old, &phi_new);
            m.take_in(Asset::Numeraire, &cost);
            m.ledger.mint_options(actor, &raw)?;
            m.raw_open_interest = m.raw_open_interest.clone() + raw.clone();
            Ok(OpenReceipt { cost, notional: minted, raw })
        })
    }

    /// Raw units to burn for `notional`, plus any leftover dust that lapses.
    fn burn_plan(&self, actor: &str, notional: &S) -> Result<(S, S), EngineError> {
        let have = self.ledger.option_raw(actor);
        let mut raw = (notional.clone() / self.index.clone()).ceil_to(&self.config.quantum);
        // Rounded division can overshoot a full balance by one unit in decimal mode.
        if S::MODE == Mode::Decimal && raw > have && raw.clone() - have.clone() <= self.config.quantum {
            raw = have.clone();
        }
        if raw > have {
            return Err(LedgerError::InsufficientOptions {
                account: actor.to_string(),
                have: (have * self.index.clone()).to_string(),
                need: notional.to_string(),
            }
            .into());
        }
        let rest = have - raw.clone();
        let dust = if rest.is_positive() && rest.clone() * self.index.clone() < self.config.quantum {
            rest
        } else {
            S::zero()
        };
        Ok((raw, dust))
    }

    /// Burns `dust` raw units from `actor`; the reserve it frees goes to LPs.
    fn lapse_dust(&mut self, actor: &str, dust: &S) -> Result<(), EngineError> {
        if dust.is_zero() {
            return Ok(());
        }
        let x = self.open_interest();
        let x_new = x.clone() - dust.clone() * self.index.clone();
        let phi_old = self.phi(&x, &self.collateral)?;
        let phi_new = self.phi(&x_new, &self.collateral)?;
        let released = -self.move_reserve(&phi_old, &phi_new);
        self.ledger.burn_options(actor, dust)?;
        self.raw_open_interest = self.raw_open_interest.clone() - dust.clone();
        self.pay_lps(Asset::Numeraire, &released);
        Ok(())
    }

    /// Sells `notional` options back to the pool for `Phi(X, C) - Phi(X - x, C)`.
    pub fn sell_to_close(&mut self, actor: &str, t: &S, notional: &S) -> Result<CloseReceipt<S>, EngineError> {
        Self::require_positive(notional)?;
        self.run(t, OpKind::SellClose, actor, |m| {
            let (raw, dust) = m.burn_plan(actor, notional)?;
            let x = m.open_interest();
            let c = m.collateral.clone();
            let burned = raw.clone() * m.index.clone();
            let phi_old = m.phi(&x, &c)?;
            let phi_new = m.phi(&(x - burned.clone()), &c)?;
            let rebate = -m.move_reserve(&phi_old, &phi_new);
            m.ledger.burn_options(actor, &raw)?;
            m.raw_open_interest = m.raw_open_interest.clone() - raw.clone();
            m.pay_out(Asset::Numeraire, &rebate);
            m.lapse_dust(actor, &dust)?;
            Ok(CloseReceipt { rebate, notional: burned, raw, forfeited_raw: dust })
        })
    }

    /// Deposits `collateral` notional units of backing asset and receives
    /// `Phi(X, C) - Phi(X, C + c)` plus LP shares.
    pub fn sell_to_open(&mut self, actor: &str, t: &S, collateral: &S) -> Result<DepositReceipt<S>, EngineError> {
        Self::require_positive(collateral)?;
        self.run(t, OpKind::SellOpen, actor, |m| {
            let x = m.open_interest();
            let c = m.collateral.clone();
            let shares = collateral.clone();
            let c_new = c.clone() + collateral.clone();
            let phi_old = m.phi(&x, &c)?;
            let phi_new = m.phi(&x, &c_new)?;
            let rebate = -m.move_reserve(&phi_old, &phi_new);
            let deposit = m.collateral_amount(collateral);
            m.take_in(m.params.collateral_asset(), &deposit);
            m.pay_out(Asset::Numeraire, &rebate);
            m.ledger.mint_shares(actor, &shares)?;
            m.collateral = c_new;
            Ok(DepositReceipt { rebate, shares })
        })
    }

    /// Asset amount behind `notional` units of collateral.
    fn collateral_amount(&self, notional: &S) -> S {
        match self.params.kind {
            OptionKind::Call => notional.clone(),
            OptionKind::Put => self.params.strike.clone() * notional.clone(),
        }
    }

    /// Withdraws `collateral` notional units, paying `Phi(X, C - c) - Phi(X, C)`.
    /// Capped at the idle collateral `C - X`.
    pub fn buy_to_close(&mut self, actor: &str, t: &S, collateral: &S) -> Result<WithdrawReceipt<S>, EngineError> {
        if collateral.is_negative() {
            return Err(EngineError::NonPositive(collateral.to_string()));
        }
        self.run(t, OpKind::BuyClose, actor, |m| {
            let asset = m.params.collateral_asset();
            if collateral.is_zero() {
                return Ok(WithdrawReceipt {
                    cost: S::zero(),
                    collateral: S::zero(),
                    returned: (asset, S::zero()),
                    shares_burned: S::zero(),
                    yield_paid: PerAsset::zero(),
                });
            }
            let x = m.open_interest();
            let c = m.collateral.clone();
            let room = c.clone() - x.clone();
            if *collateral > room {
                return Err(EngineError::InsufficientCapacity {
                    requested: collateral.to_string(),
                    available: room.to_string(),
                });
            }
            let have = m.ledger.lp_shares(actor);
            if *collateral > have {
                return Err(LedgerError::InsufficientShares {
                    account: actor.to_string(),
                    have: have.to_string(),
                    need: collateral.to_string(),
                }
                .into());
            }
            let burn = collateral.clone();
            let amount = collateral.clone();
            let c_new = c.clone() - amount.clone();
            let phi_old = m.phi(&x, &c)?;
            let phi_new = m.phi(&x, &c_new)?;
            let cost = m.move_reserve(&phi_old, &phi_new);
            m.take_in(Asset::Numeraire, &cost);
            let returned = m.collateral_amount(&amount);
            m.pay_out(asset, &returned);
            m.ledger.burn_shares(actor, &burn)?;
            m.collateral = c_new;
            let paid = m.ledger.claim(actor)?;
            m.pay_out(Asset::Numeraire, &paid.numeraire);
            m.pay_out(Asset::Underlying, &paid.underlying);
            Ok(WithdrawReceipt {
                cost,
                collateral: amount,
                returned: (asset, returned),
                shares_burned: burn,
                yield_paid: paid,
            })
        })
    }

    /// Payment the holder must deliver to exercise `notional`.
    pub fn exercise_payment(&self, notional: &S) -> (Asset, S) {
        match self.params.kind {
            OptionKind::Call => (Asset::Numeraire, self.params.strike.clone() * notional.clone()),
            OptionKind::Put => (Asset::Underlying, notional.clone()),
        }
    }

    /// Physically settles `notional` options. No external price is consulted.
    pub fn exercise(
        &mut self,
        actor: &str,
        t: &S,
        notional: &S,
        payment: &S,
    ) -> Result<Settlement<S>, EngineError> {
        Self::require_positive(notional)?;
        self.run(t, OpKind::Exercise, actor, |m| {
            let (pay_asset, required) = m.exercise_payment(notional);
            if *payment != required {
                return Err(EngineError::PaymentMismatch {
                    expected: required.to_string(),
                    got: payment.to_string(),
                });
            }
            let (raw, dust) = m.burn_plan(actor, notional)?;
            let x = m.open_interest();
            let c = m.collateral.clone();
            let x_new = x.clone() - raw.clone() * m.index.clone();
            let c_new = c.clone() - notional.clone();
            let phi_old = m.phi(&x, &c)?;
            let phi_new = m.phi(&x_new, &c_new)?;
            let rebate = -m.move_reserve(&phi_old, &phi_new);
            m.ledger.burn_options(actor, &raw)?;
            m.raw_open_interest = m.raw_open_interest.clone() - raw.clone();
            m.collateral = c_new;

            let (receive_asset, delivered) = match m.params.kind {
                OptionKind::Call => (Asset::Underlying, notional.clone()),
                OptionKind::Put => (Asset::Numeraire, m.params.strike.clone() * notional.clone()),
            };
            m.take_in(pay_asset, payment);
            m.pay_out(receive_asset, &delivered);
            m.pay_lps(Asset::Numeraire, &rebate);
            m.pay_lps(pay_asset, payment);
            m.lapse_dust(actor, &dust)?;
            let quantum = m.config.quantum.clone();
            m.ledger.rescale_shares(&m.collateral, &quantum);
            Ok(Settlement {
                pay: (pay_asset, payment.clone()),
                receive: (receive_asset, delivered),
                lp_rebate: rebate,
                raw_burned: raw + dust,
            })
        })
    }

    /// Pays an LP's accumulated yield (whole cash units).
    pub fn claim_yield(&mut self, actor: &str, t: &S) -> Result<PerAsset<S>, EngineError> {
        self.run(t, OpKind::Claim, actor, |m| {
            let paid = m.ledger.claim(actor)?;
            m.pay_out(Asset::Numeraire, &paid.numeraire);
            m.pay_out(Asset::Underlying, &paid.underlying);
            Ok(paid)
        })
    }

    /// Moves raw option units between accounts. No accrual.
    pub fn transfer_options(&mut self, from: &str, to: &str, raw: &S) -> Result<(), EngineError> {
        self.ledger.transfer_options(from, to, raw)?;
        let t = self.last_accrual.clone();
        let before = Before {
            x: self.open_interest(),
            c: self.collateral.clone(),
            r: self.reserve.clone(),
        };
        self.record(&t, OpKind::Transfer, from, before);
        Ok(())
    }

    /// Cash a holder would receive for selling `notional` at time `t`.
    pub fn quote_sell_to_close(&self, t: &S, notional: &S) -> Result<S, EngineError> {
        self.check_time(t)?;
        let index = self.index_for(t);
        let x = self.raw_open_interest.clone() * index.clone();
        let raw = (notional.clone() / index.clone()).ceil_to(&self.config.quantum);
        let burned = raw * index;
        if burned > x {
            return Err(EngineError::InsufficientCapacity {
                requested: notional.to_string(),
                available: x.to_string(),
            });
        }
        let now = self.cash_level(&self.phi(&x, &self.collateral)?);
        let after = self.cash_level(&self.phi(&(x - burned), &self.collateral)?);
        Ok(now - after)
    }

    /// Fault injection for audit tests.
    #[doc(hidden)]
    pub fn set_reserve_unchecked(&mut self, reserve: S) {
        self.reserve = reserve;
    }

    fn tolerance_ok(&self, a: &S, b: &S) -> bool {
        match S::MODE {
            Mode::Rational => a == b,
            Mode::Decimal => a.approx_eq(b, RESERVE_REL_TOL, RESERVE_SCALE_FLOOR),
        }
    }

    /// Recomputes every invariant from scratch.
    pub fn audit(&self) -> AuditReport {
        let mut checks = Vec::new();
        let mut warnings = Vec::new();
        let mut push = |name: &'static str, passed: bool, detail: String| {
            checks.push(Check { name, passed, detail });
        };
        let x = self.open_interest();
        let c = self.collateral.clone();

        match self.curve.total_premium(&x, &c) {
            Ok(Extended::Finite(phi)) => {
                let ok = self.tolerance_ok(&self.reserve, &phi);
                push("reserve_identity", ok, format!("R = {}, Phi(X, C) = {phi}", self.reserve));
                let level = self.cash_level(&phi);
                let ok = self.tolerance_ok(&self.reserve_cash, &level);
                push(
                    "reserve_cash",
                    ok,
                    format!("cash {} vs ceil(Phi) = {level}", self.reserve_cash),
                );
            }
            other => push(
                "reserve_identity",
                false,
                format!("Phi(X, C) not finite: {other:?}"),
            ),
        }

        let floor = match S::MODE {
            Mode::Rational => S::zero(),
            Mode::Decimal => -S::parse(DECIMAL_NOISE).unwrap(),
        };
        let solvent = self.reserve >= floor && x <= c;
        push("solvency", solvent, format!("R = {}, X = {x}, C = {c}", self.reserve));

        if self.strict_boundary() && c.is_positive() && x >= c {
            push("strict_utilization", false, format!("X = {x} reached C = {c}"));
        } else {
            push("strict_utilization", true, "X < C or curve not strict".into());
        }
        if !self.strict_boundary() && c.is_positive() && x == c {
            warnings.push("collateral fully utilized".into());
        }

        let sum_raw = self
            .ledger
            .accounts()
            .fold(S::zero(), |acc, a| acc + a.option_raw.clone());
        let ok = sum_raw == self.raw_open_interest && self.ledger.total_raw() == &self.raw_open_interest;
        push(
            "option_supply",
            ok,
            format!("sum of balances {sum_raw}, open interest {}", self.raw_open_interest),
        );

        let sum_shares = self
            .ledger
            .accounts()
            .fold(S::zero(), |acc, a| acc + a.lp_shares.clone());
        let ok = &sum_shares == self.ledger.total_shares() && self.ledger.total_shares() == &c;
        push(
            "lp_shares",
            ok,
            format!("sum {sum_shares}, total {}, collateral {c}", self.ledger.total_shares()),
        );

        let liab = self.ledger.liabilities();
        let (num_need, und_need) = match self.params.kind {
            OptionKind::Call => (
                self.reserve_cash.clone() + liab.numeraire.clone(),
                c.clone() + liab.underlying.clone(),
            ),
            OptionKind::Put => (
                self.params.strike.clone() * c.clone() + self.reserve_cash.clone() + liab.numeraire.clone(),
                liab.underlying.clone(),
            ),
        };
        let ok = self.tolerance_ok(&self.holdings.numeraire, &num_need)
            && self.tolerance_ok(&self.holdings.underlying, &und_need);
        push(
            "asset_reconciliation",
            ok,
            format!(
                "numeraire held {} vs owed {num_need}; underlying held {} vs owed {und_need}",
                self.holdings.numeraire, self.holdings.underlying
            ),
        );

        let mut flow = PerAsset::<S>::zero();
        for ev in &self.log {
            for asset in [Asset::Numeraire, Asset::Underlying] {
                let f = flow.get_mut(asset);
                *f = f.clone() + ev.inflow.get(asset).clone() - ev.outflow.get(asset).clone();
            }
        }
        let ok = self.tolerance_ok(&flow.numeraire, &self.holdings.numeraire)
            && self.tolerance_ok(&flow.underlying, &self.holdings.underlying);
        push(
            "event_log_conservation",
            ok,
            format!("replayed net flows {} / {}", flow.numeraire, flow.underlying),
        );

        let per_share = self.ledger.per_share();
        let ok = self.ledger.accounts().all(|a| {
            a.snapshot.numeraire <= per_share.numeraire && a.snapshot.underlying <= per_share.underlying
        });
        push("yield_snapshots", ok, "snapshots never exceed accumulators".into());

        AuditReport { checks, warnings }
    }

    /// Writes the event log as CSV.
    pub fn write_events<W: io::Write>(&self, out: W) -> csv::Result<()> {
        write_events(&self.log, out)
    }
}

/// Relative tolerance for reserve identities in decimal mode.
pub const RESERVE_REL_TOL: f64 = 1e-12;
/// Smallest scale the relative tolerance is applied to, so differences
/// below `RESERVE_REL_TOL * RESERVE_SCALE_FLOOR` count as equal.
pub const RESERVE_SCALE_FLOOR: f64 = 1e-18;
const DECIMAL_NOISE: &str = "1e-30";

pub const EVENT_HEADER: [&str; 13] = [
    "seq",
    "time",
    "op",
    "actor",
    "dX",
    "dC",
    "dR",
    "yield_numeraire",
    "yield_underlying",
    "numeraire_in",
    "numeraire_out",
    "underlying_in",
    "underlying_out",
];

pub fn write_events<S: Scalar, W: io::Write>(events: &[EventRecord<S>], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENT_HEADER)?;
    for ev in events {
        w.write_record([
            ev.seq.to_string(),
            ev.time.to_string(),
            ev.op.tag().to_string(),
            ev.actor.clone(),
            ev.dx.to_string(),
            ev.dc.to_string(),
            ev.dr.to_string(),
            ev.lp_yield.numeraire.to_string(),
            ev.lp_yield.underlying.to_string(),
            ev.inflow.numeraire.to_string(),
            ev.outflow.numeraire.to_string(),
            ev.inflow.underlying.to_string(),
            ev.outflow.underlying.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::Exact;

    fn e(s: &str) -> Exact {
        Exact::parse(s).unwrap()
    }

    fn call_market(strike: &str) -> Market<Exact> {
        let params = SeriesParams::new(OptionKind::Call, e(strike), e("0.003"), e("0")).unwrap();
        Market::create(params, PremiumCurve::standard_call(e(strike)), EngineConfig::default()).unwrap()
    }

    fn put_market(strike: &str) -> Market<Exact> {
        let params = SeriesParams::new(OptionKind::Put, e(strike), e("0.003"), e("0")).unwrap();
        Market::create(params, PremiumCurve::standard_put(e(strike)), EngineConfig::default()).unwrap()
    }

    fn t0() -> Exact {
        e("0")
    }

    #[test]
    fn create_market_examples() {
        let m = call_market("1");
        assert!(m.open_interest().is_zero());
        assert!(m.collateral().is_zero());
        assert!(m.reserve().is_zero());
        assert_eq!(m.index(), &e("1"));
        assert!(m.audit().passed());

        let params = SeriesParams::new(OptionKind::Put, e("2"), e("0.003"), e("0")).unwrap();
        let err = Market::create(params, PremiumCurve::standard_put(e("1")), EngineConfig::default());
        assert!(matches!(err, Err(EngineError::SeriesMismatch(_))));

        let m = put_market("1");
        assert!(m.holdings().numeraire.is_zero());
        assert!(m.collateral().is_zero());

        let params = SeriesParams::new(OptionKind::Call, e("1"), e("0.003"), e("0")).unwrap();
        let err = Market::create(params, PremiumCurve::standard_put(e("1")), EngineConfig::default());
        assert!(matches!(err, Err(EngineError::SeriesMismatch(_))));
    }

    #[test]
    fn invalid_series() {
        assert!(SeriesParams::new(OptionKind::Call, e("0"), e("0.1"), e("0")).is_err());
        assert!(SeriesParams::new(OptionKind::Call, e("1"), e("0"), e("0")).is_err());
    }

    #[test]
    fn non_strict_call_requires_opt_in() {
        let params = SeriesParams::new(OptionKind::Call, e("1"), e("0.01"), e("0")).unwrap();
        let rows = vec![(e("0"), e("0")), (e("1"), e("5"))];
        let curve = PremiumCurve::table(OptionKind::Call, e("1"), rows, false).unwrap();
        assert!(Market::create(params.clone(), curve.clone(), EngineConfig::default()).is_err());
        let cfg = EngineConfig { allow_non_strict_calls: true, ..EngineConfig::default() };
        let mut m = Market::create(params, curve, cfg).unwrap();
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        // Full utilization is allowed, with an audit warning.
        m.buy_to_open("h", &t0(), &e("2")).unwrap();
        let report = m.audit();
        assert!(report.passed(), "{report}");
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn buy_to_open_examples() {
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        assert!(matches!(
            m.buy_to_open("h", &t0(), &e("2.5")),
            Err(EngineError::InsufficientCapacity { .. })
        ));
        // Strict call curve: X + x = C is rejected.
        assert!(matches!(
            m.buy_to_open("h", &t0(), &e("2")),
            Err(EngineError::InsufficientCapacity { .. })
        ));
        let r = m.buy_to_open("h", &t0(), &e("1")).unwrap();
        assert_eq!(r.cost, e("2"));
        assert_eq!(r.raw, e("1"));
        assert_eq!(m.reserve(), &e("2"));

        let mut p = put_market("1");
        p.sell_to_open("lp", &t0(), &e("2")).unwrap();
        assert_eq!(p.buy_to_open("h", &t0(), &e("1")).unwrap().cost, e("0.25"));
        // Put curve allows full utilization.
        p.buy_to_open("h", &t0(), &e("1")).unwrap();
        assert_eq!(p.utilization(), e("1"));
        assert!(p.audit().passed());
    }

    #[test]
    fn raw_units_scale_with_index() {
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("10")).unwrap();
        let t = e("10");
        let r = m.buy_to_open("h", &t, &e("1")).unwrap();
        let index = m.params().index_at(&t);
        assert_eq!(r.raw, (e("1") / index.clone()).floor_to(&e("1e-18")));
        assert!(r.notional <= e("1"));
        assert!(e("1") - r.notional.clone() < e("1e-18"));
        assert_eq!(m.notional_of("h", &t), r.notional);
    }

    #[test]
    fn sell_to_close_examples() {
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        let bought = m.buy_to_open("h", &t0(), &e("1")).unwrap();
        let sold = m.sell_to_close("h", &t0(), &bought.notional).unwrap();
        assert_eq!(sold.rebate, bought.cost);
        assert_eq!(sold.rebate, e("2"));
        assert!(m.reserve().is_zero());
        m.buy_to_open("h", &t0(), &e("0.5")).unwrap();
        assert!(matches!(
            m.sell_to_close("h", &t0(), &e("0.6")),
            Err(EngineError::Ledger(LedgerError::InsufficientOptions { .. }))
        ));
        assert!(m.sell_to_close("stranger", &t0(), &e("0.1")).is_err());
        assert!(m.audit().passed());
    }

    #[test]
    fn sell_to_open_examples() {
        let mut m = call_market("1");
        assert!(m.sell_to_open("lp", &t0(), &e("3")).unwrap().rebate.is_zero());
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        let r = m.sell_to_open("lp2", &t0(), &e("1")).unwrap();
        assert_eq!(r.rebate, e("1.25"));
        assert_eq!(r.shares, e("1"));
        assert_eq!(m.holdings().underlying, e("3"));

        let mut p = put_market("1");
        p.sell_to_open("lp", &t0(), &e("2")).unwrap();
        p.buy_to_open("h", &t0(), &e("1")).unwrap();
        assert_eq!(p.sell_to_open("lp2", &t0(), &e("2")).unwrap().rebate, e("0.125"));
        assert!(matches!(p.sell_to_open("lp", &t0(), &e("0")), Err(EngineError::NonPositive(_))));
        assert!(p.audit().passed());
    }

    #[test]
    fn buy_to_close_examples() {
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.sell_to_open("lp2", &t0(), &e("1")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        let noop = m.buy_to_close("lp", &t0(), &e("0")).unwrap();
        assert!(noop.cost.is_zero());
        let r = m.buy_to_close("lp2", &t0(), &e("1")).unwrap();
        assert_eq!(r.cost, e("1.25"));
        assert_eq!(r.returned, (Asset::Underlying, e("1")));
        assert!(matches!(
            m.buy_to_close("lp", &t0(), &e("1.5")),
            Err(EngineError::InsufficientCapacity { .. })
        ));
        assert!(m.audit().passed());
    }

    #[test]
    fn buy_to_close_needs_shares() {
        let mut m = put_market("1");
        m.sell_to_open("lp", &t0(), &e("1")).unwrap();
        m.sell_to_open("lp2", &t0(), &e("1")).unwrap();
        assert!(matches!(
            m.buy_to_close("lp", &t0(), &e("1.5")),
            Err(EngineError::Ledger(LedgerError::InsufficientShares { .. }))
        ));
        let r = m.buy_to_close("lp", &t0(), &e("1")).unwrap();
        assert_eq!(r.returned, (Asset::Numeraire, e("1")));
    }

    #[test]
    fn exercise_call() {
        let mut m = call_market("1.5");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        assert!(matches!(
            m.exercise("h", &t0(), &e("1"), &e("1")),
            Err(EngineError::PaymentMismatch { .. })
        ));
        let s = m.exercise("h", &t0(), &e("1"), &e("1.5")).unwrap();
        assert_eq!(s.pay, (Asset::Numeraire, e("1.5")));
        assert_eq!(s.receive, (Asset::Underlying, e("1")));
        assert_eq!(s.lp_rebate, e("2"));
        assert!(m.reserve().is_zero());
        assert_eq!(m.collateral(), &e("1"));
        // LP earned the premium rebate plus the strike payment.
        assert_eq!(m.ledger().claimable("lp").unwrap().numeraire, e("3.5"));
        assert!(m.audit().passed(), "{}", m.audit());
    }

    #[test]
    fn exercise_put() {
        let mut m = put_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        let s = m.exercise("h", &t0(), &e("0.5"), &e("0.5")).unwrap();
        assert_eq!(s.pay, (Asset::Underlying, e("0.5")));
        assert_eq!(s.receive, (Asset::Numeraire, e("0.5")));
        // 0.25 - 1/12, rounded up at both levels on the cash grid.
        let exact = e("0.25") - e("1") / e("12");
        assert_eq!(m.reserve(), &(e("1") / e("12")));
        assert!((s.lp_rebate.clone() - exact).abs() < e("1e-18"));
        assert_eq!(m.ledger().claimable("lp").unwrap().underlying, e("0.5"));
        assert!(m.audit().passed(), "{}", m.audit());
    }

    #[test]
    fn full_exercise_empties_reserve_and_retires_shares() {
        let mut m = put_market("1");
        m.sell_to_open("lp", &t0(), &e("1")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        let s = m.exercise("h", &t0(), &e("1"), &e("1")).unwrap();
        assert_eq!(s.lp_rebate, e("0.5"));
        assert!(m.reserve().is_zero());
        assert!(m.collateral().is_zero());
        assert!(m.ledger().total_shares().is_zero());
        assert_eq!(m.ledger().claimable("lp").unwrap().numeraire, e("0.5"));
        assert!(m.audit().passed(), "{}", m.audit());
        // A fresh underwriter starts a new share generation.
        let d = m.sell_to_open("lp2", &e("1"), &e("1")).unwrap();
        assert_eq!(d.shares, e("1"));
        assert!(m.audit().passed());
    }

    #[test]
    fn partial_exercise_shrinks_shares_pro_rata() {
        let mut m = put_market("1");
        m.sell_to_open("a", &t0(), &e("1")).unwrap();
        m.sell_to_open("b", &t0(), &e("3")).unwrap();
        m.buy_to_open("h", &t0(), &e("2")).unwrap();
        m.exercise("h", &t0(), &e("2"), &e("2")).unwrap();
        assert_eq!(m.collateral(), &e("2"));
        assert_eq!(m.collateral_of("a"), e("0.5"));
        assert_eq!(m.collateral_of("b"), e("1.5"));
        assert!(m.audit().passed(), "{}", m.audit());
        // A later deposit still mints one share per unit.
        let d = m.sell_to_open("c", &t0(), &e("1")).unwrap();
        assert_eq!(d.shares, e("1"));
        m.buy_to_close("b", &t0(), &e("1.5")).unwrap();
        assert!(m.ledger().lp_shares("b").is_zero());
        assert!(m.audit().passed(), "{}", m.audit());
    }

    #[test]
    fn accrue_examples() {
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        assert!(m.accrue(&e("100")).unwrap().is_zero());
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        assert!(m.accrue(&t0()).unwrap().is_zero());
        assert_eq!(m.reserve(), &e("2"));
        m.accrue(&e("1")).unwrap();
        // Reference value: index exp(-0.003) at 38 digits, then
        // 2 - 2 i^2 / (2 - i)^2, evaluated independently at 45 digits.
        let reference = e("0.02382110974237849058925186348372751837500518");
        let released = e("2") - m.reserve().clone();
        assert!((released - reference).abs() < e("1e-43"));
        assert!(matches!(m.accrue(&e("0.5")), Err(EngineError::TimeRegression { .. })));
        assert!(m.audit().passed());
    }

    #[test]
    fn claim_yield_examples() {
        let mut m = call_market("1");
        m.sell_to_open("a", &t0(), &e("1")).unwrap();
        m.sell_to_open("b", &t0(), &e("3")).unwrap();
        m.buy_to_open("h", &t0(), &e("2")).unwrap();
        m.accrue(&e("30")).unwrap();
        let total = m.ledger().distributed().numeraire.clone();
        let a = m.claim_yield("a", &e("30")).unwrap().numeraire;
        let b = m.claim_yield("b", &e("30")).unwrap().numeraire;
        assert!(a.is_positive());
        // 1:3 split up to sub-quantum remainders.
        assert!((b.clone() - a.clone() * e("3")).abs() <= e("4e-18"));
        assert!(total.clone() - (a + b) <= e("2e-18"));
        assert!(m.claim_yield("a", &e("30")).unwrap().is_zero());
        assert!(matches!(
            m.claim_yield("nobody", &e("30")),
            Err(EngineError::Ledger(LedgerError::UnknownAccount(_)))
        ));
        assert!(m.audit().passed(), "{}", m.audit());
    }

    #[test]
    fn audit_flags_corrupted_reserve() {
        let mut m = put_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        assert!(m.audit().passed());
        m.set_reserve_unchecked(e("0.3"));
        let report = m.audit();
        assert!(!report.passed());
        assert!(!report.check("reserve_identity").unwrap().passed);
    }

    #[test]
    fn failed_operation_keeps_state() {
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        let before = (m.open_interest(), m.collateral().clone(), m.reserve().clone());
        assert!(m.buy_to_open("h", &t0(), &e("5")).is_err());
        assert_eq!(before, (m.open_interest(), m.collateral().clone(), m.reserve().clone()));
        // A failure after time passes leaves only the accrual behind.
        assert!(m.buy_to_open("h", &e("5"), &e("5")).is_err());
        assert_eq!(m.events().last().unwrap().op, OpKind::Accrue);
        assert!(m.audit().passed());
    }

    #[test]
    fn dust_lapses_to_pool() {
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        let almost = e("1") - e("0.5e-18");
        let r = m.sell_to_close("h", &t0(), &almost).unwrap();
        // ceil to the quantum burns the whole balance here.
        assert_eq!(r.raw, e("1"));
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        let t = e("1");
        let held = m.notional_of("h", &t);
        // One raw unit left over is worth less than one token unit once decayed.
        let keep = e("1e-18") * m.params().index_at(&t);
        let r = m.sell_to_close("h", &t, &(held - keep)).unwrap();
        assert!(r.forfeited_raw.is_positive());
        assert!(m.ledger().option_raw("h").is_zero());
        assert!(m.audit().passed(), "{}", m.audit());
    }

    #[test]
    fn transfers_do_not_accrue() {
        let mut m = call_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.buy_to_open("a", &t0(), &e("1")).unwrap();
        m.transfer_options("a", "b", &e("0.4")).unwrap();
        assert_eq!(m.last_accrual(), &t0());
        assert_eq!(m.ledger().option_raw("b"), e("0.4"));
        assert!(m.audit().passed());
    }

    #[test]
    fn event_log_csv() {
        let mut m = put_market("1");
        m.sell_to_open("lp", &t0(), &e("2")).unwrap();
        m.buy_to_open("h", &t0(), &e("1")).unwrap();
        let mut buf = Vec::new();
        m.write_events(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], EVENT_HEADER.join(","));
        assert_eq!(lines[1], "0,0,sell_open,lp,0,2,0,0,0,2,0,0,0");
        assert_eq!(lines[2], "1,0,buy_open,h,1,0,0.25,0,0,0.25,0,0,0");
    }
}
