//! Account-level accounting for option tokens and LP shares.
//!
//! Option balances are stored in raw units; the holder's notional at time `t`
//! is `raw * index(t)`, so amortization never touches individual balances.
//! Yield owed to liquidity providers is tracked with per-share accumulators
//! (one for the numéraire, one for the underlying) and settled lazily.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use serde::Serialize;
use thiserror::Error;

use crate::num::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("unknown account `{0}`")]
    UnknownAccount(String),
    #[error("account `{account}` holds {have} raw option units, needs {need}")]
    InsufficientOptions { account: String, have: String, need: String },
    #[error("account `{account}` holds {have} LP shares, needs {need}")]
    InsufficientShares { account: String, have: String, need: String },
    #[error("amount must be positive, got {0}")]
    NonPositive(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Asset {
    Numeraire,
    Underlying,
}

impl fmt::Display for Asset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Asset::Numeraire => f.write_str("numeraire"),
            Asset::Underlying => f.write_str("underlying"),
        }
    }
}

/// Per-asset pair of values.
#[derive(Debug, Clone, PartialEq)]
pub struct PerAsset<S> {
    pub numeraire: S,
    pub underlying: S,
}

impl<S: Scalar> PerAsset<S> {
    pub fn zero() -> Self {
        PerAsset { numeraire: S::zero(), underlying: S::zero() }
    }

    pub fn get(&self, asset: Asset) -> &S {
        match asset {
            Asset::Numeraire => &self.numeraire,
            Asset::Underlying => &self.underlying,
        }
    }

    pub fn get_mut(&mut self, asset: Asset) -> &mut S {
        match asset {
            Asset::Numeraire => &mut self.numeraire,
            Asset::Underlying => &mut self.underlying,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.numeraire.is_zero() && self.underlying.is_zero()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Account<S> {
    pub id: String,
    pub option_raw: S,
    pub lp_shares: S,
    /// Accumulator values at the last settlement.
    pub snapshot: PerAsset<S>,
    /// Settled but not yet claimed yield.
    pub owed: PerAsset<S>,
}

impl<S: Scalar> Account<S> {
    fn new(id: &str) -> Self {
        Account {
            id: id.to_string(),
            option_raw: S::zero(),
            lp_shares: S::zero(),
            snapshot: PerAsset::zero(),
            owed: PerAsset::zero(),
        }
    }
}

/// Notional held by an account at a given index value.
#[derive(Debug, Clone, PartialEq)]
pub struct NotionalView<S> {
    pub account: String,
    pub notional: S,
}

/// Registry of accounts plus the global yield accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger<S> {
    accounts: BTreeMap<String, Account<S>>,
    total_raw: S,
    total_shares: S,
    per_share: PerAsset<S>,
    /// Distribution remainder smaller than one accumulator step per share.
    carry: PerAsset<S>,
    distributed: PerAsset<S>,
    claimed: PerAsset<S>,
    acc_quantum: S,
    cash_quantum: S,
}

impl<S: Scalar> Ledger<S> {
    /// `cash_quantum` is the smallest transferable amount; accumulator steps
    /// use `cash_quantum^2` so per-share credits stay on a fixed grid.
    pub fn new(cash_quantum: S) -> Self {
        Ledger {
            accounts: BTreeMap::new(),
            total_raw: S::zero(),
            total_shares: S::zero(),
            per_share: PerAsset::zero(),
            carry: PerAsset::zero(),
            distributed: PerAsset::zero(),
            claimed: PerAsset::zero(),
            acc_quantum: cash_quantum.clone() * cash_quantum.clone(),
            cash_quantum,
        }
    }

    pub fn accounts(&self) -> impl Iterator<Item = &Account<S>> {
        self.accounts.values()
    }

    pub fn account(&self, id: &str) -> Result<&Account<S>, LedgerError> {
        self.accounts
            .get(id)
            .ok_or_else(|| LedgerError::UnknownAccount(id.to_string()))
    }

    fn account_mut(&mut self, id: &str) -> Result<&mut Account<S>, LedgerError> {
        self.accounts
            .get_mut(id)
            .ok_or_else(|| LedgerError::UnknownAccount(id.to_string()))
    }

    fn entry(&mut self, id: &str) -> &mut Account<S> {
        self.accounts
            .entry(id.to_string())
            .or_insert_with(|| Account::new(id))
    }

    pub fn total_raw(&self) -> &S {
        &self.total_raw
    }

    pub fn total_shares(&self) -> &S {
        &self.total_shares
    }

    pub fn per_share(&self) -> &PerAsset<S> {
        &self.per_share
    }

    pub fn carry(&self) -> &PerAsset<S> {
        &self.carry
    }

    pub fn distributed(&self) -> &PerAsset<S> {
        &self.distributed
    }

    pub fn claimed(&self) -> &PerAsset<S> {
        &self.claimed
    }

    pub fn option_raw(&self, id: &str) -> S {
        self.accounts
            .get(id)
            .map(|a| a.option_raw.clone())
            .unwrap_or_else(S::zero)
    }

    pub fn lp_shares(&self, id: &str) -> S {
        self.accounts
            .get(id)
            .map(|a| a.lp_shares.clone())
            .unwrap_or_else(S::zero)
    }

    pub fn notional_view(&self, id: &str, index: &S) -> NotionalView<S> {
        NotionalView {
            account: id.to_string(),
            notional: self.option_raw(id) * index.clone(),
        }
    }

    pub fn mint_options(&mut self, id: &str, raw: &S) -> Result<(), LedgerError> {
        if !raw.is_positive() {
            return Err(LedgerError::NonPositive(raw.to_string()));
        }
        let acct = self.entry(id);
        acct.option_raw = acct.option_raw.clone() + raw.clone();
        self.total_raw = self.total_raw.clone() + raw.clone();
        Ok(())
    }

    pub fn burn_options(&mut self, id: &str, raw: &S) -> Result<(), LedgerError> {
        if !raw.is_positive() {
            return Err(LedgerError::NonPositive(raw.to_string()));
        }
        let acct = self.account_mut(id)?;
        if acct.option_raw < *raw {
            return Err(LedgerError::InsufficientOptions {
                account: id.to_string(),
                have: acct.option_raw.to_string(),
                need: raw.to_string(),
            });
        }
        acct.option_raw = acct.option_raw.clone() - raw.clone();
        self.total_raw = self.total_raw.clone() - raw.clone();
        Ok(())
    }

    /// Pure balance move; total supply is unchanged and no accrual happens.
    pub fn transfer_options(&mut self, from: &str, to: &str, raw: &S) -> Result<(), LedgerError> {
        if !raw.is_positive() {
            return Err(LedgerError::NonPositive(raw.to_string()));
        }
        let have = self.account(from)?.option_raw.clone();
        if have < *raw {
            return Err(LedgerError::InsufficientOptions {
                account: from.to_string(),
                have: have.to_string(),
                need: raw.to_string(),
            });
        }
        if from == to {
            return Ok(());
        }
        let src = self.account_mut(from)?;
        src.option_raw = src.option_raw.clone() - raw.clone();
        let dst = self.entry(to);
        dst.option_raw = dst.option_raw.clone() + raw.clone();
        Ok(())
    }

    /// Moves pending accumulator yield into the account's owed balance.
    pub fn settle(&mut self, id: &str) -> Result<(), LedgerError> {
        let per_share = self.per_share.clone();
        let acct = self.account_mut(id)?;
        for asset in [Asset::Numeraire, Asset::Underlying] {
            let pending =
                acct.lp_shares.clone() * (per_share.get(asset).clone() - acct.snapshot.get(asset).clone());
            let owed = acct.owed.get_mut(asset);
            *owed = owed.clone() + pending;
            *acct.snapshot.get_mut(asset) = per_share.get(asset).clone();
        }
        Ok(())
    }

    pub fn mint_shares(&mut self, id: &str, shares: &S) -> Result<(), LedgerError> {
        if !shares.is_positive() {
            return Err(LedgerError::NonPositive(shares.to_string()));
        }
        self.entry(id);
        self.settle(id)?;
        let acct = self.account_mut(id)?;
        acct.lp_shares = acct.lp_shares.clone() + shares.clone();
        self.total_shares = self.total_shares.clone() + shares.clone();
        Ok(())
    }

    pub fn burn_shares(&mut self, id: &str, shares: &S) -> Result<(), LedgerError> {
        if !shares.is_positive() {
            return Err(LedgerError::NonPositive(shares.to_string()));
        }
        self.settle(id)?;
        let acct = self.account_mut(id)?;
        if acct.lp_shares < *shares {
            return Err(LedgerError::InsufficientShares {
                account: id.to_string(),
                have: acct.lp_shares.to_string(),
                need: shares.to_string(),
            });
        }
        acct.lp_shares = acct.lp_shares.clone() - shares.clone();
        self.total_shares = self.total_shares.clone() - shares.clone();
        Ok(())
    }

    /// Credits `amount` pro-rata to current shares. Returns the amount that
    /// reached the per-share accumulator; the rest waits in `carry`.
    pub fn distribute(&mut self, asset: Asset, amount: &S) -> S {
        if amount.is_zero() {
            return S::zero();
        }
        let d = self.distributed.get_mut(asset);
        *d = d.clone() + amount.clone();
        let pot = self.carry.get(asset).clone() + amount.clone();
        if !self.total_shares.is_positive() {
            *self.carry.get_mut(asset) = pot;
            return S::zero();
        }
        let step = (pot.clone() / self.total_shares.clone()).floor_to(&self.acc_quantum);
        let credited = step.clone() * self.total_shares.clone();
        *self.carry.get_mut(asset) = pot - credited.clone();
        let acc = self.per_share.get_mut(asset);
        *acc = acc.clone() + step;
        credited
    }

    /// Owed plus pending yield for an account.
    pub fn claimable(&self, id: &str) -> Result<PerAsset<S>, LedgerError> {
        let acct = self.account(id)?;
        let pending = |asset: Asset| {
            acct.owed.get(asset).clone()
                + acct.lp_shares.clone()
                    * (self.per_share.get(asset).clone() - acct.snapshot.get(asset).clone())
        };
        Ok(PerAsset {
            numeraire: pending(Asset::Numeraire),
            underlying: pending(Asset::Underlying),
        })
    }

    /// Pays out whole cash quanta of the account's yield; the sub-quantum
    /// remainder stays owed.
    pub fn claim(&mut self, id: &str) -> Result<PerAsset<S>, LedgerError> {
        self.settle(id)?;
        let quantum = self.cash_quantum.clone();
        let acct = self.account_mut(id)?;
        let mut paid = PerAsset::zero();
        for asset in [Asset::Numeraire, Asset::Underlying] {
            let owed = acct.owed.get(asset).clone();
            let out = owed.floor_to(&quantum);
            *acct.owed.get_mut(asset) = owed - out.clone();
            *paid.get_mut(asset) = out;
        }
        for asset in [Asset::Numeraire, Asset::Underlying] {
            let c = self.claimed.get_mut(asset);
            *c = c.clone() + paid.get(asset).clone();
        }
        Ok(paid)
    }

    /// Yield the pool still owes: every account's claimable amount plus carry.
    pub fn liabilities(&self) -> PerAsset<S> {
        let mut total = self.carry.clone();
        for id in self.accounts.keys() {
            let c = self.claimable(id).expect("known account");
            total.numeraire = total.numeraire.clone() + c.numeraire;
            total.underlying = total.underlying.clone() + c.underlying;
        }
        total
    }

    /// Settles every LP and zeroes all shares. Used when the collateral is
    /// exhausted: outstanding shares keep their earned yield but no longer
    /// represent collateral.
    pub fn retire_all_shares(&mut self) {
        let ids: Vec<String> = self.accounts.keys().cloned().collect();
        for id in ids {
            self.settle(&id).expect("known account");
            self.account_mut(&id).expect("known account").lp_shares = S::zero();
        }
        self.total_shares = S::zero();
    }

    /// Scales every LP's shares so they total `new_total`. Each balance is
    /// floored to `quantum` and the rounding residual goes to the largest
    /// holder (first by id on ties). Pending yield is settled first.
    pub fn rescale_shares(&mut self, new_total: &S, quantum: &S) {
        let total = self.total_shares.clone();
        if !total.is_positive() || *new_total == total {
            return;
        }
        if !new_total.is_positive() {
            self.retire_all_shares();
            return;
        }
        let ids: Vec<String> = self.accounts.keys().cloned().collect();
        let mut assigned = S::zero();
        let mut largest: Option<(String, S)> = None;
        for id in ids {
            self.settle(&id).expect("known account");
            let acct = self.account_mut(&id).expect("known account");
            if !acct.lp_shares.is_positive() {
                continue;
            }
            let scaled = (acct.lp_shares.clone() * new_total.clone() / total.clone()).floor_to(quantum);
            acct.lp_shares = scaled.clone();
            assigned = assigned + scaled.clone();
            if largest.as_ref().map_or(true, |(_, best)| scaled > *best) {
                largest = Some((id, scaled));
            }
        }
        if let Some((id, _)) = largest {
            let acct = self.account_mut(&id).expect("known account");
            acct.lp_shares = acct.lp_shares.clone() + (new_total.clone() - assigned);
        }
        self.total_shares = new_total.clone();
    }

    /// Writes `account,option_raw,notional_at_t,lp_shares,unclaimed_numeraire,unclaimed_underlying`.
    pub fn write_balances<W: io::Write>(&self, index: &S, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "account",
            "option_raw",
            "notional_at_t",
            "lp_shares",
            "unclaimed_numeraire",
            "unclaimed_underlying",
        ])?;
        for acct in self.accounts.values() {
            let c = self.claimable(&acct.id).expect("known account");
            w.write_record([
                acct.id.clone(),
                acct.option_raw.to_string(),
                (acct.option_raw.clone() * index.clone()).to_string(),
                acct.lp_shares.to_string(),
                c.numeraire.to_string(),
                c.underlying.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{exp_neg, Exact};

    fn e(s: &str) -> Exact {
        Exact::parse(s).unwrap()
    }

    fn ledger() -> Ledger<Exact> {
        Ledger::new(e("1e-18"))
    }

    #[test]
    fn mint_and_notional_views() {
        let mut l = ledger();
        l.mint_options("a", &e("5")).unwrap();
        assert_eq!(l.option_raw("a"), e("5"));
        l.mint_options("b", &e("2")).unwrap();
        let idx = e("0.8");
        let sum = l.notional_view("a", &idx).notional + l.notional_view("b", &idx).notional;
        assert_eq!(sum, l.total_raw().clone() * idx);
        // Index 0.5 is reached at q * t = ln 2; any index value scales raw linearly.
        assert_eq!(l.notional_view("a", &e("0.5")).notional, e("2.5"));
    }

    #[test]
    fn burn_paths() {
        let mut l = ledger();
        l.mint_options("a", &e("5")).unwrap();
        l.burn_options("a", &e("2")).unwrap();
        let idx = Exact::from_ratio(&exp_neg(&e("0.3").to_ratio()));
        assert_eq!(l.notional_view("a", &idx).notional, e("3") * idx.clone());
        assert!(matches!(
            l.burn_options("a", &e("4")),
            Err(LedgerError::InsufficientOptions { .. })
        ));
        l.burn_options("a", &e("3")).unwrap();
        assert!(l.option_raw("a").is_zero());
        assert!(l.total_raw().is_zero());
        assert!(matches!(l.burn_options("zz", &e("1")), Err(LedgerError::UnknownAccount(_))));
    }

    #[test]
    fn transfers_conserve_supply() {
        let mut l = ledger();
        l.mint_options("a", &e("5")).unwrap();
        l.transfer_options("a", "a", &e("3")).unwrap();
        assert_eq!(l.option_raw("a"), e("5"));
        let idx = e("0.9");
        let before = l.notional_view("a", &idx).notional;
        l.transfer_options("a", "b", &e("2")).unwrap();
        assert_eq!(l.total_raw(), &e("5"));
        assert_eq!(l.option_raw("a") + l.option_raw("b"), e("5"));
        // The moved tokens are worth the same notional in the new wallet.
        assert_eq!(
            l.notional_view("a", &idx).notional + l.notional_view("b", &idx).notional,
            before
        );
        assert!(l.transfer_options("b", "a", &e("3")).is_err());
    }

    #[test]
    fn pro_rata_distribution() {
        let mut l = ledger();
        l.mint_shares("a", &e("1")).unwrap();
        l.mint_shares("b", &e("3")).unwrap();
        l.distribute(Asset::Numeraire, &e("8"));
        assert_eq!(l.claimable("a").unwrap().numeraire, e("2"));
        assert_eq!(l.claimable("b").unwrap().numeraire, e("6"));
    }

    #[test]
    fn claim_twice_is_zero() {
        let mut l = ledger();
        l.mint_shares("a", &e("2")).unwrap();
        l.distribute(Asset::Underlying, &e("1.5"));
        assert_eq!(l.claim("a").unwrap().underlying, e("1.5"));
        assert!(l.claim("a").unwrap().is_zero());
        assert!(matches!(l.claim("nobody"), Err(LedgerError::UnknownAccount(_))));
    }

    #[test]
    fn late_joiner_gets_nothing_from_earlier_distributions() {
        let mut l = ledger();
        l.mint_shares("a", &e("1")).unwrap();
        l.distribute(Asset::Numeraire, &e("1"));
        l.mint_shares("b", &e("1")).unwrap();
        assert!(l.claimable("b").unwrap().numeraire.is_zero());
        l.distribute(Asset::Numeraire, &e("1"));
        assert_eq!(l.claimable("a").unwrap().numeraire, e("1.5"));
        assert_eq!(l.claimable("b").unwrap().numeraire, e("0.5"));
    }

    #[test]
    fn carry_holds_unsplittable_remainder() {
        let mut l = ledger();
        l.mint_shares("a", &e("3")).unwrap();
        let credited = l.distribute(Asset::Numeraire, &e("1"));
        assert!(credited < e("1"));
        let total = l.liabilities().numeraire;
        assert_eq!(total, e("1"));
        // Without shares, distributions wait in carry.
        let mut empty = ledger();
        empty.distribute(Asset::Numeraire, &e("2"));
        assert_eq!(empty.carry().numeraire, e("2"));
    }

    #[test]
    fn retire_keeps_earned_yield() {
        let mut l = ledger();
        l.mint_shares("a", &e("2")).unwrap();
        l.distribute(Asset::Numeraire, &e("4"));
        l.retire_all_shares();
        assert!(l.total_shares().is_zero());
        assert_eq!(l.claimable("a").unwrap().numeraire, e("4"));
        l.distribute(Asset::Numeraire, &e("1"));
        assert_eq!(l.claimable("a").unwrap().numeraire, e("4"));
        assert_eq!(l.carry().numeraire, e("1"));
    }

    #[test]
    fn rescale_is_pro_rata_and_sums_exactly() {
        let mut l = ledger();
        l.mint_shares("a", &e("1")).unwrap();
        l.mint_shares("b", &e("2")).unwrap();
        l.distribute(Asset::Numeraire, &e("3"));
        let q = e("0.000000000000000001");
        l.rescale_shares(&e("1"), &q);
        assert_eq!(l.total_shares(), &e("1"));
        let a = l.lp_shares("a");
        let b = l.lp_shares("b");
        assert_eq!(a.clone() + b.clone(), e("1"));
        // 1/3 floors to the grid; the residual lands on the larger holder.
        assert_eq!(a, e("0.333333333333333333"));
        assert_eq!(b, e("0.666666666666666667"));
        // Yield earned before the rescale is untouched.
        assert_eq!(l.claimable("a").unwrap().numeraire, e("1"));
        assert_eq!(l.claimable("b").unwrap().numeraire, e("2"));
        l.rescale_shares(&e("0"), &q);
        assert!(l.total_shares().is_zero());
    }

    #[test]
    fn balance_dump_csv() {
        let mut l = ledger();
        l.mint_options("h", &e("4")).unwrap();
        l.mint_shares("lp", &e("2")).unwrap();
        l.distribute(Asset::Numeraire, &e("1"));
        let mut buf = Vec::new();
        l.write_balances(&e("0.5"), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "account,option_raw,notional_at_t,lp_shares,unclaimed_numeraire,unclaimed_underlying\n\
             h,4,2,0,0,0\nlp,0,0,2,1,0\n"
        );
    }
}
