use ampo::curves::{OptionKind, PremiumCurve};
use ampo::engine::{EngineConfig, Market, SeriesParams};
use ampo::ledger::{Asset, Ledger};
use ampo::num::{Exact, Scalar};
use proptest::prelude::*;

fn milli(n: u32) -> Exact {
    Exact::from_i64(n as i64) / Exact::from_i64(1000)
}

fn market(kind: OptionKind) -> Market<Exact> {
    let strike = Exact::from_i64(2);
    let params = SeriesParams::new(kind, strike.clone(), milli(3), Exact::zero()).unwrap();
    let curve = match kind {
        OptionKind::Call => PremiumCurve::standard_call(strike),
        OptionKind::Put => PremiumCurve::standard_put(strike),
    };
    Market::create(params, curve, EngineConfig::default()).unwrap()
}

#[derive(Debug, Clone)]
enum Step {
    Deposit(usize, u32),
    Withdraw(usize, u32),
    Buy(usize, u32),
    Sell(usize, u32),
    Exercise(usize, u32),
    Claim(usize),
    Wait(u32),
}

fn step() -> impl Strategy<Value = Step> {
    let who = 0usize..3;
    let amt = 1u32..3000;
    prop_oneof![
        (who.clone(), amt.clone()).prop_map(|(w, a)| Step::Deposit(w, a)),
        (who.clone(), amt.clone()).prop_map(|(w, a)| Step::Withdraw(w, a)),
        (who.clone(), amt.clone()).prop_map(|(w, a)| Step::Buy(w, a)),
        (who.clone(), amt.clone()).prop_map(|(w, a)| Step::Sell(w, a)),
        (who.clone(), amt.clone()).prop_map(|(w, a)| Step::Exercise(w, a)),
        who.prop_map(Step::Claim),
        (1u32..2000).prop_map(Step::Wait),
    ]
}

const LPS: [&str; 3] = ["lp0", "lp1", "lp2"];
const HOLDERS: [&str; 3] = ["h0", "h1", "h2"];

/// Applies a step. Rejected operations may only leave the accrual behind.
fn apply(m: &mut Market<Exact>, t: &mut Exact, s: &Step) {
    let mut before = m.clone();
    before.accrue(t).unwrap();
    let ok = match s {
        Step::Deposit(w, a) => m.sell_to_open(LPS[*w], t, &milli(*a)).is_ok(),
        Step::Withdraw(w, a) => m.buy_to_close(LPS[*w], t, &milli(*a)).is_ok(),
        Step::Buy(w, a) => m.buy_to_open(HOLDERS[*w], t, &milli(*a)).is_ok(),
        Step::Sell(w, a) => m.sell_to_close(HOLDERS[*w], t, &milli(*a)).is_ok(),
        Step::Exercise(w, a) => {
            let n = milli(*a);
            let (_, pay) = m.exercise_payment(&n);
            m.exercise(HOLDERS[*w], t, &n, &pay).is_ok()
        }
        Step::Claim(w) => m.claim_yield(LPS[*w], t).is_ok(),
        Step::Wait(d) => {
            *t = t.clone() + milli(*d);
            true
        }
    };
    if !ok {
        assert_eq!(m.reserve(), before.reserve());
        assert_eq!(m.collateral(), before.collateral());
        assert_eq!(m.raw_open_interest(), before.raw_open_interest());
        assert_eq!(m.holdings(), before.holdings());
    }
}

fn kind() -> impl Strategy<Value = OptionKind> {
    prop_oneof![Just(OptionKind::Call), Just(OptionKind::Put)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_walks_keep_every_invariant(k in kind(), steps in prop::collection::vec(step(), 1..40)) {
        let mut m = market(k);
        let mut t = Exact::zero();
        for s in &steps {
            apply(&mut m, &mut t, s);
            let report = m.audit();
            prop_assert!(report.passed(), "after {:?}: {}", s, report);
            let phi = m.total_premium().into_finite().expect("finite premium");
            prop_assert_eq!(m.reserve(), &phi);
        }
    }

    #[test]
    fn option_round_trip_never_profits(
        k in kind(),
        c in 1000u32..5000,
        pre in 0u32..450,
        n in 1u32..450,
    ) {
        let mut m = market(k);
        let t = Exact::zero();
        m.sell_to_open("lp", &t, &milli(c)).unwrap();
        if pre > 0 {
            m.buy_to_open("other", &t, &milli(pre)).unwrap();
        }
        let open = m.buy_to_open("h", &t, &milli(n)).unwrap();
        let close = m.sell_to_close("h", &t, &open.notional).unwrap();
        prop_assert!(close.rebate <= open.cost);
        prop_assert!(m.audit().passed());
    }

    #[test]
    fn collateral_round_trip_never_profits(
        k in kind(),
        c in 1000u32..5000,
        x in 0u32..900,
        extra in 1u32..3000,
    ) {
        let mut m = market(k);
        let t = Exact::zero();
        m.sell_to_open("lp", &t, &milli(c)).unwrap();
        if x > 0 {
            m.buy_to_open("h", &t, &milli(x)).unwrap();
        }
        let dep = m.sell_to_open("lp2", &t, &milli(extra)).unwrap();
        let wd = m.buy_to_close("lp2", &t, &milli(extra)).unwrap();
        prop_assert!(dep.rebate <= wd.cost);
    }

    #[test]
    fn premium_is_homogeneous(
        k in kind(),
        x in 0u32..1000,
        c in 1000u32..5000,
        lambda in 1u32..10_000,
    ) {
        let curve = match k {
            OptionKind::Call => PremiumCurve::standard_call(Exact::from_i64(2)),
            OptionKind::Put => PremiumCurve::standard_put(Exact::from_i64(2)),
        };
        let (x, c, l) = (milli(x), milli(c), milli(lambda));
        let base = curve.total_premium_finite(&x, &c).unwrap();
        let scaled = curve.total_premium_finite(&(l.clone() * x), &(l.clone() * c)).unwrap();
        prop_assert_eq!(scaled, l * base);
    }

    #[test]
    fn event_log_conserves_assets(k in kind(), steps in prop::collection::vec(step(), 1..40)) {
        let mut m = market(k);
        let mut t = Exact::zero();
        for s in &steps {
            apply(&mut m, &mut t, s);
        }
        let mut held = (Exact::zero(), Exact::zero());
        for ev in m.events() {
            held.0 = held.0 + ev.inflow.numeraire.clone() - ev.outflow.numeraire.clone();
            held.1 = held.1 + ev.inflow.underlying.clone() - ev.outflow.underlying.clone();
        }
        prop_assert_eq!(&held.0, &m.holdings().numeraire);
        prop_assert_eq!(&held.1, &m.holdings().underlying);
    }

    #[test]
    fn distribution_splits_by_shares(a in 1u32..10_000, b in 1u32..10_000, amount in 1u32..100_000) {
        let mut l = Ledger::new(Exact::parse("1e-18").unwrap());
        l.mint_shares("a", &milli(a)).unwrap();
        l.mint_shares("b", &milli(b)).unwrap();
        let d = milli(amount);
        l.distribute(Asset::Numeraire, &d);
        let ca = l.claimable("a").unwrap().numeraire;
        let cb = l.claimable("b").unwrap().numeraire;
        let ideal = d.clone() * milli(a) / (milli(a) + milli(b));
        prop_assert!(ca <= ideal);
        prop_assert!(ideal - ca.clone() < Exact::parse("1e-30").unwrap());
        prop_assert_eq!(ca + cb + l.carry().numeraire.clone(), d);
    }
}
