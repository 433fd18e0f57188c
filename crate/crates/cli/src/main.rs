//! `ampo` command-line front end.
//!
//! Exit status: 0 on success, 1 on invalid input or unwritable output,
//! 2 when an audit, invariant or validation check fails.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ampo::apps::{depeg_burst, depeg_scenario, per_day_rate, write_lending_csv, AppError, DepegConfig, LoanPosition};
use ampo::curves::CurveSpec;
use ampo::engine::AuditReport;
use ampo::num::{Dec, Exact, Scalar};
use ampo::sim::{
    accrual_partition_harness, permutation_harness, run_scenario, EventOp, HarnessOp, RunOptions, RunResult,
    ScenarioFile, SimError,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Check(String),
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Check(_) => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Invariant { .. } => CliError::Check(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Rational,
    Decimal,
}

#[derive(Debug, Parser)]
#[command(name = "ampo", version, about = "Amortizing perpetual option market simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Output directory for CSV and JSON artifacts.
    #[arg(long, global = true, env = "AMPO_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// Arithmetic: exact rationals or 38-digit decimals.
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Rational)]
    mode: ModeArg,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Smallest token unit (decimal string). Overrides the scenario file.
    #[arg(long, global = true)]
    quantum: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a block-scripted scenario and write trajectory, events and balances.
    Run(RunArgs),
    /// Check a premium curve for the required shape properties.
    ValidateCurve(ValidateArgs),
    /// Replay an operation multiset in random orders against a scenario's end state.
    Permute(PermuteArgs),
    /// Accrue a scenario's end state over one horizon in several step counts.
    Partition(PartitionArgs),
    /// Protective-put loan: collateral decay and liquidation crossing times.
    Lending(LendingArgs),
    /// De-peg insurance market with a burst of put exercises.
    Depeg(DepegArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Skip infeasible events instead of aborting.
    #[arg(long)]
    lenient: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    curve: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    grid: usize,
}

#[derive(Debug, Args)]
struct PermuteArgs {
    /// Scenario whose final state is the starting point.
    #[arg(long)]
    scenario: PathBuf,
    /// JSON array of `{"actor", "op", "amount"}` objects.
    #[arg(long)]
    ops: PathBuf,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "1")]
    horizon: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,10,100")]
    partitions: Vec<usize>,
}

#[derive(Debug, Args)]
struct LendingArgs {
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    theta: f64,
    /// Amortization rate per day.
    #[arg(long)]
    q: f64,
    /// Simple annual borrow rate, converted to a daily rate by dividing by 365.
    #[arg(long = "r-annual")]
    r_annual: f64,
    /// Underlying tokens held as collateral.
    #[arg(long = "e", default_value_t = 1.0)]
    e: f64,
    /// Initial debt in units of `E K`.
    #[arg(long = "d0", default_value_t = 1.0)]
    d0: f64,
    #[arg(long = "k", default_value_t = 1.0)]
    k: f64,
    /// Report horizon in days.
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
}

#[derive(Debug, Args)]
struct DepegArgs {
    /// Numéraire deposited by the underwriter.
    #[arg(long, default_value = "1000000")]
    deposit: String,
    #[arg(long, default_value = "1")]
    strike: String,
    #[arg(long, default_value = "0.003")]
    q: String,
    /// Utilization reached by the buying burst.
    #[arg(long, default_value = "0.9")]
    peak: String,
    #[arg(long, default_value_t = 5)]
    holders: usize,
    /// Put curve override (JSON curve specification).
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OpSpec {
    actor: String,
    op: EventOp,
    amount: String,
}

fn main() -> ExitCode {
    // Usage errors share exit status 1 with invalid configs; 2 stays reserved
    // for failed checks.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.common.mode {
        ModeArg::Rational => dispatch::<Exact>(&cli),
        ModeArg::Decimal => dispatch::<Dec>(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch<S: Scalar>(cli: &Cli) -> Result<(), CliError> {
    let c = &cli.common;
    match &cli.command {
        Command::Run(a) => cmd_run::<S>(a, c),
        Command::ValidateCurve(a) => cmd_validate::<S>(a, c),
        Command::Permute(a) => cmd_permute::<S>(a, c),
        Command::Partition(a) => cmd_partition::<S>(a, c),
        Command::Lending(a) => cmd_lending(a, c),
        Command::Depeg(a) => cmd_depeg::<S>(a, c),
    }
}

fn mode_name<S: Scalar>() -> &'static str {
    match S::MODE {
        ampo::num::Mode::Rational => "rational",
        ampo::num::Mode::Decimal => "decimal",
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn parse<S: Scalar>(what: &str, s: &str) -> Result<S, CliError> {
    S::parse(s).map_err(|e| CliError::Config(format!("{what}: {e}")))
}

fn out_dir(common: &Common) -> Result<&Path, CliError> {
    fs::create_dir_all(&common.out).map_err(|source| CliError::Io { path: common.out.clone(), source })?;
    Ok(&common.out)
}

fn write_artifact<F, E>(dir: &Path, name: &str, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), E>,
    E: std::fmt::Display,
{
    let path = dir.join(name);
    let io_err = |source| CliError::Io { path: path.clone(), source };
    let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
    body(&mut w).map_err(|e| CliError::Io { path: path.clone(), source: io::Error::other(e.to_string()) })?;
    w.flush().map_err(io_err)
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<(), CliError> {
    write_artifact(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w).map_err(serde_json::Error::io)
    })
}

fn audit_json(report: &AuditReport) -> Value {
    json!({
        "passed": report.passed(),
        "checks": report.checks,
        "warnings": report.warnings,
    })
}

fn load_and_run<S: Scalar>(path: &Path, common: &Common, lenient: bool) -> Result<RunResult<S>, CliError> {
    let file = ScenarioFile::from_json(&read_text(path)?)?;
    let scenario = file.build::<S>(common.seed, common.quantum.as_deref())?;
    Ok(run_scenario(&scenario, RunOptions { lenient, audit_every_block: true })?)
}

fn cmd_run<S: Scalar>(args: &RunArgs, common: &Common) -> Result<(), CliError> {
    let result = load_and_run::<S>(&args.scenario, common, args.lenient)?;
    let dir = out_dir(common)?;
    let market = &result.market;
    write_artifact(dir, "trajectory.csv", |w| result.trajectory.write_csv(w))?;
    write_artifact(dir, "events.csv", |w| market.write_events(w))?;
    write_artifact(dir, "balances.csv", |w| market.ledger().write_balances(market.index(), w))?;

    let audit = market.audit();
    let skipped: Vec<Value> = result
        .skipped
        .iter()
        .map(|s| json!({"seq": s.seq, "block": s.block, "op": s.op.tag(), "actor": s.actor, "error": s.error.to_string()}))
        .collect();
    let report = json!({
        "mode": mode_name::<S>(),
        "seed": common.seed,
        "blocks": result.trajectory.blocks.len(),
        "events_applied": result.outcomes.len(),
        "events_skipped": skipped,
        "final": {
            "time": market.last_accrual().to_string(),
            "open_interest": market.open_interest().to_string(),
            "collateral": market.collateral().to_string(),
            "reserve": market.reserve().to_string(),
            "utilization": market.utilization().to_string(),
            "numeraire_held": market.holdings().numeraire.to_string(),
            "underlying_held": market.holdings().underlying.to_string(),
        },
        "audit_failure": result.audit_failure.as_ref().map(|(b, d)| json!({"block": b, "detail": d})),
        "audit": audit_json(&audit),
    });
    write_json(dir, "report.json", &report)?;

    println!(
        "{} blocks, {} events applied, {} skipped; R = {}, U = {}",
        result.trajectory.blocks.len(),
        result.outcomes.len(),
        result.skipped.len(),
        market.reserve(),
        market.utilization()
    );
    if let Some((block, detail)) = &result.audit_failure {
        return Err(CliError::Check(format!("audit failed in block {block}:\n{detail}")));
    }
    if !audit.passed() {
        return Err(CliError::Check(format!("final audit failed:\n{audit}")));
    }
    println!("audit passed; artifacts in {}", dir.display());
    Ok(())
}

fn cmd_validate<S: Scalar>(args: &ValidateArgs, common: &Common) -> Result<(), CliError> {
    let spec: CurveSpec = serde_json::from_str(&read_text(&args.curve)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.curve.display())))?;
    let curve = spec.build::<S>().map_err(|e| CliError::Config(e.to_string()))?;
    let report = curve.validate(args.grid);
    println!("{report}");
    let dir = out_dir(common)?;
    let value = serde_json::to_value(&report).map_err(|e| CliError::Config(e.to_string()))?;
    write_json(dir, "curve_report.json", &value)?;
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|c| c.name).collect();
        return Err(CliError::Check(format!("curve violates: {}", names.join(", "))));
    }
    Ok(())
}

fn cmd_permute<S: Scalar>(args: &PermuteArgs, common: &Common) -> Result<(), CliError> {
    let base = load_and_run::<S>(&args.scenario, common, false)?.market;
    let specs: Vec<OpSpec> = serde_json::from_str(&read_text(&args.ops)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.ops.display())))?;
    if specs.is_empty() {
        return Err(CliError::Config("operation list is empty".into()));
    }
    let ops = specs
        .iter()
        .map(|s| Ok(HarnessOp::new(&s.actor, s.op, parse::<S>("amount", &s.amount)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = permutation_harness(&base, &ops, args.trials, common.seed);
    let dir = out_dir(common)?;
    let value = json!({
        "mode": mode_name::<S>(),
        "seed": common.seed,
        "requested": args.trials,
        "attempted": report.attempted,
        "feasible": report.feasible,
        "end_states": report.end_states,
        "mismatches": report.mismatches,
        "passed": report.passed(),
    });
    write_json(dir, "permute_report.json", &value)?;
    println!(
        "{} feasible of {} attempted orderings, {} end states, {} mismatches",
        report.feasible, report.attempted, report.end_states, report.mismatches
    );
    if !report.passed() {
        return Err(CliError::Check(format!("{} orderings disagree on the reserve change", report.mismatches)));
    }
    Ok(())
}

fn cmd_partition<S: Scalar>(args: &PartitionArgs, common: &Common) -> Result<(), CliError> {
    let base = load_and_run::<S>(&args.scenario, common, false)?.market;
    let horizon = parse::<S>("horizon", &args.horizon)?;
    if !horizon.is_positive() {
        return Err(CliError::Config(format!("horizon {horizon} must be > 0")));
    }
    let report =
        accrual_partition_harness(&base, &horizon, &args.partitions).map_err(|e| CliError::Config(e.to_string()))?;
    let dir = out_dir(common)?;
    write_artifact(dir, "partition.csv", |w| -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["steps", "index", "total_yield", "X", "R"])?;
        for r in &report.rows {
            out.write_record([
                r.steps.to_string(),
                r.index.to_string(),
                r.total_yield.to_string(),
                r.x.to_string(),
                r.r.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    println!(
        "index bit-exact: {}, yield consistent: {}, state consistent: {}",
        report.index_bit_exact, report.yield_consistent, report.state_consistent
    );
    if !report.passed() {
        return Err(CliError::Check("accrual depends on the partition".into()));
    }
    Ok(())
}

fn cmd_lending(args: &LendingArgs, common: &Common) -> Result<(), CliError> {
    if !(args.horizon > 0.0 && args.step > 0.0) {
        return Err(CliError::Config("horizon and step must be > 0".into()));
    }
    let r = per_day_rate(args.r_annual);
    let position = LoanPosition::new(args.e, args.alpha, args.d0, r, args.theta, args.q, args.k)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let crossings = match position.crossing_times() {
        Ok(z) => {
            println!("t_liq = {}", z.t_liq);
            println!("t_bad = {}", z.t_bad);
            json!({
                "t_liq": z.t_liq,
                "t_bad": z.t_bad,
                "t_liq_bisection": z.t_liq_bisection,
                "t_bad_bisection": z.t_bad_bisection,
            })
        }
        Err(AppError::NoCrossing(why)) => {
            println!("no crossing: {why}");
            json!({"no_crossing": why})
        }
        Err(e @ AppError::CrossCheck { .. }) => return Err(CliError::Check(e.to_string())),
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    let rows = position.report(args.horizon, args.step);
    let dir = out_dir(common)?;
    write_artifact(dir, "lending.csv", |w| write_lending_csv(&rows, w))?;
    let value = json!({
        "position": position,
        "r_annual": args.r_annual,
        "crossings": crossings,
        "rows": rows.len(),
    });
    write_json(dir, "lending_report.json", &value)?;
    Ok(())
}

fn cmd_depeg<S: Scalar>(args: &DepegArgs, common: &Common) -> Result<(), CliError> {
    let deposit = parse::<S>("deposit", &args.deposit)?;
    let strike = parse::<S>("strike", &args.strike)?;
    let q = parse::<S>("q", &args.q)?;
    let peak = parse::<S>("peak", &args.peak)?;
    if !strike.is_positive() || peak.is_negative() || peak > S::one() {
        return Err(CliError::Config("strike must be > 0 and peak within [0, 1]".into()));
    }
    let (schedule, demand) = depeg_burst(&deposit, &strike, &peak, args.holders)?;
    let mut config = DepegConfig::new(deposit, schedule, demand);
    config.strike = strike;
    config.q = q;
    if let Some(quantum) = &common.quantum {
        config.engine.quantum = parse::<S>("quantum", quantum)?;
    }
    if let Some(path) = &args.curve {
        let spec: CurveSpec = serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.curve = Some(spec.build::<S>().map_err(|e| CliError::Config(e.to_string()))?);
    }
    let report = depeg_scenario(&config)?;
    let dir = out_dir(common)?;
    write_artifact(dir, "fear_index.csv", |w| report.write_csv(w))?;
    let value = json!({
        "mode": mode_name::<S>(),
        "blocks": report.rows.len(),
        "cum_exercised": report.cum_exercised.to_string(),
        "cum_paid": report.cum_paid.to_string(),
        "cum_delivered": report.cum_delivered.to_string(),
        "settlement_complete": report.settlement_complete,
        "final_numeraire_held": report.final_holdings.0.to_string(),
        "final_underlying_held": report.final_holdings.1.to_string(),
        "audit_failure": report.audit_failure.as_ref().map(|(b, d)| json!({"block": b, "detail": d})),
    });
    write_json(dir, "depeg_report.json", &value)?;
    let peak_u = report.rows.iter().map(|r| r.u.to_f64()).fold(0.0, f64::max);
    println!(
        "peak U = {peak_u:.6}, exercised {}, paid {}, delivered {}",
        report.cum_exercised, report.cum_paid, report.cum_delivered
    );
    if let Some((block, detail)) = &report.audit_failure {
        return Err(CliError::Check(format!("audit failed in block {block}:\n{detail}")));
    }
    if !report.settlement_complete {
        return Err(CliError::Check("settlement did not conserve assets".into()));
    }
    Ok(())
}
