//! Scenario runner and report writer behind the `tset` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use tset_core::entities::table;
use tset_core::ids::{EntityId, TransactionId};
use tset_core::ledger::{dispute_report_from_file, DisputeReport, LedgerEvent};
use tset_core::scenario::{Overrides, ScenarioConfig, ScenarioError};
use tset_core::simnet::{self, RunEnd, Summary, Trace, Violation};
use tset_core::token::Amount;
use tset_core::trust::TrustTable;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// A runtime invariant tripped during the run, or a ledger failed
    /// verification.
    pub const INVARIANT: u8 = 1;
    /// The scenario or command line could not be parsed or validated.
    pub const CONFIG: u8 = 2;
    /// Reading or writing files failed.
    pub const IO: u8 = 3;
}

pub const TRACE_FILE: &str = "trace.log";
pub const TRUST_FILE: &str = "trust_table.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const LEDGER_FILE: &str = "ledger.bin";
pub const STATE_FILE: &str = "state.json";

/// Final state worth keeping after a run; the `trust-table` command reads it
/// back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct State {
    pub scenario: Option<String>,
    pub seed: u64,
    pub end: String,
    pub ledger_head: Option<String>,
    pub trust: TrustTable,
    pub customer_funds: BTreeMap<EntityId, Funds>,
    pub merchant_funds: BTreeMap<EntityId, Amount>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Funds {
    pub available: Amount,
    pub held: Amount,
}

pub struct RunReport {
    pub trace: Trace,
    pub summary: Summary,
    pub out_dir: PathBuf,
}

impl RunReport {
    pub fn exit_code(&self) -> u8 {
        if self.trace.is_clean() {
            exit::OK
        } else {
            exit::INVARIANT
        }
    }
}

fn end_label(end: &RunEnd) -> String {
    match end {
        RunEnd::Quiescent { tick } => format!("quiescent@{tick}"),
        RunEnd::TickLimitExceeded { tick, pending } => format!("tick-limit@{tick} ({pending} pending)"),
    }
}

pub fn summary_text(cfg: &ScenarioConfig, trace: &Trace, summary: &Summary) -> String {
    let mut out = String::new();
    if let Some(name) = &cfg.name {
        let _ = writeln!(out, "scenario: {name}");
    }
    let _ = writeln!(out, "seed: {}", cfg.seed);
    out.push_str(&summary.to_string());
    for v in &trace.violations {
        out.push_str(&violation_line(v));
        out.push('\n');
    }
    out
}

fn violation_line(v: &Violation) -> String {
    format!("VIOLATION tick {} {:?}: {}", v.tick, v.invariant, v.detail)
}

fn state_of(cfg: &ScenarioConfig, trace: &Trace) -> State {
    let cb = trace.customer_bank();
    let customer_funds = cb
        .accounts
        .values()
        .map(|a| {
            (
                a.owner,
                Funds {
                    available: a.available,
                    held: a.held,
                },
            )
        })
        .collect();
    State {
        scenario: cfg.name.clone(),
        seed: cfg.seed,
        end: end_label(&trace.end),
        ledger_head: trace.ttp().ledger.head().map(|d| d.to_hex()),
        trust: trace.ttp().trust.clone(),
        customer_funds,
        merchant_funds: trace.merchant_bank().accounts.clone(),
    }
}

/// Loads a scenario, applies overrides, runs it and writes every report into
/// `out_dir`.
pub fn run_scenario(path: &Path, overrides: Overrides, out_dir: &Path) -> Result<RunReport> {
    let mut cfg = ScenarioConfig::load(path)?;
    cfg.apply(overrides);
    let trace = simnet::run(&cfg, cfg.seed)?;
    let summary = trace.summary();
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    };
    write(TRACE_FILE, trace.to_jsonl().as_bytes())?;
    write(TRUST_FILE, trace.ttp().trust.export().as_bytes())?;
    write(SUMMARY_FILE, summary_text(&cfg, &trace, &summary).as_bytes())?;
    write(LEDGER_FILE, &trace.ttp().ledger.to_bytes())?;
    let state = serde_json::to_string_pretty(&state_of(&cfg, &trace))? + "\n";
    write(STATE_FILE, state.as_bytes())?;
    Ok(RunReport {
        trace,
        summary,
        out_dir: out_dir.to_path_buf(),
    })
}

/// The trust table from a run's state file.
pub fn trust_table(state_path: &Path) -> Result<String> {
    let text = fs::read_to_string(state_path).with_context(|| format!("reading {}", state_path.display()))?;
    let state: State = serde_json::from_str(&text).with_context(|| format!("parsing {}", state_path.display()))?;
    Ok(state.trust.export())
}

fn event_text(event: &LedgerEvent) -> String {
    match event {
        LedgerEvent::Reject { reason } => format!("Reject ({reason})"),
        LedgerEvent::Settled { amount } => format!("Settled {}", amount.0),
        LedgerEvent::Tamper { cause } => format!("Tamper ({cause})"),
        other => other.name().to_string(),
    }
}

pub fn render_dispute(report: &DisputeReport) -> String {
    let mut out = format!("transaction {}\n", report.txn);
    for e in &report.entries {
        let _ = writeln!(
            out,
            "{:>6}  {:<5} {:<32} token={} oi={}",
            e.tick,
            e.actor.to_string(),
            event_text(&e.event),
            e.token_digest.map_or("-".into(), |d| d.short()),
            e.oi_digest.map_or("-".into(), |d| d.short()),
        );
    }
    let _ = writeln!(out, "chain verified to head {}", report.proof.head.to_hex());
    out
}

/// Verifies the persisted ledger and reports one transaction's history.
pub fn dispute(ledger_path: &Path, txn: &TransactionId) -> Result<String, tset_core::ledger::LedgerError> {
    dispute_report_from_file(ledger_path, txn).map(|r| render_dispute(&r))
}

pub fn transitions(markdown: bool) -> String {
    if markdown {
        table::to_markdown()
    } else {
        table::to_csv()
    }
}

/// Maps an error from `run_scenario` or `trust_table` to an exit code.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ScenarioError>() {
        Some(ScenarioError::Io { .. }) => exit::IO,
        Some(_) => exit::CONFIG,
        None => exit::IO,
    }
}
