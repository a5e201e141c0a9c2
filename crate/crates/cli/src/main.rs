use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tset_cli::{exit, exit_code_for};
use tset_core::ids::TransactionId;
use tset_core::scenario::Overrides;

#[derive(Parser)]
#[command(name = "tset", version, about = "Run token-escrow payment scenarios and inspect their results")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write trace, trust table, summary, ledger and state.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Tick limit.
        #[arg(long)]
        ticks: Option<u64>,
        /// TTP dispute deadline in ticks.
        #[arg(long)]
        deadline: Option<u64>,
        #[arg(long, default_value = "tset-out")]
        out: PathBuf,
    },
    /// Print the merchant trust table from a run's state.json.
    TrustTable { state: PathBuf },
    /// Verify a ledger file and print one transaction's history.
    Dispute {
        ledger: PathBuf,
        /// Transaction id such as C1#1.
        txn: TransactionId,
    },
    /// Print the per-role transition tables.
    Transitions {
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            scenario,
            seed,
            ticks,
            deadline,
            out,
        } => {
            let overrides = Overrides {
                seed,
                tick_limit: ticks,
                deadline,
            };
            match tset_cli::run_scenario(&scenario, overrides, &out) {
                Ok(report) => {
                    print!("{}", report.summary);
                    for v in &report.trace.violations {
                        eprintln!("invariant violated at tick {}: {:?}: {}", v.tick, v.invariant, v.detail);
                    }
                    println!("reports written to {}", report.out_dir.display());
                    report.exit_code()
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    exit_code_for(&e)
                }
            }
        }
        Command::TrustTable { state } => match tset_cli::trust_table(&state) {
            Ok(table) => {
                print!("{table}");
                exit::OK
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                exit::IO
            }
        },
        Command::Dispute { ledger, txn } => match tset_cli::dispute(&ledger, &txn) {
            Ok(text) => {
                print!("{text}");
                exit::OK
            }
            Err(e @ tset_core::ledger::LedgerError::Io(_)) => {
                eprintln!("error: {e}");
                exit::IO
            }
            Err(tset_core::ledger::LedgerError::UnknownTxn(t)) => {
                eprintln!("error: no ledger entries for {t}");
                exit::CONFIG
            }
            Err(e) => {
                eprintln!("LEDGER VERIFICATION FAILED: {e}");
                exit::INVARIANT
            }
        },
        Command::Transitions { format } => {
            print!("{}", tset_cli::transitions(matches!(format, Format::Md)));
            exit::OK
        }
    };
    ExitCode::from(code)
}
