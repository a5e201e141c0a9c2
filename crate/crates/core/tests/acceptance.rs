//! Acceptance suite. Each criterion runs under `catch_unwind`, prints one
//! PASS/FAIL line with its wall time, and the test fails if any line fails.
//!
//! Run with `cargo test -p tset-core --test acceptance -- --nocapture` to see
//! the lines.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

use tset_core::digest::Digest;
use tset_core::entities::{table, MessageKind, Payload, Phase, ProtocolMessage};
use tset_core::ids::{EntityId, ProductId, Role, TransactionId};
use tset_core::ledger::{dispute_report_from_file, LedgerError};
use tset_core::scenario::ScenarioConfig;
use tset_core::simnet::{self, ActionKind, AdversaryAction, Target, Trace};
use tset_core::token::{Amount, Authority, KeyMaterial, TamperCause, Timestamp, TokenVault, ENVELOPE_LEN};
use tset_core::trust::{self, Grade, Percent, TrustRecord};

const C1: EntityId = EntityId::customer(1);
const M1: EntityId = EntityId::merchant(1);
const T1: TransactionId = TransactionId::new(C1, 1);

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    ScenarioConfig::load(&path).unwrap()
}

fn run(cfg: &ScenarioConfig) -> Trace {
    simnet::run(cfg, cfg.seed).unwrap()
}

/// Traces kept for the privacy scan and the determinism reruns.
#[derive(Default)]
struct Kept {
    happy: Option<Trace>,
    tamper: Vec<Trace>,
    replay: Vec<Trace>,
    mixed: Option<Trace>,
}

/// Price oracle: catalog price times quantity, read from the config.
fn price(cfg: &ScenarioConfig, merchant: &str, product: &str, quantity: u64) -> u64 {
    let m = cfg.merchants.iter().find(|m| m.id.to_string() == merchant).unwrap();
    m.catalog[&ProductId::new(product)] * quantity
}

// 1

fn tv_tf_grade(total: u64, rejected: u64) -> (Percent, Percent, Grade) {
    let rec = TrustRecord::with_history(M1, total, rejected);
    let tv = trust::trust_value(&rec).unwrap();
    let tf = trust::trust_factor(tv);
    (tv, tf, trust::grade(tf))
}

fn criterion_1(_: &mut Kept) {
    let p = |s: &str| s.parse::<Percent>().unwrap();
    assert_eq!(tv_tf_grade(1000, 25), (p("2.5"), p("97.5"), Grade::A1));
    assert_eq!(tv_tf_grade(1000, 300), (p("30"), p("70"), Grade::B1));
}

// 2

/// Hand-written interval table: lower bound inclusive, upper exclusive, and
/// 100 itself belongs to the top grade.
const GRADE_TABLE: [(u32, u32, &str); 10] = [
    (90, 101, "A1"),
    (80, 90, "A2"),
    (70, 80, "B1"),
    (60, 70, "B2"),
    (50, 60, "C1"),
    (40, 50, "C2"),
    (30, 40, "D1"),
    (20, 30, "D2"),
    (10, 20, "E1"),
    (0, 10, "E2"),
];

/// `hundredths` is TF × 100.
fn expected_grade(hundredths: u32) -> &'static str {
    GRADE_TABLE
        .iter()
        .find(|(lo, hi, _)| hundredths >= lo * 100 && hundredths < hi * 100)
        .map(|(_, _, g)| *g)
        .unwrap()
}

fn criterion_2(_: &mut Kept) {
    let mut cases: Vec<u32> = (0..=100).map(|v| v * 100).collect();
    cases.extend([999, 1000, 8999, 9000]);
    let mut checked = 0;
    for h in cases {
        let tf = Percent::new(h as u128, 100).unwrap();
        assert_eq!(trust::grade(tf).to_string(), expected_grade(h), "TF {}", tf);
        checked += 1;
    }
    // 101 integers plus 4 boundary fractions
    assert_eq!(checked, 105);
}

// 3

fn criterion_3(kept: &mut Kept) {
    let cfg = scenario("happy");
    let trace = run(&cfg);
    assert!(trace.is_clean(), "{:?}", trace.violations);

    let total_price = trace
        .delivered()
        .find_map(|m| match &m.payload {
            Payload::Offer { order, .. } => Some(order.total_price),
            _ => None,
        })
        .unwrap();
    assert_eq!(total_price.0, price(&cfg, "M1", "widget", 1));

    let settled: Vec<(Amount, EntityId)> = trace.settlements().map(|(_, a, m)| (a, m)).collect();
    assert_eq!(settled, vec![(total_price, M1)]);

    let events: Vec<&str> = trace.ttp().ledger.entries_for(&T1).map(|e| e.event.name()).collect();
    assert_eq!(events, ["Deposit", "TempAck", "Dispatch", "Accept", "Release", "Settled"]);
    trace.ttp().ledger.verify_chain().unwrap();

    for e in trace.entities.values() {
        if e.transactions().iter().any(|(t, _)| *t == T1) {
            assert!(table::is_terminal(e.id.role, e.phase(&T1)), "{} in {}", e.id, e.phase(&T1));
        }
    }
    kept.happy = Some(trace);
}

// 4

const TOKEN_EDGES: [MessageKind; 4] = [
    MessageKind::TokenIssued,
    MessageKind::EscrowDeposit,
    MessageKind::TokenRelease,
    MessageKind::PaymentRequest,
];

fn tamper_config(i: u64) -> ScenarioConfig {
    let mut rng = ChaCha20Rng::seed_from_u64(0x7a3d_0000 + i);
    let mut cfg = scenario("happy");
    cfg.seed = rng.gen();
    let kind = TOKEN_EDGES[rng.gen_range(0..TOKEN_EDGES.len())];
    let action = if rng.gen_bool(0.5) {
        ActionKind::FlipBits(vec![rng.gen_range(0..ENVELOPE_LEN * 8)])
    } else {
        let mut amount = rng.gen_range(1..=1_000_000);
        if amount == 15_000 {
            amount += 1;
        }
        ActionKind::ReplaceAmount(amount)
    };
    cfg.adversary = vec![AdversaryAction::once(
        action,
        Target {
            kind: Some(kind),
            ..Target::default()
        },
    )];
    cfg
}

fn sealed_digest(m: &ProtocolMessage) -> Digest {
    m.payload.sealed_token().unwrap().digest()
}

fn criterion_4(kept: &mut Kept) {
    let mut reports = 0;
    for i in 0..1000 {
        let cfg = tamper_config(i);
        let trace = run(&cfg);
        assert!(trace.is_clean(), "run {i}: {:?}", trace.violations);
        let mutated: BTreeSet<Digest> = trace
            .records
            .iter()
            .filter(|r| r.mutated)
            .filter_map(|r| r.delivered())
            .map(sealed_digest)
            .collect();
        assert_eq!(mutated.len(), 1, "run {i}: {:?}", cfg.adversary);
        for (m, amount, _) in trace.settlements() {
            let Payload::Settlement { token_digest, .. } = &m.payload else {
                unreachable!()
            };
            assert!(!mutated.contains(token_digest), "run {i}: mutated token settled");
            assert_eq!(amount, Amount(15_000), "run {i}");
        }
        let n = trace.tamper_reports().count();
        assert_eq!(n, 1, "run {i}: {:?}", cfg.adversary);
        reports += n;
        assert_eq!(trace.settlements().count(), 1, "run {i}: {:?}", cfg.adversary);
        assert_eq!(trace.entities[&C1].phase(&T1), Phase::Completed, "run {i}");
        kept.tamper.push(trace);
    }
    assert_eq!(reports, 1000);
}

// 5

fn criterion_5(kept: &mut Kept) {
    let base = scenario("replay");
    let mut refused = 0;
    for seed in 0..100 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let trace = run(&cfg);
        assert!(trace.is_clean(), "seed {seed}: {:?}", trace.violations);
        let causes: Vec<&TamperCause> = trace.tamper_reports().map(|(_, c)| c).collect();
        if causes == [&TamperCause::AlreadySettled] {
            refused += 1;
        }
        // only the first presentation moved money
        assert_eq!(trace.settlements().count(), 1, "seed {seed}");
        let mb = &trace.merchant_bank().accounts;
        assert_eq!(mb.get(&M1).copied().unwrap_or(Amount::ZERO), Amount(15_000), "seed {seed}");
        let customer: u64 = trace.customer_bank().accounts.values().map(|a| a.available.0 + a.held.0).sum();
        assert_eq!(customer, 100_000 - 15_000, "seed {seed}");
        kept.replay.push(trace);
    }
    assert_eq!(refused, 100);
}

// 6

fn criterion_6(_: &mut Kept) {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let authority = Authority::generate(&mut rng);
    let root = authority.root_key();
    let c = authority.issue(C1, KeyMaterial::generate(&mut rng, false).public_key());
    let m = authority.issue(M1, KeyMaterial::generate(&mut rng, false).public_key());
    let mut vault = TokenVault::new();
    let mut seen = BTreeSet::new();
    for i in 0..100_000u64 {
        let token = vault
            .generate_token(Amount(1 + i % 997), &c, &m, &root, Timestamp(i), &mut rng)
            .unwrap();
        assert!(seen.insert(token.token_id), "duplicate id at {i}");
    }
    assert_eq!(seen.len(), 100_000);
}

// 7

fn criterion_7(kept: &mut Kept) {
    let cfg = scenario("mixed");
    assert_eq!(cfg.workload.as_ref().unwrap().purchases, 1000);
    let trace = run(&cfg);
    assert!(trace.is_clean(), "{:?}", trace.violations);
    let s = trace.summary();
    assert!(s.tamper_reports > 0 && s.dropped > 0, "mix lacks tampering or drops: {s}");

    let initial: u64 = cfg.customers.iter().map(|c| c.balance).sum::<u64>()
        + cfg.merchants.iter().map(|m| m.balance).sum::<u64>();
    let customers: u64 = trace.customer_bank().accounts.values().map(|a| a.available.0 + a.held.0).sum();
    let merchants: u64 = trace.merchant_bank().accounts.values().map(|a| a.0).sum();
    assert_eq!(customers + merchants, initial);

    let mut settled: BTreeMap<EntityId, u64> = BTreeMap::new();
    for (_, amount, merchant) in trace.settlements() {
        *settled.entry(merchant).or_default() += amount.0;
    }
    for m in &cfg.merchants {
        let now = trace.merchant_bank().accounts.get(&m.id).map_or(0, |a| a.0);
        let credit = now - m.balance;
        assert_eq!(credit, settled.get(&m.id).copied().unwrap_or(0), "{}", m.id);
    }
    kept.mixed = Some(trace);
}

// 8

fn keys_of(v: &Value, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(map) => {
            for (k, inner) in map {
                out.insert(k.clone());
                keys_of(inner, out);
            }
        }
        Value::Array(items) => items.iter().for_each(|i| keys_of(i, out)),
        _ => {}
    }
}

fn scan_privacy(trace: &Trace) -> usize {
    let mut scanned = 0;
    for m in trace.delivered() {
        let forbidden: &[&str] = match m.to.role {
            Role::Merchant | Role::MerchantBank => &["account"],
            Role::CustomerBank => &["product", "quantity", "order"],
            _ => &[],
        };
        let mut keys = BTreeSet::new();
        keys_of(&serde_json::to_value(&m.payload).unwrap(), &mut keys);
        for f in forbidden {
            assert!(!keys.contains(*f), "{} to {} carries {f}", m.kind(), m.to);
        }
        scanned += 1;
    }
    scanned
}

fn criterion_8(kept: &mut Kept) {
    let traces = kept
        .happy
        .iter()
        .chain(&kept.tamper)
        .chain(&kept.replay)
        .chain(&kept.mixed);
    let mut count = 0;
    let mut messages = 0;
    for t in traces {
        messages += scan_privacy(t);
        count += 1;
    }
    assert_eq!(count, 1 + 1000 + 100 + 1, "earlier criteria did not leave their traces");
    assert!(messages > 0);
}

// 9

fn criterion_9(_: &mut Kept) {
    // Unclamped: 98 prior with 3 rejections, then reject, reject, accept by
    // the same customer for the same product: 5 of 101, squared.
    let mut cfg = scenario("dispute");
    cfg.merchants[0].history = toml::from_str("total = 98\nrejected = 3").ok();
    let trace = run(&cfg);
    assert!(trace.is_clean(), "{:?}", trace.violations);
    let rec = trace.ttp().trust.get(&M1).unwrap();
    assert_eq!((rec.total_transactions, rec.rejected_transactions), (101, 5));
    let tv = trust::trust_value(rec).unwrap();
    // (500/101)^2
    assert_eq!(tv, Percent::new(250_000, 10_201).unwrap());
    assert_eq!(trust::grade(trust::trust_factor(tv)), Grade::B1);

    // Clamped: 2 of 3 squares past 100.
    let trace = run(&scenario("dispute"));
    let rec = trace.ttp().trust.get(&M1).unwrap();
    assert_eq!((rec.total_transactions, rec.rejected_transactions), (3, 2));
    let tv = trust::trust_value(rec).unwrap();
    assert_eq!(tv, Percent::hundred());
    assert_eq!(trust::trust_factor(tv), Percent::zero());
    assert_eq!(trust::grade(trust::trust_factor(tv)), Grade::E2);
}

// 10

fn criterion_10(_: &mut Kept) {
    let trace = run(&scenario("dispute"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.bin");
    trace.ttp().ledger.save(&path).unwrap();
    dispute_report_from_file(&path, &T1).unwrap();
    let clean = std::fs::read(&path).unwrap();
    assert!(clean.len() >= 256, "ledger only {} bytes", clean.len());

    let mut rng = ChaCha20Rng::seed_from_u64(10);
    for trial in 0..256 {
        // stride across the whole file, jittered within each slot
        let slot = clean.len() / 256;
        let pos = trial * slot + rng.gen_range(0..slot);
        let mut bytes = clean.clone();
        bytes[pos] ^= 1 << rng.gen_range(0..8);
        std::fs::write(&path, &bytes).unwrap();
        match dispute_report_from_file(&path, &T1) {
            Err(LedgerError::ChainBroken { .. } | LedgerError::Malformed { .. } | LedgerError::BadProof(_)) => {}
            other => panic!("flip at byte {pos} not detected: {:?}", other.map(|r| r.entries.len())),
        }
    }
}

// 11

fn criterion_11(kept: &mut Kept) {
    let happy = run(&scenario("happy")).to_jsonl();
    assert_eq!(happy, kept.happy.as_ref().unwrap().to_jsonl());
    for (i, first) in kept.tamper.iter().enumerate() {
        let again = run(&tamper_config(i as u64));
        assert!(again.to_jsonl() == first.to_jsonl(), "tamper run {i} differs");
    }
    let mixed = run(&scenario("mixed")).to_jsonl();
    assert!(mixed == kept.mixed.as_ref().unwrap().to_jsonl(), "mixed run differs");
}

type Criterion = (u32, &'static str, fn(&mut Kept), Duration);

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        (1, "trust arithmetic", criterion_1, Duration::from_millis(1)),
        (2, "grade table", criterion_2, Duration::from_millis(1)),
        (3, "happy path", criterion_3, Duration::from_secs(1)),
        (4, "tamper detection x1000", criterion_4, Duration::from_secs(30)),
        (5, "replay x100", criterion_5, Duration::from_secs(1)),
        (6, "token id uniqueness x100000", criterion_6, Duration::from_secs(10)),
        (7, "funds conservation, 1000 txns", criterion_7, Duration::from_secs(60)),
        (8, "privacy scan", criterion_8, Duration::MAX),
        (9, "repeat-rejection squaring", criterion_9, Duration::MAX),
        (10, "ledger byte flips x256", criterion_10, Duration::from_secs(5)),
        (11, "determinism", criterion_11, Duration::MAX),
    ];
    let mut kept = Kept::default();
    let mut failed = Vec::new();
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut lines = Vec::new();
    for (n, name, f, budget) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| f(&mut kept)));
        let took = start.elapsed();
        let line = match result {
            Ok(()) if took <= budget => format!("criterion {n:>2} PASS  {name} ({took:.2?})"),
            Ok(()) => format!("criterion {n:>2} FAIL  {name}: took {took:.2?}, budget {budget:?}"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("criterion {n:>2} FAIL  {name}: {msg}")
            }
        };
        if line.contains("FAIL") {
            failed.push(n);
        }
        println!("{line}");
        lines.push(line);
    }
    panic::set_hook(hook);
    assert!(failed.is_empty(), "failed criteria {failed:?}\n{}", lines.join("\n"));
}
