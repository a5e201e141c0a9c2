use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::testkit::*;
use super::*;
use crate::ids::{OrderNumber, ProductId};
use crate::token::{open_token, seal_token, Amount, SealedToken, TamperCause, TokenField};
use crate::trust::{Grade, TrustRecord, TrustTable};

use MessageKind::*;

fn events(w: &World) -> Vec<&'static str> {
    w.ttp().ledger.entries().map(|e| e.event.name()).collect()
}

/// Runs until the customer holds an Offer, i.e. C1 is in Browsing with the
/// Offer still undelivered.
fn offer_in_flight(w: &mut World) -> ProtocolMessage {
    let browse = w.start().pop().unwrap();
    w.now += 1;
    let out = w.input(M1, &Input::Message(browse)).unwrap();
    out.messages.into_iter().next().unwrap()
}

#[test]
fn customer_answers_offer_with_trust_lookup() {
    let mut w = world();
    let offer = offer_in_flight(&mut w);
    assert_eq!(w.get(C1).phase(&w.txn()), Phase::Browsing);
    let out = w.input(C1, &Input::Message(offer)).unwrap();
    assert_eq!(out.emitted_kinds(), vec![TrustLookup]);
    assert_eq!(out.messages[0].to, TTP);
    assert_eq!(out.transition.to, Phase::CheckingTrust);
}

#[test]
fn bank_issues_sealed_token_and_keeps_duplicate() {
    let mut w = world();
    let txn = w.txn();
    let request = w.signed(
        C1,
        CB,
        txn,
        Payload::TokenRequest {
            amount: PRICE,
            account: crate::ids::AccountId(1),
            cert_customer: w.get(C1).certificate.clone(),
            cert_merchant: w.get(M1).certificate.clone(),
            attempt: 0,
        },
    );
    let out = w.input(CB, &Input::Message(request)).unwrap();
    assert_eq!(out.emitted_kinds(), vec![TokenIssued]);
    let Payload::TokenIssued { sealed } = &out.messages[0].payload else {
        unreachable!()
    };
    let opened = open_token(sealed, &w.get(CB).keys).unwrap();
    assert_eq!(opened.amount, PRICE);
    assert_eq!(w.cb().vault.lookup(&opened.token_id).unwrap().token, opened);
    let account = &w.cb().accounts[&crate::ids::AccountId(1)];
    assert_eq!(account.held, PRICE);
    assert_eq!(account.available, Amount(BALANCE.0 - PRICE.0));
}

#[test]
fn merchant_refuses_confirmation_before_offer() {
    let w = world();
    let txn = w.txn();
    let order = OrderInfo {
        order_number: OrderNumber(1),
        product: ProductId::new("widget"),
        quantity: 1,
        total_price: PRICE,
        merchant: M1,
    };
    let confirm = w.signed(
        C1,
        M1,
        txn,
        Payload::PurchaseConfirm {
            cert_customer: w.get(C1).certificate.clone(),
            order,
        },
    );
    let before = w.get(M1).as_merchant().unwrap().txns.clone();
    let (after, result) = step(w.get(M1), &Input::Message(confirm), 5, &mut ChaCha20Rng::seed_from_u64(1));
    assert!(matches!(result, Err(StepError::ProtocolViolation { .. })));
    assert_eq!(after.as_merchant().unwrap().txns, before);
}

#[test]
fn forged_signature_is_an_auth_failure() {
    let mut w = world();
    let browse = w.start().pop().unwrap();
    let mut forged = browse.clone();
    forged.payload = Payload::Browse {
        product: ProductId::new("widget"),
        quantity: 9,
    };
    assert!(matches!(
        w.input(M1, &Input::Message(forged)),
        Err(StepError::AuthFailure { .. })
    ));
    // signed by the wrong party
    let mut wrong = w.signed(M1, M1, browse.txn, browse.payload.clone());
    wrong.from = C1;
    assert!(matches!(
        w.input(M1, &Input::Message(wrong)),
        Err(StepError::AuthFailure { .. })
    ));
}

#[test]
fn step_is_pure() {
    let mut w = world();
    let offer = offer_in_flight(&mut w);
    let state = w.get(C1).clone();
    let input = Input::Message(offer);
    let (a, ra) = step(&state, &input, 9, &mut ChaCha20Rng::seed_from_u64(3));
    let (b, rb) = step(&state, &input, 9, &mut ChaCha20Rng::seed_from_u64(3));
    assert_eq!(ra, rb);
    assert_eq!(
        a.as_customer().unwrap().txns,
        b.as_customer().unwrap().txns
    );
    // the input state is untouched
    assert_eq!(state.phase(&w.txn()), Phase::Browsing);
}

#[test]
fn happy_path_settles_once_and_ends_terminal() {
    let mut w = world();
    w.run_happy();
    assert!(w.errors.is_empty(), "{:?}", w.errors);
    assert_eq!(w.count(Settlement), 2, "CB to MB, then MB to M");
    let paid: Vec<_> = w
        .delivered
        .iter()
        .filter(|m| m.kind() == Settlement && m.to.role == crate::ids::Role::MerchantBank)
        .collect();
    assert_eq!(paid.len(), 1);
    assert!(matches!(paid[0].payload, Payload::Settlement { amount, .. } if amount == PRICE));
    let txn = w.txn();
    for id in [C1, M1, CB, MB, TTP] {
        let phase = w.get(id).phase(&txn);
        assert!(table::is_terminal(id.role, phase), "{id} ended in {phase}");
    }
    assert_eq!(
        events(&w),
        vec!["Deposit", "TempAck", "Dispatch", "Accept", "Release", "Settled"]
    );
    w.ttp().ledger.verify_chain().unwrap();
    let mb = w.get(MB).as_merchant_bank().unwrap();
    assert_eq!(mb.accounts[&M1], PRICE);
    assert_eq!(w.cb().total_funds(), Amount(BALANCE.0 - PRICE.0));
    assert_eq!(w.get(M1).as_merchant().unwrap().revenue, PRICE);
    let rec = w.ttp().trust.get(&M1).unwrap();
    assert_eq!((rec.total_transactions, rec.rejected_transactions), (1, 0));
}

#[test]
fn every_step_of_the_happy_path_conforms_to_the_table() {
    let mut w = world();
    let first = w.start();
    let mut queue: std::collections::VecDeque<_> = first.into();
    while let Some(msg) = queue.pop_front() {
        w.now += 1;
        let out = w.input(msg.to, &Input::Message(msg)).unwrap();
        assert!(out.transition.conforms(&out.emitted_kinds()), "{:?}", out.transition);
        queue.extend(out.messages);
    }
}

#[test]
fn customer_aborts_below_policy_and_ledger_notes_it() {
    let mut trust = TrustTable::new();
    trust.insert(TrustRecord::with_history(M1, 1000, 300));
    let mut w = world_with(Options {
        trust,
        policy: AcceptancePolicy {
            min_grade: Some(Grade::A1),
        },
        ..Options::default()
    });
    w.run_happy();
    assert!(w.errors.is_empty(), "{:?}", w.errors);
    assert_eq!(w.get(C1).phase(&w.txn()), Phase::Aborted);
    assert_eq!(w.get(M1).phase(&w.txn()), Phase::Closed);
    assert_eq!(w.ttp().txns[&w.txn()].phase, Phase::Aborted);
    assert_eq!(events(&w), vec!["Abort"]);
    assert_eq!(w.count(TokenRequest), 0);
}

#[test]
fn insufficient_funds_declines_and_aborts() {
    let mut w = world_with(Options {
        balance: Amount(10),
        ..Options::default()
    });
    w.run_happy();
    assert!(w.errors.is_empty(), "{:?}", w.errors);
    assert_eq!(w.get(CB).phase(&w.txn()), Phase::Declined);
    assert_eq!(w.get(C1).phase(&w.txn()), Phase::Aborted);
    assert_eq!(w.cb().total_funds(), Amount(10));
}

/// Pumps until the TTP holds the deposit but before any verdict.
fn escrowed_world() -> (World, ProtocolMessage) {
    let mut w = world();
    let first = w.start();
    let mut deposit = None;
    w.pump(first, |m| {
        if m.kind() == EscrowDeposit {
            deposit = Some(m.clone());
            return false;
        }
        true
    });
    (w, deposit.unwrap())
}

#[test]
fn first_deposit_is_held_and_acknowledged() {
    let (mut w, deposit) = escrowed_world();
    // the merchant's query arrived first and is waiting
    assert_eq!(w.ttp().txns[&w.txn()].phase, Phase::Registered);
    w.now += 1;
    let (ttp, out) = ttp_hold_escrow(w.get(TTP), &deposit, w.now);
    let out = out.unwrap();
    assert_eq!(out.emitted_kinds(), vec![TempPaymentAck]);
    let Payload::TempPaymentAck {
        token_digest,
        amount,
        ..
    } = &out.messages[0].payload
    else {
        unreachable!()
    };
    let Payload::EscrowDeposit { sealed, .. } = &deposit.payload else {
        unreachable!()
    };
    assert_eq!(*token_digest, sealed.digest());
    assert_eq!(*amount, PRICE);
    let rec = &ttp.as_ttp().unwrap().txns[&w.txn()];
    assert_eq!(rec.held.as_ref(), Some(sealed));
    assert_eq!(rec.phase, Phase::Acked);
}

#[test]
fn second_deposit_is_a_duplicate() {
    let (mut w, deposit) = escrowed_world();
    w.now += 1;
    w.input(TTP, &Input::Message(deposit.clone())).unwrap();
    w.now += 1;
    assert_eq!(
        w.input(TTP, &Input::Message(deposit)),
        Err(StepError::DuplicateDeposit(w.txn()))
    );
}

#[test]
fn deposit_for_unknown_transaction_is_refused() {
    let (w, deposit) = escrowed_world();
    let mut stray = deposit.clone();
    stray.txn = TransactionId::new(C1, 99);
    let stray = w.signed(C1, TTP, stray.txn, stray.payload);
    let (_, result) = ttp_hold_escrow(w.get(TTP), &stray, w.now + 1);
    assert_eq!(result.unwrap_err(), StepError::UnknownTxn(stray.txn));
}

#[test]
fn malformed_deposit_is_logged_and_a_new_token_requested() {
    let (mut w, mut deposit) = escrowed_world();
    if let Payload::EscrowDeposit { sealed, .. } = &mut deposit.payload {
        sealed.envelope.truncate(100);
    }
    w.pump(vec![deposit], |_| true);
    assert!(w.errors.is_empty(), "{:?}", w.errors);
    assert_eq!(w.count(RegenerateRequest), 1);
    assert_eq!(w.get(C1).phase(&w.txn()), Phase::Completed);
    assert_eq!(
        events(&w),
        vec!["Tamper", "Regenerate", "Deposit", "TempAck", "Dispatch", "Accept", "Release", "Settled"]
    );
    // the first token was revoked when the second was issued
    assert_eq!(w.cb().txns[&w.txn()].issued.len(), 2);
    assert_eq!(w.cb().total_funds(), Amount(BALANCE.0 - PRICE.0));
}

/// Pumps until the goods reach the customer; the customer's verdict is
/// produced by its rejection behaviour.
fn run_with(behavior: RejectionBehavior) -> World {
    let mut w = world_with(Options {
        behavior,
        ..Options::default()
    });
    w.run_happy();
    assert!(w.errors.is_empty(), "{:?}", w.errors);
    w
}

#[test]
fn acceptance_releases_and_counts_a_transaction() {
    let w = run_with(RejectionBehavior::Never);
    assert_eq!(w.count(TokenRelease), 1);
    let rec = w.ttp().trust.get(&M1).unwrap();
    assert_eq!(rec.total_transactions, 1);
}

#[test]
fn rejection_keeps_token_and_counts_against_merchant() {
    let (mut w, deposit) = escrowed_world();
    w.now += 1;
    w.input(TTP, &Input::Message(deposit)).unwrap();
    let txn = w.txn();
    let order_number = w.ttp().txns[&txn].order.as_ref().unwrap().order_number;
    let dispatch = w.signed(
        M1,
        TTP,
        txn,
        Payload::GoodsDispatch {
            order_number,
            product: ProductId::new("widget"),
            quantity: 1,
            attempt: 0,
        },
    );
    w.now += 1;
    w.input(TTP, &Input::Message(dispatch)).unwrap();
    let reject = w.signed(
        C1,
        TTP,
        txn,
        Payload::RejectGoods {
            order_number,
            reason: "broken".into(),
        },
    );
    let (ttp, out) = ttp_disposition(w.get(TTP), &reject, w.now + 1);
    let out = out.unwrap();
    assert_eq!(out.emitted_kinds(), vec![RejectGoods]);
    assert_eq!(out.messages[0].to, M1);
    let state = ttp.as_ttp().unwrap();
    assert!(state.txns[&txn].held.is_some());
    assert_eq!(state.txns[&txn].phase, Phase::Disputed);
    let rec = state.trust.get(&M1).unwrap();
    assert_eq!((rec.total_transactions, rec.rejected_transactions), (1, 1));
}

#[test]
fn verdict_without_held_token_is_refused() {
    let mut w = world();
    let first = w.start();
    w.pump(first, |m| m.kind() != EscrowDeposit);
    let txn = w.txn();
    let accept = w.signed(
        C1,
        TTP,
        txn,
        Payload::AcceptGoods {
            order_number: OrderNumber(1),
        },
    );
    let (_, result) = ttp_disposition(w.get(TTP), &accept, w.now + 1);
    assert_eq!(result.unwrap_err(), StepError::NoHeldToken(txn));
}

#[test]
fn reject_then_replacement_accepted() {
    let w = run_with(RejectionBehavior::Script(vec![GoodsVerdict::Reject, GoodsVerdict::Accept]));
    assert_eq!(w.count(GoodsDispatch), 4, "two deliveries, each copied to the TTP");
    let rec = w.ttp().trust.get(&M1).unwrap();
    assert_eq!((rec.total_transactions, rec.rejected_transactions), (2, 1));
    assert_eq!(
        rec.repeat_rejections[&(C1, ProductId::new("widget"))],
        1
    );
    let ev = events(&w);
    let reject = ev.iter().position(|e| *e == "Reject").unwrap();
    let release = ev.iter().position(|e| *e == "Release").unwrap();
    assert!(reject < release);
    assert_eq!(ev.iter().filter(|e| **e == "Settled").count(), 1);
}

fn settle_setup() -> (World, TransactionId, SealedToken) {
    let mut w = world();
    let first = w.start();
    let mut release = None;
    w.pump(first, |m| {
        if m.kind() == PaymentRequest {
            release = Some(m.clone());
            return false;
        }
        true
    });
    let msg = release.unwrap();
    let Payload::PaymentRequest { sealed } = msg.payload else {
        unreachable!()
    };
    (w, msg.txn, sealed)
}

#[test]
fn clean_token_settles_for_exactly_its_amount() {
    let (w, txn, sealed) = settle_setup();
    let (cb, outcome) = cb_settle(w.cb(), &w.get(CB).keys, &txn, &sealed);
    assert!(matches!(outcome, SettleOutcome::Paid { amount, merchant, .. } if amount == PRICE && merchant == M1));
    assert_eq!(cb.total_funds(), Amount(BALANCE.0 - PRICE.0));
    assert_eq!(cb.txns[&txn].phase, Phase::Settled);
}

#[test]
fn inflated_amount_is_reported_and_moves_nothing() {
    let (w, txn, sealed) = settle_setup();
    let keys = &w.get(CB).keys;
    // in transit: flip the ciphertext over the amount field
    let mut flipped = sealed.clone();
    flipped.envelope[crate::token::AMOUNT_OFFSET + 7] ^= 0x40;
    let (cb, outcome) = cb_settle(w.cb(), keys, &txn, &flipped);
    assert_eq!(outcome, SettleOutcome::Refused(TamperCause::Undecryptable));
    assert_eq!(cb.total_funds(), w.cb().total_funds());
    assert_eq!(cb.accounts[&crate::ids::AccountId(1)].held, Amount::ZERO);

    // a well-formed token that differs from the duplicate only in amount
    let mut forged = open_token(&sealed, keys).unwrap();
    forged.amount = Amount(95_000);
    let resealed = seal_token(&forged, keys, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
    let (_, outcome) = cb_settle(w.cb(), keys, &txn, &resealed);
    assert_eq!(
        outcome,
        SettleOutcome::Refused(TamperCause::Tampered {
            fields: vec![TokenField::Amount]
        })
    );
}

#[test]
fn second_presentation_is_already_settled() {
    let (w, txn, sealed) = settle_setup();
    let keys = &w.get(CB).keys;
    let (once, _) = cb_settle(w.cb(), keys, &txn, &sealed);
    let (twice, outcome) = cb_settle(&once, keys, &txn, &sealed);
    assert_eq!(outcome, SettleOutcome::Refused(TamperCause::AlreadySettled));
    assert_eq!(twice.total_funds(), once.total_funds());
    assert_eq!(twice.accounts, once.accounts);
}

#[test]
fn tamper_report_regenerates_and_retry_settles() {
    let mut w = world();
    let first = w.start();
    let mut hit = false;
    w.pump(first, |m| {
        if m.kind() == PaymentRequest && !hit {
            hit = true;
            m.payload.sealed_token_mut().unwrap().envelope[200] ^= 1;
        }
        true
    });
    assert!(w.errors.is_empty(), "{:?}", w.errors);
    assert_eq!(w.count(TamperReport), 1);
    assert_eq!(w.count(RegenerateRequest), 1);
    let txn = w.txn();
    assert_eq!(w.get(C1).phase(&txn), Phase::Completed);
    let issued = &w.cb().txns[&txn].issued;
    assert_eq!(issued.len(), 2);
    assert_ne!(issued[0], issued[1]);
    assert_eq!(
        w.cb().vault.lookup(&issued[0]).unwrap().status,
        crate::token::TokenStatus::Revoked
    );
    let ev = events(&w);
    assert!(ev.windows(2).any(|p| p == ["Tamper", "Regenerate"]));
    assert_eq!(ev.iter().filter(|e| **e == "Settled").count(), 1);
    assert_eq!(w.get(MB).as_merchant_bank().unwrap().accounts[&M1], PRICE);
}

#[test]
fn tamper_report_for_unknown_transaction_sends_nothing() {
    let w = world();
    let report = w.signed(
        CB,
        TTP,
        TransactionId::new(C1, 42),
        Payload::TamperReport {
            cause: TamperCause::Undecryptable,
        },
    );
    let (ttp, result) = regenerate_flow(w.get(TTP), &report, 1);
    assert_eq!(result.unwrap_err(), StepError::UnknownTxn(report.txn));
    assert!(ttp.as_ttp().unwrap().ledger.is_empty());
}

#[test]
fn each_tamper_report_gets_its_own_regeneration() {
    let mut w = world();
    let first = w.start();
    let mut hits = 0;
    w.pump(first, |m| {
        if m.kind() == PaymentRequest && hits < 2 {
            hits += 1;
            m.payload.sealed_token_mut().unwrap().envelope[300] ^= 0x80;
        }
        true
    });
    assert!(w.errors.is_empty(), "{:?}", w.errors);
    assert_eq!(w.count(TamperReport), 2);
    assert_eq!(w.count(RegenerateRequest), 2);
    let issued = &w.cb().txns[&w.txn()].issued;
    let distinct: std::collections::BTreeSet<_> = issued.iter().collect();
    assert_eq!((issued.len(), distinct.len()), (3, 3));
    assert_eq!(w.get(C1).phase(&w.txn()), Phase::Completed);
}

#[test]
fn persistent_tampering_aborts_after_the_retry_cap() {
    let mut w = world_with(Options {
        retry_cap: 2,
        ..Options::default()
    });
    let first = w.start();
    w.pump(first, |m| {
        if m.kind() == PaymentRequest {
            m.payload.sealed_token_mut().unwrap().envelope[50] ^= 1;
        }
        true
    });
    assert!(w.errors.is_empty(), "{:?}", w.errors);
    assert_eq!(w.count(RegenerateRequest), 2);
    let txn = w.txn();
    assert_eq!(w.ttp().txns[&txn].phase, Phase::Aborted);
    assert_eq!(w.get(C1).phase(&txn), Phase::Aborted);
    assert_eq!(w.get(MB).phase(&txn), Phase::Closed);
    // every hold was released
    assert_eq!(w.cb().total_funds(), BALANCE);
    assert_eq!(w.cb().accounts[&crate::ids::AccountId(1)].held, Amount::ZERO);
}

#[test]
fn dropped_dispatch_is_refunded_at_the_deadline() {
    let mut w = world();
    let first = w.start();
    w.pump(first, |m| m.kind() != GoodsDispatch);
    let txn = w.txn();
    assert_eq!(w.ttp().txns[&txn].phase, Phase::Acked);
    while w.fire_next_timer() {}
    assert!(w.errors.is_empty(), "{:?}", w.errors);
    assert_eq!(w.ttp().txns[&txn].phase, Phase::Expired);
    assert_eq!(w.get(CB).phase(&txn), Phase::Cancelled);
    assert_eq!(w.get(C1).phase(&txn), Phase::Refunded);
    assert_eq!(w.get(M1).phase(&txn), Phase::Closed);
    assert_eq!(w.cb().total_funds(), BALANCE);
    let rec = w.ttp().trust.get(&M1).unwrap();
    assert_eq!((rec.total_transactions, rec.rejected_transactions), (1, 1));
    assert_eq!(events(&w).last(), Some(&"DeadlineExpired"));
}

#[test]
fn superseded_deadlines_are_ignored() {
    let mut w = world();
    w.run_happy();
    let before = w.ttp().ledger.len();
    while w.fire_next_timer() {}
    assert_eq!(w.ttp().ledger.len(), before);
    assert_eq!(w.ttp().txns[&w.txn()].phase, Phase::Completed);
}

#[test]
fn no_delivered_message_breaches_privacy() {
    for behavior in [
        RejectionBehavior::Never,
        RejectionBehavior::Script(vec![GoodsVerdict::Reject]),
    ] {
        let w = run_with(behavior);
        for msg in &w.delivered {
            assert_eq!(privacy_breach(msg), None);
        }
    }
}
