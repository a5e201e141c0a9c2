//! The TTP's append-only, hash-chained transaction log.
//!
//! Each entry is encoded to bytes and chained: the first record's hash is
//! `H(entry)`, every later one is `H(prev_hash || H(entry))`. On disk a record
//! is
//!
//! ```text
//! [u32 big-endian length][entry bytes][32-byte chain hash]
//! ```
//!
//! Loading a file recomputes the whole chain, so a flipped byte anywhere is
//! reported rather than silently accepted.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::ids::{EntityId, TransactionId};
use crate::token::{Amount, TamperCause, TokenField};
use crate::trust::{TrustStanding, TrustTable};

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("entry for {txn} at tick {tick} precedes recorded tick {last}")]
    OutOfOrder {
        txn: TransactionId,
        tick: u64,
        last: u64,
    },
    #[error("no ledger entries for {0}")]
    UnknownTxn(TransactionId),
    #[error("hash chain broken at record {index}")]
    ChainBroken { index: usize },
    #[error("malformed ledger at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("proof does not verify: {0}")]
    BadProof(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerEvent {
    Deposit,
    TempAck,
    Dispatch,
    Accept,
    Reject { reason: String },
    Release,
    Settled { amount: Amount },
    Tamper { cause: TamperCause },
    Regenerate,
    Abort,
    DeadlineExpired,
}

impl LedgerEvent {
    pub fn name(&self) -> &'static str {
        match self {
            LedgerEvent::Deposit => "Deposit",
            LedgerEvent::TempAck => "TempAck",
            LedgerEvent::Dispatch => "Dispatch",
            LedgerEvent::Accept => "Accept",
            LedgerEvent::Reject { .. } => "Reject",
            LedgerEvent::Release => "Release",
            LedgerEvent::Settled { .. } => "Settled",
            LedgerEvent::Tamper { .. } => "Tamper",
            LedgerEvent::Regenerate => "Regenerate",
            LedgerEvent::Abort => "Abort",
            LedgerEvent::DeadlineExpired => "DeadlineExpired",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub txn: TransactionId,
    pub tick: u64,
    pub actor: EntityId,
    pub event: LedgerEvent,
    /// Digest of the sealed token involved, if any.
    pub token_digest: Option<Digest>,
    /// Digest of the order information, if known.
    pub oi_digest: Option<Digest>,
}

impl LedgerEntry {
    pub fn new(txn: TransactionId, tick: u64, actor: EntityId, event: LedgerEvent) -> Self {
        LedgerEntry {
            txn,
            tick,
            actor,
            event,
            token_digest: None,
            oi_digest: None,
        }
    }

    pub fn with_digests(mut self, token: Option<Digest>, oi: Option<Digest>) -> Self {
        self.token_digest = token;
        self.oi_digest = oi;
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128);
        out.extend_from_slice(&self.txn.to_bytes());
        out.extend_from_slice(&self.tick.to_be_bytes());
        out.extend_from_slice(&self.actor.to_bytes());
        match &self.event {
            LedgerEvent::Deposit => out.push(0),
            LedgerEvent::TempAck => out.push(1),
            LedgerEvent::Dispatch => out.push(2),
            LedgerEvent::Accept => out.push(3),
            LedgerEvent::Reject { reason } => {
                out.push(4);
                out.extend_from_slice(&(reason.len() as u32).to_be_bytes());
                out.extend_from_slice(reason.as_bytes());
            }
            LedgerEvent::Release => out.push(5),
            LedgerEvent::Settled { amount } => {
                out.push(6);
                out.extend_from_slice(&amount.0.to_be_bytes());
            }
            LedgerEvent::Tamper { cause } => {
                out.push(7);
                out.push(cause.code());
                let fields: &[TokenField] = match cause {
                    TamperCause::Tampered { fields } => fields,
                    _ => &[],
                };
                out.push(fields.len() as u8);
                out.extend(fields.iter().map(|f| f.code()));
            }
            LedgerEvent::Regenerate => out.push(8),
            LedgerEvent::Abort => out.push(9),
            LedgerEvent::DeadlineExpired => out.push(10),
        }
        for digest in [&self.token_digest, &self.oi_digest] {
            match digest {
                Some(d) => {
                    out.push(1);
                    out.extend_from_slice(&d.0);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<LedgerEntry, String> {
        let mut r = Cursor { bytes, pos: 0 };
        let txn = TransactionId::from_bytes(r.take(13)?).ok_or("bad txn")?;
        let tick = u64::from_be_bytes(r.take(8)?.try_into().unwrap());
        let actor = EntityId::from_bytes(r.take(5)?).ok_or("bad actor")?;
        let event = match r.byte()? {
            0 => LedgerEvent::Deposit,
            1 => LedgerEvent::TempAck,
            2 => LedgerEvent::Dispatch,
            3 => LedgerEvent::Accept,
            4 => {
                let len = u32::from_be_bytes(r.take(4)?.try_into().unwrap()) as usize;
                let reason = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| "reason is not utf-8")?
                    .to_string();
                LedgerEvent::Reject { reason }
            }
            5 => LedgerEvent::Release,
            6 => LedgerEvent::Settled {
                amount: Amount(u64::from_be_bytes(r.take(8)?.try_into().unwrap())),
            },
            7 => {
                let code = r.byte()?;
                let count = r.byte()? as usize;
                let fields = r
                    .take(count)?
                    .iter()
                    .map(|c| TokenField::from_code(*c).ok_or("bad field code"))
                    .collect::<Result<Vec<_>, _>>()?;
                if code != 0 && !fields.is_empty() {
                    return Err("fields on non-field cause".into());
                }
                LedgerEvent::Tamper {
                    cause: TamperCause::from_code(code, fields).ok_or("bad cause")?,
                }
            }
            8 => LedgerEvent::Regenerate,
            9 => LedgerEvent::Abort,
            10 => LedgerEvent::DeadlineExpired,
            other => return Err(format!("bad event tag {other}")),
        };
        let mut digests = [None, None];
        for slot in &mut digests {
            *slot = match r.byte()? {
                0 => None,
                1 => Some(Digest(r.take(32)?.try_into().unwrap())),
                other => return Err(format!("bad digest flag {other}")),
            };
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes in entry".into());
        }
        let [token_digest, oi_digest] = digests;
        Ok(LedgerEntry {
            txn,
            tick,
            actor,
            event,
            token_digest,
            oi_digest,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| "truncated entry".to_string())?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn byte(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
}

/// Chain hash of a record given its predecessor's hash.
pub fn chain_link(prev: Option<&Digest>, entry_bytes: &[u8]) -> Digest {
    let leaf = Digest::of(entry_bytes);
    match prev {
        None => leaf,
        Some(prev) => Digest::of_parts(&[&prev.0, &leaf.0]),
    }
}

fn chain_from_leaf(prev: Option<&Digest>, leaf: &Digest) -> Digest {
    match prev {
        None => *leaf,
        Some(prev) => Digest::of_parts(&[&prev.0, &leaf.0]),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Record {
    entry: LedgerEntry,
    bytes: Vec<u8>,
    chain: Digest,
}

/// In-memory log. Entries are only ever appended.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    records: Vec<Record>,
    last_tick: BTreeMap<TransactionId, u64>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn head(&self) -> Option<Digest> {
        self.records.last().map(|r| r.chain)
    }

    pub fn entries(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.records.iter().map(|r| &r.entry)
    }

    pub fn entries_for<'a>(&'a self, txn: &'a TransactionId) -> impl Iterator<Item = &'a LedgerEntry> {
        self.entries().filter(move |e| &e.txn == txn)
    }

    /// Tick of the latest entry recorded for `txn`.
    pub fn last_tick(&self, txn: &TransactionId) -> Option<u64> {
        self.last_tick.get(txn).copied()
    }

    pub fn chain_hashes(&self) -> impl Iterator<Item = Digest> + '_ {
        self.records.iter().map(|r| r.chain)
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<Digest, LedgerError> {
        if let Some(&last) = self.last_tick.get(&entry.txn) {
            if entry.tick < last {
                return Err(LedgerError::OutOfOrder {
                    txn: entry.txn,
                    tick: entry.tick,
                    last,
                });
            }
        }
        let bytes = entry.encode();
        let chain = chain_link(self.head().as_ref(), &bytes);
        self.last_tick.insert(entry.txn, entry.tick);
        self.records.push(Record {
            entry,
            bytes,
            chain,
        });
        Ok(chain)
    }

    /// Recomputes every link from the stored entry bytes.
    pub fn verify_chain(&self) -> Result<(), LedgerError> {
        let mut prev: Option<Digest> = None;
        for (index, record) in self.records.iter().enumerate() {
            let expected = chain_link(prev.as_ref(), &record.bytes);
            if expected != record.chain || record.entry.encode() != record.bytes {
                return Err(LedgerError::ChainBroken { index });
            }
            prev = Some(expected);
        }
        Ok(())
    }

    pub fn dispute_report(&self, txn: &TransactionId) -> Result<DisputeReport, LedgerError> {
        let first = self
            .records
            .iter()
            .position(|r| &r.entry.txn == txn)
            .ok_or(LedgerError::UnknownTxn(*txn))?;
        let anchor = first.checked_sub(1).map(|i| self.records[i].chain);
        let steps = self.records[first..]
            .iter()
            .map(|r| {
                if &r.entry.txn == txn {
                    ProofStep::Entry(r.bytes.clone())
                } else {
                    ProofStep::Leaf(Digest::of(&r.bytes))
                }
            })
            .collect();
        Ok(DisputeReport {
            txn: *txn,
            entries: self.entries_for(txn).cloned().collect(),
            proof: ChainProof {
                anchor,
                steps,
                head: self.head().expect("non-empty"),
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for record in &self.records {
            write_record(&mut out, &record.bytes, &record.chain);
        }
        out
    }

    /// Parses a persisted log and verifies its entire chain.
    pub fn from_bytes(bytes: &[u8]) -> Result<Ledger, LedgerError> {
        let mut ledger = Ledger::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let malformed = |reason: &str| LedgerError::Malformed {
                offset: pos,
                reason: reason.to_string(),
            };
            let len_bytes = bytes.get(pos..pos + 4).ok_or_else(|| malformed("truncated length"))?;
            let len = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
            let body_end = (pos + 4)
                .checked_add(len)
                .filter(|e| e + 32 <= bytes.len())
                .ok_or_else(|| malformed("record overruns file"))?;
            let body = &bytes[pos + 4..body_end];
            let stored: [u8; 32] = bytes[body_end..body_end + 32].try_into().unwrap();
            let index = ledger.records.len();
            if chain_link(ledger.head().as_ref(), body) != Digest(stored) {
                return Err(LedgerError::ChainBroken { index });
            }
            let entry = LedgerEntry::decode(body).map_err(|reason| LedgerError::Malformed {
                offset: pos + 4,
                reason,
            })?;
            ledger.append(entry)?;
            pos = body_end + 32;
        }
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> Result<(), LedgerError> {
        let mut file = File::create(path)?;
        file.write_all(&self.to_bytes())?;
        file.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Ledger, LedgerError> {
        Ledger::from_bytes(&std::fs::read(path)?)
    }
}

fn write_record(out: &mut Vec<u8>, bytes: &[u8], chain: &Digest) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
    out.extend_from_slice(&chain.0);
}

/// A ledger mirrored to a file, one record written per append.
#[derive(Debug)]
pub struct LedgerFile {
    ledger: Ledger,
    file: File,
}

impl LedgerFile {
    /// Opens (verifying) or creates the log at `path`.
    pub fn open(path: &Path) -> Result<LedgerFile, LedgerError> {
        let ledger = if path.exists() {
            Ledger::load(path)?
        } else {
            Ledger::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(LedgerFile { ledger, file })
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<Digest, LedgerError> {
        let chain = self.ledger.append(entry)?;
        let record = self.ledger.records.last().expect("just appended");
        let mut buf = Vec::with_capacity(record.bytes.len() + 36);
        write_record(&mut buf, &record.bytes, &chain);
        self.file.write_all(&buf)?;
        self.file.sync_data()?;
        Ok(chain)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProofStep {
    /// Full bytes of an entry belonging to the disputed transaction.
    Entry(#[serde(with = "crate::digest::hex_bytes")] Vec<u8>),
    /// Leaf digest of an unrelated entry.
    Leaf(Digest),
}

/// The chain segment from the disputed transaction's first entry to the head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainProof {
    pub anchor: Option<Digest>,
    pub steps: Vec<ProofStep>,
    pub head: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisputeReport {
    pub txn: TransactionId,
    pub entries: Vec<LedgerEntry>,
    pub proof: ChainProof,
}

impl DisputeReport {
    /// Checks that the listed entries are exactly the proof's entries and that
    /// the proof reproduces `head`.
    pub fn verify(&self, head: &Digest) -> Result<(), LedgerError> {
        let mut prev = self.proof.anchor;
        let mut listed = self.entries.iter();
        for step in &self.proof.steps {
            let leaf = match step {
                ProofStep::Entry(bytes) => {
                    let entry = LedgerEntry::decode(bytes).map_err(LedgerError::BadProof)?;
                    if entry.txn != self.txn || listed.next() != Some(&entry) {
                        return Err(LedgerError::BadProof("entry list mismatch".into()));
                    }
                    Digest::of(bytes)
                }
                ProofStep::Leaf(leaf) => *leaf,
            };
            prev = Some(chain_from_leaf(prev.as_ref(), &leaf));
        }
        if listed.next().is_some() {
            return Err(LedgerError::BadProof("entries missing from proof".into()));
        }
        if prev.as_ref() != Some(head) || &self.proof.head != head {
            return Err(LedgerError::BadProof("head mismatch".into()));
        }
        Ok(())
    }
}

/// Dispute report straight from a persisted log; fails if any byte of the
/// file was altered.
pub fn dispute_report_from_file(path: &Path, txn: &TransactionId) -> Result<DisputeReport, LedgerError> {
    let ledger = Ledger::load(path)?;
    let report = ledger.dispute_report(txn)?;
    report.verify(&ledger.head().expect("report implies entries"))?;
    Ok(report)
}

/// Current standing of `merchant` in the TTP's trust table.
pub fn trust_lookup(table: &TrustTable, merchant: &EntityId) -> TrustStanding {
    table.lookup(merchant)
}
