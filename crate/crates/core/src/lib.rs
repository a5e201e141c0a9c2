//! Token-escrowed secure electronic transactions.
//!
//! Five honest parties (customer, merchant, customer bank, merchant bank and a
//! trusted third party) exchange signed messages over an adversarial network.
//! The customer bank issues a sealed single-use payment token, the TTP holds
//! it in escrow until the customer accepts the goods, and the bank pays only
//! after the presented token matches its stored duplicate. The TTP also keeps
//! a hash-chained transaction log and grades merchants by their rejection
//! history.

pub mod digest;
pub mod ids;
pub mod token;
pub mod trust;
pub mod ledger;
pub mod entities;
pub mod simnet;
pub mod scenario;
