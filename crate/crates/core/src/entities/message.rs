//! Signed protocol messages.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::digest::{hex_bytes, Digest};
use crate::ids::{AccountId, EntityId, OrderNumber, ProductId, Role, TransactionId};
use crate::token::{Amount, Certificate, KeyMaterial, PublicKey, SealedToken, TamperCause};
use crate::trust::TrustStanding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Browse,
    Offer,
    TrustLookup,
    TrustReply,
    TokenRequest,
    TokenIssued,
    PurchaseConfirm,
    EscrowDeposit,
    TempPaymentQuery,
    TempPaymentAck,
    GoodsDispatch,
    AcceptGoods,
    RejectGoods,
    TokenRelease,
    PaymentRequest,
    Settlement,
    TamperReport,
    RegenerateRequest,
    CancelToken,
    CompletionNotice,
}

impl MessageKind {
    pub const ALL: [MessageKind; 20] = [
        MessageKind::Browse,
        MessageKind::Offer,
        MessageKind::TrustLookup,
        MessageKind::TrustReply,
        MessageKind::TokenRequest,
        MessageKind::TokenIssued,
        MessageKind::PurchaseConfirm,
        MessageKind::EscrowDeposit,
        MessageKind::TempPaymentQuery,
        MessageKind::TempPaymentAck,
        MessageKind::GoodsDispatch,
        MessageKind::AcceptGoods,
        MessageKind::RejectGoods,
        MessageKind::TokenRelease,
        MessageKind::PaymentRequest,
        MessageKind::Settlement,
        MessageKind::TamperReport,
        MessageKind::RegenerateRequest,
        MessageKind::CancelToken,
        MessageKind::CompletionNotice,
    ];

    pub fn carries_token(self) -> bool {
        matches!(
            self,
            MessageKind::TokenIssued
                | MessageKind::EscrowDeposit
                | MessageKind::TokenRelease
                | MessageKind::PaymentRequest
        )
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for MessageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown message kind {s:?}"))
    }
}

/// Order information agreed between customer and merchant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrderInfo {
    pub order_number: OrderNumber,
    pub product: ProductId,
    pub quantity: u32,
    pub total_price: Amount,
    pub merchant: EntityId,
}

impl OrderInfo {
    pub fn digest(&self) -> Digest {
        Digest::of(&serde_json::to_vec(self).expect("order info serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompletionStatus {
    Completed,
    Aborted,
    Refunded,
    Declined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Browse {
        product: ProductId,
        quantity: u32,
    },
    Offer {
        cert_merchant: Certificate,
        order: OrderInfo,
    },
    TrustLookup {
        merchant: EntityId,
    },
    TrustReply {
        merchant: EntityId,
        standing: TrustStanding,
    },
    TokenRequest {
        amount: Amount,
        account: AccountId,
        cert_customer: Certificate,
        cert_merchant: Certificate,
        /// 0 for the first token of a transaction, then one per regeneration.
        attempt: u32,
    },
    TokenIssued {
        sealed: SealedToken,
    },
    PurchaseConfirm {
        cert_customer: Certificate,
        order: OrderInfo,
    },
    EscrowDeposit {
        order: OrderInfo,
        sealed: SealedToken,
    },
    TempPaymentQuery {
        order_number: OrderNumber,
        amount: Amount,
    },
    TempPaymentAck {
        order_number: OrderNumber,
        token_digest: Digest,
        amount: Amount,
    },
    GoodsDispatch {
        order_number: OrderNumber,
        product: ProductId,
        quantity: u32,
        attempt: u32,
    },
    AcceptGoods {
        order_number: OrderNumber,
    },
    RejectGoods {
        order_number: OrderNumber,
        reason: String,
    },
    TokenRelease {
        sealed: SealedToken,
        merchant: EntityId,
    },
    PaymentRequest {
        sealed: SealedToken,
    },
    Settlement {
        amount: Amount,
        merchant: EntityId,
        /// Digest of the sealed token that was paid out.
        token_digest: Digest,
    },
    TamperReport {
        cause: TamperCause,
    },
    RegenerateRequest {
        attempt: u32,
    },
    CancelToken {
        customer: EntityId,
    },
    CompletionNotice {
        status: CompletionStatus,
        amount: Option<Amount>,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Browse { .. } => MessageKind::Browse,
            Payload::Offer { .. } => MessageKind::Offer,
            Payload::TrustLookup { .. } => MessageKind::TrustLookup,
            Payload::TrustReply { .. } => MessageKind::TrustReply,
            Payload::TokenRequest { .. } => MessageKind::TokenRequest,
            Payload::TokenIssued { .. } => MessageKind::TokenIssued,
            Payload::PurchaseConfirm { .. } => MessageKind::PurchaseConfirm,
            Payload::EscrowDeposit { .. } => MessageKind::EscrowDeposit,
            Payload::TempPaymentQuery { .. } => MessageKind::TempPaymentQuery,
            Payload::TempPaymentAck { .. } => MessageKind::TempPaymentAck,
            Payload::GoodsDispatch { .. } => MessageKind::GoodsDispatch,
            Payload::AcceptGoods { .. } => MessageKind::AcceptGoods,
            Payload::RejectGoods { .. } => MessageKind::RejectGoods,
            Payload::TokenRelease { .. } => MessageKind::TokenRelease,
            Payload::PaymentRequest { .. } => MessageKind::PaymentRequest,
            Payload::Settlement { .. } => MessageKind::Settlement,
            Payload::TamperReport { .. } => MessageKind::TamperReport,
            Payload::RegenerateRequest { .. } => MessageKind::RegenerateRequest,
            Payload::CancelToken { .. } => MessageKind::CancelToken,
            Payload::CompletionNotice { .. } => MessageKind::CompletionNotice,
        }
    }

    pub fn sealed_token(&self) -> Option<&SealedToken> {
        match self {
            Payload::TokenIssued { sealed }
            | Payload::EscrowDeposit { sealed, .. }
            | Payload::TokenRelease { sealed, .. }
            | Payload::PaymentRequest { sealed } => Some(sealed),
            _ => None,
        }
    }

    pub fn sealed_token_mut(&mut self) -> Option<&mut SealedToken> {
        match self {
            Payload::TokenIssued { sealed }
            | Payload::EscrowDeposit { sealed, .. }
            | Payload::TokenRelease { sealed, .. }
            | Payload::PaymentRequest { sealed } => Some(sealed),
            _ => None,
        }
    }

    pub fn order(&self) -> Option<&OrderInfo> {
        match self {
            Payload::Offer { order, .. }
            | Payload::PurchaseConfirm { order, .. }
            | Payload::EscrowDeposit { order, .. } => Some(order),
            _ => None,
        }
    }

    /// Data categories this payload exposes to its receiver.
    pub fn visible_fields(&self) -> Vec<FieldTag> {
        use FieldTag::*;
        match self {
            Payload::Browse { .. } => vec![Product, Quantity],
            Payload::Offer { .. } => vec![MerchantIdentity, OrderNumber, Product, Quantity, Price],
            Payload::TrustLookup { .. } => vec![MerchantIdentity],
            Payload::TrustReply { .. } => vec![MerchantIdentity, TrustScore],
            Payload::TokenRequest { .. } => {
                vec![Price, CustomerAccount, CustomerIdentity, MerchantIdentity]
            }
            Payload::TokenIssued { .. } => vec![SealedToken],
            Payload::PurchaseConfirm { .. } => {
                vec![CustomerIdentity, MerchantIdentity, OrderNumber, Product, Quantity, Price]
            }
            Payload::EscrowDeposit { .. } => {
                vec![MerchantIdentity, OrderNumber, Product, Quantity, Price, SealedToken]
            }
            Payload::TempPaymentQuery { .. } => vec![OrderNumber, Price],
            Payload::TempPaymentAck { .. } => vec![OrderNumber, TokenDigest, Price],
            Payload::GoodsDispatch { .. } => vec![OrderNumber, Product, Quantity],
            Payload::AcceptGoods { .. } => vec![OrderNumber],
            Payload::RejectGoods { .. } => vec![OrderNumber, Reason],
            Payload::TokenRelease { .. } => vec![SealedToken, MerchantIdentity],
            Payload::PaymentRequest { .. } => vec![SealedToken],
            Payload::Settlement { .. } => vec![Price, MerchantIdentity, TokenDigest],
            Payload::TamperReport { .. } => vec![Reason],
            Payload::RegenerateRequest { .. } => vec![],
            Payload::CancelToken { .. } => vec![CustomerIdentity],
            Payload::CompletionNotice { .. } => vec![Price],
        }
    }
}

/// Categories of data a message can reveal, for the privacy scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldTag {
    CustomerAccount,
    CustomerIdentity,
    MerchantIdentity,
    SymmetricKey,
    OrderNumber,
    Product,
    Quantity,
    Price,
    SealedToken,
    TokenDigest,
    TrustScore,
    Reason,
}

/// Returns a description of the breach if delivering `msg` would reveal a
/// field its receiver must not see.
pub fn privacy_breach(msg: &ProtocolMessage) -> Option<String> {
    let forbidden: &[FieldTag] = match msg.to.role {
        Role::Merchant | Role::MerchantBank => &[FieldTag::CustomerAccount, FieldTag::SymmetricKey],
        Role::CustomerBank => &[FieldTag::Product, FieldTag::Quantity],
        _ => &[FieldTag::SymmetricKey],
    };
    let seen: Vec<_> = msg
        .payload
        .visible_fields()
        .into_iter()
        .filter(|f| forbidden.contains(f))
        .collect();
    (!seen.is_empty()).then(|| {
        format!(
            "{} to {} exposes {:?} in {}",
            msg.from,
            msg.to,
            seen,
            msg.kind()
        )
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub from: EntityId,
    pub to: EntityId,
    pub txn: TransactionId,
    pub payload: Payload,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
}

#[derive(Serialize)]
struct SigningView<'a> {
    domain: &'static str,
    from: EntityId,
    to: EntityId,
    txn: TransactionId,
    payload: &'a Payload,
}

impl ProtocolMessage {
    pub fn signed(
        from: EntityId,
        to: EntityId,
        txn: TransactionId,
        payload: Payload,
        keys: &KeyMaterial,
    ) -> Self {
        let mut msg = ProtocolMessage {
            from,
            to,
            txn,
            payload,
            signature: Vec::new(),
        };
        msg.signature = keys.sign(&msg.signing_bytes());
        msg
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    /// Bytes covered by the sender's signature. A sealed token is excluded:
    /// it is relayed unchanged and authenticated end to end by the bank.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut payload = self.payload.clone();
        if let Some(sealed) = payload.sealed_token_mut() {
            sealed.envelope.clear();
        }
        serde_json::to_vec(&SigningView {
            domain: "tset/message/v1",
            from: self.from,
            to: self.to,
            txn: self.txn,
            payload: &payload,
        })
        .expect("messages serialize")
    }

    pub fn verify(&self, sender: &PublicKey) -> bool {
        sender.verify(&self.signing_bytes(), &self.signature)
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&serde_json::to_vec(self).expect("messages serialize"))
    }
}
