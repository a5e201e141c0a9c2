//! Identifiers shared by every protocol participant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five kinds of protocol participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Customer,
    Merchant,
    CustomerBank,
    MerchantBank,
    Ttp,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Customer,
        Role::Merchant,
        Role::CustomerBank,
        Role::MerchantBank,
        Role::Ttp,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Role::Customer => "C",
            Role::Merchant => "M",
            Role::CustomerBank => "CB",
            Role::MerchantBank => "MB",
            Role::Ttp => "TTP",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Role::Customer => 1,
            Role::Merchant => 2,
            Role::CustomerBank => 3,
            Role::MerchantBank => 4,
            Role::Ttp => 5,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.code() == code)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Role::Customer => "customer",
            Role::Merchant => "merchant",
            Role::CustomerBank => "customer-bank",
            Role::MerchantBank => "merchant-bank",
            Role::Ttp => "ttp",
        };
        f.write_str(name)
    }
}

/// A participant, e.g. `C1`, `M2`, `CB1`, `MB1`, `TTP1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EntityId {
    pub role: Role,
    pub index: u32,
}

impl EntityId {
    pub const fn new(role: Role, index: u32) -> Self {
        EntityId { role, index }
    }

    pub const fn customer(index: u32) -> Self {
        EntityId::new(Role::Customer, index)
    }

    pub const fn merchant(index: u32) -> Self {
        EntityId::new(Role::Merchant, index)
    }

    pub const fn customer_bank(index: u32) -> Self {
        EntityId::new(Role::CustomerBank, index)
    }

    pub const fn merchant_bank(index: u32) -> Self {
        EntityId::new(Role::MerchantBank, index)
    }

    pub const fn ttp(index: u32) -> Self {
        EntityId::new(Role::Ttp, index)
    }

    pub(crate) fn to_bytes(self) -> [u8; 5] {
        let mut out = [0u8; 5];
        out[0] = self.role.code();
        out[1..].copy_from_slice(&self.index.to_be_bytes());
        out
    }

    pub(crate) fn from_bytes(bytes: &[u8]) -> Option<EntityId> {
        if bytes.len() != 5 {
            return None;
        }
        let role = Role::from_code(bytes[0])?;
        let index = u32::from_be_bytes(bytes[1..5].try_into().ok()?);
        Some(EntityId { role, index })
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.role.prefix(), self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid entity id {0:?}")]
pub struct ParseIdError(pub String);

impl FromStr for EntityId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let split = s
            .find(|c: char| c.is_ascii_digit())
            .ok_or_else(|| ParseIdError(s.to_string()))?;
        let (prefix, digits) = s.split_at(split);
        // longest prefixes first so "CB" is not read as "C"
        let role = match prefix {
            "TTP" => Role::Ttp,
            "CB" => Role::CustomerBank,
            "MB" => Role::MerchantBank,
            "C" => Role::Customer,
            "M" => Role::Merchant,
            _ => return Err(ParseIdError(s.to_string())),
        };
        let index = digits.parse().map_err(|_| ParseIdError(s.to_string()))?;
        Ok(EntityId { role, index })
    }
}

impl TryFrom<String> for EntityId {
    type Error = ParseIdError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<EntityId> for String {
    fn from(id: EntityId) -> Self {
        id.to_string()
    }
}

/// Transaction identifier assigned by the customer that started it. Every
/// other party echoes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TransactionId {
    pub originator: EntityId,
    pub serial: u64,
}

impl TransactionId {
    pub const fn new(originator: EntityId, serial: u64) -> Self {
        TransactionId { originator, serial }
    }

    pub(crate) fn to_bytes(self) -> [u8; 13] {
        let mut out = [0u8; 13];
        out[..5].copy_from_slice(&self.originator.to_bytes());
        out[5..].copy_from_slice(&self.serial.to_be_bytes());
        out
    }

    pub(crate) fn from_bytes(bytes: &[u8]) -> Option<TransactionId> {
        if bytes.len() != 13 {
            return None;
        }
        let originator = EntityId::from_bytes(&bytes[..5])?;
        let serial = u64::from_be_bytes(bytes[5..].try_into().ok()?);
        Some(TransactionId { originator, serial })
    }
}

impl fmt::Display for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.originator, self.serial)
    }
}

impl FromStr for TransactionId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (who, serial) = s.split_once('#').ok_or_else(|| ParseIdError(s.to_string()))?;
        Ok(TransactionId {
            originator: who.parse()?,
            serial: serial.parse().map_err(|_| ParseIdError(s.to_string()))?,
        })
    }
}

impl TryFrom<String> for TransactionId {
    type Error = ParseIdError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<TransactionId> for String {
    fn from(id: TransactionId) -> Self {
        id.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProductId(pub String);

impl ProductId {
    pub fn new(name: impl Into<String>) -> Self {
        ProductId(name.into())
    }
}

impl fmt::Display for ProductId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A customer's account number at the customer bank. Only the customer and
/// the customer bank ever see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccountId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderNumber(pub u64);

impl fmt::Display for OrderNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OI-{}", self.0)
    }
}
