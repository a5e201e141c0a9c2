//! Canonical token encoding.
//!
//! ```text
//! AM      u64 big-endian
//! DCert_C u32 big-endian length, certificate bytes
//! DCert_M u32 big-endian length, certificate bytes
//! TKN_ID  32 raw bytes
//! TS      u64 big-endian milliseconds
//! ```

use super::{Amount, Certificate, Timestamp, Token, TokenError, TokenId, CERTIFICATE_LEN};

/// Length of a canonical token with fixed-width certificates.
pub const CANONICAL_LEN: usize = 8 + 4 + CERTIFICATE_LEN + 4 + CERTIFICATE_LEN + 32 + 8;

pub fn canonical_serialize(token: &Token) -> Vec<u8> {
    encode_with_id(token, &token.token_id.0)
}

pub fn canonical_deserialize(bytes: &[u8]) -> Result<Token, TokenError> {
    let (token, id) = decode_with_id(bytes, 32)?;
    Ok(Token {
        token_id: TokenId(id.try_into().expect("length checked")),
        ..token
    })
}

/// Encodes `token` with `id_field` in place of the raw token id. The sealed
/// form substitutes the encrypted id here.
pub(super) fn encode_with_id(token: &Token, id_field: &[u8]) -> Vec<u8> {
    let cert_c = token.cert_customer.encode();
    let cert_m = token.cert_merchant.encode();
    let mut out = Vec::with_capacity(8 + 8 + cert_c.len() + cert_m.len() + id_field.len() + 8);
    out.extend_from_slice(&token.amount.0.to_be_bytes());
    out.extend_from_slice(&(cert_c.len() as u32).to_be_bytes());
    out.extend_from_slice(&cert_c);
    out.extend_from_slice(&(cert_m.len() as u32).to_be_bytes());
    out.extend_from_slice(&cert_m);
    out.extend_from_slice(id_field);
    out.extend_from_slice(&token.timestamp.0.to_be_bytes());
    out
}

/// Inverse of [`encode_with_id`]; the returned token carries a zero id and the
/// raw id field is handed back separately.
pub(super) fn decode_with_id(bytes: &[u8], id_len: usize) -> Result<(Token, &[u8]), TokenError> {
    let mut reader = Reader { bytes, pos: 0 };
    let amount = Amount(u64::from_be_bytes(reader.take(8, "amount")?.try_into().unwrap()));
    let cert_customer = reader.certificate("cert_customer")?;
    let cert_merchant = reader.certificate("cert_merchant")?;
    let id = reader.take(id_len, "token_id")?;
    let timestamp = Timestamp(u64::from_be_bytes(
        reader.take(8, "timestamp")?.try_into().unwrap(),
    ));
    if reader.pos != bytes.len() {
        return Err(TokenError::MalformedBytes(format!(
            "{} trailing bytes",
            bytes.len() - reader.pos
        )));
    }
    let token = Token {
        amount,
        cert_customer,
        cert_merchant,
        token_id: TokenId([0u8; 32]),
        timestamp,
    };
    Ok((token, id))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TokenError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|end| *end <= self.bytes.len())
            .ok_or_else(|| TokenError::MalformedBytes(format!("truncated {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn certificate(&mut self, what: &str) -> Result<Certificate, TokenError> {
        let len = u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()) as usize;
        if len != CERTIFICATE_LEN {
            return Err(TokenError::MalformedBytes(format!("{what} length {len}")));
        }
        let raw = self.take(len, what)?;
        Certificate::decode(raw)
            .ok_or_else(|| TokenError::MalformedBytes(format!("{what} encoding")))
    }
}
