use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use tset_core::ids::EntityId;
use tset_core::token::{
    canonical_deserialize, canonical_serialize, open_token, seal_token, verify_token, Amount, Authority, KeyMaterial,
    SealedToken, Timestamp, Token, TokenId, ENVELOPE_LEN,
};

fn bank() -> KeyMaterial {
    KeyMaterial::generate(&mut ChaCha20Rng::seed_from_u64(77), true)
}

fn token_from(seed: u64, amount: u64, id: [u8; 32], ts: u64) -> Token {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let authority = Authority::generate(&mut rng);
    let c = authority.issue(
        EntityId::customer(rng.gen_range(1..1000)),
        KeyMaterial::generate(&mut rng, false).public_key(),
    );
    let m = authority.issue(
        EntityId::merchant(rng.gen_range(1..1000)),
        KeyMaterial::generate(&mut rng, false).public_key(),
    );
    Token {
        amount: Amount(amount),
        cert_customer: c,
        cert_merchant: m,
        token_id: TokenId(id),
        timestamp: Timestamp(ts),
    }
}

fn arb_token() -> impl Strategy<Value = Token> {
    (any::<u64>(), 1..=u64::MAX, any::<[u8; 32]>(), any::<u64>())
        .prop_map(|(seed, amount, id, ts)| token_from(seed, amount, id, ts))
}

/// Either the envelope no longer opens, or what it opens to differs from the
/// stored copy.
fn caught(sealed: &SealedToken, stored: &Token, keys: &KeyMaterial) -> bool {
    match open_token(sealed, keys) {
        Err(_) => true,
        Ok(opened) => !verify_token(&opened, stored).is_match(),
    }
}

fn flip(sealed: &SealedToken, bit: usize) -> SealedToken {
    let mut bytes = sealed.as_bytes().to_vec();
    bytes[bit / 8] ^= 1 << (bit % 8);
    SealedToken::from_bytes(bytes)
}

#[test]
fn every_single_bit_flip_of_a_fixed_token_is_caught() {
    let keys = bank();
    let t = token_from(1, 15_000, [7; 32], 1_000);
    let sealed = seal_token(&t, &keys, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
    assert_eq!(sealed.as_bytes().len(), ENVELOPE_LEN);
    for bit in 0..ENVELOPE_LEN * 8 {
        assert!(caught(&flip(&sealed, bit), &t, &keys), "bit {bit} slipped through");
    }
}

#[test]
fn random_bit_flips_of_random_tokens_are_caught() {
    let keys = bank();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let t = token_from(rng.gen(), rng.gen_range(1..=u64::MAX), rng.gen(), rng.gen());
        let sealed = seal_token(&t, &keys, &mut rng).unwrap();
        let bit = rng.gen_range(0..ENVELOPE_LEN * 8);
        assert!(caught(&flip(&sealed, bit), &t, &keys), "bit {bit}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seal_then_open_is_identity(t in arb_token(), seed in any::<u64>()) {
        let keys = bank();
        let sealed = seal_token(&t, &keys, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(open_token(&sealed, &keys).unwrap(), t);
    }

    #[test]
    fn canonical_encoding_is_injective(a in arb_token(), b in arb_token()) {
        let (ea, eb) = (canonical_serialize(&a), canonical_serialize(&b));
        prop_assert_eq!(canonical_deserialize(&ea).unwrap(), a.clone());
        prop_assert_eq!(a == b, ea == eb);
    }

    /// Tokens that differ in one field only still encode differently.
    #[test]
    fn single_field_changes_change_the_encoding(t in arb_token(), field in 0usize..3, x in any::<u64>()) {
        let mut u = t.clone();
        match field {
            0 => u.amount = Amount(u.amount.0 ^ (x | 1)),
            1 => u.token_id.0[(x % 32) as usize] ^= 1,
            _ => u.timestamp = Timestamp(u.timestamp.0 ^ (x | 1)),
        }
        prop_assert_ne!(canonical_serialize(&t), canonical_serialize(&u));
    }
}
