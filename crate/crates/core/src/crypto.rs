//! Group arithmetic for the counting protocol: a safe-prime group of
//! quadratic residues, n-of-n key generation with hash commitments,
//! exponential ElGamal (encrypting h^m so addition is ciphertext
//! multiplication), chained partial decryption, and bounded discrete logs.

use std::collections::HashMap;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const TAG_SECOND_GENERATOR: &[u8] = b"hslife/second-generator/v1";
const TAG_KEY_COMMITMENT: &[u8] = b"hslife/key-commitment/v1";

/// 2048-bit MODP safe prime from RFC 3526 group 14.
const P2048_HEX: &str = "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1\
29024E088A67CC74020BBEA63B139B22514A08798E3404DD\
EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245\
E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D\
C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F\
83655D23DCA3AD961C62F356208552BB9ED529077096966D\
670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9\
DE2BCBF6955817183995497CEA956AE515D2261898FA0510\
15728E5A8AACAA68FFFFFFFFFFFFFFFF";

/// Safe-prime group parameters: p = 2q + 1 with two generators of the
/// order-q subgroup QR_p whose relative discrete log nobody knows (h is
/// derived by hashing a fixed tag, then squaring into the subgroup).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupParams {
    #[serde(with = "hexnum")]
    pub p: BigUint,
    #[serde(with = "hexnum")]
    pub q: BigUint,
    #[serde(with = "hexnum")]
    pub g: BigUint,
    #[serde(with = "hexnum")]
    pub h: BigUint,
}

impl GroupParams {
    /// Tiny oracle group for tests: p=23, q=11, g=4, h=9.
    pub fn toy() -> Self {
        GroupParams {
            p: BigUint::from(23u32),
            q: BigUint::from(11u32),
            g: BigUint::from(4u32),
            h: BigUint::from(9u32),
        }
    }

    /// Published 2048-bit group; g = 4 = 2² generates QR_p.
    pub fn mod2048() -> Self {
        let p = BigUint::parse_bytes(P2048_HEX.as_bytes(), 16).expect("constant");
        let q: BigUint = &p >> 1;
        let g = BigUint::from(4u32);
        let h = derive_second_generator(&p);
        GroupParams { p, q, g, h }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "mod2048" => Ok(Self::mod2048()),
            other => Err(Error::Group(format!("unknown group '{other}'"))),
        }
    }

    /// Structural checks: p = 2q + 1, both generators in the order-q
    /// subgroup and distinct. Primality of published constants is not
    /// re-verified here.
    pub fn validate(&self) -> Result<()> {
        let one = BigUint::one();
        if self.p.bits() < 3 || (&self.q << 1) + &one != self.p {
            return Err(Error::Group("p != 2q + 1".into()));
        }
        for (name, x) in [("g", &self.g), ("h", &self.h)] {
            if *x <= one || *x >= self.p {
                return Err(Error::Group(format!("{name} outside (1, p)")));
            }
            if x.modpow(&self.q, &self.p) != one {
                return Err(Error::Group(format!("{name} not of order q")));
            }
        }
        if self.g == self.h {
            return Err(Error::Group("g = h".into()));
        }
        Ok(())
    }

    /// Uniform exponent in [0, q).
    pub fn random_exponent(&self, rng: &mut impl Rng) -> BigUint {
        rng.gen_biguint_below(&self.q)
    }

    pub fn mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.p
    }

    pub fn pow(&self, base: &BigUint, e: &BigUint) -> BigUint {
        base.modpow(e, &self.p)
    }

    /// base^(-e) for base in QR_p, via the subgroup identity base^q = 1.
    pub fn pow_neg(&self, base: &BigUint, e: &BigUint) -> BigUint {
        let e = e % &self.q;
        if e.is_zero() {
            BigUint::one()
        } else {
            base.modpow(&(&self.q - e), &self.p)
        }
    }

    pub fn exp_add(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a + b) % &self.q
    }

    pub fn exp_sub(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a % &self.q + &self.q - b % &self.q) % &self.q
    }
}

/// Deterministic second generator: expand the domain tag to more bits than
/// p, reduce, square into QR_p. No party learns log_g h this way.
fn derive_second_generator(p: &BigUint) -> BigUint {
    let blocks = (p.bits() as usize / 256) + 2;
    let mut bytes = Vec::with_capacity(blocks * 32);
    for i in 0..blocks as u32 {
        let mut hs = Sha256::new();
        hs.update(TAG_SECOND_GENERATOR);
        hs.update(i.to_be_bytes());
        bytes.extend_from_slice(&hs.finalize());
    }
    let x = BigUint::from_bytes_be(&bytes) % p;
    (&x * &x) % p
}

/// Length-prefixed big-endian absorption, so variable-width integers hash
/// unambiguously.
pub(crate) fn absorb_biguint(h: &mut Sha256, x: &BigUint) {
    let bytes = x.to_bytes_be();
    h.update((bytes.len() as u32).to_be_bytes());
    h.update(&bytes);
}

/// One party's key material: secret exponent, public part g^a, and a
/// salted hash commitment published before any public part is revealed.
#[derive(Clone, Debug)]
pub struct KeyShare {
    pub secret: BigUint,
    pub public: BigUint,
    pub salt: [u8; 32],
    pub commitment: [u8; 32],
}

pub fn commit_public(public: &BigUint, salt: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(TAG_KEY_COMMITMENT);
    absorb_biguint(&mut h, public);
    h.update(salt);
    h.finalize().into()
}

pub fn keygen_share(params: &GroupParams, rng: &mut impl Rng) -> KeyShare {
    let secret = params.random_exponent(rng);
    let mut salt = [0u8; 32];
    rng.fill_bytes(&mut salt);
    KeyShare::from_secret(params, secret, salt)
}

impl KeyShare {
    pub fn from_secret(params: &GroupParams, secret: BigUint, salt: [u8; 32]) -> Self {
        let public = params.pow(&params.g, &secret);
        let commitment = commit_public(&public, &salt);
        KeyShare {
            secret,
            public,
            salt,
            commitment,
        }
    }
}

/// Joint public key A = Π A_i, after checking every opening against the
/// commitment published for that party. The first mismatch aborts with the
/// offending party's id.
pub fn combine_pubkeys(
    params: &GroupParams,
    openings: &[(u32, [u8; 32], BigUint, [u8; 32])],
) -> Result<BigUint> {
    let mut joint = BigUint::one();
    for (party, commitment, public, salt) in openings {
        if commit_public(public, salt) != *commitment {
            return Err(Error::CommitmentMismatch { party: *party });
        }
        joint = params.mul(&joint, public);
    }
    Ok(joint)
}

/// Exponential ElGamal ciphertext (g^r, A^r · h^m).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    #[serde(with = "hexnum")]
    pub c1: BigUint,
    #[serde(with = "hexnum")]
    pub c2: BigUint,
}

/// Encrypts m under joint key `pk` with explicit randomness. Messages must
/// stay below the group order or they alias mod q.
pub fn encrypt(params: &GroupParams, pk: &BigUint, m: u64, r: &BigUint) -> Result<Ciphertext> {
    if BigUint::from(m) >= params.q {
        return Err(Error::MessageRange { m });
    }
    let c1 = params.pow(&params.g, r);
    let c2 = params.mul(&params.pow(pk, r), &params.pow(&params.h, &BigUint::from(m)));
    Ok(Ciphertext { c1, c2 })
}

pub fn encrypt_with(
    params: &GroupParams,
    pk: &BigUint,
    m: u64,
    rng: &mut impl Rng,
) -> Result<Ciphertext> {
    let r = params.random_exponent(rng);
    encrypt(params, pk, m, &r)
}

/// Homomorphic addition: componentwise multiplication mod p.
pub fn add(params: &GroupParams, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
    Ciphertext {
        c1: params.mul(&a.c1, &b.c1),
        c2: params.mul(&a.c2, &b.c2),
    }
}

/// Fresh randomness on an existing ciphertext; the plaintext is unchanged.
pub fn reencrypt(params: &GroupParams, pk: &BigUint, c: &Ciphertext, r: &BigUint) -> Ciphertext {
    Ciphertext {
        c1: params.mul(&c.c1, &params.pow(&params.g, r)),
        c2: params.mul(&c.c2, &params.pow(pk, r)),
    }
}

/// One party's decryption step: v_i = v_prev / c1^{a_i}. Seed the chain
/// with v_prev = c2; after all n parties the value is h^m.
pub fn partial_decrypt(
    params: &GroupParams,
    c1: &BigUint,
    v_prev: &BigUint,
    a_i: &BigUint,
) -> BigUint {
    params.mul(v_prev, &params.pow_neg(c1, a_i))
}

/// Full decryption chain to the group element h^m, for tests and oracles.
pub fn decrypt_to_group(params: &GroupParams, secrets: &[BigUint], c: &Ciphertext) -> BigUint {
    let mut v = c.c2.clone();
    for a in secrets {
        v = partial_decrypt(params, &c.c1, &v, a);
    }
    v
}

/// Full decryption to the message, via the baby-step giant-step search.
pub fn decrypt(
    params: &GroupParams,
    secrets: &[BigUint],
    c: &Ciphertext,
    bound: u64,
) -> Result<u64> {
    dlog_bsgs(params, &decrypt_to_group(params, secrets, c), bound)
}

/// Smallest m in [0, bound] with h^m = target, by linear scan.
pub fn dlog_bruteforce(params: &GroupParams, target: &BigUint, bound: u64) -> Result<u64> {
    let mut acc = BigUint::one();
    for m in 0..=bound {
        if acc == *target {
            return Ok(m);
        }
        acc = params.mul(&acc, &params.h);
    }
    Err(Error::DlogNotFound { bound })
}

/// Smallest m in [0, bound] with h^m = target, baby-step giant-step.
/// O(√bound) group operations and table space.
pub fn dlog_bsgs(params: &GroupParams, target: &BigUint, bound: u64) -> Result<u64> {
    let step = (bound as f64).sqrt().ceil() as u64 + 1;
    // Baby table h^j for j < step, keeping the smallest j per value: on a
    // tiny group h^j cycles inside the table range.
    let mut table: HashMap<Vec<u8>, u64> = HashMap::with_capacity(step as usize);
    let mut acc = BigUint::one();
    for j in 0..step {
        table.entry(acc.to_bytes_be()).or_insert(j);
        acc = params.mul(&acc, &params.h);
    }
    let giant = params.pow_neg(&params.h, &BigUint::from(step));
    let mut gamma = target.clone();
    for i in 0..=bound / step {
        if let Some(&j) = table.get(&gamma.to_bytes_be()) {
            let m = i * step + j;
            // Blocks are disjoint and ascending, so the first hit is the
            // smallest solution; if it overshoots, nothing in range exists.
            return if m <= bound {
                Ok(m)
            } else {
                Err(Error::DlogNotFound { bound })
            };
        }
        gamma = params.mul(&gamma, &giant);
    }
    Err(Error::DlogNotFound { bound })
}

/// Default message bound for decryption: the per-day double-count ceiling
/// of 12 placements times the study length.
pub fn default_dlog_bound(duration_days: u32) -> u64 {
    12 * duration_days as u64
}

/// Hex (lowercase, big-endian) serde for BigUint fields.
pub mod hexnum {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &BigUint, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&x.to_str_radix(16))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        BigUint::parse_bytes(s.as_bytes(), 16)
            .ok_or_else(|| serde::de::Error::custom(format!("bad hex integer '{s}'")))
    }
}

/// Same, for vectors of exponents.
pub mod hexnum_vec {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        xs: &[BigUint],
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(xs.iter().map(|x| x.to_str_radix(16)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<BigUint>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.into_iter()
            .map(|s| {
                BigUint::parse_bytes(s.as_bytes(), 16)
                    .ok_or_else(|| serde::de::Error::custom(format!("bad hex integer '{s}'")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn n(x: u32) -> BigUint {
        BigUint::from(x)
    }

    #[test]
    fn both_groups_validate() {
        GroupParams::toy().validate().unwrap();
        let big = GroupParams::mod2048();
        big.validate().unwrap();
        assert_eq!(big.p.bits(), 2048);
        assert!(GroupParams::by_name("nope").is_err());
    }

    #[test]
    fn validation_catches_broken_params() {
        let mut params = GroupParams::toy();
        params.h = n(5); // 5 is not a quadratic residue mod 23
        assert!(params.validate().is_err());
        let mut params = GroupParams::toy();
        params.q = n(10);
        assert!(params.validate().is_err());
        let mut params = GroupParams::toy();
        params.g = params.h.clone();
        assert!(params.validate().is_err());
    }

    // Pinned oracle vectors on p=23, q=11, g=4, h=9.
    #[test]
    fn toy_group_key_and_encryption_vectors() {
        let params = GroupParams::toy();
        let share = KeyShare::from_secret(&params, n(3), [0u8; 32]);
        assert_eq!(share.public, n(18)); // 4^3 = 64 = 18 mod 23

        let openings = vec![
            (1, share.commitment, share.public.clone(), share.salt),
            (
                2,
                commit_public(&n(4), &[1u8; 32]),
                n(4),
                [1u8; 32],
            ),
        ];
        // 18 * 4 = 72 = 3 mod 23
        assert_eq!(combine_pubkeys(&params, &openings).unwrap(), n(3));

        let c = encrypt(&params, &n(18), 2, &n(5)).unwrap();
        assert_eq!((c.c1.clone(), c.c2.clone()), (n(12), n(13)));

        // Single-party chain: 13 / 12^3 = 12 = 9^2 mod 23.
        let v = partial_decrypt(&params, &c.c1, &c.c2, &n(3));
        assert_eq!(v, n(12));
        assert_eq!(dlog_bruteforce(&params, &v, 100).unwrap(), 2);
        assert_eq!(dlog_bsgs(&params, &v, 100).unwrap(), 2);
    }

    #[test]
    fn identity_exponent_and_zero_share() {
        let params = GroupParams::toy();
        let share = KeyShare::from_secret(&params, BigUint::one(), [7u8; 32]);
        assert_eq!(share.public, params.g);
        // a_i = 0 leaves the chain value untouched.
        let v = partial_decrypt(&params, &n(12), &n(13), &BigUint::zero());
        assert_eq!(v, n(13));
    }

    #[test]
    fn tampered_opening_names_party() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let s1 = keygen_share(&params, &mut rng);
        let s2 = keygen_share(&params, &mut rng);
        let mut openings = vec![
            (1, s1.commitment, s1.public.clone(), s1.salt),
            (2, s2.commitment, s2.public.clone(), s2.salt),
        ];
        openings[1].2 = params.mul(&openings[1].2, &params.g);
        match combine_pubkeys(&params, &openings) {
            Err(Error::CommitmentMismatch { party: 2 }) => {}
            other => panic!("expected mismatch for party 2, got {other:?}"),
        }
    }

    #[test]
    fn message_must_stay_below_group_order() {
        let params = GroupParams::toy();
        assert!(encrypt(&params, &n(18), 10, &n(5)).is_ok());
        match encrypt(&params, &n(18), 11, &n(5)) {
            Err(Error::MessageRange { m: 11 }) => {}
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn homomorphic_sum_and_reencryption_roundtrip() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let shares: Vec<KeyShare> = (0..3).map(|_| keygen_share(&params, &mut rng)).collect();
        let openings: Vec<_> = shares
            .iter()
            .enumerate()
            .map(|(i, s)| (i as u32 + 1, s.commitment, s.public.clone(), s.salt))
            .collect();
        let pk = combine_pubkeys(&params, &openings).unwrap();
        let secrets: Vec<BigUint> = shares.iter().map(|s| s.secret.clone()).collect();

        let a = encrypt_with(&params, &pk, 3, &mut rng).unwrap();
        let b = encrypt_with(&params, &pk, 4, &mut rng).unwrap();
        let sum = add(&params, &a, &b);
        assert_eq!(decrypt(&params, &secrets, &sum, 20).unwrap(), 7);

        // Additive identity.
        let zero = encrypt_with(&params, &pk, 0, &mut rng).unwrap();
        let same = add(&params, &a, &zero);
        assert_eq!(decrypt(&params, &secrets, &same, 20).unwrap(), 3);

        // Re-encryption changes the ciphertext, not the plaintext.
        let r = params.random_exponent(&mut rng);
        let re = reencrypt(&params, &pk, &a, &r);
        assert_ne!(re, a);
        assert_eq!(decrypt(&params, &secrets, &re, 20).unwrap(), 3);
    }

    #[test]
    fn chain_order_does_not_matter() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let secrets: Vec<BigUint> =
            (0..3).map(|_| params.random_exponent(&mut rng)).collect();
        let pk = secrets
            .iter()
            .fold(BigUint::one(), |acc, a| params.mul(&acc, &params.pow(&params.g, a)));
        let c = encrypt_with(&params, &pk, 5, &mut rng).unwrap();
        let forward = decrypt_to_group(&params, &secrets, &c);
        let mut rev = secrets.clone();
        rev.reverse();
        assert_eq!(forward, decrypt_to_group(&params, &rev, &c));
    }

    #[test]
    fn dlog_edge_cases() {
        let params = GroupParams::toy();
        assert_eq!(dlog_bruteforce(&params, &BigUint::one(), 0).unwrap(), 0);
        assert_eq!(dlog_bsgs(&params, &BigUint::one(), 0).unwrap(), 0);
        // 9^3 = 729 = 16 mod 23; bound 2 cuts it off.
        let target = params.pow(&params.h, &n(3));
        assert!(matches!(
            dlog_bruteforce(&params, &target, 2),
            Err(Error::DlogNotFound { bound: 2 })
        ));
        assert!(matches!(
            dlog_bsgs(&params, &target, 2),
            Err(Error::DlogNotFound { bound: 2 })
        ));
        // 5 is outside QR_23, unreachable by any h^m.
        assert!(dlog_bsgs(&params, &n(5), 1000).is_err());
    }

    // On the toy group h has order 11, so h^m wraps; both searches must
    // agree on the smallest representative.
    #[test]
    fn bsgs_matches_bruteforce_including_wraps() {
        let params = GroupParams::toy();
        for m in 0..=2000u64 {
            let target = params.pow(&params.h, &BigUint::from(m));
            let a = dlog_bruteforce(&params, &target, 2000).unwrap();
            let b = dlog_bsgs(&params, &target, 2000).unwrap();
            assert_eq!(a, b, "m = {m}");
            assert_eq!(a, m % 11);
        }
    }

    #[test]
    fn big_group_roundtrip_spot_checks() {
        let params = GroupParams::mod2048();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let shares: Vec<KeyShare> = (0..3).map(|_| keygen_share(&params, &mut rng)).collect();
        let pk = shares
            .iter()
            .fold(BigUint::one(), |acc, s| params.mul(&acc, &s.public));
        let secrets: Vec<BigUint> = shares.iter().map(|s| s.secret.clone()).collect();
        for m in [0u64, 1, 97, 2159] {
            let c = encrypt_with(&params, &pk, m, &mut rng).unwrap();
            assert_eq!(decrypt(&params, &secrets, &c, 2200).unwrap(), m);
        }
    }

    #[test]
    fn ciphertext_hex_serde_roundtrip() {
        let params = GroupParams::mod2048();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pk = params.pow(&params.g, &params.random_exponent(&mut rng));
        let c = encrypt_with(&params, &pk, 5, &mut rng).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: Ciphertext = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);

        let pjson = serde_json::to_string(&params).unwrap();
        let pback: GroupParams = serde_json::from_str(&pjson).unwrap();
        assert_eq!(pback, params);
    }
}
