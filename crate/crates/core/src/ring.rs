//! Distributed-directory ring model: descriptor-id derivation and
//! responsible-relay lookup.
//!
//! Descriptor ids are derived per replica as
//! `SHA1(identifier || SHA1(time-period || [cookie] || replica))`, with the
//! time-period as a 4-byte big-endian integer and the replica index as a
//! single byte. A descriptor is stored on the three consecutive ring
//! positions starting at the first fingerprint strictly greater than the
//! descriptor id, wrapping past the top of the ring.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};

/// Truncated service identifier length (80 bits).
pub const IDENTIFIER_LEN: usize = 10;
/// SHA-1 output length, shared by fingerprints and descriptor ids.
pub const DIGEST_LEN: usize = 20;
/// Optional descriptor cookie length (128 bits).
pub const COOKIE_LEN: usize = 16;
/// Replicas stored per descriptor per period.
pub const REPLICAS: usize = 2;
/// Relays responsible for one descriptor id.
pub const WINDOW: usize = 3;

const SECONDS_PER_DAY: u64 = 86_400;

/// Hex-string serde for fixed-size byte newtypes.
macro_rules! hex_serde {
    ($type:ident, $len:expr) => {
        impl Serialize for $type {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }

        impl<'de> Deserialize<'de> for $type {
            fn deserialize<D: serde::Deserializer<'de>>(
                d: D,
            ) -> std::result::Result<Self, D::Error> {
                let text = String::deserialize(d)?;
                let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
                let arr: [u8; $len] = bytes.try_into().map_err(|_| {
                    serde::de::Error::custom(concat!(
                        "expected ",
                        stringify!($len),
                        " bytes of hex"
                    ))
                })?;
                Ok($type(arr))
            }
        }
    };
}

/// 80-bit onion service identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OnionIdentifier(pub [u8; IDENTIFIER_LEN]);

hex_serde!(OnionIdentifier, IDENTIFIER_LEN);

impl OnionIdentifier {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut b = [0u8; IDENTIFIER_LEN];
        rng.fill_bytes(&mut b);
        OnionIdentifier(b)
    }

    pub fn as_bytes(&self) -> &[u8; IDENTIFIER_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for OnionIdentifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "OnionIdentifier({})", hex::encode(self.0))
    }
}

/// 160-bit descriptor id; ordering is big-endian numeric, which matches
/// lexicographic order on the raw bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DescriptorId(pub [u8; DIGEST_LEN]);

impl DescriptorId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Debug for DescriptorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DescriptorId({})", self.to_hex())
    }
}

/// 160-bit relay fingerprint, the ring coordinate.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fingerprint(pub [u8; DIGEST_LEN]);

hex_serde!(Fingerprint, DIGEST_LEN);

impl std::fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fingerprint({})", hex::encode(self.0))
    }
}

/// Optional 128-bit descriptor cookie mixed into the secret id part.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct DescriptorCookie(pub [u8; COOKIE_LEN]);

hex_serde!(DescriptorCookie, COOKIE_LEN);

impl DescriptorCookie {
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; COOKIE_LEN] = bytes
            .try_into()
            .map_err(|_| Error::CookieLength(bytes.len()))?;
        Ok(DescriptorCookie(arr))
    }
}

impl std::fmt::Debug for DescriptorCookie {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DescriptorCookie({})", hex::encode(self.0))
    }
}

pub type RelayId = u32;

/// Time-period for a service at `current_time` seconds. The permanent-id
/// byte staggers each service's rotation boundary across the day; the
/// product is taken before the divisions, all integer arithmetic.
pub fn time_period(current_time: u64, permanent_id_byte: u8) -> u64 {
    (permanent_id_byte as u64 * SECONDS_PER_DAY / 256 + current_time) / SECONDS_PER_DAY
}

/// Secret id part: `SHA1(time-period_4B_BE || [cookie] || replica_1B)`.
/// Only the low 32 bits of the period enter the hash, per the fixed layout.
pub fn secret_id_part(
    period: u64,
    cookie: Option<&DescriptorCookie>,
    replica: u8,
) -> [u8; DIGEST_LEN] {
    let mut h = Sha1::new();
    h.update((period as u32).to_be_bytes());
    if let Some(c) = cookie {
        h.update(c.0);
    }
    h.update([replica]);
    h.finalize().into()
}

/// Descriptor id for one replica: `SHA1(identifier || secret-id-part)`.
pub fn descriptor_id(identifier: &OnionIdentifier, sip: &[u8; DIGEST_LEN]) -> DescriptorId {
    let mut h = Sha1::new();
    h.update(identifier.0);
    h.update(sip);
    DescriptorId(h.finalize().into())
}

/// Both replica descriptor ids for a service at one time-period.
pub fn descriptor_ids(
    identifier: &OnionIdentifier,
    cookie: Option<&DescriptorCookie>,
    period: u64,
) -> [DescriptorId; REPLICAS] {
    let d0 = descriptor_id(identifier, &secret_id_part(period, cookie, 0));
    let d1 = descriptor_id(identifier, &secret_id_part(period, cookie, 1));
    [d0, d1]
}

/// A snapshot of the directory ring: relays sorted by fingerprint, with a
/// designated controlled subset whose observations the measurement sees.
/// Deserialization goes through `Ring::new`, so loaded rings carry the
/// same structural guarantees as constructed ones.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RingRepr", into = "RingRepr")]
pub struct Ring {
    fingerprints: Vec<Fingerprint>,
    relay_ids: Vec<RelayId>,
    controlled_at: Vec<bool>,
    controlled: BTreeSet<RelayId>,
}

#[derive(Serialize, Deserialize)]
struct RingRepr {
    relays: Vec<(RelayId, Fingerprint)>,
    controlled: Vec<RelayId>,
}

impl From<Ring> for RingRepr {
    fn from(r: Ring) -> Self {
        RingRepr {
            relays: r
                .relay_ids
                .iter()
                .copied()
                .zip(r.fingerprints.iter().copied())
                .collect(),
            controlled: r.controlled.iter().copied().collect(),
        }
    }
}

impl TryFrom<RingRepr> for Ring {
    type Error = Error;

    fn try_from(repr: RingRepr) -> Result<Self> {
        Ring::new(repr.relays, repr.controlled.into_iter().collect())
    }
}

impl Ring {
    /// Builds a ring from (relay id, fingerprint) pairs. Fingerprints and
    /// relay ids must be distinct and the controlled set a subset of the
    /// relay ids; fewer than three relays cannot host a descriptor.
    pub fn new(
        relays: Vec<(RelayId, Fingerprint)>,
        controlled: BTreeSet<RelayId>,
    ) -> Result<Self> {
        if relays.len() < WINDOW {
            return Err(Error::Ring(format!(
                "need at least {WINDOW} relays, got {}",
                relays.len()
            )));
        }
        let mut sorted = relays;
        sorted.sort_by(|a, b| a.1.cmp(&b.1));
        for w in sorted.windows(2) {
            if w[0].1 == w[1].1 {
                return Err(Error::Ring("duplicate fingerprint".into()));
            }
        }
        let mut ids_seen = BTreeSet::new();
        for (id, _) in &sorted {
            if !ids_seen.insert(*id) {
                return Err(Error::Ring(format!("duplicate relay id {id}")));
            }
        }
        for id in &controlled {
            if !ids_seen.contains(id) {
                return Err(Error::Ring(format!("controlled relay {id} not in ring")));
            }
        }
        let fingerprints = sorted.iter().map(|r| r.1).collect();
        let relay_ids: Vec<RelayId> = sorted.iter().map(|r| r.0).collect();
        let controlled_at = relay_ids.iter().map(|id| controlled.contains(id)).collect();
        Ok(Ring {
            fingerprints,
            relay_ids,
            controlled_at,
            controlled,
        })
    }

    /// Random ring: uniform fingerprints, relay ids `0..n_relays`, and a
    /// uniformly chosen controlled subset.
    pub fn random(n_relays: u32, n_controlled: u32, rng: &mut impl Rng) -> Result<Self> {
        if n_controlled > n_relays {
            return Err(Error::Ring(format!(
                "{n_controlled} controlled relays exceed ring size {n_relays}"
            )));
        }
        loop {
            let relays: Vec<(RelayId, Fingerprint)> = (0..n_relays)
                .map(|id| {
                    let mut fp = [0u8; DIGEST_LEN];
                    rng.fill_bytes(&mut fp);
                    (id, Fingerprint(fp))
                })
                .collect();
            let picks =
                rand::seq::index::sample(rng, n_relays as usize, n_controlled as usize);
            let controlled: BTreeSet<RelayId> = picks.iter().map(|i| i as RelayId).collect();
            match Ring::new(relays, controlled) {
                Ok(ring) => return Ok(ring),
                // Fingerprint collision: astronomically unlikely, redraw.
                Err(Error::Ring(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn len(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fingerprints.is_empty()
    }

    pub fn controlled_count(&self) -> usize {
        self.controlled.len()
    }

    pub fn controlled_ids(&self) -> &BTreeSet<RelayId> {
        &self.controlled
    }

    pub fn is_controlled(&self, id: RelayId) -> bool {
        self.controlled.contains(&id)
    }

    /// Ring position of the first relay whose fingerprint is strictly
    /// greater than `d`, wrapping to position 0 past the largest.
    fn successor(&self, d: &DescriptorId) -> usize {
        let i = self.fingerprints.partition_point(|fp| fp.0 <= d.0);
        if i == self.fingerprints.len() {
            0
        } else {
            i
        }
    }

    /// The three relays responsible for descriptor id `d`, in ring order.
    pub fn responsible(&self, d: &DescriptorId) -> [RelayId; WINDOW] {
        let n = self.len();
        let start = self.successor(d);
        [
            self.relay_ids[start],
            self.relay_ids[(start + 1) % n],
            self.relay_ids[(start + 2) % n],
        ]
    }

    /// Controlled relays among the three responsible for `d`, without
    /// allocation: returns the hits and how many are valid.
    pub fn controlled_responsible(&self, d: &DescriptorId) -> ([RelayId; WINDOW], usize) {
        let n = self.len();
        let start = self.successor(d);
        let mut out = [0 as RelayId; WINDOW];
        let mut k = 0;
        for step in 0..WINDOW {
            let pos = (start + step) % n;
            if self.controlled_at[pos] {
                out[k] = self.relay_ids[pos];
                k += 1;
            }
        }
        (out, k)
    }
}
