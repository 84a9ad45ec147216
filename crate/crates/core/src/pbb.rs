//! Public bulletin board: an append-only, hash-chained log of protocol
//! messages. Every entry binds its sequence number, author, phase, and
//! canonical payload bytes to the previous entry's hash, so any reader can
//! verify that nothing was inserted, dropped, or rewritten.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const TAG_ENTRY: &[u8] = b"hslife/pbb-entry/v1";

pub type PartyId = u32;

/// Protocol phases in on-chain order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    KeygenCommit,
    KeygenOpen,
    DcCommit,
    DcOpen,
    Aggregate,
    Shuffle,
    DecryptPartial,
    Result,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::KeygenCommit => "keygen-commit",
            Phase::KeygenOpen => "keygen-open",
            Phase::DcCommit => "dc-commit",
            Phase::DcOpen => "dc-open",
            Phase::Aggregate => "aggregate",
            Phase::Shuffle => "shuffle",
            Phase::DecryptPartial => "decrypt-partial",
            Phase::Result => "result",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PbbEntry {
    pub seq: u64,
    pub party: PartyId,
    pub phase: Phase,
    pub payload: serde_json::Value,
    /// Hex of the previous entry's hash; all zeros for the first entry.
    pub prev_hash: String,
    pub entry_hash: String,
}

/// Canonical payload bytes: serde_json with sorted object keys (the
/// default Value map is ordered), no whitespace.
fn payload_bytes(payload: &serde_json::Value) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(payload)?)
}

fn hash_entry(
    seq: u64,
    party: PartyId,
    phase: Phase,
    payload: &[u8],
    prev: &[u8; 32],
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(TAG_ENTRY);
    h.update(seq.to_be_bytes());
    h.update(party.to_be_bytes());
    let name = phase.as_str().as_bytes();
    h.update((name.len() as u32).to_be_bytes());
    h.update(name);
    h.update((payload.len() as u64).to_be_bytes());
    h.update(payload);
    h.update(prev);
    h.finalize().into()
}

fn decode_hash(hex_str: &str, seq: u64) -> Result<[u8; 32]> {
    let bytes = hex::decode(hex_str).map_err(|_| Error::ChainBroken {
        seq,
        reason: "hash field is not hex".into(),
    })?;
    bytes.try_into().map_err(|_| Error::ChainBroken {
        seq,
        reason: "hash field is not 32 bytes".into(),
    })
}

/// The board itself. Appends are serialized through `&mut self`; the chain
/// can be dumped to and reloaded from a JSON-lines file.
#[derive(Clone, Debug, Default)]
pub struct Bulletin {
    entries: Vec<PbbEntry>,
}

impl Bulletin {
    pub fn new() -> Self {
        Bulletin::default()
    }

    pub fn entries(&self) -> &[PbbEntry] {
        &self.entries
    }

    pub fn entries_in(&self, phase: Phase) -> impl Iterator<Item = &PbbEntry> {
        self.entries.iter().filter(move |e| e.phase == phase)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn append(
        &mut self,
        party: PartyId,
        phase: Phase,
        payload: serde_json::Value,
    ) -> Result<&PbbEntry> {
        let seq = self.entries.len() as u64;
        let prev = match self.entries.last() {
            Some(e) => decode_hash(&e.entry_hash, seq)?,
            None => [0u8; 32],
        };
        let bytes = payload_bytes(&payload)?;
        let hash = hash_entry(seq, party, phase, &bytes, &prev);
        self.entries.push(PbbEntry {
            seq,
            party,
            phase,
            payload,
            prev_hash: hex::encode(prev),
            entry_hash: hex::encode(hash),
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Recomputes every hash and link. Errors name the first bad entry.
    pub fn verify_chain(&self) -> Result<()> {
        let mut prev = [0u8; 32];
        for (i, e) in self.entries.iter().enumerate() {
            if e.seq != i as u64 {
                return Err(Error::ChainBroken {
                    seq: e.seq,
                    reason: format!("sequence gap: entry {i} claims seq {}", e.seq),
                });
            }
            if decode_hash(&e.prev_hash, e.seq)? != prev {
                return Err(Error::ChainBroken {
                    seq: e.seq,
                    reason: "prev_hash does not match preceding entry".into(),
                });
            }
            let bytes = payload_bytes(&e.payload)?;
            let want = hash_entry(e.seq, e.party, e.phase, &bytes, &prev);
            if decode_hash(&e.entry_hash, e.seq)? != want {
                return Err(Error::ChainBroken {
                    seq: e.seq,
                    reason: "entry_hash does not recompute".into(),
                });
            }
            prev = want;
        }
        Ok(())
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Parses a JSON-lines dump. Call `verify_chain` to authenticate it.
    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(Bulletin { entries })
    }
}
