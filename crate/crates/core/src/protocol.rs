//! Multi-party count aggregation. Data Collectors keep one encrypted
//! counter per observed service hash; Tally Key Servers hold additive key
//! shares, aggregate the counters homomorphically, unlink them from the
//! hashes with verified shuffles, and decrypt jointly. Every protocol
//! message goes through the hash-chained bulletin board, and any
//! verification failure aborts the run before decryption can start.

use std::collections::{BTreeMap, HashMap};

use num_bigint::BigUint;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::crypto::{
    self, absorb_biguint, combine_pubkeys, encrypt_with, keygen_share, partial_decrypt,
    Ciphertext, GroupParams, KeyShare,
};
use crate::error::{Error, Result};
use crate::estimate::{weighted_extrapolate, CountPmfTable, Histogram};
use crate::pbb::{Bulletin, PartyId, Phase};
use crate::ring::{OnionIdentifier, RelayId, Ring};
use crate::shuffle::{prove, shuffle, verify, ShuffleTranscript, DEFAULT_PROOF_ROUNDS};
use crate::sim::{for_each_controlled_upload, HiddenService, StudyConfig};
use crate::{derive_rng, Error::Abort};

const TAG_ONION: &[u8] = b"hslife/onion-hash/v1";
const TAG_LEDGER: &[u8] = b"hslife/ledger-digest/v1";

/// 256-bit hash standing in for a service's address on collector ledgers.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OnionHash(pub [u8; 32]);

impl OnionHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s)
            .ok()
            .and_then(|b| <[u8; 32]>::try_from(b).ok())
            .ok_or_else(|| Error::Config(format!("bad onion hash '{s}'")))?;
        Ok(OnionHash(bytes))
    }
}

impl std::fmt::Debug for OnionHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "OnionHash({})", self.to_hex())
    }
}

pub fn onion_hash(id: &OnionIdentifier) -> OnionHash {
    let mut h = Sha256::new();
    h.update(TAG_ONION);
    h.update(id.as_bytes());
    OnionHash(h.finalize().into())
}

/// One collector's encrypted counters, keyed and ordered by service hash.
#[derive(Clone, Debug, Default)]
pub struct CountLedger {
    pub entries: BTreeMap<OnionHash, Ciphertext>,
}

impl CountLedger {
    /// Folds a fresh encryption of 1 into the counter for `hash`.
    pub fn observe(
        &mut self,
        params: &GroupParams,
        pk: &BigUint,
        hash: OnionHash,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.observe_value(params, pk, hash, 1, rng)
    }

    /// Same, with a chosen increment; 0 is the zero-reporting cheat.
    pub fn observe_value(
        &mut self,
        params: &GroupParams,
        pk: &BigUint,
        hash: OnionHash,
        value: u64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let fresh = encrypt_with(params, pk, value, rng)?;
        match self.entries.remove(&hash) {
            Some(existing) => {
                self.entries.insert(hash, crypto::add(params, &existing, &fresh));
            }
            None => {
                self.entries.insert(hash, fresh);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Commitment digest over the canonical entry encoding.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(TAG_LEDGER);
        h.update((self.entries.len() as u64).to_be_bytes());
        for (hash, ct) in &self.entries {
            h.update(hash.0);
            absorb_biguint(&mut h, &ct.c1);
            absorb_biguint(&mut h, &ct.c2);
        }
        h.finalize().into()
    }

    pub fn to_payload(&self) -> Value {
        let entries: Vec<Value> = self
            .entries
            .iter()
            .map(|(hash, ct)| {
                json!([hash.to_hex(), ct.c1.to_str_radix(16), ct.c2.to_str_radix(16)])
            })
            .collect();
        json!({ "entries": entries })
    }

    pub fn from_payload(params: &GroupParams, v: &Value) -> Result<Self> {
        let rows = v
            .get("entries")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Config("ledger payload missing entries".into()))?;
        let mut entries = BTreeMap::new();
        for row in rows {
            let fields = row
                .as_array()
                .filter(|a| a.len() == 3)
                .ok_or_else(|| Error::Config("ledger row is not a triple".into()))?;
            let text = |i: usize| -> Result<&str> {
                fields[i]
                    .as_str()
                    .ok_or_else(|| Error::Config("ledger field is not a string".into()))
            };
            let hash = OnionHash::from_hex(text(0)?)?;
            let parse = |s: &str| -> Result<BigUint> {
                BigUint::parse_bytes(s.as_bytes(), 16)
                    .ok_or_else(|| Error::Config(format!("bad hex integer '{s}'")))
            };
            let c1 = parse(text(1)?)?;
            let c2 = parse(text(2)?)?;
            if c1.bits() == 0 || c2.bits() == 0 || c1 >= params.p || c2 >= params.p {
                return Err(Error::Config("ledger ciphertext outside the group".into()));
            }
            if entries.insert(hash, Ciphertext { c1, c2 }).is_some() {
                return Err(Error::Config("duplicate ledger hash".into()));
            }
        }
        Ok(CountLedger { entries })
    }
}

/// Knobs for one protocol run. All n parties participate in decryption
/// (k = n); the proof round count trades prover time for soundness.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub n_parties: u32,
    pub dcs_per_party: u32,
    pub proof_rounds: u32,
    /// Search ceiling for the final discrete logs; counts above it are
    /// flagged instead of decrypted.
    pub dlog_bound: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_parties: 3,
            dcs_per_party: 1,
            proof_rounds: DEFAULT_PROOF_ROUNDS,
            dlog_bound: crypto::default_dlog_bound(180),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_parties == 0 || self.dcs_per_party == 0 {
            return Err(Error::Config("need at least one party and one DC".into()));
        }
        if self.proof_rounds == 0 {
            return Err(Error::Config("need at least one proof round".into()));
        }
        Ok(())
    }
}

/// Scripted misbehavior for tests and demos.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheatMode {
    Honest,
    /// The party's DCs publish encryptions of 0 instead of 1.
    ZeroCounts(PartyId),
    /// The party alters one ciphertext between ledger commit and open.
    TamperOpening(PartyId),
    /// The party publishes a shuffle output its proof does not cover.
    TamperShuffle(PartyId),
}

impl CheatMode {
    pub fn parse(s: &str) -> Result<Self> {
        let (party, kind) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("cheat spec '{s}' is not PARTY=KIND")))?;
        let party: PartyId = party
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad party id in '{s}'")))?;
        match kind.trim() {
            "zeros" => Ok(CheatMode::ZeroCounts(party)),
            "tamper-open" => Ok(CheatMode::TamperOpening(party)),
            "tamper-shuffle" => Ok(CheatMode::TamperShuffle(party)),
            other => Err(Error::Config(format!("unknown cheat kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RunPhase {
    Keygen,
    Collect,
    Aggregate,
    Shuffle,
    Decrypt,
    Done,
}

impl RunPhase {
    fn name(self) -> &'static str {
        match self {
            RunPhase::Keygen => "keygen",
            RunPhase::Collect => "collect",
            RunPhase::Aggregate => "aggregate",
            RunPhase::Shuffle => "shuffle",
            RunPhase::Decrypt => "decrypt",
            RunPhase::Done => "done",
        }
    }
}

struct DcState {
    relays: Vec<RelayId>,
    ledger: CountLedger,
}

struct PartyState {
    id: PartyId,
    share: Option<KeyShare>,
    dcs: Vec<DcState>,
}

/// Everything the run decrypted, with indices into the final shuffled list.
#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    /// Recovered counts (flagged indices excluded).
    pub counts: Vec<u64>,
    /// Final-list indices whose discrete log exceeded the bound.
    pub flagged: Vec<usize>,
    /// Raw histogram over the recovered counts.
    pub histogram: Histogram,
}

/// Raw count buckets, or likelihood-weighted lifespan attribution when a
/// pmf table is supplied.
pub fn build_histogram(counts: &[u64], table: Option<&CountPmfTable>) -> Histogram {
    match table {
        None => Histogram::from_values(counts.iter().copied()),
        Some(t) => weighted_extrapolate(counts, t),
    }
}

/// The protocol state machine. Phases must be driven in order; calling a
/// step out of order is rejected rather than silently reordered.
pub struct ProtocolRun {
    params: GroupParams,
    cfg: ProtocolConfig,
    cheat: CheatMode,
    rng: ChaCha20Rng,
    pub pbb: Bulletin,
    phase: RunPhase,
    parties: Vec<PartyState>,
    joint_key: Option<BigUint>,
    aggregate: Vec<(OnionHash, Ciphertext)>,
    final_list: Vec<Ciphertext>,
    party_true: BTreeMap<PartyId, Vec<u64>>,
    party_reported: BTreeMap<PartyId, Vec<u64>>,
}

impl ProtocolRun {
    pub fn new(
        params: GroupParams,
        cfg: ProtocolConfig,
        seed: u64,
        cheat: CheatMode,
    ) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        // Counters live in the exponent, which only distinguishes values
        // below the group order; a larger search bound would let counts
        // wrap silently instead of being flagged.
        if BigUint::from(cfg.dlog_bound) >= params.q {
            return Err(Error::Config(format!(
                "dlog bound {} is not below the group order; counts past the \
                 order would wrap",
                cfg.dlog_bound
            )));
        }
        let parties = (1..=cfg.n_parties)
            .map(|id| PartyState {
                id,
                share: None,
                dcs: Vec::new(),
            })
            .collect();
        Ok(ProtocolRun {
            params,
            cfg,
            cheat,
            rng: derive_rng(seed, "protocol"),
            pbb: Bulletin::new(),
            phase: RunPhase::Keygen,
            parties,
            joint_key: None,
            aggregate: Vec::new(),
            final_list: Vec::new(),
            party_true: BTreeMap::new(),
            party_reported: BTreeMap::new(),
        })
    }

    fn expect_phase(&self, want: RunPhase) -> Result<()> {
        if self.phase != want {
            return Err(Error::OutOfPhase {
                expected: self.phase.name().into(),
                got: want.name().into(),
            });
        }
        Ok(())
    }

    pub fn joint_key(&self) -> Option<&BigUint> {
        self.joint_key.as_ref()
    }

    /// Per-service counts each party actually observed.
    pub fn party_true_counts(&self) -> &BTreeMap<PartyId, Vec<u64>> {
        &self.party_true
    }

    /// Per-service counts each party effectively reported (differs from
    /// the true counts only under a cheat mode).
    pub fn party_reported_counts(&self) -> &BTreeMap<PartyId, Vec<u64>> {
        &self.party_reported
    }

    /// Relays watched by each party, over all of its DCs.
    pub fn party_relays(&self) -> BTreeMap<PartyId, Vec<RelayId>> {
        self.parties
            .iter()
            .map(|p| {
                let relays = p
                    .dcs
                    .iter()
                    .flat_map(|dc| dc.relays.iter().copied())
                    .collect();
                (p.id, relays)
            })
            .collect()
    }

    /// n-of-n key generation: every party commits to its public share on
    /// the board before any share is opened, then openings are checked
    /// against the commitments and multiplied into the joint key.
    pub fn keygen(&mut self) -> Result<()> {
        self.expect_phase(RunPhase::Keygen)?;
        for p in &mut self.parties {
            p.share = Some(keygen_share(&self.params, &mut self.rng));
        }
        for p in &self.parties {
            let share = p.share.as_ref().expect("just generated");
            self.pbb.append(
                p.id,
                Phase::KeygenCommit,
                json!({ "commitment": hex::encode(share.commitment) }),
            )?;
        }
        for p in &self.parties {
            let share = p.share.as_ref().expect("just generated");
            self.pbb.append(
                p.id,
                Phase::KeygenOpen,
                json!({
                    "public": share.public.to_str_radix(16),
                    "salt": hex::encode(share.salt),
                }),
            )?;
        }
        // Reconstruct openings from the board, the way a verifier would.
        let commits: BTreeMap<PartyId, [u8; 32]> = self
            .pbb
            .entries_in(Phase::KeygenCommit)
            .map(|e| {
                let c = e.payload["commitment"].as_str().unwrap_or_default();
                let bytes: [u8; 32] = hex::decode(c)
                    .ok()
                    .and_then(|b| b.try_into().ok())
                    .unwrap_or_default();
                (e.party, bytes)
            })
            .collect();
        let mut openings = Vec::new();
        for e in self.pbb.entries_in(Phase::KeygenOpen) {
            let public = e.payload["public"]
                .as_str()
                .and_then(|s| BigUint::parse_bytes(s.as_bytes(), 16))
                .ok_or_else(|| Error::Config("bad keygen opening".into()))?;
            let salt: [u8; 32] = e.payload["salt"]
                .as_str()
                .and_then(|s| hex::decode(s).ok())
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| Error::Config("bad keygen salt".into()))?;
            let commitment = *commits.get(&e.party).ok_or(Error::Abort {
                phase: "keygen".into(),
                reason: format!("party {} opened without committing", e.party),
            })?;
            openings.push((e.party, commitment, public, salt));
        }
        self.joint_key = Some(combine_pubkeys(&self.params, &openings)?);
        self.phase = RunPhase::Collect;
        Ok(())
    }

    /// Gives each DC its slot from the shared round-robin assignment.
    fn assign_relays(&mut self, ring: &Ring) {
        let mut slot =
            assign_relay_slots(ring, self.cfg.n_parties, self.cfg.dcs_per_party).into_iter();
        for p in &mut self.parties {
            p.dcs = (0..self.cfg.dcs_per_party)
                .map(|_| DcState {
                    relays: slot.next().expect("slot count matches"),
                    ledger: CountLedger::default(),
                })
                .collect();
        }
    }

    /// Replays the population day by day. Each day is one epoch: every DC
    /// folds its observations into encrypted counters, then commits and
    /// opens its ledger snapshot on the board. Only the encrypted ledgers
    /// survive an epoch; the per-day plaintext observations are dropped on
    /// publish.
    pub fn collect(
        &mut self,
        population: &[HiddenService],
        ring: &Ring,
        duration: u32,
        count_next_period: bool,
    ) -> Result<()> {
        self.expect_phase(RunPhase::Collect)?;
        let pk = self.joint_key.clone().expect("keygen ran");
        self.assign_relays(ring);

        let mut relay_owner: HashMap<RelayId, (usize, usize)> = HashMap::new();
        for (pi, p) in self.parties.iter().enumerate() {
            for (di, dc) in p.dcs.iter().enumerate() {
                for &r in &dc.relays {
                    relay_owner.insert(r, (pi, di));
                }
            }
        }
        for p in &self.parties {
            self.party_true.insert(p.id, vec![0; population.len()]);
            self.party_reported.insert(p.id, vec![0; population.len()]);
        }
        let hashes: Vec<OnionHash> =
            population.iter().map(|s| onion_hash(&s.identifier)).collect();

        let mut events_by_day: Vec<Vec<(usize, RelayId)>> =
            vec![Vec::new(); duration as usize];
        for_each_controlled_upload(population, ring, duration, count_next_period, |day, svc, relay| {
            events_by_day[day as usize].push((svc, relay));
        });

        for (day, events) in events_by_day.iter().enumerate() {
            for &(svc, relay) in events {
                let (pi, di) = relay_owner[&relay];
                let id = self.parties[pi].id;
                self.party_true.get_mut(&id).expect("inserted")[svc] += 1;
                let value = match self.cheat {
                    CheatMode::ZeroCounts(p) if p == id => 0,
                    _ => 1,
                };
                self.party_reported.get_mut(&id).expect("inserted")[svc] += value;
                self.parties[pi].dcs[di].ledger.observe_value(
                    &self.params,
                    &pk,
                    hashes[svc],
                    value,
                    &mut self.rng,
                )?;
            }
            self.publish_epoch(day as u32)?;
        }
        self.phase = RunPhase::Aggregate;
        Ok(())
    }

    /// Epoch-end publication: all DCs commit their ledger digests, then all
    /// open. A tamper-opening cheater mutates one counter after committing.
    fn publish_epoch(&mut self, epoch: u32) -> Result<()> {
        for p in &self.parties {
            for (di, dc) in p.dcs.iter().enumerate() {
                self.pbb.append(
                    p.id,
                    Phase::DcCommit,
                    json!({
                        "epoch": epoch,
                        "dc": di,
                        "digest": hex::encode(dc.ledger.digest()),
                    }),
                )?;
            }
        }
        let cheat = self.cheat;
        let params = self.params.clone();
        for p in &mut self.parties {
            for (di, dc) in p.dcs.iter_mut().enumerate() {
                let mut opened = dc.ledger.to_payload();
                if let CheatMode::TamperOpening(cheater) = cheat {
                    if cheater == p.id && di == 0 {
                        if let Some(Value::Array(row)) = opened["entries"].get_mut(0) {
                            // Bump c2 by one factor of h: decrypts one high.
                            let c2 = BigUint::parse_bytes(
                                row[2].as_str().unwrap_or_default().as_bytes(),
                                16,
                            )
                            .unwrap_or_default();
                            row[2] = Value::String(
                                params.mul(&c2, &params.h).to_str_radix(16),
                            );
                        }
                    }
                }
                self.pbb.append(
                    p.id,
                    Phase::DcOpen,
                    json!({ "epoch": epoch, "dc": di, "entries": opened["entries"] }),
                )?;
            }
        }
        Ok(())
    }

    /// Every TKS recomputes the homomorphic per-hash sums from the board
    /// and the results must agree; the first TKS publishes the shared
    /// aggregate.
    pub fn aggregate(&mut self) -> Result<&[(OnionHash, Ciphertext)]> {
        self.expect_phase(RunPhase::Aggregate)?;
        let mut agreed: Option<Vec<(OnionHash, Ciphertext)>> = None;
        for p in &self.parties {
            let mine = tks_aggregate(&self.params, &self.pbb)?;
            match &agreed {
                None => agreed = Some(mine),
                Some(first) if *first == mine => {}
                Some(_) => {
                    return Err(Abort {
                        phase: "aggregate".into(),
                        reason: format!("party {} computed a different aggregate", p.id),
                    })
                }
            }
        }
        let agg = agreed.unwrap_or_default();
        let rows: Vec<Value> = agg
            .iter()
            .map(|(hash, ct)| {
                json!([hash.to_hex(), ct.c1.to_str_radix(16), ct.c2.to_str_radix(16)])
            })
            .collect();
        self.pbb
            .append(1, Phase::Aggregate, json!({ "aggregate": rows }))?;
        self.aggregate = agg;
        self.phase = RunPhase::Shuffle;
        Ok(&self.aggregate)
    }

    /// Sequential verified shuffles in ascending party order. The hash
    /// column is dropped here; from this point ciphertext position carries
    /// no service identity. One bad transcript aborts the whole run.
    pub fn shuffle_all(&mut self) -> Result<()> {
        self.expect_phase(RunPhase::Shuffle)?;
        let pk = self.joint_key.clone().expect("keygen ran");
        let mut current: Vec<Ciphertext> =
            self.aggregate.iter().map(|(_, ct)| ct.clone()).collect();
        let mut staged: Vec<(PartyId, Vec<Ciphertext>, Vec<Ciphertext>, ShuffleTranscript)> =
            Vec::new();
        for pi in 0..self.parties.len() {
            let id = self.parties[pi].id;
            let (mut output, witness) = shuffle(&self.params, &pk, &current, &mut self.rng);
            let transcript = prove(
                &self.params,
                &pk,
                &current,
                &output,
                &witness,
                self.cfg.proof_rounds,
                &mut self.rng,
            )?;
            if self.cheat == CheatMode::TamperShuffle(id) {
                if let Some(first) = output.first_mut() {
                    // Swap in a counter for a plaintext of the cheater's
                    // choosing; the proof no longer covers the output.
                    *first = encrypt_with(&self.params, &pk, 0, &mut self.rng)?;
                }
            }
            self.pbb.append(
                id,
                Phase::Shuffle,
                json!({
                    "output": output
                        .iter()
                        .map(|c| json!([c.c1.to_str_radix(16), c.c2.to_str_radix(16)]))
                        .collect::<Vec<_>>(),
                    "proof": serde_json::to_value(&transcript)?,
                }),
            )?;
            staged.push((id, current.clone(), output.clone(), transcript));
            current = output;
        }
        // Everyone checks every link before anything moves on.
        for (id, input, output, transcript) in &staged {
            if let Err(e) = verify(&self.params, &pk, input, output, transcript) {
                return Err(Abort {
                    phase: "shuffle".into(),
                    reason: format!("party {id} published an invalid shuffle: {e}"),
                });
            }
        }
        self.final_list = current;
        self.phase = RunPhase::Decrypt;
        Ok(())
    }

    /// Chained joint decryption of the final list, then bounded discrete
    /// logs. Counters the search cannot explain are flagged by position and
    /// the rest still decrypt. The published result carries only counts.
    pub fn decrypt(&mut self) -> Result<ProtocolOutcome> {
        self.expect_phase(RunPhase::Decrypt)?;
        let mut values: Vec<BigUint> =
            self.final_list.iter().map(|c| c.c2.clone()).collect();
        for p in &self.parties {
            let secret = &p.share.as_ref().expect("keygen ran").secret;
            for (v, ct) in values.iter_mut().zip(&self.final_list) {
                *v = partial_decrypt(&self.params, &ct.c1, v, secret);
            }
            self.pbb.append(
                p.id,
                Phase::DecryptPartial,
                json!({
                    "values": values.iter().map(|v| v.to_str_radix(16)).collect::<Vec<_>>(),
                }),
            )?;
        }
        let mut counts = Vec::new();
        let mut flagged = Vec::new();
        for (i, v) in values.iter().enumerate() {
            match crypto::dlog_bsgs(&self.params, v, self.cfg.dlog_bound) {
                Ok(m) => counts.push(m),
                Err(Error::DlogNotFound { .. }) => flagged.push(i),
                Err(e) => return Err(e),
            }
        }
        let histogram = build_histogram(&counts, None);
        self.pbb.append(
            1,
            Phase::Result,
            json!({
                "histogram": serde_json::to_value(&histogram)?,
                "flagged_indices": flagged,
                "decrypted": counts.len(),
            }),
        )?;
        self.phase = RunPhase::Done;
        Ok(ProtocolOutcome {
            counts,
            flagged,
            histogram,
        })
    }

    /// Drives all phases in order.
    pub fn run(
        &mut self,
        population: &[HiddenService],
        ring: &Ring,
        duration: u32,
        count_next_period: bool,
    ) -> Result<ProtocolOutcome> {
        self.keygen()?;
        self.collect(population, ring, duration, count_next_period)?;
        self.aggregate()?;
        self.shuffle_all()?;
        self.decrypt()
    }
}

/// Round-robin split of the controlled relays over all DC slots, in sorted
/// relay order. Slot `p * dcs_per_party + d` belongs to party `p + 1`'s
/// DC `d`; sizes stay within one relay of each other.
pub fn assign_relay_slots(
    ring: &Ring,
    n_parties: u32,
    dcs_per_party: u32,
) -> Vec<Vec<RelayId>> {
    let slots = n_parties as usize * dcs_per_party as usize;
    let mut per_slot: Vec<Vec<RelayId>> = vec![Vec::new(); slots];
    for (i, &relay) in ring.controlled_ids().iter().enumerate() {
        per_slot[i % slots].push(relay);
    }
    per_slot
}

/// Plaintext view of one collection: which relays each party watches and
/// the true and reported per-service counts, cheat mode applied. This is
/// the same split the protocol performs, without the crypto.
pub fn split_observations(
    population: &[HiddenService],
    ring: &Ring,
    duration: u32,
    count_next_period: bool,
    n_parties: u32,
    dcs_per_party: u32,
    cheat: CheatMode,
) -> (
    BTreeMap<PartyId, Vec<RelayId>>,
    BTreeMap<PartyId, Vec<u64>>,
    BTreeMap<PartyId, Vec<u64>>,
) {
    let slots = assign_relay_slots(ring, n_parties, dcs_per_party);
    let mut party_relays: BTreeMap<PartyId, Vec<RelayId>> = BTreeMap::new();
    let mut owner: HashMap<RelayId, PartyId> = HashMap::new();
    for (s, slot) in slots.iter().enumerate() {
        let party = (s / dcs_per_party as usize) as PartyId + 1;
        for &relay in slot {
            owner.insert(relay, party);
        }
        party_relays.entry(party).or_default().extend(slot.iter().copied());
    }
    for party in 1..=n_parties {
        party_relays.entry(party).or_default();
    }

    let mut party_true: BTreeMap<PartyId, Vec<u64>> = (1..=n_parties)
        .map(|p| (p, vec![0; population.len()]))
        .collect();
    for_each_controlled_upload(population, ring, duration, count_next_period, |_, svc, relay| {
        party_true.get_mut(&owner[&relay]).expect("assigned")[svc] += 1;
    });

    let mut party_reported = party_true.clone();
    if let CheatMode::ZeroCounts(p) = cheat {
        if let Some(counts) = party_reported.get_mut(&p) {
            counts.iter_mut().for_each(|c| *c = 0);
        }
    }
    (party_relays, party_true, party_reported)
}

/// Recomputes the aggregate from the board alone: checks every ledger
/// opening against its commitment, takes each DC's final snapshot, and
/// multiplies counters per hash across DCs.
pub fn tks_aggregate(
    params: &GroupParams,
    pbb: &Bulletin,
) -> Result<Vec<(OnionHash, Ciphertext)>> {
    let mut commits: HashMap<(PartyId, u64, u64), [u8; 32]> = HashMap::new();
    for e in pbb.entries_in(Phase::DcCommit) {
        let epoch = e.payload["epoch"].as_u64().unwrap_or(u64::MAX);
        let dc = e.payload["dc"].as_u64().unwrap_or(u64::MAX);
        let digest: [u8; 32] = e.payload["digest"]
            .as_str()
            .and_then(|s| hex::decode(s).ok())
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Config("bad ledger commitment".into()))?;
        commits.insert((e.party, dc, epoch), digest);
    }

    // Last opened (and verified) snapshot per DC.
    let mut finals: BTreeMap<(PartyId, u64), (u64, CountLedger)> = BTreeMap::new();
    for e in pbb.entries_in(Phase::DcOpen) {
        let epoch = e.payload["epoch"].as_u64().unwrap_or(u64::MAX);
        let dc = e.payload["dc"].as_u64().unwrap_or(u64::MAX);
        let ledger = CountLedger::from_payload(params, &e.payload)?;
        let committed = commits.get(&(e.party, dc, epoch)).ok_or(Error::Abort {
            phase: "aggregate".into(),
            reason: format!("party {} opened epoch {epoch} without a commitment", e.party),
        })?;
        if ledger.digest() != *committed {
            return Err(Error::Abort {
                phase: "aggregate".into(),
                reason: format!(
                    "party {} opened a ledger that does not match its commitment (epoch {epoch})",
                    e.party
                ),
            });
        }
        match finals.get(&(e.party, dc)) {
            Some((last, _)) if *last >= epoch => {}
            _ => {
                finals.insert((e.party, dc), (epoch, ledger));
            }
        }
    }

    let mut sums: BTreeMap<OnionHash, Ciphertext> = BTreeMap::new();
    for (_, (_, ledger)) in finals {
        for (hash, ct) in ledger.entries {
            match sums.remove(&hash) {
                Some(acc) => {
                    sums.insert(hash, crypto::add(params, &acc, &ct));
                }
                None => {
                    sums.insert(hash, ct);
                }
            }
        }
    }
    Ok(sums.into_iter().collect())
}

/// True whether any result-phase payload mentions one of the given hashes;
/// the unlinkability check expects `false`.
pub fn result_mentions_hashes(pbb: &Bulletin, hashes: &[OnionHash]) -> bool {
    pbb.entries_in(Phase::Result).any(|e| {
        let text = e.payload.to_string();
        hashes.iter().any(|h| text.contains(&h.to_hex()))
    })
}

/// One simulated protocol run end to end, with the plaintext side kept for
/// oracle comparison and auditing.
#[derive(Debug)]
pub struct SimulatedRun {
    pub outcome: ProtocolOutcome,
    pub pbb: Bulletin,
    pub ring: Ring,
    pub population: Vec<HiddenService>,
    /// Hash per population index.
    pub hashes: Vec<OnionHash>,
    /// Plaintext oracle: per-service totals over all controlled relays.
    pub true_totals: Vec<u64>,
    pub party_true: BTreeMap<PartyId, Vec<u64>>,
    pub party_reported: BTreeMap<PartyId, Vec<u64>>,
    pub party_relays: BTreeMap<PartyId, Vec<RelayId>>,
}

/// Samples a ring and population from the study seed and pushes them
/// through the full protocol.
pub fn simulate_run(
    study: &StudyConfig,
    protocol: &ProtocolConfig,
    params: &GroupParams,
    cheat: CheatMode,
) -> Result<SimulatedRun> {
    study.validate()?;
    let mut ring_rng = derive_rng(study.seed, "ring");
    let ring = Ring::random(study.n_relays, study.n_controlled, &mut ring_rng)?;
    let mut pop_rng = derive_rng(study.seed, "population");
    let population = crate::sim::sample_population(study, &mut pop_rng)?;

    let mut run = ProtocolRun::new(params.clone(), protocol.clone(), study.seed, cheat)?;
    let outcome = run.run(&population, &ring, study.duration, study.count_next_period)?;

    let mut true_totals = vec![0u64; population.len()];
    for counts in run.party_true_counts().values() {
        for (i, c) in counts.iter().enumerate() {
            true_totals[i] += c;
        }
    }
    let hashes = population.iter().map(|s| onion_hash(&s.identifier)).collect();
    Ok(SimulatedRun {
        outcome,
        hashes,
        true_totals,
        party_true: run.party_true.clone(),
        party_reported: run.party_reported.clone(),
        party_relays: run.party_relays(),
        pbb: run.pbb,
        ring,
        population,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::LifespanDist;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_study(seed: u64) -> StudyConfig {
        StudyConfig {
            n_relays: 24,
            n_controlled: 24, // full coverage keeps toy counts predictable
            n_services: 6,
            duration: 1,
            lifespan: LifespanDist::Uniform { lo: 1.0, hi: 1.0 },
            count_next_period: false,
            seed,
        }
    }

    fn toy_protocol() -> ProtocolConfig {
        ProtocolConfig {
            n_parties: 3,
            dcs_per_party: 2,
            proof_rounds: 4,
            // Toy group order is 11; counts stay at 6 under full coverage.
            dlog_bound: 10,
        }
    }

    #[test]
    fn onion_hashes_are_stable_and_distinct() {
        let a = onion_hash(&OnionIdentifier(*b"aaaaaaaaaa"));
        let b = onion_hash(&OnionIdentifier(*b"bbbbbbbbbb"));
        assert_eq!(a, onion_hash(&OnionIdentifier(*b"aaaaaaaaaa")));
        assert_ne!(a, b);
        assert_eq!(OnionHash::from_hex(&a.to_hex()).unwrap(), a);
    }

    #[test]
    fn ledger_counts_observations_homomorphically() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let share = keygen_share(&params, &mut rng);
        let mut ledger = CountLedger::default();
        let h1 = onion_hash(&OnionIdentifier(*b"aaaaaaaaaa"));
        let h2 = onion_hash(&OnionIdentifier(*b"bbbbbbbbbb"));
        for _ in 0..3 {
            ledger.observe(&params, &share.public, h1, &mut rng).unwrap();
        }
        ledger.observe(&params, &share.public, h2, &mut rng).unwrap();
        assert_eq!(ledger.len(), 2);
        let secrets = [share.secret.clone()];
        let c1 = &ledger.entries[&h1];
        assert_eq!(crypto::decrypt(&params, &secrets, c1, 10).unwrap(), 3);
        let c2 = &ledger.entries[&h2];
        assert_eq!(crypto::decrypt(&params, &secrets, c2, 10).unwrap(), 1);
    }

    #[test]
    fn ledger_payload_roundtrip_and_digest() {
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let share = keygen_share(&params, &mut rng);
        let mut ledger = CountLedger::default();
        for name in [b"aaaaaaaaaa", b"cccccccccc"] {
            ledger
                .observe(&params, &share.public, onion_hash(&OnionIdentifier(*name)), &mut rng)
                .unwrap();
        }
        let payload = ledger.to_payload();
        let back = CountLedger::from_payload(&params, &payload).unwrap();
        assert_eq!(back.entries, ledger.entries);
        assert_eq!(back.digest(), ledger.digest());

        let mut tampered = payload.clone();
        tampered["entries"][0][2] = Value::String("1".into());
        let back = CountLedger::from_payload(&params, &tampered).unwrap();
        assert_ne!(back.digest(), ledger.digest());
    }

    #[test]
    fn cheat_mode_parsing() {
        assert_eq!(CheatMode::parse("2=zeros").unwrap(), CheatMode::ZeroCounts(2));
        assert_eq!(
            CheatMode::parse("1=tamper-shuffle").unwrap(),
            CheatMode::TamperShuffle(1)
        );
        assert_eq!(
            CheatMode::parse("3=tamper-open").unwrap(),
            CheatMode::TamperOpening(3)
        );
        assert!(CheatMode::parse("zeros").is_err());
        assert!(CheatMode::parse("x=zeros").is_err());
        assert!(CheatMode::parse("2=liar").is_err());
    }

    #[test]
    fn honest_run_matches_plaintext_oracle() {
        let run = simulate_run(
            &toy_study(3),
            &toy_protocol(),
            &GroupParams::toy(),
            CheatMode::Honest,
        )
        .unwrap();
        // Full coverage, 1-day lifespans: every service counts exactly 6.
        assert!(run.true_totals.iter().all(|&t| t == 6));
        let mut got = run.outcome.counts.clone();
        got.sort_unstable();
        let mut want: Vec<u64> = run.true_totals.clone();
        want.sort_unstable();
        assert_eq!(got, want);
        assert!(run.outcome.flagged.is_empty());
        run.pbb.verify_chain().unwrap();
        assert!(!result_mentions_hashes(&run.pbb, &run.hashes));
        assert_eq!(run.outcome.histogram.buckets[&6], 6.0);
    }

    #[test]
    fn single_party_run_is_valid() {
        let cfg = ProtocolConfig {
            n_parties: 1,
            dcs_per_party: 1,
            ..toy_protocol()
        };
        let run =
            simulate_run(&toy_study(4), &cfg, &GroupParams::toy(), CheatMode::Honest).unwrap();
        let mut got = run.outcome.counts.clone();
        got.sort_unstable();
        let mut want = run.true_totals.clone();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn split_observations_matches_the_full_run() {
        let study = toy_study(11);
        let cfg = toy_protocol();
        let run = simulate_run(&study, &cfg, &GroupParams::toy(), CheatMode::ZeroCounts(3))
            .unwrap();
        let (relays, truth, reported) = split_observations(
            &run.population,
            &run.ring,
            study.duration,
            study.count_next_period,
            cfg.n_parties,
            cfg.dcs_per_party,
            CheatMode::ZeroCounts(3),
        );
        assert_eq!(relays, run.party_relays);
        assert_eq!(truth, run.party_true);
        assert_eq!(reported, run.party_reported);
    }

    #[test]
    fn zero_reporting_party_suppresses_its_counts() {
        let honest = simulate_run(
            &toy_study(5),
            &toy_protocol(),
            &GroupParams::toy(),
            CheatMode::Honest,
        )
        .unwrap();
        let cheated = simulate_run(
            &toy_study(5),
            &toy_protocol(),
            &GroupParams::toy(),
            CheatMode::ZeroCounts(2),
        )
        .unwrap();
        let honest_sum: u64 = honest.outcome.counts.iter().sum();
        let cheat_sum: u64 = cheated.outcome.counts.iter().sum();
        let suppressed: u64 = cheated.party_true[&2].iter().sum();
        assert!(suppressed > 0);
        assert_eq!(cheat_sum + suppressed, honest_sum);
        assert!(cheated.party_reported[&2].iter().all(|&c| c == 0));
        // The run itself still completes; detection is the audit's job.
        cheated.pbb.verify_chain().unwrap();
    }

    #[test]
    fn tampered_opening_aborts_naming_party() {
        let err = simulate_run(
            &toy_study(6),
            &toy_protocol(),
            &GroupParams::toy(),
            CheatMode::TamperOpening(2),
        )
        .unwrap_err();
        match err {
            Error::Abort { phase, reason } => {
                assert_eq!(phase, "aggregate");
                assert!(reason.contains("party 2"), "{reason}");
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn tampered_shuffle_aborts_before_decryption() {
        let err = simulate_run(
            &toy_study(7),
            &toy_protocol(),
            &GroupParams::toy(),
            CheatMode::TamperShuffle(3),
        )
        .unwrap_err();
        match err {
            Error::Abort { phase, reason } => {
                assert_eq!(phase, "shuffle");
                assert!(reason.contains("party 3"), "{reason}");
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn phases_must_run_in_order() {
        let mut run = ProtocolRun::new(
            GroupParams::toy(),
            toy_protocol(),
            8,
            CheatMode::Honest,
        )
        .unwrap();
        assert!(matches!(run.aggregate(), Err(Error::OutOfPhase { .. })));
        assert!(matches!(run.shuffle_all(), Err(Error::OutOfPhase { .. })));
        assert!(matches!(run.decrypt(), Err(Error::OutOfPhase { .. })));
        run.keygen().unwrap();
        assert!(matches!(run.keygen(), Err(Error::OutOfPhase { .. })));
    }

    #[test]
    fn dlog_bound_too_small_flags_but_continues() {
        let mut study = toy_study(9);
        study.duration = 1;
        let mut cfg = toy_protocol();
        cfg.dlog_bound = 5; // every count is 6
        let run =
            simulate_run(&study, &cfg, &GroupParams::toy(), CheatMode::Honest).unwrap();
        assert_eq!(run.outcome.flagged.len(), run.population.len());
        assert!(run.outcome.counts.is_empty());
    }

    #[test]
    fn rejects_dlog_bound_at_or_above_group_order() {
        let mut cfg = toy_protocol();
        cfg.dlog_bound = 11; // toy group order
        let err = match ProtocolRun::new(GroupParams::toy(), cfg, 1, CheatMode::Honest) {
            Ok(_) => panic!("bound at the group order must be rejected"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("group order"), "{err}");
    }

    #[test]
    fn aggregate_equals_sum_across_dcs() {
        // Two parties, one hash observed by DCs of both: counts {1, 2}.
        let params = GroupParams::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let s1 = keygen_share(&params, &mut rng);
        let s2 = keygen_share(&params, &mut rng);
        let pk = params.mul(&s1.public, &s2.public);
        let hash = onion_hash(&OnionIdentifier(*b"zzzzzzzzzz"));

        let mut pbb = Bulletin::new();
        let mut l1 = CountLedger::default();
        l1.observe(&params, &pk, hash, &mut rng).unwrap();
        let mut l2 = CountLedger::default();
        l2.observe(&params, &pk, hash, &mut rng).unwrap();
        l2.observe(&params, &pk, hash, &mut rng).unwrap();
        for (party, ledger) in [(1u32, &l1), (2u32, &l2)] {
            pbb.append(
                party,
                Phase::DcCommit,
                json!({"epoch": 0, "dc": 0, "digest": hex::encode(ledger.digest())}),
            )
            .unwrap();
        }
        for (party, ledger) in [(1u32, &l1), (2u32, &l2)] {
            pbb.append(
                party,
                Phase::DcOpen,
                json!({"epoch": 0, "dc": 0, "entries": ledger.to_payload()["entries"]}),
            )
            .unwrap();
        }
        let agg = tks_aggregate(&params, &pbb).unwrap();
        assert_eq!(agg.len(), 1);
        let secrets = [s1.secret.clone(), s2.secret.clone()];
        assert_eq!(crypto::decrypt(&params, &secrets, &agg[0].1, 10).unwrap(), 3);

        // Open without commit is an abort.
        let mut bad = Bulletin::new();
        bad.append(
            1,
            Phase::DcOpen,
            json!({"epoch": 0, "dc": 0, "entries": l1.to_payload()["entries"]}),
        )
        .unwrap();
        assert!(matches!(
            tks_aggregate(&params, &bad),
            Err(Error::Abort { .. })
        ));
    }
}
