//! Re-encryption shuffles with cut-and-choose correctness proofs.
//!
//! Each proof round commits to two fresh shuffles R_0, R_1 of the proof
//! input. The Fiat-Shamir challenge bit b selects which side to open: the
//! prover reveals the witness input -> R_b, plus the composition of its
//! real witness with the other side, R_(1-b) -> output. Answering both bits
//! of a round would yield a full input -> output witness, so each round a
//! cheater survives with probability 1/2. All challenge bits come from one
//! hash over the input, the claimed output, and every round's commitments,
//! which pins the transcript to the (input, output) pair and blocks
//! regenerating single rounds until a convenient bit appears.

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crypto::{reencrypt, Ciphertext, GroupParams};
use crate::error::{Error, Result};

const TAG_CHALLENGE: &[u8] = b"hslife/shuffle-challenge/v1";

/// Default round count; soundness error 2^-40.
pub const DEFAULT_PROOF_ROUNDS: u32 = 40;

/// A shuffle's secret: output[i] = reencrypt(input[permutation[i]], coins[i]).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShuffleWitness {
    pub permutation: Vec<usize>,
    #[serde(with = "crate::crypto::hexnum_vec")]
    pub coins: Vec<BigUint>,
}

impl ShuffleWitness {
    pub fn random(params: &GroupParams, len: usize, rng: &mut impl Rng) -> Self {
        let mut permutation: Vec<usize> = (0..len).collect();
        permutation.shuffle(rng);
        let coins = (0..len).map(|_| params.random_exponent(rng)).collect();
        ShuffleWitness { permutation, coins }
    }

    /// permutation[i] read backwards: inverse[permutation[i]] = i.
    fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0usize; self.permutation.len()];
        for (i, &p) in self.permutation.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

fn check_bijection(perm: &[usize], len: usize) -> Result<()> {
    if perm.len() != len {
        return Err(Error::MalformedTranscript(format!(
            "permutation length {} != list length {len}",
            perm.len()
        )));
    }
    let mut seen = vec![false; len];
    for &p in perm {
        if p >= len || seen[p] {
            return Err(Error::MalformedTranscript(
                "permutation is not a bijection".into(),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Applies a witness to a list, validating its shape.
pub fn apply_witness(
    params: &GroupParams,
    pk: &BigUint,
    input: &[Ciphertext],
    witness: &ShuffleWitness,
) -> Result<Vec<Ciphertext>> {
    check_bijection(&witness.permutation, input.len())?;
    if witness.coins.len() != input.len() {
        return Err(Error::MalformedTranscript(format!(
            "coin count {} != list length {}",
            witness.coins.len(),
            input.len()
        )));
    }
    Ok(witness
        .permutation
        .iter()
        .zip(&witness.coins)
        .map(|(&src, r)| reencrypt(params, pk, &input[src], r))
        .collect())
}

/// Random permuted re-encryption of `input`, with the witness that made it.
pub fn shuffle(
    params: &GroupParams,
    pk: &BigUint,
    input: &[Ciphertext],
    rng: &mut impl Rng,
) -> (Vec<Ciphertext>, ShuffleWitness) {
    let witness = ShuffleWitness::random(params, input.len(), rng);
    let output = apply_witness(params, pk, input, &witness).expect("fresh witness is well-formed");
    (output, witness)
}

/// One proof round: both committed shuffles plus the two revealed paths
/// selected by the challenge bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProofRound {
    pub r0: Vec<Ciphertext>,
    pub r1: Vec<Ciphertext>,
    pub revealed_bit: u8,
    /// Witness for input -> R_b.
    pub input_to_revealed: ShuffleWitness,
    /// Witness for R_(1-b) -> output.
    pub hidden_to_output: ShuffleWitness,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShuffleTranscript {
    pub rounds: Vec<ProofRound>,
}

/// Digest of a ciphertext list for challenge derivation.
pub fn digest_list(cts: &[Ciphertext]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((cts.len() as u64).to_be_bytes());
    for c in cts {
        crate::crypto::absorb_biguint(&mut h, &c.c1);
        crate::crypto::absorb_biguint(&mut h, &c.c2);
    }
    h.finalize().into()
}

/// Fiat-Shamir challenge bits, one per round, derived jointly from the
/// input, the claimed output, and every round's (R_0, R_1) commitments.
pub fn challenge_bits(
    input: &[Ciphertext],
    output: &[Ciphertext],
    commitments: &[([u8; 32], [u8; 32])],
) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(TAG_CHALLENGE);
    h.update(digest_list(input));
    h.update(digest_list(output));
    h.update((commitments.len() as u32).to_be_bytes());
    for (d0, d1) in commitments {
        h.update(d0);
        h.update(d1);
    }
    let seed: [u8; 32] = h.finalize().into();
    let mut bits = Vec::with_capacity(commitments.len());
    let mut block = seed;
    let mut counter = 0u32;
    for j in 0..commitments.len() {
        let k = j % 256;
        if j > 0 && k == 0 {
            counter += 1;
            let mut hb = Sha256::new();
            hb.update(seed);
            hb.update(counter.to_be_bytes());
            block = hb.finalize().into();
        }
        bits.push((block[k / 8] >> (7 - (k % 8))) & 1);
    }
    bits
}

/// Proves that `output` is a re-encryption shuffle of `input` under
/// `witness`, with `rounds` cut-and-choose rounds.
pub fn prove(
    params: &GroupParams,
    pk: &BigUint,
    input: &[Ciphertext],
    output: &[Ciphertext],
    witness: &ShuffleWitness,
    rounds: u32,
    rng: &mut impl Rng,
) -> Result<ShuffleTranscript> {
    if rounds == 0 {
        return Err(Error::MalformedTranscript("round count must be >= 1".into()));
    }
    if apply_witness(params, pk, input, witness)? != output {
        return Err(Error::MalformedTranscript(
            "witness does not map input to output".into(),
        ));
    }

    let mut sides = Vec::with_capacity(rounds as usize);
    let mut commitments = Vec::with_capacity(rounds as usize);
    for _ in 0..rounds {
        let (l0, w0) = shuffle(params, pk, input, rng);
        let (l1, w1) = shuffle(params, pk, input, rng);
        commitments.push((digest_list(&l0), digest_list(&l1)));
        sides.push(((l0, w0), (l1, w1)));
    }
    let bits = challenge_bits(input, output, &commitments);

    let out_rounds = sides
        .into_iter()
        .zip(bits)
        .map(|(((l0, w0), (l1, w1)), bit)| {
            let (revealed, hidden) = if bit == 0 { (w0, w1) } else { (w1, w0) };
            // Compose the real witness with the hidden side: if
            // R[j] = reenc(input[s.perm[j]], s.coins[j]) and
            // output[i] = reenc(input[p.perm[i]], p.coins[i]), then
            // output[i] = reenc(R[s.inv[p.perm[i]]], p.coins[i] - s.coins[..]).
            let inv = hidden.inverse_permutation();
            let mut perm = Vec::with_capacity(input.len());
            let mut coins = Vec::with_capacity(input.len());
            for i in 0..input.len() {
                let src = inv[witness.permutation[i]];
                perm.push(src);
                coins.push(params.exp_sub(&witness.coins[i], &hidden.coins[src]));
            }
            ProofRound {
                r0: l0,
                r1: l1,
                revealed_bit: bit,
                input_to_revealed: revealed,
                hidden_to_output: ShuffleWitness {
                    permutation: perm,
                    coins,
                },
            }
        })
        .collect();
    Ok(ShuffleTranscript { rounds: out_rounds })
}

/// Checks a transcript against the claimed (input, output) pair. Accepts
/// only if every round's challenge bit recomputes and both revealed paths
/// reproduce their targets.
pub fn verify(
    params: &GroupParams,
    pk: &BigUint,
    input: &[Ciphertext],
    output: &[Ciphertext],
    transcript: &ShuffleTranscript,
) -> Result<()> {
    if transcript.rounds.is_empty() {
        return Err(Error::MalformedTranscript("no rounds".into()));
    }
    for (j, round) in transcript.rounds.iter().enumerate() {
        if round.r0.len() != input.len() || round.r1.len() != input.len() {
            return Err(Error::MalformedTranscript(format!(
                "round {j}: committed list length mismatch"
            )));
        }
    }
    let commitments: Vec<_> = transcript
        .rounds
        .iter()
        .map(|r| (digest_list(&r.r0), digest_list(&r.r1)))
        .collect();
    let bits = challenge_bits(input, output, &commitments);

    for (j, (round, bit)) in transcript.rounds.iter().zip(bits).enumerate() {
        let reject = |reason: &str| Error::ShuffleRejected {
            round: j,
            reason: reason.into(),
        };
        if round.revealed_bit != bit {
            return Err(reject("challenge bit mismatch"));
        }
        let (revealed_list, hidden_list) = if bit == 0 {
            (&round.r0, &round.r1)
        } else {
            (&round.r1, &round.r0)
        };
        let to_revealed = apply_witness(params, pk, input, &round.input_to_revealed)
            .map_err(|e| reject(&format!("revealed path: {e}")))?;
        if &to_revealed != revealed_list {
            return Err(reject("revealed path does not reproduce the committed list"));
        }
        let to_output = apply_witness(params, pk, hidden_list, &round.hidden_to_output)
            .map_err(|e| reject(&format!("output path: {e}")))?;
        if to_output != output {
            return Err(reject("output path does not reproduce the claimed output"));
        }
    }
    Ok(())
}
