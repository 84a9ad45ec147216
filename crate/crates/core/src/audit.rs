//! Dishonest-party detection on top of completed protocol runs. Zero
//! reporting is invisible to the run itself (an encryption of 0 is a valid
//! ciphertext), so the auditor works on side information instead: per-party
//! count histograms, planted honeypot services with known schedules, and
//! spot checks of individual reports.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::Histogram;
use crate::pbb::PartyId;
use crate::protocol::SimulatedRun;
use crate::ring::{RelayId, Ring};
use crate::derive_rng;
use crate::sim::{self, for_each_controlled_upload, HiddenService, StudyConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    /// Tolerated absolute gap between an expected and a reported count.
    pub delta: u64,
    /// Additive smoothing for the KL divergence.
    pub smoothing: f64,
    /// Services sampled per party for spot checks.
    pub sample_size: usize,
    /// A party is an outlier when its summed distance to the others
    /// exceeds this multiple of the leave-one-out baseline.
    pub outlier_factor: f64,
    /// Per-service misreport rate assumed when quoting spot-check
    /// detection confidence.
    pub assumed_cheat_rate: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            delta: 0,
            smoothing: 1e-6,
            sample_size: 20,
            outlier_factor: 3.0,
            assumed_cheat_rate: 0.1,
        }
    }
}

fn normalized_buckets(h: &Histogram) -> Result<BTreeMap<u32, f64>> {
    let total: f64 = h.buckets.values().sum();
    if total <= 0.0 {
        return Err(Error::Audit("histogram has no mass".into()));
    }
    Ok(h.buckets.iter().map(|(&k, &v)| (k, v / total)).collect())
}

/// Symmetric chi-squared distance between normalized histograms. Union
/// support keeps every term's denominator positive, so no smoothing is
/// needed.
pub fn chi2_distance(a: &Histogram, b: &Histogram) -> Result<f64> {
    let pa = normalized_buckets(a)?;
    let pb = normalized_buckets(b)?;
    let keys: BTreeSet<u32> = pa.keys().chain(pb.keys()).copied().collect();
    let mut sum = 0.0;
    for k in keys {
        let p = pa.get(&k).copied().unwrap_or(0.0);
        let q = pb.get(&k).copied().unwrap_or(0.0);
        sum += (p - q).powi(2) / (p + q);
    }
    Ok(sum)
}

/// Directed KL divergence in nats, with additive smoothing over the union
/// support so empty buckets stay finite.
pub fn kl_divergence(a: &Histogram, b: &Histogram, smoothing: f64) -> Result<f64> {
    let pa = normalized_buckets(a)?;
    let pb = normalized_buckets(b)?;
    let keys: BTreeSet<u32> = pa.keys().chain(pb.keys()).copied().collect();
    let norm = 1.0 + smoothing * keys.len() as f64;
    let mut sum = 0.0;
    for k in &keys {
        let p = (pa.get(k).copied().unwrap_or(0.0) + smoothing) / norm;
        let q = (pb.get(k).copied().unwrap_or(0.0) + smoothing) / norm;
        sum += p * (p / q).ln();
    }
    Ok(sum)
}

pub fn symmetric_kl(a: &Histogram, b: &Histogram, smoothing: f64) -> Result<f64> {
    Ok(kl_divergence(a, b, smoothing)? + kl_divergence(b, a, smoothing)?)
}

/// Pairwise distances plus the outlier decision derived from them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistanceReport {
    pub parties: Vec<PartyId>,
    pub matrix: Vec<Vec<f64>>,
    /// Row sums: each party's total distance to the others.
    pub sums: Vec<f64>,
    /// Leave-one-out scale: (n-1) times the median pairwise distance
    /// among the non-suspect parties.
    pub baseline: f64,
    pub factor: f64,
    pub flagged: Option<PartyId>,
    /// Parties sharing the maximal row sum when it is not unique.
    pub tied: Vec<PartyId>,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Flags the party whose histogram sits farthest from everyone else's,
/// judged against the distance scale of the remaining parties. Needs at
/// least 3 parties to localize; below that only distances are reported.
/// A cartel reporting identical fakes drags the baseline to zero and can
/// push an honest party over the threshold, so the verdict is evidence,
/// not proof.
pub fn distance_report<F>(
    histograms: &BTreeMap<PartyId, Histogram>,
    factor: f64,
    metric: F,
) -> Result<DistanceReport>
where
    F: Fn(&Histogram, &Histogram) -> Result<f64>,
{
    let parties: Vec<PartyId> = histograms.keys().copied().collect();
    let n = parties.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric(&histograms[&parties[i]], &histograms[&parties[j]])?;
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    let sums: Vec<f64> = matrix.iter().map(|row| row.iter().sum()).collect();

    let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<PartyId> = parties
        .iter()
        .zip(&sums)
        .filter(|(_, &s)| s == max)
        .map(|(&p, _)| p)
        .collect();

    let mut report = DistanceReport {
        parties: parties.clone(),
        matrix,
        sums: sums.clone(),
        baseline: 0.0,
        factor,
        flagged: None,
        tied: Vec::new(),
    };
    if n < 3 {
        return Ok(report);
    }
    if tied.len() > 1 {
        report.tied = tied;
        return Ok(report);
    }
    let suspect = tied[0];
    let si = parties.iter().position(|&p| p == suspect).expect("present");
    let mut rest_pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if i != si && j != si {
                rest_pairs.push(report.matrix[i][j]);
            }
        }
    }
    report.baseline = (n - 1) as f64 * median(rest_pairs);
    if sums[si] > factor * report.baseline {
        report.flagged = Some(suspect);
    }
    Ok(report)
}

/// Per-party histograms over the counts each party reported for the
/// services it actually holds ledger entries for.
pub fn party_histograms(
    party_true: &BTreeMap<PartyId, Vec<u64>>,
    party_reported: &BTreeMap<PartyId, Vec<u64>>,
) -> BTreeMap<PartyId, Histogram> {
    party_true
        .iter()
        .map(|(&party, truth)| {
            let reported = &party_reported[&party];
            let values = truth
                .iter()
                .zip(reported)
                .filter(|(&t, _)| t > 0)
                .map(|(_, &r)| r);
            (party, Histogram::from_values(values))
        })
        .collect()
}

/// Replays one service's upload schedule and counts the hits on the given
/// relay subset. This is what the auditor can compute for a service it
/// planted itself.
pub fn expected_uploads(
    service: &HiddenService,
    ring: &Ring,
    duration: u32,
    count_next_period: bool,
    relays: &BTreeSet<RelayId>,
) -> u64 {
    let single = [service.clone()];
    let mut count = 0;
    for_each_controlled_upload(&single, ring, duration, count_next_period, |_, _, relay| {
        if relays.contains(&relay) {
            count += 1;
        }
    });
    count
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HoneypotRow {
    pub party: PartyId,
    /// Population index of the planted service.
    pub service: usize,
    pub expected: u64,
    pub reported: u64,
    pub consistent: bool,
}

/// Checks every party's report on every planted service against the
/// recomputed schedule.
pub fn honeypot_table(
    population: &[HiddenService],
    ring: &Ring,
    duration: u32,
    count_next_period: bool,
    party_relays: &BTreeMap<PartyId, Vec<RelayId>>,
    party_reported: &BTreeMap<PartyId, Vec<u64>>,
    honeypots: &[usize],
    delta: u64,
) -> Result<Vec<HoneypotRow>> {
    let mut rows = Vec::new();
    for &idx in honeypots {
        let service = population
            .get(idx)
            .ok_or_else(|| Error::Audit(format!("honeypot index {idx} out of range")))?;
        for (&party, relays) in party_relays {
            let set: BTreeSet<RelayId> = relays.iter().copied().collect();
            let expected = expected_uploads(service, ring, duration, count_next_period, &set);
            let reported = party_reported
                .get(&party)
                .and_then(|v| v.get(idx))
                .copied()
                .ok_or_else(|| Error::Audit(format!("no report from party {party}")))?;
            rows.push(HoneypotRow {
                party,
                service: idx,
                expected,
                reported,
                consistent: expected.abs_diff(reported) <= delta,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpotCheckRow {
    pub party: PartyId,
    pub checked: usize,
    pub matched: usize,
    pub pass_rate: f64,
    /// Chance this sample catches a party misreporting the assumed
    /// fraction of its services: 1 - (1 - rate)^checked.
    pub confidence: f64,
}

/// Uniform sample of (expected, reported) pairs per party, drawn from the
/// services that party observed.
pub fn sample_spot_checks(
    party_true: &BTreeMap<PartyId, Vec<u64>>,
    party_reported: &BTreeMap<PartyId, Vec<u64>>,
    sample_size: usize,
    rng: &mut impl Rng,
) -> BTreeMap<PartyId, Vec<(u64, u64)>> {
    party_true
        .iter()
        .map(|(&party, truth)| {
            let reported = &party_reported[&party];
            let observed: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] > 0).collect();
            let pairs = observed
                .choose_multiple(rng, sample_size.min(observed.len()))
                .map(|&i| (truth[i], reported[i]))
                .collect();
            (party, pairs)
        })
        .collect()
}

pub fn spot_check(
    samples: &BTreeMap<PartyId, Vec<(u64, u64)>>,
    delta: u64,
    assumed_cheat_rate: f64,
) -> Result<Vec<SpotCheckRow>> {
    let mut rows = Vec::new();
    for (&party, pairs) in samples {
        if pairs.is_empty() {
            return Err(Error::Audit(format!(
                "no sampled services for party {party}"
            )));
        }
        let matched = pairs
            .iter()
            .filter(|(e, r)| e.abs_diff(*r) <= delta)
            .count();
        rows.push(SpotCheckRow {
            party,
            checked: pairs.len(),
            matched,
            pass_rate: matched as f64 / pairs.len() as f64,
            confidence: 1.0 - (1.0 - assumed_cheat_rate).powi(pairs.len() as i32),
        });
    }
    Ok(rows)
}

/// Everything the auditor works from, detached from the protocol run so
/// it can be serialized, shipped, and audited separately. The plaintext
/// population and ring stand in for the auditor's own ground truth (it
/// planted the honeypots and can replay any service's schedule).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditInputs {
    pub study: StudyConfig,
    pub population: Vec<HiddenService>,
    pub ring: Ring,
    pub party_relays: BTreeMap<PartyId, Vec<RelayId>>,
    pub party_true: BTreeMap<PartyId, Vec<u64>>,
    pub party_reported: BTreeMap<PartyId, Vec<u64>>,
}

impl AuditInputs {
    pub fn from_run(run: &SimulatedRun, study: &StudyConfig) -> Self {
        AuditInputs {
            study: study.clone(),
            population: run.population.clone(),
            ring: run.ring.clone(),
            party_relays: run.party_relays.clone(),
            party_true: run.party_true.clone(),
            party_reported: run.party_reported.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub chi2: DistanceReport,
    pub kl: DistanceReport,
    pub honeypots: Vec<HoneypotRow>,
    pub spot_checks: Vec<SpotCheckRow>,
    /// "clear" or "flagged" per party; flagged on any failed signal.
    pub verdicts: BTreeMap<PartyId, String>,
}

/// Runs the full audit battery. The first party-count many services
/// double as the planted honeypots.
pub fn run_audit(inputs: &AuditInputs, cfg: &AuditConfig, seed: u64) -> Result<AuditReport> {
    let histograms = party_histograms(&inputs.party_true, &inputs.party_reported);
    let chi2 = distance_report(&histograms, cfg.outlier_factor, chi2_distance)?;
    let kl = distance_report(&histograms, cfg.outlier_factor, |a, b| {
        symmetric_kl(a, b, cfg.smoothing)
    })?;

    let n_parties = inputs.party_true.len();
    let honeypot_indices: Vec<usize> =
        (0..n_parties.min(inputs.population.len())).collect();
    let honeypots = honeypot_table(
        &inputs.population,
        &inputs.ring,
        inputs.study.duration,
        inputs.study.count_next_period,
        &inputs.party_relays,
        &inputs.party_reported,
        &honeypot_indices,
        cfg.delta,
    )?;

    let mut rng = derive_rng(seed, "audit");
    let samples = sample_spot_checks(
        &inputs.party_true,
        &inputs.party_reported,
        cfg.sample_size,
        &mut rng,
    );
    let spot_checks = spot_check(&samples, cfg.delta, cfg.assumed_cheat_rate)?;

    let mut verdicts: BTreeMap<PartyId, String> = inputs
        .party_true
        .keys()
        .map(|&p| (p, "clear".to_string()))
        .collect();
    if let Some(p) = chi2.flagged {
        verdicts.insert(p, "flagged".into());
    }
    for row in &honeypots {
        if !row.consistent {
            verdicts.insert(row.party, "flagged".into());
        }
    }
    for row in &spot_checks {
        if row.matched < row.checked {
            verdicts.insert(row.party, "flagged".into());
        }
    }
    Ok(AuditReport {
        chi2,
        kl,
        honeypots,
        spot_checks,
        verdicts,
    })
}

/// Audit inputs straight from the plaintext simulation: same relay split
/// and cheat handling as the protocol, none of the crypto.
pub fn simulated_inputs(
    study: &StudyConfig,
    n_parties: u32,
    dcs_per_party: u32,
    cheat: crate::protocol::CheatMode,
) -> Result<AuditInputs> {
    study.validate()?;
    let mut ring_rng = derive_rng(study.seed, "ring");
    let ring = Ring::random(study.n_relays, study.n_controlled, &mut ring_rng)?;
    let mut pop_rng = derive_rng(study.seed, "population");
    let population = sim::sample_population(study, &mut pop_rng)?;
    let (party_relays, party_true, party_reported) = crate::protocol::split_observations(
        &population,
        &ring,
        study.duration,
        study.count_next_period,
        n_parties,
        dcs_per_party,
        cheat,
    );
    Ok(AuditInputs {
        study: study.clone(),
        population,
        ring,
        party_relays,
        party_true,
        party_reported,
    })
}
