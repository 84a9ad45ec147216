//! Population simulator: draws synthetic onion services with random
//! lifespans, replays their daily descriptor uploads against a ring
//! snapshot, and records how many land on controlled relays.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{
    descriptor_id, secret_id_part, time_period, DescriptorCookie, OnionIdentifier, RelayId, Ring,
    DIGEST_LEN, REPLICAS,
};

/// Descriptors are published once per day; we sample each service's current
/// period at local noon so the permanent-id-byte phase actually lands
/// services on both sides of a period boundary.
const SAMPLE_SECOND: u64 = 43_200;
const SECONDS_PER_DAY: u64 = 86_400;

/// Lifespan model for the synthetic population, in days. Draws are rounded
/// to whole days and clamped to `[1, duration]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LifespanDist {
    Normal { mean: f64, std_dev: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { rate: f64 },
}

impl LifespanDist {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("lifespan distribution: {msg}")));
        match *self {
            LifespanDist::Normal { mean, std_dev } => {
                if !(mean > 0.0) || !(std_dev > 0.0) {
                    return bad("normal requires mean > 0 and std_dev > 0");
                }
            }
            LifespanDist::Uniform { lo, hi } => {
                if !(lo > 0.0) || !(hi >= lo) {
                    return bad("uniform requires 0 < lo <= hi");
                }
            }
            LifespanDist::Exponential { rate } => {
                if !(rate > 0.0) {
                    return bad("exponential requires rate > 0");
                }
            }
        }
        Ok(())
    }

    fn sample_days(&self, duration: u32, rng: &mut impl Rng) -> u32 {
        let raw = match *self {
            LifespanDist::Normal { mean, std_dev } => {
                Normal::new(mean, std_dev).expect("validated").sample(rng)
            }
            LifespanDist::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    Uniform::new_inclusive(lo, hi).sample(rng)
                }
            }
            LifespanDist::Exponential { rate } => Exp::new(rate).expect("validated").sample(rng),
        };
        (raw.round() as i64).clamp(1, duration as i64) as u32
    }
}

/// Parameters for one observation study.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub n_relays: u32,
    pub n_controlled: u32,
    pub n_services: u32,
    /// Study length in days; also the upper clamp for lifespans.
    pub duration: u32,
    pub lifespan: LifespanDist,
    /// When set, each day also counts placements for the following period,
    /// modelling the upload that straddles the rotation boundary. Doubles
    /// the per-day ceiling from 6 to 12 controlled hits.
    pub count_next_period: bool,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_relays: 3_000,
            n_controlled: 80,
            n_services: 60_000,
            duration: 180,
            lifespan: LifespanDist::Normal {
                mean: 140.0,
                std_dev: 20.0,
            },
            count_next_period: false,
            seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_relays < 3 {
            return Err(Error::Config("need at least 3 relays".into()));
        }
        if self.n_controlled > self.n_relays {
            return Err(Error::Config(
                "controlled relays exceed ring size".into(),
            ));
        }
        if self.duration == 0 {
            return Err(Error::Config("duration must be at least one day".into()));
        }
        if self.n_services == 0 {
            return Err(Error::Config("population must be non-empty".into()));
        }
        self.lifespan.validate()
    }
}

/// One synthetic onion service.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HiddenService {
    pub identifier: OnionIdentifier,
    pub permanent_id_byte: u8,
    pub cookie: Option<DescriptorCookie>,
    /// First day the service is up, in `[0, duration - lifespan]`.
    pub onset: u32,
    /// Days the service stays up, in `[1, duration]`.
    pub lifespan: u32,
}

impl HiddenService {
    fn alive_on(&self, day: u32) -> bool {
        day >= self.onset && day < self.onset + self.lifespan
    }

    /// Current time-period at the daily sample instant of `day`.
    pub fn period_on(&self, day: u32) -> u64 {
        time_period(
            day as u64 * SECONDS_PER_DAY + SAMPLE_SECOND,
            self.permanent_id_byte,
        )
    }
}

/// Draws the population for `cfg`: lifespans from the configured
/// distribution, onsets uniform over the feasible window, identifiers and
/// permanent-id bytes uniform.
pub fn sample_population(cfg: &StudyConfig, rng: &mut impl Rng) -> Result<Vec<HiddenService>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_services as usize);
    for _ in 0..cfg.n_services {
        let identifier = OnionIdentifier::random(rng);
        let permanent_id_byte = rng.gen();
        let lifespan = cfg.lifespan.sample_days(cfg.duration, rng);
        let onset = rng.gen_range(0..=cfg.duration - lifespan);
        out.push(HiddenService {
            identifier,
            permanent_id_byte,
            cookie: None,
            onset,
            lifespan,
        });
    }
    Ok(out)
}

/// Precomputed secret-id-parts for the cookie-free case, shared by every
/// service at a given period.
struct SipTable {
    sips: Vec<[[u8; DIGEST_LEN]; REPLICAS]>,
}

impl SipTable {
    fn new(max_period: u64) -> Self {
        let sips = (0..=max_period)
            .map(|p| [secret_id_part(p, None, 0), secret_id_part(p, None, 1)])
            .collect();
        SipTable { sips }
    }

    fn get(&self, period: u64) -> &[[u8; DIGEST_LEN]; REPLICAS] {
        &self.sips[period as usize]
    }
}

/// Walks every controlled-relay placement in day order and reports it to
/// `f(day, service_index, relay)`. Shared by the plain study and the
/// aggregation protocol's per-epoch collection.
pub fn for_each_controlled_upload(
    population: &[HiddenService],
    ring: &Ring,
    duration: u32,
    count_next_period: bool,
    mut f: impl FnMut(u32, usize, RelayId),
) {
    // Noon sampling can push the last day into period duration; +1 more for
    // the next-period lookahead.
    let table = SipTable::new(duration as u64 + 1);
    for day in 0..duration {
        for (idx, svc) in population.iter().enumerate() {
            if !svc.alive_on(day) {
                continue;
            }
            let period = svc.period_on(day);
            let periods: &[u64] = if count_next_period {
                &[period, period + 1]
            } else {
                &[period]
            };
            for &p in periods {
                let sips = match svc.cookie {
                    None => *table.get(p),
                    Some(ref c) => [secret_id_part(p, Some(c), 0), secret_id_part(p, Some(c), 1)],
                };
                for sip in &sips {
                    let d = descriptor_id(&svc.identifier, sip);
                    let (hits, k) = ring.controlled_responsible(&d);
                    for &relay in &hits[..k] {
                        f(day, idx, relay);
                    }
                }
            }
        }
    }
}

/// Observed counts for one study: per-service totals and per-relay
/// breakdowns, aligned with the population by index.
#[derive(Clone, Debug)]
pub struct ObservationRecord {
    pub lifespans: Vec<u32>,
    pub totals: Vec<u64>,
    pub per_relay: Vec<HashMap<RelayId, u32>>,
}

impl ObservationRecord {
    /// `service_id,lifespan_true,count_total` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "service_id,lifespan_true,count_total")?;
        for i in 0..self.totals.len() {
            writeln!(w, "{},{},{}", i, self.lifespans[i], self.totals[i])?;
        }
        Ok(())
    }

    /// Wide variant with one `relay_<id>` column per controlled relay.
    pub fn write_csv_wide(&self, ring: &Ring, mut w: impl Write) -> Result<()> {
        write!(w, "service_id,lifespan_true,count_total")?;
        for id in ring.controlled_ids() {
            write!(w, ",relay_{id}")?;
        }
        writeln!(w)?;
        for i in 0..self.totals.len() {
            write!(w, "{},{},{}", i, self.lifespans[i], self.totals[i])?;
            for id in ring.controlled_ids() {
                write!(w, ",{}", self.per_relay[i].get(id).copied().unwrap_or(0))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Replays the whole population against `ring` and tallies controlled-relay
/// hits per service. Deterministic in its inputs.
pub fn run_study(cfg: &StudyConfig, population: &[HiddenService], ring: &Ring) -> ObservationRecord {
    let mut totals = vec![0u64; population.len()];
    let mut per_relay = vec![HashMap::new(); population.len()];
    for_each_controlled_upload(
        population,
        ring,
        cfg.duration,
        cfg.count_next_period,
        |_day, idx, relay| {
            totals[idx] += 1;
            *per_relay[idx].entry(relay).or_insert(0) += 1;
        },
    );
    ObservationRecord {
        lifespans: population.iter().map(|s| s.lifespan).collect(),
        totals,
        per_relay,
    }
}
