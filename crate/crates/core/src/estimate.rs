//! Lifespan estimation from partial-coverage counts: the linear
//! extrapolation estimator and its error metrics, Monte-Carlo expected-count
//! distributions per lifespan, and two ways to turn a batch of observed
//! counts into a lifespan histogram (likelihood-weighted attribution and
//! plain mean inversion).

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::Ring;
use crate::sim::{run_study, sample_population, HiddenService, LifespanDist, StudyConfig};
use crate::{derive_rng, OnionIdentifier};

/// Replica placements per service per day: 2 replicas x 3 relays.
const PLACEMENTS_PER_DAY: f64 = 6.0;

/// Point estimate of a lifespan from its observed total count: the count
/// scaled by the inverse coverage fraction, divided by the 6 daily
/// placements.
pub fn estimate_lifespan(count: u64, n_controlled: u32, n_relays: u32) -> Result<f64> {
    if n_controlled == 0 || n_relays == 0 {
        return Err(Error::Config("coverage fraction undefined".into()));
    }
    Ok(count as f64 * n_relays as f64 / (n_controlled as f64 * PLACEMENTS_PER_DAY))
}

/// Relative error |estimated - actual| / actual; actual lifespans are at
/// least one day.
pub fn relative_error(estimated: f64, actual: f64) -> Result<f64> {
    if !(actual >= 1.0) {
        return Err(Error::Config(format!(
            "actual lifespan {actual} below one day"
        )));
    }
    Ok((estimated - actual).abs() / actual)
}

/// Arithmetic mean of per-service errors.
pub fn average_error(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().sum::<f64>() / errors.len() as f64
}

/// Expected total count for a service of lifespan `d` when each day also
/// counts the following period: 12 placements/day times the coverage
/// fraction.
pub fn expected_count_mean(d: u32, n_controlled: u32, n_relays: u32) -> f64 {
    2.0 * PLACEMENTS_PER_DAY * d as f64 * n_controlled as f64 / n_relays as f64
}

/// Empirical distribution of total counts for one lifespan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountPmf {
    /// probs[x] = P[count = x]; sums to 1.
    pub probs: Vec<f64>,
}

impl CountPmf {
    fn from_samples(samples: &[u64]) -> Self {
        let max = samples.iter().copied().max().unwrap_or(0) as usize;
        // Integer tallies first; summing per-sample weights drifts off 1.
        let mut tallies = vec![0u64; max + 1];
        for &s in samples {
            tallies[s as usize] += 1;
        }
        let n = samples.len() as f64;
        CountPmf {
            probs: tallies.into_iter().map(|t| t as f64 / n).collect(),
        }
    }

    pub fn prob(&self, count: u64) -> f64 {
        self.probs.get(count as usize).copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(x, p)| x as f64 * p)
            .sum()
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        self.probs
            .iter()
            .enumerate()
            .map(|(x, p)| (x as f64 - m).powi(2) * p)
            .sum::<f64>()
            .sqrt()
    }

    pub fn mode(&self) -> u64 {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(x, _)| x as u64)
            .unwrap_or(0)
    }

    /// Probability mass within `k` standard deviations of the mean.
    pub fn mass_within(&self, k: f64) -> f64 {
        let (m, s) = (self.mean(), self.std_dev());
        self.probs
            .iter()
            .enumerate()
            .filter(|(x, _)| (*x as f64 - m).abs() <= k * s)
            .map(|(_, p)| p)
            .sum()
    }

    /// Central interval [lo, hi] holding at least `mass` probability,
    /// grown outward from the mean.
    pub fn central_band(&self, mass: f64) -> (u64, u64) {
        let m = self.mean().round() as i64;
        let top = self.probs.len() as i64 - 1;
        let (mut lo, mut hi) = (m.clamp(0, top), m.clamp(0, top));
        let at = |x: i64| self.probs[x as usize];
        let mut acc = at(lo);
        while acc < mass && (lo > 0 || hi < top) {
            let left = if lo > 0 { at(lo - 1) } else { -1.0 };
            let right = if hi < top { at(hi + 1) } else { -1.0 };
            if right > left {
                hi += 1;
                acc += right;
            } else {
                lo -= 1;
                acc += left;
            }
        }
        (lo as u64, hi as u64)
    }
}

/// Monte-Carlo count distribution for lifespan `d`: every run draws a fresh
/// ring and a fresh service.
pub fn count_distribution(
    d: u32,
    n_controlled: u32,
    n_relays: u32,
    runs: u32,
    rng: &mut impl Rng,
) -> Result<CountPmf> {
    let table = CountPmfTable::build(d, n_controlled, n_relays, runs, rng)?;
    Ok(table.pmfs.into_iter().last().expect("d >= 1 validated"))
}

/// Count pmfs for every lifespan 1..=max_d, sharing rings across lifespans:
/// extending a lifespan by one day adds the next period's placements, so
/// one pass per run covers the whole table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountPmfTable {
    pub n_controlled: u32,
    pub n_relays: u32,
    pub runs: u32,
    /// pmfs[d - 1] is the distribution for lifespan d.
    pub pmfs: Vec<CountPmf>,
}

impl CountPmfTable {
    pub fn build(
        max_d: u32,
        n_controlled: u32,
        n_relays: u32,
        runs: u32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if max_d == 0 || runs == 0 {
            return Err(Error::Config("need max_d >= 1 and runs >= 1".into()));
        }
        if n_controlled == 0 || n_controlled > n_relays {
            return Err(Error::Config("controlled count out of range".into()));
        }
        let mut samples: Vec<Vec<u64>> =
            vec![Vec::with_capacity(runs as usize); max_d as usize];
        let mut periods = Vec::new();
        for _ in 0..runs {
            let ring = Ring::random(n_relays, n_controlled, rng)?;
            let svc = HiddenService {
                identifier: OnionIdentifier::random(rng),
                permanent_id_byte: rng.gen(),
                cookie: None,
                onset: 0,
                lifespan: max_d,
            };
            // One pass: count(d+1) = count(d) + x[d] + x[d+1].
            periods.clear();
            let first = svc.period_on(0);
            for p in first..=first + max_d as u64 {
                let mut x = 0u64;
                for replica in 0..crate::ring::REPLICAS as u8 {
                    let sip = crate::ring::secret_id_part(p, None, replica);
                    let did = crate::ring::descriptor_id(&svc.identifier, &sip);
                    let (_, k) = ring.controlled_responsible(&did);
                    x += k as u64;
                }
                periods.push(x);
            }
            let mut total = 0u64;
            for d in 1..=max_d as usize {
                total += periods[d - 1] + periods[d];
                samples[d - 1].push(total);
            }
        }
        Ok(CountPmfTable {
            n_controlled,
            n_relays,
            runs,
            pmfs: samples.iter().map(|s| CountPmf::from_samples(s)).collect(),
        })
    }

    pub fn max_d(&self) -> u32 {
        self.pmfs.len() as u32
    }

    pub fn pmf(&self, d: u32) -> Option<&CountPmf> {
        self.pmfs.get(d as usize - 1)
    }

    /// `d,count,prob` rows for all lifespans in the table.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "d,count,prob")?;
        for (i, pmf) in self.pmfs.iter().enumerate() {
            for (count, p) in pmf.probs.iter().enumerate() {
                if *p > 0.0 {
                    writeln!(w, "{},{},{}", i + 1, count, p)?;
                }
            }
        }
        Ok(())
    }
}

/// Weighted histogram over integer buckets (lifespan days, or raw counts),
/// plus a bucket-less bin for observations no lifespan can explain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub buckets: BTreeMap<u32, f64>,
    pub unattributed: f64,
}

impl Histogram {
    /// Raw mode: one bucket per distinct value, weight = multiplicity.
    pub fn from_values(values: impl IntoIterator<Item = u64>) -> Self {
        let mut h = Histogram::default();
        for v in values {
            h.add(v as u32, 1.0);
        }
        h
    }

    pub fn add(&mut self, bucket: u32, weight: f64) {
        *self.buckets.entry(bucket).or_insert(0.0) += weight;
    }

    pub fn bucket_mass(&self) -> f64 {
        self.buckets.values().sum()
    }

    /// Attributed plus unattributed mass.
    pub fn total_mass(&self) -> f64 {
        self.bucket_mass() + self.unattributed
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty() && self.unattributed == 0.0
    }

    /// Total variation distance between the bucket distributions, each
    /// normalized to unit mass (unattributed mass excluded).
    pub fn tv_distance(&self, other: &Histogram) -> Result<f64> {
        let (ma, mb) = (self.bucket_mass(), other.bucket_mass());
        if ma <= 0.0 || mb <= 0.0 {
            return Err(Error::Audit("histogram without bucket mass".into()));
        }
        let keys: std::collections::BTreeSet<u32> = self
            .buckets
            .keys()
            .chain(other.buckets.keys())
            .copied()
            .collect();
        let mut tv = 0.0;
        for k in keys {
            let pa = self.buckets.get(&k).copied().unwrap_or(0.0) / ma;
            let pb = other.buckets.get(&k).copied().unwrap_or(0.0) / mb;
            tv += (pa - pb).abs();
        }
        Ok(tv / 2.0)
    }

    /// `lifespan_days,weight` rows, buckets ascending. Unattributed mass is
    /// not a lifespan and is reported separately by callers.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "lifespan_days,weight")?;
        for (k, v) in &self.buckets {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    }

    /// `value,cum_fraction` rows over the normalized bucket distribution.
    pub fn write_cdf_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "value,cum_fraction")?;
        let mass = self.bucket_mass();
        if mass <= 0.0 {
            return Ok(());
        }
        let mut acc = 0.0;
        for (k, v) in &self.buckets {
            acc += v / mass;
            writeln!(w, "{k},{acc}")?;
        }
        Ok(())
    }
}

/// Attributes each observed count fractionally across lifespans in
/// proportion to the count's likelihood under each (uniform prior over
/// lifespans). Counts impossible under every tabulated lifespan land in
/// the unattributed bin, so total mass always equals the number of
/// observations.
pub fn weighted_extrapolate(observed: &[u64], table: &CountPmfTable) -> Histogram {
    let mut h = Histogram::default();
    for &x in observed {
        let denom: f64 = table.pmfs.iter().map(|p| p.prob(x)).sum();
        if denom <= 0.0 {
            h.unattributed += 1.0;
            continue;
        }
        for (i, pmf) in table.pmfs.iter().enumerate() {
            let p = pmf.prob(x);
            if p > 0.0 {
                h.add(i as u32 + 1, p / denom);
            }
        }
    }
    h
}

/// Rounds half-down, so exact ties map to the smaller lifespan.
fn round_half_down(v: f64) -> f64 {
    (v - 0.5).ceil()
}

/// Baseline attribution: invert the expected-count mean per observation.
/// A count of zero carries no lifespan information and lands in the
/// unattributed bin.
pub fn mean_extrapolate(observed: &[u64], n_controlled: u32, n_relays: u32) -> Result<Histogram> {
    if n_controlled == 0 || n_relays == 0 {
        return Err(Error::Config("coverage fraction undefined".into()));
    }
    let per_day = 2.0 * PLACEMENTS_PER_DAY * n_controlled as f64 / n_relays as f64;
    let mut h = Histogram::default();
    for &x in observed {
        if x == 0 {
            h.unattributed += 1.0;
            continue;
        }
        let d = round_half_down(x as f64 / per_day).max(1.0);
        h.add(d as u32, 1.0);
    }
    Ok(h)
}

/// Per-service relative errors for one full study drawn from `cfg`.
/// Ring and population use independent sub-streams of the config seed.
pub fn study_errors(cfg: &StudyConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut ring_rng = derive_rng(cfg.seed, "ring");
    let ring = Ring::random(cfg.n_relays, cfg.n_controlled, &mut ring_rng)?;
    let mut pop_rng = derive_rng(cfg.seed, "population");
    let population = sample_population(cfg, &mut pop_rng)?;
    let record = run_study(cfg, &population, &ring);
    record
        .totals
        .iter()
        .zip(&record.lifespans)
        .map(|(&c, &l)| {
            let e = estimate_lifespan(c, cfg.n_controlled, cfg.n_relays)?;
            relative_error(e, l as f64)
        })
        .collect()
}

/// One sweep point: average error at a given coverage level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_controlled: u32,
    pub e_avg: f64,
}

/// Average-error sweep over coverage levels, same seed per point.
pub fn error_sweep(base: &StudyConfig, coverage_levels: &[u32]) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(coverage_levels.len());
    for &n_controlled in coverage_levels {
        let cfg = StudyConfig {
            n_controlled,
            ..base.clone()
        };
        let errors = study_errors(&cfg)?;
        out.push(SweepPoint {
            n_controlled,
            e_avg: average_error(&errors),
        });
    }
    Ok(out)
}

/// `n_controlled,e_avg,dist` rows; `dist` labels the lifespan model.
pub fn write_sweep_csv(
    mut w: impl Write,
    rows: &[(LifespanDist, Vec<SweepPoint>)],
) -> Result<()> {
    writeln!(w, "n_controlled,e_avg,dist")?;
    for (dist, points) in rows {
        let label = match dist {
            LifespanDist::Normal { .. } => "normal",
            LifespanDist::Uniform { .. } => "uniform",
            LifespanDist::Exponential { .. } => "exponential",
        };
        for p in points {
            writeln!(w, "{},{},{label}", p.n_controlled, p.e_avg)?;
        }
    }
    Ok(())
}

/// Spearman rank correlation; ties get average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("need two equally long series".into()));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Config("constant series has no rank order".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
