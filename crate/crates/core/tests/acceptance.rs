//! Acceptance gate. Eight criteria, one PASS/FAIL line each, nonzero exit
//! if any fail. Thresholds are pinned here on purpose: they were calibrated
//! once against repeated runs and sit well clear of the observed noise, so
//! loosening one is a design change, not a fix.

use std::panic::{catch_unwind, AssertUnwindSafe};

use hslife_core::audit::{run_audit, simulated_inputs, AuditConfig};
use hslife_core::crypto::{
    add, decrypt, default_dlog_bound, dlog_bsgs, encrypt, encrypt_with, keygen_share,
    partial_decrypt, reencrypt, Ciphertext, GroupParams, KeyShare,
};
use hslife_core::estimate::{
    average_error, error_sweep, expected_count_mean, mean_extrapolate, spearman, study_errors,
    weighted_extrapolate, CountPmfTable, Histogram,
};
use hslife_core::protocol::{result_mentions_hashes, simulate_run, CheatMode, ProtocolConfig};
use hslife_core::shuffle::{
    apply_witness, prove, shuffle, verify, ProofRound, ShuffleTranscript, ShuffleWitness,
};
use hslife_core::sim::{run_study, sample_population, LifespanDist, StudyConfig};
use hslife_core::{derive_rng, Ring};
use num_bigint::BigUint;
use rand::Rng;

// Calibrated 0.93..0.95 over seeds at 10% coverage.
const HIGH_COVERAGE_MIN_GOOD: f64 = 0.85;
// Calibrated 0.41..0.44 at 1% coverage; the band asserts "degraded but not
// useless" without chasing the exact value.
const LOW_COVERAGE_GOOD_BAND: (f64, f64) = (0.37, 0.63);
const COVERAGE_SEEDS: [u64; 3] = [11, 12, 13];

// Calibrated -0.95..-1.00 per distribution.
const SWEEP_MAX_SPEARMAN: f64 = -0.8;

const PMF_RUNS: u32 = 10_000;
const PMF_MIN_MASS_2SD: f64 = 0.93;

const CRYPTO_ROUNDTRIPS: usize = 1_000;

const FORGE_TRIALS: usize = 400;
const FORGE_ROUNDS: u32 = 8;

const AUDIT_RUNS: usize = 20;
const AUDIT_MIN_CHI2_HITS: usize = 19;

const EXTRAPOLATION_SEEDS: u64 = 10;
const EXTRAPOLATION_MIN_WINS: usize = 8;

fn main() {
    let mut failures = 0u32;
    run(1, "high coverage estimates most lifespans within 20 percent, low coverage does not", c1_coverage_accuracy, &mut failures);
    run(2, "average error falls monotonically with coverage across lifespan shapes", c2_error_vs_coverage, &mut failures);
    run(3, "count distribution concentrates around its predicted mean", c3_count_distribution, &mut failures);
    run(4, "2048-bit threshold counters round-trip under every operation", c4_crypto_roundtrips, &mut failures);
    run(5, "end-to-end private aggregation matches the plaintext oracle", c5_end_to_end, &mut failures);
    run(6, "forged shuffle proofs survive only at the predicted rate", c6_shuffle_soundness, &mut failures);
    run(7, "audit battery pinpoints a count-suppressing party", c7_audit_power, &mut failures);
    run(8, "distribution-weighted extrapolation beats mean inversion", c8_extrapolation_quality, &mut failures);
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}

fn run(n: u32, name: &str, f: impl FnOnce() -> bool, failures: &mut u32) {
    let pass = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        println!("  criterion {n} panicked");
        false
    });
    println!("criterion {n}: {} - {name}", if pass { "PASS" } else { "FAIL" });
    if !pass {
        *failures += 1;
    }
}

/// With a tenth of the ring, per-service estimates land within 20 percent
/// of the true lifespan for the bulk of the population; with a hundredth
/// they only do so about half the time.
fn c1_coverage_accuracy() -> bool {
    let mut ok = true;
    for seed in COVERAGE_SEEDS {
        let frac = |n_controlled: u32| {
            let cfg = StudyConfig {
                n_controlled,
                seed,
                ..StudyConfig::default()
            };
            let errs = study_errors(&cfg).expect("study");
            let good = errs.iter().filter(|&&e| e < 0.2).count() as f64 / errs.len() as f64;
            (good, average_error(&errs))
        };
        let (high, e_high) = frac(300);
        let (low, e_low) = frac(30);
        println!("  seed {seed}: good(10%)={high:.3} good(1%)={low:.3} e_avg {e_high:.3} vs {e_low:.3}");
        ok &= high >= HIGH_COVERAGE_MIN_GOOD;
        ok &= low >= LOW_COVERAGE_GOOD_BAND.0 && low <= LOW_COVERAGE_GOOD_BAND.1;
        ok &= e_high < e_low;
    }
    ok
}

/// Spearman correlation between controlled-relay count and average error
/// is strongly negative for normal, uniform and exponential lifespans.
fn c2_error_vs_coverage() -> bool {
    let grid: Vec<u32> = (1..=10).map(|k| k * 30).collect();
    let dists = [
        ("normal", LifespanDist::Normal { mean: 140.0, std_dev: 20.0 }),
        ("uniform", LifespanDist::Uniform { lo: 30.0, hi: 180.0 }),
        ("exponential", LifespanDist::Exponential { rate: 1.0 / 60.0 }),
    ];
    let mut ok = true;
    for (name, dist) in dists {
        let base = StudyConfig {
            n_services: 6_000,
            lifespan: dist,
            seed: 101,
            ..StudyConfig::default()
        };
        let points = error_sweep(&base, &grid).expect("sweep");
        let xs: Vec<f64> = points.iter().map(|p| p.n_controlled as f64).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.e_avg).collect();
        let rho = spearman(&xs, &ys).expect("correlation");
        println!("  {name}: rho={rho:.3} e_avg {:.3} -> {:.3}", ys[0], ys[ys.len() - 1]);
        ok &= rho <= SWEEP_MAX_SPEARMAN;
        ok &= ys[ys.len() - 1] < ys[0];
    }
    ok
}

/// Simulated count distributions keep most mass within two standard
/// deviations, their means grow with lifespan, and the longest lifespan
/// reproduces the closed-form mean.
fn c3_count_distribution() -> bool {
    let mut rng = derive_rng(202, "count-pmf");
    let table = CountPmfTable::build(90, 80, 3_000, PMF_RUNS, &mut rng).expect("table");
    let mut ok = true;
    let mut last_mean = 0.0;
    for d in [10u32, 30, 50, 90] {
        let pmf = table.pmf(d).expect("pmf");
        let mass = pmf.mass_within(2.0);
        println!("  d={d}: mean={:.3} sd={:.3} mode={} mass(2sd)={mass:.3}", pmf.mean(), pmf.std_dev(), pmf.mode());
        ok &= mass >= PMF_MIN_MASS_2SD;
        ok &= pmf.mean() > last_mean;
        last_mean = pmf.mean();
    }
    let short = table.pmf(10).expect("pmf");
    ok &= (1..=3).contains(&short.mode());
    let long = table.pmf(90).expect("pmf");
    let want = expected_count_mean(90, 80, 3_000);
    let tol = 3.0 * long.std_dev() / (PMF_RUNS as f64).sqrt();
    println!("  d=90 mean {:.3} vs {want:.3} (tol {tol:.3})", long.mean());
    ok &= (long.mean() - want).abs() <= tol;
    ok
}

/// The toy group reproduces its pinned key, ciphertext, decryption and
/// discrete-log vectors exactly, and keygen, encryption, re-encryption,
/// homomorphic addition and chained threshold decryption compose over the
/// 2048-bit group with zero failures, in any decryption order, up to the
/// pinned discrete-log bound.
fn c4_crypto_roundtrips() -> bool {
    // Pinned vectors in the order-11 subgroup of Z_23*: secret 3 publishes
    // 9^3 = 18, E(2; r=5) under that key is (9^5, 9^2 * 18^5) = (12, 13),
    // the lone decryption share recovers 9^2 = 12, and its log is 2.
    let toy = GroupParams::toy();
    toy.validate().expect("toy parameters");
    let share = KeyShare::from_secret(&toy, BigUint::from(3u32), [0u8; 32]);
    let ct = encrypt(&toy, &share.public, 2, &BigUint::from(5u32)).expect("toy encrypt");
    let group_msg = partial_decrypt(&toy, &ct.c1, &ct.c2, &share.secret);
    let vectors_ok = share.public == BigUint::from(18u32)
        && ct.c1 == BigUint::from(12u32)
        && ct.c2 == BigUint::from(13u32)
        && group_msg == BigUint::from(12u32)
        && dlog_bsgs(&toy, &group_msg, 10).ok() == Some(2);
    println!(
        "  toy vectors: pk {}, ct ({}, {}), group msg {}, exponent {:?}",
        share.public,
        ct.c1,
        ct.c2,
        group_msg,
        dlog_bsgs(&toy, &group_msg, 10)
    );

    let params = GroupParams::mod2048();
    params.validate().expect("group parameters");
    let mut rng = derive_rng(404, "acceptance-crypto");
    let shares: Vec<_> = (0..3).map(|_| keygen_share(&params, &mut rng)).collect();
    let pk = shares
        .iter()
        .fold(BigUint::from(1u32), |acc, s| params.mul(&acc, &s.public));
    let secrets: Vec<BigUint> = shares.iter().map(|s| s.secret.clone()).collect();
    let bound = default_dlog_bound(180);

    let mut bad = 0usize;
    for m in [0, 1, bound] {
        let ct = encrypt_with(&params, &pk, m, &mut rng).expect("encrypt");
        if decrypt(&params, &secrets, &ct, bound).ok() != Some(m) {
            bad += 1;
        }
    }

    // Halved message range keeps pair sums inside the same dlog bound.
    let msgs: Vec<u64> = (0..CRYPTO_ROUNDTRIPS)
        .map(|_| rng.gen_range(0..=bound / 2))
        .collect();
    let mut cts = Vec::with_capacity(msgs.len());
    for &m in &msgs {
        let ct = encrypt_with(&params, &pk, m, &mut rng).expect("encrypt");
        let re = reencrypt(&params, &pk, &ct, &params.random_exponent(&mut rng));
        if re == ct || decrypt(&params, &secrets, &re, bound).ok() != Some(m) {
            bad += 1;
        }
        cts.push(re);
    }
    for (pair, ms) in cts.chunks_exact(2).zip(msgs.chunks_exact(2)) {
        let sum = add(&params, &pair[0], &pair[1]);
        if decrypt(&params, &secrets, &sum, bound).ok() != Some(ms[0] + ms[1]) {
            bad += 1;
        }
    }
    let reversed: Vec<BigUint> = secrets.iter().rev().cloned().collect();
    for (ct, &m) in cts.iter().zip(&msgs).take(10) {
        if decrypt(&params, &reversed, ct, bound).ok() != Some(m) {
            bad += 1;
        }
    }
    println!(
        "  {} roundtrips, {} homomorphic sums, {bad} failures",
        msgs.len(),
        msgs.len() / 2
    );
    vectors_ok && bad == 0
}

/// A three-party, six-collector run over the 2048-bit group recovers
/// exactly the plaintext per-service totals, the board chain verifies, and
/// the published result names no service.
fn c5_end_to_end() -> bool {
    let study = StudyConfig {
        n_relays: 40,
        n_controlled: 12,
        n_services: 100,
        duration: 5,
        lifespan: LifespanDist::Uniform { lo: 1.0, hi: 5.0 },
        count_next_period: true,
        seed: 303,
    };
    let proto = ProtocolConfig {
        n_parties: 3,
        dcs_per_party: 2,
        proof_rounds: 8,
        dlog_bound: 60,
    };
    let run = simulate_run(&study, &proto, &GroupParams::mod2048(), CheatMode::Honest)
        .expect("protocol run");

    let mut want: Vec<u64> = run.true_totals.iter().copied().filter(|&t| t > 0).collect();
    want.sort_unstable();
    let mut got = run.outcome.counts.clone();
    got.sort_unstable();

    let mut split = vec![0u64; run.true_totals.len()];
    for counts in run.party_reported.values() {
        for (s, c) in split.iter_mut().zip(counts) {
            *s += c;
        }
    }

    let counts_match = got == want;
    let chain_ok = run.pbb.verify_chain().is_ok();
    let anonymous = !result_mentions_hashes(&run.pbb, &run.hashes);
    let split_matches = split == run.true_totals;
    println!(
        "  {} services recovered of {} observed, {} board entries",
        got.len(),
        want.len(),
        run.pbb.len()
    );
    run.outcome.flagged.is_empty() && counts_match && chain_ok && anonymous && split_matches
}

/// Forger for a false shuffle claim. Per round it guesses the challenge
/// bit, builds the guessed side honestly from the input, and fabricates the
/// other side backwards from the claimed output, so the transcript survives
/// exactly when every guess matches the derived challenge.
fn forge_transcript(
    params: &GroupParams,
    pk: &BigUint,
    input: &[Ciphertext],
    output: &[Ciphertext],
    rounds: u32,
    rng: &mut impl Rng,
) -> ShuffleTranscript {
    let n = input.len();
    let zero = BigUint::from(0u32);
    let rounds = (0..rounds)
        .map(|_| {
            let guess: u8 = rng.gen_range(0..2);
            let (honest, witness) = shuffle(params, pk, input, rng);
            let tau = ShuffleWitness::random(params, n, rng);
            // hidden[tau.perm[i]] = output[i] stripped of tau.coins[i], so
            // applying tau to hidden reproduces the output.
            let mut hidden = vec![output[0].clone(); n];
            for i in 0..n {
                let neg = params.exp_sub(&zero, &tau.coins[i]);
                hidden[tau.permutation[i]] = reencrypt(params, pk, &output[i], &neg);
            }
            let (r0, r1) = if guess == 0 {
                (honest, hidden)
            } else {
                (hidden, honest)
            };
            ProofRound {
                r0,
                r1,
                revealed_bit: guess,
                input_to_revealed: witness,
                hidden_to_output: tau,
            }
        })
        .collect();
    ShuffleTranscript { rounds }
}

/// Honest transcripts always verify; transcripts for a tampered output
/// survive at most the per-round guessing rate.
fn c6_shuffle_soundness() -> bool {
    let params = GroupParams::toy();
    let mut rng = derive_rng(606, "acceptance-forge");
    let shares: Vec<_> = (0..3).map(|_| keygen_share(&params, &mut rng)).collect();
    let pk = shares
        .iter()
        .fold(BigUint::from(1u32), |acc, s| params.mul(&acc, &s.public));
    let secrets: Vec<BigUint> = shares.iter().map(|s| s.secret.clone()).collect();
    let input: Vec<Ciphertext> = (0..6u64)
        .map(|m| encrypt_with(&params, &pk, m, &mut rng).expect("encrypt"))
        .collect();

    let mut honest_ok = 0usize;
    for _ in 0..FORGE_TRIALS {
        let (output, witness) = shuffle(&params, &pk, &input, &mut rng);
        let transcript = prove(&params, &pk, &input, &output, &witness, FORGE_ROUNDS, &mut rng)
            .expect("prove");
        if verify(&params, &pk, &input, &output, &transcript).is_ok() {
            honest_ok += 1;
        }
    }

    let multiset = |cts: &[Ciphertext]| -> Vec<u64> {
        let mut out: Vec<u64> = cts
            .iter()
            .map(|c| decrypt(&params, &secrets, c, 10).expect("decrypt"))
            .collect();
        out.sort_unstable();
        out
    };
    let input_multiset = multiset(&input);

    let mut forged_ok = 0usize;
    let mut structure_ok = true;
    for _ in 0..FORGE_TRIALS {
        let (mut tampered, _) = shuffle(&params, &pk, &input, &mut rng);
        tampered[0] = encrypt_with(&params, &pk, 9, &mut rng).expect("encrypt");
        structure_ok &= multiset(&tampered) != input_multiset;
        let transcript = forge_transcript(&params, &pk, &input, &tampered, FORGE_ROUNDS, &mut rng);
        // Both revealed paths must check out on their own; only the
        // challenge bits stand between the forger and acceptance.
        for round in &transcript.rounds {
            let (revealed, hidden) = if round.revealed_bit == 0 {
                (&round.r0, &round.r1)
            } else {
                (&round.r1, &round.r0)
            };
            structure_ok &= apply_witness(&params, &pk, &input, &round.input_to_revealed)
                .expect("revealed path")
                == *revealed;
            structure_ok &= apply_witness(&params, &pk, hidden, &round.hidden_to_output)
                .expect("output path")
                == tampered;
        }
        if verify(&params, &pk, &input, &tampered, &transcript).is_ok() {
            forged_ok += 1;
        }
    }

    let p = 0.5f64.powi(FORGE_ROUNDS as i32);
    let limit = p + 3.0 * (p * (1.0 - p) / FORGE_TRIALS as f64).sqrt();
    let rate = forged_ok as f64 / FORGE_TRIALS as f64;
    println!(
        "  honest {honest_ok}/{FORGE_TRIALS}, forged {forged_ok}/{FORGE_TRIALS} (rate {rate:.4}, limit {limit:.4})"
    );
    honest_ok == FORGE_TRIALS && structure_ok && rate <= limit
}

/// Across seeds, the audit battery flags the zero-reporting party on the
/// histogram distance, catches it on every planted service it should have
/// seen, fails its spot checks, and clears the honest parties; on fully
/// honest runs every honeypot count matches the simulator exactly.
fn c7_audit_power() -> bool {
    let mut chi2_hits = 0usize;
    let mut cheater_flagged = 0usize;
    let mut honest_clear = 0usize;
    let mut honeypots_ok = true;
    let mut honest_exact = true;
    let mut honest_rows = 0usize;
    let mut spots_ok = true;
    let mut cheater_rows = 0usize;
    for i in 0..AUDIT_RUNS as u64 {
        let study = StudyConfig {
            n_relays: 600,
            n_controlled: 120,
            n_services: 6_000,
            duration: 60,
            lifespan: LifespanDist::Normal { mean: 25.0, std_dev: 10.0 },
            count_next_period: false,
            seed: 400 + i,
        };
        let inputs = simulated_inputs(&study, 3, 2, CheatMode::ZeroCounts(2)).expect("inputs");
        let report = run_audit(&inputs, &AuditConfig::default(), study.seed).expect("audit");

        if report.chi2.flagged == Some(2) {
            chi2_hits += 1;
        }
        for row in &report.honeypots {
            if row.party == 2 {
                if row.expected > 0 {
                    cheater_rows += 1;
                    honeypots_ok &= !row.consistent;
                }
            } else {
                honeypots_ok &= row.consistent;
            }
        }
        for row in &report.spot_checks {
            if row.party == 2 {
                spots_ok &= row.checked > 0 && row.matched < row.checked;
            } else {
                spots_ok &= row.matched == row.checked;
            }
        }
        let verdict = |p: u32| report.verdicts.get(&p).map(String::as_str);
        if verdict(2) == Some("flagged") {
            cheater_flagged += 1;
        }
        if verdict(1) == Some("clear") && verdict(3) == Some("clear") {
            honest_clear += 1;
        }

        // With nobody cheating the planted services are a pure recomputation,
        // so every reported honeypot count must equal the simulator's exactly.
        let honest = simulated_inputs(&study, 3, 2, CheatMode::Honest).expect("honest inputs");
        let honest_report =
            run_audit(&honest, &AuditConfig::default(), study.seed).expect("honest audit");
        honest_rows += honest_report.honeypots.len();
        honest_exact &= !honest_report.honeypots.is_empty()
            && honest_report
                .honeypots
                .iter()
                .all(|row| row.consistent && row.reported == row.expected);
    }
    println!(
        "  chi2 hits {chi2_hits}/{AUDIT_RUNS}, cheater flagged {cheater_flagged}, honest clear {honest_clear}, {cheater_rows} positive honeypot rows"
    );
    println!(
        "  honest runs: {honest_rows} honeypot rows, all exact: {honest_exact}"
    );
    chi2_hits >= AUDIT_MIN_CHI2_HITS
        && cheater_flagged == AUDIT_RUNS
        && honest_clear >= AUDIT_MIN_CHI2_HITS
        && honeypots_ok
        && honest_exact
        && spots_ok
        && cheater_rows >= AUDIT_RUNS / 2
}

/// Weighting observed counts by the simulated count distribution gets
/// closer to the true lifespan histogram than inverting the expected mean.
fn c8_extrapolation_quality() -> bool {
    let mut rng = derive_rng(500, "count-pmf");
    let table = CountPmfTable::build(60, 80, 3_000, PMF_RUNS, &mut rng).expect("table");
    let mut wins = 0usize;
    let mut sums = (0.0f64, 0.0f64);
    for i in 0..EXTRAPOLATION_SEEDS {
        let cfg = StudyConfig {
            n_services: 1_200,
            duration: 60,
            lifespan: LifespanDist::Normal { mean: 25.0, std_dev: 10.0 },
            count_next_period: true,
            seed: 600 + i,
            ..StudyConfig::default()
        };
        let ring = Ring::random(cfg.n_relays, cfg.n_controlled, &mut derive_rng(cfg.seed, "ring"))
            .expect("ring");
        let population =
            sample_population(&cfg, &mut derive_rng(cfg.seed, "population")).expect("population");
        let record = run_study(&cfg, &population, &ring);
        let truth = Histogram::from_values(record.lifespans.iter().map(|&l| l as u64));
        let weighted = weighted_extrapolate(&record.totals, &table);
        let mean = mean_extrapolate(&record.totals, cfg.n_controlled, cfg.n_relays).expect("mean");
        let tv_w = weighted.tv_distance(&truth).expect("distance");
        let tv_m = mean.tv_distance(&truth).expect("distance");
        sums.0 += tv_w;
        sums.1 += tv_m;
        if tv_w < tv_m {
            wins += 1;
        }
    }
    let n = EXTRAPOLATION_SEEDS as f64;
    println!(
        "  weighted wins {wins}/{EXTRAPOLATION_SEEDS}, mean TV {:.3} vs {:.3}",
        sums.0 / n,
        sums.1 / n
    );
    wins >= EXTRAPOLATION_MIN_WINS && sums.0 < sums.1
}
