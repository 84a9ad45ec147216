//! Command-line front end over the measurement and aggregation library.
//! Every command is a pure function of its seed and config: rerunning with
//! the same inputs reproduces each output file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use hslife_core::audit::{run_audit, simulated_inputs, AuditConfig, AuditInputs};
use hslife_core::crypto::GroupParams;
use hslife_core::estimate::{
    average_error, error_sweep, estimate_lifespan, mean_extrapolate, relative_error, spearman,
    weighted_extrapolate, write_sweep_csv, CountPmfTable, Histogram, SweepPoint,
};
use hslife_core::pbb::Phase;
use hslife_core::protocol::{CheatMode, ProtocolConfig, ProtocolRun};
use hslife_core::sim::{run_study, sample_population, LifespanDist, StudyConfig};
use hslife_core::{derive_rng, Ring};

#[derive(Parser)]
#[command(
    name = "hslife",
    version,
    about = "Hidden-service lifespan measurement and private count aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Average estimation error across coverage levels and lifespan shapes.
    CoverageSweep(CommonArgs),
    /// Simulated distribution of observed counts for each true lifespan.
    ExpectedDist(CommonArgs),
    /// One full study: simulate, observe, extrapolate, compare to truth.
    Estimate(CommonArgs),
    /// Private count aggregation between distrusting parties.
    #[command(subcommand)]
    Mpc(MpcCommand),
    /// Consistency audit over a finished run's recorded inputs.
    Audit(AuditArgs),
}

#[derive(Subcommand)]
enum MpcCommand {
    /// Key generation only: commit-then-open on the board, joint key out.
    Keygen(KeygenArgs),
    /// Full run: keygen, collection, aggregation, shuffles, decryption.
    Run(RunArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Root seed; overrides the config's study seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; omitted sections fall back to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct KeygenArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Cryptographic group.
    #[arg(long, value_enum, default_value_t = Group::Toy)]
    group: Group,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Cryptographic group.
    #[arg(long, value_enum, default_value_t = Group::Toy)]
    group: Group,
    /// Shuffle proof rounds; a forged shuffle survives with odds 2^-rounds.
    #[arg(long)]
    rounds: Option<u32>,
    /// Dishonest party, as PARTY=MODE with MODE one of zeros, tamper-open,
    /// tamper-shuffle.
    #[arg(long)]
    cheat_party: Option<String>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Recorded inputs from `mpc run`; defaults to <out>/audit_inputs.json.
    #[arg(long)]
    inputs: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Group {
    Toy,
    Mod2048,
}

impl Group {
    fn params(self) -> GroupParams {
        match self {
            Group::Toy => GroupParams::toy(),
            Group::Mod2048 => GroupParams::mod2048(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Group::Toy => "toy",
            Group::Mod2048 => "mod2048",
        }
    }
}

/// Config file shape. Every section is optional and independently
/// defaulted, so a file can pin only what it cares about.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    study: StudyConfig,
    protocol: ProtocolConfig,
    audit: AuditConfig,
    sweep: SweepConfig,
    pmf: PmfConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepConfig {
    coverage_levels: Vec<u32>,
    distributions: Vec<LifespanDist>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            coverage_levels: (1..=10).map(|k| k * 30).collect(),
            distributions: vec![
                LifespanDist::Normal { mean: 140.0, std_dev: 20.0 },
                LifespanDist::Uniform { lo: 30.0, hi: 180.0 },
                LifespanDist::Exponential { rate: 1.0 / 60.0 },
            ],
        }
    }
}

/// Sizing for the simulated count distribution table.
#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PmfConfig {
    max_days: u32,
    runs: u32,
}

impl Default for PmfConfig {
    fn default() -> Self {
        PmfConfig { max_days: 90, runs: 2_000 }
    }
}

fn main() -> std::process::ExitCode {
    let result = match Cli::parse().command {
        Command::CoverageSweep(args) => coverage_sweep(&args),
        Command::ExpectedDist(args) => expected_dist(&args),
        Command::Estimate(args) => estimate(&args),
        Command::Mpc(MpcCommand::Keygen(args)) => mpc_keygen(&args),
        Command::Mpc(MpcCommand::Run(args)) => mpc_run(&args),
        Command::Audit(args) => audit(&args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn load(common: &CommonArgs) -> Result<FileConfig> {
    let mut cfg: FileConfig = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.study.seed = seed;
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(dir, name, &bytes)
}

fn dist_label(dist: &LifespanDist) -> &'static str {
    match dist {
        LifespanDist::Normal { .. } => "normal",
        LifespanDist::Uniform { .. } => "uniform",
        LifespanDist::Exponential { .. } => "exponential",
    }
}

fn coverage_sweep(args: &CommonArgs) -> Result<()> {
    let cfg = load(args)?;
    let mut rows: Vec<(LifespanDist, Vec<SweepPoint>)> = Vec::new();
    let mut stats = Vec::new();
    for dist in &cfg.sweep.distributions {
        let base = StudyConfig { lifespan: *dist, ..cfg.study.clone() };
        let points = error_sweep(&base, &cfg.sweep.coverage_levels)?;
        let xs: Vec<f64> = points.iter().map(|p| p.n_controlled as f64).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.e_avg).collect();
        let rho = spearman(&xs, &ys)?;
        println!("{}: spearman {rho:.3}", dist_label(dist));
        stats.push(json!({ "dist": dist_label(dist), "spearman": rho }));
        rows.push((*dist, points));
    }
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &rows)?;
    write_bytes(&args.out, "error_vs_nc.csv", &csv)?;
    write_json(
        &args.out,
        "summary.json",
        &json!({
            "seed": cfg.study.seed,
            "coverage_levels": cfg.sweep.coverage_levels,
            "distributions": stats,
        }),
    )
}

fn expected_dist(args: &CommonArgs) -> Result<()> {
    let cfg = load(args)?;
    let study = &cfg.study;
    let mut rng = derive_rng(study.seed, "count-pmf");
    let table = CountPmfTable::build(
        cfg.pmf.max_days,
        study.n_controlled,
        study.n_relays,
        cfg.pmf.runs,
        &mut rng,
    )?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write_bytes(&args.out, "count_pmf.csv", &csv)?;

    let per_day: Vec<_> = (1..=cfg.pmf.max_days)
        .map(|d| {
            let pmf = table.pmf(d).expect("d is in range");
            let (lo, hi) = pmf.central_band(0.95);
            json!({
                "d": d,
                "mean": pmf.mean(),
                "std_dev": pmf.std_dev(),
                "mode": pmf.mode(),
                "band95": [lo, hi],
            })
        })
        .collect();
    write_json(
        &args.out,
        "summary.json",
        &json!({
            "seed": study.seed,
            "n_controlled": study.n_controlled,
            "n_relays": study.n_relays,
            "runs": cfg.pmf.runs,
            "per_day": per_day,
        }),
    )
}

fn estimate(args: &CommonArgs) -> Result<()> {
    let cfg = load(args)?;
    let study = &cfg.study;
    study.validate()?;
    let ring = Ring::random(
        study.n_relays,
        study.n_controlled,
        &mut derive_rng(study.seed, "ring"),
    )?;
    let population = sample_population(study, &mut derive_rng(study.seed, "population"))?;
    let record = run_study(study, &population, &ring);

    let mut rng = derive_rng(study.seed, "count-pmf");
    let table = CountPmfTable::build(
        study.duration,
        study.n_controlled,
        study.n_relays,
        cfg.pmf.runs,
        &mut rng,
    )?;
    let truth = Histogram::from_values(record.lifespans.iter().map(|&l| l as u64));
    let weighted = weighted_extrapolate(&record.totals, &table);
    let mean = mean_extrapolate(&record.totals, study.n_controlled, study.n_relays)?;

    let mut errors = Vec::new();
    for (&total, &lifespan) in record.totals.iter().zip(&record.lifespans) {
        if total > 0 {
            let est = estimate_lifespan(total, study.n_controlled, study.n_relays)?;
            errors.push(relative_error(est, lifespan as f64)?);
        }
    }
    let within = errors.iter().filter(|&&e| e < 0.2).count() as f64 / errors.len().max(1) as f64;

    for (name, hist) in [("histogram.csv", &weighted), ("ground_truth.csv", &truth)] {
        let mut csv = Vec::new();
        hist.write_csv(&mut csv)?;
        write_bytes(&args.out, name, &csv)?;
    }
    let mut cdf = Vec::new();
    weighted.write_cdf_csv(&mut cdf)?;
    write_bytes(&args.out, "cdf.csv", &cdf)?;

    write_json(
        &args.out,
        "summary.json",
        &json!({
            "seed": study.seed,
            "services": population.len(),
            "observed": errors.len(),
            "average_error": average_error(&errors),
            "within_20pct": within,
            "tv_weighted": weighted.tv_distance(&truth)?,
            "tv_mean_inversion": mean.tv_distance(&truth)?,
            "unattributed_weighted": weighted.unattributed,
            "unattributed_mean_inversion": mean.unattributed,
        }),
    )
}

fn mpc_keygen(args: &KeygenArgs) -> Result<()> {
    let cfg = load(&args.common)?;
    let mut run = ProtocolRun::new(
        args.group.params(),
        cfg.protocol,
        cfg.study.seed,
        CheatMode::Honest,
    )?;
    run.keygen()?;
    run.pbb.verify_chain()?;

    let mut board = Vec::new();
    run.pbb.write_jsonl(&mut board)?;
    write_bytes(&args.common.out, "pbb.jsonl", &board)?;

    let parties: Vec<_> = run
        .pbb
        .entries_in(Phase::KeygenOpen)
        .map(|e| json!({ "party": e.party, "public": e.payload["public"] }))
        .collect();
    let joint = run.joint_key().expect("keygen ran").to_str_radix(16);
    write_json(
        &args.common.out,
        "keys.json",
        &json!({
            "group": args.group.name(),
            "seed": cfg.study.seed,
            "parties": parties,
            "joint": joint,
        }),
    )
}

fn mpc_run(args: &RunArgs) -> Result<()> {
    let cfg = load(&args.common)?;
    let study = &cfg.study;
    study.validate()?;
    let mut proto = cfg.protocol;
    if let Some(rounds) = args.rounds {
        proto.proof_rounds = rounds;
    }
    let cheat = match &args.cheat_party {
        Some(spec) => CheatMode::parse(spec)?,
        None => CheatMode::Honest,
    };
    let cheat_label = args.cheat_party.clone().unwrap_or_else(|| "honest".into());

    let ring = Ring::random(
        study.n_relays,
        study.n_controlled,
        &mut derive_rng(study.seed, "ring"),
    )?;
    let population = sample_population(study, &mut derive_rng(study.seed, "population"))?;
    let mut run = ProtocolRun::new(args.group.params(), proto.clone(), study.seed, cheat)?;
    let result = run.run(&population, &ring, study.duration, study.count_next_period);

    // The board is evidence either way; aborted runs keep theirs too.
    let mut board = Vec::new();
    run.pbb.write_jsonl(&mut board)?;
    write_bytes(&args.common.out, "pbb.jsonl", &board)?;

    let outcome = match result {
        Ok(outcome) => outcome,
        Err(e) => {
            write_json(
                &args.common.out,
                "report.json",
                &json!({
                    "group": args.group.name(),
                    "seed": study.seed,
                    "cheat": cheat_label,
                    "aborted": true,
                    "error": e.to_string(),
                    "board_entries": run.pbb.len(),
                }),
            )?;
            bail!("protocol aborted: {e}");
        }
    };

    // Plaintext side of the same seed, recorded for the audit tooling.
    let inputs = simulated_inputs(study, proto.n_parties, proto.dcs_per_party, cheat)?;
    let mut true_totals = vec![0u64; population.len()];
    for counts in inputs.party_true.values() {
        for (t, c) in true_totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    let mut want: Vec<u64> = true_totals.iter().copied().filter(|&t| t > 0).collect();
    want.sort_unstable();
    let mut got = outcome.counts.clone();
    got.sort_unstable();
    let matches = got == want && outcome.flagged.is_empty();

    let mut csv = Vec::new();
    outcome.histogram.write_csv(&mut csv)?;
    write_bytes(&args.common.out, "histogram.csv", &csv)?;
    write_json(&args.common.out, "audit_inputs.json", &inputs)?;
    write_json(
        &args.common.out,
        "report.json",
        &json!({
            "group": args.group.name(),
            "seed": study.seed,
            "cheat": cheat_label,
            "aborted": false,
            "n_parties": proto.n_parties,
            "dcs_per_party": proto.dcs_per_party,
            "proof_rounds": proto.proof_rounds,
            "dlog_bound": proto.dlog_bound,
            "services": population.len(),
            "observed_services": want.len(),
            "recovered_counts": outcome.counts,
            "flagged_indices": outcome.flagged,
            "matches_plaintext_oracle": matches,
            "board_entries": run.pbb.len(),
        }),
    )?;
    println!(
        "recovered {} counts from {} observed services; oracle match: {matches}",
        outcome.counts.len(),
        want.len()
    );
    Ok(())
}

fn audit(args: &AuditArgs) -> Result<()> {
    let cfg = load(&args.common)?;
    let path = args
        .inputs
        .clone()
        .unwrap_or_else(|| args.common.out.join("audit_inputs.json"));
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let inputs: AuditInputs =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let seed = args.common.seed.unwrap_or(inputs.study.seed);
    let report = run_audit(&inputs, &cfg.audit, seed)?;
    for (party, verdict) in &report.verdicts {
        println!("party {party}: {verdict}");
    }
    write_json(&args.common.out, "report.json", &report)
}
