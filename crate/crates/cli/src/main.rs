//! Command-line front end. Every run echoes its effective configuration and
//! is a pure function of its arguments: no clock, no environment.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use cibpu::analytics::{attack_cost_report, balance_chain, RecursionForm, DEFAULT_LOAD};
use cibpu::attacks::{de_probe, reduced_reuse_config, simulate_gem, simulate_reuse, AttackKind, AttackScenario};
use cibpu::binsballs::{histogram_probs, run_conventional_overflow, run_two_skew_batched, BinsConfig, OccupancyHistogram};
use cibpu::cibtb::CibtbState;
use cibpu::trace::{gen_synthetic, parse_trace, run_trace, Predictor, SyntheticSpec};
use cibpu::{selftest, Error, SimConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "cibpu", version, about = "Secure branch prediction unit model and attack harness")]
struct Cli {
    /// TOML file whose keys mirror the configuration field names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the result here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replay a trace (or a synthetic one) through a predictor.
    RunTrace(RunTraceArgs),
    /// Single-choice overflow Monte Carlo.
    BinsConventional(ConventionalArgs),
    /// Two-choice global-replacement Monte Carlo with occupancy census.
    BinsTwoSkew(TwoSkewArgs),
    /// Closed-form attack costs and occupancy tail.
    Analytics(AnalyticsArgs),
    /// Executable attacker strategies.
    Attack(AttackArgs),
    /// Structural invariant checks and reduced-scale oracles.
    Selftest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PredictorArg {
    Baseline,
    Cibpu,
    Both,
}

#[derive(Args, Debug)]
struct RunTraceArgs {
    /// Trace file, one `tid pc kind taken target` record per line.
    #[arg(long, conflicts_with = "synthetic")]
    trace: Option<PathBuf>,
    /// Generate a synthetic trace instead of reading one.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, value_enum, default_value_t = PredictorArg::Both)]
    predictor: PredictorArg,
    #[arg(long, default_value_t = 100_000)]
    branches: u64,
    #[arg(long, default_value_t = 512)]
    working_set: u32,
    #[arg(long, default_value_t = 1)]
    threads: u32,
    #[arg(long, default_value_t = 0.9)]
    bias: f64,
}

#[derive(Args, Debug)]
struct ConventionalArgs {
    #[arg(long, default_value_t = 4096)]
    bins: u32,
    #[arg(long, default_value_t = 8)]
    capacity: u32,
    #[arg(long, default_value_t = 10_000)]
    trials: u32,
}

#[derive(Args, Debug)]
struct TwoSkewArgs {
    #[arg(long, default_value_t = 4096)]
    bins: u32,
    #[arg(long, default_value_t = 32768)]
    balls: u32,
    #[arg(long, default_value_t = 13)]
    capacity: u32,
    #[arg(long, default_value_t = 10_000_000)]
    insertions: u64,
    #[arg(long, default_value_t = 32)]
    batches: u32,
}

#[derive(Args, Debug)]
struct AnalyticsArgs {
    /// Ignore any config file and use the built-in geometry.
    #[arg(long)]
    defaults: bool,
    /// Seed the recursion from a census CSV (`N,count,probability`).
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Length of the seeding simulation when no histogram is given.
    #[arg(long, default_value_t = 10_000_000)]
    insertions: u64,
    /// Highest census level taken from the empirical distribution.
    #[arg(long, default_value_t = 6)]
    seed_index: usize,
    #[arg(long, default_value_t = 20)]
    n_max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AttackArg {
    ReusePht,
    ReuseBtb,
    Gem,
    DeProbe,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long, value_enum)]
    kind: AttackArg,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    /// Reuse: index bits per skew of the reduced geometry. GEM: set bits.
    #[arg(long)]
    index_bits: Option<u32>,
    #[arg(long)]
    tag_bits: Option<u32>,
    #[arg(long)]
    skews: Option<usize>,
    #[arg(long)]
    target_bits: Option<u32>,
    /// GEM associativity.
    #[arg(long, default_value_t = 4)]
    ways: usize,
    /// DE probe insertions.
    #[arg(long, default_value_t = 1_000_000)]
    insertions: u64,
}

struct Report {
    json: Value,
    csv: String,
}

fn load_config(cli: &Cli, ignore_file: bool) -> Result<SimConfig, Error> {
    let mut cfg = match (&cli.config, ignore_file) {
        (Some(path), false) => SimConfig::from_toml_str(&fs::read_to_string(path)?)?,
        _ => SimConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_line(cfg: &Value) -> String {
    format!("# config {cfg}\n")
}

fn run_trace_cmd(cfg: &SimConfig, a: &RunTraceArgs) -> Result<Report, Error> {
    let spec = SyntheticSpec {
        branch_count: a.branches,
        working_set_size: a.working_set,
        taken_bias: a.bias,
        thread_count: a.threads,
        seed: cfg.seed,
        ..SyntheticSpec::default()
    };
    let (records, source) = match &a.trace {
        Some(p) => (parse_trace(std::io::BufReader::new(fs::File::open(p)?))?, json!({ "file": p })),
        None if a.synthetic => (gen_synthetic(&spec)?, json!({ "synthetic": spec })),
        None => return Err(Error::Config("run-trace needs --trace or --synthetic".into())),
    };
    let predictors: &[Predictor] = match a.predictor {
        PredictorArg::Baseline => &[Predictor::Baseline],
        PredictorArg::Cibpu => &[Predictor::Cibpu],
        PredictorArg::Both => &[Predictor::Baseline, Predictor::Cibpu],
    };
    let effective = json!({ "sim": cfg, "source": source, "records": records.len() });
    let mut csv = config_line(&effective);
    csv.push_str("predictor,conditional_count,mispredictions,misprediction_rate,pht_lookups,pht_hits,btb_lookups,btb_hits,btb_misses,insertions,se_count,de_count\n");
    let mut results = Vec::new();
    for &p in predictors {
        let m = run_trace(p, cfg, &records)?;
        let _ = writeln!(
            csv,
            "{},{},{},{:e},{},{},{},{},{},{},{},{}",
            serde_json::to_value(p).unwrap_or_default().as_str().unwrap_or_default(),
            m.conditional_count,
            m.mispredictions,
            m.misprediction_rate(),
            m.pht_lookups,
            m.pht_hits,
            m.btb_lookups,
            m.btb_hits,
            m.btb_misses,
            m.insertions,
            m.se_count,
            m.de_count
        );
        results.push(json!({ "predictor": p, "metrics": m, "misprediction_rate": m.misprediction_rate() }));
    }
    Ok(Report {
        json: json!({ "command": "run-trace", "config": effective, "results": results }),
        csv,
    })
}

fn conventional_cmd(cfg: &SimConfig, a: &ConventionalArgs) -> Result<Report, Error> {
    let bins = BinsConfig {
        n_bin: a.bins,
        n_ball: 0,
        capacity: a.capacity,
        two_skew: false,
        seed: cfg.seed,
    };
    let r = run_conventional_overflow(&bins, a.trials)?;
    let effective = json!({ "bins": bins, "trials": a.trials });
    let mut csv = config_line(&effective);
    let _ = writeln!(csv, "# mean {:e} std_error {:e}", r.mean, r.std_error);
    csv.push_str("trial,accesses\n");
    for (i, s) in r.samples.iter().enumerate() {
        let _ = writeln!(csv, "{i},{s}");
    }
    Ok(Report {
        json: json!({ "command": "bins-conventional", "config": effective, "result": r }),
        csv,
    })
}

fn two_skew_cmd(cfg: &SimConfig, a: &TwoSkewArgs) -> Result<Report, Error> {
    let bins = BinsConfig {
        n_bin: a.bins,
        n_ball: a.balls,
        capacity: a.capacity,
        two_skew: true,
        seed: cfg.seed,
    };
    let r = run_two_skew_batched(&bins, a.insertions, a.batches)?;
    let dist = histogram_probs(&r.histogram)?;
    let effective = json!({ "bins": bins, "insertions": a.insertions, "batches": a.batches });
    let mut csv = config_line(&effective);
    let _ = writeln!(csv, "# de_count {}", r.de_count);
    csv.push_str(&r.histogram.to_csv());
    Ok(Report {
        json: json!({
            "command": "bins-two-skew",
            "config": effective,
            "histogram": r.histogram.counts,
            "skew_histograms": [r.skew_histograms[0].counts, r.skew_histograms[1].counts],
            "probabilities": dist.probs(),
            "de_count": r.de_count,
            "attacks_per_de": r.attacks_per_de,
        }),
        csv,
    })
}

fn analytics_cmd(cfg: &SimConfig, a: &AnalyticsArgs) -> Result<Report, Error> {
    let n_bin = cfg.btb_sets() as u32;
    let rho = cfg.btb_targets as f64 / n_bin as f64;
    let (hist, source) = match &a.histogram {
        Some(p) => (OccupancyHistogram::from_csv(&fs::read_to_string(p)?)?, json!({ "histogram": p })),
        None => {
            let bins = BinsConfig {
                n_bin,
                n_ball: cfg.btb_targets as u32,
                capacity: cfg.btb_slots_per_set() as u32,
                two_skew: true,
                seed: cfg.seed,
            };
            let r = run_two_skew_batched(&bins, a.insertions, 1)?;
            (r.histogram, json!({ "simulation": bins, "insertions": a.insertions }))
        }
    };
    let empirical = histogram_probs(&hist)?;
    if a.seed_index < 1 || a.seed_index >= empirical.len() {
        return Err(Error::Config(format!("seed index must be in 1..{}", empirical.len())));
    }
    let prefix: Vec<f64> = (0..=a.seed_index).map(|n| empirical.prob(n)).collect();
    let mut dist = balance_chain(&prefix, rho, a.n_max.max(cfg.btb_slots_per_set()), RecursionForm::Balance)?;
    dist.seed_index = Some(a.seed_index);
    let report = attack_cost_report(cfg, &dist)?;
    let effective = json!({ "sim": cfg, "seed_source": source, "seed_index": a.seed_index, "load": rho, "nominal_load": DEFAULT_LOAD });
    let mut csv = config_line(&effective);
    let _ = writeln!(
        csv,
        "# a_pht {} a_btb {} l1_est {:e} l2_est {:e} attacks_per_de {:e}",
        report.a_pht, report.a_btb, report.l1_est, report.l2_est, report.attacks_per_de
    );
    csv.push_str("N,probability,log10_probability\n");
    for (n, (p, l)) in report.distribution.iter().zip(&report.log10_distribution).enumerate() {
        let _ = writeln!(csv, "{n},{p:e},{l}");
    }
    Ok(Report {
        json: json!({ "command": "analytics", "config": effective, "report": report }),
        csv,
    })
}

fn attack_cmd(cfg: &SimConfig, a: &AttackArgs) -> Result<Report, Error> {
    let (effective, result, csv_rows) = match a.kind {
        AttackArg::ReusePht | AttackArg::ReuseBtb => {
            let reduced = a.index_bits.is_some() || a.tag_bits.is_some() || a.skews.is_some() || a.target_bits.is_some();
            let mut sim = if reduced {
                reduced_reuse_config(
                    a.index_bits.unwrap_or(2),
                    a.tag_bits.unwrap_or(2),
                    a.skews.unwrap_or(cfg.pht_skews),
                    a.target_bits.unwrap_or(4),
                )
            } else {
                cfg.clone()
            };
            sim.seed = cfg.seed;
            sim.device_secret = cfg.device_secret;
            let kind = if a.kind == AttackArg::ReusePht { AttackKind::ReusePht } else { AttackKind::ReuseBtb };
            let s = AttackScenario::new(kind, sim, a.trials, cfg.seed);
            let r = simulate_reuse(&s)?;
            let rows: Vec<String> = r.samples.iter().zip(&r.success).enumerate().map(|(i, (n, ok))| format!("{i},{n},{ok}")).collect();
            (json!({ "scenario": s }), serde_json::to_value(&r).unwrap_or_default(), ("trial,attempts,success", rows))
        }
        AttackArg::Gem => {
            let bits = a.index_bits.unwrap_or(6);
            let r = simulate_gem(bits, a.ways, a.trials as u32, cfg.seed)?;
            let rows = r.trials.iter().enumerate().map(|(i, t)| format!("{i},{},{},{}", t.outcome.accesses, t.pool_size, t.outcome.eviction_set.len())).collect();
            (
                json!({ "index_bits": bits, "ways": a.ways, "trials": a.trials, "seed": cfg.seed }),
                serde_json::to_value(&r).unwrap_or_default(),
                ("trial,accesses,pool_size,set_size", rows),
            )
        }
        AttackArg::DeProbe => {
            let mut btb = CibtbState::new(cfg)?;
            let r = de_probe(&mut btb, a.insertions, cfg.seed)?;
            let audit = btb.audit();
            if let Some(v) = audit.first() {
                return Err(Error::Invariant(v.clone()));
            }
            let row = format!("{},{},{},{}", r.insertions, r.de_count, r.se_count, r.first_de_at.map(|x| x.to_string()).unwrap_or_default());
            (
                json!({ "sim": cfg, "insertions": a.insertions }),
                serde_json::to_value(r).unwrap_or_default(),
                ("insertions,de_count,se_count,first_de_at", vec![row]),
            )
        }
    };
    let mut csv = config_line(&effective);
    csv.push_str(csv_rows.0);
    csv.push('\n');
    for r in csv_rows.1 {
        csv.push_str(&r);
        csv.push('\n');
    }
    Ok(Report {
        json: json!({ "command": "attack", "config": effective, "result": result }),
        csv,
    })
}

fn selftest_cmd(cfg: &SimConfig) -> Result<(Report, bool), Error> {
    let r = selftest::run(cfg)?;
    let effective = json!({ "sim": cfg });
    let mut csv = config_line(&effective);
    csv.push_str("check,pass,detail\n");
    for c in &r.checks {
        let _ = writeln!(csv, "{},{},\"{}\"", c.name, c.pass, c.detail);
    }
    let pass = r.passed();
    Ok((
        Report {
            json: json!({ "command": "selftest", "config": effective, "passed": pass, "checks": r.checks }),
            csv,
        },
        pass,
    ))
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let ignore_file = matches!(&cli.command, Command::Analytics(a) if a.defaults);
    let cfg = load_config(cli, ignore_file)?;
    let (report, pass) = match &cli.command {
        Command::RunTrace(a) => (run_trace_cmd(&cfg, a)?, true),
        Command::BinsConventional(a) => (conventional_cmd(&cfg, a)?, true),
        Command::BinsTwoSkew(a) => (two_skew_cmd(&cfg, a)?, true),
        Command::Analytics(a) => (analytics_cmd(&cfg, a)?, true),
        Command::Attack(a) => (attack_cmd(&cfg, a)?, true),
        Command::Selftest => selftest_cmd(&cfg)?,
    };
    let text = match cli.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&report.json).map_err(|e| Error::Config(e.to_string()))?;
            s.push('\n');
            s
        }
        Format::Csv => report.csv,
    };
    match &cli.output {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("selftest failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invariant() { 3 } else { 2 })
        }
    }
}
