use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use subvocab::bench::{ablation_sweep, prepare_workload, run_benchmark, AblationAxis, BenchConfig, QueryModel, ShardSettings, Variant};
use subvocab::bounds::BoundMode;
use subvocab::cluster::{build_index, default_cluster_count, validate_index, BuildParams, ClusterIndex, ClusterMode};
use subvocab::decode::DecodeConfig;
use subvocab::shard::ShardStrategy;
use subvocab::tensor_io::{synth_mixture, EmbeddingTable};
use subvocab::verify::run_suite;
use subvocab::Error;

const EXIT_VIOLATION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

/// Certified sub-vocabulary decoding: build cluster indices, verify their
/// guarantees against a dense oracle, and benchmark pruned decoding.
///
/// Exit codes: 0 success, 1 violation found, 2 usage error, 3 I/O error.
/// CSVD_THREADS caps worker threads (0 or unset = all cores).
#[derive(Debug, Parser)]
#[command(name = "subvocab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture embedding table.
    Synth(SynthArgs),
    /// Cluster a table into an index file and validate it.
    Cluster(ClusterArgs),
    /// Run the oracle soundness suite on a table and index.
    Verify(VerifyArgs),
    /// Run an oracle-validated benchmark (optionally an ablation sweep).
    Bench(BenchArgs),
    /// Run the benchmark through the sharding simulation.
    ShardSim(ShardArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Vocabulary size V.
    #[arg(long, default_value_t = 5000)]
    vocab: usize,
    /// Hidden dimension d.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Number of mixture modes.
    #[arg(long, default_value_t = 50)]
    modes: usize,
    /// Typical distance of a row from its mode center.
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output table (.csvd).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Input table (.csvd).
    #[arg(long)]
    input: PathBuf,
    /// Cluster count (default round(0.015 V)).
    #[arg(long = "C", alias = "clusters")]
    clusters: Option<usize>,
    /// euclidean, spherical or bias_augmented.
    #[arg(long, default_value = "euclidean")]
    mode: ClusterMode,
    /// Maximum Lloyd iterations.
    #[arg(long, default_value_t = subvocab::cluster::DEFAULT_ITERS)]
    iters: usize,
    /// Depth of the per-cluster top bias table.
    #[arg(long, default_value_t = subvocab::cluster::DEFAULT_BIAS_DEPTH)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output index (.csvi).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Table (.csvd).
    #[arg(long)]
    table: PathBuf,
    /// Index (.csvi) built from the table.
    #[arg(long)]
    index: PathBuf,
    /// Queries to check.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = subvocab::decode::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = subvocab::decode::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Write every reproducer as JSON to this file.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WorkloadArgs {
    /// Existing table (.csvd); without it a synthetic table is generated.
    #[arg(long, conflicts_with = "synth")]
    table: Option<PathBuf>,
    /// Existing index (.csvi) for --table; built from the config otherwise.
    #[arg(long, requires = "table")]
    index: Option<PathBuf>,
    /// Generate the synthetic table described by the config (the default).
    #[arg(long)]
    synth: bool,
    /// JSON config, the same schema as the `config` field of report.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cluster count.
    #[arg(long = "C", alias = "clusters")]
    clusters: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Token budget K_max.
    #[arg(long)]
    k_max: Option<usize>,
    /// euclidean or spherical.
    #[arg(long)]
    bound_mode: Option<BoundMode>,
    /// Use random queries of this norm instead of contextual ones.
    #[arg(long)]
    random_queries: Option<f64>,
    /// Enable the adaptive budget controller.
    #[arg(long)]
    adaptive: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// incremental or batchselect.
    #[arg(long)]
    variant: Option<String>,
    /// Ablation axis: clusters, epsilon, k_max, bound_mode or shard_n.
    #[arg(long, requires = "values")]
    sweep: Option<AblationAxis>,
    /// Comma-separated values for --sweep.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Debug, Args)]
struct ShardArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Number of logical workers.
    #[arg(long = "N", alias = "workers", default_value_t = 4)]
    workers: usize,
    /// round_robin, hotness_weighted or semantic_grouped.
    #[arg(long, default_value = "round_robin")]
    strategy: ShardStrategy,
}

#[derive(Debug)]
enum Failure {
    Violation(String),
    Usage(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Format(_) | Error::Csv(_) => Failure::Io(e.to_string()),
            Error::OracleViolation { .. } => Failure::Violation(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::ShardSim(a) => cmd_shard_sim(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violation(m)) => {
            eprintln!("violation: {m}");
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_IO)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("CSVD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| format!("CSVD_THREADS must be a count, got '{raw}'"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn load_table(path: &Path) -> Result<EmbeddingTable, Failure> {
    EmbeddingTable::load(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_index(path: &Path) -> Result<ClusterIndex, Failure> {
    ClusterIndex::load(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let m = synth_mixture(a.vocab, a.dim, a.modes, a.spread, a.seed)?;
    m.table.save(&a.out)?;
    println!("wrote {} (V={}, d={}, fingerprint {})", a.out.display(), a.vocab, a.dim, hex::encode(m.table.fingerprint()));
    Ok(())
}

fn cmd_cluster(a: ClusterArgs) -> CmdResult {
    let table = load_table(&a.input)?;
    let v = table.vocab_size();
    let c = a.clusters.unwrap_or_else(|| default_cluster_count(v));
    if c == 0 || c > v {
        return Err(Failure::Usage(format!("--C must lie in [1, {v}], got {c}")));
    }
    let params = BuildParams::new(c, a.mode).with_iters(a.iters).with_bias_depth(a.m).with_seed(a.seed);
    let index = build_index(&table, &params)?;
    let report = validate_index(&index, &table)?;
    if !report.is_clean() {
        for v in &report.violations {
            eprintln!("{v}");
        }
        return Err(Failure::Violation(format!("{} index violations", report.violations.len())));
    }
    index.save(&a.out)?;
    let sizes: Vec<usize> = index.clusters.iter().map(|m| m.size()).collect();
    println!("clusters {} mode {}", index.num_clusters(), index.mode);
    println!("radius mean {:.6} max {:.6}", index.mean_radius(), index.max_radius());
    println!(
        "cluster size min {} max {}",
        sizes.iter().min().copied().unwrap_or(0),
        sizes.iter().max().copied().unwrap_or(0)
    );
    println!("validation: 0 violations");
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let table = load_table(&a.table)?;
    let index = load_index(&a.index)?;
    let cfg = DecodeConfig { k: a.k, epsilon: a.epsilon, ..DecodeConfig::default() };
    let report = run_suite(&table, &index, &cfg, a.steps, a.seed)?;
    println!(
        "steps {} bound checks {} certified steps {}",
        report.steps, report.bound_checks, report.certified_steps
    );
    println!("{} violations", report.violations.len());
    if let Some(path) = &a.dump {
        std::fs::write(path, serde_json::to_vec_pretty(&report.violations).map_err(Error::from)?)
            .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    }
    if let Some(first) = report.violations.first() {
        println!("{}", serde_json::to_string(first).map_err(Error::from)?);
        return Err(Failure::Violation(format!("{} soundness violations", report.violations.len())));
    }
    Ok(())
}

fn resolve_config(w: &WorkloadArgs) -> Result<BenchConfig, Failure> {
    let mut cfg = match &w.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => BenchConfig::default(),
    };
    if let Some(s) = w.steps {
        cfg.steps = s;
    }
    if let Some(s) = w.seed {
        cfg.seed = s;
    }
    if let Some(c) = w.clusters {
        cfg.clusters = c;
    }
    if let Some(k) = w.k {
        cfg.decode.k = k;
    }
    if let Some(e) = w.epsilon {
        cfg.decode.epsilon = e;
    }
    if let Some(k) = w.k_max {
        cfg.decode.k_max = k;
    }
    if let Some(m) = w.bound_mode {
        cfg.decode.bound_mode = m;
    }
    if let Some(scale) = w.random_queries {
        cfg.query = QueryModel::Random { scale };
    }
    if w.adaptive {
        cfg.decode.adaptive.enabled = true;
    }
    Ok(cfg)
}

fn workload(w: &WorkloadArgs, cfg: &BenchConfig) -> Result<(EmbeddingTable, ClusterIndex), Failure> {
    match &w.table {
        None => {
            let (table, index) = prepare_workload(cfg)?;
            Ok((table, index))
        }
        Some(path) => {
            let table = load_table(path)?;
            let v = table.vocab_size();
            if cfg.cluster_count(v) > v {
                return Err(Failure::Usage(format!("cluster count exceeds V = {v}")));
            }
            let index = match &w.index {
                Some(p) => load_index(p)?,
                None => build_index(&table, &cfg.build_params(v))?,
            };
            Ok((table, index))
        }
    }
}

fn print_summary(report: &subvocab::bench::RunReport) {
    let a = &report.aggregates;
    println!("steps {} clusters {}", a.steps, report.index.clusters);
    println!("ratio mean {:.4} p50 {:.4} p95 {:.4}", a.ratio.mean, a.ratio.p50, a.ratio.p95);
    println!("rho_cert {:.4} rho_fall {:.4}", a.rho_cert, a.rho_fall);
    println!("xi mean {:.4} over {} steps", a.xi.mean, a.xi_count);
    println!("speedup proxy {:.3}", a.speedup_at_mean);
    println!("oracle checked {} violations {}", report.oracle.checked, report.oracle.violations);
    println!("outcome hash {}", report.outcome_hash);
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let mut cfg = resolve_config(&a.workload)?;
    if let Some(v) = &a.variant {
        cfg.variant = match v.as_str() {
            "incremental" => Variant::Incremental,
            "batchselect" => Variant::Batchselect,
            other => return Err(Failure::Usage(format!("unknown variant '{other}'"))),
        };
    }
    let (table, index) = workload(&a.workload, &cfg)?;
    let out = &a.workload.out;
    if let Some(axis) = a.sweep {
        let sweep = ablation_sweep(&table, axis, &a.values, &cfg)?;
        std::fs::create_dir_all(out).map_err(Error::from)?;
        std::fs::write(out.join("ablation.json"), serde_json::to_vec_pretty(&sweep).map_err(Error::from)?)
            .map_err(Error::from)?;
        println!("value,clusters,ratio_mean,rho_cert,rho_fall,speedup");
        for r in &sweep.rows {
            let g = &r.aggregates;
            println!(
                "{},{},{:.4},{:.4},{:.4},{:.3}",
                r.value, r.clusters, g.ratio.mean, g.rho_cert, g.rho_fall, g.speedup_at_mean
            );
        }
        if !sweep.failed_expectations.is_empty() {
            return Err(Failure::Violation(sweep.failed_expectations.join("; ")));
        }
        return Ok(());
    }
    let report = run_benchmark(&table, &index, &cfg)?;
    report.write_to(out)?;
    print_summary(&report);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_shard_sim(a: ShardArgs) -> CmdResult {
    let mut cfg = resolve_config(&a.workload)?;
    if a.workers == 0 {
        return Err(Failure::Usage("--N must be at least 1".into()));
    }
    cfg.variant = Variant::Batchselect;
    cfg.shard = Some(ShardSettings { workers: a.workers, strategy: a.strategy, ..cfg.shard.unwrap_or_default() });
    let (table, index) = workload(&a.workload, &cfg)?;
    let report = run_benchmark(&table, &index, &cfg)?;
    report.write_to(&a.workload.out)?;
    if let Some(plan) = &report.shard_plan {
        plan.save(a.workload.out.join("plan.json"))?;
        println!("workers {} strategy {} load std {:.4}", plan.workers, plan.strategy, plan.load_std);
    }
    let n = report.records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&subvocab::bench::StepRecord) -> f64| report.records.iter().map(f).sum::<f64>() / n;
    println!("bounds bytes/step {:.1}", mean(&|r| r.bytes_bounds_phase.unwrap_or(0) as f64));
    println!("logits bytes/step {:.1}", mean(&|r| r.bytes_logits_phase.unwrap_or(0) as f64));
    println!("omega_comm mean {:.4}", mean(&|r| r.omega_comm.unwrap_or(0.0)));
    print_summary(&report);
    Ok(())
}
