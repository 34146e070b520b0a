//! The `seqkv` command line.
//!
//! Every run prints the resolved configuration as `# config key=value` lines
//! before anything else. Exit codes: 0 success, 1 verification failure,
//! 2 usage error, 3 I/O or format error.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::analyzer::asymptotic::model_trace;
use crate::analyzer::claims::{verify_all, VerifyOptions};
use crate::analyzer::workload::{generate_workload, read_workload, write_workload, WorkloadFile};
use crate::codec::ratio::{theoretical_ratio, RatioInputs};
use crate::codec::CompressedCache;
use crate::config::RunConfig;
use crate::error::Error;
use crate::index::cluster_table;
use crate::model::{lipschitz_estimate, Model};
use crate::pipeline::{build_index, run_compression, verify_roundtrip};
use crate::report::{Format, Table};

#[derive(Debug, Parser)]
#[command(
    name = "seqkv",
    version,
    about = "Sequential KV-cache compression and entropy checks"
)]
pub struct Cli {
    /// Config file of key=value lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Workload sampling seed (overrides workload_seed).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output file for gen, compress and decompress.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Report format.
    #[arg(
        long,
        global = true,
        default_value = "text",
        value_name = "text|records"
    )]
    pub format: Format,
    /// Config override, applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic workload file.
    Gen,
    /// Cluster and compress a workload into a container file.
    Compress { workload: PathBuf },
    /// Decode a container file and check the reconstruction error bound.
    Decompress {
        container: PathBuf,
        /// Workload with the true tokens to check against.
        #[arg(long, value_name = "PATH")]
        workload: Option<PathBuf>,
    },
    /// Run the full claim matrix.
    Verify,
    /// Closed-form storage ratios for a transformer KV cache.
    Ratio(RatioArgs),
    /// Model constants and, given a workload, its cluster assignments.
    Stats { workload: Option<PathBuf> },
}

#[derive(Debug, Args)]
pub struct RatioArgs {
    #[arg(long, default_value_t = 80.0)]
    pub layers: f64,
    #[arg(long, default_value_t = 64.0)]
    pub heads: f64,
    #[arg(long, default_value_t = 128.0)]
    pub head_dim: f64,
    #[arg(long, default_value_t = 3.0)]
    pub bits: f64,
    #[arg(long, default_value_t = 4.3)]
    pub mean_surprisal: f64,
    #[arg(long, default_value_t = 1.0)]
    pub overhead: f64,
}

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    Verification(String),
    Usage(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Verification(_) => 1,
            Self::Usage(_) => 2,
            Self::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Verification(m) => write!(f, "verification failed: {m}"),
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Io(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::ConfigParse { .. } => {
                Self::Usage(e.to_string())
            }
            _ => Self::Io(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

/// What a command printed before it finished or failed.
pub struct Outcome {
    pub stdout: String,
    pub result: Result<(), Failure>,
}

pub fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.overrides.iter().map(String::as_str))?;
    if let Some(seed) = cli.seed {
        cfg.workload.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(out: &mut String, cfg: &RunConfig) {
    for line in cfg.echo().lines() {
        let _ = writeln!(out, "# config {line}");
    }
}

fn section(out: &mut String, title: &str, table: &Table, format: Format) {
    let _ = writeln!(out, "## {title}");
    out.push_str(&table.render(format));
}

fn kv_table(rows: &[(&str, String)]) -> Table {
    let mut t = Table::new(["quantity", "value"]);
    for (k, v) in rows {
        t.push([k.to_string(), v.clone()]);
    }
    t
}

fn require_out(cli: &Cli, command: &str) -> Result<PathBuf, Failure> {
    cli.out
        .clone()
        .ok_or_else(|| Failure::Usage(format!("{command} needs --out PATH")))
}

fn read_workload_file(path: &Path, model: &Model) -> Result<WorkloadFile, Failure> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let w = read_workload(BufReader::new(file))
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    if w.fingerprint != model.fingerprint() {
        return Err(Failure::Io(format!(
            "{}: workload fingerprint {:016x} does not match model {:016x}",
            path.display(),
            w.fingerprint,
            model.fingerprint()
        )));
    }
    Ok(w)
}

/// Runs `cli`, collecting stdout. Side-effect files are written directly.
pub fn run(cli: &Cli) -> Outcome {
    let mut stdout = String::new();
    let result = dispatch(cli, &mut stdout);
    Outcome { stdout, result }
}

fn dispatch(cli: &Cli, out: &mut String) -> Result<(), Failure> {
    if let Command::Ratio(args) = &cli.command {
        return cmd_ratio(args, cli.format, out);
    }
    let cfg = load_config(cli)?;
    echo_config(out, &cfg);
    let model = Arc::new(Model::build(cfg.model)?);
    let _ = writeln!(out, "# model fingerprint={:016x}", model.fingerprint());
    match &cli.command {
        Command::Gen => cmd_gen(cli, &cfg, &model, out),
        Command::Compress { workload } => cmd_compress(cli, &cfg, &model, workload, out),
        Command::Decompress {
            container,
            workload,
        } => cmd_decompress(cli, &model, container, workload.as_deref(), out),
        Command::Verify => cmd_verify(cli, &cfg, &model, out),
        Command::Stats { workload } => cmd_stats(cli, &cfg, &model, workload.as_deref(), out),
        Command::Ratio(_) => unreachable!("handled above"),
    }
}

fn cmd_gen(cli: &Cli, cfg: &RunConfig, model: &Model, out: &mut String) -> Result<(), Failure> {
    let path = require_out(cli, "gen")?;
    let w = generate_workload(model, &cfg.workload)?;
    let mut bytes = Vec::new();
    write_workload(
        &mut bytes,
        model.fingerprint(),
        Some(w.suggested_threshold),
        &w.sessions,
    )?;
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    let table = kv_table(&[
        ("sessions", w.sessions.len().to_string()),
        ("group_sessions", w.group.len().to_string()),
        (
            "centroid",
            w.centroid.map_or_else(|| "none".into(), |c| c.to_string()),
        ),
        ("shared_prefix_len", w.shared_prefix_len.to_string()),
        (
            "shared_information_bits",
            format!("{:.9}", w.shared_information),
        ),
        (
            "achieved_cluster_fraction",
            format!("{:.6}", w.achieved_fraction),
        ),
        (
            "achieved_tail_ratio",
            format!("{:.6}", w.achieved_tail_ratio),
        ),
        (
            "suggested_threshold_bits",
            format!("{:.9}", w.suggested_threshold),
        ),
    ]);
    section(out, "workload", &table, cli.format);
    Ok(())
}

fn cmd_compress(
    cli: &Cli,
    cfg: &RunConfig,
    model: &Arc<Model>,
    workload: &Path,
    out: &mut String,
) -> Result<(), Failure> {
    let path = require_out(cli, "compress")?;
    let w = read_workload_file(workload, model)?;
    let settings = cfg.cluster(w.suggested_threshold);
    let run = run_compression(model, &w.sessions, &settings, &cfg.codec())?;
    fs::write(&path, &run.bytes).map_err(|e| io_err(&path, e))?;

    let tokens = run.token_count();
    let multi = run.clusters.iter().filter(|c| c.len() >= 2).count();
    let resolved = run.compressed.config.echo(model.config(), None);
    let mut rows = vec![
        ("threshold_bits", format!("{}", settings.threshold)),
        ("criterion", settings.criterion.to_string()),
        ("sessions", w.sessions.len().to_string()),
        ("tokens", tokens.to_string()),
        ("clusters", multi.to_string()),
        (
            "containers",
            run.compressed.cache.containers.len().to_string(),
        ),
        ("total_bits", run.bits().to_string()),
        (
            "bits_per_token",
            format!("{:.6}", run.bits() as f64 / tokens as f64),
        ),
        ("unclustered_bits", run.unclustered_bits.to_string()),
        ("raw_bits", run.raw_bits.to_string()),
    ];
    if let Some(h) = resolved
        .lines()
        .find_map(|l| l.strip_prefix("mean_surprisal="))
    {
        rows.push(("resolved_mean_surprisal", h.to_string()));
    }
    section(out, "compression", &kv_table(&rows), cli.format);
    section(out, "storage", &run.storage.table(), cli.format);
    let s = &run.savings;
    let savings = kv_table(&[
        ("baseline_bits", s.baseline_bits.to_string()),
        ("total_bits", s.total_bits.to_string()),
        ("layer1_saved_bits", s.layer1.to_string()),
        ("layer2_saved_bits", s.layer2.to_string()),
        ("total_saved_bits", s.total_saved().to_string()),
        ("additive", s.is_additive().to_string()),
    ]);
    section(out, "layer_savings", &savings, cli.format);
    Ok(())
}

fn cmd_decompress(
    cli: &Cli,
    model: &Model,
    container: &Path,
    workload: Option<&Path>,
    out: &mut String,
) -> Result<(), Failure> {
    let bytes = fs::read(container).map_err(|e| io_err(container, e))?;
    let cache = CompressedCache::from_bytes(&bytes)?;
    let reference = match workload {
        Some(p) => Some(read_workload_file(p, model)?.sessions),
        None => None,
    };
    let report = verify_roundtrip(&cache, model, reference.as_ref())?;
    if let Some(path) = &cli.out {
        let mut dump = String::new();
        for (id, (tokens, kv)) in &report.decoded {
            for i in 0..kv.n_positions() {
                let values: Vec<String> = kv.position(i).iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(dump, "{id} {} {} {}", i + 1, tokens[i], values.join(" "));
            }
        }
        fs::write(path, dump).map_err(|e| io_err(path, e))?;
    }
    let table = kv_table(&[
        ("sessions", report.sessions.to_string()),
        ("positions", report.positions.to_string()),
        ("max_abs_error", format!("{:.9e}", report.max_abs_error)),
        ("min_bound_margin", format!("{:.9e}", report.min_margin)),
        ("bound_violations", report.violations.to_string()),
        ("token_mismatches", report.token_mismatches.to_string()),
    ]);
    section(out, "decompression", &table, cli.format);
    if !report.holds() || report.token_mismatches > 0 {
        return Err(Failure::Verification(format!(
            "{} positions exceed the codec error bound, {} sessions decode to other tokens",
            report.violations, report.token_mismatches
        )));
    }
    Ok(())
}

fn cmd_verify(cli: &Cli, cfg: &RunConfig, model: &Model, out: &mut String) -> Result<(), Failure> {
    let options = VerifyOptions {
        model: cfg.model,
        seed: cfg.workload.seed,
        ..VerifyOptions::default()
    };
    let matrix = verify_all(&options)?;
    section(out, "claims", &matrix.table(), cli.format);
    let trace = model_trace(model, model.config().max_context.min(8))?;
    section(out, "toy_model_entropy_trace", &trace.table(), cli.format);
    if !matrix.all_pass() {
        let names: Vec<&str> = matrix.failures().map(|r| r.claim).collect();
        return Err(Failure::Verification(names.join(", ")));
    }
    Ok(())
}

fn cmd_ratio(args: &RatioArgs, format: Format, out: &mut String) -> Result<(), Failure> {
    let inputs = RatioInputs {
        layers: args.layers,
        heads: args.heads,
        head_dim: args.head_dim,
        bits: args.bits,
        mean_surprisal: args.mean_surprisal,
        overhead: args.overhead,
    };
    let ratios = theoretical_ratio(&inputs)?;
    section(out, "ratio", &ratios.table(&inputs), format);
    Ok(())
}

fn cmd_stats(
    cli: &Cli,
    cfg: &RunConfig,
    model: &Arc<Model>,
    workload: Option<&Path>,
    out: &mut String,
) -> Result<(), Failure> {
    let ctx = model.config().max_context.saturating_sub(1).min(3);
    let lip = lipschitz_estimate(model, ctx)?;
    let per_layer: Vec<String> = lip.per_layer.iter().map(|k| format!("{k:.6}")).collect();
    let table = kv_table(&[
        ("kv_stride", model.config().kv_stride().to_string()),
        (
            "embedding_diameter",
            format!("{:.9}", model.embedding_diameter()),
        ),
        ("per_layer_lipschitz", per_layer.join(",")),
        ("kappa", format!("{:.9}", lip.kappa)),
        ("kv_lipschitz", format!("{:.9}", lip.kv_lipschitz())),
        ("max_kv_over_embedding", format!("{:.9}", lip.full_kv_ratio)),
        ("lipschitz_contexts_up_to", lip.max_context_len.to_string()),
    ]);
    section(out, "model", &table, cli.format);
    if let Some(path) = workload {
        let w = read_workload_file(path, model)?;
        let settings = cfg.cluster(w.suggested_threshold);
        let index = build_index(model, &w.sessions, settings.epsilon)?;
        let clusters = index.cluster(settings.threshold, settings.criterion)?;
        let mut surprisal = 0.0;
        let mut tokens = 0usize;
        for s in w.sessions.values() {
            let t = model.surprisal_trace(s)?;
            surprisal += t.surprisal.iter().sum::<f64>();
            tokens += t.surprisal.len();
        }
        let summary = kv_table(&[
            ("sessions", w.sessions.len().to_string()),
            ("tokens", tokens.to_string()),
            (
                "mean_surprisal_bits",
                format!("{:.9}", surprisal / tokens.max(1) as f64),
            ),
            ("trie_nodes", index.node_count().to_string()),
            ("threshold_bits", settings.threshold.to_string()),
            ("clusters", clusters.len().to_string()),
        ]);
        section(out, "workload", &summary, cli.format);
        section(out, "clusters", &cluster_table(&clusters), cli.format);
    }
    Ok(())
}
