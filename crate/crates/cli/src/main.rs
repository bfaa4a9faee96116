//! Command-line surface: generate compaction inputs, run baseline/offload
//! jobs, sweep merge algorithms, benchmark boundary crossings, and dump
//! on-disk structures.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 oracle
//! mismatch under `compact --verify-oracle`.

mod bench;
mod dump;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use resystance_core::blockio::CrossingCostModel;
use resystance_core::compaction::{run_job, Engine, JobConfig, MergeAlgoChoice};
use resystance_core::merge::DEFAULT_ALGO_THRESHOLD;
use resystance_core::oracle;
use resystance_core::sstable::open_sstable;
use resystance_core::workload::{describe_generated, generate_inputs, KeyDist, WorkloadSpec};

/// Inputs larger than this skip `--verify-oracle`: the reference merge
/// sorts everything in memory.
const ORACLE_INPUT_LIMIT: u64 = 64 << 20;

#[derive(Parser)]
#[command(name = "resystance", version, about = "Compaction data-path lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate sorted input tables and print their manifest as JSON
    Gen(GenArgs),
    /// Run one compaction job and print its report as JSON
    Compact(CompactArgs),
    /// Sweep merge algorithms over input counts and value sizes (CSV)
    BenchMerge(bench::BenchMergeArgs),
    /// Paired baseline/offload crossing benchmark over a size grid (CSV)
    BenchCrossings(bench::BenchCrossingsArgs),
    /// Print an SSTable's header, index, and records as JSON
    Sstdump(dump::SstdumpArgs),
    /// Block-plan tooling
    Sstmap(dump::SstmapCmd),
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Args)]
struct GenArgs {
    /// Number of input tables
    #[arg(long = "inputs", default_value_t = 4)]
    n_inputs: usize,
    /// Records per input table
    #[arg(long, default_value_t = 1000)]
    records: usize,
    #[arg(long, default_value_t = 16)]
    key_len: usize,
    #[arg(long, default_value_t = 1024)]
    value_len: usize,
    /// Fraction of later inputs' keys reused from earlier inputs
    #[arg(long = "dup", value_parser = parse_fraction, default_value_t = 0.0)]
    duplicate_fraction: f64,
    /// Fraction of records written as tombstones
    #[arg(long = "tombstones", value_parser = parse_fraction, default_value_t = 0.0)]
    tombstone_fraction: f64,
    #[arg(long, env = "RESYSTANCE_SEED", default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DistArg::Uniform)]
    dist: DistArg,
    /// Zipfian exponent, used with --dist zipfian
    #[arg(long, default_value_t = 0.99)]
    theta: f64,
    #[arg(long, default_value_t = resystance_core::DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    #[arg(long, default_value = "workload")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Uniform,
    Zipfian,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Baseline,
    Offload,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Engine {
        match e {
            EngineArg::Baseline => Engine::Baseline,
            EngineArg::Offload => Engine::Offload,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeArg {
    Linear,
    Minheap,
    Auto,
}

#[derive(Args)]
struct CompactArgs {
    /// Input tables, oldest first
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    engine: EngineArg,
    #[arg(long, value_enum, default_value_t = MergeArg::Auto)]
    merge: MergeArg,
    /// Input count at and below which auto picks the linear engine
    #[arg(long, default_value_t = DEFAULT_ALGO_THRESHOLD)]
    auto_threshold: usize,
    #[arg(long, default_value = "compact_out")]
    out_dir: PathBuf,
    /// Write-buffer threshold in bytes
    #[arg(long = "write-buffer-bytes", default_value_t = resystance_core::merge::DEFAULT_WRITE_BUFFER_THRESHOLD)]
    write_buffer_bytes: usize,
    #[arg(long = "target-sst-bytes", default_value_t = resystance_core::sstable::DEFAULT_TARGET_SST_SIZE)]
    target_sst_bytes: u64,
    #[arg(long)]
    drop_tombstones: bool,
    /// Injected delay per boundary crossing, microseconds
    #[arg(long = "crossing-cost-us", default_value_t = 0)]
    crossing_cost_us: u64,
    #[arg(long, default_value_t = resystance_core::blockio::DEFAULT_QUEUE_DEPTH)]
    queue_depth: usize,
    #[arg(long, default_value_t = 1)]
    prefetch_depth: usize,
    /// Also run the brute-force reference merge and compare (small inputs)
    #[arg(long)]
    verify_oracle: bool,
    /// Write the block-read log as JSONL to this path
    #[arg(long)]
    read_log: Option<PathBuf>,
    /// Write the report JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Compact(args) => cmd_compact(args),
        Cmd::BenchMerge(args) => bench::cmd_bench_merge(args),
        Cmd::BenchCrossings(args) => bench::cmd_bench_crossings(args),
        Cmd::Sstdump(args) => dump::cmd_sstdump(args),
        Cmd::Sstmap(cmd) => dump::cmd_sstmap(cmd),
    }
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<ExitCode> {
    let spec = WorkloadSpec {
        n_inputs: args.n_inputs,
        records_per_input: args.records,
        key_len: args.key_len,
        value_len: args.value_len,
        duplicate_fraction: args.duplicate_fraction,
        tombstone_fraction: args.tombstone_fraction,
        seed: args.seed,
        distribution: match args.dist {
            DistArg::Uniform => KeyDist::Uniform,
            DistArg::Zipfian => KeyDist::Zipfian { theta: args.theta },
        },
        block_size: args.block_size,
    };
    let metas = generate_inputs(&spec, &args.out_dir).context("generating workload")?;
    let files = describe_generated(&metas)?;
    let manifest = serde_json::json!({ "spec": spec, "files": files });
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_compact(args: CompactArgs) -> anyhow::Result<ExitCode> {
    // the job adopts the block size the inputs were built with
    let first = open_sstable(&args.inputs[0], 0).context("opening first input")?;
    let mut cfg = JobConfig::new(args.inputs.clone(), args.out_dir.clone())
        .with_block_size(first.block_size as usize);
    cfg.write_buffer_threshold = args.write_buffer_bytes;
    cfg.target_sst_size = args.target_sst_bytes;
    cfg.merge_algo = match args.merge {
        MergeArg::Linear => MergeAlgoChoice::Linear,
        MergeArg::Minheap => MergeAlgoChoice::MinHeap,
        MergeArg::Auto => MergeAlgoChoice::Auto {
            threshold: args.auto_threshold,
        },
    };
    cfg.drop_tombstones = args.drop_tombstones;
    cfg.cost = CrossingCostModel::with_delay_us(args.crossing_cost_us);
    cfg.queue_depth = args.queue_depth;
    cfg.prefetch_depth = args.prefetch_depth;

    let run = run_job(&cfg, args.engine.into()).context("running compaction")?;

    if let Some(path) = &args.read_log {
        let mut jsonl = Vec::new();
        for e in &run.read_log {
            serde_json::to_writer(&mut jsonl, e)?;
            jsonl.push(b'\n');
        }
        std::fs::write(path, jsonl).context("writing read log")?;
    }

    let json = serde_json::to_string_pretty(&run.report)?;
    match &args.out {
        Some(path) => std::fs::write(path, json).context("writing report")?,
        None => println!("{json}"),
    }

    if args.verify_oracle {
        let total: u64 = args
            .inputs
            .iter()
            .map(|p| std::fs::metadata(p).map(|m| m.len()).unwrap_or(0))
            .sum();
        if total > ORACLE_INPUT_LIMIT {
            bail!(
                "--verify-oracle refused: {total} input bytes exceed the {ORACLE_INPUT_LIMIT}-byte limit"
            );
        }
        let input_metas: Vec<_> = args
            .inputs
            .iter()
            .enumerate()
            .map(|(i, p)| open_sstable(p, i as u64))
            .collect::<Result<_, _>>()?;
        let want = oracle::merge_tables(&input_metas, cfg.drop_tombstones)?;
        let got = oracle::read_output_records(&run.output_metas)?;
        if got != want {
            eprintln!(
                "oracle mismatch: merged {} records, reference has {}",
                got.len(),
                want.len()
            );
            return Ok(ExitCode::from(3));
        }
    }
    Ok(ExitCode::SUCCESS)
}
