//! Benchmark commands: the merge-algorithm sweep and the paired
//! baseline/offload crossing grid. Both emit schema-stable CSV to `--out`
//! and are deterministic given a seed (wall times excepted).

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context};
use clap::Args;
use serde::Serialize;

use resystance_core::blockio::CrossingCostModel;
use resystance_core::compaction::{run_baseline, run_offload, JobConfig, MergeAlgoChoice};
use resystance_core::kv::RECORD_HEADER_LEN;
use resystance_core::workload::{generate_inputs, WorkloadSpec};

#[derive(Args)]
pub struct BenchMergeArgs {
    #[arg(long, default_value_t = 2)]
    n_min: usize,
    #[arg(long, default_value_t = 16)]
    n_max: usize,
    /// Value sizes to sweep, comma-separated
    #[arg(long = "values", value_delimiter = ',', default_value = "128,1024")]
    value_lens: Vec<usize>,
    /// Records per input table
    #[arg(long, default_value_t = 2048)]
    records: usize,
    /// Repetitions per cell; wall time is the median
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, env = "RESYSTANCE_SEED", default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = resystance_core::DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    /// Scratch directory for generated inputs and outputs; a temp dir when
    /// omitted
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Cells run in parallel
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV output path
    #[arg(long, required = true)]
    out: PathBuf,
}

/// One row per (engine, merge_algo, n_inputs, value_len) cell.
#[derive(Debug, Clone, Serialize)]
struct BenchResultRow {
    engine: String,
    merge_algo: String,
    n_inputs: usize,
    value_len: usize,
    wall_ms: f64,
    read_crossings: u64,
    write_crossings: u64,
    comparisons: u64,
    records_merged: u64,
    output_sha256: String,
}

pub fn cmd_bench_merge(args: BenchMergeArgs) -> anyhow::Result<ExitCode> {
    if args.n_min < 1 || args.n_min > args.n_max {
        bail!("invalid input-count range {}..{}", args.n_min, args.n_max);
    }
    if args.reps == 0 {
        bail!("--reps must be at least 1");
    }
    let (_guard, work_dir) = scratch_dir(&args.work_dir)?;

    let cells: Vec<(usize, usize)> = (args.n_min..=args.n_max)
        .flat_map(|n| args.value_lens.iter().map(move |&v| (n, v)))
        .collect();

    let rows = Mutex::new(Vec::<BenchResultRow>::new());
    let next = AtomicUsize::new(0);
    let run_cell = |cell_ix: usize| -> anyhow::Result<()> {
        let (n, value_len) = cells[cell_ix];
        let cell_dir = work_dir.join(format!("cell_n{n:02}_v{value_len}"));
        let spec = WorkloadSpec {
            n_inputs: n,
            records_per_input: args.records,
            key_len: 16,
            value_len,
            seed: args.seed ^ ((n as u64) << 32) ^ value_len as u64,
            block_size: args.block_size,
            ..WorkloadSpec::default()
        };
        let metas = generate_inputs(&spec, &cell_dir.join("in"))?;
        let inputs: Vec<PathBuf> = metas.iter().map(|m| m.path.clone()).collect();

        for algo in [MergeAlgoChoice::Linear, MergeAlgoChoice::MinHeap] {
            let mut walls = Vec::with_capacity(args.reps);
            let mut reference: Option<BenchResultRow> = None;
            for rep in 0..args.reps {
                let algo_name = match algo {
                    MergeAlgoChoice::Linear => "linear",
                    _ => "minheap",
                };
                let mut cfg = JobConfig::new(
                    inputs.clone(),
                    cell_dir.join(format!("out_{algo_name}_{rep}")),
                )
                .with_block_size(args.block_size);
                cfg.merge_algo = algo;
                let report = run_offload(&cfg)?;
                walls.push(report.wall_ms);
                let row = BenchResultRow {
                    engine: report.engine,
                    merge_algo: report.merge_algo,
                    n_inputs: n,
                    value_len,
                    wall_ms: report.wall_ms,
                    read_crossings: report.crossings.read_crossings,
                    write_crossings: report.crossings.write_crossings,
                    comparisons: report.comparisons,
                    records_merged: report.records_merged,
                    output_sha256: report.output_sha256,
                };
                match &reference {
                    None => reference = Some(row),
                    Some(prev) => {
                        if prev.output_sha256 != row.output_sha256 {
                            bail!("nondeterministic output in cell n={n} v={value_len}");
                        }
                    }
                }
            }
            walls.sort_by(|a, b| a.total_cmp(b));
            let mut row = reference.unwrap();
            row.wall_ms = walls[walls.len() / 2];
            rows.lock().unwrap().push(row);
        }
        Ok(())
    };

    run_parallel(args.jobs, cells.len(), &next, run_cell)?;

    let mut rows = rows.into_inner().unwrap();
    rows.sort_by(|a, b| {
        (a.value_len, a.n_inputs, a.merge_algo.clone()).cmp(&(
            b.value_len,
            b.n_inputs,
            b.merge_algo.clone(),
        ))
    });

    // per-cell outputs must agree across algorithms
    for pair in rows.chunks(2) {
        if pair.len() == 2 && pair[0].output_sha256 != pair[1].output_sha256 {
            bail!(
                "linear and minheap outputs differ at n={} value_len={}",
                pair[0].n_inputs,
                pair[0].value_len
            );
        }
    }

    write_csv(&args.out, &rows)?;

    for &value_len in &args.value_lens {
        let crossover = (args.n_min..=args.n_max).find(|&n| {
            let wall = |algo: &str| {
                rows.iter()
                    .find(|r| r.n_inputs == n && r.value_len == value_len && r.merge_algo == algo)
                    .map(|r| r.wall_ms)
            };
            matches!((wall("minheap"), wall("linear")), (Some(h), Some(l)) if h < l)
        });
        match crossover {
            Some(n) => println!("crossover value_len={value_len}: n={n}"),
            None => println!("crossover value_len={value_len}: none"),
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct BenchCrossingsArgs {
    #[arg(long, default_value_t = 4)]
    n_inputs: usize,
    /// Key sizes to sweep, comma-separated
    #[arg(long = "keys", value_delimiter = ',', default_value = "8,16,32,64")]
    key_lens: Vec<usize>,
    /// Value sizes to sweep, comma-separated
    #[arg(long = "values", value_delimiter = ',', default_value = "1024")]
    value_lens: Vec<usize>,
    /// Blocks per input; the desk-scale default is 4096 (16 MiB of 4 KiB
    /// blocks)
    #[arg(long, default_value_t = 4096)]
    blocks_per_input: usize,
    /// Paper-scale preset: 16384 blocks per input (64 MiB) and a 16 MiB
    /// write buffer
    #[arg(long)]
    paper_scale: bool,
    /// Write-buffer threshold; defaults to 2 MiB desk-scale, 16 MiB at
    /// --paper-scale
    #[arg(long = "write-buffer-bytes")]
    write_buffer_bytes: Option<usize>,
    #[arg(long = "crossing-cost-us", default_value_t = 0)]
    crossing_cost_us: u64,
    #[arg(long, env = "RESYSTANCE_SEED", default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = resystance_core::DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Cells run in parallel
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, required = true)]
    out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
struct CrossingRow {
    n_inputs: usize,
    key_len: usize,
    value_len: usize,
    blocks_per_input: usize,
    baseline_read_crossings: u64,
    offload_read_crossings: u64,
    reduction_ratio: f64,
    baseline_wall_ms: f64,
    offload_wall_ms: f64,
    normalized_wall: f64,
    output_match: bool,
}

pub fn cmd_bench_crossings(args: BenchCrossingsArgs) -> anyhow::Result<ExitCode> {
    let blocks_per_input = if args.paper_scale {
        16384
    } else {
        args.blocks_per_input
    };
    let threshold = args
        .write_buffer_bytes
        .unwrap_or(if args.paper_scale { 16 << 20 } else { 2 << 20 });
    let (_guard, work_dir) = scratch_dir(&args.work_dir)?;

    let cells: Vec<(usize, usize)> = args
        .key_lens
        .iter()
        .flat_map(|&k| args.value_lens.iter().map(move |&v| (k, v)))
        .collect();

    let rows = Mutex::new(Vec::<CrossingRow>::new());
    let next = AtomicUsize::new(0);
    let run_cell = |cell_ix: usize| -> anyhow::Result<()> {
        let (key_len, value_len) = cells[cell_ix];
        let record_len = RECORD_HEADER_LEN + key_len + value_len;
        let per_block = args.block_size / record_len;
        if per_block == 0 {
            bail!("a {record_len}-byte record does not fit a {}-byte block", args.block_size);
        }
        let records = blocks_per_input * per_block;
        let cell_dir = work_dir.join(format!("cell_k{key_len}_v{value_len}"));
        let spec = WorkloadSpec {
            n_inputs: args.n_inputs,
            records_per_input: records,
            key_len,
            value_len,
            seed: args.seed ^ ((key_len as u64) << 40) ^ value_len as u64,
            block_size: args.block_size,
            ..WorkloadSpec::default()
        };
        let metas = generate_inputs(&spec, &cell_dir.join("in"))?;
        for m in &metas {
            // exact-fit workload: the block plan must match the grid cell
            if m.num_blocks as usize != blocks_per_input {
                bail!(
                    "input has {} blocks, expected {blocks_per_input}",
                    m.num_blocks
                );
            }
        }
        let inputs: Vec<PathBuf> = metas.iter().map(|m| m.path.clone()).collect();

        let mut cfg = JobConfig::new(inputs.clone(), cell_dir.join("base_out"))
            .with_block_size(args.block_size);
        cfg.write_buffer_threshold = threshold;
        cfg.cost = CrossingCostModel::with_delay_us(args.crossing_cost_us);
        let base = run_baseline(&cfg)?;
        cfg.out_dir = cell_dir.join("off_out");
        let off = run_offload(&cfg)?;

        let b = base.crossings.read_crossings as f64;
        let o = off.crossings.read_crossings as f64;
        rows.lock().unwrap().push(CrossingRow {
            n_inputs: args.n_inputs,
            key_len,
            value_len,
            blocks_per_input,
            baseline_read_crossings: base.crossings.read_crossings,
            offload_read_crossings: off.crossings.read_crossings,
            reduction_ratio: 1.0 - o / b,
            baseline_wall_ms: base.wall_ms,
            offload_wall_ms: off.wall_ms,
            normalized_wall: off.wall_ms / base.wall_ms,
            output_match: base.output_sha256 == off.output_sha256,
        });
        Ok(())
    };

    run_parallel(args.jobs, cells.len(), &next, run_cell)?;

    let mut rows = rows.into_inner().unwrap();
    rows.sort_by_key(|r| (r.key_len, r.value_len));
    write_csv(&args.out, &rows)?;
    Ok(ExitCode::SUCCESS)
}

fn scratch_dir(arg: &Option<PathBuf>) -> anyhow::Result<(Option<tempfile::TempDir>, PathBuf)> {
    match arg {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Ok((None, dir.clone()))
        }
        None => {
            let tmp = tempfile::TempDir::new().context("creating scratch dir")?;
            let path = tmp.path().to_path_buf();
            Ok((Some(tmp), path))
        }
    }
}

fn run_parallel(
    jobs: usize,
    n_cells: usize,
    next: &AtomicUsize,
    run_cell: impl Fn(usize) -> anyhow::Result<()> + Sync,
) -> anyhow::Result<()> {
    let workers = jobs.max(1).min(n_cells.max(1));
    if workers <= 1 {
        for i in 0..n_cells {
            run_cell(i)?;
        }
        return Ok(());
    }
    let failures = Mutex::new(Vec::<anyhow::Error>::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_cells {
                    break;
                }
                if let Err(e) = run_cell(i) {
                    failures.lock().unwrap().push(e);
                    break;
                }
            });
        }
    });
    match failures.into_inner().unwrap().pop() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn write_csv<T: Serialize>(path: &PathBuf, rows: &[T]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path).context("opening csv output")?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
