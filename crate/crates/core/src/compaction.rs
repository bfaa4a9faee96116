//! The two end-to-end compaction engines over the same inputs, outputs, and
//! merge logic:
//!
//! - [`run_baseline`]: classic iterator-style compaction. Every data block
//!   is fetched on demand with its own synchronous read, so read crossings
//!   equal the total block count of the inputs.
//! - [`run_offload`]: controller-style compaction. Each
//!   [`OffloadController::read_next_kv`] invocation counts a single read
//!   crossing; inside it, the controller batch-loads blocks as the merge
//!   engine exhausts them and returns only when the write buffer reaches its
//!   threshold or the merge finishes. Merged buffers are handed back by
//!   exchange and persisted through the conventional write path.
//!
//! Crossing formulas the reports are tested against:
//!
//! - baseline: `read_crossings == sum of input block counts`
//! - offload:  `read_crossings == read_next_kv_calls == non-empty buffer
//!   returns + 1` (the final call that returns 0)
//! - both:     `write_crossings == sum over outputs of (blocks + 2)` — one
//!   write per sealed block plus the index region and the footer.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockio::{
    BlockBackend, BlockIoError, BlockReadReq, CrossingCostModel, CrossingSnapshot, CrossingStats,
    ReadLogEntry, DEFAULT_QUEUE_DEPTH,
};
use crate::kv::{decode_view, KvError, Limits};
use crate::merge::{
    merge_step, select_algorithm, MergeAlgo, MergeError, MergeState, StepOutcome, WriteBuffer,
    DEFAULT_ALGO_THRESHOLD, DEFAULT_WRITE_BUFFER_THRESHOLD,
};
use crate::sstable::{open_sstable, SstBuilder, SstError, SstMeta, DEFAULT_TARGET_SST_SIZE};
use crate::sstmap::{build_sstmap, SstMap, SstMapError, DEFAULT_MAX_INPUTS};

#[derive(Debug, Error)]
pub enum CompactionError {
    #[error("invalid job config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sst(#[from] SstError),
    #[error(transparent)]
    SstMap(#[from] SstMapError),
    #[error(transparent)]
    BlockIo(#[from] BlockIoError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error("corrupt record in write buffer: {0}")]
    CorruptBuffer(#[from] KvError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Baseline,
    Offload,
}

impl Engine {
    pub fn as_str(&self) -> &'static str {
        match self {
            Engine::Baseline => "baseline",
            Engine::Offload => "offload",
        }
    }
}

/// How the merge algorithm is chosen for a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeAlgoChoice {
    Linear,
    MinHeap,
    Auto { threshold: usize },
}

impl Default for MergeAlgoChoice {
    fn default() -> Self {
        MergeAlgoChoice::Auto {
            threshold: DEFAULT_ALGO_THRESHOLD,
        }
    }
}

impl MergeAlgoChoice {
    pub fn resolve(&self, n_inputs: usize) -> MergeAlgo {
        match self {
            MergeAlgoChoice::Linear => MergeAlgo::Linear,
            MergeAlgoChoice::MinHeap => MergeAlgo::MinHeap,
            MergeAlgoChoice::Auto { threshold } => select_algorithm(n_inputs, *threshold),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JobConfig {
    pub input_paths: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub block_size: usize,
    /// Write-buffer threshold T: the offload controller returns merged data
    /// once the buffer cannot take the next record.
    pub write_buffer_threshold: usize,
    pub target_sst_size: u64,
    pub merge_algo: MergeAlgoChoice,
    pub drop_tombstones: bool,
    pub cost: CrossingCostModel,
    pub queue_depth: usize,
    /// Blocks to keep loaded ahead of the merge per input; 1 means no
    /// lookahead.
    pub prefetch_depth: usize,
    pub limits: Limits,
    pub max_inputs: usize,
}

impl JobConfig {
    pub fn new(input_paths: Vec<PathBuf>, out_dir: PathBuf) -> JobConfig {
        JobConfig {
            input_paths,
            out_dir,
            block_size: crate::DEFAULT_BLOCK_SIZE,
            write_buffer_threshold: DEFAULT_WRITE_BUFFER_THRESHOLD,
            target_sst_size: DEFAULT_TARGET_SST_SIZE,
            merge_algo: MergeAlgoChoice::default(),
            drop_tombstones: false,
            cost: CrossingCostModel::free(),
            queue_depth: DEFAULT_QUEUE_DEPTH,
            prefetch_depth: 1,
            limits: Limits::default(),
            max_inputs: DEFAULT_MAX_INPUTS,
        }
    }

    pub fn with_block_size(mut self, block_size: usize) -> JobConfig {
        self.block_size = block_size;
        self.limits = Limits {
            block_size,
            ..self.limits
        };
        self
    }

    pub fn validate(&self) -> Result<(), CompactionError> {
        let bad = |m: String| Err(CompactionError::InvalidConfig(m));
        if self.input_paths.is_empty() {
            return bad("no input tables".into());
        }
        if self.write_buffer_threshold < self.block_size {
            return bad(format!(
                "write buffer threshold {} is below the block size {}",
                self.write_buffer_threshold, self.block_size
            ));
        }
        if self.target_sst_size < self.block_size as u64 {
            return bad(format!(
                "target table size {} is below the block size {}",
                self.target_sst_size, self.block_size
            ));
        }
        if self.queue_depth == 0 || self.prefetch_depth == 0 {
            return bad("queue depth and prefetch depth must be at least 1".into());
        }
        if self.limits.block_size != self.block_size {
            return bad("record limits disagree with the block size".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: u64,
    pub num_blocks: u32,
    pub sha256: String,
}

/// Everything a finished job reports. Field order is part of the JSON
/// schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactionReport {
    pub engine: String,
    pub merge_algo: String,
    pub n_inputs: usize,
    pub input_blocks: u64,
    pub records_merged: u64,
    pub records_dropped: u64,
    pub read_next_kv_calls: u64,
    pub comparisons: u64,
    pub crossings: CrossingSnapshot,
    pub outputs: Vec<OutputFile>,
    pub output_sha256: String,
    pub wall_ms: f64,
}

/// A finished job plus its block-read trace.
pub struct JobRun {
    pub report: CompactionReport,
    pub read_log: Vec<ReadLogEntry>,
    pub output_metas: Vec<SstMeta>,
}

/// Opens and validates the input tables, assigning ordinal file ids.
fn open_inputs(cfg: &JobConfig) -> Result<Vec<SstMeta>, CompactionError> {
    let mut metas = Vec::with_capacity(cfg.input_paths.len());
    for (i, path) in cfg.input_paths.iter().enumerate() {
        let meta = open_sstable(path, i as u64)?;
        if meta.block_size as usize != cfg.block_size {
            return Err(CompactionError::InvalidConfig(format!(
                "{} has block size {}, job expects {}",
                path.display(),
                meta.block_size,
                cfg.block_size
            )));
        }
        metas.push(meta);
    }
    Ok(metas)
}

fn block_req(meta_block_size: usize, input: usize, file_id: u64, block_index: u32) -> BlockReadReq {
    BlockReadReq {
        file_id,
        offset: block_index as u64 * meta_block_size as u64,
        len: meta_block_size as u32,
        slot: input as u32,
    }
}

/// Rolls merged records into output tables of at most `target_sst_size`
/// data bytes, creating files named `out_NNNNNN.sst` under the output
/// directory. A table rolls once its data region, counting the in-progress
/// block, reaches the target.
pub struct OutputWriter {
    out_dir: PathBuf,
    block_size: usize,
    target_sst_size: u64,
    limits: Limits,
    stats: Arc<CrossingStats>,
    cost: CrossingCostModel,
    builder: Option<SstBuilder>,
    next_ordinal: u64,
    finished: Vec<SstMeta>,
    bytes_in: u64,
}

impl OutputWriter {
    pub fn new(cfg: &JobConfig, stats: Arc<CrossingStats>) -> Result<OutputWriter, CompactionError> {
        std::fs::create_dir_all(&cfg.out_dir)?;
        Ok(OutputWriter {
            out_dir: cfg.out_dir.clone(),
            block_size: cfg.block_size,
            target_sst_size: cfg.target_sst_size,
            limits: cfg.limits,
            stats,
            cost: cfg.cost,
            builder: None,
            next_ordinal: 0,
            finished: Vec::new(),
            bytes_in: 0,
        })
    }

    /// Decodes the records of a filled write buffer and feeds them to the
    /// current output table, rolling as needed. Returns the bytes consumed.
    pub fn write_kv(&mut self, buf: &[u8]) -> Result<u64, CompactionError> {
        let mut off = 0usize;
        while off < buf.len() {
            let (view, next) = decode_view(buf, off)?;
            let len = view.encoded_len();
            // roll only at block boundaries: when this record would seal
            // the current block and the data region has reached the target
            if let Some(b) = &self.builder {
                if b.would_seal(len) && b.staged_data_len() >= self.target_sst_size {
                    self.roll()?;
                }
            }
            if self.builder.is_none() {
                let path = self.out_dir.join(format!("out_{:06}.sst", self.next_ordinal));
                self.builder = Some(SstBuilder::create(
                    &path,
                    self.next_ordinal,
                    self.block_size,
                    self.limits,
                    Arc::clone(&self.stats),
                    self.cost,
                )?);
                self.next_ordinal += 1;
            }
            self.builder.as_mut().unwrap().add_view(&view)?;
            off = next;
        }
        self.bytes_in += buf.len() as u64;
        Ok(buf.len() as u64)
    }

    fn roll(&mut self) -> Result<(), CompactionError> {
        if let Some(b) = self.builder.take() {
            self.finished.push(b.finish()?);
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<SstMeta>, CompactionError> {
        self.roll()?;
        Ok(self.finished)
    }
}

/// Baseline engine: per-block synchronous reads feeding the shared merge
/// loop.
pub fn run_baseline(cfg: &JobConfig) -> Result<CompactionReport, CompactionError> {
    Ok(run_job(cfg, Engine::Baseline)?.report)
}

/// Offload engine: batched loads behind one crossing per `read_next_kv`.
pub fn run_offload(cfg: &JobConfig) -> Result<CompactionReport, CompactionError> {
    Ok(run_job(cfg, Engine::Offload)?.report)
}

pub fn run_job(cfg: &JobConfig, engine: Engine) -> Result<JobRun, CompactionError> {
    cfg.validate()?;
    let start = Instant::now();
    let metas = open_inputs(cfg)?;
    let stats = CrossingStats::new();
    let backend = Arc::new(BlockBackend::with_stats(
        cfg.cost,
        cfg.queue_depth,
        Arc::clone(&stats),
    ));
    for meta in &metas {
        backend.register_sstable(meta)?;
    }
    let algo = cfg.merge_algo.resolve(metas.len());
    let input_blocks: u64 = metas.iter().map(|m| m.num_blocks as u64).sum();

    let mut writer = OutputWriter::new(cfg, Arc::clone(&stats))?;
    let (final_state, calls) = match engine {
        Engine::Baseline => (run_baseline_loop(cfg, &metas, &backend, algo, &mut writer)?, 0),
        Engine::Offload => {
            let mut ctl = OffloadController::new(&metas, cfg, Arc::clone(&backend))?;
            let mut buf = Vec::new();
            loop {
                let n = ctl.read_next_kv(&mut buf)?;
                if n == 0 {
                    break;
                }
                writer.write_kv(&buf[..n])?;
            }
            let calls = ctl.calls();
            (ctl.into_merge_state(), calls)
        }
    };

    let output_metas = writer.finish()?;
    let outputs = describe_outputs(&output_metas)?;
    let output_sha256 = combined_sha(&outputs);
    let counters = final_state.counters();

    let report = CompactionReport {
        engine: engine.as_str().to_string(),
        merge_algo: algo.as_str().to_string(),
        n_inputs: metas.len(),
        input_blocks,
        records_merged: counters.records_emitted,
        records_dropped: counters.records_dropped,
        read_next_kv_calls: calls,
        comparisons: counters.comparisons,
        crossings: stats.snapshot(),
        outputs,
        output_sha256,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(JobRun {
        report,
        read_log: backend.read_log(),
        output_metas,
    })
}

fn run_baseline_loop(
    cfg: &JobConfig,
    metas: &[SstMeta],
    backend: &BlockBackend,
    algo: MergeAlgo,
    writer: &mut OutputWriter,
) -> Result<MergeState, CompactionError> {
    let n = metas.len();
    let mut map = build_sstmap(metas, cfg.max_inputs)?;
    let mut state = MergeState::new(n, cfg.drop_tombstones);
    let mut blocks: Vec<Vec<u8>> = vec![Vec::new(); n];

    let fetch = |map: &mut SstMap, state: &mut MergeState, blocks: &mut Vec<Vec<u8>>, i: usize|
     -> Result<(), CompactionError> {
        match map.next_block_descriptor(i) {
            Some(d) => {
                let req = block_req(cfg.block_size, i, metas[i].file_id, d.block_index);
                blocks[i] = backend.read_one(&req)?;
                state.load_block(i, d.used_len);
            }
            None => state.mark_input_done(i),
        }
        Ok(())
    };

    for i in 0..n {
        fetch(&mut map, &mut state, &mut blocks, i)?;
    }

    let mut wb = WriteBuffer::new(cfg.write_buffer_threshold);
    loop {
        match merge_step(algo, &mut state, &blocks, &mut wb)? {
            StepOutcome::BufferFull => {
                let filled = wb.take();
                writer.write_kv(&filled)?;
            }
            StepOutcome::InputExhausted(s) => {
                for i in s {
                    fetch(&mut map, &mut state, &mut blocks, i)?;
                }
            }
            StepOutcome::AllDone => {
                let filled = wb.take();
                writer.write_kv(&filled)?;
                return Ok(state);
            }
        }
    }
}

/// Read-and-merge half of the offload engine. One instance per job; owns
/// the block plan, the merge state, and the loaded block buffers.
pub struct OffloadController {
    backend: Arc<BlockBackend>,
    map: SstMap,
    state: MergeState,
    algo: MergeAlgo,
    blocks: Vec<Vec<u8>>,
    lookahead: Vec<std::collections::VecDeque<(Vec<u8>, u32)>>,
    wb: WriteBuffer,
    file_ids: Vec<u64>,
    block_size: usize,
    prefetch_depth: usize,
    calls: u64,
    started: bool,
    drained: bool,
    finished: bool,
}

impl OffloadController {
    pub fn new(
        metas: &[SstMeta],
        cfg: &JobConfig,
        backend: Arc<BlockBackend>,
    ) -> Result<OffloadController, CompactionError> {
        let n = metas.len();
        Ok(OffloadController {
            backend,
            map: build_sstmap(metas, cfg.max_inputs)?,
            state: MergeState::new(n, cfg.drop_tombstones),
            algo: cfg.merge_algo.resolve(n),
            blocks: vec![Vec::new(); n],
            lookahead: vec![std::collections::VecDeque::new(); n],
            wb: WriteBuffer::new(cfg.write_buffer_threshold),
            file_ids: metas.iter().map(|m| m.file_id).collect(),
            block_size: cfg.block_size,
            prefetch_depth: cfg.prefetch_depth,
            calls: 0,
            started: false,
            drained: false,
            finished: false,
        })
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn merge_state(&self) -> &MergeState {
        &self.state
    }

    /// Replaces the merge state, e.g. with one rebuilt from its serialized
    /// form between invocations.
    pub fn set_merge_state(&mut self, state: MergeState) {
        assert_eq!(state.n_inputs(), self.state.n_inputs());
        self.state = state;
    }

    pub fn into_merge_state(self) -> MergeState {
        self.state
    }

    /// Merges until the write buffer cannot grow or the inputs run out,
    /// then exchanges the filled buffer into `out` and returns its length.
    /// Returns 0 exactly once, after the final drain. Every invocation
    /// counts exactly one read crossing; the block loads inside it are
    /// charged to that crossing, not counted separately.
    pub fn read_next_kv(&mut self, out: &mut Vec<u8>) -> Result<usize, CompactionError> {
        if self.finished {
            out.clear();
            return Ok(0);
        }
        self.backend.count_read_crossing();
        self.calls += 1;

        if self.drained {
            self.finished = true;
            out.clear();
            return Ok(0);
        }
        if !self.started {
            self.started = true;
            let all: Vec<usize> = (0..self.state.n_inputs()).collect();
            self.load_blocks(&all)?;
        }
        loop {
            match merge_step(self.algo, &mut self.state, &self.blocks, &mut self.wb)? {
                StepOutcome::BufferFull => break,
                StepOutcome::InputExhausted(s) => self.load_blocks(&s)?,
                StepOutcome::AllDone => {
                    self.drained = true;
                    break;
                }
            }
        }
        if self.drained && self.wb.is_empty() {
            self.finished = true;
            out.clear();
            return Ok(0);
        }
        self.wb.swap_into(out);
        Ok(out.len())
    }

    /// Gives each listed input a current block — from its lookahead queue
    /// when possible — then tops the queues back up to `prefetch_depth - 1`,
    /// fetching everything missing in one internal batch.
    fn load_blocks(&mut self, inputs: &[usize]) -> Result<(), CompactionError> {
        let mut reqs: Vec<BlockReadReq> = Vec::new();
        // (input, used_len, goes to the merge rather than the lookahead)
        let mut fills: Vec<(usize, u32, bool)> = Vec::new();
        for &i in inputs {
            if let Some((bytes, used_len)) = self.lookahead[i].pop_front() {
                self.blocks[i] = bytes;
                self.state.load_block(i, used_len);
            } else if let Some(d) = self.map.next_block_descriptor(i) {
                reqs.push(block_req(self.block_size, i, self.file_ids[i], d.block_index));
                fills.push((i, d.used_len, true));
            } else {
                self.state.mark_input_done(i);
                continue;
            }
            let mut scheduled = self.lookahead[i].len();
            while scheduled + 1 < self.prefetch_depth {
                match self.map.next_block_descriptor(i) {
                    Some(d) => {
                        reqs.push(block_req(self.block_size, i, self.file_ids[i], d.block_index));
                        fills.push((i, d.used_len, false));
                        scheduled += 1;
                    }
                    None => break,
                }
            }
        }
        if reqs.is_empty() {
            return Ok(());
        }
        let results = self.backend.read_batch_uncounted(&reqs);
        for ((i, used_len, current), result) in fills.into_iter().zip(results) {
            let bytes = result?;
            if current {
                self.blocks[i] = bytes;
                self.state.load_block(i, used_len);
            } else {
                self.lookahead[i].push_back((bytes, used_len));
            }
        }
        Ok(())
    }
}

fn describe_outputs(metas: &[SstMeta]) -> Result<Vec<OutputFile>, CompactionError> {
    use sha2::{Digest, Sha256};
    let mut out = Vec::with_capacity(metas.len());
    for m in metas {
        let mut hasher = Sha256::new();
        let mut file = std::fs::File::open(&m.path)?;
        let bytes = std::io::copy(&mut file, &mut hasher)?;
        out.push(OutputFile {
            path: m.path.display().to_string(),
            bytes,
            num_blocks: m.num_blocks,
            sha256: hex::encode(hasher.finalize()),
        });
    }
    Ok(out)
}

/// One digest over the per-file digests, in output order.
fn combined_sha(outputs: &[OutputFile]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for o in outputs {
        hasher.update(o.sha256.as_bytes());
    }
    hex::encode(hasher.finalize())
}
