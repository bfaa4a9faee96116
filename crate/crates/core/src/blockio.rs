//! Block-read backends with user–kernel boundary-crossing accounting.
//!
//! A *crossing* is counted at this API boundary, not at real OS syscalls:
//! [`BlockBackend::read_one`] charges one crossing per block (the synchronous
//! per-block path), [`BlockBackend::submit_batch`] charges one crossing for a
//! whole batch (the batched asynchronous path), and
//! [`OutputStream::write_buffer_out`] charges one crossing per call. An
//! optional cost model injects a fixed delay per crossing so the software
//! stack cost of the synchronous path can be reproduced on any machine.
//!
//! Every block actually read is appended to a read log in request order;
//! the log is exportable as JSONL lines of `{file_id, offset, batch_seq}`.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sstable::SstMeta;

pub const DEFAULT_QUEUE_DEPTH: usize = 256;

/// Per-crossing delay preset used by the crossing-cost benchmarks, in
/// microseconds. Approximates the file-system share of a synchronous
/// block read on a fast NVMe stack.
pub const BENCH_DELAY_US: u64 = 110;

/// Number of blocks a batch is read with concurrently before it is worth
/// fanning out to helper threads.
const PARALLEL_BATCH_MIN: usize = 8;
const MAX_IO_THREADS: usize = 8;

#[derive(Debug, Error)]
pub enum BlockIoError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("file {file_id} is not registered with this backend")]
    UnknownFile { file_id: u64 },
    #[error("read at offset {offset} is outside file {file_id}'s data region of {data_len} bytes")]
    OutOfRangeRead {
        file_id: u64,
        offset: u64,
        data_len: u64,
    },
    #[error("request offset {offset} or length {len} is not block-aligned (block size {block_size})")]
    MisalignedRead { offset: u64, len: u32, block_size: u32 },
    #[error("batch of {len} requests exceeds queue depth {queue_depth}")]
    BatchTooLarge { len: usize, queue_depth: usize },
    #[error("batch must contain at least one request")]
    EmptyBatch,
}

/// One block-read request. `len` always equals the file's block size and
/// `offset` is a multiple of it. `slot` is an opaque caller tag carried
/// through to the same position of the batch result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockReadReq {
    pub file_id: u64,
    pub offset: u64,
    pub len: u32,
    pub slot: u32,
}

/// Counters of modeled user–kernel boundary crossings and data volume.
///
/// Counters are atomic so that a global aggregator can sum across jobs while
/// they run.
#[derive(Debug, Default)]
pub struct CrossingStats {
    read_crossings: AtomicU64,
    write_crossings: AtomicU64,
    blocks_read: AtomicU64,
    bytes_read: AtomicU64,
    bytes_written: AtomicU64,
    injected_delay_us: AtomicU64,
}

impl CrossingStats {
    pub fn new() -> Arc<CrossingStats> {
        Arc::new(CrossingStats::default())
    }

    pub fn read_crossings(&self) -> u64 {
        self.read_crossings.load(Ordering::Relaxed)
    }

    pub fn write_crossings(&self) -> u64 {
        self.write_crossings.load(Ordering::Relaxed)
    }

    pub fn blocks_read(&self) -> u64 {
        self.blocks_read.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> CrossingSnapshot {
        CrossingSnapshot {
            read_crossings: self.read_crossings.load(Ordering::Relaxed),
            write_crossings: self.write_crossings.load(Ordering::Relaxed),
            blocks_read: self.blocks_read.load(Ordering::Relaxed),
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
            bytes_written: self.bytes_written.load(Ordering::Relaxed),
            injected_delay_us: self.injected_delay_us.load(Ordering::Relaxed),
        }
    }
}

/// Plain-data copy of [`CrossingStats`] for reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossingSnapshot {
    pub read_crossings: u64,
    pub write_crossings: u64,
    pub blocks_read: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub injected_delay_us: u64,
}

/// Latency injected at every counted crossing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossingCostModel {
    pub per_crossing_delay_us: u64,
}

impl CrossingCostModel {
    pub fn free() -> CrossingCostModel {
        CrossingCostModel::default()
    }

    pub fn with_delay_us(per_crossing_delay_us: u64) -> CrossingCostModel {
        CrossingCostModel {
            per_crossing_delay_us,
        }
    }

    pub fn bench_preset() -> CrossingCostModel {
        CrossingCostModel::with_delay_us(BENCH_DELAY_US)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadLogEntry {
    pub file_id: u64,
    pub offset: u64,
    /// Sequential id of the read operation (single read or batch) that
    /// carried this block.
    pub batch_seq: u64,
}

struct RegisteredFile {
    file: Arc<File>,
    data_len: u64,
    block_size: u32,
}

/// Block-read backend bound to a set of registered SSTable files.
///
/// One instance serves one compaction job; the stats handle may be shared
/// with the job's output streams so the crossing identity covers both
/// directions.
pub struct BlockBackend {
    files: RwLock<HashMap<u64, RegisteredFile>>,
    stats: Arc<CrossingStats>,
    cost: CrossingCostModel,
    queue_depth: usize,
    log: Mutex<Vec<ReadLogEntry>>,
    batches: AtomicU64,
}

impl BlockBackend {
    pub fn new(cost: CrossingCostModel, queue_depth: usize) -> BlockBackend {
        BlockBackend::with_stats(cost, queue_depth, CrossingStats::new())
    }

    pub fn with_stats(
        cost: CrossingCostModel,
        queue_depth: usize,
        stats: Arc<CrossingStats>,
    ) -> BlockBackend {
        BlockBackend {
            files: RwLock::new(HashMap::new()),
            stats,
            cost,
            queue_depth,
            log: Mutex::new(Vec::new()),
            batches: AtomicU64::new(0),
        }
    }

    /// Opens the table's file and makes its data region readable through
    /// this backend under `meta.file_id`.
    pub fn register_sstable(&self, meta: &SstMeta) -> Result<(), BlockIoError> {
        let file = File::open(&meta.path)?;
        self.files.write().unwrap().insert(
            meta.file_id,
            RegisteredFile {
                file: Arc::new(file),
                data_len: meta.data_len(),
                block_size: meta.block_size,
            },
        );
        Ok(())
    }

    pub fn stats(&self) -> Arc<CrossingStats> {
        Arc::clone(&self.stats)
    }

    pub fn cost(&self) -> CrossingCostModel {
        self.cost
    }

    pub fn queue_depth(&self) -> usize {
        self.queue_depth
    }

    fn resolve(&self, req: &BlockReadReq) -> Result<Arc<File>, BlockIoError> {
        let files = self.files.read().unwrap();
        let reg = files
            .get(&req.file_id)
            .ok_or(BlockIoError::UnknownFile {
                file_id: req.file_id,
            })?;
        if req.len != reg.block_size || req.offset % reg.block_size as u64 != 0 {
            return Err(BlockIoError::MisalignedRead {
                offset: req.offset,
                len: req.len,
                block_size: reg.block_size,
            });
        }
        if req.offset + req.len as u64 > reg.data_len {
            return Err(BlockIoError::OutOfRangeRead {
                file_id: req.file_id,
                offset: req.offset,
                data_len: reg.data_len,
            });
        }
        Ok(Arc::clone(&reg.file))
    }

    fn inject_delay(&self) {
        let d = self.cost.per_crossing_delay_us;
        if d > 0 {
            std::thread::sleep(Duration::from_micros(d));
        }
        self.stats.injected_delay_us.fetch_add(d, Ordering::Relaxed);
    }

    fn cross_read(&self) {
        self.stats.read_crossings.fetch_add(1, Ordering::Relaxed);
        self.inject_delay();
    }

    /// Charges one read crossing without performing a read. Used by the
    /// offload controller, which models a whole `read_next_kv` invocation
    /// as a single kernel entry covering all its internal block loads.
    pub(crate) fn count_read_crossing(&self) {
        self.cross_read();
    }

    /// Reads one block synchronously: exactly one crossing per call.
    pub fn read_one(&self, req: &BlockReadReq) -> Result<Vec<u8>, BlockIoError> {
        let file = self.resolve(req)?;
        self.cross_read();
        let batch_seq = self.batches.fetch_add(1, Ordering::Relaxed);
        let mut buf = vec![0u8; req.len as usize];
        file.read_exact_at(&mut buf, req.offset)?;
        self.account_block(req, batch_seq);
        Ok(buf)
    }

    /// Reads a batch of blocks: exactly one crossing for the whole batch,
    /// results in request order. Failed slots are reported in place without
    /// failing the rest of the batch.
    pub fn submit_batch(
        &self,
        reqs: &[BlockReadReq],
    ) -> Result<Vec<Result<Vec<u8>, BlockIoError>>, BlockIoError> {
        if reqs.is_empty() {
            return Err(BlockIoError::EmptyBatch);
        }
        if reqs.len() > self.queue_depth {
            return Err(BlockIoError::BatchTooLarge {
                len: reqs.len(),
                queue_depth: self.queue_depth,
            });
        }
        self.cross_read();
        Ok(self.perform_batch(reqs))
    }

    /// Batch read without a crossing charge, chunked to the queue depth.
    /// The offload controller's internal loads go through here; its single
    /// per-invocation crossing is counted separately.
    pub(crate) fn read_batch_uncounted(
        &self,
        reqs: &[BlockReadReq],
    ) -> Vec<Result<Vec<u8>, BlockIoError>> {
        let mut out = Vec::with_capacity(reqs.len());
        for chunk in reqs.chunks(self.queue_depth.max(1)) {
            out.extend(self.perform_batch(chunk));
        }
        out
    }

    fn perform_batch(&self, reqs: &[BlockReadReq]) -> Vec<Result<Vec<u8>, BlockIoError>> {
        let batch_seq = self.batches.fetch_add(1, Ordering::Relaxed);
        let resolved: Vec<Result<Arc<File>, BlockIoError>> =
            reqs.iter().map(|r| self.resolve(r)).collect();

        let mut results: Vec<Option<Result<Vec<u8>, BlockIoError>>> =
            (0..reqs.len()).map(|_| None).collect();

        let do_read = |file: &File, req: &BlockReadReq| -> Result<Vec<u8>, BlockIoError> {
            let mut buf = vec![0u8; req.len as usize];
            file.read_exact_at(&mut buf, req.offset)?;
            Ok(buf)
        };

        if reqs.len() >= PARALLEL_BATCH_MIN {
            let workers = reqs.len().min(MAX_IO_THREADS);
            let chunk = reqs.len().div_ceil(workers);
            std::thread::scope(|scope| {
                for ((req_chunk, res_chunk), file_chunk) in reqs
                    .chunks(chunk)
                    .zip(results.chunks_mut(chunk))
                    .zip(resolved.chunks(chunk))
                {
                    scope.spawn(move || {
                        for ((req, slot), file) in
                            req_chunk.iter().zip(res_chunk.iter_mut()).zip(file_chunk)
                        {
                            *slot = Some(match file {
                                Ok(f) => do_read(f, req),
                                Err(e) => Err(clone_err(e)),
                            });
                        }
                    });
                }
            });
        } else {
            for ((req, slot), file) in reqs.iter().zip(results.iter_mut()).zip(&resolved) {
                *slot = Some(match file {
                    Ok(f) => do_read(f, req),
                    Err(e) => Err(clone_err(e)),
                });
            }
        }

        let results: Vec<Result<Vec<u8>, BlockIoError>> =
            results.into_iter().map(|r| r.unwrap()).collect();
        for (req, res) in reqs.iter().zip(&results) {
            if res.is_ok() {
                self.account_block(req, batch_seq);
            }
        }
        results
    }

    fn account_block(&self, req: &BlockReadReq, batch_seq: u64) {
        self.stats.blocks_read.fetch_add(1, Ordering::Relaxed);
        self.stats
            .bytes_read
            .fetch_add(req.len as u64, Ordering::Relaxed);
        self.log.lock().unwrap().push(ReadLogEntry {
            file_id: req.file_id,
            offset: req.offset,
            batch_seq,
        });
    }

    pub fn read_log(&self) -> Vec<ReadLogEntry> {
        self.log.lock().unwrap().clone()
    }

    /// Writes the read log as one JSON object per line.
    pub fn write_read_log_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for entry in self.log.lock().unwrap().iter() {
            serde_json::to_writer(&mut w, entry)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

// BlockIoError is not Clone because of io::Error; batches need the resolve
// error in more than one place.
fn clone_err(e: &BlockIoError) -> BlockIoError {
    match e {
        BlockIoError::Io(io) => BlockIoError::Io(std::io::Error::new(io.kind(), io.to_string())),
        BlockIoError::UnknownFile { file_id } => BlockIoError::UnknownFile { file_id: *file_id },
        BlockIoError::OutOfRangeRead {
            file_id,
            offset,
            data_len,
        } => BlockIoError::OutOfRangeRead {
            file_id: *file_id,
            offset: *offset,
            data_len: *data_len,
        },
        BlockIoError::MisalignedRead {
            offset,
            len,
            block_size,
        } => BlockIoError::MisalignedRead {
            offset: *offset,
            len: *len,
            block_size: *block_size,
        },
        BlockIoError::BatchTooLarge { len, queue_depth } => BlockIoError::BatchTooLarge {
            len: *len,
            queue_depth: *queue_depth,
        },
        BlockIoError::EmptyBatch => BlockIoError::EmptyBatch,
    }
}

/// Append-only output file charging one write crossing per non-empty call.
pub struct OutputStream {
    file: File,
    stats: Arc<CrossingStats>,
    cost: CrossingCostModel,
}

impl OutputStream {
    pub fn create(
        path: &Path,
        stats: Arc<CrossingStats>,
        cost: CrossingCostModel,
    ) -> Result<OutputStream, BlockIoError> {
        let file = File::create(path)?;
        Ok(OutputStream { file, stats, cost })
    }

    /// Appends `bytes`, counting one write crossing. A zero-length write is
    /// a no-op and counts nothing.
    pub fn write_buffer_out(&mut self, bytes: &[u8]) -> Result<(), BlockIoError> {
        if bytes.is_empty() {
            return Ok(());
        }
        self.file.write_all(bytes)?;
        self.stats.write_crossings.fetch_add(1, Ordering::Relaxed);
        let d = self.cost.per_crossing_delay_us;
        if d > 0 {
            std::thread::sleep(Duration::from_micros(d));
        }
        self.stats
            .injected_delay_us
            .fetch_add(d, Ordering::Relaxed);
        self.stats
            .bytes_written
            .fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), BlockIoError> {
        self.file.flush()?;
        Ok(())
    }
}
