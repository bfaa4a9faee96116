//! User-space laboratory for the LSM-tree compaction data path: block-based
//! SSTables, plan-driven batched block reads, resumable merge engines, and
//! user–kernel boundary-crossing accounting.
//!
//! The crate models two compaction engines over the same on-disk format:
//!
//! - a **baseline** engine that fetches every data block with its own
//!   synchronous read, one boundary crossing per block, and
//! - an **offload** engine whose controller batch-loads blocks and runs the
//!   merge loop behind a single crossing per [`compaction::OffloadController::read_next_kv`]
//!   call, returning merged data whenever an in-controller write buffer
//!   reaches its threshold.
//!
//! Both engines share the merge algorithms, the dedup rule, and the output
//! writer, so their outputs are byte-identical; only the crossing accounting
//! and wall time differ. A configurable per-crossing delay lets the software
//! stack cost of the synchronous path be simulated on any machine.

pub mod blockio;
pub mod compaction;
pub mod kv;
pub mod merge;
pub mod oracle;
pub mod sstable;
pub mod sstmap;
pub mod workload;

#[doc(hidden)]
pub mod testsupport;

/// Size of one data block in bytes unless configured otherwise.
pub const DEFAULT_BLOCK_SIZE: usize = 4096;

pub use kv::{compare_internal, decode_record, encode_record, Limits, Record, RecordKind};
pub use sstable::{open_sstable, IndexEntry, SstBuilder, SstMeta};
pub use sstmap::{build_sstmap, SstMap};
