//! On-disk SSTable: fixed-size zero-padded data blocks, an index region, and
//! a fixed footer.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! [block 0][block 1] ... [block N-1]      each exactly block_size bytes
//! [index region]                          count: u32, then per block:
//!                                           first_key_len: u16
//!                                           first_key
//!                                           block_index:   u32
//!                                           offset:        u64
//!                                           used_len:      u32
//! [footer, 32 bytes]                      index_offset: u64
//!                                         index_len:    u64
//!                                         block_size:   u32
//!                                         num_blocks:   u32
//!                                         magic "RSYSSST1"
//! ```
//!
//! Records never span blocks: a record that does not fit in the current
//! block's remaining capacity seals the block (zero-padded to `block_size`)
//! and starts the next one. `used_len` — the number of payload bytes of a
//! block — lives in the index, so a merge loop can bound its read pointer
//! without scanning for a sentinel. Indexes are small and stay
//! memory-resident once a table is opened.

use std::fs::File;
use std::io::Read;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::blockio::{BlockIoError, CrossingCostModel, CrossingStats, OutputStream};
use crate::kv::{compare_internal, decode_view, encode_record_into, KvError, Limits, Record, RecordView};

pub const MAGIC: &[u8; 8] = b"RSYSSST1";
pub const FOOTER_LEN: usize = 32;
pub const DEFAULT_TARGET_SST_SIZE: u64 = 64 << 20;

#[derive(Debug, Error)]
pub enum SstError {
    #[error("record added out of internal-key order")]
    OutOfOrderRecord,
    #[error("table has no records")]
    EmptyTable,
    #[error("bad or missing footer magic")]
    BadMagic,
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error(transparent)]
    Record(#[from] KvError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

impl From<BlockIoError> for SstError {
    fn from(e: BlockIoError) -> SstError {
        match e {
            BlockIoError::Io(io) => SstError::Io(io),
            other => SstError::Io(std::io::Error::other(other.to_string())),
        }
    }
}

/// Index entry describing one data block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    /// User key of the first record in the block.
    pub first_key: Vec<u8>,
    pub block_index: u32,
    /// Byte offset of the block: always `block_index * block_size`.
    pub offset: u64,
    /// Payload bytes in the block; the rest is zero padding.
    pub used_len: u32,
}

/// Parsed description of a sealed table.
#[derive(Debug, Clone)]
pub struct SstMeta {
    pub file_id: u64,
    pub path: PathBuf,
    pub block_size: u32,
    pub num_blocks: u32,
    pub index: Vec<IndexEntry>,
    pub smallest_key: Vec<u8>,
    pub largest_key: Vec<u8>,
}

impl SstMeta {
    /// Length of the data region: `num_blocks * block_size`, which also
    /// equals the index offset.
    pub fn data_len(&self) -> u64 {
        self.num_blocks as u64 * self.block_size as u64
    }
}

/// Streaming table writer. Records must arrive in nondecreasing
/// internal-key order; sealed blocks are written immediately through an
/// [`OutputStream`], one write crossing per block.
pub struct SstBuilder {
    out: OutputStream,
    path: PathBuf,
    file_id: u64,
    block_size: usize,
    limits: Limits,
    block: Vec<u8>,
    block_first_key: Option<Vec<u8>>,
    index: Vec<IndexEntry>,
    last: Option<(Vec<u8>, u64)>,
    smallest: Option<Vec<u8>>,
    largest: Vec<u8>,
    records: u64,
}

impl SstBuilder {
    pub fn create(
        path: &Path,
        file_id: u64,
        block_size: usize,
        limits: Limits,
        stats: Arc<CrossingStats>,
        cost: CrossingCostModel,
    ) -> Result<SstBuilder, SstError> {
        assert!(block_size > 0 && block_size <= u32::MAX as usize);
        assert_eq!(limits.block_size, block_size, "limits must match the block size");
        let out = OutputStream::create(path, stats, cost)?;
        Ok(SstBuilder {
            out,
            path: path.to_path_buf(),
            file_id,
            block_size,
            limits,
            block: Vec::with_capacity(block_size),
            block_first_key: None,
            index: Vec::new(),
            last: None,
            smallest: None,
            largest: Vec::new(),
            records: 0,
        })
    }

    pub fn add(&mut self, r: &Record) -> Result<(), SstError> {
        r.validate(&self.limits)?;
        self.add_view(&r.as_view())
    }

    /// Adds a record already known to satisfy the limits (for example one
    /// decoded back out of a merge write buffer).
    pub fn add_view(&mut self, rec: &RecordView<'_>) -> Result<(), SstError> {
        let len = rec.encoded_len();
        if len > self.block_size {
            return Err(KvError::RecordTooLargeForBlock {
                len,
                block_size: self.block_size,
            }
            .into());
        }
        if let Some((last_key, last_seq)) = &self.last {
            if compare_internal(rec.user_key, rec.seq, last_key, *last_seq)
                == std::cmp::Ordering::Less
            {
                return Err(SstError::OutOfOrderRecord);
            }
        }
        if self.block.len() + len > self.block_size {
            self.seal_block()?;
        }
        if self.block.is_empty() {
            self.block_first_key = Some(rec.user_key.to_vec());
        }
        encode_record_into(rec, &mut self.block);
        self.last = Some((rec.user_key.to_vec(), rec.seq));
        if self.smallest.is_none() {
            self.smallest = Some(rec.user_key.to_vec());
        }
        self.largest.clear();
        self.largest.extend_from_slice(rec.user_key);
        self.records += 1;
        Ok(())
    }

    fn seal_block(&mut self) -> Result<(), SstError> {
        debug_assert!(!self.block.is_empty());
        let block_index = self.index.len() as u32;
        self.index.push(IndexEntry {
            first_key: self.block_first_key.take().unwrap_or_default(),
            block_index,
            offset: block_index as u64 * self.block_size as u64,
            used_len: self.block.len() as u32,
        });
        self.block.resize(self.block_size, 0);
        self.out.write_buffer_out(&self.block)?;
        self.block.clear();
        Ok(())
    }

    /// Bytes of sealed blocks already on disk.
    pub fn sealed_data_len(&self) -> u64 {
        self.index.len() as u64 * self.block_size as u64
    }

    /// True if appending `len` more bytes would seal the current block.
    pub fn would_seal(&self, len: usize) -> bool {
        !self.block.is_empty() && self.block.len() + len > self.block_size
    }

    /// Data-region size the table would have if sealed right now: counts
    /// the in-progress block as a full block. Output rolling keys off this.
    pub fn staged_data_len(&self) -> u64 {
        self.sealed_data_len() + if self.block.is_empty() { 0 } else { self.block_size as u64 }
    }

    pub fn record_count(&self) -> u64 {
        self.records
    }

    /// Seals the last block, writes index and footer, and returns the
    /// table's metadata.
    pub fn finish(mut self) -> Result<SstMeta, SstError> {
        if self.records == 0 {
            return Err(SstError::EmptyTable);
        }
        if !self.block.is_empty() {
            self.seal_block()?;
        }
        let num_blocks = self.index.len() as u32;
        let index_offset = num_blocks as u64 * self.block_size as u64;

        let mut index_bytes = Vec::new();
        index_bytes.extend_from_slice(&num_blocks.to_le_bytes());
        for e in &self.index {
            index_bytes.extend_from_slice(&(e.first_key.len() as u16).to_le_bytes());
            index_bytes.extend_from_slice(&e.first_key);
            index_bytes.extend_from_slice(&e.block_index.to_le_bytes());
            index_bytes.extend_from_slice(&e.offset.to_le_bytes());
            index_bytes.extend_from_slice(&e.used_len.to_le_bytes());
        }
        self.out.write_buffer_out(&index_bytes)?;

        let mut footer = Vec::with_capacity(FOOTER_LEN);
        footer.extend_from_slice(&index_offset.to_le_bytes());
        footer.extend_from_slice(&(index_bytes.len() as u64).to_le_bytes());
        footer.extend_from_slice(&(self.block_size as u32).to_le_bytes());
        footer.extend_from_slice(&num_blocks.to_le_bytes());
        footer.extend_from_slice(MAGIC);
        debug_assert_eq!(footer.len(), FOOTER_LEN);
        self.out.write_buffer_out(&footer)?;
        self.out.flush()?;

        Ok(SstMeta {
            file_id: self.file_id,
            path: self.path,
            block_size: self.block_size as u32,
            num_blocks,
            index: self.index,
            smallest_key: self.smallest.unwrap_or_default(),
            largest_key: self.largest,
        })
    }
}

/// Opens a sealed table: parses footer and index, validates the index
/// invariants, and reads the last block once to recover the largest key.
pub fn open_sstable(path: &Path, file_id: u64) -> Result<SstMeta, SstError> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    if file_len < FOOTER_LEN as u64 {
        return Err(SstError::BadMagic);
    }
    let mut footer = [0u8; FOOTER_LEN];
    file.read_exact_at(&mut footer, file_len - FOOTER_LEN as u64)?;
    if &footer[24..32] != MAGIC {
        return Err(SstError::BadMagic);
    }
    let index_offset = u64::from_le_bytes(footer[0..8].try_into().unwrap());
    let index_len = u64::from_le_bytes(footer[8..16].try_into().unwrap());
    let block_size = u32::from_le_bytes(footer[16..20].try_into().unwrap());
    let num_blocks = u32::from_le_bytes(footer[20..24].try_into().unwrap());

    if block_size == 0 || num_blocks == 0 {
        return Err(SstError::CorruptIndex("zero block size or block count".into()));
    }
    if index_offset != num_blocks as u64 * block_size as u64 {
        return Err(SstError::CorruptIndex(
            "index offset does not equal num_blocks * block_size".into(),
        ));
    }
    if index_offset + index_len + FOOTER_LEN as u64 != file_len {
        return Err(SstError::CorruptIndex("file length mismatch".into()));
    }

    let mut index_bytes = vec![0u8; index_len as usize];
    file.read_exact_at(&mut index_bytes, index_offset)?;
    let index = parse_index(&index_bytes, num_blocks, block_size)?;

    // The largest key is not stored; recover it from the last block.
    let last = index.last().unwrap();
    let mut block = vec![0u8; block_size as usize];
    file.read_exact_at(&mut block, last.offset)?;
    let mut largest_key = Vec::new();
    let mut off = 0usize;
    while off < last.used_len as usize {
        let (view, next) = decode_view(&block[..last.used_len as usize], off)
            .map_err(|e| SstError::CorruptIndex(format!("bad record in last block: {e}")))?;
        largest_key.clear();
        largest_key.extend_from_slice(view.user_key);
        off = next;
    }

    Ok(SstMeta {
        file_id,
        path: path.to_path_buf(),
        block_size,
        num_blocks,
        smallest_key: index[0].first_key.clone(),
        largest_key,
        index,
    })
}

fn parse_index(bytes: &[u8], num_blocks: u32, block_size: u32) -> Result<Vec<IndexEntry>, SstError> {
    let corrupt = |m: &str| SstError::CorruptIndex(m.into());
    if bytes.len() < 4 {
        return Err(corrupt("index region shorter than its count field"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if count != num_blocks {
        return Err(corrupt("index count disagrees with footer num_blocks"));
    }
    let mut entries = Vec::with_capacity(count as usize);
    let mut off = 4usize;
    for i in 0..count {
        if off + 2 > bytes.len() {
            return Err(corrupt("truncated index entry"));
        }
        let key_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        if key_len == 0 || off + key_len + 16 > bytes.len() {
            return Err(corrupt("truncated index entry"));
        }
        let first_key = bytes[off..off + key_len].to_vec();
        off += key_len;
        let block_index = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let offset = u64::from_le_bytes(bytes[off + 4..off + 12].try_into().unwrap());
        let used_len = u32::from_le_bytes(bytes[off + 12..off + 16].try_into().unwrap());
        off += 16;
        if block_index != i {
            return Err(corrupt("index entries out of order"));
        }
        if offset != block_index as u64 * block_size as u64 {
            return Err(corrupt("entry offset does not equal block_index * block_size"));
        }
        if used_len == 0 || used_len > block_size {
            return Err(corrupt("entry used_len outside (0, block_size]"));
        }
        if let Some(prev) = entries.last().map(|e: &IndexEntry| &e.first_key) {
            if first_key < *prev {
                return Err(corrupt("first keys decrease across blocks"));
            }
        }
        entries.push(IndexEntry {
            first_key,
            block_index,
            offset,
            used_len,
        });
    }
    if off != bytes.len() {
        return Err(corrupt("trailing bytes after last index entry"));
    }
    Ok(entries)
}

/// Reads one data block directly from the file, outside any backend
/// accounting. Used by dump tooling and the reference merge.
pub fn read_block_direct(meta: &SstMeta, entry: &IndexEntry) -> Result<Vec<u8>, SstError> {
    let file = File::open(&meta.path)?;
    let mut block = vec![0u8; meta.block_size as usize];
    file.read_exact_at(&mut block, entry.offset)?;
    Ok(block)
}

/// Decodes the records of one block's payload.
pub fn decode_block_records(block: &[u8], used_len: u32) -> Result<Vec<Record>, SstError> {
    let payload = &block[..used_len as usize];
    let mut out = Vec::new();
    let mut off = 0usize;
    while off < payload.len() {
        let (view, next) = decode_view(payload, off)?;
        out.push(view.to_record());
        off = next;
    }
    Ok(out)
}

/// Reads the whole file; convenience for hashing and golden tests.
pub fn read_file_bytes(path: &Path) -> Result<Vec<u8>, SstError> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockio::CrossingCostModel;
    use tempfile::TempDir;

    fn builder(dir: &TempDir, name: &str, block_size: usize) -> SstBuilder {
        SstBuilder::create(
            &dir.path().join(name),
            1,
            block_size,
            Limits::with_block_size(block_size),
            CrossingStats::new(),
            CrossingCostModel::free(),
        )
        .unwrap()
    }

    #[test]
    fn two_records_one_block() {
        let dir = TempDir::new().unwrap();
        let mut b = builder(&dir, "a.sst", 64);
        b.add(&Record::put("a", 1, "xy")).unwrap();
        b.add(&Record::put("b", 2, "xy")).unwrap();
        let meta = b.finish().unwrap();
        assert_eq!(meta.num_blocks, 1);
        assert_eq!(meta.index[0].used_len, 36);
    }

    #[test]
    fn two_records_two_blocks_no_span() {
        let dir = TempDir::new().unwrap();
        let mut b = builder(&dir, "a.sst", 32);
        b.add(&Record::put("a", 1, "xy")).unwrap();
        b.add(&Record::put("b", 2, "xy")).unwrap();
        let meta = b.finish().unwrap();
        assert_eq!(meta.num_blocks, 2);
        assert_eq!(meta.index[0].used_len, 18);
        assert_eq!(meta.index[1].used_len, 18);
        assert_eq!(meta.index[1].offset, 32);
    }

    #[test]
    fn out_of_order_rejected() {
        let dir = TempDir::new().unwrap();
        let mut b = builder(&dir, "a.sst", 64);
        b.add(&Record::put("b", 9, "")).unwrap();
        assert!(matches!(
            b.add(&Record::put("a", 1, "")),
            Err(SstError::OutOfOrderRecord)
        ));
        // same key, lower seq is fine (seq descends within a key)
        b.add(&Record::put("b", 3, "")).unwrap();
        // but same key, higher seq is out of order
        assert!(matches!(
            b.add(&Record::put("b", 7, "")),
            Err(SstError::OutOfOrderRecord)
        ));
    }

    #[test]
    fn empty_table_rejected() {
        let dir = TempDir::new().unwrap();
        let b = builder(&dir, "a.sst", 64);
        assert!(matches!(b.finish(), Err(SstError::EmptyTable)));
    }

    #[test]
    fn golden_single_record_table() {
        let dir = TempDir::new().unwrap();
        let mut b = builder(&dir, "golden.sst", 32);
        b.add(&Record::put("a", 7, "xy")).unwrap();
        let meta = b.finish().unwrap();
        let got = read_file_bytes(&meta.path).unwrap();

        let mut want = vec![
            // block 0: the 18-byte record, zero-padded to 32
            0x01, 0x00, 0x00, 0x07, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00,
            0x00, 0x61, 0x78, 0x79, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
            0x00, 0x00, 0x00, 0x00,
            // index region: count = 1
            0x01, 0x00, 0x00, 0x00,
            // entry: first_key_len=1, 'a', block_index=0, offset=0, used_len=18
            0x01, 0x00, 0x61, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
            0x00, 0x12, 0x00, 0x00, 0x00,
        ];
        // footer
        want.extend_from_slice(&32u64.to_le_bytes());
        want.extend_from_slice(&23u64.to_le_bytes());
        want.extend_from_slice(&32u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(MAGIC);

        assert_eq!(got.len(), 87);
        assert_eq!(got, want);
    }

    #[test]
    fn single_record_file_size_formula() {
        let dir = TempDir::new().unwrap();
        let mut b = builder(&dir, "a.sst", 4096);
        b.add(&Record::put("k", 1, "v")).unwrap();
        let meta = b.finish().unwrap();
        let len = std::fs::metadata(&meta.path).unwrap().len();
        let index_len = 4 + (2 + 1 + 4 + 8 + 4);
        assert_eq!(len, 4096 + index_len + 32);
    }

    #[test]
    fn build_open_round_trip() {
        let dir = TempDir::new().unwrap();
        let mut b = builder(&dir, "rt.sst", 128);
        let mut records = Vec::new();
        for i in 0..100u64 {
            let r = Record::put(format!("key{i:04}"), i, vec![b'x'; (i % 23) as usize]);
            b.add(&r).unwrap();
            records.push(r);
        }
        let built = b.finish().unwrap();
        let opened = open_sstable(&built.path, 1).unwrap();

        assert_eq!(opened.num_blocks, built.num_blocks);
        assert_eq!(opened.index, built.index);
        assert_eq!(opened.smallest_key, built.smallest_key);
        assert_eq!(opened.largest_key, built.largest_key);
        assert_eq!(opened.data_len(), opened.num_blocks as u64 * 128);

        // concatenating decoded blocks in index order reproduces the input
        let mut got = Vec::new();
        for e in &opened.index {
            let block = read_block_direct(&opened, e).unwrap();
            // bytes past used_len are zero
            assert!(block[e.used_len as usize..].iter().all(|&b| b == 0));
            got.extend(decode_block_records(&block, e.used_len).unwrap());
        }
        assert_eq!(got, records);
    }

    #[test]
    fn truncated_footer_is_bad_magic() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("short.sst");
        std::fs::write(&path, b"tiny").unwrap();
        assert!(matches!(open_sstable(&path, 1), Err(SstError::BadMagic)));

        let mut b = builder(&dir, "cut.sst", 64);
        b.add(&Record::put("a", 1, "")).unwrap();
        let meta = b.finish().unwrap();
        let bytes = read_file_bytes(&meta.path).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        let cut_path = dir.path().join("cut2.sst");
        std::fs::write(&cut_path, cut).unwrap();
        assert!(matches!(open_sstable(&cut_path, 1), Err(SstError::BadMagic)));
    }

    #[test]
    fn oversized_used_len_is_corrupt_index() {
        let dir = TempDir::new().unwrap();
        let mut b = builder(&dir, "c.sst", 64);
        b.add(&Record::put("a", 1, "")).unwrap();
        let meta = b.finish().unwrap();
        let mut bytes = read_file_bytes(&meta.path).unwrap();
        // used_len is the last 4 bytes of the only index entry
        let used_at = bytes.len() - FOOTER_LEN - 4;
        bytes[used_at..used_at + 4].copy_from_slice(&65u32.to_le_bytes());
        let path = dir.path().join("c2.sst");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            open_sstable(&path, 1),
            Err(SstError::CorruptIndex(_))
        ));
    }

    #[test]
    fn write_crossings_per_block_plus_index_and_footer() {
        let dir = TempDir::new().unwrap();
        let stats = CrossingStats::new();
        let mut b = SstBuilder::create(
            &dir.path().join("w.sst"),
            1,
            32,
            Limits::with_block_size(32),
            Arc::clone(&stats),
            CrossingCostModel::free(),
        )
        .unwrap();
        for i in 0..6u64 {
            b.add(&Record::put(format!("k{i}"), i, "xx")).unwrap();
        }
        let meta = b.finish().unwrap();
        assert_eq!(
            stats.snapshot().write_crossings,
            meta.num_blocks as u64 + 2
        );
    }
}
