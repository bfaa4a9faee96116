//! Helpers shared by unit, integration, and acceptance tests. Not part of
//! the public API.

use crate::kv::{decode_record, Record};
use crate::merge::{merge_step, MergeAlgo, MergeError, MergeState, StepOutcome, WriteBuffer};

pub struct PackedBlock {
    pub bytes: Vec<u8>,
    pub used_len: u32,
}

pub fn rec(key: &str, seq: u64, value: &str) -> Record {
    Record::put(key, seq, value)
}

/// Packs sorted records into fixed-size blocks under the no-span rule.
/// Deliberately a second, simpler implementation of the block layout so it
/// can double as an oracle for the table builder.
pub fn pack_records(records: &[Record], block_size: usize) -> Vec<PackedBlock> {
    let mut blocks = Vec::new();
    let mut cur = Vec::new();
    for r in records {
        let len = r.encoded_len();
        assert!(len <= block_size, "record does not fit a block");
        if cur.len() + len > block_size {
            blocks.push(seal(cur, block_size));
            cur = Vec::new();
        }
        crate::kv::encode_record_into(&r.as_view(), &mut cur);
    }
    if !cur.is_empty() {
        blocks.push(seal(cur, block_size));
    }
    blocks
}

fn seal(mut payload: Vec<u8>, block_size: usize) -> PackedBlock {
    let used_len = payload.len() as u32;
    payload.resize(block_size, 0);
    PackedBlock {
        bytes: payload,
        used_len,
    }
}

/// Drives a merge engine to completion over in-memory inputs, refilling
/// blocks as they exhaust, and returns the concatenation of all returned
/// write buffers. Checks the buffer bound after every step.
pub fn drive_merge(
    algo: MergeAlgo,
    inputs: &[Vec<Record>],
    block_size: usize,
    threshold: usize,
    drop_tombstones: bool,
) -> Result<Vec<u8>, MergeError> {
    let (out, _) = drive_merge_full(algo, inputs, block_size, threshold, drop_tombstones)?;
    Ok(out)
}

pub fn drive_merge_full(
    algo: MergeAlgo,
    inputs: &[Vec<Record>],
    block_size: usize,
    threshold: usize,
    drop_tombstones: bool,
) -> Result<(Vec<u8>, MergeState), MergeError> {
    let n = inputs.len();
    let packed: Vec<Vec<PackedBlock>> = inputs
        .iter()
        .map(|r| pack_records(r, block_size))
        .collect();
    let mut state = MergeState::new(n, drop_tombstones);
    let mut blocks: Vec<Vec<u8>> = vec![Vec::new(); n];
    let mut next: Vec<usize> = vec![0; n];
    for i in 0..n {
        match packed[i].first() {
            Some(b) => {
                blocks[i] = b.bytes.clone();
                state.load_block(i, b.used_len);
                next[i] = 1;
            }
            None => state.mark_input_done(i),
        }
    }
    let mut wb = WriteBuffer::new(threshold);
    let mut out = Vec::new();
    loop {
        let outcome = merge_step(algo, &mut state, &blocks, &mut wb)?;
        assert!(wb.len() <= threshold, "write buffer exceeded its threshold");
        match outcome {
            StepOutcome::BufferFull => {
                assert!(!wb.is_empty(), "buffer-full with an empty buffer cannot make progress");
                out.extend(wb.take());
            }
            StepOutcome::InputExhausted(s) => {
                assert!(!s.is_empty());
                for i in s {
                    if let Some(b) = packed[i].get(next[i]) {
                        blocks[i] = b.bytes.clone();
                        state.load_block(i, b.used_len);
                        next[i] += 1;
                    } else {
                        state.mark_input_done(i);
                    }
                }
            }
            StepOutcome::AllDone => {
                out.extend(wb.take());
                return Ok((out, state));
            }
        }
    }
}

/// Decodes a concatenated stream of encoded records.
pub fn records_of(stream: &[u8]) -> Vec<Record> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < stream.len() {
        let (r, next) = decode_record(stream, off).expect("valid record stream");
        out.push(r);
        off = next;
    }
    out
}
