//! Per-compaction block plan: for every input table, the ordered list of
//! block descriptors to read, with a cursor tracking delivery.
//!
//! The plan is fixed at construction from table metadata alone — no block
//! contents steer it — so a compaction's IO sequence is deterministic and
//! each block is delivered at most once, in ascending block order per input.

use thiserror::Error;

use crate::sstable::{IndexEntry, SstMeta};

pub const DEFAULT_MAX_INPUTS: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SstMapError {
    #[error("{n} inputs exceed the limit of {max}")]
    TooManyInputs { n: usize, max: usize },
    #[error("a compaction needs at least one input")]
    EmptyInputSet,
}

#[derive(Debug, Clone)]
pub struct SstMapInput {
    pub file_id: u64,
    pub block_size: u32,
    descriptors: Vec<IndexEntry>,
    cursor: usize,
}

impl SstMapInput {
    pub fn descriptors(&self) -> &[IndexEntry] {
        &self.descriptors
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Number of descriptors handed out so far; always equals the cursor.
    pub fn delivered_count(&self) -> usize {
        self.cursor
    }
}

/// The block plan for one compaction job. Immutable after construction
/// except for the per-input cursors.
#[derive(Debug, Clone)]
pub struct SstMap {
    inputs: Vec<SstMapInput>,
}

/// Builds the plan covering every block of every input, cursors at zero.
pub fn build_sstmap(inputs: &[SstMeta], max_inputs: usize) -> Result<SstMap, SstMapError> {
    if inputs.is_empty() {
        return Err(SstMapError::EmptyInputSet);
    }
    if inputs.len() > max_inputs {
        return Err(SstMapError::TooManyInputs {
            n: inputs.len(),
            max: max_inputs,
        });
    }
    Ok(SstMap {
        inputs: inputs
            .iter()
            .map(|meta| SstMapInput {
                file_id: meta.file_id,
                block_size: meta.block_size,
                descriptors: meta.index.clone(),
                cursor: 0,
            })
            .collect(),
    })
}

impl SstMap {
    /// Returns the next undelivered descriptor of `input` and advances its
    /// cursor; `None` once the input is exhausted. A descriptor is never
    /// returned twice.
    pub fn next_block_descriptor(&mut self, input: usize) -> Option<IndexEntry> {
        let inp = &mut self.inputs[input];
        let d = inp.descriptors.get(inp.cursor)?.clone();
        inp.cursor += 1;
        Some(d)
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn input(&self, i: usize) -> &SstMapInput {
        &self.inputs[i]
    }

    pub fn inputs(&self) -> &[SstMapInput] {
        &self.inputs
    }

    pub fn total_blocks(&self) -> u64 {
        self.inputs.iter().map(|i| i.descriptors.len() as u64).sum()
    }
}
