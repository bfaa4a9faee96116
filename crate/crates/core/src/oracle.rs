//! Brute-force reference merge: concatenate, sort by internal key, keep the
//! newest version of each user key, optionally drop tombstones.
//!
//! Kept deliberately independent of the merge engines and the block-read
//! backends — it reads table files flat and sorts in memory — so it can
//! stand as the oracle the engines are checked against. Suitable for small
//! inputs only.

use std::fs::File;
use std::os::unix::fs::FileExt;

use crate::kv::{compare_internal, decode_view, Record};
use crate::sstable::{SstError, SstMeta};

/// Merges in-memory record lists the slow, obviously-correct way.
pub fn merge_records(inputs: &[Vec<Record>], drop_tombstones: bool) -> Vec<Record> {
    let mut all: Vec<Record> = inputs.iter().flatten().cloned().collect();
    // stable sort: exact (key, seq) ties keep their input order, matching
    // the engines' lowest-ordinal-wins rule
    all.sort_by(|a, b| compare_internal(&a.user_key, a.seq, &b.user_key, b.seq));
    let mut out: Vec<Record> = Vec::new();
    let mut last_key: Option<Vec<u8>> = None;
    for r in all {
        if last_key.as_deref() == Some(r.user_key.as_slice()) {
            continue;
        }
        last_key = Some(r.user_key.clone());
        if drop_tombstones && r.kind == crate::kv::RecordKind::Delete {
            continue;
        }
        out.push(r);
    }
    out
}

/// Reads every record of a table by scanning its data region block by
/// block, bypassing the accounted read path.
pub fn read_table_records(meta: &SstMeta) -> Result<Vec<Record>, SstError> {
    let file = File::open(&meta.path)?;
    let mut out = Vec::new();
    let mut block = vec![0u8; meta.block_size as usize];
    for entry in &meta.index {
        file.read_exact_at(&mut block, entry.offset)?;
        let payload = &block[..entry.used_len as usize];
        let mut off = 0usize;
        while off < payload.len() {
            let (view, next) = decode_view(payload, off)?;
            out.push(view.to_record());
            off = next;
        }
    }
    Ok(out)
}

/// File-level oracle: merge whole tables.
pub fn merge_tables(metas: &[SstMeta], drop_tombstones: bool) -> Result<Vec<Record>, SstError> {
    let mut inputs = Vec::with_capacity(metas.len());
    for m in metas {
        inputs.push(read_table_records(m)?);
    }
    Ok(merge_records(&inputs, drop_tombstones))
}

/// Concatenated record stream of a list of output tables, in file order.
pub fn read_output_records(metas: &[SstMeta]) -> Result<Vec<Record>, SstError> {
    let mut out = Vec::new();
    for m in metas {
        out.extend(read_table_records(m)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::Record;

    #[test]
    fn keeps_newest_and_applies_tombstone_policy() {
        let a = vec![Record::put("a", 5, "new"), Record::delete("b", 7)];
        let b = vec![Record::put("a", 2, "old"), Record::put("b", 3, "old")];
        let merged = merge_records(&[a.clone(), b.clone()], false);
        assert_eq!(
            merged,
            vec![Record::put("a", 5, "new"), Record::delete("b", 7)]
        );
        let dropped = merge_records(&[a, b], true);
        assert_eq!(dropped, vec![Record::put("a", 5, "new")]);
    }

    #[test]
    fn exact_ties_keep_first_input() {
        let a = vec![Record::put("k", 5, "a")];
        let b = vec![Record::put("k", 5, "b")];
        assert_eq!(merge_records(&[a, b], false), vec![Record::put("k", 5, "a")]);
    }
}
