//! Record model, binary record encoding, and the internal-key comparator
//! that defines merge order and deduplication.
//!
//! Record wire layout, all integers little-endian:
//!
//! ```text
//! [key_len: u16][flags: u8][seq: u64][value_len: u32][user_key][value]
//! ```
//!
//! `flags` bit 0 marks a tombstone; the remaining bits must be zero.
//! `key_len` is at least 1 (0 is reserved). The layout is normative: it is
//! embedded verbatim in SSTable data blocks and in merge write buffers.
//!
//! Internal-key order sorts by user key ascending (bytewise) and breaks ties
//! by sequence number descending, so the newest version of a key is always
//! encountered first during a merge.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed number of header bytes in front of every encoded record.
pub const RECORD_HEADER_LEN: usize = 2 + 1 + 8 + 4;

/// Flag bit marking a tombstone.
const FLAG_TOMBSTONE: u8 = 0x01;

pub const DEFAULT_MAX_KEY_LEN: usize = 1024;
pub const DEFAULT_MAX_VALUE_LEN: usize = 1 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("user key is {len} bytes, limit is {max}")]
    KeyTooLong { len: usize, max: usize },
    #[error("value is {len} bytes, limit is {max}")]
    ValueTooLong { len: usize, max: usize },
    #[error("encoded record is {len} bytes, block size is {block_size}")]
    RecordTooLargeForBlock { len: usize, block_size: usize },
    #[error("user key must not be empty")]
    ZeroKeyLength,
    #[error("tombstone carries a non-empty value")]
    DeleteWithValue,
    #[error("record extends past end of buffer")]
    TruncatedRecord,
    #[error("reserved record flag bits set: {flags:#04x}")]
    CorruptFlags { flags: u8 },
}

/// Size limits a record must satisfy before it can enter a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_key_len: usize,
    pub max_value_len: usize,
    pub block_size: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_key_len: DEFAULT_MAX_KEY_LEN,
            max_value_len: DEFAULT_MAX_VALUE_LEN,
            block_size: crate::DEFAULT_BLOCK_SIZE,
        }
    }
}

impl Limits {
    pub fn with_block_size(block_size: usize) -> Self {
        Limits {
            block_size,
            ..Limits::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Put,
    Delete,
}

/// One key–value entry: user key, sequence number, kind, and value.
///
/// Tombstones ([`RecordKind::Delete`]) carry an empty value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    pub user_key: Vec<u8>,
    pub seq: u64,
    pub kind: RecordKind,
    pub value: Vec<u8>,
}

impl Record {
    pub fn put(user_key: impl Into<Vec<u8>>, seq: u64, value: impl Into<Vec<u8>>) -> Record {
        Record {
            user_key: user_key.into(),
            seq,
            kind: RecordKind::Put,
            value: value.into(),
        }
    }

    pub fn delete(user_key: impl Into<Vec<u8>>, seq: u64) -> Record {
        Record {
            user_key: user_key.into(),
            seq,
            kind: RecordKind::Delete,
            value: Vec::new(),
        }
    }

    /// Length of the wire form: header plus key plus value.
    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + self.user_key.len() + self.value.len()
    }

    pub fn validate(&self, limits: &Limits) -> Result<(), KvError> {
        if self.user_key.is_empty() {
            return Err(KvError::ZeroKeyLength);
        }
        if self.user_key.len() > limits.max_key_len || self.user_key.len() > u16::MAX as usize {
            return Err(KvError::KeyTooLong {
                len: self.user_key.len(),
                max: limits.max_key_len.min(u16::MAX as usize),
            });
        }
        if self.value.len() > limits.max_value_len {
            return Err(KvError::ValueTooLong {
                len: self.value.len(),
                max: limits.max_value_len,
            });
        }
        if self.kind == RecordKind::Delete && !self.value.is_empty() {
            return Err(KvError::DeleteWithValue);
        }
        if self.encoded_len() > limits.block_size {
            return Err(KvError::RecordTooLargeForBlock {
                len: self.encoded_len(),
                block_size: limits.block_size,
            });
        }
        Ok(())
    }

    pub fn as_view(&self) -> RecordView<'_> {
        RecordView {
            user_key: &self.user_key,
            seq: self.seq,
            kind: self.kind,
            value: &self.value,
        }
    }
}

/// Borrowed form of a record, decoded in place from a block buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordView<'a> {
    pub user_key: &'a [u8],
    pub seq: u64,
    pub kind: RecordKind,
    pub value: &'a [u8],
}

impl RecordView<'_> {
    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + self.user_key.len() + self.value.len()
    }

    pub fn to_record(&self) -> Record {
        Record {
            user_key: self.user_key.to_vec(),
            seq: self.seq,
            kind: self.kind,
            value: self.value.to_vec(),
        }
    }
}

/// Encodes a record after validating it against `limits`.
pub fn encode_record(r: &Record, limits: &Limits) -> Result<Vec<u8>, KvError> {
    r.validate(limits)?;
    let mut out = Vec::with_capacity(r.encoded_len());
    encode_record_into(&r.as_view(), &mut out);
    Ok(out)
}

/// Appends the wire form of `rec` to `out`. The caller has already checked
/// the record against its limits.
pub fn encode_record_into(rec: &RecordView<'_>, out: &mut Vec<u8>) {
    out.extend_from_slice(&(rec.user_key.len() as u16).to_le_bytes());
    out.push(match rec.kind {
        RecordKind::Put => 0,
        RecordKind::Delete => FLAG_TOMBSTONE,
    });
    out.extend_from_slice(&rec.seq.to_le_bytes());
    out.extend_from_slice(&(rec.value.len() as u32).to_le_bytes());
    out.extend_from_slice(rec.user_key);
    out.extend_from_slice(rec.value);
}

/// Decodes the record starting at `offset`, borrowing key and value from
/// `buf`. Returns the view and the offset of the next record.
pub fn decode_view(buf: &[u8], offset: usize) -> Result<(RecordView<'_>, usize), KvError> {
    let header_end = offset
        .checked_add(RECORD_HEADER_LEN)
        .ok_or(KvError::TruncatedRecord)?;
    if header_end > buf.len() {
        return Err(KvError::TruncatedRecord);
    }
    let key_len = u16::from_le_bytes([buf[offset], buf[offset + 1]]) as usize;
    if key_len == 0 {
        return Err(KvError::ZeroKeyLength);
    }
    let flags = buf[offset + 2];
    if flags & !FLAG_TOMBSTONE != 0 {
        return Err(KvError::CorruptFlags { flags });
    }
    let seq = u64::from_le_bytes(buf[offset + 3..offset + 11].try_into().unwrap());
    let value_len = u32::from_le_bytes(buf[offset + 11..offset + 15].try_into().unwrap()) as usize;
    let key_end = header_end + key_len;
    let next = key_end + value_len;
    if next > buf.len() {
        return Err(KvError::TruncatedRecord);
    }
    let view = RecordView {
        user_key: &buf[header_end..key_end],
        seq,
        kind: if flags & FLAG_TOMBSTONE != 0 {
            RecordKind::Delete
        } else {
            RecordKind::Put
        },
        value: &buf[key_end..next],
    };
    Ok((view, next))
}

/// Owned-record counterpart of [`decode_view`]; inverse of [`encode_record`].
pub fn decode_record(buf: &[u8], offset: usize) -> Result<(Record, usize), KvError> {
    let (view, next) = decode_view(buf, offset)?;
    Ok((view.to_record(), next))
}

/// Internal-key order: user key ascending bytewise, sequence number
/// descending on key ties. `Equal` only when both components are equal.
pub fn compare_internal(a_key: &[u8], a_seq: u64, b_key: &[u8], b_seq: u64) -> Ordering {
    a_key.cmp(b_key).then_with(|| b_seq.cmp(&a_seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_put_golden() {
        let r = Record::put("a", 7, "xy");
        let bytes = encode_record(&r, &Limits::default()).unwrap();
        assert_eq!(
            bytes,
            vec![
                0x01, 0x00, // key_len
                0x00, // flags
                0x07, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, // seq
                0x02, 0x00, 0x00, 0x00, // value_len
                0x61, // "a"
                0x78, 0x79, // "xy"
            ]
        );
        assert_eq!(bytes.len(), 18);
    }

    #[test]
    fn encode_tombstone_golden() {
        let r = Record::delete("a", 3);
        let bytes = encode_record(&r, &Limits::default()).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(bytes[2], 0x01);
        assert_eq!(&bytes[11..15], &[0, 0, 0, 0]);
    }

    #[test]
    fn decode_inverse_of_encode() {
        let r = Record::put("a", 7, "xy");
        let bytes = encode_record(&r, &Limits::default()).unwrap();
        let (back, next) = decode_record(&bytes, 0).unwrap();
        assert_eq!(back, r);
        assert_eq!(next, 18);
    }

    #[test]
    fn decode_second_record_at_offset() {
        let limits = Limits::default();
        let a = Record::put("a", 1, "v1");
        let b = Record::put("b", 2, "v2");
        let mut buf = encode_record(&a, &limits).unwrap();
        buf.extend_from_slice(&encode_record(&b, &limits).unwrap());
        let (first, next) = decode_record(&buf, 0).unwrap();
        assert_eq!(first, a);
        let (second, end) = decode_record(&buf, next).unwrap();
        assert_eq!(second, b);
        assert_eq!(end, buf.len());
    }

    #[test]
    fn decode_truncated_mid_value() {
        let bytes = encode_record(&Record::put("key", 9, "value"), &Limits::default()).unwrap();
        let cut = &bytes[..bytes.len() - 2];
        assert_eq!(decode_record(cut, 0), Err(KvError::TruncatedRecord));
    }

    #[test]
    fn decode_rejects_zero_key_len() {
        let mut bytes = encode_record(&Record::put("k", 1, ""), &Limits::default()).unwrap();
        bytes[0] = 0;
        bytes[1] = 0;
        assert_eq!(decode_record(&bytes, 0), Err(KvError::ZeroKeyLength));
    }

    #[test]
    fn decode_rejects_reserved_flags() {
        let mut bytes = encode_record(&Record::put("k", 1, ""), &Limits::default()).unwrap();
        bytes[2] = 0x82;
        assert_eq!(
            decode_record(&bytes, 0),
            Err(KvError::CorruptFlags { flags: 0x82 })
        );
    }

    #[test]
    fn validate_limits() {
        let limits = Limits {
            max_key_len: 4,
            max_value_len: 8,
            block_size: 64,
        };
        assert_eq!(
            Record::put("toolong", 1, "").validate(&limits),
            Err(KvError::KeyTooLong { len: 7, max: 4 })
        );
        assert_eq!(
            Record::put("k", 1, "123456789").validate(&limits),
            Err(KvError::ValueTooLong { len: 9, max: 8 })
        );
        let tight = Limits {
            max_key_len: 1024,
            max_value_len: 1 << 20,
            block_size: 16,
        };
        assert!(matches!(
            Record::put("key", 1, "12").validate(&tight),
            Err(KvError::RecordTooLargeForBlock { len: 20, .. })
        ));
    }

    #[test]
    fn compare_internal_cases() {
        assert_eq!(compare_internal(b"a", 5, b"b", 9), Ordering::Less);
        assert_eq!(compare_internal(b"a", 5, b"a", 9), Ordering::Greater);
        assert_eq!(compare_internal(b"a", 5, b"a", 5), Ordering::Equal);
        assert_eq!(compare_internal(b"ab", 1, b"a", 1), Ordering::Greater);
    }

    fn arb_record() -> impl Strategy<Value = Record> {
        (
            proptest::collection::vec(any::<u8>(), 1..64),
            any::<u64>(),
            any::<bool>(),
            proptest::collection::vec(any::<u8>(), 0..128),
        )
            .prop_map(|(key, seq, del, value)| {
                if del {
                    Record::delete(key, seq)
                } else {
                    Record::put(key, seq, value)
                }
            })
    }

    proptest! {
        #[test]
        fn round_trip(r in arb_record()) {
            let bytes = encode_record(&r, &Limits::default()).unwrap();
            prop_assert_eq!(bytes.len(), r.encoded_len());
            let (back, next) = decode_record(&bytes, 0).unwrap();
            prop_assert_eq!(back, r);
            prop_assert_eq!(next, bytes.len());
        }

        #[test]
        fn order_is_total(
            a in (proptest::collection::vec(any::<u8>(), 1..8), any::<u64>()),
            b in (proptest::collection::vec(any::<u8>(), 1..8), any::<u64>()),
            c in (proptest::collection::vec(any::<u8>(), 1..8), any::<u64>()),
        ) {
            let cmp = |x: &(Vec<u8>, u64), y: &(Vec<u8>, u64)| compare_internal(&x.0, x.1, &y.0, y.1);
            // antisymmetry
            prop_assert_eq!(cmp(&a, &b), cmp(&b, &a).reverse());
            // equality is exact
            if cmp(&a, &b) == Ordering::Equal {
                prop_assert_eq!(&a, &b);
            }
            // transitivity
            if cmp(&a, &b) != Ordering::Greater && cmp(&b, &c) != Ordering::Greater {
                prop_assert_ne!(cmp(&a, &c), Ordering::Greater);
            }
        }

        #[test]
        fn sort_groups_keys_with_descending_seq(
            mut keys in proptest::collection::vec(
                (proptest::collection::vec(any::<u8>(), 1..4), any::<u64>()), 0..64)
        ) {
            keys.sort_by(|a, b| compare_internal(&a.0, a.1, &b.0, b.1));
            keys.dedup();
            for w in keys.windows(2) {
                if w[0].0 == w[1].0 {
                    prop_assert!(w[0].1 > w[1].1);
                }
            }
        }
    }
}
