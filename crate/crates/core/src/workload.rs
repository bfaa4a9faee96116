//! Deterministic generation of compaction inputs: sorted tables with
//! configurable key/value sizes, cross-input key overlap, and tombstones.
//!
//! Keys are zero-padded lowercase-hex encodings of sampled integers, so
//! lexicographic order equals numeric order and a brute-force oracle is
//! easy to build. Sequence numbers are globally unique and increase with
//! input ordinal, so later inputs shadow earlier ones, and every merge
//! resolves deterministically.

use std::collections::HashSet;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockio::{CrossingCostModel, CrossingStats};
use crate::kv::{Limits, Record, RecordKind};
use crate::sstable::{SstBuilder, SstError, SstMeta};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Sst(#[from] SstError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KeyDist {
    Uniform,
    Zipfian { theta: f64 },
}

impl Default for KeyDist {
    fn default() -> Self {
        KeyDist::Uniform
    }
}

pub const DEFAULT_ZIPF_THETA: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub n_inputs: usize,
    pub records_per_input: usize,
    pub key_len: usize,
    pub value_len: usize,
    /// Fraction of each later input's keys drawn from keys already used by
    /// earlier inputs (with fresh sequence numbers).
    pub duplicate_fraction: f64,
    pub tombstone_fraction: f64,
    pub seed: u64,
    pub distribution: KeyDist,
    pub block_size: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n_inputs: 4,
            records_per_input: 1000,
            key_len: 16,
            value_len: 1024,
            duplicate_fraction: 0.0,
            tombstone_fraction: 0.0,
            seed: 42,
            distribution: KeyDist::Uniform,
            block_size: crate::DEFAULT_BLOCK_SIZE,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidSpec(m));
        if self.n_inputs == 0 || self.records_per_input == 0 {
            return bad("need at least one input and one record".into());
        }
        if !(0.0..=1.0).contains(&self.duplicate_fraction) {
            return bad(format!(
                "duplicate fraction {} outside [0, 1]",
                self.duplicate_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.tombstone_fraction) {
            return bad(format!(
                "tombstone fraction {} outside [0, 1]",
                self.tombstone_fraction
            ));
        }
        if let KeyDist::Zipfian { theta } = self.distribution {
            if !(theta > 0.0 && theta < 5.0) {
                return bad(format!("zipfian theta {theta} outside (0, 5)"));
            }
        }
        let limits = self.limits();
        if self.key_len == 0 || self.key_len > limits.max_key_len {
            return bad(format!("key length {} outside limits", self.key_len));
        }
        let record_len = crate::kv::RECORD_HEADER_LEN + self.key_len + self.value_len;
        if record_len > self.block_size {
            return bad(format!(
                "a {record_len}-byte record does not fit a {}-byte block",
                self.block_size
            ));
        }
        if self.keyspace() < 2 * self.total_records() as u64 {
            return bad(format!(
                "key length {} gives too small a keyspace for {} records",
                self.key_len,
                self.total_records()
            ));
        }
        Ok(())
    }

    pub fn total_records(&self) -> usize {
        self.n_inputs * self.records_per_input
    }

    pub fn limits(&self) -> Limits {
        Limits {
            block_size: self.block_size,
            ..Limits::default()
        }
    }

    /// Integer keyspace sampled from: generous slack over the record count,
    /// capped by what `key_len` hex digits can express.
    fn keyspace(&self) -> u64 {
        let want = (self.total_records() as u64).saturating_mul(8).max(1024);
        let digits = self.key_len.min(15) as u32;
        want.min(16u64.saturating_pow(digits))
    }

    fn make_key(&self, x: u64) -> Vec<u8> {
        format!("{x:0width$x}", width = self.key_len).into_bytes()
    }
}

/// Generates `n_inputs` sorted tables under `out_dir`, named
/// `input_NNN.sst`. Byte-identical across runs for the same spec.
pub fn generate_inputs(spec: &WorkloadSpec, out_dir: &Path) -> Result<Vec<SstMeta>, WorkloadError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keyspace = spec.keyspace();
    let zipf = match spec.distribution {
        KeyDist::Uniform => None,
        KeyDist::Zipfian { theta } => Some(
            Zipf::new(keyspace, theta)
                .map_err(|e| WorkloadError::InvalidSpec(format!("zipfian: {e:?}")))?,
        ),
    };

    let sample_key = |rng: &mut ChaCha8Rng| -> u64 {
        match &zipf {
            None => rng.gen_range(0..keyspace),
            // ranks start at 1; map the hottest rank to the lowest key
            Some(z) => z.sample(rng) as u64 - 1,
        }
    };

    let mut used_global: HashSet<u64> = HashSet::new();
    let mut prior_keys: Vec<u64> = Vec::new();
    let mut next_seq: u64 = 1;
    let mut metas = Vec::with_capacity(spec.n_inputs);

    for input in 0..spec.n_inputs {
        let n_dup = if input == 0 {
            0
        } else {
            (spec.duplicate_fraction * spec.records_per_input as f64).round() as usize
        };
        let mut keys: HashSet<u64> = HashSet::with_capacity(spec.records_per_input);
        // overlap keys come from earlier inputs
        if n_dup > 0 && !prior_keys.is_empty() {
            while keys.len() < n_dup {
                let k = prior_keys[rng.gen_range(0..prior_keys.len())];
                keys.insert(k);
            }
        }
        // the rest are fresh draws; with zero overlap requested they must be
        // globally fresh so the merged record count is exactly the sum
        while keys.len() < spec.records_per_input {
            let k = sample_key(&mut rng);
            if spec.duplicate_fraction == 0.0 && used_global.contains(&k) {
                continue;
            }
            keys.insert(k);
        }

        let mut sorted: Vec<u64> = keys.iter().copied().collect();
        sorted.sort_unstable();

        let path = out_dir.join(format!("input_{input:03}.sst"));
        let mut builder = SstBuilder::create(
            &path,
            input as u64,
            spec.block_size,
            spec.limits(),
            CrossingStats::new(),
            CrossingCostModel::free(),
        )?;
        let mut value = vec![0u8; spec.value_len];
        for &k in &sorted {
            let seq = next_seq;
            next_seq += 1;
            let tombstone = spec.tombstone_fraction > 0.0
                && rng.gen_bool(spec.tombstone_fraction);
            let record = if tombstone {
                Record {
                    user_key: spec.make_key(k),
                    seq,
                    kind: RecordKind::Delete,
                    value: Vec::new(),
                }
            } else {
                rng.fill_bytes(&mut value);
                Record {
                    user_key: spec.make_key(k),
                    seq,
                    kind: RecordKind::Put,
                    value: value.clone(),
                }
            };
            builder.add(&record)?;
        }
        metas.push(builder.finish()?);

        // grow the overlap pool in sorted order so later draws are
        // independent of hash-set iteration order
        for &k in &sorted {
            if used_global.insert(k) {
                prior_keys.push(k);
            }
        }
    }
    Ok(metas)
}

/// Manifest describing generated inputs; serialized as the `gen` command's
/// output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedFile {
    pub path: String,
    pub file_id: u64,
    pub bytes: u64,
    pub num_blocks: u32,
    pub sha256: String,
}

pub fn describe_generated(metas: &[SstMeta]) -> Result<Vec<GeneratedFile>, WorkloadError> {
    use sha2::{Digest, Sha256};
    let mut out = Vec::with_capacity(metas.len());
    for m in metas {
        let mut hasher = Sha256::new();
        let mut file = std::fs::File::open(&m.path)?;
        let bytes = std::io::copy(&mut file, &mut hasher)?;
        out.push(GeneratedFile {
            path: m.path.display().to_string(),
            file_id: m.file_id,
            bytes,
            num_blocks: m.num_blocks,
            sha256: hex::encode(hasher.finalize()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::sstable::{open_sstable, read_file_bytes};
    use tempfile::TempDir;

    fn small_spec() -> WorkloadSpec {
        WorkloadSpec {
            n_inputs: 3,
            records_per_input: 120,
            key_len: 12,
            value_len: 48,
            seed: 7,
            block_size: 512,
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = small_spec();
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let m1 = generate_inputs(&spec, d1.path()).unwrap();
        let m2 = generate_inputs(&spec, d2.path()).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(
                read_file_bytes(&a.path).unwrap(),
                read_file_bytes(&b.path).unwrap()
            );
        }
        let d3 = TempDir::new().unwrap();
        let m3 = generate_inputs(
            &WorkloadSpec {
                seed: 8,
                ..small_spec()
            },
            d3.path(),
        )
        .unwrap();
        assert_ne!(
            read_file_bytes(&m1[0].path).unwrap(),
            read_file_bytes(&m3[0].path).unwrap()
        );
    }

    #[test]
    fn generated_tables_open_and_validate() {
        let dir = TempDir::new().unwrap();
        let spec = WorkloadSpec {
            tombstone_fraction: 0.3,
            duplicate_fraction: 0.4,
            distribution: KeyDist::Zipfian { theta: 0.99 },
            ..small_spec()
        };
        let metas = generate_inputs(&spec, dir.path()).unwrap();
        let mut seqs = HashSet::new();
        for m in &metas {
            let opened = open_sstable(&m.path, m.file_id).unwrap();
            assert_eq!(opened.index, m.index);
            for r in oracle::read_table_records(&opened).unwrap() {
                assert!(seqs.insert(r.seq), "sequence numbers must be unique");
                assert_eq!(r.user_key.len(), spec.key_len);
            }
        }
    }

    #[test]
    fn no_duplicates_means_no_drops() {
        let dir = TempDir::new().unwrap();
        let spec = small_spec();
        let metas = generate_inputs(&spec, dir.path()).unwrap();
        let merged = oracle::merge_tables(&metas, false).unwrap();
        assert_eq!(merged.len(), spec.total_records());
    }

    #[test]
    fn duplicate_fraction_overlaps_inputs() {
        let dir = TempDir::new().unwrap();
        let spec = WorkloadSpec {
            duplicate_fraction: 0.5,
            n_inputs: 2,
            ..small_spec()
        };
        let metas = generate_inputs(&spec, dir.path()).unwrap();
        let key_sets: Vec<HashSet<Vec<u8>>> = metas
            .iter()
            .map(|m| {
                oracle::read_table_records(m)
                    .unwrap()
                    .into_iter()
                    .map(|r| r.user_key)
                    .collect()
            })
            .collect();
        let shared = key_sets[0].intersection(&key_sets[1]).count();
        // at least half of the second input's keys come from the first;
        // fresh draws may add a few more collisions
        assert!(shared >= spec.records_per_input / 2, "shared = {shared}");
        // merged distinct-key count matches the union
        let union: HashSet<_> = key_sets[0].union(&key_sets[1]).collect();
        let merged = oracle::merge_tables(&metas, false).unwrap();
        assert_eq!(merged.len(), union.len());
        // duplicated keys resolve to the second input's (newer) version
        let second: std::collections::HashMap<Vec<u8>, u64> = oracle::read_table_records(&metas[1])
            .unwrap()
            .into_iter()
            .map(|r| (r.user_key, r.seq))
            .collect();
        for r in &merged {
            if let Some(&seq) = second.get(&r.user_key) {
                assert_eq!(r.seq, seq, "newest version must win");
            }
        }
    }

    #[test]
    fn rejects_bad_fractions() {
        let spec = WorkloadSpec {
            duplicate_fraction: 1.5,
            ..small_spec()
        };
        assert!(matches!(
            generate_inputs(&spec, Path::new("/tmp/unused")),
            Err(WorkloadError::InvalidSpec(_))
        ));
    }
}
