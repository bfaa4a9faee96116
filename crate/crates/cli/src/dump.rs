//! Debug dumps: table contents and block plans as JSON. Keys and values
//! are hex-encoded so arbitrary bytes survive the trip.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Subcommand};
use serde::Serialize;

use resystance_core::kv::RecordKind;
use resystance_core::sstable::{open_sstable, read_block_direct, decode_block_records};
use resystance_core::sstmap::{build_sstmap, DEFAULT_MAX_INPUTS};

#[derive(Args)]
pub struct SstdumpArgs {
    file: PathBuf,
    /// Dump header and index only
    #[arg(long)]
    skip_records: bool,
}

#[derive(Serialize)]
struct DumpIndexEntry {
    block_index: u32,
    offset: u64,
    used_len: u32,
    first_key_hex: String,
}

#[derive(Serialize)]
struct DumpRecord {
    key: String,
    key_hex: String,
    seq: u64,
    kind: &'static str,
    value_len: usize,
    value_hex: String,
}

#[derive(Serialize)]
struct TableDump {
    path: String,
    block_size: u32,
    num_blocks: u32,
    smallest_key_hex: String,
    largest_key_hex: String,
    index: Vec<DumpIndexEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    records: Option<Vec<DumpRecord>>,
}

pub fn cmd_sstdump(args: SstdumpArgs) -> anyhow::Result<ExitCode> {
    let meta = open_sstable(&args.file, 0).context("opening table")?;
    let index = meta
        .index
        .iter()
        .map(|e| DumpIndexEntry {
            block_index: e.block_index,
            offset: e.offset,
            used_len: e.used_len,
            first_key_hex: hex::encode(&e.first_key),
        })
        .collect();
    let records = if args.skip_records {
        None
    } else {
        let mut out = Vec::new();
        for e in &meta.index {
            let block = read_block_direct(&meta, e)?;
            for r in decode_block_records(&block, e.used_len)? {
                out.push(DumpRecord {
                    key: String::from_utf8_lossy(&r.user_key).into_owned(),
                    key_hex: hex::encode(&r.user_key),
                    seq: r.seq,
                    kind: match r.kind {
                        RecordKind::Put => "put",
                        RecordKind::Delete => "delete",
                    },
                    value_len: r.value.len(),
                    value_hex: hex::encode(&r.value),
                });
            }
        }
        Some(out)
    };
    let dump = TableDump {
        path: meta.path.display().to_string(),
        block_size: meta.block_size,
        num_blocks: meta.num_blocks,
        smallest_key_hex: hex::encode(&meta.smallest_key),
        largest_key_hex: hex::encode(&meta.largest_key),
        index,
        records,
    };
    println!("{}", serde_json::to_string_pretty(&dump)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct SstmapCmd {
    #[command(subcommand)]
    cmd: SstmapSub,
}

#[derive(Subcommand)]
enum SstmapSub {
    /// Print the full block plan for a set of inputs as JSON
    Dump {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Serialize)]
struct PlanInput {
    file_id: u64,
    path: String,
    block_size: u32,
    num_blocks: usize,
    cursor: usize,
    blocks: Vec<DumpIndexEntry>,
}

#[derive(Serialize)]
struct PlanDump {
    inputs: Vec<PlanInput>,
    total_blocks: u64,
}

pub fn cmd_sstmap(cmd: SstmapCmd) -> anyhow::Result<ExitCode> {
    match cmd.cmd {
        SstmapSub::Dump { inputs } => {
            let metas: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(i, p)| open_sstable(p, i as u64))
                .collect::<Result<_, _>>()
                .context("opening inputs")?;
            let map = build_sstmap(&metas, DEFAULT_MAX_INPUTS)?;
            let dump = PlanDump {
                total_blocks: map.total_blocks(),
                inputs: map
                    .inputs()
                    .iter()
                    .zip(&metas)
                    .map(|(inp, meta)| PlanInput {
                        file_id: inp.file_id,
                        path: meta.path.display().to_string(),
                        block_size: inp.block_size,
                        num_blocks: inp.descriptors().len(),
                        cursor: inp.cursor(),
                        blocks: inp
                            .descriptors()
                            .iter()
                            .map(|e| DumpIndexEntry {
                                block_index: e.block_index,
                                offset: e.offset,
                                used_len: e.used_len,
                                first_key_hex: hex::encode(&e.first_key),
                            })
                            .collect(),
                    })
                    .collect(),
            };
            println!("{}", serde_json::to_string_pretty(&dump)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
