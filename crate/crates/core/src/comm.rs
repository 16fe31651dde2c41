//! Communication accounting.
//!
//! Every round, each sampled client uploads its adapters and downloads the
//! aggregate; both directions are counted. Bytes are `params ×
//! bytes_per_param` (default 4, float32). Sizes are reported in binary
//! gigabytes (2^30 bytes) and labelled "GB".
//!
//! All totals are integers; rounding happens only when formatting, and is
//! half-up.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::aggregation::ClientId;
use crate::error::Result;
use crate::federation::RoundTranscript;
use crate::lora::BackbonePreset;

pub const DEFAULT_BYTES_PER_PARAM: u64 = 4;
pub const GIB: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEntry {
    pub round: usize,
    pub client: ClientId,
    pub direction: Direction,
    pub params: u64,
    pub bytes: u64,
}

/// One upload and one download entry per sampled client per round.
pub fn ledger(transcripts: &[RoundTranscript], bytes_per_param: u64) -> Vec<CommEntry> {
    let mut entries = Vec::new();
    for tr in transcripts {
        for traffic in &tr.traffic {
            for (direction, params) in [
                (Direction::Upload, traffic.upload_params),
                (Direction::Download, traffic.download_params),
            ] {
                entries.push(CommEntry {
                    round: tr.round,
                    client: traffic.client,
                    direction,
                    params,
                    bytes: params * bytes_per_param,
                });
            }
        }
    }
    entries
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullModelTotals {
    pub full_params: u64,
    pub per_site_per_round_bytes: u64,
    pub total_bytes: u64,
}

/// Cost of the same protocol if every transfer carried the full model:
/// `T` rounds, `K` clients, both directions.
pub fn full_model_comparison(full_params: u64, bytes_per_param: u64, rounds: u64, clients: u64) -> FullModelTotals {
    let per = full_params * bytes_per_param;
    FullModelTotals {
        full_params,
        per_site_per_round_bytes: per,
        total_bytes: 2 * rounds * clients * per,
    }
}

/// `100·(1 − lora/full)` in hundredths of a percent, rounded half-up.
pub fn reduction_pct(full_params: u64, lora_params: u64) -> u64 {
    assert!(full_params > 0 && lora_params <= full_params, "need 0 <= lora <= full, full > 0");
    let num = 10_000u128 * (full_params - lora_params) as u128;
    let den = full_params as u128;
    ((2 * num + den) / (2 * den)) as u64
}

/// Formats hundredths as a fixed two-decimal number.
pub fn format_hundredths(h: u64) -> String {
    format!("{}.{:02}", h / 100, h % 100)
}

/// Bytes in GiB, rounded half-up to two decimals.
pub fn gib_2dp(bytes: u64) -> String {
    let h = (bytes as u128 * 200 + GIB as u128) / (2 * GIB as u128);
    format_hundredths(h as u64)
}

/// Bytes in GiB, rounded half-up to a whole number.
pub fn gib_whole(bytes: u64) -> String {
    ((bytes as u128 * 2 + GIB as u128) / (2 * GIB as u128)).to_string()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommReport {
    pub bytes_per_param: u64,
    pub total_params: u64,
    pub total_bytes: u64,
    pub full_model: Option<FullModelTotals>,
    /// Hundredths of a percent.
    pub reduction_hundredths: Option<u64>,
}

/// Totals of a completed run. `full_params`, when given, adds the
/// full-model comparison under the same rounds and participant count.
pub fn record(transcripts: &[RoundTranscript], bytes_per_param: u64, full_params: Option<u64>) -> CommReport {
    let entries = ledger(transcripts, bytes_per_param);
    let total_params = entries.iter().map(|e| e.params).sum();
    let total_bytes = entries.iter().map(|e| e.bytes).sum();
    let full_model = full_params.map(|full| {
        let per = full * bytes_per_param;
        let transfers = entries.len() as u64;
        FullModelTotals {
            full_params: full,
            per_site_per_round_bytes: per,
            total_bytes: transfers * per,
        }
    });
    let reduction_hundredths = full_params.and_then(|full| {
        let first = transcripts.first()?.traffic.first()?;
        Some(reduction_pct(full, first.upload_params))
    });
    CommReport {
        bytes_per_param,
        total_params,
        total_bytes,
        full_model,
        reduction_hundredths,
    }
}

/// Full-scale arithmetic for a named backbone preset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: String,
    pub bytes_per_param: u64,
    pub rounds: u64,
    pub clients: u64,
    pub full_params: u64,
    pub lora_params: u64,
    pub lora_total_bytes: u64,
    pub full: FullModelTotals,
    pub reduction_hundredths: u64,
}

impl PresetReport {
    pub fn new(preset: &BackbonePreset, bytes_per_param: u64, rounds: u64, clients: u64) -> Self {
        let lora = preset.lora_params();
        Self {
            preset: preset.name.to_string(),
            bytes_per_param,
            rounds,
            clients,
            full_params: preset.total_params,
            lora_params: lora,
            lora_total_bytes: 2 * rounds * clients * lora * bytes_per_param,
            full: full_model_comparison(preset.total_params, bytes_per_param, rounds, clients),
            reduction_hundredths: reduction_pct(preset.total_params, lora),
        }
    }

    /// `key,value` lines with the displayed (rounded) figures.
    pub fn lines(&self) -> Vec<(String, String)> {
        vec![
            ("preset".into(), self.preset.clone()),
            ("rounds".into(), self.rounds.to_string()),
            ("clients".into(), self.clients.to_string()),
            ("full_params".into(), self.full_params.to_string()),
            ("lora_params".into(), self.lora_params.to_string()),
            ("reduction_pct".into(), format_hundredths(self.reduction_hundredths)),
            ("lora_total_bytes".into(), self.lora_total_bytes.to_string()),
            ("lora_total_gb".into(), gib_2dp(self.lora_total_bytes)),
            ("full_per_site_per_round_gb".into(), gib_2dp(self.full.per_site_per_round_bytes)),
            ("full_total_gb".into(), gib_whole(self.full.total_bytes)),
        ]
    }
}

/// CSV with columns `round, client, direction, params, bytes`.
pub fn write_csv<W: Write>(entries: &[CommEntry], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["round", "client", "direction", "params", "bytes"])?;
    for e in entries {
        let direction = match e.direction {
            Direction::Upload => "upload",
            Direction::Download => "download",
        };
        writer.write_record([
            e.round.to_string(),
            e.client.to_string(),
            direction.to_string(),
            e.params.to_string(),
            e.bytes.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
