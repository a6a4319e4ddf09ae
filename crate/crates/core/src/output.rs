//! Flat record types for the run artifacts and their CSV / JSON-lines
//! writers.
//!
//! `designpoints.csv`, `designpoints.jsonl` and `frontier.csv` share the
//! [`DesignRow`] columns, in declaration order. Money columns are dollars
//! with two decimals (exact cents); `tco_per_mtok` is dollars per million
//! generated tokens.

use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::economics::DesignPoint;
use crate::error::{Error, Result};
use crate::mapping::FfnLayout;
use crate::money::Cents;
use crate::perfsim::Bound;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub model: String,
    pub sram_mb: f64,
    pub tflops: f64,
    /// GB/s.
    pub bandwidth: f64,
    pub die_area: f64,
    pub die_cost: Cents,
    pub chip_tdp: f64,
    pub chips_per_lane: u64,
    pub chips_per_server: u64,
    pub n_servers: u64,
    pub total_chips: u64,
    pub batch: u64,
    pub context: u64,
    pub sparsity: f64,
    pub t: u64,
    pub p: u64,
    pub micro_batches: u64,
    pub micro_batch_size: u64,
    pub attn: String,
    pub ffn: String,
    pub ffn_layout: FfnLayout,
    pub boundary: String,
    pub granularity: String,
    /// Bytes on the fullest chip.
    pub memory_per_chip: f64,
    pub l_mb: f64,
    pub l_s: f64,
    pub l_prefill: f64,
    pub l_all: f64,
    pub throughput: f64,
    pub tokens_per_chip: f64,
    pub utilization: f64,
    pub bound: Bound,
    pub server_capex: Cents,
    pub capex: Cents,
    pub opex_per_year: Cents,
    pub tco: Cents,
    pub tco_per_mtok: f64,
    pub capex_share: f64,
    pub config_hash: String,
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

impl From<&DesignPoint> for DesignRow {
    fn from(d: &DesignPoint) -> Self {
        let chip = &d.server.chiplet;
        DesignRow {
            model: d.model.clone(),
            sram_mb: chip.sram_mb,
            tflops: chip.tflops,
            bandwidth: chip.bandwidth,
            die_area: chip.die_area,
            die_cost: Cents::from_dollars(chip.die_cost),
            chip_tdp: chip.tdp,
            chips_per_lane: d.server.chips_per_lane,
            chips_per_server: d.server.chips_total,
            n_servers: d.n_servers,
            total_chips: d.total_chips(),
            batch: d.plan.batch,
            context: d.plan.context,
            sparsity: d.plan.sparsity,
            t: d.plan.t,
            p: d.plan.p,
            micro_batches: d.plan.micro_batches,
            micro_batch_size: d.plan.micro_batch_size,
            attn: d.plan.attn.to_string(),
            ffn: d.plan.ffn.to_string(),
            ffn_layout: d.plan.ffn_layout,
            boundary: enum_name(&d.plan.boundary),
            granularity: enum_name(&d.plan.granularity),
            memory_per_chip: d.plan.memory_per_chip,
            l_mb: d.perf.l_mb,
            l_s: d.perf.l_s,
            l_prefill: d.perf.l_prefill,
            l_all: d.perf.l_all,
            throughput: d.perf.throughput,
            tokens_per_chip: d.perf.tokens_per_chip,
            utilization: d.perf.utilization,
            bound: d.perf.bound,
            server_capex: d.server.capex.total(),
            capex: Cents::from_dollars(d.cost.capex),
            opex_per_year: Cents::from_dollars(d.cost.opex_per_year),
            tco: Cents::from_dollars(d.cost.tco),
            tco_per_mtok: d.cost.tco_per_mtok,
            capex_share: d.cost.capex_share,
            config_hash: d.config_hash.clone(),
        }
    }
}

/// One rejected candidate, at whichever phase rejected it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    /// `chiplet`, `server`, `mapping` or `heuristic`.
    pub stage: String,
    pub model: String,
    pub sram_mb: f64,
    pub tflops: f64,
    pub bandwidth: f64,
    pub die_area: f64,
    /// 0 when the rejection precedes server assembly.
    pub chips_per_lane: u64,
    pub batch: u64,
    pub context: u64,
    pub sparsity: f64,
    /// Reason codes joined by `|`.
    pub reason: String,
    /// Number of candidates rejected for this reason.
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub batch: u64,
    pub context: u64,
    pub sparsity: f64,
    pub servers_evaluated: u64,
    pub servers_fitting: u64,
    pub plans_simulated: u64,
    pub plans_pruned: u64,
    pub best_tco_per_mtok: Option<f64>,
    pub best_tokens_per_chip: Option<f64>,
}

/// A (series, x, y, label) triple of plot data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub label: String,
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// CSV with a header even when `rows` is empty.
pub fn csv_bytes_with_header<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        return w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")));
    }
    csv_bytes(rows)
}

pub fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::from)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub const DESIGN_COLUMNS: &[&str] = &[
    "model",
    "sram_mb",
    "tflops",
    "bandwidth",
    "die_area",
    "die_cost",
    "chip_tdp",
    "chips_per_lane",
    "chips_per_server",
    "n_servers",
    "total_chips",
    "batch",
    "context",
    "sparsity",
    "t",
    "p",
    "micro_batches",
    "micro_batch_size",
    "attn",
    "ffn",
    "ffn_layout",
    "boundary",
    "granularity",
    "memory_per_chip",
    "l_mb",
    "l_s",
    "l_prefill",
    "l_all",
    "throughput",
    "tokens_per_chip",
    "utilization",
    "bound",
    "server_capex",
    "capex",
    "opex_per_year",
    "tco",
    "tco_per_mtok",
    "capex_share",
    "config_hash",
];

pub const REJECTION_COLUMNS: &[&str] = &[
    "stage",
    "model",
    "sram_mb",
    "tflops",
    "bandwidth",
    "die_area",
    "chips_per_lane",
    "batch",
    "context",
    "sparsity",
    "reason",
    "count",
];

pub const PLOT_COLUMNS: &[&str] = &["series", "x", "y", "label"];
