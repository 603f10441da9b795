use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use pagekv::{DecodeMode, MemoryReport};
use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::verify::CheckResult;

/// Provenance stamped into every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl ReportMeta {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

/// One forward call at a given context length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub mode: DecodeMode,
    pub context_len: usize,
    pub attention_flops: u64,
    pub total_flops: u64,
    /// Advisory only; never compared.
    pub wall_nanos: u64,
}

/// Ratio between two adjacent rows of the same mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthRatio {
    pub mode: DecodeMode,
    pub from_len: usize,
    pub to_len: usize,
    pub attention_ratio: f64,
    pub total_ratio: f64,
}

/// Whole-generation cost up to `context_len` in both modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumulativeFlops {
    pub context_len: usize,
    /// Summed from per-step counters of the cached run.
    pub cached: u64,
    /// From the closed-form model; the per-step counters agree with it at
    /// every measured length.
    pub uncached: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub meta: ReportMeta,
    pub wall_time_advisory: bool,
    pub rows: Vec<ScalingRow>,
    pub ratios: Vec<GrowthRatio>,
    pub cumulative: Option<CumulativeFlops>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub meta: ReportMeta,
    pub trace_hash: String,
    pub memory: MemoryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifySummary {
    pub meta: ReportMeta,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

/// JSON plus a flat CSV table of the report's main series.
pub trait Report: Serialize {
    fn write_csv(&self, w: &mut csv::Writer<Vec<u8>>) -> Result<()>;

    fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_csv(&mut w)?;
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => self.to_json(),
            Format::Csv => self.to_csv(),
        }
    }
}

impl Report for ScalingReport {
    fn write_csv(&self, w: &mut csv::Writer<Vec<u8>>) -> Result<()> {
        for row in &self.rows {
            w.serialize(row)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct AuditCsvRow {
    event: usize,
    paged_reserved_tokens: usize,
    contiguous_reserved_tokens: usize,
    valid_tokens: usize,
    free_pages: usize,
}

impl Report for AuditReport {
    fn write_csv(&self, w: &mut csv::Writer<Vec<u8>>) -> Result<()> {
        let paged = &self.memory.paged.series;
        let contiguous = &self.memory.contiguous.series;
        for (p, c) in paged.iter().zip(contiguous) {
            w.serialize(AuditCsvRow {
                event: p.event,
                paged_reserved_tokens: p.reserved_tokens,
                contiguous_reserved_tokens: c.reserved_tokens,
                valid_tokens: p.valid_tokens,
                free_pages: p.free_pages,
            })?;
        }
        Ok(())
    }
}

impl Report for VerifySummary {
    fn write_csv(&self, w: &mut csv::Writer<Vec<u8>>) -> Result<()> {
        for c in &self.checks {
            w.serialize(c)?;
        }
        Ok(())
    }
}

/// Writes `text` to `out`, or stdout when unset.
pub fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
