use anyhow::Result;
use pagekv::memory_report;

use crate::config::{ConfigError, RunConfig};
use crate::report::{AuditReport, ReportMeta};

/// Replays the scenario trace under paged and contiguous allocators and
/// reports peak, minimum and wasted K/V bytes for `config.shape`.
pub fn cmd_audit(config: &RunConfig) -> Result<AuditReport> {
    config.validate()?;
    let trace = config.trace()?;
    let memory = memory_report(&trace, config.page_size, config.max_len, &config.shape)?;
    if let Some(pool) = config.pool_pages {
        let peak_pages = memory.paged.peak_reserved_tokens / config.page_size;
        if peak_pages > pool {
            return Err(ConfigError(format!(
                "trace peaks at {peak_pages} pages but the pool holds {pool}"
            ))
            .into());
        }
    }
    Ok(AuditReport {
        meta: ReportMeta::new("audit", config),
        trace_hash: trace.stable_hash(),
        memory,
    })
}
