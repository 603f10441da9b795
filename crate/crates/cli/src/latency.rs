use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Instant;

use pagekv::{Error, PagePool, PoolConfig, SeqId};
use serde::Serialize;

/// Reserve-latency probe: `workers` threads share one pool that already
/// holds `live` sequences, and each thread times reserve calls (freeing
/// each sequence right after) until `allocations` have been measured in
/// total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatencyProbe {
    pub live: usize,
    pub workers: usize,
    pub allocations: usize,
    pub page_size: usize,
    /// Tokens per timed request.
    pub request_tokens: usize,
}

impl LatencyProbe {
    pub fn new(live: usize) -> Self {
        Self {
            live,
            workers: 4,
            allocations: 100_000,
            page_size: 16,
            request_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatencyStats {
    pub live: usize,
    pub allocations: usize,
    pub p50_nanos: u64,
    pub p99_nanos: u64,
    pub max_nanos: u64,
}

fn percentile(sorted: &[u64], p: f64) -> u64 {
    let idx = ((sorted.len() as f64 * p).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub fn measure_reserve_latency(probe: LatencyProbe) -> Result<LatencyStats, Error> {
    if probe.workers == 0 || probe.allocations == 0 {
        return Err(Error::InvalidConfig(
            "latency probe needs workers and allocations".into(),
        ));
    }
    let per_request = probe.request_tokens.div_ceil(probe.page_size);
    let capacity = (probe.live + probe.workers) * per_request + probe.workers;
    let pool = Arc::new(PagePool::new(PoolConfig::new(probe.page_size, capacity))?);
    for i in 0..probe.live as u64 {
        pool.reserve(SeqId(i), probe.request_tokens)?;
    }

    let per_worker = probe.allocations.div_ceil(probe.workers);
    let barrier = Arc::new(Barrier::new(probe.workers));
    let handles: Vec<_> = (0..probe.workers as u64)
        .map(|w| {
            let pool = Arc::clone(&pool);
            let barrier = Arc::clone(&barrier);
            thread::spawn(move || -> Result<Vec<u64>, Error> {
                let base = (w + 1) << 40;
                // Warm the code path and the free stack before timing.
                for i in 0..1000 {
                    pool.reserve(SeqId(base | i), probe.request_tokens)?;
                    pool.free(SeqId(base | i))?;
                }
                barrier.wait();
                let mut samples = Vec::with_capacity(per_worker);
                for i in 0..per_worker as u64 {
                    let seq = SeqId(base | (1 << 20) | i);
                    let start = Instant::now();
                    pool.reserve(seq, probe.request_tokens)?;
                    samples.push(start.elapsed().as_nanos() as u64);
                    pool.free(seq)?;
                }
                Ok(samples)
            })
        })
        .collect();
    let mut samples = Vec::with_capacity(per_worker * probe.workers);
    for h in handles {
        samples.extend(h.join().expect("latency worker panicked")?);
    }
    samples.sort_unstable();
    Ok(LatencyStats {
        live: probe.live,
        allocations: samples.len(),
        p50_nanos: percentile(&samples, 0.50),
        p99_nanos: percentile(&samples, 0.99),
        max_nanos: *samples.last().expect("non-empty"),
    })
}
