use std::time::Instant;

use anyhow::Result;
use pagekv::{DecodeMode, FlopCounter, ToyDecoder};

use crate::config::{ConfigError, RunConfig};
use crate::report::{CumulativeFlops, GrowthRatio, ReportMeta, ScalingReport, ScalingRow};

fn row(mode: DecodeMode, context_len: usize, flops: FlopCounter, wall_nanos: u64) -> ScalingRow {
    ScalingRow {
        mode,
        context_len,
        attention_flops: flops.attention_flops,
        total_flops: flops.total(),
        wall_nanos,
    }
}

fn ratios(rows: &[ScalingRow]) -> Vec<GrowthRatio> {
    rows.windows(2)
        .filter(|w| w[0].mode == w[1].mode)
        .map(|w| GrowthRatio {
            mode: w[0].mode,
            from_len: w[0].context_len,
            to_len: w[1].context_len,
            attention_ratio: w[1].attention_flops as f64 / w[0].attention_flops as f64,
            total_ratio: w[1].total_flops as f64 / w[0].total_flops as f64,
        })
        .collect()
}

/// Per-step decode cost at each context length, cached and uncached.
///
/// The cached sweep is one greedy generation from a single-token prompt;
/// its per-call counters are read at the requested lengths. The uncached
/// rows recompute the same token prefix from scratch.
pub fn cmd_bench(config: &RunConfig) -> Result<ScalingReport> {
    config.validate()?;
    let lengths = config.context_lengths()?;
    let longest = *lengths
        .last()
        .ok_or_else(|| ConfigError("no context lengths".into()))?;
    let model = ToyDecoder::new(config.model)?;
    let want_cached = config.mode != Some(DecodeMode::Nocache);
    let want_uncached = config.mode != Some(DecodeMode::Cached);

    // The cached run doubles as the token source for uncached prefixes.
    let prompt = [1u32];
    let gen = model.generate(&prompt, longest, DecodeMode::Cached, config.page_size)?;
    let context: Vec<u32> = prompt.iter().chain(&gen.tokens).copied().collect();

    let mut rows = Vec::new();
    if want_cached {
        for &n in &lengths {
            let step = gen.steps[n - 1];
            debug_assert_eq!(step.context_len, n);
            rows.push(row(DecodeMode::Cached, n, step.flops, step.wall_nanos));
        }
    }
    if want_uncached {
        for &n in &lengths {
            let start = Instant::now();
            let (_, flops) = model.decode_step_nocache(&context[..n])?;
            rows.push(row(
                DecodeMode::Nocache,
                n,
                flops,
                start.elapsed().as_nanos() as u64,
            ));
        }
    }

    let cumulative = (want_cached && want_uncached).then(|| {
        let cached: u64 = gen.steps[..longest].iter().map(|s| s.flops.total()).sum();
        let uncached = model.flop_model().cumulative(longest, false).total();
        CumulativeFlops {
            context_len: longest,
            cached,
            uncached,
            ratio: uncached as f64 / cached as f64,
        }
    });

    Ok(ScalingReport {
        meta: ReportMeta::new("bench", config),
        wall_time_advisory: true,
        ratios: ratios(&rows),
        rows,
        cumulative,
    })
}
