//! Evaluation scenarios as deterministic event traces, and memory
//! accounting of a trace under paged and contiguous allocators.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::page_manager::{PagePool, PoolConfig, SeqId};

/// Prompt lengths of the fixed mixed batch: 500, 1000, ..., 8000.
pub const LADDER_LENGTHS: [usize; 16] = {
    let mut out = [0; 16];
    let mut i = 0;
    while i < 16 {
        out[i] = 500 * (i + 1);
        i += 1;
    }
    out
};

/// Choices for the uniform mixed batch: 256, 512, ..., 4096.
pub const UNIFORM_CHOICES: [usize; 16] = {
    let mut out = [0; 16];
    let mut i = 0;
    while i < 16 {
        out[i] = 256 * (i + 1);
        i += 1;
    }
    out
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Arrive {
        seq: SeqId,
        prompt_len: usize,
    },
    Decode {
        seq: SeqId,
        tokens: usize,
    },
    Finish {
        seq: SeqId,
    },
    Fork {
        parent: SeqId,
        child: SeqId,
        prefix: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TraceHeader {
    scenario: String,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub scenario: String,
    pub seed: u64,
    pub events: Vec<Event>,
}

impl Trace {
    pub fn new(scenario: impl Into<String>, seed: u64, events: Vec<Event>) -> Self {
        Self {
            scenario: scenario.into(),
            seed,
            events,
        }
    }

    /// Replays lengths, checking that every event names a live sequence.
    /// Returns the largest length each sequence reached.
    pub fn peak_lengths(&self) -> Result<BTreeMap<SeqId, usize>> {
        let mut live: HashMap<SeqId, usize> = HashMap::new();
        let mut peaks = BTreeMap::new();
        let mut seen = std::collections::HashSet::new();
        for (i, ev) in self.events.iter().enumerate() {
            let bad = |msg: String| Error::InvalidTrace(format!("event {i}: {msg}"));
            match *ev {
                Event::Arrive { seq, prompt_len } => {
                    if !seen.insert(seq) {
                        return Err(bad(format!("{seq} arrives twice")));
                    }
                    live.insert(seq, prompt_len);
                    peaks.insert(seq, prompt_len);
                }
                Event::Decode { seq, tokens } => {
                    let len = live
                        .get_mut(&seq)
                        .ok_or_else(|| bad(format!("{seq} is not live")))?;
                    *len += tokens;
                    peaks.insert(seq, *len);
                }
                Event::Finish { seq } => {
                    live.remove(&seq)
                        .ok_or_else(|| bad(format!("{seq} is not live")))?;
                }
                Event::Fork {
                    parent,
                    child,
                    prefix,
                } => {
                    let plen = *live
                        .get(&parent)
                        .ok_or_else(|| bad(format!("{parent} is not live")))?;
                    if prefix > plen {
                        return Err(bad(format!(
                            "prefix {prefix} exceeds {parent} length {plen}"
                        )));
                    }
                    if !seen.insert(child) {
                        return Err(bad(format!("{child} already used")));
                    }
                    live.insert(child, prefix);
                    peaks.insert(child, prefix);
                }
            }
        }
        Ok(peaks)
    }

    pub fn validate(&self) -> Result<()> {
        self.peak_lengths().map(|_| ())
    }

    /// Header line followed by one JSON object per event.
    pub fn to_jsonl(&self) -> String {
        let header = TraceHeader {
            scenario: self.scenario.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TraceHeader = lines
            .next()
            .ok_or_else(|| Error::InvalidTrace("missing header line".into()))
            .and_then(|l| {
                serde_json::from_str(l).map_err(|e| Error::InvalidTrace(e.to_string()))
            })?;
        let events = lines
            .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidTrace(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self {
            scenario: header.scenario,
            seed: header.seed,
            events,
        })
    }

    /// SHA-256 of the JSONL form, hex encoded.
    pub fn stable_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

/// One sequence generating `len` tokens from an empty prompt.
pub fn gen_single_sequence(len: usize) -> Trace {
    let seq = SeqId(0);
    let mut events = vec![Event::Arrive { seq, prompt_len: 0 }];
    if len > 0 {
        events.push(Event::Decode { seq, tokens: len });
    }
    Trace::new("single", 0, events)
}

/// Every prompt in `lengths` arrives, then all finish in a seeded order.
pub fn gen_fixed_batch(lengths: &[usize], seed: u64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events: Vec<Event> = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| Event::Arrive {
            seq: SeqId(i as u64),
            prompt_len: len,
        })
        .collect();
    let mut order: Vec<u64> = (0..lengths.len() as u64).collect();
    order.shuffle(&mut rng);
    events.extend(order.into_iter().map(|s| Event::Finish { seq: SeqId(s) }));
    Trace::new("fixed-batch", seed, events)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixedBatch {
    /// 16 prompts of 500, 1000, ..., 8000 tokens.
    Ladder,
    /// `count` prompts drawn uniformly from 256, 512, ..., 4096 tokens.
    Uniform { count: usize },
}

/// Concurrent prompts that all arrive, then finish in a seeded order.
///
/// The ladder adds no decode tokens so its peak is exactly the prompt set.
/// The uniform batch interleaves short decode bursts (up to 64 tokens) with
/// finishes.
pub fn gen_mixed_batch(kind: MixedBatch, seed: u64) -> Trace {
    match kind {
        MixedBatch::Ladder => {
            let mut t = gen_fixed_batch(&LADDER_LENGTHS, seed);
            t.scenario = "mixed-ladder".into();
            t
        }
        MixedBatch::Uniform { count } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut events = Vec::new();
            let mut pending: Vec<Vec<Event>> = Vec::with_capacity(count);
            for i in 0..count {
                let seq = SeqId(i as u64);
                let len = UNIFORM_CHOICES[rng.random_range(0..UNIFORM_CHOICES.len())];
                events.push(Event::Arrive {
                    seq,
                    prompt_len: len,
                });
                let burst = rng.random_range(0..=64);
                // Reversed so `pop` yields decode before finish.
                let mut tail = vec![Event::Finish { seq }];
                if burst > 0 {
                    tail.push(Event::Decode { seq, tokens: burst });
                }
                pending.push(tail);
            }
            while !pending.is_empty() {
                let pick = rng.random_range(0..pending.len());
                let ev = pending[pick].pop().expect("non-empty tail");
                events.push(ev);
                if pending[pick].is_empty() {
                    pending.swap_remove(pick);
                }
            }
            Trace::new("mixed-uniform", seed, events)
        }
    }
}

/// One conversation whose context is extended from `start` to `end`
/// tokens, multiplying by `step_factor` each turn.
pub fn gen_chat_growth(start: usize, end: usize, step_factor: usize) -> Result<Trace> {
    if start == 0 || end < start || step_factor < 2 {
        return Err(Error::InvalidConfig(format!(
            "chat growth needs 0 < start <= end and factor >= 2, got {start}..{end} x{step_factor}"
        )));
    }
    let seq = SeqId(0);
    let mut events = vec![Event::Arrive {
        seq,
        prompt_len: start,
    }];
    let mut ctx = start;
    while ctx < end {
        let next = (ctx * step_factor).min(end);
        events.push(Event::Decode {
            seq,
            tokens: next - ctx,
        });
        ctx = next;
    }
    Ok(Trace::new("chat-growth", 0, events))
}

/// Per-token K/V footprint: `layers * 2 * head_count * head_dim * bytes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvShape {
    pub layers: usize,
    pub head_count: usize,
    pub head_dim: usize,
    pub bytes_per_scalar: usize,
}

impl KvShape {
    /// The 7B reference shape: 32 layers of 32 heads x 128, half precision.
    pub const LLAMA_7B: KvShape = KvShape {
        layers: 32,
        head_count: 32,
        head_dim: 128,
        bytes_per_scalar: 2,
    };

    pub fn bytes_per_token_per_layer(&self) -> u64 {
        2 * (self.head_count * self.head_dim * self.bytes_per_scalar) as u64
    }

    pub fn bytes_per_token(&self) -> u64 {
        self.layers as u64 * self.bytes_per_token_per_layer()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AllocatorModel {
    Paged { page_size: usize },
    Contiguous { max_len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusPoint {
    pub event: usize,
    /// Token slots held by the allocator.
    pub reserved_tokens: usize,
    /// Distinct valid tokens across live sequences.
    pub valid_tokens: usize,
    /// Pool pages on the free stack (paged only).
    pub free_pages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocatorUsage {
    pub model: AllocatorModel,
    pub peak_reserved_tokens: usize,
    pub peak_valid_tokens: usize,
    pub peak_bytes: u64,
    pub theoretical_min_bytes: u64,
    /// `peak / theoretical_min - 1`, in percent.
    pub overhead_pct: f64,
    /// Share of reserved slots holding no valid token at the reserved peak,
    /// in percent.
    pub waste_pct_at_peak: f64,
    pub series: Vec<CensusPoint>,
}

/// Valid-token bookkeeping with forked prefixes counted once.
#[derive(Default)]
struct LiveTokens {
    /// Per live sequence: (origin sequence, start, end) runs of positions.
    segments: HashMap<SeqId, Vec<(SeqId, usize, usize)>>,
    lens: HashMap<SeqId, usize>,
}

impl LiveTokens {
    fn apply(&mut self, ev: &Event) {
        match *ev {
            Event::Arrive { seq, prompt_len } => {
                self.segments.insert(seq, vec![(seq, 0, prompt_len)]);
                self.lens.insert(seq, prompt_len);
            }
            Event::Decode { seq, tokens } => {
                let len = self.lens[&seq];
                let segs = self.segments.get_mut(&seq).expect("validated");
                match segs.last_mut() {
                    Some((origin, _, hi)) if *origin == seq && *hi == len => *hi += tokens,
                    _ => segs.push((seq, len, len + tokens)),
                }
                self.lens.insert(seq, len + tokens);
            }
            Event::Finish { seq } => {
                self.segments.remove(&seq);
                self.lens.remove(&seq);
            }
            Event::Fork {
                parent,
                child,
                prefix,
            } => {
                let segs = self.segments[&parent]
                    .iter()
                    .filter(|s| s.1 < prefix)
                    .map(|&(o, lo, hi)| (o, lo, hi.min(prefix)))
                    .collect();
                self.segments.insert(child, segs);
                self.lens.insert(child, prefix);
            }
        }
    }

    fn unique(&self) -> usize {
        let mut by_origin: HashMap<SeqId, Vec<(usize, usize)>> = HashMap::new();
        for segs in self.segments.values() {
            for &(o, lo, hi) in segs {
                if hi > lo {
                    by_origin.entry(o).or_default().push((lo, hi));
                }
            }
        }
        by_origin
            .into_values()
            .map(|mut iv| {
                iv.sort_unstable();
                let (mut total, mut cur_lo, mut cur_hi) = (0, iv[0].0, iv[0].1);
                for &(lo, hi) in &iv[1..] {
                    if lo > cur_hi {
                        total += cur_hi - cur_lo;
                        (cur_lo, cur_hi) = (lo, hi);
                    } else {
                        cur_hi = cur_hi.max(hi);
                    }
                }
                total + cur_hi - cur_lo
            })
            .sum()
    }
}

fn pct(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        100.0 * num / den
    }
}

/// Replays `trace` against one allocator model.
///
/// The paged model runs a real [`PagePool`] and reads its census after
/// every event; the contiguous model charges `max_len` slots per live
/// sequence.
pub fn account(trace: &Trace, model: AllocatorModel, shape: &KvShape) -> Result<AllocatorUsage> {
    let peaks = trace.peak_lengths()?;
    let mut tokens = LiveTokens::default();
    let mut series = Vec::with_capacity(trace.events.len());

    let pool = match model {
        AllocatorModel::Paged { page_size } => {
            let pages: usize = peaks.values().map(|l| l.div_ceil(page_size.max(1))).sum();
            Some(PagePool::new(PoolConfig::new(page_size, pages + 1))?)
        }
        AllocatorModel::Contiguous { max_len } => {
            if let Some((seq, len)) = peaks.iter().find(|(_, &l)| l > max_len) {
                return Err(Error::InvalidTrace(format!(
                    "{seq} reaches {len} tokens, beyond contiguous max_len {max_len}"
                )));
            }
            None
        }
    };

    for (i, ev) in trace.events.iter().enumerate() {
        tokens.apply(ev);
        let (reserved, free_pages) = match (&pool, model) {
            (Some(pool), AllocatorModel::Paged { page_size }) => {
                match *ev {
                    Event::Arrive { seq, prompt_len } => {
                        pool.reserve(seq, prompt_len)?;
                        pool.mark_written(seq, prompt_len)?;
                    }
                    Event::Decode { seq, tokens: n } => {
                        let len = pool.logical_len(seq)? + n;
                        pool.grow(seq, len)?;
                        pool.mark_written(seq, len)?;
                    }
                    Event::Finish { seq } => {
                        pool.free(seq)?;
                    }
                    Event::Fork {
                        parent,
                        child,
                        prefix,
                    } => {
                        pool.fork(parent, child, prefix)?;
                    }
                }
                let census = pool.census()?;
                (census.live_pages * page_size, census.free_pages)
            }
            (_, AllocatorModel::Contiguous { max_len }) => (tokens.lens.len() * max_len, 0),
            _ => unreachable!(),
        };
        series.push(CensusPoint {
            event: i,
            reserved_tokens: reserved,
            valid_tokens: tokens.unique(),
            free_pages,
        });
    }

    let peak_reserved_at = series
        .iter()
        .max_by_key(|p| (p.reserved_tokens, std::cmp::Reverse(p.event)))
        .copied();
    let peak_reserved = peak_reserved_at.map_or(0, |p| p.reserved_tokens);
    let peak_valid = series.iter().map(|p| p.valid_tokens).max().unwrap_or(0);
    let waste = peak_reserved_at.map_or(0.0, |p| {
        pct(
            (p.reserved_tokens - p.valid_tokens) as f64,
            p.reserved_tokens as f64,
        )
    });
    let bpt = shape.bytes_per_token();
    Ok(AllocatorUsage {
        model,
        peak_reserved_tokens: peak_reserved,
        peak_valid_tokens: peak_valid,
        peak_bytes: peak_reserved as u64 * bpt,
        theoretical_min_bytes: peak_valid as u64 * bpt,
        overhead_pct: pct(peak_reserved as f64 - peak_valid as f64, peak_valid as f64),
        waste_pct_at_peak: waste,
        series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub scenario: String,
    pub shape: KvShape,
    pub peak_bytes_paged: u64,
    pub peak_bytes_contiguous: u64,
    pub theoretical_min_bytes: u64,
    /// Theoretical minimum K/V bytes of a single layer at the peak.
    pub per_layer_min_bytes: u64,
    pub paged: AllocatorUsage,
    pub contiguous: AllocatorUsage,
}

/// Accounts `trace` under both allocators. `max_len` defaults to the
/// longest sequence in the trace.
pub fn memory_report(
    trace: &Trace,
    page_size: usize,
    max_len: Option<usize>,
    shape: &KvShape,
) -> Result<MemoryReport> {
    let longest = trace.peak_lengths()?.values().copied().max().unwrap_or(0);
    let paged = account(trace, AllocatorModel::Paged { page_size }, shape)?;
    let contiguous = account(
        trace,
        AllocatorModel::Contiguous {
            max_len: max_len.unwrap_or(longest),
        },
        shape,
    )?;
    Ok(MemoryReport {
        scenario: trace.scenario.clone(),
        shape: *shape,
        peak_bytes_paged: paged.peak_bytes,
        peak_bytes_contiguous: contiguous.peak_bytes,
        theoretical_min_bytes: paged.theoretical_min_bytes,
        per_layer_min_bytes: paged.peak_valid_tokens as u64 * shape.bytes_per_token_per_layer(),
        paged,
        contiguous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: KvShape = KvShape {
        layers: 1,
        head_count: 1,
        head_dim: 1,
        bytes_per_scalar: 2,
    };

    #[test]
    fn single_sequence_shapes() {
        let t = gen_single_sequence(128);
        assert_eq!(
            t.events,
            vec![
                Event::Arrive {
                    seq: SeqId(0),
                    prompt_len: 0
                },
                Event::Decode {
                    seq: SeqId(0),
                    tokens: 128
                }
            ]
        );
        assert_eq!(gen_single_sequence(0).events.len(), 1);
        assert_eq!(t.stable_hash(), gen_single_sequence(128).stable_hash());
    }

    #[test]
    fn ladder_batch() {
        let t = gen_mixed_batch(MixedBatch::Ladder, 7);
        let peaks = t.peak_lengths().unwrap();
        assert_eq!(peaks.len(), 16);
        let lens: Vec<usize> = peaks.values().copied().collect();
        assert_eq!(lens, LADDER_LENGTHS.to_vec());
        assert_eq!(lens.iter().sum::<usize>(), 68_000);
        assert_eq!(t, gen_mixed_batch(MixedBatch::Ladder, 7));
    }

    #[test]
    fn uniform_batch_draws_from_grid() {
        let t = gen_mixed_batch(MixedBatch::Uniform { count: 16 }, 11);
        t.validate().unwrap();
        let arrivals: Vec<usize> = t
            .events
            .iter()
            .filter_map(|e| match e {
                Event::Arrive { prompt_len, .. } => Some(*prompt_len),
                _ => None,
            })
            .collect();
        assert_eq!(arrivals.len(), 16);
        assert!(arrivals
            .iter()
            .all(|l| l % 256 == 0 && (256..=4096).contains(l)));
        let finishes = t
            .events
            .iter()
            .filter(|e| matches!(e, Event::Finish { .. }))
            .count();
        assert_eq!(finishes, 16);
        assert_eq!(t, gen_mixed_batch(MixedBatch::Uniform { count: 16 }, 11));
        assert_ne!(t, gen_mixed_batch(MixedBatch::Uniform { count: 16 }, 12));
    }

    #[test]
    fn chat_growth_phases() {
        let t = gen_chat_growth(1024, 4096, 2).unwrap();
        let mut ctx = Vec::new();
        let mut len = 0;
        for e in &t.events {
            match e {
                Event::Arrive { prompt_len, .. } => len = *prompt_len,
                Event::Decode { tokens, .. } => len += tokens,
                _ => unreachable!(),
            }
            ctx.push(len);
        }
        assert_eq!(ctx, vec![1024, 2048, 4096]);
        assert_eq!(gen_chat_growth(512, 512, 2).unwrap().events.len(), 1);
        assert!(gen_chat_growth(512, 256, 2).is_err());
        assert!(gen_chat_growth(512, 1024, 1).is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_hash() {
        let t = gen_mixed_batch(MixedBatch::Uniform { count: 4 }, 3);
        let text = t.to_jsonl();
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with(r#"{"event":"arrive""#));
        assert_eq!(Trace::from_jsonl(&text).unwrap(), t);
        assert_eq!(t.stable_hash().len(), 64);
        assert!(Trace::from_jsonl("").is_err());
    }

    #[test]
    fn invalid_traces_rejected() {
        let t = Trace::new(
            "bad",
            0,
            vec![Event::Decode {
                seq: SeqId(1),
                tokens: 1,
            }],
        );
        assert!(matches!(t.validate(), Err(Error::InvalidTrace(_))));
        let t = Trace::new(
            "bad",
            0,
            vec![
                Event::Arrive {
                    seq: SeqId(1),
                    prompt_len: 2,
                },
                Event::Finish { seq: SeqId(1) },
                Event::Finish { seq: SeqId(1) },
            ],
        );
        assert!(t.validate().is_err());
        assert!(account(&t, AllocatorModel::Paged { page_size: 4 }, &TINY).is_err());
    }

    #[test]
    fn contiguous_quarter_used() {
        let t = Trace::new(
            "one",
            0,
            vec![Event::Arrive {
                seq: SeqId(0),
                prompt_len: 1024,
            }],
        );
        let u = account(&t, AllocatorModel::Contiguous { max_len: 4096 }, &TINY).unwrap();
        assert_eq!(u.waste_pct_at_peak, 75.0);
        assert_eq!(u.overhead_pct, 300.0);
        let short = Trace::new(
            "one",
            0,
            vec![Event::Arrive {
                seq: SeqId(0),
                prompt_len: 5000,
            }],
        );
        assert!(account(&short, AllocatorModel::Contiguous { max_len: 4096 }, &TINY).is_err());
    }

    #[test]
    fn paged_partial_page_overhead() {
        let t = Trace::new(
            "one",
            0,
            vec![Event::Arrive {
                seq: SeqId(0),
                prompt_len: 1000,
            }],
        );
        let u = account(&t, AllocatorModel::Paged { page_size: 64 }, &TINY).unwrap();
        assert_eq!(u.peak_reserved_tokens, 1024);
        assert!((u.overhead_pct - 2.4).abs() < 1e-9);
    }

    #[test]
    fn empty_trace_has_zero_peaks() {
        let t = Trace::new("empty", 0, Vec::new());
        let r = memory_report(&t, 64, None, &TINY).unwrap();
        assert_eq!(r.peak_bytes_paged, 0);
        assert_eq!(r.peak_bytes_contiguous, 0);
        assert_eq!(r.theoretical_min_bytes, 0);
        assert_eq!(r.paged.overhead_pct, 0.0);
    }

    #[test]
    fn forked_prefix_counted_once() {
        let t = Trace::new(
            "fork",
            0,
            vec![
                Event::Arrive {
                    seq: SeqId(0),
                    prompt_len: 128,
                },
                Event::Fork {
                    parent: SeqId(0),
                    child: SeqId(1),
                    prefix: 128,
                },
                Event::Decode {
                    seq: SeqId(1),
                    tokens: 10,
                },
                Event::Decode {
                    seq: SeqId(0),
                    tokens: 5,
                },
            ],
        );
        let u = account(&t, AllocatorModel::Paged { page_size: 64 }, &TINY).unwrap();
        let last = u.series.last().unwrap();
        assert_eq!(last.valid_tokens, 128 + 10 + 5);
        // Two shared pages plus one private tail page each.
        assert_eq!(last.reserved_tokens, 4 * 64);
        assert!(u.overhead_pct >= 0.0);
    }

    #[test]
    fn per_layer_bytes_arithmetic() {
        let s = KvShape::LLAMA_7B;
        assert_eq!(s.bytes_per_token_per_layer(), 2 * 32 * 128 * 2);
        let r = memory_report(&gen_single_sequence(2048), 64, None, &s).unwrap();
        assert_eq!(r.per_layer_min_bytes, 2048 * 16_384);
    }
}
