//! Exact scaled-dot-product attention over scattered pages.
//!
//! A query may attend to key `k` iff both belong to the same sequence, `k`
//! lies within that sequence's valid length, and, when causal, `k`'s local
//! position does not exceed the query's. Keys are grouped into blocks of one
//! page each and queries into chunks of `page_size`; every (query chunk,
//! key block) pair is classified FULL, PARTIAL or EMPTY up front so EMPTY
//! pairs are never touched.
//!
//! The kernel streams each query over its key blocks in ascending logical
//! order with a running-max softmax, so the result does not depend on where
//! the pages physically live.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{BatchView, KvStore};
use crate::page_manager::BlockTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub head_count: usize,
    pub head_dim: usize,
    pub scale: f32,
    pub causal: bool,
    pub page_size: usize,
}

impl AttentionConfig {
    /// Uses the usual `1 / sqrt(head_dim)` scale.
    pub fn new(head_count: usize, head_dim: usize, page_size: usize, causal: bool) -> Self {
        Self {
            head_count,
            head_dim,
            scale: 1.0 / (head_dim as f32).sqrt(),
            causal,
            page_size,
        }
    }

    pub fn with_scale(mut self, scale: f32) -> Self {
        self.scale = scale;
        self
    }

    pub fn row_width(&self) -> usize {
        self.head_count * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_count == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig(
                "head_count and head_dim must be positive".into(),
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if self.page_size == 0 || !self.page_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "page_size must be a power of two, got {}",
                self.page_size
            )));
        }
        Ok(())
    }
}

/// Key layout plus, for every query, its sequence (as an index into
/// `view.sequences`) and its absolute position within that sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub view: BatchView,
    pub query_seq: Vec<usize>,
    pub query_pos: Vec<usize>,
}

impl MaskMeta {
    pub fn new(view: BatchView, query_seq: Vec<usize>, query_pos: Vec<usize>) -> Result<Self> {
        let meta = Self {
            view,
            query_seq,
            query_pos,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// One query per key slot, as in prefill.
    pub fn prefill(view: BatchView) -> Self {
        let mut query_seq = Vec::with_capacity(view.total_slots());
        let mut query_pos = Vec::with_capacity(view.total_slots());
        for (i, &len) in view.lengths.iter().enumerate() {
            query_seq.extend(std::iter::repeat_n(i, len));
            query_pos.extend(0..len);
        }
        Self {
            view,
            query_seq,
            query_pos,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.query_seq.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_seq.len() != self.query_pos.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} query sequence ids but {} positions",
                self.query_seq.len(),
                self.query_pos.len()
            )));
        }
        for (q, (&s, &pos)) in self.query_seq.iter().zip(&self.query_pos).enumerate() {
            let Some(&len) = self.view.lengths.get(s) else {
                return Err(Error::ShapeMismatch(format!(
                    "query {q} names sequence index {s} outside the batch"
                )));
            };
            if pos >= len {
                return Err(Error::OutOfRange {
                    position: pos,
                    limit: len,
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn allowed_local(
    q_seq: usize,
    q_pos: usize,
    k_seq: usize,
    k_local: usize,
    len: usize,
    causal: bool,
) -> bool {
    q_seq == k_seq && k_local < len && (!causal || k_local <= q_pos)
}

/// The mask predicate for flat query slot `q` and flat key slot `k`.
pub fn mask_allow(q: usize, k: usize, meta: &MaskMeta, causal: bool) -> Result<bool> {
    if q >= meta.num_queries() {
        return Err(Error::IndexOutOfRange {
            index: q,
            len: meta.num_queries(),
        });
    }
    let (k_seq, k_local) = meta.view.locate(k).ok_or(Error::IndexOutOfRange {
        index: k,
        len: meta.view.total_slots(),
    })?;
    Ok(allowed_local(
        meta.query_seq[q],
        meta.query_pos[q],
        k_seq,
        k_local,
        meta.view.lengths[k_seq],
        causal,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockClass {
    Full,
    Partial,
    Empty,
}

/// One page worth of keys of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvBlock {
    pub seq_index: usize,
    /// Logical page index within the sequence.
    pub page_index: usize,
    /// First flat key slot covered.
    pub flat_start: usize,
    /// Valid keys in the block (`<= page_size`).
    pub len: usize,
}

/// Dense (query chunk x key block) classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub block_size: usize,
    pub query_blocks: usize,
    pub kv_blocks: Vec<KvBlock>,
    classes: Vec<BlockClass>,
}

impl BlockMask {
    pub fn class(&self, query_block: usize, kv_block: usize) -> BlockClass {
        self.classes[query_block * self.kv_blocks.len() + kv_block]
    }

    pub fn row(&self, query_block: usize) -> &[BlockClass] {
        let n = self.kv_blocks.len();
        &self.classes[query_block * n..(query_block + 1) * n]
    }

    /// Number of (full, partial, empty) pairs.
    pub fn counts(&self) -> (usize, usize, usize) {
        self.classes.iter().fold((0, 0, 0), |(f, p, e), c| match c {
            BlockClass::Full => (f + 1, p, e),
            BlockClass::Partial => (f, p + 1, e),
            BlockClass::Empty => (f, p, e + 1),
        })
    }
}

fn kv_blocks(view: &BatchView, page_size: usize) -> Vec<KvBlock> {
    let mut blocks = Vec::new();
    for (seq_index, (&len, &start)) in view.lengths.iter().zip(&view.prefix_sums).enumerate() {
        for page_index in 0..len.div_ceil(page_size) {
            let lo = page_index * page_size;
            blocks.push(KvBlock {
                seq_index,
                page_index,
                flat_start: start + lo,
                len: (len - lo).min(page_size),
            });
        }
    }
    blocks
}

/// Keys of `block` a query may see. The predicate always admits a prefix
/// of a block, so a count is enough.
#[inline]
fn allowed_in_block(
    q_seq: usize,
    q_pos: usize,
    block: &KvBlock,
    page_size: usize,
    causal: bool,
) -> usize {
    if q_seq != block.seq_index {
        return 0;
    }
    if !causal {
        return block.len;
    }
    let lo = block.page_index * page_size;
    (q_pos + 1).saturating_sub(lo).min(block.len)
}

pub fn build_block_mask(meta: &MaskMeta, config: &AttentionConfig) -> Result<BlockMask> {
    config.validate()?;
    meta.validate()?;
    let page_size = config.page_size;
    let blocks = kv_blocks(&meta.view, page_size);
    let query_blocks = meta.num_queries().div_ceil(page_size);
    let mut classes = Vec::with_capacity(query_blocks * blocks.len());
    for qb in 0..query_blocks {
        let queries = qb * page_size..((qb + 1) * page_size).min(meta.num_queries());
        for block in &blocks {
            let (mut any, mut all) = (false, true);
            for q in queries.clone() {
                let n = allowed_in_block(
                    meta.query_seq[q],
                    meta.query_pos[q],
                    block,
                    page_size,
                    config.causal,
                );
                any |= n > 0;
                all &= n == block.len;
            }
            classes.push(match (any, all) {
                (_, true) => BlockClass::Full,
                (true, false) => BlockClass::Partial,
                (false, false) => BlockClass::Empty,
            });
        }
    }
    Ok(BlockMask {
        block_size: page_size,
        query_blocks,
        kv_blocks: blocks,
        classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelOptions {
    /// Skip EMPTY (query chunk, key block) pairs entirely.
    pub skip_empty: bool,
    /// Collect per-query key, FLOP and block counters.
    pub instrument: bool,
    /// Also recompute every softmax row sum (second pass; implies
    /// `instrument`).
    pub row_sums: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            skip_empty: true,
            instrument: false,
            row_sums: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub allowed_keys: u64,
    /// Score and mix FLOPs: `4 * head_dim` per allowed key per head.
    pub flops: u64,
    pub visited_blocks: u32,
    /// Per head, sum of the normalized softmax weights. Empty unless
    /// `row_sums` was requested.
    pub weight_sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Vec<f32>,
    pub stats: Option<Vec<QueryStats>>,
}

fn check_inputs(
    queries: &[f32],
    store: &KvStore,
    layer: usize,
    tables: &[BlockTable],
    meta: &MaskMeta,
    config: &AttentionConfig,
) -> Result<()> {
    config.validate()?;
    meta.validate()?;
    let layout = store.layout();
    if layout.head_count != config.head_count || layout.head_dim != config.head_dim {
        return Err(Error::ShapeMismatch(format!(
            "store holds {}x{} heads, config asks for {}x{}",
            layout.head_count, layout.head_dim, config.head_count, config.head_dim
        )));
    }
    if store.page_size() != config.page_size {
        return Err(Error::ShapeMismatch(format!(
            "store page size {} but config page size {}",
            store.page_size(),
            config.page_size
        )));
    }
    if layer >= layout.layers {
        return Err(Error::ShapeMismatch(format!(
            "layer {layer} outside {} layers",
            layout.layers
        )));
    }
    if queries.len() != meta.num_queries() * config.row_width() {
        return Err(Error::ShapeMismatch(format!(
            "{} query scalars for {} queries of width {}",
            queries.len(),
            meta.num_queries(),
            config.row_width()
        )));
    }
    if tables.len() != meta.view.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tables for {} sequences",
            tables.len(),
            meta.view.len()
        )));
    }
    let pages = store.rows() / config.page_size;
    for ((table, &seq), &len) in tables
        .iter()
        .zip(&meta.view.sequences)
        .zip(&meta.view.lengths)
    {
        if table.seq != seq {
            return Err(Error::UnknownSequence(seq));
        }
        if len > table.capacity(config.page_size) {
            return Err(Error::OutOfRange {
                position: len,
                limit: table.capacity(config.page_size),
            });
        }
        if let Some(bad) = table.entries.iter().find(|p| p.index() >= pages) {
            return Err(Error::ShapeMismatch(format!(
                "page {} outside the store",
                bad.0
            )));
        }
    }
    Ok(())
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

/// Streaming state for one chunk of queries.
struct ChunkState {
    max: Vec<f32>,
    denom: Vec<f32>,
    acc: Vec<f32>,
}

/// Paged attention with default options. Output has one row of
/// `head_count * head_dim` per query.
pub fn paged_attention(
    queries: &[f32],
    store: &KvStore,
    layer: usize,
    tables: &[BlockTable],
    meta: &MaskMeta,
    config: &AttentionConfig,
) -> Result<Vec<f32>> {
    paged_attention_with(
        queries,
        store,
        layer,
        tables,
        meta,
        config,
        KernelOptions::default(),
    )
    .map(|o| o.output)
}

pub fn paged_attention_with(
    queries: &[f32],
    store: &KvStore,
    layer: usize,
    tables: &[BlockTable],
    meta: &MaskMeta,
    config: &AttentionConfig,
    options: KernelOptions,
) -> Result<AttentionOutput> {
    check_inputs(queries, store, layer, tables, meta, config)?;
    let mask = build_block_mask(meta, config)?;
    let width = config.row_width();
    let chunk = config.page_size;
    let nq = meta.num_queries();
    let options = KernelOptions {
        instrument: options.instrument || options.row_sums,
        ..options
    };

    let mut output = vec![0.0f32; nq * width];
    let mut stats: Vec<QueryStats> = if options.instrument {
        vec![
            QueryStats {
                allowed_keys: 0,
                flops: 0,
                visited_blocks: 0,
                weight_sums: if options.row_sums {
                    vec![0.0; config.head_count]
                } else {
                    Vec::new()
                },
            };
            nq
        ]
    } else {
        Vec::new()
    };

    let results: Vec<Result<()>> = output
        .par_chunks_mut(chunk * width)
        .zip(if options.instrument {
            stats.par_chunks_mut(chunk).map(Some).collect::<Vec<_>>()
        } else {
            (0..mask.query_blocks).map(|_| None).collect()
        })
        .enumerate()
        .map(|(qb, (out, chunk_stats))| {
            run_chunk(
                qb,
                out,
                chunk_stats,
                queries,
                store,
                layer,
                tables,
                meta,
                config,
                &mask,
                options,
            )
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;

    Ok(AttentionOutput {
        output,
        stats: options.instrument.then_some(stats),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_chunk(
    qb: usize,
    out: &mut [f32],
    mut stats: Option<&mut [QueryStats]>,
    queries: &[f32],
    store: &KvStore,
    layer: usize,
    tables: &[BlockTable],
    meta: &MaskMeta,
    config: &AttentionConfig,
    mask: &BlockMask,
    options: KernelOptions,
) -> Result<()> {
    let (heads, dim, width) = (config.head_count, config.head_dim, config.row_width());
    let page_size = config.page_size;
    let q0 = qb * page_size;
    let n = out.len() / width;

    let mut state = ChunkState {
        max: vec![f32::NEG_INFINITY; n * heads],
        denom: vec![0.0; n * heads],
        acc: vec![0.0; n * width],
    };
    let mut kbuf = vec![0.0f32; page_size * width];
    let mut vbuf = vec![0.0f32; page_size * width];
    let mut scores = vec![0.0f32; page_size];
    let mut allowed: Vec<usize> = Vec::with_capacity(page_size);

    for (kb, block) in mask.kv_blocks.iter().enumerate() {
        let class = mask.class(qb, kb);
        if class == BlockClass::Empty && options.skip_empty {
            continue;
        }
        let page = tables[block.seq_index].entries[block.page_index];
        let mut loaded = false;

        for i in 0..n {
            let q = q0 + i;
            let (q_seq, q_pos) = (meta.query_seq[q], meta.query_pos[q]);
            allowed.clear();
            if class == BlockClass::Full {
                allowed.extend(0..block.len);
            } else {
                let len = meta.view.lengths[block.seq_index];
                let lo = block.page_index * page_size;
                allowed.extend((0..block.len).filter(|&j| {
                    allowed_local(q_seq, q_pos, block.seq_index, lo + j, len, config.causal)
                }));
            }
            if allowed.is_empty() {
                continue;
            }
            if !loaded {
                store.read_page(layer, page, block.len, &mut kbuf, &mut vbuf);
                loaded = true;
            }
            if let Some(s) = stats.as_deref_mut() {
                s[i].allowed_keys += allowed.len() as u64;
                s[i].flops += (allowed.len() * heads * dim * 4) as u64;
                s[i].visited_blocks += 1;
            }

            let q_row = &queries[q * width..(q + 1) * width];
            for h in 0..heads {
                let hs = h * dim..(h + 1) * dim;
                let q_h = &q_row[hs.clone()];
                let mut block_max = f32::NEG_INFINITY;
                for &j in &allowed {
                    let s = config.scale
                        * dot(q_h, &kbuf[j * width + h * dim..j * width + (h + 1) * dim]);
                    scores[j] = s;
                    block_max = block_max.max(s);
                }
                let slot = i * heads + h;
                let new_max = state.max[slot].max(block_max);
                let rescale = (state.max[slot] - new_max).exp();
                let acc = &mut state.acc[i * width + h * dim..i * width + (h + 1) * dim];
                state.denom[slot] *= rescale;
                for a in acc.iter_mut() {
                    *a *= rescale;
                }
                for &j in &allowed {
                    let p = (scores[j] - new_max).exp();
                    state.denom[slot] += p;
                    let v = &vbuf[j * width + h * dim..j * width + (h + 1) * dim];
                    for (a, &x) in acc.iter_mut().zip(v) {
                        *a += p * x;
                    }
                }
                state.max[slot] = new_max;
            }
        }
    }

    for i in 0..n {
        for h in 0..heads {
            let slot = i * heads + h;
            let denom = state.denom[slot];
            if denom == 0.0 {
                return Err(Error::NoAllowedKeys(q0 + i));
            }
            for d in 0..dim {
                out[i * width + h * dim + d] = state.acc[i * width + h * dim + d] / denom;
            }
        }
    }

    if let Some(s) = stats.filter(|_| options.row_sums) {
        // Second pass: recompute every allowed weight against the final
        // max and denominator.
        for (kb, block) in mask.kv_blocks.iter().enumerate() {
            if mask.class(qb, kb) == BlockClass::Empty {
                continue;
            }
            let page = tables[block.seq_index].entries[block.page_index];
            store.read_page(layer, page, block.len, &mut kbuf, &mut vbuf);
            for (i, st) in s.iter_mut().enumerate().take(n) {
                let q = q0 + i;
                let count = allowed_in_block(
                    meta.query_seq[q],
                    meta.query_pos[q],
                    block,
                    page_size,
                    config.causal,
                );
                let q_row = &queries[q * width..(q + 1) * width];
                for h in 0..heads {
                    let slot = i * heads + h;
                    let q_h = &q_row[h * dim..(h + 1) * dim];
                    for j in 0..count {
                        let sc = config.scale
                            * dot(q_h, &kbuf[j * width + h * dim..j * width + (h + 1) * dim]);
                        st.weight_sums[h] +=
                            f64::from((sc - state.max[slot]).exp()) / f64::from(state.denom[slot]);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Dense textbook attention with 64-bit accumulation over contiguous K/V.
///
/// `keys` and `values` hold the sequences back to back (`lengths` rows
/// each); each query names its sequence index and position.
pub fn reference_attention(
    queries: &[f32],
    query_seq: &[usize],
    query_pos: &[usize],
    keys: &[f32],
    values: &[f32],
    lengths: &[usize],
    config: &AttentionConfig,
) -> Result<Vec<f64>> {
    let (heads, dim, width) = (config.head_count, config.head_dim, config.row_width());
    let total: usize = lengths.iter().sum();
    if keys.len() != total * width || values.len() != total * width {
        return Err(Error::ShapeMismatch(format!(
            "K/V hold {}/{} scalars, lengths need {}",
            keys.len(),
            values.len(),
            total * width
        )));
    }
    if query_seq.len() != query_pos.len() || queries.len() != query_seq.len() * width {
        return Err(Error::ShapeMismatch(
            "query rows, ids and positions disagree".into(),
        ));
    }
    let mut starts = Vec::with_capacity(lengths.len());
    let mut acc = 0;
    for &len in lengths {
        starts.push(acc);
        acc += len;
    }
    let scale = f64::from(config.scale);

    let mut out = vec![0.0f64; queries.len()];
    for (qi, (&s, &pos)) in query_seq.iter().zip(query_pos).enumerate() {
        let len = *lengths.get(s).ok_or_else(|| {
            Error::ShapeMismatch(format!("query {qi} names unknown sequence {s}"))
        })?;
        let visible = if config.causal {
            (pos + 1).min(len)
        } else {
            len
        };
        if visible == 0 {
            return Err(Error::NoAllowedKeys(qi));
        }
        for h in 0..heads {
            let q = &queries[qi * width + h * dim..qi * width + (h + 1) * dim];
            let scores: Vec<f64> = (0..visible)
                .map(|k| {
                    let row = (starts[s] + k) * width + h * dim;
                    scale
                        * q.iter()
                            .zip(&keys[row..row + dim])
                            .map(|(&a, &b)| f64::from(a) * f64::from(b))
                            .sum::<f64>()
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = weights.iter().sum();
            let o = &mut out[qi * width + h * dim..qi * width + (h + 1) * dim];
            for (k, w) in weights.iter().enumerate() {
                let row = (starts[s] + k) * width + h * dim;
                for (dst, &v) in o.iter_mut().zip(&values[row..row + dim]) {
                    *dst += w / denom * f64::from(v);
                }
            }
        }
    }
    Ok(out)
}

/// Largest per-row relative error: for every `row`-sized chunk,
/// `max |a - e| / max |e|`.
pub fn max_row_relative_error(actual: &[f32], expected: &[f64], row: usize) -> f64 {
    assert_eq!(actual.len(), expected.len());
    actual
        .chunks(row)
        .zip(expected.chunks(row))
        .map(|(a, e)| {
            let scale = e
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()))
                .max(f64::MIN_POSITIVE);
            let err = a
                .iter()
                .zip(e)
                .fold(0.0f64, |m, (&x, &y)| m.max((f64::from(x) - y).abs()));
            err / scale
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_cache::{KvCache, KvLayout, Precision};
    use crate::page_manager::{PoolConfig, SeqId};

    fn meta_for(lengths: &[usize], queries: &[(usize, usize)]) -> MaskMeta {
        let seqs: Vec<SeqId> = (0..lengths.len() as u64).map(SeqId).collect();
        let view = BatchView::new(&seqs, lengths).unwrap();
        MaskMeta::new(
            view,
            queries.iter().map(|q| q.0).collect(),
            queries.iter().map(|q| q.1).collect(),
        )
        .unwrap()
    }

    #[test]
    fn mask_predicate_cases() {
        let meta = meta_for(&[6, 4], &[(0, 5), (1, 2)]);
        // q0 is seq 0 pos 5; key flat 3 is seq 0 local 3.
        assert!(mask_allow(0, 3, &meta, true).unwrap());
        // Cross-sequence.
        assert!(!mask_allow(0, 7, &meta, false).unwrap());
        // Future key under causality.
        assert!(!mask_allow(1, 9, &meta, true).unwrap());
        assert!(mask_allow(1, 9, &meta, false).unwrap());
        assert_eq!(
            mask_allow(0, 10, &meta, false),
            Err(Error::IndexOutOfRange { index: 10, len: 10 })
        );
        assert!(mask_allow(2, 0, &meta, false).is_err());
    }

    #[test]
    fn key_beyond_valid_length_is_masked() {
        // Length 3 view over a sequence: local position 3 never exists as a
        // flat key, and the block covering it stops at 3.
        let meta = meta_for(&[3], &[(0, 2)]);
        assert!(!allowed_local(0, 2, 0, 3, 3, false));
        let mask = build_block_mask(&meta, &AttentionConfig::new(1, 1, 4, false)).unwrap();
        assert_eq!(mask.kv_blocks[0].len, 3);
    }

    #[test]
    fn query_position_must_be_valid() {
        let view = BatchView::new(&[SeqId(0)], &[3]).unwrap();
        assert!(MaskMeta::new(view, vec![0], vec![3]).is_err());
    }

    #[test]
    fn block_diagonal_for_aligned_noncausal() {
        let meta = MaskMeta::prefill(BatchView::new(&[SeqId(0), SeqId(1)], &[8, 4]).unwrap());
        let mask = build_block_mask(&meta, &AttentionConfig::new(1, 1, 4, false)).unwrap();
        use BlockClass::*;
        assert_eq!(mask.query_blocks, 3);
        assert_eq!(mask.row(0), &[Full, Full, Empty]);
        assert_eq!(mask.row(1), &[Full, Full, Empty]);
        assert_eq!(mask.row(2), &[Empty, Empty, Full]);
        assert_eq!(mask.counts().1, 0);
    }

    #[test]
    fn lower_triangular_for_causal() {
        let meta = MaskMeta::prefill(BatchView::new(&[SeqId(0)], &[12]).unwrap());
        let mask = build_block_mask(&meta, &AttentionConfig::new(1, 1, 4, true)).unwrap();
        use BlockClass::*;
        assert_eq!(mask.row(0), &[Partial, Empty, Empty]);
        assert_eq!(mask.row(1), &[Full, Partial, Empty]);
        assert_eq!(mask.row(2), &[Full, Full, Partial]);
    }

    fn one_seq_cache(rows_k: &[f32], rows_v: &[f32], width: usize) -> (KvCache, Vec<BlockTable>) {
        let n = rows_k.len() / width;
        let cache = KvCache::new(
            PoolConfig::new(4, 8),
            KvLayout::new(1, 1, width),
            Precision::F32,
        )
        .unwrap();
        cache.reserve(SeqId(0), n).unwrap();
        let pos: Vec<usize> = (0..n).collect();
        cache.assign(SeqId(0), 0, &pos, rows_k, rows_v).unwrap();
        let tables = vec![cache.pool().table(SeqId(0)).unwrap()];
        (cache, tables)
    }

    #[test]
    fn singleton_key_returns_its_value() {
        let (cache, tables) = one_seq_cache(&[0.3, -0.7], &[1.25, -4.5], 2);
        let meta = meta_for(&[1], &[(0, 0)]);
        let cfg = AttentionConfig::new(1, 2, 4, true);
        let out = paged_attention(&[2.0, 1.0], cache.store(), 0, &tables, &meta, &cfg).unwrap();
        assert_eq!(out, vec![1.25, -4.5]);
    }

    #[test]
    fn equal_scores_average_values() {
        // Zero query: every score is 0.
        let k = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let v = vec![1.0, 10.0, 2.0, 20.0, 6.0, 60.0];
        let (cache, tables) = one_seq_cache(&k, &v, 2);
        let meta = meta_for(&[3], &[(0, 2)]);
        let cfg = AttentionConfig::new(1, 2, 4, true);
        let out = paged_attention(&[0.0, 0.0], cache.store(), 0, &tables, &meta, &cfg).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-6);
        assert!((out[1] - 30.0).abs() < 1e-5);
    }

    #[test]
    fn reference_trivial_cases() {
        let cfg = AttentionConfig::new(1, 2, 4, false);
        let out = reference_attention(
            &[1.0, 1.0],
            &[0],
            &[0],
            &[1.0, 1.0],
            &[3.0, -1.0],
            &[1],
            &cfg,
        )
        .unwrap();
        assert_eq!(out, vec![3.0, -1.0]);
        let out = reference_attention(
            &[0.0, 0.0],
            &[0],
            &[1],
            &[5.0, 1.0, -2.0, 7.0],
            &[1.0, 2.0, 3.0, 4.0],
            &[2],
            &cfg,
        )
        .unwrap();
        assert_eq!(out, vec![2.0, 3.0]);
        assert!(matches!(
            reference_attention(&[0.0], &[0], &[0], &[0.0], &[0.0], &[1], &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rejects_mismatched_tables() {
        let (cache, mut tables) = one_seq_cache(&[1.0], &[1.0], 1);
        let meta = meta_for(&[1], &[(0, 0)]);
        let cfg = AttentionConfig::new(1, 1, 4, true);
        tables[0].seq = SeqId(5);
        assert_eq!(
            paged_attention(&[1.0], cache.store(), 0, &tables, &meta, &cfg),
            Err(Error::UnknownSequence(SeqId(0)))
        );
        assert!(matches!(
            paged_attention(&[1.0, 2.0], cache.store(), 0, &tables, &meta, &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_length_sequence_query_is_rejected() {
        let view = BatchView::new(&[SeqId(0)], &[0]).unwrap();
        assert!(MaskMeta::new(view, vec![0], vec![0]).is_err());
    }

    #[test]
    fn relative_error_is_row_scaled() {
        let err = max_row_relative_error(&[1.0, 0.0, 10.0, 0.5], &[1.0, 1e-9, 10.0, 0.0], 2);
        assert!((err - 0.05).abs() < 1e-12);
    }
}
