//! Global K/V buffers addressed by physical page, plus Assign/Gather and
//! the flattened jagged-batch view consumed by the attention kernel.
//!
//! One row per token slot holds every head packed head-major
//! (`head_count * head_dim` scalars). Layers are stacked: row
//! `layer * capacity_slots + page * page_size + offset`.
//!
//! Lanes are stored as atomics with relaxed ordering so that workers
//! writing different sequences can share one store without locks.

use std::sync::atomic::{AtomicU16, AtomicU32, Ordering};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::page_manager::{BlockTable, ForkOutcome, PageCopy, PageId, PagePool, PoolConfig, SeqId};

/// Storage precision of the K/V lanes. Compute is always fp32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F16,
}

impl Precision {
    pub fn bytes_per_scalar(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }
}

/// Shape of one token's K (or V) row across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvLayout {
    pub layers: usize,
    pub head_count: usize,
    pub head_dim: usize,
}

impl KvLayout {
    pub fn new(layers: usize, head_count: usize, head_dim: usize) -> Self {
        Self {
            layers,
            head_count,
            head_dim,
        }
    }

    /// Scalars per row: all heads of one token in one layer.
    pub fn row_width(&self) -> usize {
        self.head_count * self.head_dim
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.head_count == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "kv layout dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

enum Lanes {
    F32(Box<[AtomicU32]>),
    F16(Box<[AtomicU16]>),
}

impl Lanes {
    fn new(precision: Precision, len: usize) -> Self {
        match precision {
            Precision::F32 => Lanes::F32((0..len).map(|_| AtomicU32::new(0)).collect()),
            Precision::F16 => Lanes::F16((0..len).map(|_| AtomicU16::new(0)).collect()),
        }
    }

    fn write(&self, start: usize, src: &[f32]) {
        match self {
            Lanes::F32(lanes) => {
                for (lane, &x) in lanes[start..start + src.len()].iter().zip(src) {
                    lane.store(x.to_bits(), Ordering::Relaxed);
                }
            }
            Lanes::F16(lanes) => {
                for (lane, &x) in lanes[start..start + src.len()].iter().zip(src) {
                    lane.store(f16::from_f32(x).to_bits(), Ordering::Relaxed);
                }
            }
        }
    }

    fn read(&self, start: usize, out: &mut [f32]) {
        let end = start + out.len();
        match self {
            Lanes::F32(lanes) => {
                for (dst, lane) in out.iter_mut().zip(&lanes[start..end]) {
                    *dst = f32::from_bits(lane.load(Ordering::Relaxed));
                }
            }
            Lanes::F16(lanes) => {
                for (dst, lane) in out.iter_mut().zip(&lanes[start..end]) {
                    *dst = f16::from_bits(lane.load(Ordering::Relaxed)).to_f32();
                }
            }
        }
    }

    fn copy_within(&self, src: usize, dst: usize, len: usize) {
        match self {
            Lanes::F32(lanes) => {
                for i in 0..len {
                    let bits = lanes[src + i].load(Ordering::Relaxed);
                    lanes[dst + i].store(bits, Ordering::Relaxed);
                }
            }
            Lanes::F16(lanes) => {
                for i in 0..len {
                    let bits = lanes[src + i].load(Ordering::Relaxed);
                    lanes[dst + i].store(bits, Ordering::Relaxed);
                }
            }
        }
    }
}

/// Dense K and V buffers with one row per `(layer, page, offset)` slot.
pub struct KvStore {
    layout: KvLayout,
    page_size: usize,
    capacity_pages: usize,
    precision: Precision,
    keys: Lanes,
    values: Lanes,
}

impl std::fmt::Debug for KvStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KvStore")
            .field("layout", &self.layout)
            .field("page_size", &self.page_size)
            .field("capacity_pages", &self.capacity_pages)
            .field("precision", &self.precision)
            .finish_non_exhaustive()
    }
}

impl KvStore {
    pub fn new(layout: KvLayout, pool: PoolConfig, precision: Precision) -> Result<Self> {
        layout.validate()?;
        pool.validate()?;
        let lanes = layout.layers * pool.capacity_pages * pool.page_size * layout.row_width();
        Ok(Self {
            layout,
            page_size: pool.page_size,
            capacity_pages: pool.capacity_pages,
            precision,
            keys: Lanes::new(precision, lanes),
            values: Lanes::new(precision, lanes),
        })
    }

    pub fn layout(&self) -> KvLayout {
        self.layout
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Rows per layer.
    pub fn rows(&self) -> usize {
        self.capacity_pages * self.page_size
    }

    #[inline]
    fn lane(&self, layer: usize, slot: usize) -> usize {
        (layer * self.rows() + slot) * self.layout.row_width()
    }

    pub fn write_row(&self, layer: usize, slot: usize, key: &[f32], value: &[f32]) {
        let at = self.lane(layer, slot);
        self.keys.write(at, key);
        self.values.write(at, value);
    }

    pub fn read_key(&self, layer: usize, slot: usize, out: &mut [f32]) {
        self.keys.read(self.lane(layer, slot), out);
    }

    pub fn read_value(&self, layer: usize, slot: usize, out: &mut [f32]) {
        self.values.read(self.lane(layer, slot), out);
    }

    /// Reads the first `count` rows of a page for one layer into
    /// `keys`/`values`, which must hold `count * row_width` scalars.
    pub fn read_page(
        &self,
        layer: usize,
        page: PageId,
        count: usize,
        keys: &mut [f32],
        values: &mut [f32],
    ) {
        let at = self.lane(layer, page.index() * self.page_size);
        let n = count * self.layout.row_width();
        self.keys.read(at, &mut keys[..n]);
        self.values.read(at, &mut values[..n]);
    }

    /// Duplicates the first `copy.slots` rows of `copy.src` into `copy.dst`
    /// for every layer.
    pub fn copy_page(&self, copy: PageCopy) {
        let n = copy.slots * self.layout.row_width();
        for layer in 0..self.layout.layers {
            let src = self.lane(layer, copy.src.index() * self.page_size);
            let dst = self.lane(layer, copy.dst.index() * self.page_size);
            self.keys.copy_within(src, dst, n);
            self.values.copy_within(src, dst, n);
        }
    }
}

/// Flattened jagged-batch metadata: sequences laid end to end in the given
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchView {
    pub sequences: Vec<SeqId>,
    pub lengths: Vec<usize>,
    /// Exclusive prefix sum of `lengths`: first flat slot of each sequence.
    pub prefix_sums: Vec<usize>,
    /// Owning sequence of every flat slot.
    pub seq_ids: Vec<SeqId>,
}

impl BatchView {
    /// Builds the view without consulting any pool.
    pub fn new(sequences: &[SeqId], lengths: &[usize]) -> Result<Self> {
        if sequences.len() != lengths.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} sequences but {} lengths",
                sequences.len(),
                lengths.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &seq in sequences {
            if !seen.insert(seq) {
                return Err(Error::DuplicateSequence(seq));
            }
        }
        let mut prefix_sums = Vec::with_capacity(lengths.len());
        let mut seq_ids = Vec::with_capacity(lengths.iter().sum());
        for (&seq, &len) in sequences.iter().zip(lengths) {
            prefix_sums.push(seq_ids.len());
            seq_ids.extend(std::iter::repeat_n(seq, len));
        }
        Ok(Self {
            sequences: sequences.to_vec(),
            lengths: lengths.to_vec(),
            prefix_sums,
            seq_ids,
        })
    }

    pub fn total_slots(&self) -> usize {
        self.seq_ids.len()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Maps a flat slot to `(sequence index, local position)`.
    pub fn locate(&self, flat: usize) -> Option<(usize, usize)> {
        if flat >= self.total_slots() {
            return None;
        }
        let idx = self.prefix_sums.partition_point(|&start| start <= flat) - 1;
        Some((idx, flat - self.prefix_sums[idx]))
    }

    pub fn index_of(&self, seq: SeqId) -> Option<usize> {
        self.sequences.iter().position(|&s| s == seq)
    }
}

/// Builds a [`BatchView`] after checking every sequence exists and holds
/// at least the requested number of valid tokens.
pub fn build_batch_view(
    pool: &PagePool,
    sequences: &[SeqId],
    lengths: &[usize],
) -> Result<BatchView> {
    if sequences.len() != lengths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sequences but {} lengths",
            sequences.len(),
            lengths.len()
        )));
    }
    for (&seq, &len) in sequences.iter().zip(lengths) {
        let valid = pool.logical_len(seq)?;
        if len > valid {
            return Err(Error::OutOfRange {
                position: len,
                limit: valid,
            });
        }
    }
    BatchView::new(sequences, lengths)
}

/// JSON-friendly gathered rows of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDump {
    pub seq: SeqId,
    pub layer: usize,
    pub len: usize,
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

/// Page pool plus the K/V buffers it addresses.
#[derive(Debug)]
pub struct KvCache {
    pool: PagePool,
    store: KvStore,
}

impl KvCache {
    pub fn new(pool: PoolConfig, layout: KvLayout, precision: Precision) -> Result<Self> {
        Ok(Self {
            store: KvStore::new(layout, pool, precision)?,
            pool: PagePool::new(pool)?,
        })
    }

    pub fn pool(&self) -> &PagePool {
        &self.pool
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn layout(&self) -> KvLayout {
        self.store.layout
    }

    pub fn page_size(&self) -> usize {
        self.pool.page_size()
    }

    pub fn reserve(&self, seq: SeqId, len: usize) -> Result<Vec<PageId>> {
        self.pool.reserve(seq, len)
    }

    pub fn grow(&self, seq: SeqId, new_len: usize) -> Result<Vec<PageId>> {
        self.pool.grow(seq, new_len)
    }

    pub fn free(&self, seq: SeqId) -> Result<usize> {
        self.pool.free(seq)
    }

    /// Fork with the trailing partial page's valid rows copied.
    pub fn fork(&self, parent: SeqId, child: SeqId, prefix_len: usize) -> Result<ForkOutcome> {
        self.pool
            .fork_with(parent, child, prefix_len, |copy| self.store.copy_page(copy))
    }

    /// Writes one K and V row per position for `layer`.
    ///
    /// All positions are bounds-checked before anything is written. A
    /// position that lands on a shared page privatizes that page first.
    pub fn assign(
        &self,
        seq: SeqId,
        layer: usize,
        positions: &[usize],
        keys: &[f32],
        values: &[f32],
    ) -> Result<()> {
        let layout = self.store.layout;
        let width = layout.row_width();
        if layer >= layout.layers {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer} outside {} layers",
                layout.layers
            )));
        }
        if keys.len() != positions.len() * width || values.len() != positions.len() * width {
            return Err(Error::ShapeMismatch(format!(
                "{} positions need {} scalars per K/V buffer, got {} and {}",
                positions.len(),
                positions.len() * width,
                keys.len(),
                values.len()
            )));
        }
        let table = self.pool.table(seq)?;
        let page_size = self.pool.page_size();
        let cap = table.capacity(page_size);
        let Some(&max_pos) = positions.iter().max() else {
            return Ok(());
        };
        if max_pos >= cap {
            return Err(Error::OutOfRange {
                position: max_pos,
                limit: cap,
            });
        }

        // Privatize every touched block before writing anything. A copy
        // leaves contents unchanged, so a failure here is not observable
        // through gather.
        let shift = page_size.trailing_zeros();
        let mut blocks: Vec<usize> = positions.iter().map(|&t| t >> shift).collect();
        blocks.sort_unstable();
        blocks.dedup();
        let mut private = std::collections::HashMap::with_capacity(blocks.len());
        for b in blocks {
            let page = self
                .pool
                .privatize(seq, b, |copy| self.store.copy_page(copy))?;
            private.insert(b, page);
        }
        for (i, &t) in positions.iter().enumerate() {
            let page = private[&(t >> shift)];
            let slot = page.index() * page_size + (t & (page_size - 1));
            let row = i * width..(i + 1) * width;
            self.store
                .write_row(layer, slot, &keys[row.clone()], &values[row]);
        }
        self.pool.mark_written(seq, max_pos + 1)
    }

    /// Copies the first `len` rows of `seq` out in logical order.
    pub fn gather(&self, seq: SeqId, layer: usize, len: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let table = self.pool.table(seq)?;
        if len > table.logical_len {
            return Err(Error::OutOfRange {
                position: len,
                limit: table.logical_len,
            });
        }
        if layer >= self.store.layout.layers {
            return Err(Error::ShapeMismatch(format!("layer {layer} out of range")));
        }
        let width = self.store.layout.row_width();
        let page_size = self.pool.page_size();
        let mut keys = vec![0.0; len * width];
        let mut values = vec![0.0; len * width];
        for t in 0..len {
            let slot = table.translate(t, page_size)?.flat_index(page_size);
            let row = t * width..(t + 1) * width;
            self.store.read_key(layer, slot, &mut keys[row.clone()]);
            self.store.read_value(layer, slot, &mut values[row]);
        }
        Ok((keys, values))
    }

    pub fn build_batch_view(&self, sequences: &[SeqId], lengths: &[usize]) -> Result<BatchView> {
        build_batch_view(&self.pool, sequences, lengths)
    }

    /// Snapshots the block tables of every sequence in `view`, in view order.
    pub fn tables_for(&self, view: &BatchView) -> Result<Vec<BlockTable>> {
        view.sequences.iter().map(|&s| self.pool.table(s)).collect()
    }

    pub fn dump_sequence(&self, seq: SeqId, layer: usize) -> Result<SequenceDump> {
        let len = self.pool.logical_len(seq)?;
        let (k, v) = self.gather(seq, layer, len)?;
        let width = self.store.layout.row_width().max(1);
        Ok(SequenceDump {
            seq,
            layer,
            len,
            keys: k.chunks(width).map(<[f32]>::to_vec).collect(),
            values: v.chunks(width).map(<[f32]>::to_vec).collect(),
        })
    }

    pub fn dump_sequence_json(&self, seq: SeqId, layer: usize) -> Result<String> {
        let dump = self.dump_sequence(seq, layer)?;
        Ok(serde_json::to_string(&dump).expect("rows serialize"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache(page_size: usize, pages: usize, heads: usize, dim: usize) -> KvCache {
        KvCache::new(
            PoolConfig::new(page_size, pages),
            KvLayout::new(1, heads, dim),
            Precision::F32,
        )
        .unwrap()
    }

    fn rows(ts: &[usize], width: usize, scale: f32) -> Vec<f32> {
        ts.iter()
            .flat_map(|&t| std::iter::repeat_n(t as f32 * scale, width))
            .collect()
    }

    #[test]
    fn assign_lands_at_translated_slot() {
        let c = cache(4, 10, 1, 2);
        // Pages come off the bump cursor as 0..10; releasing 9, 2, 7 leaves
        // 7 on top of the free stack.
        for i in 0..10 {
            c.reserve(SeqId(100 + i), 4).unwrap();
        }
        for page in [9u64, 2, 7] {
            c.free(SeqId(100 + page)).unwrap();
        }
        c.reserve(SeqId(1), 12).unwrap();
        let table = c.pool().table(SeqId(1)).unwrap();
        assert_eq!(table.entries, vec![PageId(7), PageId(2), PageId(9)]);

        c.assign(SeqId(1), 0, &[5], &[1.5, 2.5], &[3.5, 4.5])
            .unwrap();
        let mut out = [0.0; 2];
        c.store().read_key(0, 9, &mut out);
        assert_eq!(out, [1.5, 2.5]);
        c.store().read_value(0, 9, &mut out);
        assert_eq!(out, [3.5, 4.5]);
        assert_eq!(c.pool().logical_len(SeqId(1)).unwrap(), 6);
    }

    #[test]
    fn assign_then_gather_roundtrip() {
        let c = cache(4, 8, 2, 3);
        c.reserve(SeqId(1), 10).unwrap();
        let ts: Vec<usize> = (0..10).collect();
        let k = rows(&ts, 6, 1.0);
        let v = rows(&ts, 6, -2.0);
        c.assign(SeqId(1), 0, &ts, &k, &v).unwrap();
        let (gk, gv) = c.gather(SeqId(1), 0, 10).unwrap();
        assert_eq!(gk, k);
        assert_eq!(gv, v);
        let (ek, ev) = c.gather(SeqId(1), 0, 0).unwrap();
        assert!(ek.is_empty() && ev.is_empty());
    }

    #[test]
    fn assign_and_gather_errors() {
        let c = cache(4, 8, 1, 1);
        c.reserve(SeqId(1), 8).unwrap();
        assert_eq!(
            c.assign(SeqId(1), 0, &[8], &[0.0], &[0.0]),
            Err(Error::OutOfRange {
                position: 8,
                limit: 8
            })
        );
        assert!(matches!(
            c.assign(SeqId(1), 0, &[0, 1], &[0.0], &[0.0]),
            Err(Error::ShapeMismatch(_))
        ));
        assert_eq!(
            c.assign(SeqId(2), 0, &[0], &[0.0], &[0.0]),
            Err(Error::UnknownSequence(SeqId(2)))
        );
        c.assign(SeqId(1), 0, &[2], &[1.0], &[1.0]).unwrap();
        assert_eq!(
            c.gather(SeqId(1), 0, 4).unwrap_err(),
            Error::OutOfRange {
                position: 4,
                limit: 3
            }
        );
        // Nothing was written by the rejected call.
        assert_eq!(c.pool().logical_len(SeqId(1)).unwrap(), 3);
    }

    #[test]
    fn overwrite_last_write_wins() {
        let c = cache(4, 4, 1, 1);
        c.reserve(SeqId(1), 4).unwrap();
        c.assign(SeqId(1), 0, &[1, 1], &[1.0, 2.0], &[3.0, 4.0])
            .unwrap();
        let (k, v) = c.gather(SeqId(1), 0, 2).unwrap();
        assert_eq!(k[1], 2.0);
        assert_eq!(v[1], 4.0);
    }

    #[test]
    fn fork_then_writes_are_isolated() {
        let c = cache(4, 16, 1, 1);
        c.reserve(SeqId(1), 12).unwrap();
        let ts: Vec<usize> = (0..10).collect();
        let k = rows(&ts, 1, 1.0);
        c.assign(SeqId(1), 0, &ts, &k, &k).unwrap();
        let out = c.fork(SeqId(1), SeqId(2), 6).unwrap();
        assert_eq!(out.shared_pages, 1);
        assert_eq!(out.copied_slots, 2);
        assert_eq!(c.gather(SeqId(2), 0, 6).unwrap().0, k[..6]);

        // Parent overwrites inside the shared page: child must not see it.
        c.assign(SeqId(1), 0, &[1], &[-1.0], &[-1.0]).unwrap();
        assert_eq!(c.gather(SeqId(2), 0, 6).unwrap().0, k[..6]);
        assert_eq!(c.gather(SeqId(1), 0, 2).unwrap().0, vec![0.0, -1.0]);

        // Child appends into its copied tail page: parent unchanged.
        c.assign(SeqId(2), 0, &[5], &[42.0], &[42.0]).unwrap();
        assert_eq!(c.gather(SeqId(1), 0, 10).unwrap().0[5], 5.0);
        c.pool().census().unwrap();
    }

    #[test]
    fn half_precision_rounds_through_f16() {
        let c = KvCache::new(
            PoolConfig::new(4, 2),
            KvLayout::new(1, 1, 2),
            Precision::F16,
        )
        .unwrap();
        c.reserve(SeqId(1), 1).unwrap();
        c.assign(SeqId(1), 0, &[0], &[0.1, 1.0], &[65504.0, -2.0])
            .unwrap();
        let (k, v) = c.gather(SeqId(1), 0, 1).unwrap();
        assert_eq!(k, vec![f16::from_f32(0.1).to_f32(), 1.0]);
        assert_eq!(v, vec![65504.0, -2.0]);
    }

    #[test]
    fn batch_view_layout() {
        let v = BatchView::new(&[SeqId(10), SeqId(20)], &[3, 2]).unwrap();
        assert_eq!(v.prefix_sums, vec![0, 3]);
        assert_eq!(
            v.seq_ids,
            vec![SeqId(10), SeqId(10), SeqId(10), SeqId(20), SeqId(20)]
        );
        assert_eq!(v.locate(3), Some((1, 0)));
        assert_eq!(v.locate(5), None);

        let single = BatchView::new(&[SeqId(1)], &[7]).unwrap();
        assert_eq!(single.prefix_sums, vec![0]);
        assert!(single.seq_ids.iter().all(|&s| s == SeqId(1)));

        let with_empty = BatchView::new(&[SeqId(1), SeqId(2), SeqId(3)], &[2, 0, 1]).unwrap();
        assert_eq!(with_empty.locate(2), Some((2, 0)));
        assert!(BatchView::new(&[SeqId(1), SeqId(1)], &[1, 1]).is_err());
    }

    #[test]
    fn batch_view_ladder_totals() {
        let seqs: Vec<SeqId> = (0..16).map(SeqId).collect();
        let lens: Vec<usize> = (1..=16).map(|i| 500 * i).collect();
        let v = BatchView::new(&seqs, &lens).unwrap();
        assert_eq!(v.total_slots(), 68_000);
        assert!(v.prefix_sums.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(v.prefix_sums[15] + v.lengths[15], 68_000);
    }

    #[test]
    fn build_batch_view_checks_pool() {
        let c = cache(4, 8, 1, 1);
        c.reserve(SeqId(1), 8).unwrap();
        c.assign(SeqId(1), 0, &[0, 1, 2], &[0.0; 3], &[0.0; 3])
            .unwrap();
        assert!(c.build_batch_view(&[SeqId(1)], &[3]).is_ok());
        assert_eq!(
            c.build_batch_view(&[SeqId(1)], &[4]).unwrap_err(),
            Error::OutOfRange {
                position: 4,
                limit: 3
            }
        );
        assert_eq!(
            c.build_batch_view(&[SeqId(2)], &[0]).unwrap_err(),
            Error::UnknownSequence(SeqId(2))
        );
    }

    #[test]
    fn dump_sequence_rows() {
        let c = cache(4, 4, 1, 2);
        c.reserve(SeqId(3), 2).unwrap();
        c.assign(
            SeqId(3),
            0,
            &[0, 1],
            &[1.0, 2.0, 3.0, 4.0],
            &[5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        let json = c.dump_sequence_json(SeqId(3), 0).unwrap();
        assert_eq!(
            json,
            r#"{"seq":3,"layer":0,"len":2,"keys":[[1.0,2.0],[3.0,4.0]],"values":[[5.0,6.0],[7.0,8.0]]}"#
        );
    }
}
