//! Physical page allocation and per-sequence block tables.
//!
//! Pages are granted from a free stack of reclaimed ids first, then from a
//! bump cursor over never-used storage. Neither path takes a lock: the
//! cursor advances by CAS, the free stack is a tagged Treiber stack, and
//! every page carries an atomic share count. A separate `available` counter
//! is claimed up front so a multi-page request either gets all of its pages
//! or none of them.
//!
//! Block tables live in a sharded map keyed by [`SeqId`]. Each table is
//! expected to be driven by one worker at a time; the pool does not
//! serialize operations on the same sequence.

mod free_stack;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

use dashmap::mapref::entry::Entry;
use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use free_stack::{FreeStack, NIL};

/// Tokens per page when nothing else is configured.
pub const DEFAULT_PAGE_SIZE: usize = 64;

/// Opaque sequence identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeqId(pub u64);

impl fmt::Display for SeqId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seq#{}", self.0)
    }
}

/// Physical page index. Block table entries are 32-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PageId(pub u32);

impl PageId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Location of one token slot in the global K/V buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageAddress {
    pub page: PageId,
    pub offset: usize,
}

impl PageAddress {
    /// Row index into the flat K/V buffers: `page * page_size + offset`.
    #[inline]
    pub fn flat_index(self, page_size: usize) -> usize {
        self.page.index() * page_size + self.offset
    }
}

/// One page worth of data to duplicate before a table entry is redirected.
///
/// Only the first `slots` rows of `src` need copying.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageCopy {
    pub src: PageId,
    pub dst: PageId,
    pub slots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub page_size: usize,
    pub capacity_pages: usize,
}

impl PoolConfig {
    pub fn new(page_size: usize, capacity_pages: usize) -> Self {
        Self {
            page_size,
            capacity_pages,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.page_size == 0 || !self.page_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "page_size must be a power of two, got {}",
                self.page_size
            )));
        }
        if self.capacity_pages == 0 {
            return Err(Error::InvalidConfig(
                "capacity_pages must be positive".into(),
            ));
        }
        // u32::MAX is the free-stack sentinel.
        if self.capacity_pages > NIL as usize {
            return Err(Error::InvalidConfig(format!(
                "capacity_pages {} does not fit 32-bit page ids",
                self.capacity_pages
            )));
        }
        Ok(())
    }
}

/// Per-sequence map from logical block index to physical page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTable {
    pub seq: SeqId,
    pub entries: Vec<PageId>,
    pub logical_len: usize,
}

impl BlockTable {
    fn new(seq: SeqId, entries: Vec<PageId>) -> Self {
        Self {
            seq,
            entries,
            logical_len: 0,
        }
    }

    /// Token slots provisioned by this table.
    pub fn capacity(&self, page_size: usize) -> usize {
        self.entries.len() * page_size
    }

    /// Address arithmetic for logical position `t`.
    pub fn translate(&self, t: usize, page_size: usize) -> Result<PageAddress> {
        let shift = page_size.trailing_zeros();
        let block = t >> shift;
        match self.entries.get(block) {
            Some(&page) => Ok(PageAddress {
                page,
                offset: t & (page_size - 1),
            }),
            None => Err(Error::OutOfRange {
                position: t,
                limit: self.capacity(page_size),
            }),
        }
    }
}

/// Result of [`PagePool::fork`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForkOutcome {
    pub table: BlockTable,
    pub shared_pages: usize,
    pub copied_slots: usize,
}

/// Page-state totals. `live + free + never_allocated == capacity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub capacity_pages: usize,
    pub live_pages: usize,
    pub free_pages: usize,
    pub never_allocated: usize,
    pub sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolDump {
    pub page_size: usize,
    pub census: Census,
    pub free_stack: Vec<PageId>,
    pub tables: Vec<BlockTable>,
}

pub struct PagePool {
    page_size: usize,
    capacity: usize,
    bump: AtomicUsize,
    available: AtomicUsize,
    free: FreeStack,
    refcount: Box<[AtomicU32]>,
    tables: DashMap<SeqId, BlockTable>,
}

impl fmt::Debug for PagePool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PagePool")
            .field("page_size", &self.page_size)
            .field("capacity", &self.capacity)
            .field("bump", &self.bump.load(Ordering::Relaxed))
            .field("available", &self.available.load(Ordering::Relaxed))
            .field("sequences", &self.tables.len())
            .finish()
    }
}

impl PagePool {
    pub fn new(config: PoolConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            page_size: config.page_size,
            capacity: config.capacity_pages,
            bump: AtomicUsize::new(0),
            available: AtomicUsize::new(config.capacity_pages),
            free: FreeStack::new(config.capacity_pages),
            refcount: (0..config.capacity_pages)
                .map(|_| AtomicU32::new(0))
                .collect(),
            tables: DashMap::new(),
        })
    }

    pub fn config(&self) -> PoolConfig {
        PoolConfig::new(self.page_size, self.capacity)
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn capacity_pages(&self) -> usize {
        self.capacity
    }

    /// Pages that can still be granted (free stack plus never-used).
    pub fn available_pages(&self) -> usize {
        self.available.load(Ordering::Acquire)
    }

    pub fn pages_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.page_size)
    }

    pub fn refcount(&self, page: PageId) -> u32 {
        self.refcount[page.index()].load(Ordering::Acquire)
    }

    pub fn contains(&self, seq: SeqId) -> bool {
        self.tables.contains_key(&seq)
    }

    pub fn sequence_count(&self) -> usize {
        self.tables.len()
    }

    /// Sorted ids of every sequence holding a table.
    pub fn sequences(&self) -> Vec<SeqId> {
        let mut ids: Vec<SeqId> = self.tables.iter().map(|e| *e.key()).collect();
        ids.sort_unstable();
        ids
    }

    pub fn table(&self, seq: SeqId) -> Result<BlockTable> {
        self.tables
            .get(&seq)
            .map(|t| t.clone())
            .ok_or(Error::UnknownSequence(seq))
    }

    pub fn logical_len(&self, seq: SeqId) -> Result<usize> {
        self.tables
            .get(&seq)
            .map(|t| t.logical_len)
            .ok_or(Error::UnknownSequence(seq))
    }

    /// Creates the table for `seq` with `ceil(len / page_size)` fresh pages.
    /// The table starts with zero valid tokens.
    pub fn reserve(&self, seq: SeqId, len: usize) -> Result<Vec<PageId>> {
        match self.tables.entry(seq) {
            Entry::Occupied(_) => Err(Error::DuplicateSequence(seq)),
            Entry::Vacant(slot) => {
                let pages = self.acquire(self.pages_for(len))?;
                slot.insert(BlockTable::new(seq, pages.clone()));
                Ok(pages)
            }
        }
    }

    /// Extends the table so it can hold `new_len` tokens. Returns only the
    /// newly granted pages; a length within current capacity is a no-op.
    pub fn grow(&self, seq: SeqId, new_len: usize) -> Result<Vec<PageId>> {
        let mut table = self
            .tables
            .get_mut(&seq)
            .ok_or(Error::UnknownSequence(seq))?;
        let needed = self.pages_for(new_len);
        if needed <= table.entries.len() {
            return Ok(Vec::new());
        }
        let fresh = self.acquire(needed - table.entries.len())?;
        table.entries.extend_from_slice(&fresh);
        Ok(fresh)
    }

    /// Drops the table and returns the number of pages whose last reference
    /// it held.
    pub fn free(&self, seq: SeqId) -> Result<usize> {
        let (_, table) = self
            .tables
            .remove(&seq)
            .ok_or(Error::UnknownSequence(seq))?;
        let mut reclaimed = 0;
        for page in table.entries {
            if self.release(page)? {
                reclaimed += 1;
            }
        }
        Ok(reclaimed)
    }

    /// Allocation-only fork; see [`PagePool::fork_with`].
    pub fn fork(&self, parent: SeqId, child: SeqId, prefix_len: usize) -> Result<ForkOutcome> {
        self.fork_with(parent, child, prefix_len, |_| {})
    }

    /// Gives `child` the first `prefix_len` tokens of `parent`.
    ///
    /// Full pages of the prefix are shared by reference. A trailing partial
    /// page is granted fresh and handed to `copy` so the caller can move the
    /// valid rows; the child never shares a page it may append into.
    pub fn fork_with(
        &self,
        parent: SeqId,
        child: SeqId,
        prefix_len: usize,
        copy: impl FnOnce(PageCopy),
    ) -> Result<ForkOutcome> {
        if parent == child || self.tables.contains_key(&child) {
            return Err(Error::DuplicateSequence(child));
        }
        let (shared, partial_src) = {
            let table = self
                .tables
                .get(&parent)
                .ok_or(Error::UnknownSequence(parent))?;
            if prefix_len > table.logical_len {
                return Err(Error::InvalidPrefix {
                    prefix_len,
                    parent_len: table.logical_len,
                });
            }
            let full = prefix_len / self.page_size;
            let partial = (prefix_len % self.page_size != 0).then(|| table.entries[full]);
            (table.entries[..full].to_vec(), partial)
        };

        for page in &shared {
            self.refcount[page.index()].fetch_add(1, Ordering::AcqRel);
        }
        let rollback = |pages: &[PageId]| {
            for &page in pages {
                // Parent still holds these, so none can reach zero here.
                let _ = self.release(page);
            }
        };

        let mut entries = shared.clone();
        let mut copied_slots = 0;
        if let Some(src) = partial_src {
            let dst = match self.acquire(1) {
                Ok(pages) => pages[0],
                Err(e) => {
                    rollback(&shared);
                    return Err(e);
                }
            };
            copied_slots = prefix_len % self.page_size;
            copy(PageCopy {
                src,
                dst,
                slots: copied_slots,
            });
            entries.push(dst);
        }

        let mut table = BlockTable::new(child, entries);
        table.logical_len = prefix_len;
        match self.tables.entry(child) {
            Entry::Occupied(_) => {
                rollback(&table.entries);
                Err(Error::DuplicateSequence(child))
            }
            Entry::Vacant(slot) => {
                slot.insert(table.clone());
                Ok(ForkOutcome {
                    table,
                    shared_pages: shared.len(),
                    copied_slots,
                })
            }
        }
    }

    pub fn translate(&self, seq: SeqId, t: usize) -> Result<PageAddress> {
        self.tables
            .get(&seq)
            .ok_or(Error::UnknownSequence(seq))?
            .translate(t, self.page_size)
    }

    /// Raises the valid length of `seq` to at least `end`.
    pub fn mark_written(&self, seq: SeqId, end: usize) -> Result<()> {
        let mut table = self
            .tables
            .get_mut(&seq)
            .ok_or(Error::UnknownSequence(seq))?;
        let cap = table.capacity(self.page_size);
        if end > cap {
            return Err(Error::OutOfRange {
                position: end - 1,
                limit: cap,
            });
        }
        table.logical_len = table.logical_len.max(end);
        Ok(())
    }

    /// Returns a page of `seq` at logical block `block` that only `seq`
    /// references. If the current page is shared, a fresh page is granted,
    /// `copy` moves the data, and the entry is redirected before the old
    /// reference is dropped.
    pub fn privatize(
        &self,
        seq: SeqId,
        block: usize,
        copy: impl FnOnce(PageCopy),
    ) -> Result<PageId> {
        let mut table = self
            .tables
            .get_mut(&seq)
            .ok_or(Error::UnknownSequence(seq))?;
        let limit = table.capacity(self.page_size);
        let src = *table.entries.get(block).ok_or(Error::OutOfRange {
            position: block * self.page_size,
            limit,
        })?;
        if self.refcount(src) <= 1 {
            return Ok(src);
        }
        let dst = self.acquire(1)?[0];
        copy(PageCopy {
            src,
            dst,
            slots: self.page_size,
        });
        table.entries[block] = dst;
        drop(table);
        self.release(src)?;
        Ok(dst)
    }

    /// Fault-injection hook for verification tooling: swaps the first two
    /// entries of a table so reads come back in the wrong order. Census
    /// invariants still hold afterwards.
    pub fn inject_table_fault(&self, seq: SeqId) -> Result<()> {
        let mut table = self
            .tables
            .get_mut(&seq)
            .ok_or(Error::UnknownSequence(seq))?;
        if table.entries.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "{seq} needs at least two pages for fault injection"
            )));
        }
        table.entries.swap(0, 1);
        Ok(())
    }

    /// Cheap page totals from the counters alone.
    pub fn usage(&self) -> Census {
        let bump = self.bump.load(Ordering::Acquire);
        let never = self.capacity - bump;
        let free = self.available.load(Ordering::Acquire).saturating_sub(never);
        Census {
            capacity_pages: self.capacity,
            live_pages: bump.saturating_sub(free),
            free_pages: free,
            never_allocated: never,
            sequences: self.tables.len(),
        }
    }

    /// Full census walk. Checks that every page is in exactly one state,
    /// that share counts equal the number of table references, and that
    /// every table respects its length bounds. Call only while quiescent.
    pub fn census(&self) -> Result<Census> {
        let bump = self.bump.load(Ordering::Acquire);
        let stack = self
            .free
            .snapshot()
            .ok_or_else(|| Error::CensusViolation("free stack has a cycle".into()))?;

        let mut on_stack = vec![false; self.capacity];
        for &id in &stack {
            let id = id as usize;
            if id >= bump {
                return Err(Error::CensusViolation(format!(
                    "page {id} on free stack but never allocated"
                )));
            }
            if on_stack[id] {
                return Err(Error::CensusViolation(format!(
                    "page {id} appears twice on free stack"
                )));
            }
            on_stack[id] = true;
        }

        let mut references = vec![0u32; self.capacity];
        for table in self.tables.iter() {
            let cap = table.capacity(self.page_size);
            if table.logical_len > cap {
                return Err(Error::CensusViolation(format!(
                    "{} holds {} tokens in {} slots",
                    table.seq, table.logical_len, cap
                )));
            }
            let mut seen = HashSet::with_capacity(table.entries.len());
            for page in &table.entries {
                if page.index() >= bump {
                    return Err(Error::CensusViolation(format!(
                        "{} references unallocated page {}",
                        table.seq, page.0
                    )));
                }
                if !seen.insert(*page) {
                    return Err(Error::CensusViolation(format!(
                        "{} references page {} twice",
                        table.seq, page.0
                    )));
                }
                references[page.index()] += 1;
            }
        }

        let mut live = 0;
        for (id, &refs) in references.iter().enumerate() {
            let count = self.refcount[id].load(Ordering::Acquire);
            if count != refs {
                return Err(Error::CensusViolation(format!(
                    "page {id} has share count {count} but {refs} table references"
                )));
            }
            match (id < bump, count > 0, on_stack[id]) {
                (true, true, false) => live += 1,
                (true, false, true) | (false, false, false) => {}
                (true, false, false) => {
                    return Err(Error::CensusViolation(format!(
                        "page {id} leaked: unreferenced and not on free stack"
                    )))
                }
                _ => {
                    return Err(Error::CensusViolation(format!(
                        "page {id} is in more than one state"
                    )))
                }
            }
        }

        let census = Census {
            capacity_pages: self.capacity,
            live_pages: live,
            free_pages: stack.len(),
            never_allocated: self.capacity - bump,
            sequences: self.tables.len(),
        };
        if census.live_pages + census.free_pages + census.never_allocated != self.capacity {
            return Err(Error::CensusViolation(format!(
                "{census:?} does not add up"
            )));
        }
        if self.available.load(Ordering::Acquire) != census.free_pages + census.never_allocated {
            return Err(Error::CensusViolation(
                "available counter disagrees with free + never-allocated".into(),
            ));
        }
        Ok(census)
    }

    /// Deterministic snapshot of the census and every table, sorted by id.
    pub fn dump(&self) -> Result<PoolDump> {
        let census = self.census()?;
        let tables: BTreeMap<SeqId, BlockTable> = self
            .tables
            .iter()
            .map(|e| (*e.key(), e.value().clone()))
            .collect();
        Ok(PoolDump {
            page_size: self.page_size,
            census,
            free_stack: self
                .free
                .snapshot()
                .unwrap_or_default()
                .into_iter()
                .map(PageId)
                .collect(),
            tables: tables.into_values().collect(),
        })
    }

    pub fn dump_json(&self) -> Result<String> {
        let dump = self.dump()?;
        Ok(serde_json::to_string_pretty(&dump).expect("dump is always serializable"))
    }

    /// Grants `n` pages or none. The quota claim on `available` is what
    /// guarantees the pop/bump loop below terminates.
    fn acquire(&self, n: usize) -> Result<Vec<PageId>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        self.available
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |avail| {
                avail.checked_sub(n)
            })
            .map_err(|avail| Error::CapacityExhausted {
                requested: n,
                available: avail,
            })?;

        let mut pages = Vec::with_capacity(n);
        while pages.len() < n {
            let id = match self.free.pop() {
                Some(id) => id as usize,
                None => match self.bump_one() {
                    Some(id) => id,
                    None => {
                        // Another thread is between pushing and publishing.
                        std::hint::spin_loop();
                        continue;
                    }
                },
            };
            self.refcount[id].store(1, Ordering::Release);
            pages.push(PageId(id as u32));
        }
        Ok(pages)
    }

    fn bump_one(&self) -> Option<usize> {
        self.bump
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |cur| {
                (cur < self.capacity).then_some(cur + 1)
            })
            .ok()
    }

    /// Drops one reference. Returns true if the page went back to the free
    /// stack.
    fn release(&self, page: PageId) -> Result<bool> {
        let prev = self.refcount[page.index()]
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| c.checked_sub(1))
            .map_err(|_| {
                Error::CensusViolation(format!("page {} released with no references", page.0))
            })?;
        if prev == 1 {
            self.free.push(page.0);
            self.available.fetch_add(1, Ordering::AcqRel);
            Ok(true)
        } else {
            Ok(false)
        }
    }
}
