//! Treiber stack of reclaimed page ids.
//!
//! Links live in a side array indexed by page id, so pushing never
//! allocates. The head word packs a 32-bit ABA tag above the 32-bit top id.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

pub(crate) const NIL: u32 = u32::MAX;

#[inline]
fn pack(tag: u32, top: u32) -> u64 {
    (u64::from(tag) << 32) | u64::from(top)
}

#[inline]
fn unpack(word: u64) -> (u32, u32) {
    ((word >> 32) as u32, word as u32)
}

pub(crate) struct FreeStack {
    head: AtomicU64,
    next: Box<[AtomicU32]>,
}

impl FreeStack {
    pub(crate) fn new(capacity: usize) -> Self {
        Self {
            head: AtomicU64::new(pack(0, NIL)),
            next: (0..capacity).map(|_| AtomicU32::new(NIL)).collect(),
        }
    }

    pub(crate) fn push(&self, id: u32) {
        let mut current = self.head.load(Ordering::Acquire);
        loop {
            let (tag, top) = unpack(current);
            self.next[id as usize].store(top, Ordering::Relaxed);
            match self.head.compare_exchange_weak(
                current,
                pack(tag.wrapping_add(1), id),
                Ordering::Release,
                Ordering::Acquire,
            ) {
                Ok(_) => return,
                Err(actual) => current = actual,
            }
        }
    }

    pub(crate) fn pop(&self) -> Option<u32> {
        let mut current = self.head.load(Ordering::Acquire);
        loop {
            let (tag, top) = unpack(current);
            if top == NIL {
                return None;
            }
            // A stale read here is harmless: the tag makes the CAS fail if
            // `top` was popped and pushed back in between.
            let next = self.next[top as usize].load(Ordering::Relaxed);
            match self.head.compare_exchange_weak(
                current,
                pack(tag.wrapping_add(1), next),
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return Some(top),
                Err(actual) => current = actual,
            }
        }
    }

    /// Walks the stack from the top. Only meaningful while no thread is
    /// pushing or popping. Returns `None` if the links form a cycle.
    pub(crate) fn snapshot(&self) -> Option<Vec<u32>> {
        let mut out = Vec::new();
        let (_, mut top) = unpack(self.head.load(Ordering::Acquire));
        while top != NIL {
            if out.len() > self.next.len() {
                return None;
            }
            out.push(top);
            top = self.next[top as usize].load(Ordering::Relaxed);
        }
        Some(out)
    }
}
