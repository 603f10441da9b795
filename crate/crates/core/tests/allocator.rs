use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::thread;

use pagekv::{Error, KvCache, KvLayout, PagePool, PoolConfig, Precision, SeqId};
use proptest::prelude::*;

const PAGE: usize = 4;
const PAGES: usize = 24;
const WIDTH: usize = 2;

#[derive(Debug, Clone)]
enum Op {
    Reserve(u64, usize),
    Grow(u64, usize),
    Free(u64),
    Fork(u64, u64, usize),
    Assign(u64, usize, f32),
}

fn op() -> impl Strategy<Value = Op> {
    let seq = 0u64..6;
    prop_oneof![
        (seq.clone(), 0usize..20).prop_map(|(s, l)| Op::Reserve(s, l)),
        (seq.clone(), 0usize..30).prop_map(|(s, l)| Op::Grow(s, l)),
        seq.clone().prop_map(Op::Free),
        (seq.clone(), seq.clone(), 0usize..20).prop_map(|(p, c, l)| Op::Fork(p, c, l)),
        (seq, 0usize..30, -8.0f32..8.0).prop_map(|(s, t, v)| Op::Assign(s, t, v)),
    ]
}

/// Plain model: per sequence, capacity in tokens and written rows.
#[derive(Default)]
struct Mirror {
    seqs: HashMap<u64, (usize, Vec<Option<f32>>)>,
}

impl Mirror {
    fn cap(len: usize) -> usize {
        len.div_ceil(PAGE) * PAGE
    }
}

fn check(cache: &KvCache, mirror: &Mirror) {
    let census = cache.pool().census().expect("census holds");
    assert_eq!(census.sequences, mirror.seqs.len());
    for (&s, (cap, rows)) in &mirror.seqs {
        let table = cache.pool().table(SeqId(s)).unwrap();
        assert_eq!(table.capacity(PAGE), *cap);
        assert_eq!(table.logical_len, rows.len());
        let (k, v) = cache.gather(SeqId(s), 0, rows.len()).unwrap();
        for (t, row) in rows.iter().enumerate() {
            if let Some(x) = row {
                assert_eq!(k[t * WIDTH], *x, "{s} key row {t}");
                assert_eq!(v[t * WIDTH + 1], -*x, "{s} value row {t}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_scripts_match_mirror(ops in proptest::collection::vec(op(), 1..200)) {
        let cache = KvCache::new(PoolConfig::new(PAGE, PAGES), KvLayout::new(1, 1, WIDTH), Precision::F32).unwrap();
        let mut m = Mirror::default();
        for op in ops {
            let free_before = cache.pool().available_pages();
            let res = match op {
                Op::Reserve(s, len) => cache.reserve(SeqId(s), len).map(|_| {
                    m.seqs.insert(s, (Mirror::cap(len), Vec::new()));
                }),
                Op::Grow(s, len) => cache.grow(SeqId(s), len).map(|_| {
                    let e = m.seqs.get_mut(&s).unwrap();
                    e.0 = e.0.max(Mirror::cap(len));
                }),
                Op::Free(s) => cache.free(SeqId(s)).map(|_| {
                    m.seqs.remove(&s);
                }),
                Op::Fork(p, c, len) => cache.fork(SeqId(p), SeqId(c), len).map(|_| {
                    let rows = m.seqs[&p].1[..len].to_vec();
                    m.seqs.insert(c, (Mirror::cap(len), rows));
                }),
                Op::Assign(s, t, x) => cache
                    .assign(SeqId(s), 0, &[t], &[x, x], &[-x, -x])
                    .map(|_| {
                        let rows = &mut m.seqs.get_mut(&s).unwrap().1;
                        if rows.len() <= t {
                            rows.resize(t + 1, None);
                        }
                        rows[t] = Some(x);
                    }),
            };
            if let Err(e) = res {
                // Failures must leave the pool untouched.
                prop_assert_eq!(cache.pool().available_pages(), free_before);
                let expected = matches!(
                    e,
                    Error::CapacityExhausted { .. }
                        | Error::DuplicateSequence(_)
                        | Error::UnknownSequence(_)
                        | Error::InvalidPrefix { .. }
                        | Error::OutOfRange { .. }
                );
                prop_assert!(expected, "unexpected error {:?}", e);
            }
            check(&cache, &m);
        }
    }
}

#[test]
fn concurrent_reserve_free_keeps_census() {
    let pool = Arc::new(PagePool::new(PoolConfig::new(16, 512)).unwrap());
    let handles: Vec<_> = (0..4u64)
        .map(|w| {
            let pool = Arc::clone(&pool);
            thread::spawn(move || {
                let mut mine = Vec::new();
                let mut granted = 0usize;
                for i in 0..5000u64 {
                    let seq = SeqId(w << 32 | i);
                    let len = ((i * 37 + w * 11) % 100) as usize + 1;
                    match pool.reserve(seq, len) {
                        Ok(pages) => {
                            granted += pages.len();
                            mine.push(seq);
                        }
                        Err(Error::CapacityExhausted { .. }) => {}
                        Err(e) => panic!("{e}"),
                    }
                    if mine.len() > 8 || i % 3 == 0 {
                        if let Some(s) = mine.pop() {
                            pool.free(s).unwrap();
                        }
                    }
                }
                for s in mine {
                    pool.free(s).unwrap();
                }
                granted
            })
        })
        .collect();
    let granted: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    assert!(granted > 0);
    let census = pool.census().unwrap();
    assert_eq!(census.live_pages, 0);
    assert_eq!(census.free_pages + census.never_allocated, 512);
}

#[test]
fn concurrent_holders_never_share_pages() {
    let pool = Arc::new(PagePool::new(PoolConfig::new(8, 256)).unwrap());
    let handles: Vec<_> = (0..4u64)
        .map(|w| {
            let pool = Arc::clone(&pool);
            thread::spawn(move || {
                let mut held = Vec::new();
                for i in 0..200u64 {
                    let seq = SeqId(w * 1000 + i);
                    if pool.reserve(seq, 8 * 4).is_ok() {
                        held.push(seq);
                    }
                    if held.len() > 10 {
                        pool.free(held.remove(0)).unwrap();
                    }
                }
                held
            })
        })
        .collect();
    let held: Vec<SeqId> = handles
        .into_iter()
        .flat_map(|h| h.join().unwrap())
        .collect();
    let mut seen = HashSet::new();
    for s in &held {
        for p in pool.table(*s).unwrap().entries {
            assert!(seen.insert(p), "page {p:?} granted twice");
            assert_eq!(pool.refcount(p), 1);
        }
    }
    pool.census().unwrap();
}

#[test]
fn exhaustion_is_all_or_nothing_under_contention() {
    let pool = Arc::new(PagePool::new(PoolConfig::new(4, 10)).unwrap());
    // Each request wants 3 pages; at most 3 can succeed.
    let handles: Vec<_> = (0..8u64)
        .map(|w| {
            let pool = Arc::clone(&pool);
            thread::spawn(move || pool.reserve(SeqId(w), 12).is_ok())
        })
        .collect();
    let wins = handles
        .into_iter()
        .map(|h| h.join().unwrap())
        .filter(|&ok| ok)
        .count();
    assert_eq!(wins, 3);
    let census = pool.census().unwrap();
    assert_eq!(census.live_pages, 9);
    assert_eq!(pool.available_pages(), 1);
}

#[test]
fn double_free_is_rejected() {
    let pool = PagePool::new(PoolConfig::new(4, 4)).unwrap();
    pool.reserve(SeqId(1), 8).unwrap();
    pool.free(SeqId(1)).unwrap();
    assert_eq!(pool.free(SeqId(1)), Err(Error::UnknownSequence(SeqId(1))));
    assert_eq!(pool.census().unwrap().free_pages, 2);
}
