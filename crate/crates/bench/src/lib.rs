//! Fixtures shared by the criterion benches.

use pagekv::{KvCache, KvLayout, MaskMeta, PoolConfig, Precision, SeqId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A cache holding one fully written sequence per entry of `lens`, plus
/// one query row per sequence at its last position.
pub struct DecodeBatch {
    pub cache: KvCache,
    pub meta: MaskMeta,
    pub queries: Vec<f32>,
}

pub fn decode_batch(
    page_size: usize,
    lens: &[usize],
    heads: usize,
    dim: usize,
    seed: u64,
) -> DecodeBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pages: usize = lens.iter().map(|l| l.div_ceil(page_size)).sum();
    let cache = KvCache::new(
        PoolConfig::new(page_size, pages.max(1)),
        KvLayout::new(1, heads, dim),
        Precision::F32,
    )
    .expect("valid fixture");
    let width = heads * dim;
    let seqs: Vec<SeqId> = (0..lens.len() as u64).map(SeqId).collect();
    for (&s, &len) in seqs.iter().zip(lens) {
        cache.reserve(s, len).expect("sized pool");
        let rows: Vec<f32> = (0..len * width)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let pos: Vec<usize> = (0..len).collect();
        cache.assign(s, 0, &pos, &rows, &rows).expect("in range");
    }
    let view = cache.build_batch_view(&seqs, lens).expect("valid view");
    let meta = MaskMeta::new(
        view,
        (0..lens.len()).collect(),
        lens.iter().map(|l| l - 1).collect(),
    )
    .expect("valid queries");
    let queries = (0..lens.len() * width)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    DecodeBatch {
        cache,
        meta,
        queries,
    }
}
