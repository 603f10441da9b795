//! Self-checks run by `pagekv verify`: paged attention against the dense
//! oracle, random allocator scripts against a mirror store, and fork
//! isolation under random interleavings.

use std::collections::HashMap;

use anyhow::Result;
use pagekv::{
    max_row_relative_error, paged_attention, reference_attention, AttentionConfig, Error, KvCache,
    KvLayout, MaskMeta, PoolConfig, Precision, SeqId,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::report::{ReportMeta, VerifySummary};

pub const ORACLE_TOLERANCE: f64 = 1e-5;
/// Query rows compared per oracle instance.
pub const ORACLE_MAX_QUERIES: usize = 256;
const MAX_VIOLATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Hands every page out once and takes them back in random order, so later
/// grants come off the free stack scattered across the buffer.
fn scramble(cache: &KvCache, rng: &mut ChaCha8Rng) -> Result<(), Error> {
    let ps = cache.page_size();
    let mut ids: Vec<u64> = (0..cache.pool().capacity_pages() as u64)
        .map(|i| u64::MAX - i)
        .collect();
    for &i in &ids {
        cache.reserve(SeqId(i), ps)?;
    }
    ids.shuffle(rng);
    for &i in &ids {
        cache.free(SeqId(i))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleInstance {
    pub seq_lens: Vec<usize>,
    pub head_count: usize,
    pub head_dim: usize,
    pub page_size: usize,
    pub causal: bool,
    pub queries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleOutcome {
    pub instances: Vec<OracleInstance>,
    pub max_rel_error: f64,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        !self.instances.is_empty() && self.max_rel_error <= ORACLE_TOLERANCE
    }
}

/// One random batch: 1-8 sequences of up to 1024 tokens, heads in
/// {1, 4, 8}, head_dim in {8, 16, 64}, pages of {16, 64, 128}.
fn oracle_instance(rng: &mut ChaCha8Rng, fault: bool) -> Result<OracleInstance, Error> {
    let n = rng.random_range(1..=8);
    let mut lens: Vec<usize> = (0..n).map(|_| rng.random_range(1..=1024)).collect();
    let heads = *[1usize, 4, 8].choose(rng).unwrap();
    let dim = *[8usize, 16, 64].choose(rng).unwrap();
    let page = *[16usize, 64, 128].choose(rng).unwrap();
    let mut causal = rng.random_bool(0.5);
    if fault {
        // The swapped pages must be visible to a query that sees only a
        // prefix, or the permutation would cancel out.
        causal = true;
        lens[0] = lens[0].max(2 * page + 1);
    }
    let width = heads * dim;
    let needed: usize = lens.iter().map(|l| l.div_ceil(page)).sum();
    let cache = KvCache::new(
        PoolConfig::new(page, needed + needed / 2 + 2),
        KvLayout::new(1, heads, dim),
        Precision::F32,
    )?;
    scramble(&cache, rng)?;

    let seqs: Vec<SeqId> = (0..n as u64).map(SeqId).collect();
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (&s, &len) in seqs.iter().zip(&lens) {
        cache.reserve(s, len)?;
        let k = random_rows(rng, len * width);
        let v = random_rows(rng, len * width);
        let pos: Vec<usize> = (0..len).collect();
        cache.assign(s, 0, &pos, &k, &v)?;
        keys.extend(k);
        values.extend(v);
    }

    let view = cache.build_batch_view(&seqs, &lens)?;
    let total = view.total_slots();
    let meta = if total <= ORACLE_MAX_QUERIES && !fault {
        MaskMeta::prefill(view)
    } else {
        let mut qs = Vec::with_capacity(ORACLE_MAX_QUERIES);
        let mut qp = Vec::with_capacity(ORACLE_MAX_QUERIES);
        if fault {
            qs.push(0);
            qp.push(0);
        }
        while qs.len() < ORACLE_MAX_QUERIES.min(total) {
            let (s, p) = view.locate(rng.random_range(0..total)).expect("in range");
            qs.push(s);
            qp.push(p);
        }
        MaskMeta::new(view, qs, qp)?
    };
    let queries = random_rows(rng, meta.num_queries() * width);
    let config = AttentionConfig::new(heads, dim, page, causal);

    if fault {
        cache.pool().inject_table_fault(SeqId(0))?;
    }
    let tables = cache.tables_for(&meta.view)?;
    let got = paged_attention(&queries, cache.store(), 0, &tables, &meta, &config)?;
    let want = reference_attention(
        &queries,
        &meta.query_seq,
        &meta.query_pos,
        &keys,
        &values,
        &lens,
        &config,
    )?;
    Ok(OracleInstance {
        seq_lens: lens,
        head_count: heads,
        head_dim: dim,
        page_size: page,
        causal,
        queries: meta.num_queries(),
        max_rel_error: max_row_relative_error(&got, &want, width),
    })
}

/// Runs `instances` random batches in parallel; instance `i` draws from
/// stream `i` of `seed`, so results do not depend on scheduling. With
/// `inject_fault` the first instance has a corrupted block table.
pub fn oracle_suite(
    instances: usize,
    seed: u64,
    inject_fault: bool,
) -> Result<OracleOutcome, Error> {
    let instances: Vec<OracleInstance> = (0..instances as u64)
        .into_par_iter()
        .map(|i| oracle_instance(&mut rng_for(seed, i), inject_fault && i == 0))
        .collect::<Result<_, _>>()?;
    let max_rel_error = instances
        .iter()
        .map(|i| i.max_rel_error)
        .fold(0.0, f64::max);
    Ok(OracleOutcome {
        instances,
        max_rel_error,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScriptOutcome {
    pub ops: usize,
    pub gathers: usize,
    pub census_checks: usize,
    /// Reserve/grow/fork requests refused for lack of pages.
    pub exhaustions: usize,
    /// Requests refused for other reasons (unknown or duplicate sequence,
    /// out of range, bad prefix), each matching the mirror's prediction.
    pub rejected: usize,
    /// Refcount underflows reported by the pool.
    pub double_frees: usize,
    pub violations: Vec<String>,
}

impl ScriptOutcome {
    pub fn passed(&self) -> bool {
        self.ops > 0 && self.double_frees == 0 && self.violations.is_empty()
    }

    fn violation(&mut self, msg: String) {
        if self.violations.len() < MAX_VIOLATIONS {
            self.violations.push(msg);
        }
    }
}

type Row = Option<(Vec<f32>, Vec<f32>)>;

#[derive(Clone)]
struct SeqMirror {
    cap: usize,
    len: usize,
    /// `rows[layer][position]`, `None` where nothing was written.
    rows: Vec<Vec<Row>>,
}

const SCRIPT_PAGE: usize = 8;
const SCRIPT_PAGES: usize = 48;
const SCRIPT_LAYERS: usize = 2;
const SCRIPT_WIDTH: usize = 4;
const SCRIPT_SEQS: u64 = 24;

fn round_up(len: usize, page: usize) -> usize {
    len.div_ceil(page) * page
}

/// Gathers `seq` up to `len` and compares every written row bit for bit.
fn compare_gather(cache: &KvCache, seq: SeqId, layer: usize, m: &SeqMirror) -> Result<(), String> {
    let (k, v) = cache
        .gather(seq, layer, m.len)
        .map_err(|e| format!("gather {seq}: {e}"))?;
    let w = cache.layout().row_width();
    for (t, row) in m.rows[layer].iter().enumerate().take(m.len) {
        if let Some((mk, mv)) = row {
            let same =
                |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same(&k[t * w..(t + 1) * w], mk) || !same(&v[t * w..(t + 1) * w], mv) {
                return Err(format!("{seq} layer {layer} row {t} differs from mirror"));
            }
        }
    }
    Ok(())
}

fn run_script(rng: &mut ChaCha8Rng, ops: usize, out: &mut ScriptOutcome) -> Result<(), Error> {
    let cache = KvCache::new(
        PoolConfig::new(SCRIPT_PAGE, SCRIPT_PAGES),
        KvLayout::new(SCRIPT_LAYERS, 1, SCRIPT_WIDTH),
        Precision::F32,
    )?;
    let mut mirror: HashMap<SeqId, SeqMirror> = HashMap::new();
    let fresh = |cap: usize, len: usize| SeqMirror {
        cap,
        len,
        rows: vec![vec![None; cap]; SCRIPT_LAYERS],
    };

    for step in 0..ops {
        let s = SeqId(rng.random_range(0..SCRIPT_SEQS));
        let avail = cache.pool().available_pages();
        let pages_held = |m: Option<&SeqMirror>| m.map_or(0, |m| m.cap / SCRIPT_PAGE);
        // (op label, outcome, expected error kind or None if success is possible)
        let (label, result, predicted): (&str, Result<(), Error>, Option<&str>) = match rng
            .random_range(0..100)
        {
            0..=17 => {
                let len: usize = rng.random_range(0..=80);
                let need = len.div_ceil(SCRIPT_PAGE);
                let predicted = if mirror.contains_key(&s) {
                    Some("duplicate")
                } else if need > avail {
                    Some("exhausted")
                } else {
                    None
                };
                let r = cache.reserve(s, len).map(|_| {
                    mirror.insert(s, fresh(round_up(len, SCRIPT_PAGE), 0));
                });
                ("reserve", r, predicted)
            }
            18..=31 => {
                let len: usize = rng.random_range(0..=120);
                let need = len
                    .div_ceil(SCRIPT_PAGE)
                    .saturating_sub(pages_held(mirror.get(&s)));
                let predicted = if !mirror.contains_key(&s) {
                    Some("unknown")
                } else if need > avail {
                    Some("exhausted")
                } else {
                    None
                };
                let r = cache.grow(s, len).map(|_| {
                    let m = mirror.get_mut(&s).unwrap();
                    let cap = m.cap.max(round_up(len, SCRIPT_PAGE));
                    m.cap = cap;
                    for rows in &mut m.rows {
                        rows.resize(cap, None);
                    }
                });
                ("grow", r, predicted)
            }
            32..=57 => {
                let layer = rng.random_range(0..SCRIPT_LAYERS);
                let cap = mirror.get(&s).map_or(8, |m| m.cap);
                let count = rng.random_range(1..=4);
                let pos: Vec<usize> = (0..count).map(|_| rng.random_range(0..cap + 4)).collect();
                let k = random_rows(rng, count * SCRIPT_WIDTH);
                let v = random_rows(rng, count * SCRIPT_WIDTH);
                let predicted = if !mirror.contains_key(&s) {
                    Some("unknown")
                } else if pos.iter().any(|&p| p >= cap) {
                    Some("range")
                } else {
                    None
                };
                let r = cache.assign(s, layer, &pos, &k, &v).map(|_| {
                    let m = mirror.get_mut(&s).unwrap();
                    for (i, &p) in pos.iter().enumerate() {
                        let row = i * SCRIPT_WIDTH..(i + 1) * SCRIPT_WIDTH;
                        m.rows[layer][p] = Some((k[row.clone()].to_vec(), v[row].to_vec()));
                        m.len = m.len.max(p + 1);
                    }
                });
                ("assign", r, predicted)
            }
            58..=73 => {
                let layer = rng.random_range(0..SCRIPT_LAYERS);
                match mirror.get(&s) {
                    Some(m) => {
                        out.gathers += 1;
                        if let Err(msg) = compare_gather(&cache, s, layer, m) {
                            out.violation(format!("op {step}: {msg}"));
                        }
                        let over = cache.gather(s, layer, m.len + 1).map(|_| ());
                        ("gather-past-end", over, Some("range"))
                    }
                    None => (
                        "gather",
                        cache.gather(s, layer, 0).map(|_| ()),
                        Some("unknown"),
                    ),
                }
            }
            74..=87 => {
                let predicted = (!mirror.contains_key(&s)).then_some("unknown");
                let r = cache.free(s).map(|_| {
                    mirror.remove(&s);
                });
                ("free", r, predicted)
            }
            _ => {
                let child = SeqId(rng.random_range(0..SCRIPT_SEQS));
                let plen = mirror.get(&s).map_or(0, |m| m.len);
                let prefix = rng.random_range(0..=plen + 1);
                let predicted = if child == s || mirror.contains_key(&child) {
                    Some("duplicate")
                } else if !mirror.contains_key(&s) {
                    Some("unknown")
                } else if prefix > plen {
                    Some("prefix")
                } else if prefix % SCRIPT_PAGE != 0 && avail == 0 {
                    Some("exhausted")
                } else {
                    None
                };
                let r = cache.fork(s, child, prefix).map(|_| {
                    let parent = &mirror[&s];
                    let cap = round_up(prefix, SCRIPT_PAGE);
                    let mut m = fresh(cap, prefix);
                    for (dst, src) in m.rows.iter_mut().zip(&parent.rows) {
                        dst[..prefix].clone_from_slice(&src[..prefix]);
                    }
                    mirror.insert(child, m);
                });
                ("fork", r, predicted)
            }
        };
        out.ops += 1;

        let kind = match &result {
            Ok(()) => None,
            Err(Error::CapacityExhausted { .. }) => Some("exhausted"),
            Err(Error::DuplicateSequence(_)) => Some("duplicate"),
            Err(Error::UnknownSequence(_)) => Some("unknown"),
            Err(Error::OutOfRange { .. }) => Some("range"),
            Err(Error::InvalidPrefix { .. }) => Some("prefix"),
            Err(Error::CensusViolation(msg)) => {
                out.double_frees += 1;
                out.violation(format!("op {step} {label}: {msg}"));
                Some("census")
            }
            Err(e) => {
                out.violation(format!("op {step} {label}: unexpected {e}"));
                Some("other")
            }
        };
        // Assign may also run out of pages while privatizing a shared block.
        let allowed = kind == predicted
            || (label == "assign" && predicted.is_none() && kind == Some("exhausted"));
        if !allowed {
            out.violation(format!(
                "op {step} {label} {s}: got {kind:?}, mirror predicted {predicted:?}"
            ));
        }
        match kind {
            Some("exhausted") => {
                out.exhaustions += 1;
                if label != "assign" && cache.pool().available_pages() != avail {
                    out.violation(format!(
                        "op {step} {label}: failed request moved the free count"
                    ));
                }
            }
            Some(_) => out.rejected += 1,
            None => {}
        }

        out.census_checks += 1;
        match cache.pool().census() {
            Ok(c) if c.sequences == mirror.len() => {}
            Ok(c) => out.violation(format!(
                "op {step}: pool tracks {} sequences, mirror {}",
                c.sequences,
                mirror.len()
            )),
            Err(e) => out.violation(format!("op {step}: census {e}")),
        }
        if let Some(m) = mirror.get(&s) {
            let t = cache.pool().table(s)?;
            if t.capacity(SCRIPT_PAGE) != m.cap || t.logical_len != m.len {
                out.violation(format!(
                    "op {step}: {s} table cap/len {}/{} vs mirror {}/{}",
                    t.capacity(SCRIPT_PAGE),
                    t.logical_len,
                    m.cap,
                    m.len
                ));
            }
        }
    }
    Ok(())
}

/// `scripts` random operation scripts of `ops` steps each, checked against
/// a mirror store after every step.
pub fn script_suite(seed: u64, scripts: usize, ops: usize) -> Result<ScriptOutcome, Error> {
    let mut out = ScriptOutcome::default();
    for i in 0..scripts as u64 {
        run_script(&mut rng_for(seed, 1 << 32 | i), ops, &mut out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ForkSuiteOutcome {
    pub interleavings: usize,
    pub aligned_forks: usize,
    /// Pages granted by forks whose prefix ended on a page boundary.
    pub aligned_fork_pages: usize,
    pub writes: usize,
    pub gathers: usize,
    pub violations: Vec<String>,
}

impl ForkSuiteOutcome {
    pub fn passed(&self) -> bool {
        self.interleavings > 0 && self.aligned_fork_pages == 0 && self.violations.is_empty()
    }
}

fn fork_interleaving(
    rng: &mut ChaCha8Rng,
    round: usize,
    out: &mut ForkSuiteOutcome,
) -> Result<(), Error> {
    let page = *[4usize, 8, 16].choose(rng).unwrap();
    let width = 4;
    let cache = KvCache::new(
        PoolConfig::new(page, 96),
        KvLayout::new(1, 1, width),
        Precision::F32,
    )?;
    let (parent, child) = (SeqId(0), SeqId(1));
    let len = rng.random_range(1..=96);
    cache.reserve(parent, len)?;
    let k = random_rows(rng, len * width);
    let v = random_rows(rng, len * width);
    cache.assign(parent, 0, &(0..len).collect::<Vec<_>>(), &k, &v)?;
    let mut mp = SeqMirror {
        cap: round_up(len, page),
        len,
        rows: vec![(0..len)
            .map(|t| {
                Some((
                    k[t * width..(t + 1) * width].to_vec(),
                    v[t * width..(t + 1) * width].to_vec(),
                ))
            })
            .collect()],
    };

    let aligned = len >= page && rng.random_bool(0.5);
    let prefix = if aligned {
        page * rng.random_range(1..=len / page)
    } else {
        rng.random_range(0..=len)
    };
    let before = cache.pool().available_pages();
    let outcome = cache.fork(parent, child, prefix)?;
    if prefix % page == 0 {
        out.aligned_forks += 1;
        out.aligned_fork_pages += before - cache.pool().available_pages();
        if outcome.copied_slots != 0 {
            out.violations
                .push(format!("round {round}: aligned fork copied rows"));
        }
    }
    let mut mc = SeqMirror {
        cap: round_up(prefix, page),
        len: prefix,
        rows: vec![mp.rows[0][..prefix].to_vec()],
    };

    for _ in 0..30 {
        let (seq, m) = if rng.random_bool(0.5) {
            (parent, &mut mp)
        } else {
            (child, &mut mc)
        };
        // Overwrite an existing row or append one.
        let t = if m.len > 0 && rng.random_bool(0.5) {
            rng.random_range(0..m.len)
        } else {
            m.len
        };
        if t >= m.cap {
            cache.grow(seq, t + 1)?;
            m.cap = round_up(t + 1, page);
        }
        let rk = random_rows(rng, width);
        let rv = random_rows(rng, width);
        cache.assign(seq, 0, &[t], &rk, &rv)?;
        if m.rows[0].len() <= t {
            m.rows[0].resize(t + 1, None);
        }
        m.rows[0][t] = Some((rk, rv));
        m.len = m.len.max(t + 1);
        out.writes += 1;

        for (s, m) in [(parent, &mp), (child, &mc)] {
            out.gathers += 1;
            if let Err(msg) = compare_gather(&cache, s, 0, m) {
                if out.violations.len() < MAX_VIOLATIONS {
                    out.violations.push(format!("round {round}: {msg}"));
                }
            }
        }
    }
    if let Err(e) = cache.pool().census() {
        out.violations.push(format!("round {round}: census {e}"));
    }
    Ok(())
}

/// Random parent/child write interleavings after a fork; each must leave
/// the other side's gathers untouched.
pub fn fork_suite(seed: u64, interleavings: usize) -> Result<ForkSuiteOutcome, Error> {
    let mut out = ForkSuiteOutcome::default();
    for i in 0..interleavings {
        fork_interleaving(&mut rng_for(seed, 2 << 32 | i as u64), i, &mut out)?;
        out.interleavings += 1;
    }
    Ok(out)
}

pub fn cmd_verify(config: &RunConfig) -> Result<VerifySummary> {
    config.validate()?;
    let v = &config.verify;
    if v.instances == 0 || v.scripts == 0 || v.ops_per_script == 0 || v.interleavings == 0 {
        return Err(ConfigError(
            "every suite needs at least one instance; a zero count would pass vacuously".into(),
        )
        .into());
    }

    let mut checks = Vec::new();
    let oracle = oracle_suite(v.instances, config.seed, v.inject_fault)?;
    checks.push(CheckResult {
        name: "oracle-equivalence".into(),
        passed: oracle.passed(),
        detail: format!(
            "{} instances, max relative error {:.3e} (tolerance {ORACLE_TOLERANCE:e})",
            oracle.instances.len(),
            oracle.max_rel_error
        ),
    });

    let scripts = script_suite(config.seed, v.scripts, v.ops_per_script)?;
    checks.push(CheckResult {
        name: "allocator-scripts".into(),
        passed: scripts.passed(),
        detail: format!(
            "{} ops, {} gathers, {} exhaustions, {} double frees{}",
            scripts.ops,
            scripts.gathers,
            scripts.exhaustions,
            scripts.double_frees,
            scripts
                .violations
                .first()
                .map(|v| format!("; first violation: {v}"))
                .unwrap_or_default()
        ),
    });

    let forks = fork_suite(config.seed, v.interleavings)?;
    checks.push(CheckResult {
        name: "fork-isolation".into(),
        passed: forks.passed(),
        detail: format!(
            "{} interleavings, {} aligned forks granted {} pages{}",
            forks.interleavings,
            forks.aligned_forks,
            forks.aligned_fork_pages,
            forks
                .violations
                .first()
                .map(|v| format!("; first violation: {v}"))
                .unwrap_or_default()
        ),
    });

    Ok(VerifySummary {
        meta: ReportMeta::new("verify", config),
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_small_run_passes() {
        let o = oracle_suite(6, 1, false).unwrap();
        assert!(o.passed(), "{}", o.max_rel_error);
        assert_eq!(o, oracle_suite(6, 1, false).unwrap());
    }

    #[test]
    fn corrupted_table_is_caught() {
        let o = oracle_suite(2, 1, true).unwrap();
        assert!(!o.passed());
        assert!(o.instances[0].max_rel_error > ORACLE_TOLERANCE);
    }

    #[test]
    fn short_scripts_hold() {
        let s = script_suite(3, 2, 500).unwrap();
        assert!(s.passed(), "{:?}", s.violations);
        assert!(s.gathers > 0 && s.rejected > 0);
    }

    #[test]
    fn forks_hold() {
        let f = fork_suite(5, 50).unwrap();
        assert!(f.passed(), "{:?}", f.violations);
        assert!(f.aligned_forks > 0);
    }

    #[test]
    fn zero_instances_rejected() {
        let mut c = RunConfig::default();
        c.verify.instances = 0;
        let err = cmd_verify(&c).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }
}
