//! Seeded desk-scale decoder-only transformer.
//!
//! Pre-norm residual blocks (RMSNorm, multi-head attention, 2-layer GELU
//! MLP) with sinusoidal positions. Weights are drawn from a ChaCha stream
//! seeded by [`DecoderConfig::seed`], so a config fully determines the
//! model.
//!
//! Two decode paths are provided: the cached path writes one token's K/V
//! into a [`KvCache`] and attends through the paged kernel, and the uncached
//! path recomputes the whole prefix with dense attention. Both report FLOPs
//! through [`FlopCounter`].

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{paged_attention_with, AttentionConfig, KernelOptions, MaskMeta};
use crate::error::{Error, Result};
use crate::kv_cache::{BatchView, KvCache, KvLayout, Precision};
use crate::page_manager::{PoolConfig, SeqId};

const MLP_RATIO: usize = 4;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub head_count: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            head_count: 4,
            head_dim: 16,
            vocab: 256,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn model_dim(&self) -> usize {
        self.head_count * self.head_dim
    }

    pub fn hidden_dim(&self) -> usize {
        MLP_RATIO * self.model_dim()
    }

    pub fn kv_layout(&self) -> KvLayout {
        KvLayout::new(self.layers, self.head_count, self.head_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.head_count == 0 || self.head_dim == 0 || self.vocab == 0 {
            return Err(Error::InvalidConfig(format!(
                "decoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Attention and projection FLOPs, two per multiply-add.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub attention_flops: u64,
    pub projection_flops: u64,
}

impl FlopCounter {
    pub fn total(&self) -> u64 {
        self.attention_flops + self.projection_flops
    }

    pub fn add(&mut self, other: FlopCounter) {
        self.attention_flops += other.attention_flops;
        self.projection_flops += other.projection_flops;
    }
}

/// Closed-form FLOP counts per forward call at context length `n`.
#[derive(Debug, Clone, Copy)]
pub struct FlopModel {
    config: DecoderConfig,
}

impl FlopModel {
    pub fn new(config: DecoderConfig) -> Self {
        Self { config }
    }

    fn per_token_projection(&self) -> u64 {
        let d = self.config.model_dim() as u64;
        let f = self.config.hidden_dim() as u64;
        // q, k, v, o plus the two MLP matrices.
        self.config.layers as u64 * (4 * 2 * d * d + 2 * 2 * d * f)
    }

    fn head_projection(&self) -> u64 {
        2 * self.config.model_dim() as u64 * self.config.vocab as u64
    }

    /// One new token against `n` cached positions: `4 h d n` per layer.
    pub fn cached_step(&self, n: usize) -> FlopCounter {
        let c = &self.config;
        FlopCounter {
            attention_flops: 4 * (c.layers * c.head_count * c.head_dim) as u64 * n as u64,
            projection_flops: self.per_token_projection() + self.head_projection(),
        }
    }

    /// Full recompute of an `n`-token prefix with dense `n x n` scores.
    pub fn uncached_step(&self, n: usize) -> FlopCounter {
        let c = &self.config;
        let n = n as u64;
        FlopCounter {
            attention_flops: 4 * (c.layers * c.head_count * c.head_dim) as u64 * n * n,
            projection_flops: n * self.per_token_projection() + self.head_projection(),
        }
    }

    /// Sum of per-call costs for context lengths `1..=n`.
    pub fn cumulative(&self, n: usize, cached: bool) -> FlopCounter {
        let mut total = FlopCounter::default();
        for k in 1..=n {
            total.add(if cached {
                self.cached_step(k)
            } else {
                self.uncached_step(k)
            });
        }
        total
    }
}

struct LayerWeights {
    norm_attn: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    norm_mlp: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

pub struct ToyDecoder {
    config: DecoderConfig,
    embed: Vec<f32>,
    layers: Vec<LayerWeights>,
    norm_out: Vec<f32>,
    lm_head: Vec<f32>,
}

impl std::fmt::Debug for ToyDecoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyDecoder")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// `y = x W` for row-major `W` of shape `(x.len(), out)`.
fn matvec(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; out];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (acc, &wij) in y.iter_mut().zip(row) {
            *acc += xi * wij;
        }
    }
    y
}

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_position(x: &mut [f32], pos: usize) {
    let dim = x.len();
    for i in 0..dim / 2 {
        let freq = 10_000f32.powf(-((2 * i) as f32) / dim as f32);
        let angle = pos as f32 * freq;
        x[2 * i] += angle.sin();
        x[2 * i + 1] += angle.cos();
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Cached,
    Nocache,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cached" => Ok(DecodeMode::Cached),
            "nocache" | "uncached" => Ok(DecodeMode::Nocache),
            other => Err(Error::InvalidConfig(format!(
                "unknown decode mode {other:?}"
            ))),
        }
    }
}

/// One forward call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Tokens attended over, including the one being processed.
    pub context_len: usize,
    pub flops: FlopCounter,
    pub wall_nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepRecord>,
    pub total: FlopCounter,
}

impl ToyDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim();
        let f = config.hidden_dim();
        let embed = uniform(&mut rng, config.vocab * d, 1.0);
        let bd = 1.0 / (d as f32).sqrt();
        let bf = 1.0 / (f as f32).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                norm_attn: vec![1.0; d],
                wq: uniform(&mut rng, d * d, bd),
                wk: uniform(&mut rng, d * d, bd),
                wv: uniform(&mut rng, d * d, bd),
                wo: uniform(&mut rng, d * d, bd),
                norm_mlp: vec![1.0; d],
                w_up: uniform(&mut rng, d * f, bd),
                w_down: uniform(&mut rng, f * d, bf),
            })
            .collect();
        let lm_head = uniform(&mut rng, d * config.vocab, bd);
        Ok(Self {
            config,
            embed,
            layers,
            norm_out: vec![1.0; d],
            lm_head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn flop_model(&self) -> FlopModel {
        FlopModel::new(self.config)
    }

    /// A cache sized for `max_tokens` positions of one sequence.
    pub fn new_cache(&self, page_size: usize, max_tokens: usize) -> Result<KvCache> {
        let pages = max_tokens.div_ceil(page_size).max(1);
        KvCache::new(
            PoolConfig::new(page_size, pages),
            self.config.kv_layout(),
            Precision::F32,
        )
    }

    fn embed_token(&self, token: u32, pos: usize) -> Result<Vec<f32>> {
        let d = self.config.model_dim();
        let t = token as usize;
        if t >= self.config.vocab {
            return Err(Error::OutOfRange {
                position: t,
                limit: self.config.vocab,
            });
        }
        let mut x = self.embed[t * d..(t + 1) * d].to_vec();
        add_position(&mut x, pos);
        Ok(x)
    }

    fn mlp(&self, layer: &LayerWeights, x: &mut [f32]) {
        let h = rms_norm(x, &layer.norm_mlp);
        let up: Vec<f32> = matvec(&h, &layer.w_up, self.config.hidden_dim())
            .into_iter()
            .map(gelu)
            .collect();
        let down = matvec(&up, &layer.w_down, self.config.model_dim());
        for (xi, di) in x.iter_mut().zip(down) {
            *xi += di;
        }
    }

    fn logits(&self, x: &[f32]) -> Vec<f32> {
        matvec(
            &rms_norm(x, &self.norm_out),
            &self.lm_head,
            self.config.vocab,
        )
    }

    /// Starts a cached decode of `seq` in `cache`.
    pub fn session<'a>(&'a self, cache: &'a KvCache, seq: SeqId) -> Result<DecodeSession<'a>> {
        if cache.layout() != self.config.kv_layout() {
            return Err(Error::ShapeMismatch(format!(
                "cache layout {:?} does not match model {:?}",
                cache.layout(),
                self.config.kv_layout()
            )));
        }
        cache.reserve(seq, 0)?;
        Ok(DecodeSession {
            model: self,
            cache,
            seq,
            len: 0,
            flops: FlopCounter::default(),
        })
    }

    /// Recomputes every position of `prefix` and returns the logits of the
    /// last one. Attention is dense: all `n x n` scores are computed and
    /// the causal mask is applied afterwards.
    pub fn decode_step_nocache(&self, prefix: &[u32]) -> Result<(Vec<f32>, FlopCounter)> {
        let n = prefix.len();
        if n == 0 {
            return Err(Error::InvalidConfig("empty prefix".into()));
        }
        let c = &self.config;
        let (d, heads, hd) = (c.model_dim(), c.head_count, c.head_dim);
        let scale = 1.0 / (hd as f32).sqrt();
        let mut flops = FlopCounter::default();

        let mut xs: Vec<Vec<f32>> = prefix
            .iter()
            .enumerate()
            .map(|(pos, &t)| self.embed_token(t, pos))
            .collect::<Result<_>>()?;

        let mut scores = vec![0.0f32; n];
        for layer in &self.layers {
            let mut q = Vec::with_capacity(n);
            let mut k = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for x in &xs {
                let h = rms_norm(x, &layer.norm_attn);
                q.push(matvec(&h, &layer.wq, d));
                k.push(matvec(&h, &layer.wk, d));
                v.push(matvec(&h, &layer.wv, d));
            }
            for (i, x) in xs.iter_mut().enumerate() {
                let mut mixed = vec![0.0f32; d];
                for h in 0..heads {
                    let hs = h * hd..(h + 1) * hd;
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = scale
                            * q[i][hs.clone()]
                                .iter()
                                .zip(&k[j][hs.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f32>();
                    }
                    for s in &mut scores[i + 1..] {
                        *s = f32::NEG_INFINITY;
                    }
                    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut denom = 0.0f32;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let out = &mut mixed[hs.clone()];
                    for (j, &p) in scores.iter().enumerate() {
                        for (o, &vj) in out.iter_mut().zip(&v[j][hs.clone()]) {
                            *o += p * vj;
                        }
                    }
                    for o in out.iter_mut() {
                        *o /= denom;
                    }
                }
                let proj = matvec(&mixed, &layer.wo, d);
                for (xi, p) in x.iter_mut().zip(proj) {
                    *xi += p;
                }
                self.mlp(layer, x);
            }
            flops.attention_flops += 4 * (heads * hd) as u64 * (n * n) as u64;
        }
        let model = self.flop_model();
        flops.projection_flops = n as u64 * model.per_token_projection() + model.head_projection();
        Ok((self.logits(&xs[n - 1]), flops))
    }

    /// Greedy decoding of `steps` new tokens after `prompt`.
    ///
    /// Cached mode feeds the prompt one token at a time through a fresh
    /// cache with `page_size`-token pages, then feeds each generated token
    /// back; one [`StepRecord`] is kept per forward call. Uncached mode
    /// recomputes the whole context once per generated token.
    pub fn generate(
        &self,
        prompt: &[u32],
        steps: usize,
        mode: DecodeMode,
        page_size: usize,
    ) -> Result<Generation> {
        match mode {
            DecodeMode::Cached => {
                let cache = self.new_cache(page_size, prompt.len() + steps)?;
                self.generate_in(&cache, SeqId(0), prompt, steps)
            }
            DecodeMode::Nocache => self.generate_nocache(prompt, steps),
        }
    }

    /// Cached generation inside a caller-provided cache. The sequence is
    /// freed on return.
    pub fn generate_in(
        &self,
        cache: &KvCache,
        seq: SeqId,
        prompt: &[u32],
        steps: usize,
    ) -> Result<Generation> {
        check_generate_args(prompt, steps)?;
        let mut session = self.session(cache, seq)?;
        let result = (|| {
            let mut records = Vec::with_capacity(prompt.len() + steps);
            let mut logits = Vec::new();
            for &t in prompt {
                logits = session.timed_step(t, &mut records)?;
            }
            let mut tokens = Vec::with_capacity(steps);
            loop {
                let next = argmax(&logits);
                tokens.push(next);
                if tokens.len() == steps {
                    break;
                }
                logits = session.timed_step(next, &mut records)?;
            }
            Ok(Generation {
                tokens,
                total: session.flops,
                steps: records,
            })
        })();
        session.finish()?;
        result
    }

    fn generate_nocache(&self, prompt: &[u32], steps: usize) -> Result<Generation> {
        check_generate_args(prompt, steps)?;
        let mut context = prompt.to_vec();
        let mut tokens = Vec::with_capacity(steps);
        let mut records = Vec::with_capacity(steps);
        let mut total = FlopCounter::default();
        for _ in 0..steps {
            let start = Instant::now();
            let (logits, flops) = self.decode_step_nocache(&context)?;
            records.push(StepRecord {
                context_len: context.len(),
                flops,
                wall_nanos: start.elapsed().as_nanos() as u64,
            });
            total.add(flops);
            let next = argmax(&logits);
            tokens.push(next);
            context.push(next);
        }
        Ok(Generation {
            tokens,
            steps: records,
            total,
        })
    }
}

fn check_generate_args(prompt: &[u32], steps: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::InvalidConfig(
            "prompt must hold at least one token".into(),
        ));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be at least 1".into()));
    }
    Ok(())
}

/// Cached decode state of one sequence.
pub struct DecodeSession<'a> {
    model: &'a ToyDecoder,
    cache: &'a KvCache,
    seq: SeqId,
    len: usize,
    flops: FlopCounter,
}

impl DecodeSession<'_> {
    pub fn seq(&self) -> SeqId {
        self.seq
    }

    /// Tokens already in the cache.
    pub fn context_len(&self) -> usize {
        self.len
    }

    /// Cumulative FLOPs of every step so far.
    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    /// Processes one token at the next position and returns its logits and
    /// the FLOPs spent. Only this token's Q/K/V are computed; attention runs
    /// over the cached context through the paged kernel.
    pub fn step(&mut self, token: u32) -> Result<(Vec<f32>, FlopCounter)> {
        let model = self.model;
        let c = &model.config;
        let d = c.model_dim();
        let pos = self.len;
        let page_size = self.cache.page_size();
        self.cache.grow(self.seq, pos + 1)?;

        let mut x = model.embed_token(token, pos)?;
        let mut flops = FlopCounter::default();
        let attn_cfg = AttentionConfig::new(c.head_count, c.head_dim, page_size, true);
        let meta = MaskMeta::new(BatchView::new(&[self.seq], &[pos + 1])?, vec![0], vec![pos])?;
        let options = KernelOptions {
            instrument: true,
            ..KernelOptions::default()
        };

        for (l, layer) in model.layers.iter().enumerate() {
            let h = rms_norm(&x, &layer.norm_attn);
            let q = matvec(&h, &layer.wq, d);
            let k = matvec(&h, &layer.wk, d);
            let v = matvec(&h, &layer.wv, d);
            self.cache.assign(self.seq, l, &[pos], &k, &v)?;
            let tables = vec![self.cache.pool().table(self.seq)?];
            let out = paged_attention_with(
                &q,
                self.cache.store(),
                l,
                &tables,
                &meta,
                &attn_cfg,
                options,
            )?;
            flops.attention_flops += out
                .stats
                .as_ref()
                .map(|s| s.iter().map(|q| q.flops).sum::<u64>())
                .unwrap_or_default();
            let proj = matvec(&out.output, &layer.wo, d);
            for (xi, p) in x.iter_mut().zip(proj) {
                *xi += p;
            }
            model.mlp(layer, &mut x);
        }
        let fm = model.flop_model();
        flops.projection_flops = fm.per_token_projection() + fm.head_projection();
        self.len += 1;
        self.flops.add(flops);
        Ok((model.logits(&x), flops))
    }

    fn timed_step(&mut self, token: u32, records: &mut Vec<StepRecord>) -> Result<Vec<f32>> {
        let start = Instant::now();
        let (logits, flops) = self.step(token)?;
        records.push(StepRecord {
            context_len: self.len,
            flops,
            wall_nanos: start.elapsed().as_nanos() as u64,
        });
        Ok(logits)
    }

    /// A new session for `child` that shares this one's cached context.
    /// Full pages are shared; later steps on either side stay private.
    pub fn fork(&self, child: SeqId) -> Result<DecodeSession<'_>> {
        self.cache.fork(self.seq, child, self.len)?;
        Ok(DecodeSession {
            model: self.model,
            cache: self.cache,
            seq: child,
            len: self.len,
            flops: FlopCounter::default(),
        })
    }

    /// Releases the sequence's pages.
    pub fn finish(self) -> Result<usize> {
        self.cache.free(self.seq)
    }
}
