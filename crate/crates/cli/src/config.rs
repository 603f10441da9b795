use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use pagekv::{
    gen_chat_growth, gen_fixed_batch, gen_mixed_batch, gen_single_sequence, DecodeMode,
    DecoderConfig, KvShape, MixedBatch, Trace, DEFAULT_PAGE_SIZE,
};
use serde::Serialize;

/// Context lengths swept by `bench` unless `--seq-lens` says otherwise.
pub const DEFAULT_CONTEXT_LENGTHS: [usize; 5] = [128, 256, 512, 1024, 2048];

/// A bad flag or flag combination. The binary maps this to exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// One sequence decoding `seq_lens[0]` tokens.
    Single,
    /// 16 prompts of 500..8000 tokens.
    Ladder,
    /// 16 prompts drawn from 256..4096 tokens.
    Uniform,
    /// One conversation growing 1024 -> 2048 -> 4096.
    Chat,
    /// Prompts of exactly `seq_lens`.
    Batch,
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Ok(match s {
            "single" => Scenario::Single,
            "ladder" => Scenario::Ladder,
            "uniform" => Scenario::Uniform,
            "chat" => Scenario::Chat,
            "batch" => Scenario::Batch,
            other => return Err(ConfigError(format!("unknown scenario {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(ConfigError(format!("unknown format {other:?}"))),
        }
    }
}

/// Knobs for `verify`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyConfig {
    pub instances: usize,
    pub scripts: usize,
    pub ops_per_script: usize,
    pub interleavings: usize,
    /// Corrupt one block table before the oracle comparison.
    pub inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            scripts: 3,
            ops_per_script: 10_000,
            interleavings: 1000,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub page_size: usize,
    /// Pool size for scenarios that need one; derived when absent.
    pub pool_pages: Option<usize>,
    /// Sequence lengths (`audit`, `trace-dump`) or context lengths (`bench`).
    pub seq_lens: Vec<usize>,
    pub seed: u64,
    /// `bench` runs both modes when unset.
    pub mode: Option<DecodeMode>,
    pub model: DecoderConfig,
    /// K/V shape used for byte accounting in `audit`.
    pub shape: KvShape,
    /// Contiguous baseline buffer length; the longest sequence when unset.
    pub max_len: Option<usize>,
    pub verify: VerifyConfig,
    #[serde(skip)]
    pub format: Format,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Single,
            page_size: DEFAULT_PAGE_SIZE,
            pool_pages: None,
            seq_lens: Vec::new(),
            seed: 0,
            mode: None,
            model: DecoderConfig::default(),
            shape: KvShape::LLAMA_7B,
            max_len: None,
            verify: VerifyConfig::default(),
            format: Format::Json,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.page_size == 0 || !self.page_size.is_power_of_two() {
            return Err(ConfigError(format!(
                "page size must be a power of two, got {}",
                self.page_size
            )));
        }
        if self.pool_pages == Some(0) {
            return Err(ConfigError("pool must hold at least one page".into()));
        }
        if self.scenario == Scenario::Batch && self.seq_lens.is_empty() {
            return Err(ConfigError("scenario batch needs --seq-lens".into()));
        }
        let s = &self.shape;
        if s.layers == 0 || s.head_count == 0 || s.head_dim == 0 || s.bytes_per_scalar == 0 {
            return Err(ConfigError(format!("degenerate K/V shape {s:?}")));
        }
        self.model
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    /// Context lengths for `bench`, ascending.
    pub fn context_lengths(&self) -> Result<Vec<usize>, ConfigError> {
        let mut lens = if self.seq_lens.is_empty() {
            DEFAULT_CONTEXT_LENGTHS.to_vec()
        } else {
            self.seq_lens.clone()
        };
        lens.sort_unstable();
        lens.dedup();
        if lens.first() == Some(&0) {
            return Err(ConfigError("context lengths must be positive".into()));
        }
        Ok(lens)
    }

    /// The event trace named by `scenario`.
    pub fn trace(&self) -> Result<Trace, ConfigError> {
        Ok(match self.scenario {
            Scenario::Single => gen_single_sequence(self.seq_lens.first().copied().unwrap_or(2048)),
            Scenario::Ladder => gen_mixed_batch(MixedBatch::Ladder, self.seed),
            Scenario::Uniform => gen_mixed_batch(
                MixedBatch::Uniform {
                    count: self.seq_lens.first().copied().unwrap_or(16),
                },
                self.seed,
            ),
            Scenario::Chat => {
                gen_chat_growth(1024, 4096, 2).map_err(|e| ConfigError(e.to_string()))?
            }
            Scenario::Batch => gen_fixed_batch(&self.seq_lens, self.seed),
        })
    }
}
