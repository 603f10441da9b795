//! Paged key/value cache for autoregressive transformer decoding.
//!
//! - [`page_manager`]: lock-free fixed-size page allocator and block tables.
//! - [`kv_cache`]: K/V buffers addressed by page, Assign/Gather, batch views.
//! - [`attention`]: exact attention over scattered pages plus a dense oracle.
//! - [`decoder`]: a seeded toy decoder whose decode loop drives the cache.
//! - [`workload`]: evaluation traces and allocator memory accounting.

pub mod attention;
pub mod decoder;
pub mod error;
pub mod kv_cache;
pub mod page_manager;
pub mod workload;

pub use attention::{
    build_block_mask, mask_allow, max_row_relative_error, paged_attention, paged_attention_with,
    reference_attention, AttentionConfig, AttentionOutput, BlockClass, BlockMask, KernelOptions,
    MaskMeta, QueryStats,
};
pub use decoder::{
    DecodeMode, DecodeSession, DecoderConfig, FlopCounter, FlopModel, Generation, StepRecord,
    ToyDecoder,
};
pub use error::{Error, Result};
pub use kv_cache::{build_batch_view, BatchView, KvCache, KvLayout, KvStore, Precision};
pub use page_manager::{
    BlockTable, Census, PageAddress, PageCopy, PageId, PagePool, PoolConfig, SeqId,
    DEFAULT_PAGE_SIZE,
};
pub use workload::{
    account, gen_chat_growth, gen_fixed_batch, gen_mixed_batch, gen_single_sequence, memory_report,
    AllocatorModel, AllocatorUsage, CensusPoint, Event, KvShape, MemoryReport, MixedBatch, Trace,
};
