//! Persistent 4-bit quantized KV-cache engine for multi-agent inference.
//!
//! Agent caches are quantized on entry ([`quant_codec`]), held in per-agent
//! block lists ([`block_pool`]), written to disk as safetensors files
//! ([`persistence`]), matched against new prompts by character prefix
//! ([`prefix_matcher`]), batched across agents for decode ([`batch_cache`])
//! and driven by a single-lane cooperative [`scheduler`]. [`daemon`] exposes
//! all of it over newline-delimited JSON.

pub mod agent_cache;
pub mod batch_cache;
pub mod block_pool;
pub mod canonical;
pub mod capacity_planner;
pub mod daemon;
pub mod error;
pub mod model_spec;
pub mod persistence;
pub mod prefix_matcher;
pub mod quant_codec;
pub mod scheduler;
pub mod synthetic;
pub mod tensor_file;

pub use agent_cache::{AgentCache, CacheState, KVBlock, LayerKv};
pub use block_pool::{BlockPool, PoolConfig, PoolStats};
pub use error::{CacheError, Result};
pub use model_spec::{preset, AttentionKind, ModelCacheSpec, RawSpec};
pub use quant_codec::QuantizedTensor;
