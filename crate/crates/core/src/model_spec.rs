//! Architecture description shared by every cache component.
//!
//! A [`ModelCacheSpec`] carries the handful of architectural numbers the
//! cache layer needs (layer count, KV heads, key/value head dimensions,
//! per-layer attention kind, block and group sizes). Nothing downstream
//! branches on the model family; asymmetric key/value dims (MLA) and GQA
//! head ratios fall out of these fields.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical;
use crate::error::{CacheError, Result};

pub const DEFAULT_BLOCK_TOKENS: usize = 256;
pub const DEFAULT_GROUP_SIZE: usize = 64;

/// Names accepted by [`preset`].
pub const PRESET_NAMES: &[&str] = &["gemma3-12b", "deepseek-v2-lite-16b", "llama31-8b", "tiny"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionKind {
    Global,
    SlidingWindow { window: usize },
}

impl AttentionKind {
    pub fn window(&self) -> Option<usize> {
        match self {
            AttentionKind::Global => None,
            AttentionKind::SlidingWindow { window } => Some(*window),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct ModelCacheSpec {
    model_id: String,
    num_layers: usize,
    num_kv_heads: usize,
    num_query_heads: usize,
    k_head_dim: usize,
    v_head_dim: usize,
    layer_kinds: Vec<AttentionKind>,
    block_tokens: usize,
    group_size: usize,
    fp_bytes_per_element: usize,
}

/// Unvalidated field bag; the only way into a [`ModelCacheSpec`] is through
/// [`RawSpec::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSpec {
    pub model_id: String,
    pub num_layers: usize,
    pub num_kv_heads: usize,
    pub num_query_heads: usize,
    pub k_head_dim: usize,
    pub v_head_dim: usize,
    pub layer_kinds: Vec<AttentionKind>,
    pub block_tokens: usize,
    pub group_size: usize,
    pub fp_bytes_per_element: usize,
}

impl RawSpec {
    /// Uniform-attention spec with default block/group sizes.
    pub fn uniform(
        model_id: impl Into<String>,
        num_layers: usize,
        num_kv_heads: usize,
        num_query_heads: usize,
        k_head_dim: usize,
        v_head_dim: usize,
    ) -> Self {
        RawSpec {
            model_id: model_id.into(),
            num_layers,
            num_kv_heads,
            num_query_heads,
            k_head_dim,
            v_head_dim,
            layer_kinds: vec![AttentionKind::Global; num_layers],
            block_tokens: DEFAULT_BLOCK_TOKENS,
            group_size: DEFAULT_GROUP_SIZE,
            fp_bytes_per_element: 2,
        }
    }

    pub fn build(self) -> Result<ModelCacheSpec> {
        ModelCacheSpec::try_from(self)
    }
}

impl TryFrom<RawSpec> for ModelCacheSpec {
    type Error = CacheError;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let bad = |msg: String| Err(CacheError::InvalidArgument(msg));
        let positive = [
            ("num_layers", raw.num_layers),
            ("num_kv_heads", raw.num_kv_heads),
            ("num_query_heads", raw.num_query_heads),
            ("k_head_dim", raw.k_head_dim),
            ("v_head_dim", raw.v_head_dim),
            ("block_tokens", raw.block_tokens),
            ("group_size", raw.group_size),
            ("fp_bytes_per_element", raw.fp_bytes_per_element),
        ];
        for (name, value) in positive {
            if value == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if raw.num_query_heads % raw.num_kv_heads != 0 {
            return bad(format!(
                "num_query_heads {} is not a multiple of num_kv_heads {}",
                raw.num_query_heads, raw.num_kv_heads
            ));
        }
        for (name, dim) in [("k_head_dim", raw.k_head_dim), ("v_head_dim", raw.v_head_dim)] {
            if dim % 8 != 0 {
                return bad(format!("{name} {dim} is not a multiple of 8"));
            }
            if dim % raw.group_size != 0 {
                return bad(format!(
                    "{name} {dim} is not a multiple of group_size {}",
                    raw.group_size
                ));
            }
        }
        if raw.block_tokens % raw.group_size != 0 {
            return bad(format!(
                "block_tokens {} is not a multiple of group_size {}",
                raw.block_tokens, raw.group_size
            ));
        }
        if raw.layer_kinds.len() != raw.num_layers {
            return bad(format!(
                "layer_kinds has {} entries, expected {}",
                raw.layer_kinds.len(),
                raw.num_layers
            ));
        }
        if raw.layer_kinds.iter().any(|k| k.window() == Some(0)) {
            return bad("sliding window must be at least 1 token".into());
        }
        Ok(ModelCacheSpec {
            model_id: raw.model_id,
            num_layers: raw.num_layers,
            num_kv_heads: raw.num_kv_heads,
            num_query_heads: raw.num_query_heads,
            k_head_dim: raw.k_head_dim,
            v_head_dim: raw.v_head_dim,
            layer_kinds: raw.layer_kinds,
            block_tokens: raw.block_tokens,
            group_size: raw.group_size,
            fp_bytes_per_element: raw.fp_bytes_per_element,
        })
    }
}

impl From<ModelCacheSpec> for RawSpec {
    fn from(s: ModelCacheSpec) -> Self {
        RawSpec {
            model_id: s.model_id,
            num_layers: s.num_layers,
            num_kv_heads: s.num_kv_heads,
            num_query_heads: s.num_query_heads,
            k_head_dim: s.k_head_dim,
            v_head_dim: s.v_head_dim,
            layer_kinds: s.layer_kinds,
            block_tokens: s.block_tokens,
            group_size: s.group_size,
            fp_bytes_per_element: s.fp_bytes_per_element,
        }
    }
}

impl ModelCacheSpec {
    pub fn model_id(&self) -> &str {
        &self.model_id
    }
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }
    pub fn num_kv_heads(&self) -> usize {
        self.num_kv_heads
    }
    pub fn num_query_heads(&self) -> usize {
        self.num_query_heads
    }
    /// Query heads sharing each KV head.
    pub fn n_rep(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }
    pub fn k_head_dim(&self) -> usize {
        self.k_head_dim
    }
    pub fn v_head_dim(&self) -> usize {
        self.v_head_dim
    }
    pub fn layer_kinds(&self) -> &[AttentionKind] {
        &self.layer_kinds
    }
    pub fn layer_kind(&self, layer: usize) -> AttentionKind {
        self.layer_kinds[layer]
    }
    pub fn block_tokens(&self) -> usize {
        self.block_tokens
    }
    pub fn group_size(&self) -> usize {
        self.group_size
    }
    pub fn fp_bytes_per_element(&self) -> usize {
        self.fp_bytes_per_element
    }

    pub fn to_raw(&self) -> RawSpec {
        self.clone().into()
    }

    /// Key-sorted compact JSON of every field.
    pub fn canonical_json(&self) -> String {
        canonical::to_canonical_string(self).expect("spec serializes")
    }

    pub fn fingerprint(&self) -> u64 {
        spec_fingerprint(self)
    }
}

/// SHA-256 of the canonical JSON, truncated to the first 8 bytes (big-endian).
/// Stable across processes and platforms, unlike `DefaultHasher`.
pub fn spec_fingerprint(spec: &ModelCacheSpec) -> u64 {
    let digest = Sha256::digest(spec.canonical_json().as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn preset(name: &str) -> Result<ModelCacheSpec> {
    let raw = match name {
        "gemma3-12b" => {
            // 5 local : 1 global, global layers at 5, 11, ..., 47.
            let kinds = (0..48)
                .map(|i| {
                    if i % 6 == 5 {
                        AttentionKind::Global
                    } else {
                        AttentionKind::SlidingWindow { window: 1024 }
                    }
                })
                .collect();
            RawSpec {
                layer_kinds: kinds,
                ..RawSpec::uniform("gemma3-12b", 48, 8, 16, 256, 256)
            }
        }
        // MLA query heads are not used by the cache path; n_rep = 1.
        "deepseek-v2-lite-16b" => RawSpec::uniform("deepseek-v2-lite-16b", 27, 16, 16, 192, 128),
        "llama31-8b" => RawSpec::uniform("llama31-8b", 32, 8, 32, 128, 128),
        // Desk-scale model for scenarios and daemon tests.
        "tiny" => RawSpec {
            layer_kinds: vec![
                AttentionKind::SlidingWindow { window: 64 },
                AttentionKind::SlidingWindow { window: 64 },
                AttentionKind::SlidingWindow { window: 64 },
                AttentionKind::Global,
            ],
            group_size: 32,
            ..RawSpec::uniform("tiny", 4, 2, 4, 32, 32)
        },
        other => return Err(CacheError::NotFound(format!("unknown model preset {other:?}"))),
    };
    raw.build()
}
