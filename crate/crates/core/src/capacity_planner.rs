//! Closed-form per-agent cache sizes and how many agents fit a byte budget.

use serde::{Deserialize, Serialize};

use crate::error::{CacheError, Result};
use crate::model_spec::ModelCacheSpec;
use crate::quant_codec::{fp16_bytes, q4_bytes};

pub const GIB: f64 = (1u64 << 30) as f64;
pub const MIB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub context_tokens: usize,
    pub fp16_bytes_per_agent: u64,
    pub q4_bytes_per_agent: u64,
    /// `None` when an agent costs zero bytes (unbounded).
    pub fp16_agents_fit: Option<u64>,
    pub q4_agents_fit: Option<u64>,
    /// Q4 bytes with the context rounded up to whole blocks, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q4_block_rounded_bytes: Option<u64>,
}

fn fits(budget: u64, per_agent: u64) -> Option<u64> {
    (per_agent > 0).then(|| budget / per_agent)
}

pub fn capacity_table(
    spec: &ModelCacheSpec,
    budget_bytes: u64,
    contexts: &[usize],
    block_rounded: bool,
) -> Result<Vec<CapacityRow>> {
    if budget_bytes == 0 {
        return Err(CacheError::InvalidArgument("budget must be positive".into()));
    }
    Ok(contexts
        .iter()
        .map(|&n| {
            let fp16 = fp16_bytes(spec, n);
            let q4 = q4_bytes(spec, n);
            CapacityRow {
                context_tokens: n,
                fp16_bytes_per_agent: fp16,
                q4_bytes_per_agent: q4,
                fp16_agents_fit: fits(budget_bytes, fp16),
                q4_agents_fit: fits(budget_bytes, q4),
                q4_block_rounded_bytes: block_rounded
                    .then(|| q4_bytes(spec, n.div_ceil(spec.block_tokens()) * spec.block_tokens())),
            }
        })
        .collect())
}

fn split_unit(s: &str) -> (&str, String) {
    let s = s.trim();
    let at = s.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(s.len());
    (s[..at].trim(), s[at..].trim().to_ascii_lowercase())
}

/// Parses a byte budget such as `10.2GB`, `512MiB` or `1048576`. Units are
/// binary: `GB` and `GiB` both mean 2^30 bytes.
pub fn parse_budget(s: &str) -> Result<u64> {
    let (num, unit) = split_unit(s);
    let value: f64 = num.parse().map_err(|_| CacheError::InvalidArgument(format!("bad budget {s:?}")))?;
    let mult = match unit.as_str() {
        "" | "b" => 1.0,
        "k" | "kb" | "kib" => 1024.0,
        "m" | "mb" | "mib" => MIB,
        "g" | "gb" | "gib" => GIB,
        _ => return Err(CacheError::InvalidArgument(format!("unknown unit in budget {s:?}"))),
    };
    let bytes = (value * mult).floor();
    if !bytes.is_finite() || bytes <= 0.0 {
        return Err(CacheError::InvalidArgument(format!("budget {s:?} must be positive")));
    }
    Ok(bytes as u64)
}

/// Parses a context length such as `4k` (4096) or `300`.
pub fn parse_context(s: &str) -> Result<usize> {
    let (num, unit) = split_unit(s);
    let n: usize = num.parse().map_err(|_| CacheError::InvalidArgument(format!("bad context {s:?}")))?;
    match unit.as_str() {
        "" => Ok(n),
        "k" => Ok(n * 1024),
        _ => Err(CacheError::InvalidArgument(format!("unknown unit in context {s:?}"))),
    }
}

pub fn parse_contexts(s: &str) -> Result<Vec<usize>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(parse_context).collect()
}

/// `4096` → `4K`; other values print as plain numbers.
pub fn context_label(n: usize) -> String {
    if n > 0 && n % 1024 == 0 {
        format!("{}K", n / 1024)
    } else {
        n.to_string()
    }
}
