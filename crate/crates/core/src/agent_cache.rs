//! Per-agent quantized cache: per-layer block lists plus transcript metadata.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CacheError, Result};
use crate::model_spec::ModelCacheSpec;
use crate::quant_codec::{quantize_for_spec, KvRole, QuantizedTensor};

/// FP32 key and value tensors for one layer, each `(heads, tokens, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub k: Array3<f32>,
    pub v: Array3<f32>,
}

impl LayerKv {
    pub fn tokens(&self) -> usize {
        self.k.dim().1
    }
}

/// One block of up to `block_tokens` tokens for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KVBlock {
    pub layer: usize,
    pub block_index: usize,
    pub k: QuantizedTensor,
    pub v: QuantizedTensor,
}

impl KVBlock {
    pub fn token_count(&self) -> usize {
        self.k.tokens()
    }

    pub fn nbytes(&self) -> u64 {
        self.k.nbytes() + self.v.nbytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheState {
    /// Resident in memory.
    Hot,
    /// Persisted on disk only.
    Warm,
    /// No cache anywhere.
    Cold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentCache {
    pub agent_id: String,
    pub spec_fingerprint: u64,
    /// `blocks[layer]` in token order.
    pub blocks: Vec<Vec<KVBlock>>,
    pub transcript_text: String,
    pub token_ids: Vec<u32>,
    /// Code-point offset where each token begins in `transcript_text`.
    pub char_offsets: Vec<usize>,
    pub last_touched: u64,
    pub state: CacheState,
}

impl AgentCache {
    pub fn empty(agent_id: impl Into<String>, spec: &ModelCacheSpec) -> Self {
        AgentCache {
            agent_id: agent_id.into(),
            spec_fingerprint: spec.fingerprint(),
            blocks: vec![Vec::new(); spec.num_layers()],
            transcript_text: String::new(),
            token_ids: Vec::new(),
            char_offsets: Vec::new(),
            last_touched: 0,
            state: CacheState::Hot,
        }
    }

    pub fn token_count(&self) -> usize {
        self.token_ids.len()
    }

    pub fn transcript_chars(&self) -> usize {
        self.transcript_text.chars().count()
    }

    /// Token counts of layer 0's blocks (identical across layers).
    pub fn block_token_counts(&self) -> Vec<usize> {
        self.blocks
            .first()
            .map(|bs| bs.iter().map(KVBlock::token_count).collect())
            .unwrap_or_default()
    }

    pub fn nbytes(&self) -> u64 {
        self.blocks.iter().flatten().map(KVBlock::nbytes).sum()
    }

    /// Checks every structural invariant against `spec`.
    pub fn validate(&self, spec: &ModelCacheSpec) -> Result<()> {
        if self.spec_fingerprint != spec.fingerprint() {
            return Err(CacheError::SpecMismatch {
                expected: spec.fingerprint(),
                found: self.spec_fingerprint,
            });
        }
        let shape = |msg: String| Err(CacheError::ShapeError(msg));
        if self.blocks.len() != spec.num_layers() {
            return shape(format!("{} layers, spec has {}", self.blocks.len(), spec.num_layers()));
        }
        let t = self.token_ids.len();
        let bt = spec.block_tokens();
        for (layer, blocks) in self.blocks.iter().enumerate() {
            let mut total = 0;
            for (i, b) in blocks.iter().enumerate() {
                let n = b.token_count();
                if b.layer != layer || b.block_index != i {
                    return shape(format!("block L{layer}_B{i} is labelled L{}_B{}", b.layer, b.block_index));
                }
                if n == 0 || n > bt || (i + 1 < blocks.len() && n != bt) {
                    return shape(format!("block L{layer}_B{i} holds {n} tokens"));
                }
                if b.v.tokens() != n {
                    return shape(format!("block L{layer}_B{i}: K has {n} tokens, V {}", b.v.tokens()));
                }
                for (q, role) in [(&b.k, KvRole::Key), (&b.v, KvRole::Value)] {
                    if q.heads() != spec.num_kv_heads()
                        || q.dim() != role.head_dim(spec)
                        || q.group_size() != spec.group_size()
                    {
                        return shape(format!("block L{layer}_B{i} {} has wrong layout", role.tag()));
                    }
                }
                total += n;
            }
            if total != t {
                return shape(format!("layer {layer} holds {total} tokens, transcript has {t}"));
            }
        }
        if self.char_offsets.len() != t {
            return shape(format!("{} char offsets for {t} tokens", self.char_offsets.len()));
        }
        if let Some(&first) = self.char_offsets.first() {
            if first != 0 {
                return shape("first char offset is not 0".into());
            }
        }
        if self.char_offsets.windows(2).any(|w| w[0] > w[1]) {
            return shape("char offsets decrease".into());
        }
        if let Some(&last) = self.char_offsets.last() {
            if last > self.transcript_chars() {
                return shape("char offset past end of transcript".into());
            }
        }
        Ok(())
    }

    /// Quantizes and appends tokens to every layer, filling each tail block
    /// before opening a new one. `char_offsets` are relative to `text`.
    /// On error the cache is unchanged.
    pub fn append(
        &mut self,
        spec: &ModelCacheSpec,
        kv: &[LayerKv],
        token_ids: &[u32],
        char_offsets: &[usize],
        text: &str,
    ) -> Result<()> {
        if kv.len() != spec.num_layers() {
            return Err(CacheError::ShapeError(format!(
                "{} layers of KV, spec has {}",
                kv.len(),
                spec.num_layers()
            )));
        }
        let t_new = token_ids.len();
        if char_offsets.len() != t_new {
            return Err(CacheError::ShapeError(format!(
                "{} char offsets for {t_new} tokens",
                char_offsets.len()
            )));
        }
        let text_chars = text.chars().count();
        if char_offsets.windows(2).any(|w| w[0] > w[1])
            || char_offsets.last().is_some_and(|&o| o > text_chars)
            || (self.token_ids.is_empty() && char_offsets.first().is_some_and(|&o| o != 0))
        {
            return Err(CacheError::InvalidArgument("inconsistent char offsets".into()));
        }
        let mut quantized = Vec::with_capacity(kv.len());
        for (layer, lkv) in kv.iter().enumerate() {
            if lkv.k.dim().1 != t_new || lkv.v.dim().1 != t_new {
                return Err(CacheError::ShapeError(format!(
                    "layer {layer}: K/V carry {}/{} tokens, expected {t_new}",
                    lkv.k.dim().1,
                    lkv.v.dim().1
                )));
            }
            let k = quantize_for_spec(lkv.k.view(), spec, KvRole::Key)?;
            let v = quantize_for_spec(lkv.v.view(), spec, KvRole::Value)?;
            quantized.push((k, v));
        }
        for (layer, (k, v)) in quantized.into_iter().enumerate() {
            append_layer(&mut self.blocks[layer], layer, spec.block_tokens(), &k, &v);
        }
        let base = self.transcript_chars();
        self.transcript_text.push_str(text);
        self.token_ids.extend_from_slice(token_ids);
        self.char_offsets.extend(char_offsets.iter().map(|o| base + o));
        Ok(())
    }

    /// Appends already-quantized rows (used when splitting a batch back out).
    pub fn append_quantized(
        &mut self,
        spec: &ModelCacheSpec,
        layers: &[(QuantizedTensor, QuantizedTensor)],
    ) {
        for (layer, (k, v)) in layers.iter().enumerate() {
            append_layer(&mut self.blocks[layer], layer, spec.block_tokens(), k, v);
        }
    }

    /// Keeps the first `tokens` tokens and the transcript text before token `tokens`.
    pub fn truncate(&mut self, tokens: usize) {
        if tokens >= self.token_count() {
            return;
        }
        let char_end = self.char_offsets[tokens];
        for layer in &mut self.blocks {
            let mut kept = Vec::new();
            let mut remaining = tokens;
            for b in layer.drain(..) {
                if remaining == 0 {
                    break;
                }
                let n = b.token_count().min(remaining);
                remaining -= n;
                kept.push(if n == b.token_count() {
                    b
                } else {
                    KVBlock { k: b.k.slice_tokens(0, n), v: b.v.slice_tokens(0, n), ..b }
                });
            }
            *layer = kept;
        }
        let byte_end = self
            .transcript_text
            .char_indices()
            .nth(char_end)
            .map_or(self.transcript_text.len(), |(i, _)| i);
        self.transcript_text.truncate(byte_end);
        self.token_ids.truncate(tokens);
        self.char_offsets.truncate(tokens);
    }

    /// Concatenation of a layer's blocks.
    pub fn layer_tensors(&self, layer: usize, spec: &ModelCacheSpec) -> (QuantizedTensor, QuantizedTensor) {
        let blocks = &self.blocks[layer];
        if blocks.is_empty() {
            let h = spec.num_kv_heads();
            let g = spec.group_size();
            return (
                QuantizedTensor::empty(h, spec.k_head_dim(), g).expect("spec layout"),
                QuantizedTensor::empty(h, spec.v_head_dim(), g).expect("spec layout"),
            );
        }
        let ks: Vec<&QuantizedTensor> = blocks.iter().map(|b| &b.k).collect();
        let vs: Vec<&QuantizedTensor> = blocks.iter().map(|b| &b.v).collect();
        (
            QuantizedTensor::concat_tokens(&ks).expect("blocks share layout"),
            QuantizedTensor::concat_tokens(&vs).expect("blocks share layout"),
        )
    }

    /// SHA-256 over every block's packed words, scales and biases.
    pub fn blocks_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for b in self.blocks.iter().flatten() {
            h.update((b.layer as u64).to_le_bytes());
            h.update((b.block_index as u64).to_le_bytes());
            for q in [&b.k, &b.v] {
                h.update((q.tokens() as u64).to_le_bytes());
                for w in q.packed() {
                    h.update(w.to_le_bytes());
                }
                for s in q.scales().iter().chain(q.biases()) {
                    h.update(s.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    /// Digest over blocks and every metadata field except the LRU tick and state.
    pub fn content_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.agent_id.as_bytes());
        h.update([0]);
        h.update(self.spec_fingerprint.to_le_bytes());
        h.update(self.blocks_digest());
        h.update((self.transcript_text.len() as u64).to_le_bytes());
        h.update(self.transcript_text.as_bytes());
        for id in &self.token_ids {
            h.update(id.to_le_bytes());
        }
        for o in &self.char_offsets {
            h.update((*o as u64).to_le_bytes());
        }
        h.finalize().into()
    }
}

fn append_layer(
    blocks: &mut Vec<KVBlock>,
    layer: usize,
    block_tokens: usize,
    k: &QuantizedTensor,
    v: &QuantizedTensor,
) {
    let total = k.tokens();
    let mut pos = 0;
    if let Some(tail) = blocks.last_mut() {
        let room = block_tokens - tail.token_count();
        let take = room.min(total);
        if take > 0 {
            tail.k = QuantizedTensor::concat_tokens(&[&tail.k, &k.slice_tokens(0, take)])
                .expect("same layout");
            tail.v = QuantizedTensor::concat_tokens(&[&tail.v, &v.slice_tokens(0, take)])
                .expect("same layout");
            pos = take;
        }
    }
    while pos < total {
        let end = (pos + block_tokens).min(total);
        blocks.push(KVBlock {
            layer,
            block_index: blocks.len(),
            k: k.slice_tokens(pos, end),
            v: v.slice_tokens(pos, end),
        });
        pos = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::RawSpec;

    fn spec() -> ModelCacheSpec {
        RawSpec { block_tokens: 16, group_size: 8, ..RawSpec::uniform("t", 2, 1, 2, 8, 16) }
            .build()
            .unwrap()
    }

    fn kv(spec: &ModelCacheSpec, t: usize, seed: f32) -> Vec<LayerKv> {
        (0..spec.num_layers())
            .map(|l| LayerKv {
                k: Array3::from_shape_fn((1, t, 8), |(_, i, d)| seed + (l * 7 + i * 3 + d) as f32),
                v: Array3::from_shape_fn((1, t, 16), |(_, i, d)| seed - (l + i + d) as f32),
            })
            .collect()
    }

    fn words(n: usize) -> (Vec<u32>, Vec<usize>, String) {
        let text: String = (0..n).map(|i| format!(" w{}", i % 10)).collect();
        ((0..n as u32).collect(), (0..n).map(|i| i * 3).collect(), text)
    }

    #[test]
    fn tail_fills_before_new_block() {
        let s = spec();
        let mut c = AgentCache::empty("a", &s);
        let (ids, offs, text) = words(20);
        c.append(&s, &kv(&s, 20, 0.0), &ids, &offs, &text).unwrap();
        assert_eq!(c.block_token_counts(), vec![16, 4]);
        let (ids, offs, text) = words(12);
        c.append(&s, &kv(&s, 12, 1.0), &ids, &offs, &text).unwrap();
        assert_eq!(c.block_token_counts(), vec![16, 16]);
        c.validate(&s).unwrap();
        assert_eq!(c.char_offsets[20], 60);
    }

    #[test]
    fn failed_append_leaves_cache_untouched() {
        let s = spec();
        let mut c = AgentCache::empty("a", &s);
        let (ids, offs, text) = words(3);
        c.append(&s, &kv(&s, 3, 0.0), &ids, &offs, &text).unwrap();
        let before = c.clone();
        let mut bad = kv(&s, 2, 0.0);
        bad[1].v = Array3::zeros((1, 2, 8));
        let (ids, offs, text) = words(2);
        assert!(c.append(&s, &bad, &ids, &offs, &text).is_err());
        assert_eq!(c, before);
    }

    #[test]
    fn truncate_keeps_prefix() {
        let s = spec();
        let mut c = AgentCache::empty("a", &s);
        let (ids, offs, text) = words(40);
        c.append(&s, &kv(&s, 40, 0.0), &ids, &offs, &text).unwrap();
        let mut short = AgentCache::empty("a", &s);
        let (ids, offs, text) = words(16);
        short.append(&s, &kv(&s, 16, 0.0), &ids, &offs, &text).unwrap();
        c.truncate(16);
        assert_eq!(c, short);
        c.validate(&s).unwrap();
    }
}
