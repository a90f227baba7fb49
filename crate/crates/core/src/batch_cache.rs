//! Left-padded batches of several agents' quantized caches.
//!
//! `merge` stacks agents along the batch axis, padding shorter rows at the
//! front so that every row's newest token sits at the same right edge and a
//! decode step appends uniformly. `extract` strips the padding and re-blocks
//! each row. Merged tensors reuse [`QuantizedTensor`] with the head axis
//! holding `batch * kv_heads` rows (row `r` owns heads `r*h .. (r+1)*h`).
//!
//! [`oracle_attention`] is an FP64 reference used to check that batching,
//! padding and masking leave per-agent attention unchanged.

use ndarray::{Array3, Array4, ArrayView4, Axis};

use crate::agent_cache::{AgentCache, KVBlock};
use crate::error::{CacheError, Result};
use crate::model_spec::{AttentionKind, ModelCacheSpec};
use crate::quant_codec::{dequantize_tensor, quantize_tensor, KvRole, QuantizedTensor};

pub const DEFAULT_MAX_BATCH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLayer {
    pub k: QuantizedTensor,
    pub v: QuantizedTensor,
}

/// FP32 update for one layer: K and V shaped `(batch, heads, t_new, dim)`.
#[derive(Debug, Clone)]
pub struct BatchLayerKv {
    pub k: Array4<f32>,
    pub v: Array4<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchCache {
    agent_ids: Vec<String>,
    valid_lens: Vec<usize>,
    t_pad: usize,
    kv_heads: usize,
    layers: Vec<BatchLayer>,
}

/// Stacks `caches` into one left-padded batch. Sources are not modified.
pub fn merge(caches: &[&AgentCache], spec: &ModelCacheSpec, max_batch: usize) -> Result<BatchCache> {
    if caches.is_empty() {
        return Err(CacheError::InvalidArgument("cannot merge an empty list".into()));
    }
    if caches.len() > max_batch {
        return Err(CacheError::InvalidArgument(format!(
            "{} caches exceed max batch {max_batch}",
            caches.len()
        )));
    }
    let fp = spec.fingerprint();
    if let Some(bad) = caches.iter().find(|c| c.spec_fingerprint != fp) {
        return Err(CacheError::SpecMismatch { expected: fp, found: bad.spec_fingerprint });
    }
    let valid_lens: Vec<usize> = caches.iter().map(|c| c.token_count()).collect();
    let t_pad = valid_lens.iter().copied().max().unwrap_or(0);
    let mut layers = Vec::with_capacity(spec.num_layers());
    for layer in 0..spec.num_layers() {
        let rows: Vec<(QuantizedTensor, QuantizedTensor)> = caches
            .iter()
            .map(|c| {
                let (k, v) = c.layer_tensors(layer, spec);
                let pad = t_pad - k.tokens();
                (k.pad_left(pad), v.pad_left(pad))
            })
            .collect();
        let ks: Vec<&QuantizedTensor> = rows.iter().map(|r| &r.0).collect();
        let vs: Vec<&QuantizedTensor> = rows.iter().map(|r| &r.1).collect();
        layers.push(BatchLayer {
            k: QuantizedTensor::stack_heads(&ks)?,
            v: QuantizedTensor::stack_heads(&vs)?,
        });
    }
    Ok(BatchCache {
        agent_ids: caches.iter().map(|c| c.agent_id.clone()).collect(),
        valid_lens,
        t_pad,
        kv_heads: spec.num_kv_heads(),
        layers,
    })
}

impl BatchCache {
    pub fn batch(&self) -> usize {
        self.agent_ids.len()
    }
    pub fn agent_ids(&self) -> &[String] {
        &self.agent_ids
    }
    pub fn valid_lens(&self) -> &[usize] {
        &self.valid_lens
    }
    pub fn t_pad(&self) -> usize {
        self.t_pad
    }
    pub fn pad_start(&self, row: usize) -> usize {
        self.t_pad - self.valid_lens[row]
    }
    pub fn layer(&self, layer: usize) -> &BatchLayer {
        &self.layers[layer]
    }

    /// Quantizes new tokens for every row and appends them at the right edge.
    pub fn update_and_fetch(&mut self, spec: &ModelCacheSpec, new_kv: &[BatchLayerKv]) -> Result<()> {
        if new_kv.len() != self.layers.len() {
            return Err(CacheError::ShapeError(format!(
                "{} layers of KV for a {}-layer batch",
                new_kv.len(),
                self.layers.len()
            )));
        }
        let t_new = new_kv[0].k.dim().2;
        if t_new == 0 {
            return Err(CacheError::ShapeError("update needs at least one token".into()));
        }
        let mut quantized = Vec::with_capacity(new_kv.len());
        for (layer, kv) in new_kv.iter().enumerate() {
            let mut pair = Vec::with_capacity(2);
            for (role, t) in [(KvRole::Key, &kv.k), (KvRole::Value, &kv.v)] {
                let (b, h, n, d) = t.dim();
                if b != self.batch() || h != self.kv_heads || n != t_new || d != role.head_dim(spec) {
                    return Err(CacheError::ShapeError(format!(
                        "layer {layer} {}: got {:?}, want ({}, {}, {t_new}, {})",
                        role.tag(),
                        t.dim(),
                        self.batch(),
                        self.kv_heads,
                        role.head_dim(spec)
                    )));
                }
                let flat = t
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((b * h, n, d))
                    .expect("contiguous");
                pair.push(quantize_tensor(flat.view(), spec.group_size())?);
            }
            quantized.push(pair);
        }
        for (layer, mut pair) in self.layers.iter_mut().zip(quantized) {
            let v = pair.pop().expect("pair");
            let k = pair.pop().expect("pair");
            layer.k = QuantizedTensor::concat_tokens(&[&layer.k, &k])?;
            layer.v = QuantizedTensor::concat_tokens(&[&layer.v, &v])?;
        }
        self.t_pad += t_new;
        for len in &mut self.valid_lens {
            *len += t_new;
        }
        Ok(())
    }

    /// Unpadded tensors of `row` for `layer`.
    pub fn row_tensors(&self, row: usize, layer: usize) -> (QuantizedTensor, QuantizedTensor) {
        let (h0, h1) = (row * self.kv_heads, (row + 1) * self.kv_heads);
        let start = self.pad_start(row);
        let l = &self.layers[layer];
        (
            l.k.slice_heads(h0, h1).slice_tokens(start, self.t_pad),
            l.v.slice_heads(h0, h1).slice_tokens(start, self.t_pad),
        )
    }

    /// Splits the batch back into per-row block lists (`[row][layer][block]`).
    pub fn extract(&self, spec: &ModelCacheSpec) -> Vec<Vec<Vec<KVBlock>>> {
        let bt = spec.block_tokens();
        (0..self.batch())
            .map(|row| {
                (0..self.layers.len())
                    .map(|layer| {
                        let (k, v) = self.row_tensors(row, layer);
                        (0..k.tokens())
                            .step_by(bt)
                            .enumerate()
                            .map(|(block_index, start)| {
                                let end = (start + bt).min(k.tokens());
                                KVBlock {
                                    layer,
                                    block_index,
                                    k: k.slice_tokens(start, end),
                                    v: v.slice_tokens(start, end),
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Visibility of key positions to queries, per batch row. Broadcasts over
/// `(kv_heads, n_rep)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub kind: AttentionKind,
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn is_visible(&self, row: usize, q: usize, k: usize) -> bool {
        self.visible[(row * self.q_len + q) * self.k_len + k]
    }

    /// Additive form: 0 where visible, -inf where masked.
    pub fn additive(&self, row: usize, q: usize, k: usize) -> f64 {
        if self.is_visible(row, q, k) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Queries are right-aligned: query `i` sits at absolute key position
/// `k_len - q_len + i`. A row with valid length `n` has padding in
/// `[0, k_len - n)`.
pub fn build_mask(kind: AttentionKind, q_len: usize, k_len: usize, valid_lens: &[usize]) -> Result<AttentionMask> {
    if q_len > k_len {
        return Err(CacheError::ShapeError(format!("q_len {q_len} exceeds k_len {k_len}")));
    }
    if let Some(&bad) = valid_lens.iter().find(|&&n| n > k_len) {
        return Err(CacheError::ShapeError(format!("valid length {bad} exceeds k_len {k_len}")));
    }
    let mut visible = Vec::with_capacity(valid_lens.len() * q_len * k_len);
    for &valid in valid_lens {
        let pad_start = k_len - valid;
        for i in 0..q_len {
            let pos = k_len - q_len + i;
            for j in 0..k_len {
                let in_window = match kind {
                    AttentionKind::Global => true,
                    AttentionKind::SlidingWindow { window } => j + window > pos,
                };
                visible.push(j <= pos && in_window && j >= pad_start);
            }
        }
    }
    Ok(AttentionMask { kind, batch: valid_lens.len(), q_len, k_len, visible })
}

/// Reference attention over a batch: dequantize, group query heads as
/// `(batch, kv_heads, n_rep, q_len, dim)`, softmax(QK^T / sqrt(d) + mask) V
/// with FP64 accumulation. Queries with no visible key produce zeros.
pub fn oracle_attention(
    q: ArrayView4<'_, f32>,
    batch: &BatchCache,
    spec: &ModelCacheSpec,
    layer: usize,
) -> Result<Array4<f32>> {
    let (b, qh, q_len, dk) = q.dim();
    if layer >= spec.num_layers() {
        return Err(CacheError::ShapeError(format!("layer {layer} out of range")));
    }
    if b != batch.batch() || qh != spec.num_query_heads() || dk != spec.k_head_dim() {
        return Err(CacheError::ShapeError(format!(
            "queries {:?} do not fit batch {} with {} query heads of dim {}",
            q.dim(),
            batch.batch(),
            spec.num_query_heads(),
            spec.k_head_dim()
        )));
    }
    let mask = build_mask(spec.layer_kind(layer), q_len, batch.t_pad(), batch.valid_lens())?;
    let keys = dequantize_tensor(&batch.layer(layer).k);
    let values = dequantize_tensor(&batch.layer(layer).v);
    let (h, n_rep, dv) = (spec.num_kv_heads(), spec.n_rep(), spec.v_head_dim());
    let scale = 1.0 / (dk as f64).sqrt();
    let grouped = q.into_shape_with_order((b, h, n_rep, q_len, dk));
    let grouped = match grouped {
        Ok(v) => v.to_owned(),
        Err(_) => q.as_standard_layout().into_owned().into_shape_with_order((b, h, n_rep, q_len, dk)).expect("contiguous"),
    };
    let mut out = Array4::<f32>::zeros((b, qh, q_len, dv));
    let mut scores = vec![0f64; batch.t_pad()];
    for row in 0..b {
        for g in 0..h {
            let kv_row = row * h + g;
            let k_mat = keys.index_axis(Axis(0), kv_row);
            let v_mat = values.index_axis(Axis(0), kv_row);
            for rep in 0..n_rep {
                for i in 0..q_len {
                    let query = grouped.slice(ndarray::s![row, g, rep, i, ..]);
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = if mask.is_visible(row, i, j) {
                            let dot: f64 = query
                                .iter()
                                .zip(k_mat.row(j))
                                .map(|(&a, &b)| a as f64 * b as f64)
                                .sum();
                            dot * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        max = max.max(*s);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut denom = 0f64;
                    let mut acc = vec![0f64; dv];
                    for (j, &s) in scores.iter().enumerate() {
                        if s == f64::NEG_INFINITY {
                            continue;
                        }
                        let p = (s - max).exp();
                        denom += p;
                        for (a, &v) in acc.iter_mut().zip(v_mat.row(j)) {
                            *a += p * v as f64;
                        }
                    }
                    let head = g * n_rep + rep;
                    for (d, a) in acc.into_iter().enumerate() {
                        out[[row, head, i, d]] = (a / denom) as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Convenience: FP32 `(heads, tokens, dim)` tensors of one agent's layer.
pub fn dequantized_layer(cache: &AgentCache, spec: &ModelCacheSpec, layer: usize) -> (Array3<f32>, Array3<f32>) {
    let (k, v) = cache.layer_tensors(layer, spec);
    (dequantize_tensor(&k), dequantize_tensor(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent_cache::LayerKv;
    use crate::model_spec::RawSpec;

    fn spec() -> ModelCacheSpec {
        RawSpec {
            block_tokens: 8,
            group_size: 8,
            layer_kinds: vec![AttentionKind::Global, AttentionKind::SlidingWindow { window: 3 }],
            ..RawSpec::uniform("b", 2, 2, 4, 8, 16)
        }
        .build()
        .unwrap()
    }

    fn cache(spec: &ModelCacheSpec, id: &str, t: usize) -> AgentCache {
        let mut c = AgentCache::empty(id, spec);
        let kv: Vec<LayerKv> = (0..spec.num_layers())
            .map(|l| LayerKv {
                k: Array3::from_shape_fn((2, t, 8), |(h, i, d)| ((l + h * 3 + i * 5 + d + id.len()) % 13) as f32 / 4.0),
                v: Array3::from_shape_fn((2, t, 16), |(h, i, d)| ((l * 2 + h + i * 7 + d) % 9) as f32 - 4.0),
            })
            .collect();
        c.append(spec, &kv, &vec![0; t], &vec![0; t], "").unwrap();
        c
    }

    #[test]
    fn merge_pads_shorter_rows() {
        let s = spec();
        let a = cache(&s, "a", 10);
        let b = cache(&s, "bb", 30);
        let m = merge(&[&a, &b], &s, 2).unwrap();
        assert_eq!(m.t_pad(), 30);
        assert_eq!(m.pad_start(0), 20);
        assert_eq!(m.pad_start(1), 0);
        let padding = m.layer(0).k.slice_heads(0, 2).slice_tokens(0, 20);
        assert!(padding.packed().iter().all(|&w| w == 0));
        assert!(padding.scales().iter().all(|s| s.to_f32() == 1.0));
        assert!(padding.biases().iter().all(|b| b.to_f32() == 0.0));
        let rows = m.extract(&s);
        assert_eq!(rows[0], a.blocks);
        assert_eq!(rows[1], b.blocks);
    }

    #[test]
    fn merge_rejects_bad_input() {
        let s = spec();
        let a = cache(&s, "a", 3);
        assert!(matches!(merge(&[], &s, 2), Err(CacheError::InvalidArgument(_))));
        assert!(matches!(merge(&[&a, &a, &a], &s, 2), Err(CacheError::InvalidArgument(_))));
        let mut other = a.clone();
        other.spec_fingerprint ^= 1;
        assert!(matches!(merge(&[&a, &other], &s, 2), Err(CacheError::SpecMismatch { .. })));
    }

    #[test]
    fn single_visible_position_returns_value() {
        let s = RawSpec { group_size: 8, block_tokens: 8, ..RawSpec::uniform("one", 1, 1, 1, 8, 8) }
            .build()
            .unwrap();
        let mut c = AgentCache::empty("a", &s);
        let ones = Array3::from_elem((1, 1, 8), 1.0f32);
        c.append(&s, &[LayerKv { k: ones.clone(), v: ones }], &[1], &[0], "x").unwrap();
        let m = merge(&[&c], &s, 1).unwrap();
        let q = Array4::from_elem((1, 1, 1, 8), 1.0f32);
        let out = oracle_attention(q.view(), &m, &s, 0).unwrap();
        assert!(out.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn mask_shapes() {
        let m = build_mask(AttentionKind::Global, 4, 4, &[4]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.is_visible(0, i, j), j <= i);
            }
        }
        let m = build_mask(AttentionKind::SlidingWindow { window: 2 }, 4, 4, &[4]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.is_visible(0, i, j), j <= i && j + 1 >= i);
            }
        }
        let m = build_mask(AttentionKind::Global, 2, 6, &[3]).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!(!m.is_visible(0, i, j));
            }
            assert!(m.is_visible(0, i, 3));
        }
        assert_eq!(m.additive(0, 0, 0), f64::NEG_INFINITY);
        assert!(build_mask(AttentionKind::Global, 5, 4, &[4]).is_err());
    }

    #[test]
    fn update_appends_to_every_row() {
        let s = spec();
        let a = cache(&s, "a", 5);
        let b = cache(&s, "bb", 9);
        let mut m = merge(&[&a, &b], &s, 2).unwrap();
        let upd: Vec<BatchLayerKv> = (0..2)
            .map(|_| BatchLayerKv {
                k: Array4::from_elem((2, 2, 1, 8), 0.5),
                v: Array4::from_elem((2, 2, 1, 16), -0.5),
            })
            .collect();
        m.update_and_fetch(&s, &upd).unwrap();
        assert_eq!(m.valid_lens(), &[6, 10]);
        assert_eq!(m.t_pad(), 10);
        let bad = vec![BatchLayerKv { k: Array4::zeros((2, 2, 1, 8)), v: Array4::zeros((2, 2, 1, 8)) }; 2];
        assert!(matches!(m.update_and_fetch(&s, &bad), Err(CacheError::ShapeError(_))));
    }
}
