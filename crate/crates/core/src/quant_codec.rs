//! 4-bit group-affine quantization.
//!
//! Groups run along the last (head-dim) axis. Each group of `g` FP32 values
//! becomes `g` 4-bit codes plus one bfloat16 scale and one bfloat16 bias:
//!
//! ```text
//! bias  = bf16(min)
//! scale = bf16((max - min) / 15)          (1 when max == min)
//! code  = clamp(round_half_even((v - bias) / scale), 0, 15)
//! v'    = scale * code + bias
//! ```
//!
//! Codes are packed eight per `u32`, element `j` of a word in bits
//! `[4j, 4j + 4)`.

use half::bf16;
use ndarray::{Array3, ArrayView3};

use crate::error::{CacheError, Result};
use crate::model_spec::ModelCacheSpec;

pub const CODES_PER_WORD: usize = 8;
pub const MAX_CODE: u8 = 15;

/// One quantized group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGroup {
    pub codes: Vec<u8>,
    pub scale: bf16,
    pub bias: bf16,
}

/// Quantizes a single group of values. The group length is the slice length.
pub fn quantize_group(values: &[f32]) -> Result<QuantGroup> {
    let mut codes = vec![0u8; values.len()];
    let (scale, bias) = quantize_group_into(values, &mut codes)?;
    Ok(QuantGroup { codes, scale, bias })
}

fn quantize_group_into(values: &[f32], codes: &mut [u8]) -> Result<(bf16, bf16)> {
    debug_assert_eq!(values.len(), codes.len());
    if values.is_empty() {
        return Err(CacheError::InvalidArgument("empty quantization group".into()));
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(CacheError::InvalidValue(format!("non-finite value {v} in group")));
        }
        min = min.min(v);
        max = max.max(v);
    }
    let bias = bf16::from_f32(min);
    if max == min {
        codes.fill(0);
        return Ok((bf16::ONE, bias));
    }
    let step = (max - min) / 15.0;
    if !step.is_finite() {
        return Err(CacheError::InvalidValue(format!(
            "group range [{min}, {max}] overflows f32"
        )));
    }
    let scale = bf16::from_f32(step);
    if !scale.is_finite() {
        return Err(CacheError::InvalidValue(format!(
            "group scale {step} overflows bfloat16"
        )));
    }
    if scale == bf16::ZERO {
        // Range below the smallest bfloat16 subnormal: behaves as a constant group.
        codes.fill(0);
        return Ok((bf16::ONE, bias));
    }
    let (s, b) = (scale.to_f32(), bias.to_f32());
    for (c, &v) in codes.iter_mut().zip(values) {
        let q = ((v - b) / s).round_ties_even();
        *c = q.clamp(0.0, MAX_CODE as f32) as u8;
    }
    Ok((scale, bias))
}

#[inline]
pub fn dequantize_code(code: u8, scale: bf16, bias: bf16) -> f32 {
    scale.to_f32() * code as f32 + bias.to_f32()
}

/// Packs 4-bit codes, eight per word. `codes.len()` must be a multiple of 8.
pub fn pack_codes(codes: &[u8]) -> Vec<u32> {
    assert_eq!(codes.len() % CODES_PER_WORD, 0, "code count must be a multiple of 8");
    codes.chunks_exact(CODES_PER_WORD).map(pack_word).collect()
}

#[inline]
fn pack_word(codes: &[u8]) -> u32 {
    codes
        .iter()
        .enumerate()
        .fold(0u32, |w, (j, &c)| w | (((c & 0xF) as u32) << (4 * j)))
}

pub fn unpack_codes(words: &[u32]) -> Vec<u8> {
    words
        .iter()
        .flat_map(|&w| (0..CODES_PER_WORD).map(move |j| ((w >> (4 * j)) & 0xF) as u8))
        .collect()
}

/// Packed 4-bit tensor with logical shape `(heads, tokens, dim)`.
///
/// Storage is row-major over `(head, token)`: `packed` holds `dim / 8` words
/// per row and `scales`/`biases` hold `dim / group_size` entries per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    heads: usize,
    tokens: usize,
    dim: usize,
    group_size: usize,
    packed: Vec<u32>,
    scales: Vec<bf16>,
    biases: Vec<bf16>,
}

fn check_layout(dim: usize, group_size: usize) -> Result<()> {
    if group_size == 0 || dim == 0 {
        return Err(CacheError::ShapeError("dim and group_size must be positive".into()));
    }
    if dim % CODES_PER_WORD != 0 || dim % group_size != 0 {
        return Err(CacheError::ShapeError(format!(
            "dim {dim} must be a multiple of 8 and of group_size {group_size}"
        )));
    }
    Ok(())
}

impl QuantizedTensor {
    /// Zero-token tensor.
    pub fn empty(heads: usize, dim: usize, group_size: usize) -> Result<Self> {
        Self::filler(heads, 0, dim, group_size)
    }

    /// Padding tensor: codes 0, scale 1, bias 0 (dequantizes to exactly 0).
    pub fn filler(heads: usize, tokens: usize, dim: usize, group_size: usize) -> Result<Self> {
        check_layout(dim, group_size)?;
        let rows = heads * tokens;
        Ok(QuantizedTensor {
            heads,
            tokens,
            dim,
            group_size,
            packed: vec![0; rows * dim / CODES_PER_WORD],
            scales: vec![bf16::ONE; rows * dim / group_size],
            biases: vec![bf16::ZERO; rows * dim / group_size],
        })
    }

    pub fn from_parts(
        heads: usize,
        tokens: usize,
        dim: usize,
        group_size: usize,
        packed: Vec<u32>,
        scales: Vec<bf16>,
        biases: Vec<bf16>,
    ) -> Result<Self> {
        check_layout(dim, group_size)?;
        let rows = heads * tokens;
        if packed.len() != rows * dim / CODES_PER_WORD {
            return Err(CacheError::ShapeError(format!(
                "packed has {} words, expected {}",
                packed.len(),
                rows * dim / CODES_PER_WORD
            )));
        }
        let groups = rows * dim / group_size;
        if scales.len() != groups || biases.len() != groups {
            return Err(CacheError::ShapeError(format!(
                "scales/biases have {}/{} entries, expected {groups}",
                scales.len(),
                biases.len()
            )));
        }
        Ok(QuantizedTensor { heads, tokens, dim, group_size, packed, scales, biases })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn tokens(&self) -> usize {
        self.tokens
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn group_size(&self) -> usize {
        self.group_size
    }
    pub fn words_per_row(&self) -> usize {
        self.dim / CODES_PER_WORD
    }
    pub fn groups_per_row(&self) -> usize {
        self.dim / self.group_size
    }
    pub fn packed(&self) -> &[u32] {
        &self.packed
    }
    pub fn scales(&self) -> &[bf16] {
        &self.scales
    }
    pub fn biases(&self) -> &[bf16] {
        &self.biases
    }

    /// Bytes held: packed words plus bfloat16 scales and biases.
    pub fn nbytes(&self) -> u64 {
        (self.packed.len() * 4 + self.scales.len() * 2 + self.biases.len() * 2) as u64
    }

    pub fn code(&self, head: usize, token: usize, i: usize) -> u8 {
        let row = head * self.tokens + token;
        let w = self.packed[row * self.words_per_row() + i / CODES_PER_WORD];
        ((w >> (4 * (i % CODES_PER_WORD))) & 0xF) as u8
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.dim == other.dim && self.group_size == other.group_size
    }

    /// Copies tokens `[start, end)` of every head.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.tokens, "token slice out of range");
        let (w, g) = (self.words_per_row(), self.groups_per_row());
        let n = end - start;
        let mut out = Self::with_capacity(self.heads, n, self.dim, self.group_size);
        for h in 0..self.heads {
            let r0 = h * self.tokens + start;
            out.packed.extend_from_slice(&self.packed[r0 * w..(r0 + n) * w]);
            out.scales.extend_from_slice(&self.scales[r0 * g..(r0 + n) * g]);
            out.biases.extend_from_slice(&self.biases[r0 * g..(r0 + n) * g]);
        }
        out
    }

    /// Copies heads `[start, end)`.
    pub fn slice_heads(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.heads, "head slice out of range");
        let (w, g) = (self.words_per_row(), self.groups_per_row());
        let (r0, r1) = (start * self.tokens, end * self.tokens);
        QuantizedTensor {
            heads: end - start,
            tokens: self.tokens,
            dim: self.dim,
            group_size: self.group_size,
            packed: self.packed[r0 * w..r1 * w].to_vec(),
            scales: self.scales[r0 * g..r1 * g].to_vec(),
            biases: self.biases[r0 * g..r1 * g].to_vec(),
        }
    }

    fn with_capacity(heads: usize, tokens: usize, dim: usize, group_size: usize) -> Self {
        let rows = heads * tokens;
        QuantizedTensor {
            heads,
            tokens,
            dim,
            group_size,
            packed: Vec::with_capacity(rows * dim / CODES_PER_WORD),
            scales: Vec::with_capacity(rows * dim / group_size),
            biases: Vec::with_capacity(rows * dim / group_size),
        }
    }

    /// Concatenates along the token axis. All parts must share heads and layout.
    pub fn concat_tokens(parts: &[&QuantizedTensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| CacheError::InvalidArgument("nothing to concatenate".into()))?;
        for p in parts {
            if p.heads != first.heads || !p.same_layout(first) {
                return Err(CacheError::ShapeError(format!(
                    "cannot concatenate ({}, _, {}) with ({}, _, {})",
                    first.heads, first.dim, p.heads, p.dim
                )));
            }
        }
        let tokens = parts.iter().map(|p| p.tokens).sum();
        let (w, g) = (first.words_per_row(), first.groups_per_row());
        let mut out = Self::with_capacity(first.heads, tokens, first.dim, first.group_size);
        for h in 0..first.heads {
            for p in parts {
                let (r0, r1) = (h * p.tokens, (h + 1) * p.tokens);
                out.packed.extend_from_slice(&p.packed[r0 * w..r1 * w]);
                out.scales.extend_from_slice(&p.scales[r0 * g..r1 * g]);
                out.biases.extend_from_slice(&p.biases[r0 * g..r1 * g]);
            }
        }
        Ok(out)
    }

    /// Concatenates along the head axis. All parts must share tokens and layout.
    pub fn stack_heads(parts: &[&QuantizedTensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| CacheError::InvalidArgument("nothing to stack".into()))?;
        if parts.iter().any(|p| p.tokens != first.tokens || !p.same_layout(first)) {
            return Err(CacheError::ShapeError("stacked tensors differ in tokens or dim".into()));
        }
        let heads = parts.iter().map(|p| p.heads).sum();
        let mut out = Self::with_capacity(heads, first.tokens, first.dim, first.group_size);
        for p in parts {
            out.packed.extend_from_slice(&p.packed);
            out.scales.extend_from_slice(&p.scales);
            out.biases.extend_from_slice(&p.biases);
        }
        Ok(out)
    }

    /// Prepends `n` filler tokens to every head.
    pub fn pad_left(&self, n: usize) -> Self {
        if n == 0 {
            return self.clone();
        }
        let pad = Self::filler(self.heads, n, self.dim, self.group_size).expect("layout checked");
        Self::concat_tokens(&[&pad, self]).expect("same layout")
    }
}

/// Quantizes a `(heads, tokens, dim)` tensor group-wise along `dim`.
pub fn quantize_tensor(values: ArrayView3<'_, f32>, group_size: usize) -> Result<QuantizedTensor> {
    let (heads, tokens, dim) = values.dim();
    check_layout(dim, group_size)?;
    let values = values.as_standard_layout();
    let flat = values.as_slice().expect("standard layout");
    let rows = heads * tokens;
    let mut packed = Vec::with_capacity(rows * dim / CODES_PER_WORD);
    let mut scales = Vec::with_capacity(rows * dim / group_size);
    let mut biases = Vec::with_capacity(rows * dim / group_size);
    let mut codes = vec![0u8; dim];
    for row in flat.chunks_exact(dim) {
        for (vals, out) in row.chunks_exact(group_size).zip(codes.chunks_exact_mut(group_size)) {
            let (s, b) = quantize_group_into(vals, out)?;
            scales.push(s);
            biases.push(b);
        }
        packed.extend(codes.chunks_exact(CODES_PER_WORD).map(pack_word));
    }
    Ok(QuantizedTensor { heads, tokens, dim, group_size, packed, scales, biases })
}

/// Which half of a layer's cache a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvRole {
    Key,
    Value,
}

impl KvRole {
    pub fn head_dim(self, spec: &ModelCacheSpec) -> usize {
        match self {
            KvRole::Key => spec.k_head_dim(),
            KvRole::Value => spec.v_head_dim(),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            KvRole::Key => "K",
            KvRole::Value => "V",
        }
    }
}

/// Quantizes a key or value tensor after checking heads and head dim against `spec`.
pub fn quantize_for_spec(
    values: ArrayView3<'_, f32>,
    spec: &ModelCacheSpec,
    role: KvRole,
) -> Result<QuantizedTensor> {
    let (heads, _, dim) = values.dim();
    if heads != spec.num_kv_heads() || dim != role.head_dim(spec) {
        return Err(CacheError::ShapeError(format!(
            "{} tensor has heads={heads} dim={dim}, spec wants heads={} dim={}",
            role.tag(),
            spec.num_kv_heads(),
            role.head_dim(spec)
        )));
    }
    quantize_tensor(values, spec.group_size())
}

pub fn dequantize_tensor(q: &QuantizedTensor) -> Array3<f32> {
    let (w, g) = (q.words_per_row(), q.groups_per_row());
    let mut out = Vec::with_capacity(q.heads * q.tokens * q.dim);
    for row in 0..q.heads * q.tokens {
        let words = &q.packed[row * w..(row + 1) * w];
        for (wi, &word) in words.iter().enumerate() {
            for j in 0..CODES_PER_WORD {
                let i = wi * CODES_PER_WORD + j;
                let gi = row * g + i / q.group_size;
                let code = ((word >> (4 * j)) & 0xF) as u8;
                out.push(dequantize_code(code, q.scales[gi], q.biases[gi]));
            }
        }
    }
    Array3::from_shape_vec((q.heads, q.tokens, q.dim), out).expect("shape matches")
}

/// Bytes of one quantized `(heads, tokens, dim)` tensor.
pub fn q4_tensor_bytes(heads: usize, tokens: usize, dim: usize, group_size: usize) -> u64 {
    let elems = (heads * tokens * dim) as u64;
    elems / 2 + 4 * elems / group_size as u64
}

/// FP16 bytes for K+V over all layers at `tokens` context.
pub fn fp16_bytes(spec: &ModelCacheSpec, tokens: usize) -> u64 {
    let per_layer = spec.num_kv_heads() * (spec.k_head_dim() + spec.v_head_dim()) * tokens;
    (spec.num_layers() * per_layer * spec.fp_bytes_per_element()) as u64
}

/// Q4 bytes for K+V in one layer.
pub fn q4_layer_bytes(spec: &ModelCacheSpec, tokens: usize) -> u64 {
    let h = spec.num_kv_heads();
    let g = spec.group_size();
    q4_tensor_bytes(h, tokens, spec.k_head_dim(), g) + q4_tensor_bytes(h, tokens, spec.v_head_dim(), g)
}

/// Q4 bytes for K+V over all layers at `tokens` context.
pub fn q4_bytes(spec: &ModelCacheSpec, tokens: usize) -> u64 {
    spec.num_layers() as u64 * q4_layer_bytes(spec, tokens)
}

/// Q4/FP16 size ratio for group size `g`: `(1 + 8/g) / 4`.
pub fn memory_ratio(group_size: usize) -> f64 {
    (1.0 + 8.0 / group_size as f64) / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::preset;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn constant_group_is_degenerate() {
        let g = quantize_group(&[5.0; 64]).unwrap();
        assert!(g.codes.iter().all(|&c| c == 0));
        assert_eq!(g.scale, bf16::ONE);
        assert_eq!(g.bias, bf16::from_f32(5.0));
    }

    #[test]
    fn ramp_spans_exactly_fifteen_steps() {
        let vals: Vec<f32> = (0..64).map(|i| (i % 16) as f32).collect();
        let g = quantize_group(&vals).unwrap();
        assert_eq!(g.scale, bf16::ONE);
        assert_eq!(g.bias, bf16::ZERO);
        let expect: Vec<u8> = (0..64).map(|i| (i % 16) as u8).collect();
        assert_eq!(g.codes, expect);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut v = vec![0.0f32; 64];
        v[3] = f32::NAN;
        assert!(matches!(quantize_group(&v), Err(CacheError::InvalidValue(_))));
        v[3] = f32::INFINITY;
        assert!(matches!(quantize_group(&v), Err(CacheError::InvalidValue(_))));
        let overflow = [f32::MAX, -f32::MAX];
        assert!(matches!(quantize_group(&overflow), Err(CacheError::InvalidValue(_))));
    }

    #[test]
    fn tiny_range_keeps_positive_scale() {
        let g = quantize_group(&[1e-45, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(g.scale.to_f32() > 0.0);
    }

    #[test]
    fn all_zero_tensor() {
        let q = quantize_tensor(Array3::<f32>::zeros((2, 4, 64)).view(), 64).unwrap();
        assert!(q.packed().iter().all(|&w| w == 0));
        assert!(q.biases().iter().all(|&b| b == bf16::ZERO));
        assert!(q.scales().iter().all(|&s| s == bf16::ONE));
        assert_eq!(q.packed().len(), 2 * 4 * 8);
        assert_eq!(q.scales().len(), 2 * 4);
    }

    #[test]
    fn constant_and_ramp_round_trip_exactly() {
        let c = Array3::from_elem((2, 3, 64), 5.0f32);
        assert_eq!(dequantize_tensor(&quantize_tensor(c.view(), 64).unwrap()), c);
        let r = Array3::from_shape_fn((1, 2, 64), |(_, _, i)| (i % 16) as f32);
        assert_eq!(dequantize_tensor(&quantize_tensor(r.view(), 64).unwrap()), r);
    }

    #[test]
    fn pack_layout_is_low_nibble_first() {
        let codes = [1u8, 2, 3, 4, 5, 6, 7, 15];
        assert_eq!(pack_codes(&codes), vec![0xF765_4321]);
    }

    #[test]
    fn spec_shape_check() {
        let spec = preset("deepseek-v2-lite-16b").unwrap();
        let k = Array3::<f32>::zeros((16, 3, 192));
        assert!(quantize_for_spec(k.view(), &spec, KvRole::Key).is_ok());
        assert!(matches!(
            quantize_for_spec(k.view(), &spec, KvRole::Value),
            Err(CacheError::ShapeError(_))
        ));
        let q = quantize_for_spec(Array3::<f32>::zeros((16, 3, 128)).view(), &spec, KvRole::Value)
            .unwrap();
        assert_eq!(q.groups_per_row(), 2);
    }

    #[test]
    fn slicing_concat_and_padding() {
        let vals = Array3::from_shape_fn((2, 5, 16), |(h, t, i)| (h * 100 + t * 10 + i) as f32);
        let q = quantize_tensor(vals.view(), 8).unwrap();
        let a = q.slice_tokens(0, 2);
        let b = q.slice_tokens(2, 5);
        assert_eq!(QuantizedTensor::concat_tokens(&[&a, &b]).unwrap(), q);
        let h0 = q.slice_heads(0, 1);
        let h1 = q.slice_heads(1, 2);
        assert_eq!(QuantizedTensor::stack_heads(&[&h0, &h1]).unwrap(), q);
        let padded = q.pad_left(3);
        assert_eq!(padded.tokens(), 8);
        assert_eq!(padded.slice_tokens(3, 8), q);
        let deq = dequantize_tensor(&padded.slice_tokens(0, 3));
        assert!(deq.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn memory_formulas() {
        let gemma = preset("gemma3-12b").unwrap();
        assert_eq!(fp16_bytes(&gemma, 4096) / 48, 33_554_432);
        assert_eq!(q4_layer_bytes(&gemma, 4096), 9_437_184);
        assert_eq!(q4_bytes(&gemma, 4096), 432 << 20);
        assert_eq!(fp16_bytes(&gemma, 4096), 1536 << 20);
        let llama = preset("llama31-8b").unwrap();
        assert_eq!(fp16_bytes(&llama, 4096), 512 << 20);
        assert_eq!(q4_bytes(&llama, 4096), 144 << 20);
        assert_eq!(memory_ratio(64), 0.28125);
        assert_eq!(memory_ratio(8), 0.5);
        for g in [1, 2, 8, 64, 1 << 20] {
            assert!(memory_ratio(g) > 0.25);
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(codes in proptest::collection::vec(0u8..16, 0..32usize)
            .prop_map(|mut v| { v.truncate(v.len() / 8 * 8); v })) {
            prop_assert_eq!(unpack_codes(&pack_codes(&codes)), codes);
        }

        #[test]
        fn codes_stay_in_range(vals in proptest::collection::vec(-1e6f32..1e6, 64)) {
            let g = quantize_group(&vals).unwrap();
            prop_assert!(g.codes.iter().all(|&c| c <= MAX_CODE));
            prop_assert!(g.scale.to_f32() > 0.0);
        }
    }
}
