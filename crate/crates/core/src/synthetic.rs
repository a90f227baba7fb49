//! Deterministic stand-in model for exercising the cache machinery.
//!
//! Text splits into whitespace-led pieces of at most 8 chars. Token ids hash
//! `(agent, position)`; KV values are uniform in `[-1, 1)` from a ChaCha
//! stream keyed by `(agent, layer, position)`. Generated tokens render as
//! `" x"` plus 5 hex digits, which re-tokenizes to exactly one piece.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array3, Array4};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::agent_cache::{AgentCache, LayerKv};
use crate::batch_cache::{BatchCache, BatchLayerKv};
use crate::error::{CacheError, Result};
use crate::model_spec::ModelCacheSpec;
use crate::scheduler::{Decoded, Engine, EngineCounters, GeneratedToken, Tokenized};

pub const MAX_PIECE_CHARS: usize = 8;

/// Start offsets (in chars) of the pieces of `text`.
pub fn piece_offsets(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut prev_ws = true;
    let mut len = 0;
    for (i, ch) in text.chars().enumerate() {
        let ws = ch.is_whitespace();
        if i == 0 || (ws && !prev_ws) || len == MAX_PIECE_CHARS {
            starts.push(i);
            len = 0;
        }
        len += 1;
        prev_ws = ws;
    }
    starts
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn token_id(agent_id: &str, position: usize) -> u32 {
    let d = digest(&[b"token", agent_id.as_bytes(), &(position as u64).to_le_bytes()]);
    u32::from_le_bytes([d[0], d[1], d[2], d[3]])
}

pub fn token_text(token_id: u32) -> String {
    format!(" x{:05x}", token_id & 0xF_FFFF)
}

/// KV for one token at one layer: K `(heads, dk)` then V `(heads, dv)`, row-major.
pub fn token_kv(spec: &ModelCacheSpec, agent_id: &str, layer: usize, position: usize) -> (Vec<f32>, Vec<f32>) {
    let seed = digest(&[
        b"kv",
        agent_id.as_bytes(),
        &(layer as u64).to_le_bytes(),
        &(position as u64).to_le_bytes(),
    ]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let h = spec.num_kv_heads();
    let k = (0..h * spec.k_head_dim()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let v = (0..h * spec.v_head_dim()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    (k, v)
}

/// Per-layer KV for positions `start..start + n` of one agent.
pub fn agent_kv(spec: &ModelCacheSpec, agent_id: &str, start: usize, n: usize) -> Vec<LayerKv> {
    let (h, dk, dv) = (spec.num_kv_heads(), spec.k_head_dim(), spec.v_head_dim());
    (0..spec.num_layers())
        .map(|layer| {
            let mut k = Array3::zeros((h, n, dk));
            let mut v = Array3::zeros((h, n, dv));
            for t in 0..n {
                let (kt, vt) = token_kv(spec, agent_id, layer, start + t);
                for head in 0..h {
                    for i in 0..dk {
                        k[[head, t, i]] = kt[head * dk + i];
                    }
                    for i in 0..dv {
                        v[[head, t, i]] = vt[head * dv + i];
                    }
                }
            }
            LayerKv { k, v }
        })
        .collect()
}

pub struct SyntheticEngine {
    spec: Arc<ModelCacheSpec>,
    busy: AtomicBool,
    violations: AtomicU64,
    prefill_calls: AtomicU64,
    prefill_tokens: AtomicU64,
    decode_steps: AtomicU64,
    decode_rows: AtomicU64,
    failing: Mutex<HashSet<String>>,
}

/// Marks the engine busy for the duration of one call.
struct Lane<'a>(&'a SyntheticEngine);

impl Drop for Lane<'_> {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::SeqCst);
    }
}

impl SyntheticEngine {
    pub fn new(spec: Arc<ModelCacheSpec>) -> Self {
        SyntheticEngine {
            spec,
            busy: AtomicBool::new(false),
            violations: AtomicU64::new(0),
            prefill_calls: AtomicU64::new(0),
            prefill_tokens: AtomicU64::new(0),
            decode_steps: AtomicU64::new(0),
            decode_rows: AtomicU64::new(0),
            failing: Mutex::new(HashSet::new()),
        }
    }

    /// Makes every engine call involving `agent_id` fail.
    pub fn fail_agent(&self, agent_id: &str) {
        self.failing.lock().insert(agent_id.to_string());
    }

    pub fn heal_agent(&self, agent_id: &str) {
        self.failing.lock().remove(agent_id);
    }

    fn enter(&self) -> Lane<'_> {
        if self.busy.swap(true, Ordering::SeqCst) {
            self.violations.fetch_add(1, Ordering::SeqCst);
        }
        Lane(self)
    }

    fn check(&self, agent_id: &str) -> Result<()> {
        if self.failing.lock().contains(agent_id) {
            return Err(CacheError::Engine(format!("injected failure for agent {agent_id:?}")));
        }
        Ok(())
    }
}

impl Engine for SyntheticEngine {
    fn tokenize(&self, agent_id: &str, start_pos: usize, text: &str) -> Tokenized {
        let char_offsets = piece_offsets(text);
        let token_ids = (0..char_offsets.len()).map(|i| token_id(agent_id, start_pos + i)).collect();
        Tokenized { token_ids, char_offsets }
    }

    fn prefill_chunk(&self, cache: &AgentCache, token_ids: &[u32]) -> Result<Vec<LayerKv>> {
        let _lane = self.enter();
        self.check(&cache.agent_id)?;
        let kv = agent_kv(&self.spec, &cache.agent_id, cache.token_count(), token_ids.len());
        self.prefill_calls.fetch_add(1, Ordering::SeqCst);
        self.prefill_tokens.fetch_add(token_ids.len() as u64, Ordering::SeqCst);
        Ok(kv)
    }

    fn decode_step(&self, batch: &BatchCache, last_tokens: &[u32]) -> Result<Decoded> {
        let _lane = self.enter();
        let b = batch.batch();
        if last_tokens.len() != b {
            return Err(CacheError::ShapeError(format!("{} last tokens for batch {b}", last_tokens.len())));
        }
        for agent in batch.agent_ids() {
            self.check(agent)?;
        }
        let spec = &self.spec;
        let (h, dk, dv) = (spec.num_kv_heads(), spec.k_head_dim(), spec.v_head_dim());
        let mut tokens = Vec::with_capacity(b);
        let mut kv: Vec<BatchLayerKv> = (0..spec.num_layers())
            .map(|_| BatchLayerKv { k: Array4::zeros((b, h, 1, dk)), v: Array4::zeros((b, h, 1, dv)) })
            .collect();
        for (row, agent) in batch.agent_ids().iter().enumerate() {
            let pos = batch.valid_lens()[row];
            let id = token_id(agent, pos);
            tokens.push(GeneratedToken { token_id: id, text: token_text(id) });
            for (layer, lkv) in kv.iter_mut().enumerate() {
                let (kt, vt) = token_kv(spec, agent, layer, pos);
                for head in 0..h {
                    for i in 0..dk {
                        lkv.k[[row, head, 0, i]] = kt[head * dk + i];
                    }
                    for i in 0..dv {
                        lkv.v[[row, head, 0, i]] = vt[head * dv + i];
                    }
                }
            }
        }
        self.decode_steps.fetch_add(1, Ordering::SeqCst);
        self.decode_rows.fetch_add(b as u64, Ordering::SeqCst);
        Ok(Decoded { tokens, kv })
    }

    fn counters(&self) -> EngineCounters {
        EngineCounters {
            prefill_calls: self.prefill_calls.load(Ordering::SeqCst),
            prefill_tokens: self.prefill_tokens.load(Ordering::SeqCst),
            decode_steps: self.decode_steps.load(Ordering::SeqCst),
            decode_rows: self.decode_rows.load(Ordering::SeqCst),
            reentrancy_violations: self.violations.load(Ordering::SeqCst),
        }
    }
}
