//! Per-agent isolated block storage with a byte budget and LRU paging.
//!
//! Each agent owns its own blocks; nothing is shared between agents. When
//! resident bytes exceed the budget, whole agents are written to disk in
//! least-recently-touched order (ties by agent id) and become Warm. Warm
//! agents reload transparently on access.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::ReentrantMutex;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

pub use crate::agent_cache::{AgentCache, CacheState, KVBlock, LayerKv};
use crate::error::{CacheError, Result};
use crate::model_spec::ModelCacheSpec;
use crate::persistence::{self, CacheFilePair};

/// 10.2 GiB.
pub const DEFAULT_BUDGET_BYTES: u64 = 10_952_166_604;

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub budget_bytes: u64,
    pub cache_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub resident_bytes: u64,
    pub budget_bytes: u64,
    pub agents_hot: usize,
    pub agents_warm: usize,
    pub evictions: u64,
    pub reloads: u64,
    pub eviction_failures: u64,
}

/// Record of one eviction, drained by the scheduler into events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Eviction {
    pub agent_id: String,
    pub bytes: u64,
}

#[derive(Debug)]
enum Slot {
    Hot(AgentCache),
    Warm,
}

pub struct BlockPool {
    spec: Arc<ModelCacheSpec>,
    fingerprint: u64,
    config: PoolConfig,
    agents: BTreeMap<String, Slot>,
    clock: u64,
    resident_bytes: u64,
    evictions: u64,
    reloads: u64,
    eviction_failures: u64,
    eviction_log: Vec<Eviction>,
    io_guard: Arc<ReentrantMutex<()>>,
}

impl BlockPool {
    pub fn new(spec: Arc<ModelCacheSpec>, config: PoolConfig) -> Self {
        BlockPool {
            fingerprint: spec.fingerprint(),
            spec,
            config,
            agents: BTreeMap::new(),
            clock: 0,
            resident_bytes: 0,
            evictions: 0,
            reloads: 0,
            eviction_failures: 0,
            eviction_log: Vec::new(),
            io_guard: Arc::new(ReentrantMutex::new(())),
        }
    }

    pub fn spec(&self) -> &Arc<ModelCacheSpec> {
        &self.spec
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    /// Guard serializing disk I/O on pool data. Other lanes that read or
    /// persist blocks take the same guard.
    pub fn io_guard(&self) -> Arc<ReentrantMutex<()>> {
        Arc::clone(&self.io_guard)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn state(&self, agent_id: &str) -> CacheState {
        match self.agents.get(agent_id) {
            Some(Slot::Hot(_)) => CacheState::Hot,
            Some(Slot::Warm) => CacheState::Warm,
            None => CacheState::Cold,
        }
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.agents.keys().cloned().collect()
    }

    pub fn hot_agent_ids(&self) -> Vec<String> {
        self.agents
            .iter()
            .filter(|(_, s)| matches!(s, Slot::Hot(_)))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Resident view without touching the LRU clock or reloading.
    pub fn peek(&self, agent_id: &str) -> Option<&AgentCache> {
        match self.agents.get(agent_id) {
            Some(Slot::Hot(c)) => Some(c),
            _ => None,
        }
    }

    pub fn stats(&self) -> PoolStats {
        let hot = self.agents.values().filter(|s| matches!(s, Slot::Hot(_))).count();
        PoolStats {
            resident_bytes: self.resident_bytes,
            budget_bytes: self.config.budget_bytes,
            agents_hot: hot,
            agents_warm: self.agents.len() - hot,
            evictions: self.evictions,
            reloads: self.reloads,
            eviction_failures: self.eviction_failures,
        }
    }

    pub fn take_evictions(&mut self) -> Vec<Eviction> {
        std::mem::take(&mut self.eviction_log)
    }

    /// Quantizes and appends tokens for `agent_id`, creating the agent if needed.
    /// Returns the agent's new token total.
    pub fn append_tokens(
        &mut self,
        agent_id: &str,
        kv: &[LayerKv],
        token_ids: &[u32],
        char_offsets: &[usize],
        text: &str,
    ) -> Result<usize> {
        let now = self.tick();
        self.make_resident(agent_id, true)?;
        let spec = Arc::clone(&self.spec);
        let Some(Slot::Hot(cache)) = self.agents.get_mut(agent_id) else {
            unreachable!("agent made resident above")
        };
        let before = cache.nbytes();
        cache.append(&spec, kv, token_ids, char_offsets, text)?;
        cache.last_touched = now;
        let total = cache.token_count();
        self.resident_bytes = self.resident_bytes - before + cache.nbytes();
        self.enforce_budget(agent_id);
        Ok(total)
    }

    /// Inserts or replaces an agent's whole cache.
    pub fn put_cache(&mut self, mut cache: AgentCache) -> Result<()> {
        if cache.spec_fingerprint != self.fingerprint {
            return Err(CacheError::SpecMismatch {
                expected: self.fingerprint,
                found: cache.spec_fingerprint,
            });
        }
        cache.validate(&self.spec)?;
        let now = self.tick();
        cache.last_touched = now;
        cache.state = CacheState::Hot;
        let id = cache.agent_id.clone();
        let added = cache.nbytes();
        if let Some(Slot::Hot(old)) = self.agents.insert(id.clone(), Slot::Hot(cache)) {
            self.resident_bytes -= old.nbytes();
        }
        self.resident_bytes += added;
        self.enforce_budget(&id);
        Ok(())
    }

    /// Returns the agent's cache, reloading it from disk if Warm (or if only
    /// a file pair exists).
    pub fn get_cache(&mut self, agent_id: &str) -> Result<&AgentCache> {
        let now = self.tick();
        self.make_resident(agent_id, false)?;
        self.enforce_budget(agent_id);
        match self.agents.get_mut(agent_id) {
            Some(Slot::Hot(c)) => {
                c.last_touched = now;
                Ok(c)
            }
            // Only reachable when the agent alone exceeds the budget.
            _ => Err(CacheError::OverBudget {
                agent: agent_id.to_string(),
                needed: 0,
                budget: self.config.budget_bytes,
            }),
        }
    }

    /// Cloned cache, or `None` for an unknown agent with no file on disk.
    pub fn checkout(&mut self, agent_id: &str) -> Result<Option<AgentCache>> {
        match self.get_cache(agent_id) {
            Ok(c) => Ok(Some(c.clone())),
            Err(CacheError::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Keeps only the first `tokens` tokens of a resident or reloadable agent.
    pub fn truncate(&mut self, agent_id: &str, tokens: usize) -> Result<()> {
        let now = self.tick();
        self.make_resident(agent_id, false)?;
        let Some(Slot::Hot(cache)) = self.agents.get_mut(agent_id) else {
            unreachable!("agent made resident above")
        };
        let before = cache.nbytes();
        cache.truncate(tokens);
        cache.last_touched = now;
        self.resident_bytes = self.resident_bytes - before + cache.nbytes();
        self.enforce_budget(agent_id);
        Ok(())
    }

    fn make_resident(&mut self, agent_id: &str, create: bool) -> Result<()> {
        match self.agents.get(agent_id) {
            Some(Slot::Hot(_)) => return Ok(()),
            Some(Slot::Warm) => {}
            None => {
                let on_disk = persistence::sidecar_path(&self.config.cache_dir, agent_id).exists();
                if !on_disk {
                    if !create {
                        return Err(CacheError::NotFound(format!("agent {agent_id:?}")));
                    }
                    let cache = AgentCache::empty(agent_id, &self.spec);
                    self.agents.insert(agent_id.to_string(), Slot::Hot(cache));
                    return Ok(());
                }
            }
        }
        let cache = self.load_from_disk(agent_id)?;
        let bytes = cache.nbytes();
        if bytes > self.config.budget_bytes {
            return Err(CacheError::OverBudget {
                agent: agent_id.to_string(),
                needed: bytes,
                budget: self.config.budget_bytes,
            });
        }
        self.resident_bytes += bytes;
        self.reloads += 1;
        debug!(agent = agent_id, bytes, "reloaded agent cache");
        self.agents.insert(agent_id.to_string(), Slot::Hot(cache));
        Ok(())
    }

    fn load_from_disk(&self, agent_id: &str) -> Result<AgentCache> {
        let _io = self.io_guard.lock();
        let pair = persistence::locate(&self.config.cache_dir, agent_id)?
            .ok_or_else(|| CacheError::NotFound(format!("agent {agent_id:?} has no cache file")))?;
        let mut cache = persistence::load_agent(&pair, self.fingerprint)?;
        if cache.agent_id != agent_id {
            return Err(CacheError::CorruptFile(format!(
                "file for {agent_id:?} holds agent {:?}",
                cache.agent_id
            )));
        }
        cache.state = CacheState::Hot;
        Ok(cache)
    }

    /// Loads an agent from disk into memory (no-op if already Hot).
    pub fn restore(&mut self, agent_id: &str) -> Result<u64> {
        self.tick();
        if let Some(Slot::Hot(c)) = self.agents.get(agent_id) {
            return Ok(c.nbytes());
        }
        let is_known = self.agents.contains_key(agent_id);
        let on_disk = persistence::sidecar_path(&self.config.cache_dir, agent_id).exists();
        if !is_known && !on_disk {
            return Err(CacheError::NotFound(format!("agent {agent_id:?} has no cache file")));
        }
        self.make_resident(agent_id, false)?;
        let now = self.clock;
        let bytes = match self.agents.get_mut(agent_id) {
            Some(Slot::Hot(c)) => {
                c.last_touched = now;
                c.nbytes()
            }
            _ => 0,
        };
        self.enforce_budget(agent_id);
        Ok(bytes)
    }

    /// Writes a Hot agent to disk without evicting it.
    pub fn persist(&mut self, agent_id: &str) -> Result<(CacheFilePair, u64)> {
        self.tick();
        let Some(Slot::Hot(cache)) = self.agents.get(agent_id) else {
            return Err(CacheError::NotFound(format!("agent {agent_id:?} is not resident")));
        };
        let _io = self.io_guard.lock();
        let pair = persistence::save_agent(cache, &self.spec, &self.config.cache_dir)?;
        Ok((pair, cache.nbytes()))
    }

    fn lru_victim(&self, exclude: Option<&str>) -> Option<String> {
        // BTreeMap iterates in id order, so min_by_key keeps the smallest id on ties.
        self.agents
            .iter()
            .filter_map(|(id, s)| match s {
                Slot::Hot(c) if Some(id.as_str()) != exclude => Some((c.last_touched, id)),
                _ => None,
            })
            .min_by_key(|(t, _)| *t)
            .map(|(_, id)| id.clone())
    }

    /// Persists the least-recently-touched Hot agent and drops its blocks.
    pub fn evict_lru(&mut self) -> Result<Option<String>> {
        self.tick();
        match self.lru_victim(None) {
            Some(id) => self.evict(&id).map(|_| Some(id)),
            None => Ok(None),
        }
    }

    fn evict(&mut self, agent_id: &str) -> Result<u64> {
        let Some(Slot::Hot(cache)) = self.agents.get(agent_id) else {
            return Err(CacheError::NotFound(format!("agent {agent_id:?} is not resident")));
        };
        let saved = {
            let _io = self.io_guard.lock();
            persistence::save_agent(cache, &self.spec, &self.config.cache_dir)
        };
        if let Err(e) = saved {
            self.eviction_failures += 1;
            return Err(CacheError::EvictionFailed { agent: agent_id.to_string(), reason: e.to_string() });
        }
        let bytes = cache.nbytes();
        self.agents.insert(agent_id.to_string(), Slot::Warm);
        self.resident_bytes -= bytes;
        self.evictions += 1;
        self.eviction_log.push(Eviction { agent_id: agent_id.to_string(), bytes });
        debug!(agent = agent_id, bytes, "evicted agent cache");
        Ok(bytes)
    }

    /// Evicts other agents in LRU order until under budget; as a last resort
    /// evicts `pinned` itself.
    fn enforce_budget(&mut self, pinned: &str) {
        while self.resident_bytes > self.config.budget_bytes {
            let victim = self.lru_victim(Some(pinned)).or_else(|| {
                matches!(self.agents.get(pinned), Some(Slot::Hot(_))).then(|| pinned.to_string())
            });
            let Some(victim) = victim else { break };
            if let Err(e) = self.evict(&victim) {
                warn!(error = %e, "pool left over budget");
                break;
            }
        }
    }

    /// Frees an agent's resident blocks and forgets it. Without `delete_disk`
    /// a resident agent is written to disk first, so a later access reloads it.
    pub fn drop_agent(&mut self, agent_id: &str, delete_disk: bool) -> Result<()> {
        self.tick();
        let on_disk = persistence::sidecar_path(&self.config.cache_dir, agent_id).exists();
        let slot = match self.agents.get(agent_id) {
            Some(_) => self.agents.remove(agent_id),
            None if on_disk => None,
            None => return Err(CacheError::NotFound(format!("agent {agent_id:?}"))),
        };
        if let Some(Slot::Hot(cache)) = &slot {
            self.resident_bytes -= cache.nbytes();
            if !delete_disk {
                let _io = self.io_guard.lock();
                if let Err(e) = persistence::save_agent(cache, &self.spec, &self.config.cache_dir) {
                    // Keep the agent rather than lose its data.
                    self.resident_bytes += cache.nbytes();
                    self.agents.insert(agent_id.to_string(), slot.expect("matched Some"));
                    return Err(e);
                }
            }
        }
        if delete_disk {
            let _io = self.io_guard.lock();
            persistence::delete_agent_files(&self.config.cache_dir, agent_id)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::RawSpec;
    use ndarray::Array3;

    fn spec() -> Arc<ModelCacheSpec> {
        Arc::new(
            RawSpec { block_tokens: 16, group_size: 8, ..RawSpec::uniform("p", 2, 1, 1, 8, 8) }
                .build()
                .unwrap(),
        )
    }

    fn kv(spec: &ModelCacheSpec, t: usize, seed: usize) -> Vec<LayerKv> {
        (0..spec.num_layers())
            .map(|l| LayerKv {
                k: Array3::from_shape_fn((1, t, 8), |(_, i, d)| ((seed + l + i * 3 + d) % 11) as f32),
                v: Array3::from_shape_fn((1, t, 8), |(_, i, d)| ((seed * 7 + l + i + d) % 5) as f32),
            })
            .collect()
    }

    fn append(pool: &mut BlockPool, agent: &str, t: usize) -> usize {
        let s = Arc::clone(pool.spec());
        let text = "x".repeat(t);
        let offs: Vec<usize> = (0..t).collect();
        pool.append_tokens(agent, &kv(&s, t, agent.len()), &vec![1; t], &offs, &text).unwrap()
    }

    fn pool(budget: u64) -> (BlockPool, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let p = BlockPool::new(
            spec(),
            PoolConfig { budget_bytes: budget, cache_dir: dir.path().to_path_buf() },
        );
        (p, dir)
    }

    // 2 layers * (K + V) * (4 bytes packed + 4 bytes scale/bias) per token.
    const BYTES_PER_TOKEN: u64 = 2 * 2 * 8;

    #[test]
    fn footprint_tracks_q4_accounting() {
        let (mut p, _d) = pool(u64::MAX);
        append(&mut p, "a", 20);
        append(&mut p, "b", 3);
        assert_eq!(p.stats().resident_bytes, 23 * BYTES_PER_TOKEN);
        assert_eq!(
            p.stats().resident_bytes,
            crate::quant_codec::q4_bytes(p.spec(), 20) + crate::quant_codec::q4_bytes(p.spec(), 3)
        );
    }

    #[test]
    fn lru_order_and_touch() {
        let (mut p, _d) = pool(u64::MAX);
        for a in ["a", "b", "c"] {
            append(&mut p, a, 4);
        }
        p.get_cache("a").unwrap();
        assert_eq!(p.evict_lru().unwrap().as_deref(), Some("b"));
        assert_eq!(p.state("b"), CacheState::Warm);
        assert_eq!(p.evict_lru().unwrap().as_deref(), Some("c"));
        assert_eq!(p.evict_lru().unwrap().as_deref(), Some("a"));
        assert_eq!(p.evict_lru().unwrap(), None);
        assert_eq!(p.stats().resident_bytes, 0);
    }

    #[test]
    fn ties_break_by_agent_id() {
        let (mut p, _d) = pool(u64::MAX);
        let s = spec();
        for id in ["zed", "amy"] {
            let mut c = AgentCache::empty(id, &s);
            c.append(&s, &kv(&s, 2, 0), &[1, 2], &[0, 1], "ab").unwrap();
            p.resident_bytes += c.nbytes();
            p.agents.insert(id.into(), Slot::Hot(c));
        }
        assert_eq!(p.evict_lru().unwrap().as_deref(), Some("amy"));
    }

    #[test]
    fn evict_then_reload_is_bit_identical() {
        let (mut p, _d) = pool(u64::MAX);
        append(&mut p, "a", 40);
        let snapshot = p.get_cache("a").unwrap().clone();
        p.evict_lru().unwrap();
        let back = p.get_cache("a").unwrap().clone();
        assert_eq!(back.content_digest(), snapshot.content_digest());
        assert_eq!(back.blocks, snapshot.blocks);
        assert_eq!(p.stats().reloads, 1);
        assert_eq!(p.stats().evictions, 1);
    }

    #[test]
    fn budget_forces_eviction() {
        let (mut p, _d) = pool(30 * BYTES_PER_TOKEN);
        append(&mut p, "a", 20);
        append(&mut p, "b", 20);
        let st = p.stats();
        assert!(st.resident_bytes <= st.budget_bytes);
        assert_eq!(p.state("a"), CacheState::Warm);
        assert_eq!(p.state("b"), CacheState::Hot);
        p.get_cache("a").unwrap();
        assert_eq!(p.state("b"), CacheState::Warm);
        assert_eq!(p.take_evictions().len(), 2);
    }

    #[test]
    fn oversized_agent_is_paged_out() {
        let (mut p, _d) = pool(10 * BYTES_PER_TOKEN);
        append(&mut p, "a", 20);
        assert_eq!(p.state("a"), CacheState::Warm);
        assert_eq!(p.stats().resident_bytes, 0);
        assert!(matches!(p.get_cache("a"), Err(CacheError::OverBudget { .. })));
    }

    #[test]
    fn eviction_failure_keeps_agent_hot() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("not-a-dir");
        std::fs::write(&file, b"x").unwrap();
        let mut p = BlockPool::new(spec(), PoolConfig { budget_bytes: u64::MAX, cache_dir: file });
        append(&mut p, "a", 4);
        assert!(matches!(p.evict_lru(), Err(CacheError::EvictionFailed { .. })));
        assert_eq!(p.state("a"), CacheState::Hot);
        assert_eq!(p.stats().eviction_failures, 1);
    }

    #[test]
    fn drop_semantics() {
        let (mut p, _d) = pool(u64::MAX);
        append(&mut p, "a", 5);
        let digest = p.get_cache("a").unwrap().content_digest();
        p.drop_agent("a", false).unwrap();
        assert_eq!(p.state("a"), CacheState::Cold);
        assert_eq!(p.stats().resident_bytes, 0);
        assert_eq!(p.get_cache("a").unwrap().content_digest(), digest);
        p.drop_agent("a", true).unwrap();
        assert!(matches!(p.get_cache("a"), Err(CacheError::NotFound(_))));
        assert!(matches!(p.drop_agent("nobody", true), Err(CacheError::NotFound(_))));
        assert!(matches!(p.get_cache("nobody"), Err(CacheError::NotFound(_))));
    }

    #[test]
    fn append_to_warm_agent_reloads_first() {
        let (mut p, _d) = pool(u64::MAX);
        append(&mut p, "a", 10);
        p.evict_lru().unwrap();
        assert_eq!(append(&mut p, "a", 10), 20);
        assert_eq!(p.get_cache("a").unwrap().block_token_counts(), vec![16, 4]);
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let (mut p, _d) = pool(u64::MAX);
        let other = RawSpec { block_tokens: 32, group_size: 8, ..RawSpec::uniform("p", 2, 1, 1, 8, 8) }
            .build()
            .unwrap();
        let c = AgentCache::empty("a", &other);
        assert!(matches!(p.put_cache(c), Err(CacheError::SpecMismatch { .. })));
    }
}
